#pragma once

#include "nirnl/numkit.hpp"
#include "nirnl/dataio.hpp"
#include "nirnl/encoder.hpp"
#include "nirnl/cmp.hpp"
#include "nirnl/nir.hpp"
#include "nirnl/eval.hpp"
#include "nirnl/trainer.hpp"
