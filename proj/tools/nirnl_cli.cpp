// nirnl: synthesize, corrupt, split, train, evaluate and ablate
// noisy-label cross-modal retrieval models.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "nirnl/nirnl.hpp"

namespace fs = std::filesystem;
using namespace nirnl;

namespace {

// Separate streams per subcommand: the same --seed given to corrupt and split
// must not yield correlated permutations.
enum : std::uint64_t { kSynthStream = 101, kCorruptStream = 102, kSplitStream = 103 };

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + p.string() + " for writing");
  out << j.dump(2) << '\n';
}

void save_pair(const fs::path& dir, const EncoderPair& enc) {
  save_checkpoint(dir / "visual", enc.visual);
  save_checkpoint(dir / "text", enc.text);
}

EncoderPair load_pair(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("checkpoint directory not found: " + dir.string());
  return {load_checkpoint(dir / "visual"), load_checkpoint(dir / "text")};
}

SplitManifest require_splits(const fs::path& data, std::size_t n) {
  const auto p = data / "splits.json";
  if (!fs::exists(p)) throw std::runtime_error("missing " + p.string() + " (run the split subcommand first)");
  return load_splits(p, n);
}

TrainConfig require_config(const fs::path& p) {
  if (!fs::exists(p)) throw std::runtime_error("config file not found: " + p.string());
  return load_config(p);
}

// Writes metrics.jsonl, per-epoch checkpoints, partition exports and the
// selected model under `out`.
TrainResult train_into(const PairedDataset& ds, const SplitManifest& splits, const TrainConfig& cfg, const fs::path& out,
                       bool keep_epoch_checkpoints) {
  fs::create_directories(out);
  std::ofstream(out / "config.cfg", std::ios::trunc) << format_config(cfg);
  std::ofstream metrics(out / "metrics.jsonl", std::ios::trunc);
  std::ofstream report;
  if (ds.clean_labels) {
    report.open(out / "partition_report.csv", std::ios::trunc);
    report << "epoch,n_pure,n_hard,n_noisy,pure_purity,noisy_recall,correction_accuracy\n";
  }
  auto result = run(ds, splits, cfg, [&](const EpochState& st) {
    metrics << to_json(st.record).dump() << '\n';
    metrics.flush();
    if (report.is_open() && st.refinement) {
      const auto& r = st.record;
      report << r.epoch << ',' << r.n_pure << ',' << r.n_hard << ',' << r.n_noisy << ',' << fmt(*r.pure_purity) << ','
             << fmt(*r.noisy_recall) << ',' << fmt(*r.correction_accuracy) << '\n';
    }
    if (keep_epoch_checkpoints) {
      const auto dir = out / "checkpoints" / ("epoch_" + std::to_string(st.record.epoch));
      save_pair(dir, st.params);
      if (st.refinement) write_partition_csv(dir / "partition.csv", st.refinement->assignment, st.train_ids);
    }
    std::cerr << "epoch " << st.record.epoch << " loss " << fmt(st.record.loss_total) << " val map "
              << fmt(st.record.val_map_i2t) << "/" << fmt(st.record.val_map_t2i) << " tags " << st.record.n_pure << "/"
              << st.record.n_hard << "/" << st.record.n_noisy << '\n';
  });
  save_pair(out / "best", result.best);
  nlohmann::ordered_json summary = {{"best_epoch", result.best_epoch}, {"variant", to_string(cfg.variant)}};
  if (result.best_epoch > 0) {
    const auto& r = result.log[result.best_epoch - 1];
    summary["val_map_i2t"] = r.val_map_i2t;
    summary["val_map_t2i"] = r.val_map_t2i;
  }
  write_json(out / "train_summary.json", summary);
  return result;
}

struct SplitEval {
  MapResult i2t, t2i;
  PrCurve pr_i2t, pr_t2i;
};

SplitEval evaluate(const EncoderPair& enc, const PairedDataset& ds, std::span<const std::size_t> ids) {
  if (ids.empty()) throw std::runtime_error("evaluation split is empty");
  const auto fv = forward(enc.visual, ds.visual.gather_rows(ids));
  const auto ft = forward(enc.text, ds.text.gather_rows(ids));
  std::vector<int> labels;
  for (auto i : ids) labels.push_back(ds.reference_labels()[i]);
  const auto rk_i2t = rank_gallery(fv, ft, labels, labels);
  const auto rk_t2i = rank_gallery(ft, fv, labels, labels);
  return {mean_average_precision(rk_i2t), mean_average_precision(rk_t2i), pr_curve(rk_i2t), pr_curve(rk_t2i)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noisy-label cross-modal retrieval lab"};
  app.require_subcommand(1);

  SynthOptions so;
  std::string out_dir, data_dir, config_path, checkpoint_dir, split_name = "test";
  std::uint64_t seed = 0;
  double rate = 0;
  std::size_t n_train = 0, n_val = 0, n_test = 0;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic paired dataset");
  synth->add_option("--out", out_dir, "Output dataset directory")->required();
  synth->add_option("--classes", so.num_classes, "Number of classes")->required();
  synth->add_option("--n", so.n, "Number of instances")->required();
  synth->add_option("--dv", so.d_visual, "Visual feature dimension")->required();
  synth->add_option("--dt", so.d_text, "Text feature dimension")->required();
  synth->add_option("--separation", so.separation, "Distance between class centers")->required();
  synth->add_option("--noise-std", so.noise_std, "Per-coordinate noise scale")->required();
  synth->add_option("--seed", seed, "Random seed")->required();

  auto* corrupt = app.add_subcommand("corrupt", "Inject symmetric label noise");
  corrupt->add_option("--data", data_dir, "Dataset directory")->required();
  corrupt->add_option("--rate", rate, "Fraction of labels to flip")->required()->check(CLI::Range(0.0, 1.0));
  corrupt->add_option("--seed", seed, "Random seed")->required();

  auto* split = app.add_subcommand("split", "Write a random train/val/test split");
  split->add_option("--data", data_dir, "Dataset directory")->required();
  split->add_option("--train", n_train, "Training instances")->required();
  split->add_option("--val", n_val, "Validation instances")->required();
  split->add_option("--test", n_test, "Test instances")->required();
  split->add_option("--seed", seed, "Random seed")->required();

  auto* train = app.add_subcommand("train", "Train both encoders");
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--config", config_path, "key=value config file")->required();
  train->add_option("--out", out_dir, "Run output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory (visual/ and text/)")->required();
  eval->add_option("--split", split_name, "train|val|test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* ablate = app.add_subcommand("ablate", "Train every ablation variant on the same data");
  ablate->add_option("--data", data_dir, "Dataset directory")->required();
  ablate->add_option("--config", config_path, "key=value config file")->required();
  ablate->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*synth) {
      auto rng = Rng::derive(seed, kSynthStream);
      const auto ds = synth_generate(so, rng);
      save_dataset(out_dir, ds);
      fs::remove(fs::path(out_dir) / "splits.json");
      fs::remove(fs::path(out_dir) / "flips.csv");
      std::cout << "wrote " << ds.size() << " instances to " << out_dir << '\n';
    } else if (*corrupt) {
      auto ds = load_dataset(data_dir);
      // Always corrupt the clean labels so re-running is reproducible.
      const auto base = ds.clean_labels ? *ds.clean_labels : ds.labels;
      auto rng = Rng::derive(seed, kCorruptStream);
      auto res = inject_symmetric_noise(base, rate, ds.num_classes, rng);
      ds.clean_labels = base;
      ds.labels = std::move(res.labels);
      save_dataset(data_dir, ds);
      save_flips(fs::path(data_dir) / "flips.csv", res.flips);
      std::cout << "flipped " << res.flips.size() << " of " << ds.size() << " labels\n";
    } else if (*split) {
      const auto ds = load_dataset(data_dir);
      auto rng = Rng::derive(seed, kSplitStream);
      const auto s = split_dataset(ds.size(), n_train, n_val, n_test, rng);
      save_splits(fs::path(data_dir) / "splits.json", s);
      std::cout << "split " << s.train.size() << "/" << s.val.size() << "/" << s.test.size() << '\n';
    } else if (*train) {
      const auto cfg = require_config(config_path);
      const auto ds = load_dataset(data_dir);
      const auto splits = require_splits(data_dir, ds.size());
      const auto res = train_into(ds, splits, cfg, out_dir, true);
      std::cout << "best epoch " << res.best_epoch << '\n';
    } else if (*eval) {
      const auto ds = load_dataset(data_dir);
      const auto splits = require_splits(data_dir, ds.size());
      const auto enc = load_pair(checkpoint_dir);
      const auto& ids = split_name == "train" ? splits.train : split_name == "val" ? splits.val : splits.test;
      const auto ev = evaluate(enc, ds, ids);
      const fs::path ck(checkpoint_dir);
      write_json(ck / "eval_report.json", {{"map_i2t", ev.i2t.map},
                                           {"map_t2i", ev.t2i.map},
                                           {"n_queries_i2t", ev.i2t.num_queries},
                                           {"n_queries_t2i", ev.t2i.num_queries}});
      std::ofstream pr(ck / "pr_curve.csv", std::ios::trunc);
      pr << "recall,precision_i2t,precision_t2i\n";
      for (std::size_t l = 0; l < ev.pr_i2t.size(); ++l)
        pr << fmt(ev.pr_i2t[l].recall) << ',' << fmt(ev.pr_i2t[l].precision) << ',' << fmt(ev.pr_t2i[l].precision) << '\n';
      std::cout << "map_i2t " << fmt(ev.i2t.map) << " map_t2i " << fmt(ev.t2i.map) << '\n';
    } else if (*ablate) {
      const auto base_cfg = require_config(config_path);
      const auto ds = load_dataset(data_dir);
      const auto splits = require_splits(data_dir, ds.size());
      fs::create_directories(out_dir);
      std::ofstream summary(fs::path(out_dir) / "summary.csv", std::ios::trunc);
      summary << "variant,best_epoch,val_map_mean,test_map_i2t,test_map_t2i,test_map_mean\n";
      for (auto v : kAblationVariants) {
        auto cfg = base_cfg;
        cfg.variant = v;
        std::cerr << "== variant " << to_string(v) << '\n';
        const auto res = train_into(ds, splits, cfg, fs::path(out_dir) / to_string(v), false);
        const auto test = evaluate_split(res.best, ds, splits.test);
        const double val = res.best_epoch ? res.log[res.best_epoch - 1].val_map_mean() : 0.0;
        summary << to_string(v) << ',' << res.best_epoch << ',' << fmt(val) << ',' << fmt(test.i2t) << ','
                << fmt(test.t2i) << ',' << fmt(test.mean()) << '\n';
        summary.flush();
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
