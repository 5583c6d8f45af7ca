#pragma once

// Command implementations behind the msagcn executable. Each command writes
// machine-readable JSON to `out`, diagnostics to `err`, and returns the exit
// code: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "msagcn/data.hpp"
#include "msagcn/gradient_suite.hpp"
#include "msagcn/model.hpp"
#include "msagcn/train.hpp"

namespace msagcn::app {

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericError = 4 };

struct DataSource {
  std::string path;                  // canonical JSON-lines file
  std::string coords, labels;        // row-per-frame import
  std::size_t joint_count = 16;      // for import
  std::optional<SynthParams> synthetic;
  std::size_t n_per_class = 100;     // for synthetic
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "runs/latest";
  DataSource data;
  MsaGcnConfig model;
  TrainConfig train;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::size_t> epochs;
};

inline nlohmann::json to_json(const DataSource& d) {
  nlohmann::json j = nlohmann::json::object();
  if (!d.path.empty()) j["path"] = d.path;
  if (!d.coords.empty()) {
    j["coords"] = d.coords;
    j["labels"] = d.labels;
    j["joint_count"] = d.joint_count;
  }
  if (d.synthetic) {
    j["synthetic"] = msagcn::to_json(*d.synthetic);
    j["synthetic"]["n_per_class"] = d.n_per_class;
  }
  return j;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"out", c.out},
          {"data", to_json(c.data)},
          {"model", msagcn::to_json(c.model)},
          {"train", msagcn::to_json(c.train)}};
}

// Synthetic data takes the run seed unless its own section names one.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"seed", "out", "data", "model", "train"}, "config");
  RunConfig c;
  detail::read_if(j, "seed", c.seed, "config");
  detail::read_if(j, "out", c.out, "config");
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  c.train.seed = c.seed;
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown_keys(d, {"path", "coords", "labels", "joint_count", "synthetic"}, "data");
    detail::read_if(d, "path", c.data.path, "data");
    detail::read_if(d, "coords", c.data.coords, "data");
    detail::read_if(d, "labels", c.data.labels, "data");
    detail::read_if(d, "joint_count", c.data.joint_count, "data");
    if (d.contains("synthetic")) {
      SynthParams base;
      base.seed = c.seed;
      c.data.synthetic = synth_params_from_json(d["synthetic"], base);
      detail::read_if(d["synthetic"], "n_per_class", c.data.n_per_class, "data.synthetic");
      if (c.data.n_per_class == 0) throw ConfigError("data.synthetic.n_per_class must be at least 1");
    }
    if (c.data.coords.empty() != c.data.labels.empty()) {
      throw ConfigError("data.coords and data.labels must be given together");
    }
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

// Flags beat the file, the file beats defaults. A --data path replaces any
// other data source.
inline void apply(RunConfig& c, const Overrides& o) {
  if (o.seed) {
    const bool synth_follows_run = c.data.synthetic && c.data.synthetic->seed == c.seed;
    c.seed = *o.seed;
    c.train.seed = *o.seed;
    if (synth_follows_run) c.data.synthetic->seed = *o.seed;
  }
  if (o.out) c.out = *o.out;
  if (o.data) {
    c.data.path = *o.data;
    c.data.coords.clear();
    c.data.labels.clear();
    c.data.synthetic.reset();
  }
  if (o.epochs) {
    c.train.epochs = *o.epochs;
    c.train.validate();
  }
}

inline GaitDataset load_dataset(const DataSource& d) {
  GaitDataset ds;
  if (!d.path.empty()) {
    if (!std::filesystem::exists(d.path)) throw DataError("data file not found: " + d.path);
    ds = load_canonical(d.path);
  } else if (!d.coords.empty()) {
    ds = import_emotion_gait(d.coords, d.labels, d.joint_count);
  } else if (d.synthetic) {
    ds = generate_synthetic(d.n_per_class, *d.synthetic);
  } else {
    throw DataError("no data source: set data.path, data.coords/labels, data.synthetic or pass --data");
  }
  if (ds.samples.empty()) throw DataError("dataset is empty");
  ds.validate();
  return ds;
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir + ": " + ec.message());
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << text;
}

// One forward pass per sample, so sequences of different lengths can mix.
inline Tensor predict_samples(const MsaGcn& model, const GaitDataset& d) {
  if (d.joint_count != model.config().joint_count) {
    throw ConfigError("checkpoint expects " + std::to_string(model.config().joint_count) +
                      " joints, data has " + std::to_string(d.joint_count));
  }
  const std::size_t K = model.config().num_classes;
  Tensor out({d.samples.size(), K});
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    Tensor p = model.forward(preprocess(d.samples[i]), Mode::eval, nullptr);
    std::copy_n(p.ptr(), K, out.ptr() + i * K);
  }
  return out;
}

struct Experiment {
  SplitIndices split;
  TrainResult result;
  MetricReport report;
  std::string evaluated_on;
};

// Split, fit input statistics on the training part, train, and evaluate on
// the test part (falling back to validation, then training data when empty).
inline Experiment run_experiment(MsaGcn& model, const GaitDataset& ds, const TrainConfig& tc, std::uint64_t seed,
                                 const std::function<void(const EpochLog&)>& on_epoch, std::ostream* warn) {
  if (ds.joint_count != model.config().joint_count) {
    throw ConfigError("model.joint_count is " + std::to_string(model.config().joint_count) + " but the data has " +
                      std::to_string(ds.joint_count) + " joints");
  }
  Experiment e;
  e.split = split_indices(ds.labels(), seed, tc.split, warn);
  if (e.split.train.empty()) throw DataError("training split is empty");
  const GaitDataset train_part = ds.subset(e.split.train);
  model.set_input_stats(fit_channel_stats(train_part, warn));
  const TensorDataset train_set = to_tensor_dataset(train_part);
  const TensorDataset val_set = to_tensor_dataset(ds.subset(e.split.val));
  e.result = train(model, train_set, val_set.size() ? &val_set : nullptr, tc, on_epoch);
  const std::vector<std::size_t>& eval_idx =
      !e.split.test.empty() ? e.split.test : (!e.split.val.empty() ? e.split.val : e.split.train);
  e.evaluated_on = !e.split.test.empty() ? "test" : (!e.split.val.empty() ? "val" : "train");
  e.report = evaluate(model, to_tensor_dataset(ds.subset(eval_idx)));
  return e;
}

inline nlohmann::json split_json(const SplitIndices& s) {
  return {{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}};
}

// Maps the error taxonomy onto exit codes.
template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const FormatError& e) {
    err << "checkpoint/config mismatch: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumericError;
  } catch (const ShapeError& e) {
    err << "shape mismatch: " << e.what() << '\n';
    return kConfigError;
  } catch (const SequenceTooShortError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const Error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
}

inline RunConfig resolve(const std::optional<std::string>& config_path, const Overrides& o) {
  RunConfig c = config_path ? load_run_config(*config_path) : RunConfig{};
  apply(c, o);
  return c;
}

// ---------------------------------------------------------------------------

inline int cmd_train(const std::optional<std::string>& config_path, const Overrides& o, std::ostream& out,
                     std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve(config_path, o);
    const GaitDataset ds = load_dataset(cfg.data);
    ensure_dir(cfg.out);
    const std::filesystem::path dir(cfg.out);
    write_text((dir / "run_config.json").string(), to_json(cfg).dump(2) + "\n");

    const auto t0 = std::chrono::steady_clock::now();
    MsaGcn model(cfg.model, cfg.seed);
    std::ofstream log((dir / "epochs.jsonl").string());
    if (!log) throw DataError("cannot write epoch log in " + cfg.out);
    const Experiment e = run_experiment(
        model, ds, cfg.train, cfg.seed,
        [&](const EpochLog& l) {
          log << msagcn::to_json(l).dump() << '\n';
          log.flush();
          err << "epoch " << l.epoch << " lr " << l.lr << " loss " << l.train_loss << " train_mAP " << l.train_mAP;
          if (l.val_mAP) err << " val_mAP " << *l.val_mAP;
          err << '\n';
        },
        &err);
    const std::string ckpt = (dir / "checkpoint.msag").string();
    save_checkpoint(model, ckpt);

    nlohmann::json metrics{{"evaluated_on", e.evaluated_on},
                           {"split", split_json(e.split)},
                           {"best_epoch", e.result.best_epoch},
                           {"best_val_mAP", e.result.best_val_mAP ? nlohmann::json(*e.result.best_val_mAP)
                                                                  : nlohmann::json(nullptr)},
                           {"report", msagcn::to_json(e.report, emotion_names())}};
    write_text((dir / "metrics.json").string(), metrics.dump(2) + "\n");
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << nlohmann::json{{"command", "train"},
                          {"checkpoint", ckpt},
                          {"out", cfg.out},
                          {"parameters", model.parameter_count()},
                          {"seconds", seconds},
                          {"metrics", metrics}}
               .dump()
        << '\n';
    return kOk;
  });
}

inline int cmd_eval(const std::string& checkpoint, const std::optional<std::string>& config_path, const Overrides& o,
                    std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve(config_path, o);
    const MsaGcn model = load_checkpoint(checkpoint);
    const GaitDataset ds = load_dataset(cfg.data);
    const Tensor probs = predict_samples(model, ds);
    const MetricReport r = compute_metrics(confusion_matrix(probs, ds.labels(), model.config().num_classes));
    nlohmann::json j = msagcn::to_json(r, emotion_names());
    if (o.out) {
      ensure_dir(*o.out);
      write_text((std::filesystem::path(*o.out) / "metrics.json").string(), j.dump(2) + "\n");
    }
    out << j.dump() << '\n';
    return kOk;
  });
}

inline int cmd_predict(const std::string& checkpoint, const std::string& data_path, std::ostream& out,
                       std::ostream& err) {
  return guarded(err, [&] {
    const MsaGcn model = load_checkpoint(checkpoint);
    DataSource src;
    src.path = data_path;
    const GaitDataset ds = load_dataset(src);
    const Tensor probs = predict_samples(model, ds);
    nlohmann::json preds = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      nlohmann::json p = nlohmann::json::object();
      for (std::size_t k = 0; k < probs.dim(1); ++k) p[emotion_name(static_cast<int>(k))] = probs(i, k);
      preds.push_back({{"id", ds.samples[i].id},
                       {"label", emotion_name(static_cast<int>(argmax_row(probs, i)))},
                       {"probabilities", p}});
    }
    out << nlohmann::json{{"predictions", preds}}.dump() << '\n';
    return kOk;
  });
}

inline int cmd_gradcheck(std::uint64_t seed, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t s = 0; s < 5; ++s) seeds.push_back(seed + s);
    const auto t0 = std::chrono::steady_clock::now();
    const auto entries = run_gradient_suite(seeds);
    nlohmann::json rows = nlohmann::json::array();
    double worst = 0.0;
    for (const auto& e : entries) {
      rows.push_back(msagcn::to_json(e));
      worst = std::max(worst, e.max_rel_error);
      err << e.case_name << " seed " << e.seed << " max_rel_error " << e.max_rel_error << '\n';
    }
    const bool pass = worst < kGradTolerance;
    out << nlohmann::json{{"command", "gradcheck"},
                          {"tolerance", kGradTolerance},
                          {"max_rel_error", worst},
                          {"pass", pass},
                          {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
                          {"entries", rows}}
               .dump()
        << '\n';
    return pass ? kOk : kNumericError;
  });
}

struct AblationCell {
  std::string label;
  MsaGcnConfig model;
};

inline std::vector<AblationCell> ablation_cells(const std::string& axis, const MsaGcnConfig& base) {
  std::vector<AblationCell> cells;
  auto add = [&](std::string label, MsaGcnConfig c) {
    c.validate();
    cells.push_back({std::move(label), std::move(c)});
  };
  if (axis == "scales") {
    const std::vector<std::vector<std::size_t>> rows{{0}, {0, 1}, {0, 2}, {0, 3}, {0, 1, 2}, {0, 1, 3}, {0, 2, 3}, {0, 1, 2, 3}};
    for (const auto& r : rows) {
      MsaGcnConfig c = base;
      c.scales = r;
      std::string label;
      for (std::size_t s : r) label += (label.empty() ? "" : ",") + std::to_string(s + 1);
      add(label, c);
    }
  } else if (axis == "csfm-levels") {
    for (std::size_t l = 0; l <= 4; ++l) {
      MsaGcnConfig c = base;
      c.set_csfm_levels(l);
      add("levels=" + std::to_string(l), c);
    }
  } else if (axis == "kernels") {
    MsaGcnConfig single = base;
    single.temporal_mode = TemporalMode::single;
    single.kernel1 = 5;
    single.kernel2 = 9;
    add("single(5)", single);
    const std::vector<std::pair<std::size_t, std::size_t>> pairs{{5, 7}, {5, 9}, {7, 9}, {5, 25}, {5, 75}, {9, 25}};
    for (auto [a, b] : pairs) {
      MsaGcnConfig c = base;
      c.temporal_mode = TemporalMode::adaptive;
      c.kernel1 = a;
      c.kernel2 = b;
      add("(" + std::to_string(a) + "," + std::to_string(b) + ")", c);
    }
  } else if (axis == "temporal") {
    MsaGcnConfig single = base;
    single.temporal_mode = TemporalMode::single;
    add("single", single);
    MsaGcnConfig adaptive = base;
    adaptive.temporal_mode = TemporalMode::adaptive;
    add("adaptive", adaptive);
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "' (expected scales|csfm-levels|kernels|temporal)");
  }
  return cells;
}

inline std::size_t worker_threads(std::size_t jobs) {
  std::size_t n = 1;
  if (const char* env = std::getenv("MSAGCN_NUM_THREADS")) {
    try {
      n = std::max<std::size_t>(1, std::stoul(env));
    } catch (const std::exception&) {
      throw ConfigError(std::string("MSAGCN_NUM_THREADS is not a positive integer: ") + env);
    }
  }
  return std::min(n, std::max<std::size_t>(jobs, 1));
}

inline int cmd_ablate(const std::optional<std::string>& config_path, const std::string& axis, const Overrides& o,
                      std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve(config_path, o);
    const auto cells = ablation_cells(axis, cfg.model);
    const GaitDataset ds = load_dataset(cfg.data);
    std::vector<nlohmann::json> results(cells.size());
    std::vector<std::exception_ptr> failures(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    auto worker = [&] {
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        try {
          MsaGcn model(cells[i].model, cfg.seed);
          const Experiment e = run_experiment(model, ds, cfg.train, cfg.seed, {}, nullptr);
          results[i] = {{"cell", cells[i].label},
                        {"model", msagcn::to_json(cells[i].model)},
                        {"parameters", model.parameter_count()},
                        {"evaluated_on", e.evaluated_on},
                        {"best_epoch", e.result.best_epoch},
                        {"report", msagcn::to_json(e.report, emotion_names())}};
          std::lock_guard lock(err_mutex);
          err << "cell " << cells[i].label << " mAP " << e.report.mAP << '\n';
        } catch (...) {
          failures[i] = std::current_exception();
        }
      }
    };
    const std::size_t n = worker_threads(cells.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& f : failures)
      if (f) std::rethrow_exception(f);

    nlohmann::json summary = nlohmann::json::array();
    for (const auto& r : results) {
      const auto& rep = r["report"];
      summary.push_back({{"cell", r["cell"]}, {"mAP", rep["mAP"]}, {"accuracy", rep["accuracy"]}, {"f1", rep["f1"]}});
    }
    nlohmann::json doc{{"command", "ablate"}, {"axis", axis}, {"seed", cfg.seed}, {"cells", results}, {"summary", summary}};
    ensure_dir(cfg.out);
    write_text((std::filesystem::path(cfg.out) / ("ablation_" + axis + ".json")).string(), doc.dump(2) + "\n");
    out << doc.dump() << '\n';
    return kOk;
  });
}

inline int cmd_synth(const std::optional<std::string>& config_path, const Overrides& o, std::ostream& out,
                     std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = resolve(config_path, o);
    SynthParams params = cfg.data.synthetic ? *cfg.data.synthetic : SynthParams{};
    if (o.seed || !cfg.data.synthetic) params.seed = cfg.seed;
    const GaitDataset ds = generate_synthetic(cfg.data.n_per_class, params);
    std::string path = o.out ? *o.out : (std::filesystem::path(cfg.out) / "synthetic.jsonl").string();
    if (std::filesystem::is_directory(path)) path = (std::filesystem::path(path) / "synthetic.jsonl").string();
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
    save_canonical(ds, path);
    const auto h = ds.histogram();
    nlohmann::json hist = nlohmann::json::object();
    for (std::size_t k = 0; k < h.size(); ++k) hist[emotion_name(static_cast<int>(k))] = h[k];
    out << nlohmann::json{{"command", "synth"}, {"path", path}, {"samples", ds.size()}, {"seed", params.seed},
                          {"histogram", hist}}
               .dump()
        << '\n';
    return kOk;
  });
}

}  // namespace msagcn::app
