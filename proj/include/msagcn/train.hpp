#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msagcn/model.hpp"

namespace msagcn {

inline constexpr std::size_t kNumEmotions = 4;

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 400;
  double base_lr = 1e-3;
  std::vector<std::size_t> decay_epochs{200, 300, 350};
  double decay_factor = 0.1;
  double weight_decay = 5e-4;
  bool decoupled_weight_decay = false;  // false: classic L2 added to the gradient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::array<double, 3> split{0.8, 0.1, 0.1};

  void validate() const {
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (epochs == 0) throw ConfigError("train.epochs must be positive");
    if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be positive");
    for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
      if (i && decay_epochs[i] <= decay_epochs[i - 1]) {
        throw ConfigError("train.decay_epochs must be strictly increasing");
      }
    }
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("train.decay_factor must be in (0,1]");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("train.beta1/beta2 must be in [0,1)");
    }
    for (double r : split) {
      if (r < 0.0) throw ConfigError("train.split ratios must be non-negative");
    }
    if (std::abs(split[0] + split[1] + split[2] - 1.0) > 1e-9) throw ConfigError("train.split must sum to 1");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},       {"epochs", c.epochs},
          {"base_lr", c.base_lr},             {"decay_epochs", c.decay_epochs},
          {"decay_factor", c.decay_factor},   {"weight_decay", c.weight_decay},
          {"decoupled_weight_decay", c.decoupled_weight_decay},
          {"beta1", c.beta1},                 {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},           {"seed", c.seed},
          {"split", c.split}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  const std::string sec = "train";
  detail::reject_unknown_keys(j, {"batch_size", "epochs", "base_lr", "decay_epochs", "decay_factor",
                                  "weight_decay", "decoupled_weight_decay", "beta1", "beta2",
                                  "adam_eps", "seed", "split"},
                              sec);
  detail::read_if(j, "batch_size", c.batch_size, sec);
  detail::read_if(j, "epochs", c.epochs, sec);
  detail::read_if(j, "base_lr", c.base_lr, sec);
  detail::read_if(j, "decay_epochs", c.decay_epochs, sec);
  detail::read_if(j, "decay_factor", c.decay_factor, sec);
  detail::read_if(j, "weight_decay", c.weight_decay, sec);
  detail::read_if(j, "decoupled_weight_decay", c.decoupled_weight_decay, sec);
  detail::read_if(j, "beta1", c.beta1, sec);
  detail::read_if(j, "beta2", c.beta2, sec);
  detail::read_if(j, "adam_eps", c.adam_eps, sec);
  detail::read_if(j, "seed", c.seed, sec);
  detail::read_if(j, "split", c.split, sec);
  c.validate();
  return c;
}

// Step schedule: base_lr · factor^(number of decay epochs ≤ epoch).
// Dividing by the whole decay power keeps 1e-3 -> 1e-6 on the nearest doubles,
// which repeated multiplication by 0.1 misses by an ulp.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  int n = 0;
  for (std::size_t d : cfg.decay_epochs) n += d <= epoch;
  return cfg.base_lr / std::pow(1.0 / cfg.decay_factor, n);
}

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kProbabilityFloor = 1e-12;

inline void check_labels(std::span<const int> labels, std::size_t classes) {
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw LabelError("label " + std::to_string(y) + " outside 0.." + std::to_string(classes - 1));
    }
  }
}

// Mean negative log-probability of the true class, probabilities clamped at 1e-12.
inline double cross_entropy(const Tensor& probs, std::span<const int> labels) {
  probs.require_rank(2, "cross_entropy");
  if (labels.size() != probs.dim(0)) throw ShapeError("cross_entropy: label count does not match batch");
  check_labels(labels, probs.dim(1));
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = probs(i, static_cast<std::size_t>(labels[i]));
    s -= std::log(BranchLog::branch(p > kProbabilityFloor) ? p : kProbabilityFloor);
  }
  return s / static_cast<double>(labels.size());
}

inline Tensor cross_entropy_backward(const Tensor& probs, std::span<const int> labels) {
  Tensor d(probs.shape());
  const double n = static_cast<double>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    const double p = probs(i, y);
    if (p > kProbabilityFloor) d(i, y) = -1.0 / (n * p);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Adam with bias correction.

class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(std::span<Parameter* const> params, double lr) {
    if (moments_.empty()) {
      for (Parameter* p : params) moments_.push_back({Tensor(p->value.shape()), Tensor(p->value.shape())});
    }
    if (moments_.size() != params.size()) throw ShapeError("Adam: parameter list changed between steps");
    for (Parameter* p : params) {
      if (p->requires_grad && !p->grad.all_finite()) {
        throw NumericError("non-finite gradient in parameter " + p->name);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      if (!p.requires_grad) continue;
      auto& [m, v] = moments_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        double g = p.grad[i];
        if (!cfg_.decoupled_weight_decay) g += cfg_.weight_decay * p.value[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        if (cfg_.decoupled_weight_decay) p.value[i] -= lr * cfg_.weight_decay * p.value[i];
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<std::pair<Tensor, Tensor>> moments_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Dataset split

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

namespace detail {
// Largest-remainder apportionment of `total` over weights, capped per bucket.
inline std::vector<std::size_t> apportion(const std::vector<double>& exact, std::size_t total,
                                          const std::vector<std::size_t>& cap) {
  std::vector<std::size_t> out(exact.size());
  std::size_t used = 0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    out[i] = std::min(static_cast<std::size_t>(std::floor(exact[i])), cap[i]);
    used += out[i];
  }
  std::vector<std::size_t> order(exact.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return exact[a] - std::floor(exact[a]) > exact[b] - std::floor(exact[b]);
  });
  while (used < total) {
    bool progressed = false;
    for (std::size_t i : order) {
      if (used == total) break;
      if (out[i] < cap[i] && static_cast<double>(out[i]) < exact[i] + 1.0) {
        ++out[i];
        ++used;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return out;
}
}  // namespace detail

// Stratified by label and deterministic in `seed`. Global split sizes are
// round(ratio·N) for train and val, the remainder for test. Falls back to an
// unstratified split (with a warning) when a class has fewer than 3 samples.
inline SplitIndices split_indices(const std::vector<int>& labels, std::uint64_t seed,
                                  const std::array<double, 3>& ratios, std::ostream* warn = &std::cerr) {
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  const std::size_t N = labels.size();
  const std::size_t n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(N)));
  const std::size_t n_val =
      std::min(N - std::min(N, n_train), static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(N))));
  Rng rng(seed);

  int max_label = -1;
  for (int y : labels) {
    if (y < 0) throw LabelError("negative label " + std::to_string(y));
    max_label = std::max(max_label, y);
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < N; ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  bool stratify = true;
  for (const auto& c : by_class) {
    if (!c.empty() && c.size() < 3) stratify = false;
  }

  SplitIndices out;
  if (!stratify) {
    if (warn) *warn << "warning: a class has fewer than 3 samples; using an unstratified split\n";
    std::vector<std::size_t> all(N);
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                   all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), all.end());
    return out;
  }

  for (auto& c : by_class) rng.shuffle(c);
  std::vector<double> exact_train, exact_val;
  std::vector<std::size_t> cap;
  for (const auto& c : by_class) {
    exact_train.push_back(ratios[0] * static_cast<double>(c.size()));
    cap.push_back(c.size());
  }
  const auto q_train = detail::apportion(exact_train, n_train, cap);
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    exact_val.push_back(ratios[1] * static_cast<double>(by_class[k].size()));
    cap[k] = by_class[k].size() - q_train[k];
  }
  const auto q_val = detail::apportion(exact_val, n_val, cap);
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    const auto& c = by_class[k];
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (i < q_train[k]) out.train.push_back(c[i]);
      else if (i < q_train[k] + q_val[k]) out.val.push_back(c[i]);
      else out.test.push_back(c[i]);
    }
  }
  for (auto* part : {&out.train, &out.val, &out.test}) std::sort(part->begin(), part->end());
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;  // [true][predicted]

struct ClassCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct MetricReport {
  ConfusionMatrix confusion;
  std::size_t total = 0;  // TD
  std::vector<ClassCounts> counts;
  std::vector<double> per_class_accuracy;  // (TP+TN)/TD, one-vs-rest
  std::vector<double> per_class_precision;
  std::vector<double> per_class_recall;
  std::vector<double> per_class_f1;
  double mAP = 0.0;        // mean of per-class accuracies
  double accuracy = 0.0;   // trace / TD
  double precision = 0.0;  // macro
  double recall = 0.0;     // macro
  double f1 = 0.0;         // 2PR/(P+R) of the macro precision and recall
  std::vector<std::string> notes;
};

inline double safe_ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

inline double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline MetricReport compute_metrics(const ConfusionMatrix& confusion) {
  const std::size_t K = confusion.size();
  for (const auto& row : confusion) {
    if (row.size() != K) throw ShapeError("confusion matrix must be square");
  }
  MetricReport r;
  r.confusion = confusion;
  for (const auto& row : confusion)
    for (std::size_t v : row) r.total += v;
  if (r.total == 0) throw EmptyEvaluationError("confusion matrix is empty");
  std::size_t trace = 0;
  for (std::size_t k = 0; k < K; ++k) {
    ClassCounts c;
    c.tp = confusion[k][k];
    for (std::size_t i = 0; i < K; ++i) {
      if (i == k) continue;
      c.fp += confusion[i][k];
      c.fn += confusion[k][i];
    }
    c.tn = r.total - c.tp - c.fp - c.fn;
    trace += c.tp;
    r.counts.push_back(c);
    r.per_class_accuracy.push_back(safe_ratio(c.tp + c.tn, r.total));
    r.per_class_precision.push_back(safe_ratio(c.tp, c.tp + c.fp));
    r.per_class_recall.push_back(safe_ratio(c.tp, c.tp + c.fn));
    r.per_class_f1.push_back(harmonic(r.per_class_precision.back(), r.per_class_recall.back()));
    if (c.tp + c.fp == 0) r.notes.push_back("class " + std::to_string(k) + ": no predictions, precision set to 0");
    if (c.tp + c.fn == 0) r.notes.push_back("class " + std::to_string(k) + ": no samples, recall set to 0");
  }
  const double k = static_cast<double>(K);
  r.mAP = std::accumulate(r.per_class_accuracy.begin(), r.per_class_accuracy.end(), 0.0) / k;
  r.precision = std::accumulate(r.per_class_precision.begin(), r.per_class_precision.end(), 0.0) / k;
  r.recall = std::accumulate(r.per_class_recall.begin(), r.per_class_recall.end(), 0.0) / k;
  r.f1 = harmonic(r.precision, r.recall);
  r.accuracy = safe_ratio(trace, r.total);
  return r;
}

inline nlohmann::json to_json(const MetricReport& r, const std::vector<std::string>& class_names = {}) {
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& c : r.counts) counts.push_back({{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}});
  nlohmann::json j{{"confusion", r.confusion},
                   {"total", r.total},
                   {"per_class_accuracy", r.per_class_accuracy},
                   {"per_class_precision", r.per_class_precision},
                   {"per_class_recall", r.per_class_recall},
                   {"per_class_f1", r.per_class_f1},
                   {"counts", counts},
                   {"mAP", r.mAP},
                   {"accuracy", r.accuracy},
                   {"precision", r.precision},
                   {"recall", r.recall},
                   {"f1", r.f1},
                   {"notes", r.notes}};
  if (!class_names.empty()) j["classes"] = class_names;
  return j;
}

// ---------------------------------------------------------------------------
// Training

// Inputs stacked as [N, C, T, V] with one label per row.
struct TensorDataset {
  Tensor inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  Tensor gather(std::span<const std::size_t> idx) const {
    Shape s = inputs.shape();
    const std::size_t row = inputs.size() / s[0];
    s[0] = idx.size();
    Tensor out(s);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(inputs.ptr() + idx[i] * row, row, out.ptr() + i * row);
    }
    return out;
  }

  std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
  }

  TensorDataset subset(std::span<const std::size_t> idx) const {
    if (idx.empty()) return {};
    return {gather(idx), gather_labels(idx)};
  }
};

inline std::size_t argmax_row(const Tensor& p, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < p.dim(1); ++k)
    if (p(row, k) > p(row, best)) best = k;
  return best;
}

inline Tensor predict(const MsaGcn& model, const TensorDataset& data, std::size_t batch_size = 32) {
  Tensor out({data.size(), model.config().num_classes});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    Tensor p = model.forward(data.gather(idx), Mode::eval, nullptr);
    std::copy_n(p.ptr(), p.size(), out.ptr() + start * out.dim(1));
  }
  return out;
}

inline ConfusionMatrix confusion_matrix(const Tensor& probs, const std::vector<int>& labels, std::size_t classes) {
  ConfusionMatrix cm(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) ++cm[static_cast<std::size_t>(labels[i])][argmax_row(probs, i)];
  return cm;
}

inline MetricReport evaluate(const MsaGcn& model, const TensorDataset& data, std::size_t batch_size = 32) {
  if (data.size() == 0) throw EmptyEvaluationError("evaluation set is empty");
  check_labels(data.labels, model.config().num_classes);
  return compute_metrics(confusion_matrix(predict(model, data, batch_size), data.labels, model.config().num_classes));
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_mAP = 0.0;
  std::optional<double> val_mAP;
};

inline nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j{{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}, {"train_mAP", e.train_mAP}};
  j["val_mAP"] = e.val_mAP ? nlohmann::json(*e.val_mAP) : nlohmann::json(nullptr);
  return j;
}

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_mAP;
  std::size_t optimizer_steps = 0;
};

// Mini-batch Adam over `train_set` following lr_at. train_mAP comes from the
// training-mode predictions made during the epoch. When a validation set is
// given, the parameters from the epoch with the highest validation mAP are
// restored at the end (the latest such epoch on ties).
inline TrainResult train(MsaGcn& model, const TensorDataset& train_set, const TensorDataset* val_set,
                         const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw DataError("training set is empty");
  check_labels(train_set.labels, model.config().num_classes);
  const bool has_val = val_set && val_set->size() > 0;
  Rng rng(cfg.seed ^ 0x5eedba7c4ull);
  Adam adam(cfg);
  TrainResult result;
  std::vector<Tensor> best_state;
  auto snapshot = [&] {
    best_state.clear();
    StateRefs refs = model.state();
    for (const Buffer* b : refs.buffers) best_state.push_back(b->value);
    for (const Parameter* p : refs.params) best_state.push_back(p->value);
  };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t K = model.config().num_classes;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    rng.shuffle(order);
    double loss_sum = 0.0;
    ConfusionMatrix cm(K, std::vector<std::size_t>(K, 0));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const Tensor x = train_set.gather(idx);
      const std::vector<int> y = train_set.gather_labels(idx);
      MsaGcn::Cache cache;
      const Tensor p = model.forward(x, Mode::train, &cache);
      const double loss = cross_entropy(p, y);
      if (!std::isfinite(loss)) {
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_sum += loss * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < y.size(); ++i) ++cm[static_cast<std::size_t>(y[i])][argmax_row(p, i)];
      auto params = model.parameters();
      for (Parameter* prm : params) prm->zero_grad();
      model.backward(cache, cross_entropy_backward(p, y));
      model.update_running_stats(cache);
      try {
        adam.step(params, lr);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch));
      }
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.train_loss = loss_sum / static_cast<double>(train_set.size());
    entry.train_mAP = compute_metrics(cm).mAP;
    if (has_val) {
      entry.val_mAP = evaluate(model, *val_set).mAP;
      if (!result.best_val_mAP || *entry.val_mAP >= *result.best_val_mAP) {
        result.best_val_mAP = entry.val_mAP;
        result.best_epoch = epoch;
        snapshot();
      }
    } else {
      result.best_epoch = epoch;
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  if (has_val && !best_state.empty()) {
    StateRefs refs = model.state();
    std::size_t k = 0;
    for (Buffer* b : refs.buffers) b->value = best_state[k++];
    for (Parameter* p : refs.params) p->value = best_state[k++];
  }
  result.optimizer_steps = adam.steps();
  return result;
}

}  // namespace msagcn
