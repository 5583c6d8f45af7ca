#pragma once

// Finite-difference checks for every layer type and a tiny end-to-end model.
// Inputs are wrapped as parameters so dL/dx is checked alongside the weights.
// Layer outputs are reduced with a fixed random projection, L = <r, f(x)>.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msagcn/gradcheck.hpp"
#include "msagcn/model.hpp"
#include "msagcn/train.hpp"

namespace msagcn {

struct GradSuiteEntry {
  std::string case_name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t probes = 0;
  std::size_t branches = 0;
};

inline constexpr double kGradTolerance = 1e-4;

namespace detail {

inline double dot(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Tensor spread_input(Shape shape, Rng& rng) { return Tensor::normal(std::move(shape), rng, 1.0); }

// Random weights scaled by 1/numel, so <r, y> is an average and exactly-zero
// gradients (biases in front of batch norm) stay far below the 1e-8 floor.
inline Tensor projection(Shape shape, Rng& rng) {
  Tensor r = Tensor::normal(std::move(shape), rng);
  r *= 1.0 / static_cast<double>(r.size());
  return r;
}

template <typename Layer>
std::vector<Parameter*> params_of(Layer& layer, Parameter& input) {
  StateRefs refs;
  layer.collect_state(refs);
  refs.params.push_back(&input);
  return refs.params;
}

}  // namespace detail

inline GradCheckResult check_gcn(std::uint64_t seed) {
  Rng rng(seed);
  const auto pyr = default_pyramid(16);
  GcnLayer layer("gcn", pyr.scale(1), 3, 4, rng);
  Parameter x("input", detail::spread_input({2, 3, 6, 10}, rng));
  const Tensor r = detail::projection({2, 4, 6, 10}, rng);
  return grad_check([&] { return detail::dot(r, layer.forward(x.value, nullptr)); },
                    [&] {
                      GcnLayer::Cache c;
                      layer.forward(x.value, &c);
                      x.accumulate(layer.backward(c, r));
                    },
                    detail::params_of(layer, x));
}

inline GradCheckResult check_astcn(std::uint64_t seed) {
  Rng rng(seed);
  AsTcn layer("astcn", 4, 3, 5, 1, TemporalMode::adaptive, 2, rng);
  Parameter x("input", detail::spread_input({2, 4, 12, 5}, rng));
  const Tensor r = detail::projection({2, 4, 12, 5}, rng);
  return grad_check([&] { return detail::dot(r, layer.forward(x.value, nullptr)); },
                    [&] {
                      AsTcn::Cache c;
                      layer.forward(x.value, &c);
                      x.accumulate(layer.backward(c, r));
                    },
                    detail::params_of(layer, x));
}

inline GradCheckResult check_block(std::uint64_t seed) {
  Rng rng(seed);
  const auto pyr = default_pyramid(16);
  BlockOptions opt;
  opt.k1 = 3;
  opt.k2 = 5;
  opt.bottleneck_min = 2;
  AsstGcnBlock layer("block", pyr.scale(2), 3, 4, 2, opt, rng);
  Parameter x("input", detail::spread_input({2, 3, 10, 5}, rng));
  const Tensor r = detail::projection({2, 4, 5, 5}, rng);
  return grad_check([&] { return detail::dot(r, layer.forward(x.value, Mode::train, nullptr)); },
                    [&] {
                      AsstGcnBlock::Cache c;
                      layer.forward(x.value, Mode::train, &c);
                      x.accumulate(layer.backward(c, r));
                    },
                    detail::params_of(layer, x));
}

inline GradCheckResult check_csfm(std::uint64_t seed) {
  Rng rng(seed);
  CsfmBlock layer("csfm", 4, 2, rng);
  Parameter xt("input_target", detail::spread_input({2, 4, 5, 6}, rng));
  Parameter xs("input_source", detail::spread_input({2, 4, 5, 3}, rng));
  const Tensor r = detail::projection({2, 4, 5, 6}, rng);
  StateRefs refs;
  layer.collect_state(refs);
  refs.params.push_back(&xt);
  refs.params.push_back(&xs);
  return grad_check([&] { return detail::dot(r, layer.forward(xt.value, xs.value, nullptr)); },
                    [&] {
                      CsfmBlock::Cache c;
                      layer.forward(xt.value, xs.value, &c);
                      auto g = layer.backward(c, r);
                      xt.accumulate(g.d_target);
                      xs.accumulate(g.d_source);
                    },
                    refs.params);
}

inline GradCheckResult check_fusion(std::uint64_t seed) {
  Rng rng(seed);
  ScaleAttentionFusion layer("fusion", 3, 4, rng);
  std::vector<Parameter> inputs;
  for (int s = 0; s < 3; ++s) inputs.emplace_back("input" + std::to_string(s), detail::spread_input({2, 4, 5, 6}, rng));
  const Tensor r = detail::projection({2, 4, 5, 6}, rng);
  auto feats = [&] {
    std::vector<Tensor> f;
    for (const auto& p : inputs) f.push_back(p.value);
    return f;
  };
  StateRefs refs;
  layer.collect_state(refs);
  for (auto& p : inputs) refs.params.push_back(&p);
  return grad_check([&] { return detail::dot(r, layer.forward(feats(), nullptr)); },
                    [&] {
                      ScaleAttentionFusion::Cache c;
                      layer.forward(feats(), &c);
                      auto g = layer.backward(c, r);
                      for (std::size_t s = 0; s < inputs.size(); ++s) inputs[s].accumulate(g[s]);
                    },
                    refs.params);
}

inline GradCheckResult check_classifier(std::uint64_t seed) {
  Rng rng(seed);
  ClassifierHead layer("head", 5, 4, rng);
  Parameter x("input", detail::spread_input({3, 5, 4, 6}, rng));
  const std::vector<int> labels{0, 3, 2};
  return grad_check([&] { return cross_entropy(layer.forward(x.value, nullptr), labels); },
                    [&] {
                      ClassifierHead::Cache c;
                      Tensor p = layer.forward(x.value, &c);
                      x.accumulate(layer.backward(c, cross_entropy_backward(p, labels)));
                    },
                    detail::params_of(layer, x));
}

inline MsaGcnConfig tiny_model_config() {
  MsaGcnConfig c;
  c.joint_count = 16;
  c.scales = {0, 1};
  c.stages = default_stage_plan({4, 8});
  c.kernel1 = 3;
  c.kernel2 = 5;
  c.bottleneck_min = 2;
  c.embed_min = 2;
  return c;
}

inline GradCheckResult check_model(std::uint64_t seed) {
  MsaGcn model(tiny_model_config(), seed);
  Rng rng(seed ^ 0x5eedULL);
  const Tensor x = Tensor::normal({2, 3, 8, 16}, rng);
  const std::vector<int> labels{1, 2};
  return grad_check([&] { return cross_entropy(model.forward(x, Mode::train, nullptr), labels); },
                    [&] {
                      MsaGcn::Cache c;
                      Tensor p = model.forward(x, Mode::train, &c);
                      model.backward(c, cross_entropy_backward(p, labels));
                    },
                    model.parameters());
}

inline const std::vector<std::pair<std::string, std::function<GradCheckResult(std::uint64_t)>>>& gradient_cases() {
  static const std::vector<std::pair<std::string, std::function<GradCheckResult(std::uint64_t)>>> cases{
      {"gcn", check_gcn},     {"astcn", check_astcn},           {"asst_block", check_block},
      {"csfm", check_csfm},   {"scale_fusion", check_fusion},   {"classifier", check_classifier},
      {"model", check_model}};
  return cases;
}

inline std::vector<GradSuiteEntry> run_gradient_suite(std::span<const std::uint64_t> seeds) {
  std::vector<GradSuiteEntry> out;
  for (const auto& [name, fn] : gradient_cases())
    for (std::uint64_t s : seeds) {
      GradCheckResult r = fn(s);
      out.push_back({name, s, r.max_rel_error, r.worst_parameter, r.probes, r.branches});
    }
  return out;
}

inline nlohmann::json to_json(const GradSuiteEntry& e) {
  return {{"case", e.case_name}, {"seed", e.seed}, {"max_rel_error", e.max_rel_error},
          {"worst_parameter", e.worst_parameter}, {"probes", e.probes},
          {"pinned_branches", e.branches}, {"pass", e.max_rel_error < kGradTolerance}};
}

}  // namespace msagcn
