#pragma once

// Full multiscale network:
//   standardize -> coarsen to every selected scale
//   -> stages (ASST-GCN blocks per scale, then cross-scale fusion rounds)
//   -> expand to the finest scale -> scale attention fusion
//   -> final ASST-GCN block -> classifier.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "msagcn/graph.hpp"
#include "msagcn/layers.hpp"

namespace msagcn {

struct StagePlan {
  std::size_t channels = 32;
  std::size_t asst_count = 1;  // ASST-GCN blocks per scale
  std::size_t csfm_count = 0;  // cross-scale fusion rounds after the blocks
  std::size_t stride = 1;      // temporal stride of the stage's first block

  friend bool operator==(const StagePlan&, const StagePlan&) = default;
};

// Stages 1-2 fuse across scales once, stages 3-4 do not; strides 1,2,2,2.
inline std::vector<StagePlan> default_stage_plan(const std::vector<std::size_t>& channels) {
  std::vector<StagePlan> plan;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    plan.push_back({channels[i], 1, i < 2 ? std::size_t{1} : std::size_t{0}, i == 0 ? std::size_t{1} : std::size_t{2}});
  }
  return plan;
}

struct MsaGcnConfig {
  std::size_t joint_count = 16;
  std::vector<std::size_t> scales{0, 1, 2};  // pyramid levels, finest first
  std::vector<StagePlan> stages = default_stage_plan({32, 64, 128, 256});
  std::size_t kernel1 = 5;
  std::size_t kernel2 = 9;
  TemporalMode temporal_mode = TemporalMode::adaptive;
  std::size_t num_classes = 4;
  std::size_t input_channels = 3;
  std::size_t post_fusion_channels = 0;  // 0: keep the last stage width
  std::size_t bottleneck_min = 16;
  std::size_t embed_min = 8;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  std::optional<nlohmann::json> pyramid;  // custom grouping table, else built-in

  std::size_t final_channels() const {
    return post_fusion_channels ? post_fusion_channels : stages.back().channels;
  }

  // Stages [0, levels) get one fusion round each, the rest none.
  void set_csfm_levels(std::size_t levels) {
    for (std::size_t i = 0; i < stages.size(); ++i) stages[i].csfm_count = i < levels ? 1 : 0;
  }

  void validate() const {
    if (joint_count == 0) throw ConfigError("joint_count must be positive");
    if (scales.empty()) throw ConfigError("at least one scale is required");
    if (scales.front() != 0) throw ConfigError("scales must start with the finest level 0");
    for (std::size_t i = 1; i < scales.size(); ++i) {
      if (scales[i] <= scales[i - 1]) throw ConfigError("scales must be strictly increasing");
    }
    if (stages.empty()) throw ConfigError("stage plan is empty");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      const std::string where = "stage " + std::to_string(i) + ": ";
      if (s.channels == 0) throw ConfigError(where + "channels must be positive");
      if (s.asst_count == 0) throw ConfigError(where + "needs at least one ASST-GCN block");
      if (s.stride == 0) throw ConfigError(where + "stride must be positive");
    }
    if (kernel1 % 2 == 0 || kernel2 % 2 == 0) throw ConfigError("temporal kernels must be odd");
    if (kernel1 == kernel2) throw ConfigError("temporal kernels must be distinct");
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (input_channels == 0) throw ConfigError("input_channels must be positive");
    if (!(bn_eps > 0.0) || !(bn_momentum > 0.0 && bn_momentum <= 1.0)) {
      throw ConfigError("batch norm eps/momentum out of range");
    }
  }

  ScalePyramid make_pyramid() const {
    if (pyramid) {
      ScalePyramid p = pyramid_from_json(*pyramid);
      if (p.scale(0).vertex_count() != joint_count) {
        throw ConfigError("pyramid base has " + std::to_string(p.scale(0).vertex_count()) +
                          " joints, config says " + std::to_string(joint_count));
      }
      if (scales.back() >= p.size()) throw ConfigError("scale index beyond custom pyramid");
      return p;
    }
    if (scales.back() > 3) throw ConfigError("built-in pyramids have levels 0..3");
    return default_pyramid(joint_count, scales.back() >= 3);
  }
};

inline const char* to_string(TemporalMode m) { return m == TemporalMode::adaptive ? "adaptive" : "single"; }

inline TemporalMode temporal_mode_from_string(const std::string& s) {
  if (s == "adaptive") return TemporalMode::adaptive;
  if (s == "single") return TemporalMode::single;
  throw ConfigError("unknown temporal_mode '" + s + "' (expected adaptive|single)");
}

namespace detail {
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
      throw ConfigError(section + ": unknown key '" + it.key() + "'");
    }
  }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}
}  // namespace detail

inline nlohmann::json to_json(const MsaGcnConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) {
    stages.push_back({{"channels", s.channels}, {"asst_count", s.asst_count},
                      {"csfm_count", s.csfm_count}, {"stride", s.stride}});
  }
  nlohmann::json j{{"joint_count", c.joint_count},
                   {"scales", c.scales},
                   {"stages", stages},
                   {"kernel_pair", {c.kernel1, c.kernel2}},
                   {"temporal_mode", to_string(c.temporal_mode)},
                   {"num_classes", c.num_classes},
                   {"input_channels", c.input_channels},
                   {"post_fusion_channels", c.post_fusion_channels},
                   {"bottleneck_min", c.bottleneck_min},
                   {"embed_min", c.embed_min},
                   {"bn_eps", c.bn_eps},
                   {"bn_momentum", c.bn_momentum}};
  if (c.pyramid) j["pyramid"] = *c.pyramid;
  return j;
}

// Overlays `j` onto `base`. "channels" is shorthand for the default stage plan
// with the given widths; "csfm_levels" then rewrites the fusion rounds.
inline MsaGcnConfig model_config_from_json(const nlohmann::json& j, MsaGcnConfig base = {}) {
  const std::string sec = "model";
  detail::reject_unknown_keys(j, {"joint_count", "scales", "stages", "channels", "csfm_levels",
                                  "kernel_pair", "temporal_mode", "num_classes", "input_channels",
                                  "post_fusion_channels", "bottleneck_min", "embed_min", "bn_eps",
                                  "bn_momentum", "pyramid"},
                              sec);
  MsaGcnConfig c = std::move(base);
  detail::read_if(j, "joint_count", c.joint_count, sec);
  detail::read_if(j, "scales", c.scales, sec);
  if (j.contains("channels")) {
    std::vector<std::size_t> ch;
    detail::read_if(j, "channels", ch, sec);
    c.stages = default_stage_plan(ch);
  }
  if (j.contains("stages")) {
    if (!j["stages"].is_array()) throw ConfigError("model.stages must be an array");
    c.stages.clear();
    for (const auto& s : j["stages"]) {
      detail::reject_unknown_keys(s, {"channels", "asst_count", "csfm_count", "stride"}, "model.stages[]");
      StagePlan p;
      detail::read_if(s, "channels", p.channels, sec);
      detail::read_if(s, "asst_count", p.asst_count, sec);
      detail::read_if(s, "csfm_count", p.csfm_count, sec);
      detail::read_if(s, "stride", p.stride, sec);
      c.stages.push_back(p);
    }
  }
  if (j.contains("csfm_levels")) {
    std::size_t levels = 0;
    detail::read_if(j, "csfm_levels", levels, sec);
    c.set_csfm_levels(levels);
  }
  if (j.contains("kernel_pair")) {
    std::vector<std::size_t> k;
    detail::read_if(j, "kernel_pair", k, sec);
    if (k.size() != 2) throw ConfigError("model.kernel_pair must have two entries");
    c.kernel1 = k[0];
    c.kernel2 = k[1];
  }
  if (j.contains("temporal_mode")) {
    std::string m;
    detail::read_if(j, "temporal_mode", m, sec);
    c.temporal_mode = temporal_mode_from_string(m);
  }
  detail::read_if(j, "num_classes", c.num_classes, sec);
  detail::read_if(j, "input_channels", c.input_channels, sec);
  detail::read_if(j, "post_fusion_channels", c.post_fusion_channels, sec);
  detail::read_if(j, "bottleneck_min", c.bottleneck_min, sec);
  detail::read_if(j, "embed_min", c.embed_min, sec);
  detail::read_if(j, "bn_eps", c.bn_eps, sec);
  detail::read_if(j, "bn_momentum", c.bn_momentum, sec);
  if (j.contains("pyramid")) c.pyramid = j["pyramid"];
  c.validate();
  return c;
}

// Per-input-channel standardization statistics.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

class MsaGcn {
 public:
  struct CsfmLink {
    std::size_t target = 0;  // index into the selected scales
    std::size_t source = 0;
    CsfmBlock block;
  };

  struct Stage {
    std::vector<std::vector<AsstGcnBlock>> blocks;  // [scale][block]
    std::vector<std::vector<CsfmLink>> rounds;      // [round][link]
  };

  struct StageCache {
    std::vector<std::vector<AsstGcnBlock::Cache>> blocks;
    std::vector<std::vector<CsfmBlock::Cache>> rounds;
  };

  struct Cache {
    std::vector<StageCache> stages;
    ScaleAttentionFusion::Cache fusion;
    AsstGcnBlock::Cache final_block;
    ClassifierHead::Cache head;
  };

  MsaGcn(const MsaGcnConfig& config, std::uint64_t seed)
      : config_(config), pyramid_(init_pyramid(config)) {
    Rng rng(seed);
    const std::size_t S = config_.scales.size();
    for (std::size_t s = 0; s < S; ++s) to_scale_.push_back(pyramid_.map_from_finest(config_.scales[s]));
    input_mean_ = {"input_norm.mean", Tensor::zeros({config_.input_channels})};
    input_std_ = {"input_norm.std", Tensor::full({config_.input_channels}, 1.0)};

    const BlockOptions opt{config_.kernel1, config_.kernel2, config_.temporal_mode,
                           config_.bottleneck_min, config_.bn_eps, config_.bn_momentum};
    std::size_t channels = config_.input_channels;
    for (std::size_t l = 0; l < config_.stages.size(); ++l) {
      const StagePlan& plan = config_.stages[l];
      Stage stage;
      stage.blocks.resize(S);
      for (std::size_t s = 0; s < S; ++s) {
        const SkeletonGraph& g = pyramid_.scale(config_.scales[s]);
        for (std::size_t j = 0; j < plan.asst_count; ++j) {
          const std::string name = "stage" + std::to_string(l) + ".scale" + std::to_string(s) +
                                   ".block" + std::to_string(j);
          stage.blocks[s].emplace_back(name, g, j == 0 ? channels : plan.channels, plan.channels,
                                       j == 0 ? plan.stride : 1, opt, rng);
        }
      }
      if (S > 1) {
        for (std::size_t r = 0; r < plan.csfm_count; ++r) {
          std::vector<CsfmLink> links;
          for (std::size_t t = 0; t < S; ++t) {
            for (std::size_t src : {t - 1, t + 1}) {
              if (src >= S) continue;  // wraps for t == 0
              const std::string name = "stage" + std::to_string(l) + ".csfm" + std::to_string(r) +
                                       ".scale" + std::to_string(t) + "_from" + std::to_string(src);
              links.push_back({t, src, CsfmBlock(name, plan.channels, config_.embed_min, rng)});
            }
          }
          stage.rounds.push_back(std::move(links));
        }
      }
      stages_.push_back(std::move(stage));
      channels = plan.channels;
    }
    fusion_ = ScaleAttentionFusion("fusion", S, channels, rng);
    final_ = AsstGcnBlock("final", pyramid_.scale(0), channels, config_.final_channels(), 1, opt, rng);
    head_ = ClassifierHead("head", config_.final_channels(), config_.num_classes, rng);
  }

  const MsaGcnConfig& config() const { return config_; }
  const ScalePyramid& pyramid() const { return pyramid_; }
  const std::vector<Stage>& stages() const { return stages_; }
  std::vector<Stage>& stages() { return stages_; }
  const ScaleAttentionFusion& fusion() const { return fusion_; }
  const AsstGcnBlock& final_block() const { return final_; }
  ClassifierHead& head() { return head_; }

  ChannelStats input_stats() const {
    return {{input_mean_.value.data().begin(), input_mean_.value.data().end()},
            {input_std_.value.data().begin(), input_std_.value.data().end()}};
  }

  void set_input_stats(const ChannelStats& st) {
    if (st.mean.size() != config_.input_channels || st.stddev.size() != config_.input_channels) {
      throw ShapeError("input statistics must have one entry per input channel");
    }
    input_mean_.value = Tensor({config_.input_channels}, st.mean);
    input_std_.value = Tensor({config_.input_channels}, st.stddev);
  }

  // x: [B, input_channels, T, V_finest] -> class probabilities [B, num_classes].
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const {
    x.require_rank(4, "model forward");
    if (x.dim(1) != config_.input_channels || x.dim(3) != pyramid_.scale(0).vertex_count()) {
      throw ShapeError("model forward: expected [B," + std::to_string(config_.input_channels) +
                       ",T," + std::to_string(pyramid_.scale(0).vertex_count()) + "], got " +
                       shape_str(x.shape()));
    }
    const std::size_t S = config_.scales.size();
    Tensor xn = standardize(x);
    std::vector<Tensor> feats;
    for (std::size_t s = 0; s < S; ++s) {
      feats.push_back(config_.scales[s] == 0 ? xn : coarsen_features(xn, to_scale_[s]));
    }
    if (cache) cache->stages.assign(stages_.size(), {});
    for (std::size_t l = 0; l < stages_.size(); ++l) {
      const Stage& stage = stages_[l];
      StageCache* sc = cache ? &cache->stages[l] : nullptr;
      if (sc) {
        sc->blocks.resize(S);
        sc->rounds.resize(stage.rounds.size());
      }
      for (std::size_t s = 0; s < S; ++s) {
        if (sc) sc->blocks[s].resize(stage.blocks[s].size());
        for (std::size_t j = 0; j < stage.blocks[s].size(); ++j) {
          feats[s] = stage.blocks[s][j].forward(feats[s], mode, sc ? &sc->blocks[s][j] : nullptr);
        }
      }
      for (std::size_t r = 0; r < stage.rounds.size(); ++r) {
        const auto& links = stage.rounds[r];
        if (sc) sc->rounds[r].resize(links.size());
        const std::vector<Tensor> before = feats;
        for (std::size_t k = 0; k < links.size(); ++k) {
          feats[links[k].target] = links[k].block.forward(feats[links[k].target], before[links[k].source],
                                                          sc ? &sc->rounds[r][k] : nullptr);
        }
      }
    }
    std::vector<Tensor> expanded;
    for (std::size_t s = 0; s < S; ++s) {
      expanded.push_back(config_.scales[s] == 0 ? std::move(feats[s]) : expand_features(feats[s], to_scale_[s]));
    }
    Tensor fused = fusion_.forward(expanded, cache ? &cache->fusion : nullptr);
    Tensor h = final_.forward(fused, mode, cache ? &cache->final_block : nullptr);
    return head_.forward(h, cache ? &cache->head : nullptr);
  }

  // Accumulates parameter gradients given dLoss/dProbabilities.
  void backward(const Cache& cache, const Tensor& dprobs) {
    const std::size_t S = config_.scales.size();
    Tensor dh = head_.backward(cache.head, dprobs);
    Tensor dfused = final_.backward(cache.final_block, dh);
    std::vector<Tensor> dexp = fusion_.backward(cache.fusion, dfused);
    std::vector<Tensor> dfeats;
    for (std::size_t s = 0; s < S; ++s) {
      dfeats.push_back(config_.scales[s] == 0 ? std::move(dexp[s]) : expand_features_backward(dexp[s], to_scale_[s]));
    }
    for (std::size_t l = stages_.size(); l-- > 0;) {
      Stage& stage = stages_[l];
      const StageCache& sc = cache.stages[l];
      for (std::size_t r = stage.rounds.size(); r-- > 0;) {
        auto& links = stage.rounds[r];
        std::vector<Tensor> dbefore;
        for (std::size_t s = 0; s < S; ++s) dbefore.emplace_back(dfeats[s].shape());
        for (std::size_t k = links.size(); k-- > 0;) {
          auto g = links[k].block.backward(sc.rounds[r][k], dfeats[links[k].target]);
          dfeats[links[k].target] = std::move(g.d_target);
          dbefore[links[k].source] += g.d_source;
        }
        for (std::size_t s = 0; s < S; ++s) dbefore[s] += dfeats[s];
        dfeats = std::move(dbefore);
      }
      for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t j = stage.blocks[s].size(); j-- > 0;) {
          dfeats[s] = stage.blocks[s][j].backward(sc.blocks[s][j], dfeats[s]);
        }
      }
    }
  }

  void update_running_stats(const Cache& cache) {
    for (std::size_t l = 0; l < stages_.size(); ++l)
      for (std::size_t s = 0; s < stages_[l].blocks.size(); ++s)
        for (std::size_t j = 0; j < stages_[l].blocks[s].size(); ++j)
          stages_[l].blocks[s][j].update_running_stats(cache.stages[l].blocks[s][j]);
    final_.update_running_stats(cache.final_block);
  }

  // Parameters and buffers in a fixed order; pointers are valid until the model moves.
  StateRefs state() {
    StateRefs refs;
    collect(refs, input_mean_);
    collect(refs, input_std_);
    for (auto& stage : stages_) {
      for (auto& per_scale : stage.blocks)
        for (auto& b : per_scale) b.collect_state(refs);
      for (auto& round : stage.rounds)
        for (auto& link : round) link.block.collect_state(refs);
    }
    fusion_.collect_state(refs);
    final_.collect_state(refs);
    head_.collect_state(refs);
    return refs;
  }

  std::vector<Parameter*> parameters() { return state().params; }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  Tensor standardize(const Tensor& x) const {
    Tensor y = x;
    const std::size_t C = x.dim(1), plane = x.dim(2) * x.dim(3);
    for (std::size_t b = 0; b < x.dim(0); ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const double m = input_mean_.value[c], inv = 1.0 / input_std_.value[c];
        double* p = y.ptr() + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - m) * inv;
      }
    return y;
  }

 private:
  static ScalePyramid init_pyramid(const MsaGcnConfig& c) {
    c.validate();
    return c.make_pyramid();
  }

  MsaGcnConfig config_;
  ScalePyramid pyramid_;
  std::vector<CoarseningMap> to_scale_;
  Buffer input_mean_, input_std_;
  std::vector<Stage> stages_;
  ScaleAttentionFusion fusion_;
  AsstGcnBlock final_;
  ClassifierHead head_;
};

// ---------------------------------------------------------------------------
// Checkpoint file, all integers little-endian:
//   "MSAG" | u32 version | u32 len, config JSON (UTF-8)
//   then per tensor: u32 len, name | u8 rank | u32 dims[rank] | f32 data[numel]

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  bool at_end() const { return pos_ == bytes_.size(); }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CorruptionError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};
}  // namespace detail

inline std::string checkpoint_bytes(MsaGcn& model) {
  MsaGcnConfig cfg = model.config();
  cfg.pyramid = pyramid_to_json(model.pyramid());
  const std::string config_json = to_json(cfg).dump();
  std::string out = "MSAG";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(config_json.size()));
  out += config_json;
  auto write_tensor = [&](const std::string& name, const Tensor& t) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::put_f32(out, static_cast<float>(v));
  };
  StateRefs refs = model.state();
  for (const Buffer* b : refs.buffers) write_tensor(b->name, b->value);
  for (const Parameter* p : refs.params) write_tensor(p->name, p->value);
  return out;
}

inline void save_checkpoint(MsaGcn& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path);
  const std::string bytes = checkpoint_bytes(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

inline MsaGcn checkpoint_from_bytes(const std::string& bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < 4 || bytes.compare(0, 4, "MSAG") != 0) {
    throw FormatError("not a checkpoint: bad magic bytes");
  }
  in.str(4, "magic");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t cfg_len = in.u32("config length");
  const std::string cfg_text = in.str(cfg_len, "config");
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(cfg_text);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  MsaGcn model(model_config_from_json(cfg_json), 0);
  StateRefs refs = model.state();
  std::unordered_map<std::string, Tensor*> slots;
  for (Buffer* b : refs.buffers) slots[b->name] = &b->value;
  for (Parameter* p : refs.params) slots[p->name] = &p->value;
  std::set<std::string> seen;
  while (!in.at_end()) {
    const std::uint32_t name_len = in.u32("name length");
    const std::string name = in.str(name_len, "name");
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("checkpoint has unknown tensor '" + name + "'");
    if (!seen.insert(name).second) throw FormatError("checkpoint repeats tensor '" + name + "'");
    const std::size_t rank = in.u8("rank");
    Shape shape;
    for (std::size_t i = 0; i < rank; ++i) shape.push_back(in.u32("dims"));
    if (shape != it->second->shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                        shape_str(it->second->shape()));
    }
    Tensor& t = *it->second;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<float>(in.u32("tensor data"));
  }
  if (seen.size() != slots.size()) {
    for (const auto& [name, _] : slots) {
      if (!seen.count(name)) throw CorruptionError("checkpoint is missing tensor '" + name + "'");
    }
  }
  return model;
}

inline MsaGcn load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

}  // namespace msagcn
