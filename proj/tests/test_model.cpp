#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "msagcn/gradient_suite.hpp"
#include "msagcn/model.hpp"

using namespace msagcn;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("msagcn_model_" + name)).string();
}

// Hand count for one ASST-GCN block; no GCN bias, BN affine, two temporal
// convolutions, bottleneck + two heads, optional strided projection.
std::size_t block_params(std::size_t in, std::size_t out, std::size_t k1, std::size_t k2, std::size_t d, bool proj) {
  std::size_t n = in * out;                              // gcn weight
  n += 2 * out;                                          // bn gamma, beta
  n += out * out * k1 + out + out * out * k2 + out;      // tcn1, tcn2
  n += out * d + d + 2 * (d * out + out);                // bottleneck, heads
  if (proj) n += out * in + out;                         // residual projection
  return n;
}

// One cross-scale link: two embeddings (8-unit spatial attention MLP, embed,
// 2-layer MLP) where the source side drops the last bias, plus the output map.
std::size_t csfm_params(std::size_t c, std::size_t de) {
  const std::size_t attn = (2 * 8 + 8) + (8 * 1 + 1);
  const std::size_t target = attn + (c * de + de) + (de * de + de) + (de * de + de);
  const std::size_t source = target - de;
  return target + source + c * c + c;
}

}  // namespace

TEST(Config, DefaultsFollowTheStagePlan) {
  const MsaGcnConfig c;
  ASSERT_EQ(c.stages.size(), 4u);
  const std::size_t widths[] = {32, 64, 128, 256};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(c.stages[i].channels, widths[i]);
    EXPECT_EQ(c.stages[i].asst_count, 1u);
    EXPECT_EQ(c.stages[i].csfm_count, i < 2 ? 1u : 0u);
    EXPECT_EQ(c.stages[i].stride, i == 0 ? 1u : 2u);
  }
  EXPECT_EQ(c.kernel1, 5u);
  EXPECT_EQ(c.kernel2, 9u);
  EXPECT_EQ(c.num_classes, 4u);
  EXPECT_EQ(c.scales, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Config, InvalidPlansAreRejected) {
  MsaGcnConfig c;
  c.kernel2 = 5;
  EXPECT_THROW(MsaGcn(c, 0), ConfigError);
  c = MsaGcnConfig{};
  c.kernel1 = 4;
  EXPECT_THROW(MsaGcn(c, 0), ConfigError);
  c = MsaGcnConfig{};
  c.stages.clear();
  EXPECT_THROW(MsaGcn(c, 0), ConfigError);
  c = MsaGcnConfig{};
  c.scales = {1, 2};
  EXPECT_THROW(MsaGcn(c, 0), ConfigError);
  c = MsaGcnConfig{};
  c.scales = {0, 4};
  EXPECT_THROW(MsaGcn(c, 0), ConfigError);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  MsaGcnConfig c = tiny_model_config();
  c.temporal_mode = TemporalMode::single;
  const MsaGcnConfig back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(model_config_from_json({{"chanels", {4, 8}}}), ConfigError);
  EXPECT_THROW(model_config_from_json({{"kernel_pair", {5}}}), ConfigError);
  EXPECT_THROW(model_config_from_json({{"temporal_mode", "fancy"}}), ConfigError);
  const auto levels = model_config_from_json({{"channels", {4, 8, 16}}, {"csfm_levels", 3}});
  for (const auto& s : levels.stages) EXPECT_EQ(s.csfm_count, 1u);
}

TEST(Model, DefaultBuildHasFullWidths) {
  MsaGcn m(MsaGcnConfig{}, 0);
  ASSERT_EQ(m.stages().size(), 4u);
  const std::size_t widths[] = {32, 64, 128, 256};
  for (std::size_t l = 0; l < 4; ++l)
    for (const auto& per_scale : m.stages()[l].blocks)
      EXPECT_EQ(per_scale.back().bn.gamma.value.size(), widths[l]);
}

TEST(Model, SameSeedSameParameters) {
  MsaGcn a(tiny_model_config(), 42), b(tiny_model_config(), 42), c(tiny_model_config(), 43);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value);
    any_diff |= !(pa[i]->value == pc[i]->value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, ParameterNamesAreUnique) {
  MsaGcn m(MsaGcnConfig{}, 0);
  std::set<std::string> names;
  StateRefs refs = m.state();
  for (const Parameter* p : refs.params) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  for (const Buffer* b : refs.buffers) EXPECT_TRUE(names.insert(b->name).second) << b->name;
}

TEST(Model, TinyParameterCountMatchesHandCount) {
  MsaGcnConfig c = tiny_model_config();  // scales 16/10, channels [4,8], kernels 3/5, d=2, d_e=2
  MsaGcn m(c, 0);
  std::size_t expected = 0;
  for (int scale = 0; scale < 2; ++scale) {
    expected += block_params(3, 4, 3, 5, 2, true);  // stage 0, stride 1, 3 -> 4
    expected += block_params(4, 8, 3, 5, 2, true);  // stage 1, stride 2, 4 -> 8
  }
  expected += 2 * csfm_params(4, 2) + 2 * csfm_params(8, 2);  // both directions in both stages
  expected += 2 * (8 * 8 + 8);                                 // fusion gates
  expected += block_params(8, 8, 3, 5, 2, false);              // final block
  expected += 8 * 4 + 4;                                       // head
  EXPECT_EQ(m.parameter_count(), expected);
}

TEST(Model, SingleScaleWithoutFusionHasNoCsfmParameters) {
  MsaGcnConfig c = tiny_model_config();
  c.scales = {0};
  MsaGcn m(c, 0);
  for (const Parameter* p : m.parameters()) {
    EXPECT_EQ(p->name.find("csfm"), std::string::npos) << p->name;
    EXPECT_EQ(p->name.find("fusion"), std::string::npos) << p->name;
  }
  c.scales = {0, 1};
  c.set_csfm_levels(0);
  MsaGcn no_links(c, 0);
  for (const Parameter* p : no_links.parameters()) EXPECT_EQ(p->name.find("csfm"), std::string::npos) << p->name;
}

TEST(Model, OutputShapeAndDistribution) {
  MsaGcnConfig c;
  c.stages = default_stage_plan({8, 16, 16, 16});
  c.bottleneck_min = 4;
  c.embed_min = 4;
  MsaGcn m(c, 1);
  Rng rng(2);
  const Tensor p = m.forward(Tensor::normal({2, 3, 48, 16}, rng, 5.0), Mode::eval, nullptr);
  ASSERT_EQ(p.shape(), (Shape{2, 4}));
  for (std::size_t b = 0; b < 2; ++b) EXPECT_NEAR(p(b, 0) + p(b, 1) + p(b, 2) + p(b, 3), 1.0, 1e-9);
  EXPECT_THROW(m.forward(Tensor({2, 3, 48, 21}), Mode::eval, nullptr), ShapeError);
  EXPECT_THROW(m.forward(Tensor({2, 2, 48, 16}), Mode::eval, nullptr), ShapeError);
}

TEST(Model, ZeroInputGivesUniformDistribution) {
  MsaGcn m(tiny_model_config(), 3);
  const Tensor p = m.forward(Tensor({2, 3, 8, 16}), Mode::eval, nullptr);
  for (double v : p.data()) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(Model, ForwardIsDeterministic) {
  MsaGcn m(tiny_model_config(), 4);
  Rng rng(5);
  const Tensor x = Tensor::normal({3, 3, 8, 16}, rng);
  EXPECT_EQ(m.forward(x, Mode::train, nullptr), m.forward(x, Mode::train, nullptr));
  EXPECT_EQ(m.forward(x, Mode::eval, nullptr), m.forward(x, Mode::eval, nullptr));
}

TEST(Model, EveryAblationCellBuilds) {
  MsaGcnConfig base = tiny_model_config();
  Rng rng(6);
  const Tensor x = Tensor::normal({1, 3, 12, 16}, rng);
  const std::vector<std::vector<std::size_t>> subsets{{0}, {0, 1}, {0, 2}, {0, 3}, {0, 1, 2}, {0, 1, 3}, {0, 2, 3}, {0, 1, 2, 3}};
  for (const auto& s : subsets) {
    MsaGcnConfig c = base;
    c.scales = s;
    MsaGcn m(c, 0);
    EXPECT_EQ(m.forward(x, Mode::eval, nullptr).shape(), (Shape{1, 4}));
  }
  for (std::size_t levels = 0; levels <= 4; ++levels) {
    MsaGcnConfig c = base;
    c.scales = {0, 1, 2};
    c.stages = default_stage_plan({4, 4, 4, 4});
    c.set_csfm_levels(levels);
    MsaGcn m(c, 0);
    std::size_t rounds = 0;
    for (const auto& st : m.stages()) rounds += st.rounds.size();
    EXPECT_EQ(rounds, levels);
    EXPECT_EQ(m.forward(x, Mode::eval, nullptr).shape(), (Shape{1, 4}));
  }
  const std::pair<std::size_t, std::size_t> pairs[] = {{5, 7}, {5, 9}, {7, 9}, {5, 25}, {5, 75}, {9, 25}};
  for (auto [k1, k2] : pairs) {
    MsaGcnConfig c = base;
    c.kernel1 = k1;
    c.kernel2 = k2;
    MsaGcn m(c, 0);
    EXPECT_EQ(m.forward(x, Mode::eval, nullptr).shape(), (Shape{1, 4}));
  }
}

TEST(Model, InputStandardizationUsesStoredStats) {
  MsaGcn m(tiny_model_config(), 7);
  m.set_input_stats({{1.0, 2.0, 3.0}, {2.0, 4.0, 0.5}});
  const Tensor y = m.standardize(Tensor({1, 3, 1, 1}, {3.0, 2.0, 3.5}));
  EXPECT_EQ(y, Tensor({1, 3, 1, 1}, {1.0, 0.0, 1.0}));
  EXPECT_THROW(m.set_input_stats({{0.0}, {1.0}}), ShapeError);
}

TEST(Checkpoint, RoundTripPreservesForward) {
  MsaGcn m(tiny_model_config(), 8);
  m.set_input_stats({{0.1, -0.2, 0.3}, {1.5, 0.7, 1.1}});
  Rng rng(9);
  const Tensor x = Tensor::normal({2, 3, 8, 16}, rng);
  const std::string path = temp_path("roundtrip.msag");
  save_checkpoint(m, path);
  MsaGcn back = load_checkpoint(path);
  const Tensor p0 = m.forward(x, Mode::eval, nullptr), p1 = back.forward(x, Mode::eval, nullptr);
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < p0.size(); ++i) {
    diff = std::max(diff, std::abs(p1[i] - p0[i]));
    scale = std::max(scale, std::abs(p0[i]));
  }
  EXPECT_LE(diff / scale, 1e-6);
  MsaGcn rounded(tiny_model_config(), 8);
  rounded.set_input_stats({{0.1, -0.2, 0.3}, {1.5, 0.7, 1.1}});
  StateRefs refs = rounded.state();
  for (Buffer* buf : refs.buffers)
    for (std::size_t k = 0; k < buf->value.size(); ++k) buf->value[k] = static_cast<float>(buf->value[k]);
  for (Parameter* par : refs.params)
    for (std::size_t k = 0; k < par->value.size(); ++k) par->value[k] = static_cast<float>(par->value[k]);
  EXPECT_EQ(rounded.forward(x, Mode::eval, nullptr), p1);
  const auto a = m.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i]->name, b[i]->name);
    for (std::size_t k = 0; k < a[i]->value.size(); ++k)
      EXPECT_EQ(b[i]->value[k], static_cast<double>(static_cast<float>(a[i]->value[k])));
  }
  EXPECT_EQ(checkpoint_bytes(back), checkpoint_bytes(m));
  std::filesystem::remove(path);
}

TEST(Checkpoint, ByteLengthFollowsTheFormat) {
  MsaGcn m(tiny_model_config(), 10);
  const std::string bytes = checkpoint_bytes(m);
  std::uint32_t cfg_len = 0;
  std::memcpy(&cfg_len, bytes.data() + 8, 4);
  std::size_t expected = 4 + 4 + 4 + cfg_len;
  StateRefs refs = m.state();
  auto add = [&](const std::string& name, const Tensor& t) { expected += 4 + name.size() + 1 + 4 * t.rank() + 4 * t.size(); };
  for (const Buffer* b : refs.buffers) add(b->name, b->value);
  for (const Parameter* p : refs.params) add(p->name, p->value);
  EXPECT_EQ(bytes.size(), expected);
  EXPECT_EQ(bytes.substr(0, 4), "MSAG");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(Checkpoint, DamagedFilesAreRejected) {
  MsaGcn m(tiny_model_config(), 11);
  const std::string good = checkpoint_bytes(m);
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(checkpoint_from_bytes(bad_magic), FormatError);
  std::string bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW(checkpoint_from_bytes(bad_version), FormatError);
  EXPECT_THROW(checkpoint_from_bytes(good.substr(0, good.size() - 3)), CorruptionError);
  EXPECT_THROW(checkpoint_from_bytes(good.substr(0, 10)), CorruptionError);
  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.msag")), DataError);
}
