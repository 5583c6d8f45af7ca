#pragma once

// Gait samples on disk and in memory, preprocessing into network input, and a
// kinematic walker that synthesizes labeled emotion gaits.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msagcn/model.hpp"
#include "msagcn/train.hpp"

namespace msagcn {

enum class Emotion : int { happy = 0, sad = 1, angry = 2, neutral = 3 };

inline const std::vector<std::string>& emotion_names() {
  static const std::vector<std::string> names{"happy", "sad", "angry", "neutral"};
  return names;
}

inline const std::string& emotion_name(int label) {
  if (label < 0 || label >= static_cast<int>(kNumEmotions)) {
    throw LabelError("label " + std::to_string(label) + " is not an emotion id");
  }
  return emotion_names()[static_cast<std::size_t>(label)];
}

// Accepts names (any case) or the digits 0-3.
inline int parse_emotion(const std::string& token) {
  std::string t;
  for (char c : token) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  const auto& names = emotion_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (t == names[i]) return static_cast<int>(i);
  if (t.size() == 1 && t[0] >= '0' && t[0] <= '3') return t[0] - '0';
  throw LabelError("unknown emotion label '" + token + "'");
}

struct GaitSample {
  std::string id;
  int label = 0;
  Tensor joints;  // [T, V, 3]

  std::size_t frames() const { return joints.dim(0); }
  std::size_t joint_count() const { return joints.dim(1); }

  void validate() const {
    if (joints.rank() != 3 || joints.dim(2) != 3) {
      throw DataError("sample " + id + ": joints must be [T,V,3], got " + shape_str(joints.shape()));
    }
    if (frames() < 2) throw DataError("sample " + id + ": needs at least 2 frames");
    if (joint_count() != 16 && joint_count() != 21) {
      throw DataError("sample " + id + ": joint count " + std::to_string(joint_count()) + " is not 16 or 21");
    }
    if (!joints.all_finite()) throw DataError("sample " + id + ": non-finite coordinate");
    emotion_name(label);
  }
};

struct GaitDataset {
  std::vector<GaitSample> samples;
  std::size_t joint_count = 0;

  std::size_t size() const { return samples.size(); }

  std::array<std::size_t, kNumEmotions> histogram() const {
    std::array<std::size_t, kNumEmotions> h{};
    for (const auto& s : samples) ++h[static_cast<std::size_t>(s.label)];
    return h;
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }

  GaitDataset subset(const std::vector<std::size_t>& idx) const {
    GaitDataset d{{}, joint_count};
    for (std::size_t i : idx) d.samples.push_back(samples.at(i));
    return d;
  }

  void validate() const {
    for (const auto& s : samples) {
      s.validate();
      if (s.joint_count() != joint_count) {
        throw DataError("sample " + s.id + " has " + std::to_string(s.joint_count()) +
                        " joints, dataset has " + std::to_string(joint_count));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Canonical JSON-lines format, one sample per line:
//   {"id": str, "label": "happy|sad|angry|neutral", "t": T, "v": V, "xyz": [T·V·3 floats]}

inline std::string canonical_line(const GaitSample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["label"] = emotion_name(s.label);
  j["t"] = s.frames();
  j["v"] = s.joint_count();
  j["xyz"] = std::vector<double>(s.joints.data().begin(), s.joints.data().end());
  return j.dump();
}

inline void save_canonical(const GaitDataset& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  for (const auto& s : d.samples) f << canonical_line(s) << '\n';
  if (!f) throw DataError("failed writing " + path);
}

namespace detail {
// Rewrites NaN/Infinity tokens and overflowing numbers to null so the sample
// can still be identified when its coordinates are rejected.
inline std::string null_non_finite(const std::string& line) {
  std::string out;
  out.reserve(line.size());
  bool in_string = false;
  for (std::size_t i = 0; i < line.size();) {
    const char c = line[i];
    if (in_string) {
      out.push_back(c);
      if (c == '\\' && i + 1 < line.size()) out.push_back(line[++i]);
      else if (c == '"') in_string = false;
      ++i;
      continue;
    }
    if (c == '"') {
      in_string = true;
      out.push_back(c);
      ++i;
      continue;
    }
    if (c == '-' || c == '+' || std::isalnum(static_cast<unsigned char>(c)) || c == '.') {
      std::size_t end = i;
      while (end < line.size() && line[end] != ',' && line[end] != ']' && line[end] != '}' && line[end] != ':' &&
             !std::isspace(static_cast<unsigned char>(line[end])))
        ++end;
      const std::string tok = line.substr(i, end - i);
      if (tok == "true" || tok == "false" || tok == "null") {
        out += tok;
      } else {
        char* stop = nullptr;
        const double v = std::strtod(tok.c_str(), &stop);
        out += (stop == tok.c_str() + tok.size() && !std::isfinite(v)) ? std::string("null") : tok;
      }
      i = end;
      continue;
    }
    out.push_back(c);
    ++i;
  }
  return out;
}
}  // namespace detail

inline GaitSample parse_canonical_line(const std::string& line, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    try {
      j = nlohmann::json::parse(detail::null_non_finite(line));
    } catch (const nlohmann::json::exception&) {
      throw ParseError(where + ": " + e.what());
    }
  }
  if (!j.is_object()) throw ParseError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k != "id" && k != "label" && k != "t" && k != "v" && k != "xyz") {
      throw ParseError(where + ": unknown key '" + k + "'");
    }
  }
  GaitSample s;
  std::size_t t = 0, v = 0;
  try {
    s.id = j.at("id").get<std::string>();
    const auto& lab = j.at("label");
    s.label = lab.is_number_integer() ? lab.get<int>() : parse_emotion(lab.get<std::string>());
    emotion_name(s.label);
    t = j.at("t").get<std::size_t>();
    v = j.at("v").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + ": " + e.what());
  } catch (const LabelError& e) {
    throw ParseError(where + ": " + e.what());
  }
  const auto& xyz = j.at("xyz");
  if (!xyz.is_array()) throw ParseError(where + ": sample " + s.id + ": xyz must be an array");
  if (t == 0 || v == 0 || xyz.size() != t * v * 3) {
    throw ParseError(where + ": sample " + s.id + ": xyz has " + std::to_string(xyz.size()) +
                     " values, expected t·v·3 = " + std::to_string(t * v * 3));
  }
  std::vector<double> data;
  data.reserve(xyz.size());
  for (const auto& e : xyz) {
    if (!e.is_number() || !std::isfinite(e.get<double>())) {
      throw ParseError(where + ": sample " + s.id + ": non-finite coordinate");
    }
    data.push_back(e.get<double>());
  }
  s.joints = Tensor({t, v, 3}, std::move(data));
  try {
    s.validate();
  } catch (const DataError& e) {
    throw ParseError(where + ": " + e.what());
  }
  return s;
}

inline GaitDataset load_canonical(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open dataset: " + path);
  GaitDataset d;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    GaitSample s = parse_canonical_line(line, line_no);
    if (d.samples.empty()) {
      d.joint_count = s.joint_count();
    } else if (s.joint_count() != d.joint_count) {
      throw DataError("line " + std::to_string(line_no) + ": sample " + s.id + " has " +
                      std::to_string(s.joint_count()) + " joints, earlier samples have " +
                      std::to_string(d.joint_count));
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Row-per-frame import. The coordinate file holds one frame per line as 3·V
// whitespace-separated floats (x y z per joint); sequences are separated by
// blank lines. The label file has one "index label" pair per line, where index
// is the 0-based sequence number. Sequences are center-cropped or edge-padded
// to the nominal length (240 frames for 16 joints, 48 for 21).

inline std::size_t nominal_frames(std::size_t joint_count) {
  if (joint_count == 16) return 240;
  if (joint_count == 21) return 48;
  throw ConfigError("no nominal length for " + std::to_string(joint_count) + " joints");
}

// Center crop when longer, symmetric edge repetition when shorter.
inline Tensor fit_length(const Tensor& joints, std::size_t target) {
  const std::size_t T = joints.dim(0), row = joints.dim(1) * joints.dim(2);
  Tensor out({target, joints.dim(1), joints.dim(2)});
  if (T >= target) {
    const std::size_t start = (T - target) / 2;
    std::copy_n(joints.ptr() + start * row, target * row, out.ptr());
  } else {
    const std::size_t before = (target - T) / 2;
    for (std::size_t t = 0; t < target; ++t) {
      const std::size_t src = t < before ? 0 : std::min(T - 1, t - before);
      std::copy_n(joints.ptr() + src * row, row, out.ptr() + t * row);
    }
  }
  return out;
}

inline GaitDataset import_emotion_gait(const std::string& coords_path, const std::string& labels_path,
                                       std::size_t joint_count) {
  const std::size_t target = nominal_frames(joint_count);
  std::ifstream cf(coords_path);
  if (!cf) throw DataError("cannot open coordinates: " + coords_path);
  std::vector<std::vector<double>> sequences;
  std::vector<double> current;
  std::string line;
  std::size_t line_no = 0;
  auto flush = [&] {
    if (!current.empty()) sequences.push_back(std::move(current));
    current.clear();
  };
  while (std::getline(cf, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      flush();
      continue;
    }
    std::istringstream is(line);
    std::string tok;
    std::size_t n = 0;
    while (is >> tok) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size() || !std::isfinite(v)) {
        throw ParseError(coords_path + ": line " + std::to_string(line_no) + ": bad number '" + tok + "'");
      }
      current.push_back(v);
      ++n;
    }
    if (n != 3 * joint_count) {
      throw ParseError(coords_path + ": line " + std::to_string(line_no) + ": row has " + std::to_string(n) +
                       " values, expected " + std::to_string(3 * joint_count));
    }
  }
  flush();

  std::ifstream lf(labels_path);
  if (!lf) throw DataError("cannot open labels: " + labels_path);
  std::vector<int> labels(sequences.size(), -1);
  line_no = 0;
  while (std::getline(lf, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream is(line);
    std::size_t index = 0;
    std::string token;
    if (!(is >> index >> token)) {
      throw ParseError(labels_path + ": line " + std::to_string(line_no) + ": expected 'index label'");
    }
    if (index >= sequences.size()) {
      throw DataError(labels_path + ": line " + std::to_string(line_no) + ": index " + std::to_string(index) +
                      " but only " + std::to_string(sequences.size()) + " sequences");
    }
    labels[index] = parse_emotion(token);
  }
  GaitDataset d{{}, joint_count};
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    if (labels[i] < 0) throw DataError("sequence " + std::to_string(i) + " has no label");
    const std::size_t T = sequences[i].size() / (3 * joint_count);
    Tensor raw({T, joint_count, 3}, std::move(sequences[i]));
    GaitSample s{"seq" + std::to_string(i), labels[i], fit_length(raw, target)};
    s.validate();
    d.samples.push_back(std::move(s));
  }
  return d;
}

// Inverse of the importer's layout (writes every frame, 17 significant digits).
inline void export_emotion_gait(const GaitDataset& d, const std::string& coords_path, const std::string& labels_path) {
  std::ofstream cf(coords_path), lf(labels_path);
  if (!cf || !lf) throw DataError("cannot open export files");
  char buf[40];
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& s = d.samples[i];
    if (i) cf << '\n';
    const std::size_t row = s.joint_count() * 3;
    for (std::size_t t = 0; t < s.frames(); ++t) {
      for (std::size_t k = 0; k < row; ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", s.joints[t * row + k]);
        cf << (k ? " " : "") << buf;
      }
      cf << '\n';
    }
    lf << i << ' ' << emotion_name(s.label) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Preprocessing

// Translates so the root joint (vertex 0) sits at the origin in frame 0 and
// transposes to [1, 3, T, V]. With `stats`, channels are also z-scored.
inline Tensor preprocess(const GaitSample& s, const ChannelStats* stats = nullptr) {
  const std::size_t T = s.frames(), V = s.joint_count();
  Tensor out({1, 3, T, V});
  for (std::size_t c = 0; c < 3; ++c) {
    const double origin = s.joints(0, 0, c);
    const double m = stats ? stats->mean[c] : 0.0;
    const double inv = stats ? 1.0 / stats->stddev[c] : 1.0;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t v = 0; v < V; ++v) out(0, c, t, v) = (s.joints(t, v, c) - origin - m) * inv;
  }
  return out;
}

inline constexpr double kStdEpsilon = 1e-12;

// Per-channel mean and population std of root-centered coordinates over all
// samples, frames and joints; std = sqrt(var + 1e-12).
inline ChannelStats fit_channel_stats(const GaitDataset& d, std::ostream* warn = &std::cerr) {
  ChannelStats st{std::vector<double>(3, 0.0), std::vector<double>(3, 1.0)};
  if (d.samples.empty()) return st;
  std::array<double, 3> sum{}, sq{};
  double n = 0.0;
  std::vector<Tensor> centered;
  for (const auto& s : d.samples) {
    Tensor x = preprocess(s);
    const std::size_t plane = x.dim(2) * x.dim(3);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) sum[c] += x[c * plane + i];
    n += static_cast<double>(plane);
    centered.push_back(std::move(x));
  }
  for (std::size_t c = 0; c < 3; ++c) st.mean[c] = sum[c] / n;
  for (const auto& x : centered) {
    const std::size_t plane = x.dim(2) * x.dim(3);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) sq[c] += (x[c * plane + i] - st.mean[c]) * (x[c * plane + i] - st.mean[c]);
  }
  for (std::size_t c = 0; c < 3; ++c) {
    const double var = sq[c] / n;
    if (var < kStdEpsilon && warn) {
      *warn << "warning: channel " << c << " has zero variance; standardization uses epsilon\n";
    }
    st.stddev[c] = std::sqrt(var + kStdEpsilon);
  }
  return st;
}

// Stacks root-centered samples into [N, 3, T, V]; standardization is left to
// the model's input layer.
inline TensorDataset to_tensor_dataset(const GaitDataset& d) {
  if (d.samples.empty()) return {};
  const std::size_t T = d.samples.front().frames(), V = d.samples.front().joint_count();
  Tensor inputs({d.samples.size(), 3, T, V});
  std::vector<int> labels;
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& s = d.samples[i];
    if (s.frames() != T || s.joint_count() != V) {
      throw DataError("sample " + s.id + " has shape [" + std::to_string(s.frames()) + "," +
                      std::to_string(s.joint_count()) + "], expected [" + std::to_string(T) + "," +
                      std::to_string(V) + "]");
    }
    Tensor x = preprocess(s);
    std::copy_n(x.ptr(), x.size(), inputs.ptr() + i * x.size());
    labels.push_back(s.label);
  }
  return {std::move(inputs), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Synthetic emotion gaits on the 16-joint skeleton. Each class has its own
// stride frequency, arm-swing amplitude, torso pitch, walking speed and
// posture collapse; every sample jitters those, starts at a random phase,
// heading and world offset, and carries Gaussian coordinate noise.

struct ClassGait {
  double stride_frequency = 0.9;  // Hz
  double arm_swing = 0.35;        // rad
  double torso_pitch = 0.05;      // rad, positive leans forward
  double walk_speed = 1.1;        // m/s
  double posture_collapse = 0.1;  // 0..1, drops head and shoulders
};

struct SynthParams {
  std::array<ClassGait, kNumEmotions> classes{{
      {1.0, 0.55, -0.05, 1.4, 0.0},   // happy
      {0.6, 0.15, 0.30, 0.8, 0.6},    // sad
      {1.3, 0.85, 0.12, 1.6, 0.1},    // angry
      {0.8, 0.35, 0.04, 1.1, 0.15},   // neutral
  }};
  double noise_sigma = 0.01;   // m
  double jitter = 0.1;         // relative per-sample spread of the class parameters
  std::size_t frames = 48;
  double fps = 24.0;
  double offset_range = 2.0;   // m, uniform world offset in the ground plane
  double yaw_range = 0.35;     // rad, heading spread
  std::uint64_t seed = 0;

  void validate() const {
    if (noise_sigma < 0.0) throw ConfigError("synthetic noise sigma must be non-negative");
    if (frames < 2) throw ConfigError("synthetic sequences need at least 2 frames");
    if (!(fps > 0.0)) throw ConfigError("synthetic fps must be positive");
    for (const auto& c : classes) {
      if (!(c.stride_frequency > 0.0)) throw ConfigError("synthetic stride frequency must be positive");
    }
  }
};

namespace detail {
struct Vec3 {
  double x = 0, y = 0, z = 0;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
};

// Segment of length `len` hanging at angle `a` from straight down, tilted forward.
inline Vec3 limb(double len, double a) { return {len * std::sin(a), -len * std::cos(a), 0.0}; }
inline Vec3 up(double len, double a) { return {len * std::sin(a), len * std::cos(a), 0.0}; }
}  // namespace detail

inline GaitSample synthesize_walker(const ClassGait& g, int label, const std::string& id, const SynthParams& p,
                                    Rng& rng) {
  using detail::Vec3;
  auto jit = [&](double v) { return v * (1.0 + p.jitter * rng.uniform(-1.0, 1.0)); };
  const double freq = jit(g.stride_frequency), arm = jit(g.arm_swing), pitch = jit(g.torso_pitch);
  const double speed = jit(g.walk_speed), collapse = std::clamp(jit(g.posture_collapse), 0.0, 1.0);
  const double phase0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double yaw = rng.uniform(-p.yaw_range, p.yaw_range);
  const double ox = rng.uniform(-p.offset_range, p.offset_range), oz = rng.uniform(-p.offset_range, p.offset_range);
  const double leg_amp = 0.2 + 0.12 * speed;

  Tensor joints({p.frames, 16, 3});
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  for (std::size_t t = 0; t < p.frames; ++t) {
    const double time = static_cast<double>(t) / p.fps;
    const double ph = 2.0 * std::numbers::pi * freq * time + phase0;
    std::array<Vec3, 16> j;
    j[0] = {speed * time, 0.95 + 0.02 * std::sin(2.0 * ph) - 0.05 * collapse, 0.0};
    j[1] = j[0] + detail::up(0.25, pitch);
    j[2] = j[1] + detail::up(0.25, pitch + 0.3 * collapse);
    j[3] = j[2] + detail::up(0.15, pitch + 0.8 * collapse);
    for (int side = 0; side < 2; ++side) {
      const double lat = side == 0 ? 1.0 : -1.0;
      const double swing = arm * std::sin(ph + (side == 0 ? std::numbers::pi : 0.0));
      Vec3 shoulder = j[2] + Vec3{0.0, -0.04 - 0.06 * collapse, lat * (0.18 - 0.03 * collapse)};
      Vec3 elbow = shoulder + detail::limb(0.28, swing);
      Vec3 hand = elbow + detail::limb(0.26, 1.3 * swing + 0.15 + 0.2 * arm);
      const std::size_t base = side == 0 ? 4 : 7;
      j[base] = shoulder;
      j[base + 1] = elbow;
      j[base + 2] = hand;

      const double leg_phase = ph + (side == 0 ? 0.0 : std::numbers::pi);
      const double hip_angle = leg_amp * std::sin(leg_phase);
      const double knee_flex = 0.35 * std::max(0.0, std::sin(leg_phase + std::numbers::pi / 2));
      Vec3 hip = j[0] + Vec3{0.0, -0.02, lat * 0.1};
      Vec3 knee = hip + detail::limb(0.45, hip_angle);
      Vec3 foot = knee + detail::limb(0.45, hip_angle - knee_flex);
      const std::size_t lb = side == 0 ? 10 : 13;
      j[lb] = hip;
      j[lb + 1] = knee;
      j[lb + 2] = foot;
    }
    for (std::size_t v = 0; v < 16; ++v) {
      const Vec3& q = j[v];
      joints(t, v, 0) = cy * q.x - sy * q.z + ox + p.noise_sigma * rng.normal();
      joints(t, v, 1) = q.y + p.noise_sigma * rng.normal();
      joints(t, v, 2) = sy * q.x + cy * q.z + oz + p.noise_sigma * rng.normal();
    }
  }
  return {id, label, std::move(joints)};
}

// n_per_class samples of each emotion, class-major order, deterministic in params.seed.
inline GaitDataset generate_synthetic(std::size_t n_per_class, const SynthParams& params) {
  params.validate();
  if (n_per_class == 0) throw ConfigError("n_per_class must be at least 1");
  Rng rng(params.seed);
  GaitDataset d{{}, 16};
  for (std::size_t k = 0; k < kNumEmotions; ++k) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      d.samples.push_back(synthesize_walker(params.classes[k], static_cast<int>(k),
                                            emotion_names()[k] + "_" + std::to_string(i), params, rng));
    }
  }
  return d;
}

inline nlohmann::json to_json(const SynthParams& p) {
  nlohmann::json classes = nlohmann::json::object();
  for (std::size_t k = 0; k < kNumEmotions; ++k) {
    const auto& c = p.classes[k];
    classes[emotion_names()[k]] = {{"stride_frequency", c.stride_frequency}, {"arm_swing", c.arm_swing},
                                   {"torso_pitch", c.torso_pitch},           {"walk_speed", c.walk_speed},
                                   {"posture_collapse", c.posture_collapse}};
  }
  return {{"classes", classes},        {"noise_sigma", p.noise_sigma}, {"jitter", p.jitter},
          {"frames", p.frames},        {"fps", p.fps},                 {"offset_range", p.offset_range},
          {"yaw_range", p.yaw_range},  {"seed", p.seed}};
}

inline SynthParams synth_params_from_json(const nlohmann::json& j, SynthParams p = {}) {
  const std::string sec = "synthetic";
  detail::reject_unknown_keys(j, {"classes", "noise_sigma", "jitter", "frames", "fps", "offset_range",
                                  "yaw_range", "seed", "n_per_class"},
                              sec);
  detail::read_if(j, "noise_sigma", p.noise_sigma, sec);
  detail::read_if(j, "jitter", p.jitter, sec);
  detail::read_if(j, "frames", p.frames, sec);
  detail::read_if(j, "fps", p.fps, sec);
  detail::read_if(j, "offset_range", p.offset_range, sec);
  detail::read_if(j, "yaw_range", p.yaw_range, sec);
  detail::read_if(j, "seed", p.seed, sec);
  if (j.contains("classes")) {
    const auto& cj = j["classes"];
    detail::reject_unknown_keys(cj, {"happy", "sad", "angry", "neutral"}, sec + ".classes");
    for (auto it = cj.begin(); it != cj.end(); ++it) {
      auto& c = p.classes[static_cast<std::size_t>(parse_emotion(it.key()))];
      const std::string s = sec + ".classes." + it.key();
      detail::reject_unknown_keys(*it, {"stride_frequency", "arm_swing", "torso_pitch", "walk_speed", "posture_collapse"}, s);
      detail::read_if(*it, "stride_frequency", c.stride_frequency, s);
      detail::read_if(*it, "arm_swing", c.arm_swing, s);
      detail::read_if(*it, "torso_pitch", c.torso_pitch, s);
      detail::read_if(*it, "walk_speed", c.walk_speed, s);
      detail::read_if(*it, "posture_collapse", c.posture_collapse, s);
    }
  }
  p.validate();
  return p;
}

}  // namespace msagcn
