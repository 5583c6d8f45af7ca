#pragma once

// Skeleton topology per scale and the fine-to-coarse vertex pooling that
// builds the multiscale input.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msagcn/tensor.hpp"

namespace msagcn {

using Edge = std::pair<std::size_t, std::size_t>;

// Â = D^(-1/2)(A + I)D^(-1/2), with D the degree matrix of A + I.
inline Tensor normalize_adjacency(std::size_t vertex_count, const std::vector<Edge>& edges);

class SkeletonGraph {
 public:
  SkeletonGraph(std::size_t vertex_count, std::vector<Edge> edges,
                std::vector<std::string> vertex_names = {})
      : vertex_count_(vertex_count), edges_(std::move(edges)), names_(std::move(vertex_names)) {
    if (vertex_count_ == 0) throw TopologyError("skeleton graph needs at least one vertex");
    for (auto& [a, b] : edges_) {
      if (a >= vertex_count_ || b >= vertex_count_) {
        throw TopologyError("edge (" + std::to_string(a) + "," + std::to_string(b) +
                            ") references a vertex outside 0.." +
                            std::to_string(vertex_count_ - 1));
      }
      if (a == b) throw TopologyError("self-loop on vertex " + std::to_string(a));
      if (a > b) std::swap(a, b);
    }
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
    if (names_.empty()) {
      for (std::size_t i = 0; i < vertex_count_; ++i) names_.push_back("v" + std::to_string(i));
    }
    if (names_.size() != vertex_count_) throw TopologyError("vertex name count mismatch");
    adjacency_ = normalize_adjacency(vertex_count_, edges_);
  }

  std::size_t vertex_count() const { return vertex_count_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<std::string>& vertex_names() const { return names_; }
  const Tensor& normalized_adjacency() const { return adjacency_; }

 private:
  std::size_t vertex_count_;
  std::vector<Edge> edges_;
  std::vector<std::string> names_;
  Tensor adjacency_;
};

inline bool is_connected(std::size_t n, const std::vector<Edge>& edges) {
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::size_t components = n;
  for (auto [a, b] : edges) {
    const std::size_t ra = find(a), rb = find(b);
    if (ra != rb) {
      parent[ra] = rb;
      --components;
    }
  }
  return components == 1;
}

inline Tensor normalize_adjacency(std::size_t n, const std::vector<Edge>& edges) {
  if (!is_connected(n, edges)) {
    throw TopologyError("normalize_adjacency: graph with " + std::to_string(n) +
                        " vertices is not connected");
  }
  Tensor a = Tensor::identity(n);
  for (auto [i, j] : edges) a(i, j) = a(j, i) = 1.0;
  std::vector<double> d_inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a(i, j);
    d_inv_sqrt[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) *= d_inv_sqrt[i] * d_inv_sqrt[j];
  return a;
}

// Partition of fine vertices into groups; group g becomes coarse vertex g.
class CoarseningMap {
 public:
  CoarseningMap(std::size_t fine_vertex_count, std::vector<std::vector<std::size_t>> groups)
      : fine_(fine_vertex_count), groups_(std::move(groups)), owner_(fine_vertex_count) {
    std::vector<int> seen(fine_, 0);
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (groups_[g].empty()) throw TopologyError("coarsening group " + std::to_string(g) + " is empty");
      for (std::size_t v : groups_[g]) {
        if (v >= fine_) {
          throw TopologyError("coarsening group " + std::to_string(g) + " names vertex " +
                              std::to_string(v) + " outside 0.." + std::to_string(fine_ - 1));
        }
        if (seen[v]++) throw TopologyError("vertex " + std::to_string(v) + " appears in two groups");
        owner_[v] = g;
      }
    }
    for (std::size_t v = 0; v < fine_; ++v) {
      if (!seen[v]) throw TopologyError("vertex " + std::to_string(v) + " is in no group");
    }
  }

  static CoarseningMap identity(std::size_t n) {
    std::vector<std::vector<std::size_t>> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = {i};
    return CoarseningMap(n, std::move(g));
  }

  std::size_t fine_vertex_count() const { return fine_; }
  std::size_t coarse_vertex_count() const { return groups_.size(); }
  const std::vector<std::vector<std::size_t>>& groups() const { return groups_; }
  std::size_t group_of(std::size_t fine_vertex) const { return owner_.at(fine_vertex); }

  // this: fine -> mid, next: mid -> coarse; result: fine -> coarse.
  CoarseningMap then(const CoarseningMap& next) const {
    if (next.fine_vertex_count() != coarse_vertex_count()) {
      throw TopologyError("cannot compose coarsening maps: " + std::to_string(coarse_vertex_count()) +
                          " vs " + std::to_string(next.fine_vertex_count()));
    }
    std::vector<std::vector<std::size_t>> g(next.coarse_vertex_count());
    for (std::size_t c = 0; c < next.coarse_vertex_count(); ++c) {
      for (std::size_t mid : next.groups()[c])
        for (std::size_t f : groups_[mid]) g[c].push_back(f);
      std::sort(g[c].begin(), g[c].end());
    }
    return CoarseningMap(fine_, std::move(g));
  }

  // Two coarse vertices are adjacent iff any of their members are.
  std::vector<Edge> quotient_edges(const std::vector<Edge>& fine_edges) const {
    std::vector<Edge> out;
    for (auto [a, b] : fine_edges) {
      std::size_t ga = owner_[a], gb = owner_[b];
      if (ga == gb) continue;
      if (ga > gb) std::swap(ga, gb);
      out.emplace_back(ga, gb);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

 private:
  std::size_t fine_;
  std::vector<std::vector<std::size_t>> groups_;
  std::vector<std::size_t> owner_;
};

// Coarse vertex = mean of its group's fine vertices, per batch/channel/time.
inline Tensor coarsen_features(const Tensor& x, const CoarseningMap& m) {
  x.require_rank(4, "coarsen_features");
  if (x.dim(3) != m.fine_vertex_count()) {
    throw ShapeError("coarsen_features: input has " + std::to_string(x.dim(3)) +
                     " vertices, map expects " + std::to_string(m.fine_vertex_count()));
  }
  const std::size_t rows = x.dim(0) * x.dim(1) * x.dim(2), Vf = x.dim(3);
  const std::size_t Vc = m.coarse_vertex_count();
  Tensor y({x.dim(0), x.dim(1), x.dim(2), Vc});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xp = x.ptr() + r * Vf;
    double* yp = y.ptr() + r * Vc;
    for (std::size_t g = 0; g < Vc; ++g) {
      const auto& members = m.groups()[g];
      double s = 0.0;
      for (std::size_t v : members) s += xp[v];
      yp[g] = s / static_cast<double>(members.size());
    }
  }
  return y;
}

inline Tensor coarsen_features_backward(const Tensor& dy, const CoarseningMap& m) {
  const std::size_t rows = dy.dim(0) * dy.dim(1) * dy.dim(2), Vf = m.fine_vertex_count();
  const std::size_t Vc = m.coarse_vertex_count();
  Tensor dx({dy.dim(0), dy.dim(1), dy.dim(2), Vf});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < Vc; ++g) {
      const auto& members = m.groups()[g];
      const double share = dy[r * Vc + g] / static_cast<double>(members.size());
      for (std::size_t v : members) dx[r * Vf + v] = share;
    }
  }
  return dx;
}

// Each fine vertex receives its group's coarse feature.
inline Tensor expand_features(const Tensor& x, const CoarseningMap& m) {
  x.require_rank(4, "expand_features");
  if (x.dim(3) != m.coarse_vertex_count()) {
    throw ShapeError("expand_features: input has " + std::to_string(x.dim(3)) +
                     " vertices, map expects " + std::to_string(m.coarse_vertex_count()));
  }
  const std::size_t rows = x.dim(0) * x.dim(1) * x.dim(2), Vf = m.fine_vertex_count();
  const std::size_t Vc = m.coarse_vertex_count();
  Tensor y({x.dim(0), x.dim(1), x.dim(2), Vf});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t v = 0; v < Vf; ++v) y[r * Vf + v] = x[r * Vc + m.group_of(v)];
  return y;
}

inline Tensor expand_features_backward(const Tensor& dy, const CoarseningMap& m) {
  const std::size_t rows = dy.dim(0) * dy.dim(1) * dy.dim(2), Vf = m.fine_vertex_count();
  const std::size_t Vc = m.coarse_vertex_count();
  Tensor dx({dy.dim(0), dy.dim(1), dy.dim(2), Vc});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t v = 0; v < Vf; ++v) dx[r * Vc + m.group_of(v)] += dy[r * Vf + v];
  return dx;
}

// Scales ordered fine -> coarse with a coarsening map between neighbours.
class ScalePyramid {
 public:
  ScalePyramid(SkeletonGraph base, std::vector<std::string> scale_names,
               std::vector<CoarseningMap> maps)
      : names_(std::move(scale_names)), maps_(std::move(maps)) {
    scales_.push_back(std::move(base));
    for (const auto& m : maps_) {
      const SkeletonGraph& prev = scales_.back();
      if (m.fine_vertex_count() != prev.vertex_count()) {
        throw TopologyError("pyramid map expects " + std::to_string(m.fine_vertex_count()) +
                            " fine vertices, previous scale has " +
                            std::to_string(prev.vertex_count()));
      }
      if (m.coarse_vertex_count() >= prev.vertex_count()) {
        throw TopologyError("pyramid vertex counts must strictly decrease");
      }
      scales_.emplace_back(m.coarse_vertex_count(), m.quotient_edges(prev.edges()));
    }
    if (names_.size() != scales_.size()) throw TopologyError("pyramid scale name count mismatch");
  }

  std::size_t size() const { return scales_.size(); }
  const SkeletonGraph& scale(std::size_t i) const { return scales_.at(i); }
  const std::vector<SkeletonGraph>& scales() const { return scales_; }
  const CoarseningMap& map(std::size_t i) const { return maps_.at(i); }
  const std::vector<CoarseningMap>& maps() const { return maps_; }
  const std::vector<std::string>& names() const { return names_; }

  std::vector<std::size_t> vertex_counts() const {
    std::vector<std::size_t> out;
    for (const auto& s : scales_) out.push_back(s.vertex_count());
    return out;
  }

  // Composite map from scale 0 to scale `level`.
  CoarseningMap map_from_finest(std::size_t level) const {
    CoarseningMap m = CoarseningMap::identity(scales_.front().vertex_count());
    for (std::size_t i = 0; i < level; ++i) m = m.then(maps_.at(i));
    return m;
  }

  // Keeps only the first `count` scales.
  ScalePyramid truncated(std::size_t count) const {
    if (count == 0 || count > size()) throw ConfigError("invalid pyramid truncation");
    return ScalePyramid(scales_.front(), {names_.begin(), names_.begin() + count},
                        {maps_.begin(), maps_.begin() + (count - 1)});
  }

 private:
  std::vector<SkeletonGraph> scales_;
  std::vector<std::string> names_;
  std::vector<CoarseningMap> maps_;
};

// ---------------------------------------------------------------------------
// Built-in skeletons. The merge tables are anatomical reconstructions: elbow
// with hand, knee with foot, root with spine, neck with head at the first
// level, then whole limbs and the torso, then arms / legs / torso.

namespace skeleton16 {
// 0 root, 1 spine, 2 neck, 3 head, 4 l_shoulder, 5 l_elbow, 6 l_hand,
// 7 r_shoulder, 8 r_elbow, 9 r_hand, 10 l_hip, 11 l_knee, 12 l_foot,
// 13 r_hip, 14 r_knee, 15 r_foot
inline const std::vector<std::string> names{
    "root",    "spine",   "neck",   "head",  "l_shoulder", "l_elbow", "l_hand", "r_shoulder",
    "r_elbow", "r_hand",  "l_hip",  "l_knee", "l_foot",    "r_hip",   "r_knee", "r_foot"};
inline const std::vector<Edge> edges{{0, 1},  {1, 2},  {2, 3},   {2, 4},   {4, 5},
                                     {5, 6},  {2, 7},  {7, 8},   {8, 9},   {0, 10},
                                     {10, 11}, {11, 12}, {0, 13}, {13, 14}, {14, 15}};
}  // namespace skeleton16

namespace skeleton21 {
inline const std::vector<std::string> names{
    "root",   "spine",  "chest",   "neck",   "head",   "l_clavicle", "l_shoulder",
    "l_elbow", "l_hand", "r_clavicle", "r_shoulder", "r_elbow", "r_hand", "l_hip",
    "l_knee", "l_ankle", "l_toe",  "r_hip",  "r_knee", "r_ankle",    "r_toe"};
inline const std::vector<Edge> edges{{0, 1},   {1, 2},   {2, 3},   {3, 4},   {2, 5},
                                     {5, 6},   {6, 7},   {7, 8},   {2, 9},   {9, 10},
                                     {10, 11}, {11, 12}, {0, 13},  {13, 14}, {14, 15},
                                     {15, 16}, {0, 17},  {17, 18}, {18, 19}, {19, 20}};
}  // namespace skeleton21

// Limb/torso scale shared by both skeletons: 10 -> 5 and 5 -> 3.
inline const std::vector<std::vector<std::size_t>> kGroups10to5{{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};
inline const std::vector<std::vector<std::size_t>> kGroups5to3{{0}, {1, 2}, {3, 4}};

// 16 -> 10 -> 5 (-> 3 when `with_part_scale`), or 21 -> 10 -> 5 (-> 3).
inline ScalePyramid default_pyramid(std::size_t joint_count, bool with_part_scale = false) {
  std::vector<CoarseningMap> maps;
  std::vector<std::string> names{std::to_string(joint_count) + "-joint", "10-part", "5-limb"};
  SkeletonGraph base = [&] {
    if (joint_count == 16) {
      maps.emplace_back(16, std::vector<std::vector<std::size_t>>{
                                {0, 1}, {2, 3}, {4}, {5, 6}, {7}, {8, 9}, {10}, {11, 12}, {13}, {14, 15}});
      return SkeletonGraph(16, skeleton16::edges, skeleton16::names);
    }
    if (joint_count == 21) {
      maps.emplace_back(21, std::vector<std::vector<std::size_t>>{
                                {0, 1}, {2, 3, 4}, {5, 6}, {7, 8}, {9, 10}, {11, 12}, {13, 14}, {15, 16}, {17, 18}, {19, 20}});
      return SkeletonGraph(21, skeleton21::edges, skeleton21::names);
    }
    throw ConfigError("default_pyramid: unsupported joint count " + std::to_string(joint_count) +
                      " (expected 16 or 21)");
  }();
  maps.emplace_back(10, kGroups10to5);
  if (with_part_scale) {
    maps.emplace_back(5, kGroups5to3);
    names.push_back("3-part");
  }
  return ScalePyramid(std::move(base), std::move(names), std::move(maps));
}

// ---------------------------------------------------------------------------
// Human-readable form: {"joints": [...names], "edges": [[a,b],...],
//                       "levels": [{"name": ..., "groups": [[...], ...]}, ...]}

inline nlohmann::json pyramid_to_json(const ScalePyramid& p) {
  nlohmann::json j;
  j["joints"] = p.scale(0).vertex_names();
  nlohmann::json edges = nlohmann::json::array();
  for (auto [a, b] : p.scale(0).edges()) edges.push_back({a, b});
  j["edges"] = edges;
  nlohmann::json levels = nlohmann::json::array();
  for (std::size_t i = 0; i < p.maps().size(); ++i) {
    levels.push_back({{"name", p.names()[i + 1]}, {"groups", p.map(i).groups()}});
  }
  j["levels"] = levels;
  j["name"] = p.names()[0];
  return j;
}

inline ScalePyramid pyramid_from_json(const nlohmann::json& j) {
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() != "joints" && it.key() != "edges" && it.key() != "levels" && it.key() != "name") {
        throw ConfigError("pyramid: unknown key '" + it.key() + "'");
      }
    }
    auto names = j.at("joints").get<std::vector<std::string>>();
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) {
      if (e.size() != 2) throw ConfigError("pyramid: edges must be pairs");
      edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
    }
    std::vector<std::string> scale_names{j.value("name", std::to_string(names.size()) + "-joint")};
    std::vector<CoarseningMap> maps;
    std::size_t fine = names.size();
    for (const auto& lvl : j.at("levels")) {
      auto groups = lvl.at("groups").get<std::vector<std::vector<std::size_t>>>();
      scale_names.push_back(lvl.value("name", std::to_string(groups.size()) + "-node"));
      maps.emplace_back(fine, std::move(groups));
      fine = maps.back().coarse_vertex_count();
    }
    const std::size_t n = names.size();
    return ScalePyramid(SkeletonGraph(n, std::move(edges), std::move(names)),
                        std::move(scale_names), std::move(maps));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("pyramid: ") + e.what());
  } catch (const TopologyError& e) {
    throw ConfigError(std::string("pyramid: ") + e.what());
  }
}

}  // namespace msagcn
