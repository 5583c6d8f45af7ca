#pragma once

// Network building blocks. Every layer follows the same protocol:
//
//   Tensor forward(const Tensor& x, ..., Cache* cache) const;
//   Tensor backward(const Cache& cache, const Tensor& dy);
//
// forward never mutates the layer, so a built model may serve concurrent
// inference calls. backward accumulates into Parameter::grad and returns the
// gradient with respect to the layer input. Layers with batch statistics also
// expose update_running_stats(cache), which the training loop calls after a
// training-mode forward.

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msagcn/graph.hpp"
#include "msagcn/ops.hpp"
#include "msagcn/tensor.hpp"

namespace msagcn {

inline void collect(StateRefs& refs, Parameter& p) { refs.params.push_back(&p); }
inline void collect(StateRefs& refs, Buffer& b) { refs.buffers.push_back(&b); }

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(name + ".weight", fan_in_uniform({in, out}, in, rng)),
        bias(name + ".bias", Tensor::zeros({out})) {}

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Tensor forward(const Tensor& x) const { return ops::linear(x, weight.value, bias.value); }

  Tensor backward(const Tensor& x, const Tensor& dy) {
    auto g = ops::linear_backward(x, weight.value, dy);
    weight.accumulate(g.dw);
    bias.accumulate(g.dbias);
    return std::move(g.dx);
  }

  void collect_state(StateRefs& refs) {
    collect(refs, weight);
    collect(refs, bias);
  }

  Parameter weight;
  Parameter bias;
};

// 1x1 map over the channel axis of a [B,C,T,V] feature map. Without a bias
// the zero bias stays fixed and is not part of the layer state.
class ChannelMap {
 public:
  ChannelMap() = default;
  ChannelMap(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias = true)
      : weight(name + ".weight", fan_in_uniform({in, out}, in, rng)),
        bias(name + ".bias", Tensor::zeros({out}), with_bias) {}

  bool has_bias() const { return bias.requires_grad; }

  Tensor forward(const Tensor& x) const { return ops::channel_map(x, weight.value, bias.value); }

  Tensor backward(const Tensor& x, const Tensor& dy) {
    auto g = ops::channel_map_backward(x, weight.value, dy);
    weight.accumulate(g.dw);
    bias.accumulate(g.dbias);
    return std::move(g.dx);
  }

  void collect_state(StateRefs& refs) {
    collect(refs, weight);
    if (has_bias()) collect(refs, bias);
  }

  Parameter weight;
  Parameter bias;
};

// Convolution along time with "same" padding (k-1)/2 and a temporal stride.
class TemporalConv {
 public:
  TemporalConv() = default;
  TemporalConv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
               std::size_t stride, Rng& rng)
      : weight(name + ".weight", fan_in_uniform({out, in, kernel}, in * kernel, rng)),
        bias(name + ".bias", Tensor::zeros({out})),
        stride_(stride),
        pad_((kernel - 1) / 2) {
    if (kernel % 2 == 0) throw ConfigError(name + ": temporal kernel must be odd, got " + std::to_string(kernel));
    if (stride == 0) throw ConfigError(name + ": stride must be positive");
  }

  std::size_t kernel() const { return weight.value.dim(2); }
  std::size_t stride() const { return stride_; }

  Tensor forward(const Tensor& x) const {
    return ops::temporal_conv(x, weight.value, &bias.value, stride_, pad_);
  }

  Tensor backward(const Tensor& x, const Tensor& dy) {
    auto g = ops::temporal_conv_backward(x, weight.value, stride_, pad_, dy);
    weight.accumulate(g.dw);
    bias.accumulate(g.dbias);
    return std::move(g.dx);
  }

  void collect_state(StateRefs& refs) {
    collect(refs, weight);
    collect(refs, bias);
  }

  Parameter weight;
  Parameter bias;

 private:
  std::size_t stride_ = 1;
  std::size_t pad_ = 0;
};

class BatchNorm {
 public:
  struct Cache {
    Tensor xhat;
    ops::BatchNormStats stats;
    Mode mode = Mode::eval;
    std::size_t count = 0;
  };

  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels, double eps = 1e-5, double momentum = 0.1)
      : gamma(name + ".gamma", Tensor::full({channels}, 1.0)),
        beta(name + ".beta", Tensor::zeros({channels})),
        running_mean{name + ".running_mean", Tensor::zeros({channels})},
        running_var{name + ".running_var", Tensor::full({channels}, 1.0)},
        eps_(eps),
        momentum_(momentum) {}

  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const {
    auto r = ops::batch_norm(x, gamma.value, beta.value, running_mean.value, running_var.value,
                             mode, eps_);
    if (cache) {
      cache->xhat = std::move(r.xhat);
      cache->stats = std::move(r.stats);
      cache->mode = mode;
      cache->count = x.dim(0) * x.dim(2) * x.dim(3);
    }
    return std::move(r.y);
  }

  Tensor backward(const Cache& cache, const Tensor& dy) {
    auto g = ops::batch_norm_backward(cache.xhat, cache.stats, gamma.value, cache.mode, dy);
    gamma.accumulate(g.dgamma);
    beta.accumulate(g.dbeta);
    return std::move(g.dx);
  }

  // Exponential moving average; the running variance is the unbiased estimate.
  void update_running_stats(const Cache& cache) {
    if (cache.mode != Mode::train) return;
    const double n = static_cast<double>(cache.count);
    const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    for (std::size_t c = 0; c < running_mean.value.size(); ++c) {
      running_mean.value[c] = (1.0 - momentum_) * running_mean.value[c] + momentum_ * cache.stats.mean[c];
      running_var.value[c] =
          (1.0 - momentum_) * running_var.value[c] + momentum_ * cache.stats.var[c] * unbias;
    }
  }

  void collect_state(StateRefs& refs) {
    collect(refs, gamma);
    collect(refs, beta);
    collect(refs, running_mean);
    collect(refs, running_var);
  }

  Parameter gamma;
  Parameter beta;
  Buffer running_mean;
  Buffer running_var;

 private:
  double eps_ = 1e-5;
  double momentum_ = 0.1;
};

// ---------------------------------------------------------------------------
// Spatial graph convolution: vertex aggregation by Â, then a 1x1 channel map.
//   y[b,o,t,v] = Σ_u Â[v,u] Σ_i x[b,i,t,u]·W[i,o] + bias[o]

inline Tensor aggregate_vertices(const Tensor& x, const Tensor& adj) {
  const std::size_t V = x.dim(3), rows = x.size() / V;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xp = x.ptr() + r * V;
    double* yp = y.ptr() + r * V;
    for (std::size_t v = 0; v < V; ++v) {
      const double* ar = adj.ptr() + v * V;
      double s = 0.0;
      for (std::size_t u = 0; u < V; ++u) s += ar[u] * xp[u];
      yp[v] = s;
    }
  }
  return y;
}

// Σ_v Â[v,u]·dy[..,v], the transpose of aggregate_vertices.
inline Tensor aggregate_vertices_backward(const Tensor& dy, const Tensor& adj) {
  const std::size_t V = dy.dim(3), rows = dy.size() / V;
  Tensor dx(dy.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gp = dy.ptr() + r * V;
    double* dp = dx.ptr() + r * V;
    for (std::size_t v = 0; v < V; ++v) {
      const double* ar = adj.ptr() + v * V;
      for (std::size_t u = 0; u < V; ++u) dp[u] += ar[u] * gp[v];
    }
  }
  return dx;
}

class GcnLayer {
 public:
  struct Cache {
    Tensor aggregated;
  };

  GcnLayer() = default;
  GcnLayer(const std::string& name, const SkeletonGraph& graph, std::size_t in, std::size_t out, Rng& rng,
           bool with_bias = true)
      : adjacency_(graph.normalized_adjacency()), map(name, in, out, rng, with_bias) {}

  std::size_t vertex_count() const { return adjacency_.dim(0); }
  const Tensor& adjacency() const { return adjacency_; }

  Tensor forward(const Tensor& x, Cache* cache) const {
    x.require_rank(4, "gcn_forward");
    if (x.dim(3) != vertex_count()) {
      throw ShapeError("gcn_forward: input has " + std::to_string(x.dim(3)) +
                       " vertices, graph has " + std::to_string(vertex_count()));
    }
    Tensor agg = aggregate_vertices(x, adjacency_);
    Tensor y = map.forward(agg);
    if (cache) cache->aggregated = std::move(agg);
    return y;
  }

  Tensor backward(const Cache& cache, const Tensor& dy) {
    Tensor dagg = map.backward(cache.aggregated, dy);
    return aggregate_vertices_backward(dagg, adjacency_);
  }

  void collect_state(StateRefs& refs) { map.collect_state(refs); }

 private:
  Tensor adjacency_;

 public:
  ChannelMap map;
};

// ---------------------------------------------------------------------------
// Adaptively selected temporal convolution: two temporal convolutions with
// different kernels, mixed per channel by input-dependent softmax weights.
//   U1 = TCN_k1(x), U2 = TCN_k2(x)
//   z  = GAP_{T,V}(U1 + U2)
//   (a1, a2) = softmax(head1(relu(bottleneck(z))), head2(...))  per channel
//   V  = a1 ⊙ U1 + a2 ⊙ U2
// With a single branch the block reduces to V = U1 (plain ST-GCN temporal conv).

enum class TemporalMode { adaptive, single };

class AsTcn {
 public:
  struct Cache {
    Tensor x;
    Tensor u1, u2;
    Tensor z, hpre, h;
    Tensor a1, a2;
  };

  AsTcn() = default;
  AsTcn(const std::string& name, std::size_t channels, std::size_t k1, std::size_t k2,
        std::size_t stride, TemporalMode mode, std::size_t bottleneck_min, Rng& rng)
      : mode_(mode), tcn1(name + ".tcn1", channels, channels, k1, stride, rng) {
    if (mode_ == TemporalMode::adaptive) {
      if (k1 == k2) throw ConfigError(name + ": adaptive branches need distinct kernels");
      const std::size_t d = std::max(channels / 4, bottleneck_min);
      tcn2 = TemporalConv(name + ".tcn2", channels, channels, k2, stride, rng);
      bottleneck = Linear(name + ".bottleneck", channels, d, rng);
      head1 = Linear(name + ".head1", d, channels, rng);
      head2 = Linear(name + ".head2", d, channels, rng);
    }
  }

  TemporalMode mode() const { return mode_; }

  Tensor forward(const Tensor& x, Cache* cache) const {
    Tensor u1 = tcn1.forward(x);
    if (mode_ == TemporalMode::single) {
      if (cache) cache->x = x;
      return u1;
    }
    Tensor u2 = tcn2.forward(x);
    Tensor z = ops::pool_time_vertex(ops::add(u1, u2));
    Tensor hpre = bottleneck.forward(z);
    Tensor h = ops::relu(hpre);
    Tensor l1 = head1.forward(h), l2 = head2.forward(h);
    Tensor a1(l1.shape()), a2(l2.shape());
    for (std::size_t i = 0; i < l1.size(); ++i) {
      const double m = std::max(l1[i], l2[i]);
      const double e1 = std::exp(l1[i] - m), e2 = std::exp(l2[i] - m);
      a1[i] = e1 / (e1 + e2);
      a2[i] = e2 / (e1 + e2);
    }
    Tensor v = ops::broadcast_mul(u1, a1);
    v += ops::broadcast_mul(u2, a2);
    if (cache) {
      cache->x = x;
      cache->u1 = std::move(u1);
      cache->u2 = std::move(u2);
      cache->z = std::move(z);
      cache->hpre = std::move(hpre);
      cache->h = std::move(h);
      cache->a1 = std::move(a1);
      cache->a2 = std::move(a2);
    }
    return v;
  }

  Tensor backward(const Cache& c, const Tensor& dv) {
    if (mode_ == TemporalMode::single) return tcn1.backward(c.x, dv);
    auto g1 = ops::broadcast_mul_backward(c.u1, c.a1, dv);
    auto g2 = ops::broadcast_mul_backward(c.u2, c.a2, dv);
    Tensor dl1(c.a1.shape()), dl2(c.a2.shape());
    for (std::size_t i = 0; i < dl1.size(); ++i) {
      const double dot = c.a1[i] * g1.dw[i] + c.a2[i] * g2.dw[i];
      dl1[i] = c.a1[i] * (g1.dw[i] - dot);
      dl2[i] = c.a2[i] * (g2.dw[i] - dot);
    }
    Tensor dh = head1.backward(c.h, dl1);
    dh += head2.backward(c.h, dl2);
    Tensor dz = bottleneck.backward(c.z, ops::relu_backward(c.hpre, dh));
    Tensor ds = ops::pool_time_vertex_backward(c.u1.shape(), dz);
    g1.dx += ds;
    g2.dx += ds;
    Tensor dx = tcn1.backward(c.x, g1.dx);
    dx += tcn2.backward(c.x, g2.dx);
    return dx;
  }

  void collect_state(StateRefs& refs) {
    tcn1.collect_state(refs);
    if (mode_ == TemporalMode::adaptive) {
      tcn2.collect_state(refs);
      bottleneck.collect_state(refs);
      head1.collect_state(refs);
      head2.collect_state(refs);
    }
  }

 private:
  TemporalMode mode_ = TemporalMode::adaptive;

 public:
  TemporalConv tcn1, tcn2;
  Linear bottleneck, head1, head2;
};

// ---------------------------------------------------------------------------
// ASST-GCN block: X_out = AS-TCN(ReLU(BN(GCN(x)))) + R(x). R is the identity
// when channels and stride are unchanged, otherwise a strided 1x1 projection.
// The GCN carries no bias here: batch norm would cancel it.

struct BlockOptions {
  std::size_t k1 = 5;
  std::size_t k2 = 9;
  TemporalMode temporal_mode = TemporalMode::adaptive;
  std::size_t bottleneck_min = 16;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
};

class AsstGcnBlock {
 public:
  struct Cache {
    Tensor x;
    GcnLayer::Cache gcn;
    BatchNorm::Cache bn;
    Tensor normalized;
    AsTcn::Cache astcn;
  };

  AsstGcnBlock() = default;
  AsstGcnBlock(const std::string& name, const SkeletonGraph& graph, std::size_t in, std::size_t out,
               std::size_t stride, const BlockOptions& opt, Rng& rng)
      : gcn(name + ".gcn", graph, in, out, rng, false),
        bn(name + ".bn", out, opt.bn_eps, opt.bn_momentum),
        astcn(name + ".astcn", out, opt.k1, opt.k2, stride, opt.temporal_mode, opt.bottleneck_min, rng) {
    if (in != out || stride != 1) residual = TemporalConv(name + ".residual", in, out, 1, stride, rng);
  }

  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const {
    Tensor g = gcn.forward(x, cache ? &cache->gcn : nullptr);
    Tensor n = bn.forward(g, mode, cache ? &cache->bn : nullptr);
    Tensor v = astcn.forward(ops::relu(n), cache ? &cache->astcn : nullptr);
    v += residual ? residual->forward(x) : x;
    if (cache) {
      cache->x = x;
      cache->normalized = std::move(n);
    }
    return v;
  }

  Tensor backward(const Cache& c, const Tensor& dy) {
    Tensor dx = residual ? residual->backward(c.x, dy) : dy;
    Tensor dr = astcn.backward(c.astcn, dy);
    Tensor dg = bn.backward(c.bn, ops::relu_backward(c.normalized, dr));
    dx += gcn.backward(c.gcn, dg);
    return dx;
  }

  void update_running_stats(const Cache& c) { bn.update_running_stats(c.bn); }

  void collect_state(StateRefs& refs) {
    gcn.collect_state(refs);
    bn.collect_state(refs);
    astcn.collect_state(refs);
    if (residual) residual->collect_state(refs);
  }

  GcnLayer gcn;
  BatchNorm bn;
  AsTcn astcn;
  std::optional<TemporalConv> residual;
};

// ---------------------------------------------------------------------------
// Per-vertex spatial attention: channel-mean and channel-max at each (b,t,v)
// feed a shared 2 -> H -> 1 MLP whose sigmoid output gates all channels of
// that vertex. The gate is shared across vertices, so it commutes with vertex
// permutations.

class SpatialAttention {
 public:
  struct Cache {
    Tensor x;
    Tensor stats;  // [N, 2], N = B·T·V
    std::vector<std::size_t> argmax;
    Tensor hpre, h;
    Tensor gate;  // [N, 1]
  };

  SpatialAttention() = default;
  SpatialAttention(const std::string& name, std::size_t hidden, Rng& rng)
      : fc1(name + ".fc1", 2, hidden, rng), fc2(name + ".fc2", hidden, 1, rng) {}

  Tensor forward(const Tensor& x, Cache* cache) const {
    x.require_rank(4, "spatial_attention");
    const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), V = x.dim(3);
    const std::size_t N = B * T * V;
    Tensor stats({N, 2});
    std::vector<std::size_t> argmax(N, 0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t v = 0; v < V; ++v) {
          const std::size_t n = (b * T + t) * V + v;
          double s = 0.0, mx = x(b, 0, t, v);
          for (std::size_t c = 0; c < C; ++c) {
            const double val = x(b, c, t, v);
            s += val;
            if (val > mx) {
              mx = val;
              argmax[n] = c;
            }
          }
          if (BranchLog::enabled()) {
            argmax[n] = BranchLog::branch(argmax[n]);
            mx = x(b, argmax[n], t, v);
          }
          stats(n, 0) = s / static_cast<double>(C);
          stats(n, 1) = mx;
        }
    Tensor hpre = fc1.forward(stats);
    Tensor h = ops::relu(hpre);
    Tensor gate = ops::sigmoid(fc2.forward(h));
    Tensor y(x.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t v = 0; v < V; ++v) y(b, c, t, v) = x(b, c, t, v) * gate[(b * T + t) * V + v];
    if (cache) {
      cache->x = x;
      cache->stats = std::move(stats);
      cache->argmax = std::move(argmax);
      cache->hpre = std::move(hpre);
      cache->h = std::move(h);
      cache->gate = std::move(gate);
    }
    return y;
  }

  Tensor backward(const Cache& c, const Tensor& dy) {
    const Tensor& x = c.x;
    const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), V = x.dim(3);
    const std::size_t N = B * T * V;
    Tensor dx(x.shape());
    Tensor dgate({N, 1});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t v = 0; v < V; ++v) {
            const std::size_t n = (b * T + t) * V + v;
            dgate[n] += dy(b, ch, t, v) * x(b, ch, t, v);
            dx(b, ch, t, v) = dy(b, ch, t, v) * c.gate[n];
          }
    Tensor dh = fc2.backward(c.h, ops::sigmoid_backward(c.gate, dgate));
    Tensor dstats = fc1.backward(c.stats, ops::relu_backward(c.hpre, dh));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t v = 0; v < V; ++v) {
          const std::size_t n = (b * T + t) * V + v;
          const double dmean = dstats(n, 0) / static_cast<double>(C);
          for (std::size_t ch = 0; ch < C; ++ch) dx(b, ch, t, v) += dmean;
          dx(b, c.argmax[n], t, v) += dstats(n, 1);
        }
    return dx;
  }

  void collect_state(StateRefs& refs) {
    fc1.collect_state(refs);
    fc2.collect_state(refs);
  }

  Linear fc1, fc2;
};

// Attention-enhanced embedding used on each side of a cross-scale fusion:
//   Z = mean_t( g( embed( f(x) ) ) ),  g = 1x1 MLP with one hidden ReLU layer
// giving Z with shape [B, d_e, V]. On the source side a bias on the last MLP
// layer shifts each similarity row by a constant, which the softmax ignores,
// so that side is built without it.
class ScaleEmbedding {
 public:
  struct Cache {
    SpatialAttention::Cache attn;
    Tensor attended, embedded, hpre, h;
    std::size_t frames = 0;
  };

  ScaleEmbedding() = default;
  ScaleEmbedding(const std::string& name, std::size_t channels, std::size_t embed_dim, Rng& rng,
                 bool output_bias = true)
      : attention(name + ".attn", 8, rng),
        embed(name + ".embed", channels, embed_dim, rng),
        mlp1(name + ".mlp1", embed_dim, embed_dim, rng),
        mlp2(name + ".mlp2", embed_dim, embed_dim, rng, output_bias) {}

  Tensor forward(const Tensor& x, Cache* cache) const {
    Tensor a = attention.forward(x, cache ? &cache->attn : nullptr);
    Tensor e = embed.forward(a);
    Tensor hpre = mlp1.forward(e);
    Tensor h = ops::relu(hpre);
    Tensor g = mlp2.forward(h);
    const std::size_t B = g.dim(0), D = g.dim(1), T = g.dim(2), V = g.dim(3);
    Tensor z({B, D, V});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t v = 0; v < V; ++v) z(b, d, v) += g(b, d, t, v);
    z *= 1.0 / static_cast<double>(T);
    if (cache) {
      cache->attended = std::move(a);
      cache->embedded = std::move(e);
      cache->hpre = std::move(hpre);
      cache->h = std::move(h);
      cache->frames = T;
    }
    return z;
  }

  Tensor backward(const Cache& c, const Tensor& dz) {
    const std::size_t B = dz.dim(0), D = dz.dim(1), V = dz.dim(2), T = c.frames;
    Tensor dg({B, D, T, V});
    const double inv = 1.0 / static_cast<double>(T);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t v = 0; v < V; ++v) dg(b, d, t, v) = dz(b, d, v) * inv;
    Tensor dh = mlp2.backward(c.h, dg);
    Tensor de = mlp1.backward(c.embedded, ops::relu_backward(c.hpre, dh));
    Tensor da = embed.backward(c.attended, de);
    return attention.backward(c.attn, da);
  }

  void collect_state(StateRefs& refs) {
    attention.collect_state(refs);
    embed.collect_state(refs);
    mlp1.collect_state(refs);
    mlp2.collect_state(refs);
  }

  SpatialAttention attention;
  ChannelMap embed, mlp1, mlp2;
};

// ---------------------------------------------------------------------------
// Cross-scale mapping fusion from a source scale B into a target scale A.
//   Z_A = emb_A(x_A) : [B, d_e, Va],  Z_B = emb_B(x_B) : [B, d_e, Vb]
//   A[b, i, j] = softmax_j( Σ_e Z_A[b,e,i]·Z_B[b,e,j] )       (row-stochastic)
//   M[b, c, t, i] = Σ_j A[b, i, j]·x_B[b, c, t, j]
//   out = x_A + W ⊛ M
// The output lives on the target scale's vertices.

class CsfmBlock {
 public:
  struct Cache {
    Tensor x_source;
    ScaleEmbedding::Cache emb_target, emb_source;
    Tensor z_target, z_source;
    Tensor adjacency;  // [B, Va, Vb]
    Tensor message;    // [B, C, T, Va]
  };

  struct Grads {
    Tensor d_target;
    Tensor d_source;
  };

  CsfmBlock() = default;
  CsfmBlock(const std::string& name, std::size_t channels, std::size_t embed_min, Rng& rng)
      : target_embedding(name + ".target", channels, std::max(channels / 4, embed_min), rng),
        source_embedding(name + ".source", channels, std::max(channels / 4, embed_min), rng, false),
        output(name + ".output", channels, channels, rng) {}

  Tensor forward(const Tensor& x_target, const Tensor& x_source, Cache* cache) const {
    x_target.require_rank(4, "csfm_forward");
    x_source.require_rank(4, "csfm_forward");
    if (x_target.dim(0) != x_source.dim(0) || x_target.dim(1) != x_source.dim(1) ||
        x_target.dim(2) != x_source.dim(2)) {
      throw ShapeError("csfm_forward: scales must share batch, channel and time extents, got " +
                       shape_str(x_target.shape()) + " and " + shape_str(x_source.shape()));
    }
    Cache local;
    Cache& c = cache ? *cache : local;
    c.z_target = target_embedding.forward(x_target, &c.emb_target);
    c.z_source = source_embedding.forward(x_source, &c.emb_source);
    c.adjacency = ops::softmax(cross_similarity(c.z_target, c.z_source), 2);
    c.message = propagate(c.adjacency, x_source);
    Tensor y = output.forward(c.message);
    y += x_target;
    c.x_source = x_source;
    return y;
  }

  Grads backward(const Cache& c, const Tensor& dy) {
    const Tensor& xs = c.x_source;
    const std::size_t B = xs.dim(0), C = xs.dim(1), T = xs.dim(2), Vb = xs.dim(3);
    const std::size_t Va = c.adjacency.dim(1), D = c.z_target.dim(1);
    Tensor dm = output.backward(c.message, dy);
    Tensor dadj({B, Va, Vb});
    Tensor dxs(xs.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t i = 0; i < Va; ++i) {
            const double g = dm(b, ch, t, i);
            for (std::size_t j = 0; j < Vb; ++j) {
              dadj(b, i, j) += g * xs(b, ch, t, j);
              dxs(b, ch, t, j) += c.adjacency(b, i, j) * g;
            }
          }
    Tensor dlogits = ops::softmax_backward(c.adjacency, dadj, 2);
    Tensor dzt({B, D, Va}), dzs({B, D, Vb});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < Va; ++i)
        for (std::size_t j = 0; j < Vb; ++j) {
          const double g = dlogits(b, i, j);
          for (std::size_t d = 0; d < D; ++d) {
            dzt(b, d, i) += g * c.z_source(b, d, j);
            dzs(b, d, j) += g * c.z_target(b, d, i);
          }
        }
    Tensor dxt = dy;
    dxt += target_embedding.backward(c.emb_target, dzt);
    dxs += source_embedding.backward(c.emb_source, dzs);
    return {std::move(dxt), std::move(dxs)};
  }

  void collect_state(StateRefs& refs) {
    target_embedding.collect_state(refs);
    source_embedding.collect_state(refs);
    output.collect_state(refs);
  }

  static Tensor cross_similarity(const Tensor& zt, const Tensor& zs) {
    const std::size_t B = zt.dim(0), D = zt.dim(1), Va = zt.dim(2), Vb = zs.dim(2);
    Tensor s({B, Va, Vb});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < Va; ++i)
        for (std::size_t j = 0; j < Vb; ++j) {
          double acc = 0.0;
          for (std::size_t d = 0; d < D; ++d) acc += zt(b, d, i) * zs(b, d, j);
          s(b, i, j) = acc;
        }
    return s;
  }

  static Tensor propagate(const Tensor& adj, const Tensor& xs) {
    const std::size_t B = xs.dim(0), C = xs.dim(1), T = xs.dim(2), Vb = xs.dim(3);
    const std::size_t Va = adj.dim(1);
    Tensor m({B, C, T, Va});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t t = 0; t < T; ++t) {
          const double* src = xs.ptr() + ((b * C + ch) * T + t) * Vb;
          double* dst = m.ptr() + ((b * C + ch) * T + t) * Va;
          for (std::size_t i = 0; i < Va; ++i) {
            const double* ar = adj.ptr() + (b * Va + i) * Vb;
            double acc = 0.0;
            for (std::size_t j = 0; j < Vb; ++j) acc += ar[j] * src[j];
            dst[i] = acc;
          }
        }
    return m;
  }

  ScaleEmbedding target_embedding, source_embedding;
  ChannelMap output;
};

// ---------------------------------------------------------------------------
// Convex per-channel combination of same-shape features from all scales:
//   z = GAP_{T,V}(Σ_s f_s),  w[b,s,c] = softmax_s(gate_s(z)),  out = Σ_s w_s ⊙ f_s

class ScaleAttentionFusion {
 public:
  struct Cache {
    std::vector<Tensor> features;
    Tensor z;
    Tensor weights;  // [B, S, C]
  };

  ScaleAttentionFusion() = default;
  ScaleAttentionFusion(const std::string& name, std::size_t scales, std::size_t channels, Rng& rng)
      : scales_(scales) {
    if (scales == 0) throw ConfigError(name + ": needs at least one scale");
    if (scales > 1) {
      for (std::size_t s = 0; s < scales; ++s)
        gates.emplace_back(name + ".gate" + std::to_string(s), channels, channels, rng);
    }
  }

  std::size_t scale_count() const { return scales_; }

  Tensor forward(const std::vector<Tensor>& features, Cache* cache) const {
    if (features.size() != scales_) {
      throw ShapeError("scale_attention_fuse: expected " + std::to_string(scales_) +
                       " feature maps, got " + std::to_string(features.size()));
    }
    for (const auto& f : features) features.front().require_same_shape(f, "scale_attention_fuse");
    if (scales_ == 1) {
      if (cache) cache->features = features;
      return features.front();
    }
    const std::size_t B = features[0].dim(0), C = features[0].dim(1);
    Tensor sum = features[0];
    for (std::size_t s = 1; s < scales_; ++s) sum += features[s];
    Tensor z = ops::pool_time_vertex(sum);
    Tensor logits({B, scales_, C});
    for (std::size_t s = 0; s < scales_; ++s) {
      Tensor l = gates[s].forward(z);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) logits(b, s, c) = l(b, c);
    }
    Tensor w = ops::softmax(logits, 1);
    Tensor out(features[0].shape());
    for (std::size_t s = 0; s < scales_; ++s) out += ops::broadcast_mul(features[s], slice(w, s));
    if (cache) {
      cache->features = features;
      cache->z = std::move(z);
      cache->weights = std::move(w);
    }
    return out;
  }

  std::vector<Tensor> backward(const Cache& c, const Tensor& dy) {
    if (scales_ == 1) return {dy};
    const std::size_t B = dy.dim(0), C = dy.dim(1);
    std::vector<Tensor> df;
    Tensor dw({B, scales_, C});
    for (std::size_t s = 0; s < scales_; ++s) {
      auto g = ops::broadcast_mul_backward(c.features[s], slice(c.weights, s), dy);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t ch = 0; ch < C; ++ch) dw(b, s, ch) = g.dw(b, ch);
      df.push_back(std::move(g.dx));
    }
    Tensor dlogits = ops::softmax_backward(c.weights, dw, 1);
    Tensor dz({B, C});
    for (std::size_t s = 0; s < scales_; ++s) {
      Tensor dl({B, C});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t ch = 0; ch < C; ++ch) dl(b, ch) = dlogits(b, s, ch);
      dz += gates[s].backward(c.z, dl);
    }
    Tensor dsum = ops::pool_time_vertex_backward(dy.shape(), dz);
    for (auto& d : df) d += dsum;
    return df;
  }

  // [B, S, C] -> [B, C] for one scale.
  static Tensor slice(const Tensor& w, std::size_t s) {
    const std::size_t B = w.dim(0), C = w.dim(2);
    Tensor out({B, C});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) out(b, c) = w(b, s, c);
    return out;
  }

  void collect_state(StateRefs& refs) {
    for (auto& g : gates) g.collect_state(refs);
  }

  std::vector<Linear> gates;

 private:
  std::size_t scales_ = 1;
};

// GAP over (T, V) -> linear -> softmax over classes.
class ClassifierHead {
 public:
  struct Cache {
    Shape input_shape;
    Tensor pooled;
    Tensor probabilities;
  };

  ClassifierHead() = default;
  ClassifierHead(const std::string& name, std::size_t channels, std::size_t classes, Rng& rng)
      : fc(name, channels, classes, rng) {}

  Tensor logits(const Tensor& x) const { return fc.forward(ops::pool_time_vertex(x)); }

  Tensor forward(const Tensor& x, Cache* cache) const {
    Tensor z = ops::pool_time_vertex(x);
    Tensor p = ops::softmax(fc.forward(z), 1);
    if (cache) {
      cache->input_shape = x.shape();
      cache->pooled = std::move(z);
      cache->probabilities = p;
    }
    return p;
  }

  Tensor backward(const Cache& c, const Tensor& dp) {
    Tensor dlogits = ops::softmax_backward(c.probabilities, dp, 1);
    Tensor dz = fc.backward(c.pooled, dlogits);
    return ops::pool_time_vertex_backward(c.input_shape, dz);
  }

  void collect_state(StateRefs& refs) { fc.collect_state(refs); }

  Linear fc;
};

}  // namespace msagcn
