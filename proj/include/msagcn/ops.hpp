#pragma once

// Forward/backward pairs for every primitive the layers are assembled from.
// Backward functions take the upstream gradient and whatever forward values
// they need, and return input gradients; none of them keep state.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "msagcn/tensor.hpp"

namespace msagcn::ops {

// ---------------------------------------------------------------------------
// Dense matrix product

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* yr = y.ptr() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      const double* br = b.ptr() + p * n;
      for (std::size_t j = 0; j < n; ++j) yr[j] += aip * br[j];
    }
  }
  return y;
}

inline Tensor transpose(const Tensor& a) {
  a.require_rank(2, "transpose");
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  return t;
}

struct MatmulGrads {
  Tensor da;
  Tensor db;
};

// dA = dY·Bᵀ, dB = Aᵀ·dY
inline MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dy) {
  return {matmul(dy, transpose(b)), matmul(transpose(a), dy)};
}

// ---------------------------------------------------------------------------
// Fully connected layer on [N, in] rows.

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w);
  if (bias.size() != w.dim(1)) throw ShapeError("linear: bias " + shape_str(bias.shape()));
  for (std::size_t i = 0; i < y.dim(0); ++i)
    for (std::size_t j = 0; j < y.dim(1); ++j) y(i, j) += bias[j];
  return y;
}

struct LinearGrads {
  Tensor dx;
  Tensor dw;
  Tensor dbias;
};

inline LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy) {
  auto [dx, dw] = matmul_backward(x, w, dy);
  Tensor db({w.dim(1)});
  for (std::size_t i = 0; i < dy.dim(0); ++i)
    for (std::size_t j = 0; j < dy.dim(1); ++j) db[j] += dy(i, j);
  return {std::move(dx), std::move(dw), std::move(db)};
}

// ---------------------------------------------------------------------------
// 1x1 channel map on a feature map: y[b,o,t,v] = Σ_i x[b,i,t,v]·W[i,o] + bias[o]

inline Tensor channel_map(const Tensor& x, const Tensor& w, const Tensor& bias) {
  x.require_rank(4, "channel_map");
  if (w.rank() != 2 || w.dim(0) != x.dim(1)) {
    throw ShapeError("channel_map: weight " + shape_str(w.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = w.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y({B, Co, x.dim(2), x.dim(3)});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Co; ++o) {
      double* yp = y.ptr() + (b * Co + o) * plane;
      std::fill(yp, yp + plane, bias[o]);
      for (std::size_t i = 0; i < Ci; ++i) {
        const double wio = w(i, o);
        if (wio == 0.0) continue;
        const double* xp = x.ptr() + (b * Ci + i) * plane;
        for (std::size_t p = 0; p < plane; ++p) yp[p] += wio * xp[p];
      }
    }
  }
  return y;
}

inline LinearGrads channel_map_backward(const Tensor& x, const Tensor& w, const Tensor& dy) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = w.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor dx(x.shape()), dw(w.shape()), db({Co});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Co; ++o) {
      const double* gp = dy.ptr() + (b * Co + o) * plane;
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += gp[p];
      db[o] += s;
      for (std::size_t i = 0; i < Ci; ++i) {
        const double* xp = x.ptr() + (b * Ci + i) * plane;
        double* dxp = dx.ptr() + (b * Ci + i) * plane;
        const double wio = w(i, o);
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) {
          acc += xp[p] * gp[p];
          dxp[p] += wio * gp[p];
        }
        dw(i, o) += acc;
      }
    }
  }
  return {std::move(dx), std::move(dw), std::move(db)};
}

// ---------------------------------------------------------------------------
// Temporal convolution along axis 2 of [B, C, T, V], independently per vertex.
// Weight layout [Cout, Cin, k].

inline std::size_t conv_output_length(std::size_t t, std::size_t k, std::size_t stride,
                                      std::size_t pad) {
  if (t + 2 * pad < k) {
    throw SequenceTooShortError("temporal_conv: sequence length " + std::to_string(t) +
                                " with padding " + std::to_string(pad) +
                                " is shorter than kernel " + std::to_string(k));
  }
  return (t + 2 * pad - k) / stride + 1;
}

inline Tensor temporal_conv(const Tensor& x, const Tensor& w, const Tensor* bias,
                            std::size_t stride, std::size_t pad) {
  x.require_rank(4, "temporal_conv");
  if (w.rank() != 3 || w.dim(1) != x.dim(1)) {
    throw ShapeError("temporal_conv: weight " + shape_str(w.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  if (stride == 0) throw ConfigError("temporal_conv: stride must be positive");
  const std::size_t B = x.dim(0), Ci = x.dim(1), T = x.dim(2), V = x.dim(3);
  const std::size_t Co = w.dim(0), K = w.dim(2);
  const std::size_t To = conv_output_length(T, K, stride, pad);
  Tensor y({B, Co, To, V});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Co; ++o) {
      double* yp = y.ptr() + (b * Co + o) * To * V;
      if (bias) std::fill(yp, yp + To * V, (*bias)[o]);
      for (std::size_t i = 0; i < Ci; ++i) {
        const double* xp = x.ptr() + (b * Ci + i) * T * V;
        for (std::size_t j = 0; j < K; ++j) {
          const double wj = w(o, i, j);
          if (wj == 0.0) continue;
          // output rows whose source row s = t*stride + j - pad lies in [0, T)
          std::size_t t_lo = 0;
          if (j < pad) t_lo = (pad - j + stride - 1) / stride;
          if (T + pad <= j) continue;
          std::size_t t_hi = std::min(To, (T + pad - j - 1) / stride + 1);
          if (t_lo >= t_hi) continue;
          if (stride == 1) {
            const double* src = xp + (t_lo + j - pad) * V;
            double* dst = yp + t_lo * V;
            const std::size_t n = (t_hi - t_lo) * V;
            for (std::size_t p = 0; p < n; ++p) dst[p] += wj * src[p];
          } else {
            for (std::size_t t = t_lo; t < t_hi; ++t) {
              const double* src = xp + (t * stride + j - pad) * V;
              double* dst = yp + t * V;
              for (std::size_t v = 0; v < V; ++v) dst[v] += wj * src[v];
            }
          }
        }
      }
    }
  }
  return y;
}

struct ConvGrads {
  Tensor dx;
  Tensor dw;
  Tensor dbias;
};

inline ConvGrads temporal_conv_backward(const Tensor& x, const Tensor& w, std::size_t stride,
                                        std::size_t pad, const Tensor& dy) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), T = x.dim(2), V = x.dim(3);
  const std::size_t Co = w.dim(0), K = w.dim(2);
  const std::size_t To = dy.dim(2);
  Tensor dx(x.shape()), dw(w.shape()), db({Co});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Co; ++o) {
      const double* gp = dy.ptr() + (b * Co + o) * To * V;
      double s = 0.0;
      for (std::size_t p = 0; p < To * V; ++p) s += gp[p];
      db[o] += s;
      for (std::size_t i = 0; i < Ci; ++i) {
        const double* xp = x.ptr() + (b * Ci + i) * T * V;
        double* dxp = dx.ptr() + (b * Ci + i) * T * V;
        for (std::size_t j = 0; j < K; ++j) {
          std::size_t t_lo = 0;
          if (j < pad) t_lo = (pad - j + stride - 1) / stride;
          if (T + pad <= j) continue;
          std::size_t t_hi = std::min(To, (T + pad - j - 1) / stride + 1);
          if (t_lo >= t_hi) continue;
          const double wj = w(o, i, j);
          double acc = 0.0;
          if (stride == 1) {
            const double* src = xp + (t_lo + j - pad) * V;
            double* dsrc = dxp + (t_lo + j - pad) * V;
            const double* g = gp + t_lo * V;
            const std::size_t n = (t_hi - t_lo) * V;
            for (std::size_t p = 0; p < n; ++p) dsrc[p] += wj * g[p];
            double a4[4] = {0.0, 0.0, 0.0, 0.0};
            std::size_t p = 0;
            for (; p + 4 <= n; p += 4)
              for (std::size_t q = 0; q < 4; ++q) a4[q] += g[p + q] * src[p + q];
            for (; p < n; ++p) acc += g[p] * src[p];
            acc += (a4[0] + a4[1]) + (a4[2] + a4[3]);
          } else {
            for (std::size_t t = t_lo; t < t_hi; ++t) {
              const std::size_t off = (t * stride + j - pad) * V;
              const double* g = gp + t * V;
              for (std::size_t v = 0; v < V; ++v) {
                acc += g[v] * xp[off + v];
                dxp[off + v] += wj * g[v];
              }
            }
          }
          dw(o, i, j) += acc;
        }
      }
    }
  }
  return {std::move(dx), std::move(dw), std::move(db)};
}

// ---------------------------------------------------------------------------
// Batch normalization over (batch, time, vertex) per channel.

struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;      // biased, used for normalization
  std::vector<double> inv_std;  // 1/sqrt(var + eps)
};

struct BatchNormResult {
  Tensor y;
  Tensor xhat;
  BatchNormStats stats;
};

inline BatchNormResult batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                  const Tensor& running_mean, const Tensor& running_var,
                                  Mode mode, double eps = 1e-5) {
  if (x.rank() == 4 && x.dim(0) == 0) throw EmptyBatchError("batch_norm: empty batch");
  x.require_rank(4, "batch_norm");
  const std::size_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.size() != C || beta.size() != C) {
    throw ShapeError("batch_norm: affine parameters do not match channel count " +
                     std::to_string(C));
  }
  BatchNormStats st{std::vector<double>(C), std::vector<double>(C), std::vector<double>(C)};
  const double n = static_cast<double>(B * plane);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.ptr() + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / n;
      double q = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.ptr() + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) q += (p[i] - mu) * (p[i] - mu);
      }
      st.mean[c] = mu;
      st.var[c] = q / n;
    } else {
      st.mean[c] = running_mean[c];
      st.var[c] = running_var[c];
    }
    st.inv_std[c] = 1.0 / std::sqrt(st.var[c] + eps);
  }
  Tensor xhat(x.shape()), y(x.shape());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (x[off + i] - st.mean[c]) * st.inv_std[c];
        xhat[off + i] = h;
        y[off + i] = gamma[c] * h + beta[c];
      }
    }
  }
  return {std::move(y), std::move(xhat), std::move(st)};
}

struct BatchNormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};

inline BatchNormGrads batch_norm_backward(const Tensor& xhat, const BatchNormStats& st,
                                          const Tensor& gamma, Mode mode, const Tensor& dy) {
  const std::size_t B = xhat.dim(0), C = xhat.dim(1), plane = xhat.dim(2) * xhat.dim(3);
  const double n = static_cast<double>(B * plane);
  Tensor dx(xhat.shape()), dg({C}), dbeta({C});
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xhat += dy[off + i] * xhat[off + i];
      }
    }
    dg[c] = sum_dy_xhat;
    dbeta[c] = sum_dy;
    const double k = gamma[c] * st.inv_std[c];
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (mode == Mode::train) {
          dx[off + i] = k * (dy[off + i] - sum_dy / n - xhat[off + i] * sum_dy_xhat / n);
        } else {
          dx[off + i] = k * dy[off + i];
        }
      }
    }
  }
  return {std::move(dx), std::move(dg), std::move(dbeta)};
}

// ---------------------------------------------------------------------------
// Elementwise activations

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  if (BranchLog::enabled()) {
    for (double& v : y.data()) v = BranchLog::branch(v > 0.0) ? v : 0.0;
  } else {
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  }
  return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(x[i] > 0.0)) dx[i] = 0.0;
  return dx;
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = sigmoid(v);
  return y;
}

inline Tensor sigmoid_backward(const Tensor& y, const Tensor& dy) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] *= y[i] * (1.0 - y[i]);
  return dx;
}

// ---------------------------------------------------------------------------
// Softmax along one axis

namespace detail {
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* what) {
  if (axis >= s.size()) {
    throw AxisError(std::string(what) + ": axis " + std::to_string(axis) +
                    " out of range for shape " + shape_str(s));
  }
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}
}  // namespace detail

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto a = detail::split_axis(x.shape(), axis, "softmax");
  Tensor y(x.shape());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t in = 0; in < a.inner; ++in) {
      const std::size_t base = o * a.extent * a.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < a.extent; ++k) mx = std::max(mx, x[base + k * a.inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < a.extent; ++k) {
        const double e = std::exp(x[base + k * a.inner] - mx);
        y[base + k * a.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < a.extent; ++k) y[base + k * a.inner] /= s;
    }
  }
  return y;
}

// dx_k = y_k (dy_k − Σ_j y_j dy_j)
inline Tensor softmax_backward(const Tensor& y, const Tensor& dy, std::size_t axis) {
  const auto a = detail::split_axis(y.shape(), axis, "softmax_backward");
  Tensor dx(y.shape());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t in = 0; in < a.inner; ++in) {
      const std::size_t base = o * a.extent * a.inner + in;
      double dot = 0.0;
      for (std::size_t k = 0; k < a.extent; ++k) {
        const std::size_t i = base + k * a.inner;
        dot += y[i] * dy[i];
      }
      for (std::size_t k = 0; k < a.extent; ++k) {
        const std::size_t i = base + k * a.inner;
        dx[i] = y[i] * (dy[i] - dot);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Global average pooling over a set of axes; reduced axes are dropped from the
// output shape (a full reduction yields shape [1]).

namespace detail {
inline std::vector<bool> reduce_mask(const Shape& s, std::span<const std::size_t> axes,
                                     const char* what) {
  std::vector<bool> mask(s.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= s.size()) {
      throw AxisError(std::string(what) + ": axis " + std::to_string(ax) +
                      " out of range for shape " + shape_str(s));
    }
    mask[ax] = true;
  }
  return mask;
}
}  // namespace detail

inline Tensor global_avg_pool(const Tensor& x, std::span<const std::size_t> axes) {
  const auto mask = detail::reduce_mask(x.shape(), axes, "global_avg_pool");
  Shape out;
  std::size_t count = 1;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (mask[i]) count *= x.dim(i); else out.push_back(x.dim(i));
  }
  if (out.empty()) out.push_back(1);
  Tensor y(out);
  std::vector<std::size_t> idx(x.rank(), 0);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < x.rank(); ++i)
      if (!mask[i]) o = o * x.dim(i) + idx[i];
    y[o] += x[flat];
    for (std::size_t i = x.rank(); i-- > 0;) {
      if (++idx[i] < x.dim(i)) break;
      idx[i] = 0;
    }
  }
  y *= 1.0 / static_cast<double>(count);
  return y;
}

inline Tensor global_avg_pool_backward(const Shape& in_shape, std::span<const std::size_t> axes,
                                       const Tensor& dy) {
  const auto mask = detail::reduce_mask(in_shape, axes, "global_avg_pool_backward");
  std::size_t count = 1;
  for (std::size_t i = 0; i < in_shape.size(); ++i)
    if (mask[i]) count *= in_shape[i];
  Tensor dx(in_shape);
  std::vector<std::size_t> idx(in_shape.size(), 0);
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t flat = 0; flat < dx.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < in_shape.size(); ++i)
      if (!mask[i]) o = o * in_shape[i] + idx[i];
    dx[flat] = dy[o] * inv;
    for (std::size_t i = in_shape.size(); i-- > 0;) {
      if (++idx[i] < in_shape[i]) break;
      idx[i] = 0;
    }
  }
  return dx;
}

// [B,C,T,V] -> [B,C], the pooling every attention gate starts from.
inline Tensor pool_time_vertex(const Tensor& x) {
  x.require_rank(4, "pool_time_vertex");
  const std::size_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor z({B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* p = x.ptr() + bc * plane;
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    z[bc] = s / static_cast<double>(plane);
  }
  return z;
}

inline Tensor pool_time_vertex_backward(const Shape& in_shape, const Tensor& dz) {
  Tensor dx(in_shape);
  const std::size_t plane = in_shape[2] * in_shape[3];
  for (std::size_t bc = 0; bc < in_shape[0] * in_shape[1]; ++bc) {
    const double g = dz[bc] / static_cast<double>(plane);
    std::fill(dx.ptr() + bc * plane, dx.ptr() + (bc + 1) * plane, g);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Elementwise sum and channel-wise broadcast product

inline Tensor add(const Tensor& a, const Tensor& b) {
  Tensor y = a;
  y += b;
  return y;
}

// y[b,c,t,v] = x[b,c,t,v]·w[b,c]
inline Tensor broadcast_mul(const Tensor& x, const Tensor& w) {
  x.require_rank(4, "broadcast_mul");
  if (w.rank() != 2 || w.dim(0) != x.dim(0) || w.dim(1) != x.dim(1)) {
    throw ShapeError("broadcast_mul: weight " + shape_str(w.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const std::size_t plane = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  for (std::size_t bc = 0; bc < w.size(); ++bc) {
    const double s = w[bc];
    for (std::size_t i = 0; i < plane; ++i) y[bc * plane + i] = s * x[bc * plane + i];
  }
  return y;
}

struct BroadcastMulGrads {
  Tensor dx;
  Tensor dw;
};

inline BroadcastMulGrads broadcast_mul_backward(const Tensor& x, const Tensor& w,
                                                const Tensor& dy) {
  const std::size_t plane = x.dim(2) * x.dim(3);
  Tensor dx(x.shape()), dw(w.shape());
  for (std::size_t bc = 0; bc < w.size(); ++bc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      acc += dy[bc * plane + i] * x[bc * plane + i];
      dx[bc * plane + i] = w[bc] * dy[bc * plane + i];
    }
    dw[bc] = acc;
  }
  return {std::move(dx), std::move(dw)};
}

}  // namespace msagcn::ops
