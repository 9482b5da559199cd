#pragma once

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstring>
#include <vector>

#include "hand/core/autodiff.hpp"
#include "hand/core/parallel.hpp"
#include "hand/core/random.hpp"

namespace hand::ops {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  assert(a.value().same_shape(b.value()));
  Tensor out(a.value().shape());
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = pa[i] + pb[i];
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) accumulate(*an, self.grad);
    if (bn->requires_grad) accumulate(*bn, self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  assert(a.value().same_shape(b.value()));
  Tensor out(a.value().shape());
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = pa[i] - pb[i];
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) accumulate(*an, self.grad);
    if (bn->requires_grad) {
      float* dst = bn->ensure_grad().data();
      const float* g = self.grad.data();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) dst[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  assert(a.value().same_shape(b.value()));
  Tensor out(a.value().shape());
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = pa[i] * pb[i];
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), {an, bn}, [an, bn](Node& self) {
    const float* g = self.grad.data();
    if (an->requires_grad) {
      float* dst = an->ensure_grad().data();
      const float* pb2 = bn->value.data();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) dst[i] += g[i] * pb2[i];
    }
    if (bn->requires_grad) {
      float* dst = bn->ensure_grad().data();
      const float* pa2 = an->value.data();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) dst[i] += g[i] * pa2[i];
    }
  });
}

inline Var scale(const Var& x, float s) {
  Tensor out(x.value().shape());
  const float* px = x.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = px[i] * s;
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, s](Node& self) {
    float* dst = xn->ensure_grad().data();
    const float* g = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) dst[i] += g[i] * s;
  });
}

inline Var relu(const Var& x) {
  Tensor out(x.value().shape());
  const float* px = x.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = px[i] > 0.0f ? px[i] : 0.0f;
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn](Node& self) {
    float* dst = xn->ensure_grad().data();
    const float* g = self.grad.data();
    const float* px2 = xn->value.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      if (px2[i] > 0.0f) dst[i] += g[i];
  });
}

inline Var sigmoid(const Var& x) {
  Tensor out(x.value().shape());
  const float* px = x.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = 1.0f / (1.0f + std::exp(-px[i]));
  auto xn = x.node();
  auto yn = std::make_shared<Tensor>(out);
  return make_op(std::move(out), {xn}, [xn, yn](Node& self) {
    float* dst = xn->ensure_grad().data();
    const float* g = self.grad.data();
    const float* y = yn->data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      dst[i] += g[i] * y[i] * (1.0f - y[i]);
  });
}

// Inverted dropout; the mask is drawn serially so the stream advance is
// independent of worker count.
inline Var dropout(const Var& x, float rate, RandomStream& rng) {
  if (rate <= 0.0f) return x;
  assert(rate < 1.0f);
  float keep_scale = 1.0f / (1.0f - rate);
  auto mask = std::make_shared<Tensor>(x.value().shape());
  for (std::int64_t i = 0; i < mask->numel(); ++i)
    (*mask)[i] = rng.bernoulli(rate) ? 0.0f : keep_scale;
  Tensor out(x.value().shape());
  const float* px = x.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = px[i] * (*mask)[i];
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, mask](Node& self) {
    float* dst = xn->ensure_grad().data();
    const float* g = self.grad.data();
    const float* m = mask->data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) dst[i] += g[i] * m[i];
  });
}

// Identity forward; backward multiplies the upstream gradient by -lambda.
inline Var grad_reverse(const Var& x, float lambda) {
  Tensor out = x.value();
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, lambda](Node& self) {
    float* dst = xn->ensure_grad().data();
    const float* g = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) dst[i] += -lambda * g[i];
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x.value().reshaped(shape);
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn](Node& self) {
    float* dst = xn->ensure_grad().data();
    const float* g = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) dst[i] += g[i];
  });
}

namespace detail {

inline Tensor permute4_tensor(const Tensor& x, const std::array<int, 4>& perm) {
  assert(x.rank() == 4);
  const auto& s = x.shape();
  std::vector<int> os{s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]};
  Tensor out(os);
  int in_stride[4];
  in_stride[3] = 1;
  in_stride[2] = s[3];
  in_stride[1] = s[2] * s[3];
  in_stride[0] = s[1] * s[2] * s[3];
  std::int64_t idx = 0;
  for (int a = 0; a < os[0]; ++a)
    for (int b = 0; b < os[1]; ++b)
      for (int c = 0; c < os[2]; ++c)
        for (int d = 0; d < os[3]; ++d) {
          std::int64_t src = static_cast<std::int64_t>(a) * in_stride[perm[0]] +
                             b * in_stride[perm[1]] + c * in_stride[perm[2]] +
                             d * in_stride[perm[3]];
          out[idx++] = x[src];
        }
  return out;
}

inline std::array<int, 4> inverse_perm(const std::array<int, 4>& perm) {
  std::array<int, 4> inv{};
  for (int i = 0; i < 4; ++i) inv[perm[i]] = i;
  return inv;
}

}  // namespace detail

inline Var permute4(const Var& x, std::array<int, 4> perm) {
  Tensor out = detail::permute4_tensor(x.value(), perm);
  auto xn = x.node();
  auto inv = detail::inverse_perm(perm);
  return make_op(std::move(out), {xn}, [xn, inv](Node& self) {
    accumulate(*xn, detail::permute4_tensor(self.grad, inv));
  });
}

// (B, N, d) -> (B, d, N)
inline Var permute3_021(const Var& x) {
  const auto& s = x.value().shape();
  Var x4 = reshape(x, {s[0], s[1], s[2], 1});
  Var p = permute4(x4, {0, 2, 1, 3});
  return reshape(p, {s[0], s[2], s[1]});
}

// x: (B, rest...), e: (rest...) broadcast-added over dim 0.
inline Var add_expand0(const Var& x, const Var& e) {
  const auto& xs = x.value().shape();
  std::int64_t rest = e.value().numel();
  assert(x.value().numel() == xs[0] * rest);
  Tensor out(xs);
  const float* px = x.value().data();
  const float* pe = e.value().data();
  for (int b = 0; b < xs[0]; ++b)
    for (std::int64_t j = 0; j < rest; ++j)
      out[b * rest + j] = px[b * rest + j] + pe[j];
  auto xn = x.node(), en = e.node();
  int batch = xs[0];
  return make_op(std::move(out), {xn, en}, [xn, en, batch, rest](Node& self) {
    const float* g = self.grad.data();
    if (xn->requires_grad) accumulate(*xn, self.grad);
    if (en->requires_grad) {
      float* dst = en->ensure_grad().data();
      for (int b = 0; b < batch; ++b)
        for (std::int64_t j = 0; j < rest; ++j) dst[j] += g[b * rest + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Dense / attention primitives
// ---------------------------------------------------------------------------

// x: (..., in), w: (out, in), b: (out) -> (..., out)
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const auto& xs = x.value().shape();
  int in = xs.back();
  int out_dim = w.value().dim(0);
  assert(w.value().dim(1) == in);
  std::int64_t m = x.value().numel() / in;
  std::vector<int> os(xs);
  os.back() = out_dim;
  Tensor out(os);
  {
    ConstMap xm(x.value().data(), m, in);
    ConstMap wm(w.value().data(), out_dim, in);
    MutMap ym(out.data(), m, out_dim);
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.value().data(), out_dim);
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op(std::move(out), {xn, wn, bn},
                 [xn, wn, bn, m, in, out_dim](Node& self) {
                   ConstMap gm(self.grad.data(), m, out_dim);
                   if (xn->requires_grad) {
                     MutMap dx(xn->ensure_grad().data(), m, in);
                     ConstMap wm(wn->value.data(), out_dim, in);
                     dx.noalias() += gm * wm;
                   }
                   if (wn->requires_grad) {
                     MutMap dw(wn->ensure_grad().data(), out_dim, in);
                     ConstMap xm(xn->value.data(), m, in);
                     dw.noalias() += gm.transpose() * xm;
                   }
                   if (bn->requires_grad) {
                     Eigen::Map<Eigen::RowVectorXf> db(bn->ensure_grad().data(), out_dim);
                     db += gm.colwise().sum();
                   }
                 });
}

// a: (B, H, M, K), b: (B, H, K, N) -> (B, H, M, N)
inline Var bmm(const Var& a, const Var& b) {
  const auto& as = a.value().shape();
  const auto& bs = b.value().shape();
  assert(as[0] == bs[0] && as[1] == bs[1] && as[3] == bs[2]);
  int batch = as[0] * as[1], M = as[2], K = as[3], N = bs[3];
  Tensor out({as[0], as[1], M, N});
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  float* po = out.data();
  parallel_for(batch, [&](int i) {
    ConstMap am(pa + static_cast<std::int64_t>(i) * M * K, M, K);
    ConstMap bm(pb + static_cast<std::int64_t>(i) * K * N, K, N);
    MutMap om(po + static_cast<std::int64_t>(i) * M * N, M, N);
    om.noalias() = am * bm;
  });
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), {an, bn}, [an, bn, batch, M, K, N](Node& self) {
    const float* g = self.grad.data();
    if (an->requires_grad) {
      float* da = an->ensure_grad().data();
      const float* pb2 = bn->value.data();
      parallel_for(batch, [&](int i) {
        ConstMap gm(g + static_cast<std::int64_t>(i) * M * N, M, N);
        ConstMap bm(pb2 + static_cast<std::int64_t>(i) * K * N, K, N);
        MutMap dam(da + static_cast<std::int64_t>(i) * M * K, M, K);
        dam.noalias() += gm * bm.transpose();
      });
    }
    if (bn->requires_grad) {
      float* db = bn->ensure_grad().data();
      const float* pa2 = an->value.data();
      parallel_for(batch, [&](int i) {
        ConstMap gm(g + static_cast<std::int64_t>(i) * M * N, M, N);
        ConstMap am(pa2 + static_cast<std::int64_t>(i) * M * K, M, K);
        MutMap dbm(db + static_cast<std::int64_t>(i) * K * N, K, N);
        dbm.noalias() += am.transpose() * gm;
      });
    }
  });
}

inline Var softmax_lastdim(const Var& x) {
  const auto& s = x.value().shape();
  int d = s.back();
  std::int64_t rows = x.value().numel() / d;
  Tensor out(s);
  const float* px = x.value().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = px + r * d;
    float* orow = out.data() + r * d;
    float mx = row[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) {
      orow[i] = std::exp(row[i] - mx);
      sum += orow[i];
    }
    float inv = static_cast<float>(1.0 / sum);
    for (int i = 0; i < d; ++i) orow[i] *= inv;
  }
  auto xn = x.node();
  auto yv = std::make_shared<Tensor>(out);
  return make_op(std::move(out), {xn}, [xn, yv, rows, d](Node& self) {
    float* dst = xn->ensure_grad().data();
    const float* g = self.grad.data();
    const float* y = yv->data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* gr = g + r * d;
      const float* yr = y + r * d;
      float* dr = dst + r * d;
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += static_cast<double>(gr[i]) * yr[i];
      for (int i = 0; i < d; ++i)
        dr[i] += yr[i] * (gr[i] - static_cast<float>(dot));
    }
  });
}

// Normalization over the last dimension.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
                      float eps = 1e-5f) {
  const auto& s = x.value().shape();
  int d = s.back();
  std::int64_t rows = x.value().numel() / d;
  Tensor out(s);
  auto xhat = std::make_shared<Tensor>(s);
  auto invstd = std::make_shared<std::vector<float>>(rows);
  const float* px = x.value().data();
  const float* pg = gamma.value().data();
  const float* pb = beta.value().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = px + r * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += row[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      double c = row[i] - mu;
      var += c * c;
    }
    var /= d;
    float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*invstd)[r] = is;
    for (int i = 0; i < d; ++i) {
      float xh = (row[i] - static_cast<float>(mu)) * is;
      (*xhat)[r * d + i] = xh;
      out[r * d + i] = pg[i] * xh + pb[i];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op(std::move(out), {xn, gn, bn},
                 [xn, gn, bn, xhat, invstd, rows, d](Node& self) {
                   const float* g = self.grad.data();
                   const float* xh = xhat->data();
                   const float* pg2 = gn->value.data();
                   if (gn->requires_grad || bn->requires_grad) {
                     float* dgamma = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
                     float* dbeta = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                     for (std::int64_t r = 0; r < rows; ++r)
                       for (int i = 0; i < d; ++i) {
                         if (dgamma) dgamma[i] += g[r * d + i] * xh[r * d + i];
                         if (dbeta) dbeta[i] += g[r * d + i];
                       }
                   }
                   if (xn->requires_grad) {
                     float* dx = xn->ensure_grad().data();
                     for (std::int64_t r = 0; r < rows; ++r) {
                       double s1 = 0.0, s2 = 0.0;
                       for (int i = 0; i < d; ++i) {
                         double dyg = static_cast<double>(g[r * d + i]) * pg2[i];
                         s1 += dyg;
                         s2 += dyg * xh[r * d + i];
                       }
                       s1 /= d;
                       s2 /= d;
                       float is = (*invstd)[r];
                       for (int i = 0; i < d; ++i) {
                         double dyg = static_cast<double>(g[r * d + i]) * pg2[i];
                         dx[r * d + i] += static_cast<float>(
                             is * (dyg - s1 - xh[r * d + i] * s2));
                       }
                     }
                   }
                 });
}

// (B, N, d) -> (B, d): mean over tokens.
inline Var mean_axis1(const Var& x) {
  const auto& s = x.value().shape();
  assert(x.value().rank() == 3);
  int B = s[0], N = s[1], d = s[2];
  Tensor out({B, d});
  const float* px = x.value().data();
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < d; ++i) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) acc += px[(static_cast<std::int64_t>(b) * N + n) * d + i];
      out.at(b, i) = static_cast<float>(acc / N);
    }
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, B, N, d](Node& self) {
    float* dst = xn->ensure_grad().data();
    const float* g = self.grad.data();
    float inv = 1.0f / static_cast<float>(N);
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < d; ++i)
          dst[(static_cast<std::int64_t>(b) * N + n) * d + i] += g[b * d + i] * inv;
  });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const float* x, int C, int H, int W, int k, int stride,
                   int pad, int out_h, int out_w, float* col) {
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        float* dst = col + ((static_cast<std::int64_t>(c) * k + ki) * k + kj) *
                               out_h * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
          int ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) {
            std::memset(dst + static_cast<std::int64_t>(oh) * out_w, 0,
                        sizeof(float) * out_w);
            continue;
          }
          const float* src = x + (static_cast<std::int64_t>(c) * H + ih) * W;
          for (int ow = 0; ow < out_w; ++ow) {
            int iw = ow * stride + kj - pad;
            dst[static_cast<std::int64_t>(oh) * out_w + ow] =
                (iw >= 0 && iw < W) ? src[iw] : 0.0f;
          }
        }
      }
}

inline void col2im_add(const float* col, int C, int H, int W, int k, int stride,
                       int pad, int out_h, int out_w, float* x) {
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const float* src = col + ((static_cast<std::int64_t>(c) * k + ki) * k + kj) *
                                     out_h * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
          int ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) continue;
          float* dst = x + (static_cast<std::int64_t>(c) * H + ih) * W;
          for (int ow = 0; ow < out_w; ++ow) {
            int iw = ow * stride + kj - pad;
            if (iw >= 0 && iw < W) dst[iw] += src[static_cast<std::int64_t>(oh) * out_w + ow];
          }
        }
      }
}

}  // namespace detail

// x: (B, C, H, W), w: (OC, C, k, k), b: (OC). Weight gradients are reduced
// over samples in index order, keeping results thread-count independent.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const auto& xs = x.value().shape();
  const auto& ws = w.value().shape();
  assert(x.value().rank() == 4 && w.value().rank() == 4);
  assert(xs[1] == ws[1]);
  int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  int OC = ws[0], k = ws[2];
  int out_h = (H + 2 * pad - k) / stride + 1;
  int out_w = (W + 2 * pad - k) / stride + 1;
  int ckk = C * k * k;
  std::int64_t hw = static_cast<std::int64_t>(out_h) * out_w;
  Tensor out({B, OC, out_h, out_w});
  {
    const float* px = x.value().data();
    const float* pw = w.value().data();
    const float* pb = b.value().data();
    float* po = out.data();
    parallel_for(B, [&](int n) {
      std::vector<float> col(static_cast<size_t>(ckk) * hw);
      detail::im2col(px + static_cast<std::int64_t>(n) * C * H * W, C, H, W, k,
                     stride, pad, out_h, out_w, col.data());
      ConstMap wm(pw, OC, ckk);
      ConstMap cm(col.data(), ckk, hw);
      MutMap om(po + static_cast<std::int64_t>(n) * OC * hw, OC, hw);
      om.noalias() = wm * cm;
      for (int oc = 0; oc < OC; ++oc) om.row(oc).array() += pb[oc];
    });
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op(
      std::move(out), {xn, wn, bn},
      [xn, wn, bn, B, C, H, W, OC, k, stride, pad, out_h, out_w, ckk, hw](Node& self) {
        const float* g = self.grad.data();
        bool need_dx = xn->requires_grad;
        bool need_dw = wn->requires_grad;
        bool need_db = bn->requires_grad;
        float* dx = need_dx ? xn->ensure_grad().data() : nullptr;
        // Per-sample weight/bias partials, reduced serially below.
        std::vector<float> dw_parts, db_parts;
        if (need_dw) dw_parts.assign(static_cast<size_t>(B) * OC * ckk, 0.0f);
        if (need_db) db_parts.assign(static_cast<size_t>(B) * OC, 0.0f);
        const float* px = xn->value.data();
        const float* pw = wn->value.data();
        parallel_for(B, [&](int n) {
          ConstMap gm(g + static_cast<std::int64_t>(n) * OC * hw, OC, hw);
          std::vector<float> col(static_cast<size_t>(ckk) * hw);
          if (need_dx || need_dw)
            detail::im2col(px + static_cast<std::int64_t>(n) * C * H * W, C, H,
                           W, k, stride, pad, out_h, out_w, col.data());
          if (need_dx) {
            std::vector<float> dcol(static_cast<size_t>(ckk) * hw);
            ConstMap wm(pw, OC, ckk);
            MutMap dcm(dcol.data(), ckk, hw);
            dcm.noalias() = wm.transpose() * gm;
            detail::col2im_add(dcol.data(), C, H, W, k, stride, pad, out_h,
                               out_w, dx + static_cast<std::int64_t>(n) * C * H * W);
          }
          if (need_dw) {
            ConstMap cm(col.data(), ckk, hw);
            MutMap dwm(dw_parts.data() + static_cast<size_t>(n) * OC * ckk, OC, ckk);
            dwm.noalias() = gm * cm.transpose();
          }
          if (need_db) {
            float* dbp = db_parts.data() + static_cast<size_t>(n) * OC;
            for (int oc = 0; oc < OC; ++oc) {
              double acc = 0.0;
              for (std::int64_t i = 0; i < hw; ++i) acc += gm(oc, i);
              dbp[oc] = static_cast<float>(acc);
            }
          }
        });
        if (need_dw) {
          float* dw = wn->ensure_grad().data();
          for (int n = 0; n < B; ++n) {
            const float* part = dw_parts.data() + static_cast<size_t>(n) * OC * ckk;
            for (int i = 0; i < OC * ckk; ++i) dw[i] += part[i];
          }
        }
        if (need_db) {
          float* db = bn->ensure_grad().data();
          for (int n = 0; n < B; ++n)
            for (int oc = 0; oc < OC; ++oc) db[oc] += db_parts[static_cast<size_t>(n) * OC + oc];
        }
      });
}

// Transposed convolution with kernel 2, stride 2 (exact spatial doubling).
// x: (B, C, H, W), w: (C, OC, 2, 2), b: (OC).
inline Var conv_transpose2d_x2(const Var& x, const Var& w, const Var& b) {
  const auto& xs = x.value().shape();
  const auto& ws = w.value().shape();
  assert(xs[1] == ws[0] && ws[2] == 2 && ws[3] == 2);
  int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  int OC = ws[1];
  int oh = H * 2, ow = W * 2;
  Tensor out({B, OC, oh, ow});
  {
    const float* px = x.value().data();
    const float* pw = w.value().data();
    const float* pb = b.value().data();
    float* po = out.data();
    parallel_for(B, [&](int n) {
      const float* xb = px + static_cast<std::int64_t>(n) * C * H * W;
      float* ob = po + static_cast<std::int64_t>(n) * OC * oh * ow;
      for (int oc = 0; oc < OC; ++oc)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            int ki = i & 1, kj = j & 1;
            int si = i >> 1, sj = j >> 1;
            double acc = pb[oc];
            for (int c = 0; c < C; ++c)
              acc += static_cast<double>(xb[(static_cast<std::int64_t>(c) * H + si) * W + sj]) *
                     pw[((static_cast<std::int64_t>(c) * OC + oc) * 2 + ki) * 2 + kj];
            ob[(static_cast<std::int64_t>(oc) * oh + i) * ow + j] = static_cast<float>(acc);
          }
    });
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op(
      std::move(out), {xn, wn, bn}, [xn, wn, bn, B, C, H, W, OC, oh, ow](Node& self) {
        const float* g = self.grad.data();
        const float* px = xn->value.data();
        const float* pw = wn->value.data();
        if (xn->requires_grad) {
          float* dx = xn->ensure_grad().data();
          parallel_for(B, [&](int n) {
            const float* gb = g + static_cast<std::int64_t>(n) * OC * oh * ow;
            float* dxb = dx + static_cast<std::int64_t>(n) * C * H * W;
            for (int c = 0; c < C; ++c)
              for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                  double acc = 0.0;
                  for (int oc = 0; oc < OC; ++oc)
                    for (int ki = 0; ki < 2; ++ki)
                      for (int kj = 0; kj < 2; ++kj)
                        acc += static_cast<double>(
                                   gb[(static_cast<std::int64_t>(oc) * oh + 2 * i + ki) * ow +
                                      2 * j + kj]) *
                               pw[((static_cast<std::int64_t>(c) * OC + oc) * 2 + ki) * 2 + kj];
                  dxb[(static_cast<std::int64_t>(c) * H + i) * W + j] += static_cast<float>(acc);
                }
          });
        }
        if (wn->requires_grad) {
          float* dw = wn->ensure_grad().data();
          // Reduction over the batch stays serial per weight element.
          for (int c = 0; c < C; ++c)
            for (int oc = 0; oc < OC; ++oc)
              for (int ki = 0; ki < 2; ++ki)
                for (int kj = 0; kj < 2; ++kj) {
                  double acc = 0.0;
                  for (int n = 0; n < B; ++n) {
                    const float* gb = g + static_cast<std::int64_t>(n) * OC * oh * ow;
                    const float* xb = px + static_cast<std::int64_t>(n) * C * H * W;
                    for (int i = 0; i < H; ++i)
                      for (int j = 0; j < W; ++j)
                        acc += static_cast<double>(
                                   xb[(static_cast<std::int64_t>(c) * H + i) * W + j]) *
                               gb[(static_cast<std::int64_t>(oc) * oh + 2 * i + ki) * ow +
                                  2 * j + kj];
                  }
                  dw[((static_cast<std::int64_t>(c) * OC + oc) * 2 + ki) * 2 + kj] +=
                      static_cast<float>(acc);
                }
        }
        if (bn->requires_grad) {
          float* db = bn->ensure_grad().data();
          for (int oc = 0; oc < OC; ++oc) {
            double acc = 0.0;
            for (int n = 0; n < B; ++n) {
              const float* gb = g + (static_cast<std::int64_t>(n) * OC + oc) * oh * ow;
              for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i)
                acc += gb[i];
            }
            db[oc] += static_cast<float>(acc);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Running stats live outside the graph and are updated in training forward
// (biased variance normalizes, unbiased feeds the running estimate).
inline Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta,
                        Tensor* running_mean, Tensor* running_var,
                        bool training, float momentum = 0.1f, float eps = 1e-5f) {
  const auto& s = x.value().shape();
  assert(x.value().rank() == 4);
  int B = s[0], C = s[1], H = s[2], W = s[3];
  std::int64_t plane = static_cast<std::int64_t>(H) * W;
  std::int64_t m = static_cast<std::int64_t>(B) * plane;
  Tensor out(s);
  auto mean = std::make_shared<std::vector<float>>(C);
  auto invstd = std::make_shared<std::vector<float>>(C);
  const float* px = x.value().data();
  const float* pg = gamma.value().data();
  const float* pb = beta.value().data();
  float* po = out.data();
  parallel_for(C, [&](int c) {
    double mu, var;
    if (training) {
      double acc = 0.0;
      for (int n = 0; n < B; ++n) {
        const float* ch = px + (static_cast<std::int64_t>(n) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += ch[i];
      }
      mu = acc / static_cast<double>(m);
      double vacc = 0.0;
      for (int n = 0; n < B; ++n) {
        const float* ch = px + (static_cast<std::int64_t>(n) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          double d = ch[i] - mu;
          vacc += d * d;
        }
      }
      var = vacc / static_cast<double>(m);
      double unbiased = m > 1 ? vacc / static_cast<double>(m - 1) : var;
      (*running_mean)[c] = static_cast<float>((1.0 - momentum) * (*running_mean)[c] +
                                              momentum * mu);
      (*running_var)[c] = static_cast<float>((1.0 - momentum) * (*running_var)[c] +
                                             momentum * unbiased);
    } else {
      mu = (*running_mean)[c];
      var = (*running_var)[c];
    }
    float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*mean)[c] = static_cast<float>(mu);
    (*invstd)[c] = is;
    for (int n = 0; n < B; ++n) {
      const float* ch = px + (static_cast<std::int64_t>(n) * C + c) * plane;
      float* oh = po + (static_cast<std::int64_t>(n) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i)
        oh[i] = pg[c] * (ch[i] - static_cast<float>(mu)) * is + pb[c];
    }
  });
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op(
      std::move(out), {xn, gn, bn},
      [xn, gn, bn, mean, invstd, B, C, plane, m, training](Node& self) {
        const float* g = self.grad.data();
        const float* px2 = xn->value.data();
        const float* pg2 = gn->value.data();
        bool need_dx = xn->requires_grad;
        bool need_dg = gn->requires_grad;
        bool need_db = bn->requires_grad;
        float* dx = need_dx ? xn->ensure_grad().data() : nullptr;
        float* dgamma = need_dg ? gn->ensure_grad().data() : nullptr;
        float* dbeta = need_db ? bn->ensure_grad().data() : nullptr;
        parallel_for(C, [&](int c) {
          float mu = (*mean)[c], is = (*invstd)[c];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int n = 0; n < B; ++n) {
            const float* gc = g + (static_cast<std::int64_t>(n) * C + c) * plane;
            const float* xc = px2 + (static_cast<std::int64_t>(n) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              sum_dy += gc[i];
              sum_dy_xhat += static_cast<double>(gc[i]) * ((xc[i] - mu) * is);
            }
          }
          if (dgamma) dgamma[c] += static_cast<float>(sum_dy_xhat);
          if (dbeta) dbeta[c] += static_cast<float>(sum_dy);
          if (!dx) return;
          if (training) {
            double inv_m = 1.0 / static_cast<double>(m);
            for (int n = 0; n < B; ++n) {
              const float* gc = g + (static_cast<std::int64_t>(n) * C + c) * plane;
              const float* xc = px2 + (static_cast<std::int64_t>(n) * C + c) * plane;
              float* dxc = dx + (static_cast<std::int64_t>(n) * C + c) * plane;
              for (std::int64_t i = 0; i < plane; ++i) {
                double xhat = (xc[i] - mu) * is;
                dxc[i] += static_cast<float>(
                    pg2[c] * is * (gc[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat));
              }
            }
          } else {
            for (int n = 0; n < B; ++n) {
              const float* gc = g + (static_cast<std::int64_t>(n) * C + c) * plane;
              float* dxc = dx + (static_cast<std::int64_t>(n) * C + c) * plane;
              for (std::int64_t i = 0; i < plane; ++i) dxc[i] += pg2[c] * is * gc[i];
            }
          }
        });
      });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean squared error over the samples selected by mask; each selected sample
// contributes its per-pixel mean. Mask must select at least one sample.
inline Var mse_masked(const Var& pred, const Tensor& target,
                      const std::vector<char>& mask) {
  const auto& s = pred.value().shape();
  assert(pred.value().same_shape(target));
  int B = s[0];
  assert(static_cast<int>(mask.size()) == B);
  std::int64_t rest = pred.value().numel() / B;
  int n_sel = 0;
  for (char c : mask) n_sel += c ? 1 : 0;
  assert(n_sel > 0);
  const float* pp = pred.value().data();
  const float* pt = target.data();
  double acc = 0.0;
  for (int b = 0; b < B; ++b) {
    if (!mask[b]) continue;
    double sample = 0.0;
    for (std::int64_t i = 0; i < rest; ++i) {
      double d = static_cast<double>(pp[b * rest + i]) - pt[b * rest + i];
      sample += d * d;
    }
    acc += sample / static_cast<double>(rest);
  }
  Tensor out({1});
  out[0] = static_cast<float>(acc / n_sel);
  auto pn = pred.node();
  auto tgt = std::make_shared<Tensor>(target);
  auto msk = std::make_shared<std::vector<char>>(mask);
  return make_op(std::move(out), {pn}, [pn, tgt, msk, B, rest, n_sel](Node& self) {
    float g = self.grad[0];
    float* dst = pn->ensure_grad().data();
    const float* pp2 = pn->value.data();
    const float* pt2 = tgt->data();
    float coef = g * 2.0f / (static_cast<float>(rest) * static_cast<float>(n_sel));
    for (int b = 0; b < B; ++b) {
      if (!(*msk)[b]) continue;
      for (std::int64_t i = 0; i < rest; ++i)
        dst[b * rest + i] += coef * (pp2[b * rest + i] - pt2[b * rest + i]);
    }
  });
}

inline Var mse(const Var& pred, const Tensor& target) {
  return mse_masked(pred, target, std::vector<char>(pred.value().dim(0), 1));
}

// Binary cross-entropy, probabilities clamped to [eps, 1-eps].
inline Var bce_mean(const Var& probs, const Tensor& labels, float eps = 1e-7f) {
  assert(probs.value().same_shape(labels));
  std::int64_t n = probs.value().numel();
  const float* pp = probs.value().data();
  const float* py = labels.data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double p = std::clamp(pp[i], eps, 1.0f - eps);
    double y = py[i];
    acc -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  Tensor out({1});
  out[0] = static_cast<float>(acc / static_cast<double>(n));
  auto pn = probs.node();
  auto lbl = std::make_shared<Tensor>(labels);
  return make_op(std::move(out), {pn}, [pn, lbl, n, eps](Node& self) {
    float g = self.grad[0];
    float* dst = pn->ensure_grad().data();
    const float* pp2 = pn->value.data();
    const float* py2 = lbl->data();
    for (std::int64_t i = 0; i < n; ++i) {
      float p = std::clamp(pp2[i], eps, 1.0f - eps);
      dst[i] += g * (p - py2[i]) / (p * (1.0f - p) * static_cast<float>(n));
    }
  });
}

}  // namespace hand::ops
