// Copyright (c) 2026 the tan authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include "tan/ops.hpp"

namespace tan {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

/// im2col for one image: x is C x H x W, output (C*kh*kw) x (Ho*Wo).
template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, T* col) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = col + ((int64_t(c) * kh + ky) * kw + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) {
            std::fill(dst + int64_t(oy) * Wo, dst + int64_t(oy + 1) * Wo, T(0));
            continue;
          }
          const T* src_row = x + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride + kx - pad;
            dst[int64_t(oy) * Wo + ox] = (ix >= 0 && ix < W) ? src_row[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride,
                int pad, int Ho, int Wo, T* dx) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = col + ((int64_t(c) * kh + ky) * kw + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          T* dst_row = dx + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) dst_row[ix] += src[int64_t(oy) * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-d convolution, NCHW, square kernel given by the weight shape
/// (Cout x Cin x kh x kw). Bias optional (pass nullptr).
template <class T>
VarPtr<T> conv2d(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b,
                 int stride, int pad) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  TAN_CHECK(xs.size() == 4 && ws.size() == 4, "conv2d: need 4-d x and w");
  int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  int Cout = ws[0], kh = ws[2], kw = ws[3];
  TAN_CHECK(ws[1] == C, "conv2d: channel mismatch");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  TAN_CHECK(Ho > 0 && Wo > 0, "conv2d: empty output");
  int K = C * kh * kw;
  int64_t HoWo = int64_t(Ho) * Wo;

  Tensor<T> y({N, Cout, Ho, Wo});
  std::vector<T> col(size_t(K) * HoWo);
  detail::CMapRM<T> Wm(w->value.data.data(), Cout, K);
  for (int n = 0; n < N; ++n) {
    detail::im2col(x->value.data.data() + int64_t(n) * C * H * W, C, H, W, kh,
                   kw, stride, pad, Ho, Wo, col.data());
    detail::CMapRM<T> Cm(col.data(), K, HoWo);
    detail::MapRM<T> Ym(y.data.data() + int64_t(n) * Cout * HoWo, Cout, HoWo);
    Ym.noalias() = Wm * Cm;
  }
  if (b) {
    TAN_CHECK(b->numel() == Cout, "conv2d: bias length mismatch");
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Cout; ++c) {
        T bv = b->value.data[c];
        T* p = y.data.data() + (int64_t(n) * Cout + c) * HoWo;
        for (int64_t i = 0; i < HoWo; ++i) p[i] += bv;
      }
  }

  std::vector<VarPtr<T>> parents = b ? std::vector<VarPtr<T>>{x, w, b}
                                     : std::vector<VarPtr<T>>{x, w};
  auto bw = [x, w, b, N, C, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K,
             HoWo](Var<T>& out) {
    // col is recomputed per image rather than cached: the buffers would
    // otherwise dominate memory at the high-resolution scales.
    std::vector<T> col(size_t(K) * HoWo);
    detail::CMapRM<T> Wm(w->value.data.data(), Cout, K);
    if (x->requires_grad) x->ensure_grad();
    if (w->requires_grad) w->ensure_grad();
    std::vector<T> dcol(size_t(K) * HoWo);
    for (int n = 0; n < N; ++n) {
      detail::CMapRM<T> dYm(out.grad.data.data() + int64_t(n) * Cout * HoWo,
                            Cout, HoWo);
      if (w->requires_grad) {
        detail::im2col(x->value.data.data() + int64_t(n) * C * H * W, C, H, W,
                       kh, kw, stride, pad, Ho, Wo, col.data());
        detail::CMapRM<T> Cm(col.data(), K, HoWo);
        detail::MapRM<T> dWm(w->grad.data.data(), Cout, K);
        dWm.noalias() += dYm * Cm.transpose();
      }
      if (x->requires_grad) {
        detail::MapRM<T> dCm(dcol.data(), K, HoWo);
        dCm.noalias() = Wm.transpose() * dYm;
        detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                           x->grad.data.data() + int64_t(n) * C * H * W);
      }
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      for (int c = 0; c < Cout; ++c) {
        double acc = 0;
        for (int n = 0; n < N; ++n) {
          const T* p = out.grad.data.data() + (int64_t(n) * Cout + c) * HoWo;
          for (int64_t i = 0; i < HoWo; ++i) acc += double(p[i]);
        }
        b->grad.data[c] += T(acc);
      }
    }
  };
  return detail::make_op<T>(std::move(y), std::move(parents), std::move(bw));
}

/// Batch normalization over (N, H, W) per channel using batch statistics.
/// Gradients flow through the statistics. batch_mean/batch_var (biased) are
/// written out so the caller can update running estimates.
template <class T>
VarPtr<T> batchnorm_train(const VarPtr<T>& x, const VarPtr<T>& gamma,
                          const VarPtr<T>& beta, T eps,
                          std::vector<T>* batch_mean_out = nullptr,
                          std::vector<T>* batch_var_out = nullptr) {
  const auto& xs = x->value.shape;
  TAN_CHECK(xs.size() == 4 || xs.size() == 3, "batchnorm: need 3/4-d input");
  int N = xs.size() == 4 ? xs[0] : 1;
  int C = xs.size() == 4 ? xs[1] : xs[0];
  int64_t HW = x->numel() / (int64_t(N) * C);
  int64_t M = int64_t(N) * HW;  // reduce size per channel
  TAN_CHECK(gamma->numel() == C && beta->numel() == C, "batchnorm: param length");
  TAN_CHECK(M > 0, "batchnorm: empty input");

  auto mean = std::make_shared<std::vector<T>>(size_t(C));
  auto inv_std = std::make_shared<std::vector<T>>(size_t(C));
  std::vector<T> var(size_t(C));
  for (int c = 0; c < C; ++c) {
    double acc = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = x->value.data.data() + (int64_t(n) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) acc += double(p[i]);
    }
    double mu = acc / double(M);
    double vacc = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = x->value.data.data() + (int64_t(n) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        double d = double(p[i]) - mu;
        vacc += d * d;
      }
    }
    double v = vacc / double(M);
    (*mean)[size_t(c)] = T(mu);
    var[size_t(c)] = T(v);
    (*inv_std)[size_t(c)] = T(1.0 / std::sqrt(v + double(eps)));
  }
  if (batch_mean_out) *batch_mean_out = *mean;
  if (batch_var_out) *batch_var_out = var;

  Tensor<T> y(xs);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T mu = (*mean)[size_t(c)], is = (*inv_std)[size_t(c)];
      T g = gamma->value.data[c], bv = beta->value.data[c];
      const T* p = x->value.data.data() + (int64_t(n) * C + c) * HW;
      T* q = y.data.data() + (int64_t(n) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) q[i] = g * (p[i] - mu) * is + bv;
    }

  auto bw = [x, gamma, beta, mean, inv_std, N, C, HW, M](Var<T>& out) {
    bool need_x = x->requires_grad;
    if (need_x) x->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    for (int c = 0; c < C; ++c) {
      T mu = (*mean)[size_t(c)], is = (*inv_std)[size_t(c)];
      T g = gamma->value.data[c];
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int n = 0; n < N; ++n) {
        const T* dy = out.grad.data.data() + (int64_t(n) * C + c) * HW;
        const T* xp = x->value.data.data() + (int64_t(n) * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          double xhat = double((xp[i] - mu) * is);
          sum_dy += double(dy[i]);
          sum_dy_xhat += double(dy[i]) * xhat;
        }
      }
      if (gamma->requires_grad) gamma->grad.data[c] += T(sum_dy_xhat);
      if (beta->requires_grad) beta->grad.data[c] += T(sum_dy);
      if (need_x) {
        double invM = 1.0 / double(M);
        for (int n = 0; n < N; ++n) {
          const T* dy = out.grad.data.data() + (int64_t(n) * C + c) * HW;
          const T* xp = x->value.data.data() + (int64_t(n) * C + c) * HW;
          T* dx = x->grad.data.data() + (int64_t(n) * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            double xhat = double((xp[i] - mu) * is);
            double t = double(dy[i]) - invM * sum_dy - xhat * invM * sum_dy_xhat;
            dx[i] += T(double(g) * double(is) * t);
          }
        }
      }
    }
  };
  return detail::make_op<T>(std::move(y), {x, gamma, beta}, std::move(bw));
}

/// Batch normalization with fixed (running) statistics.
template <class T>
VarPtr<T> batchnorm_eval(const VarPtr<T>& x, const VarPtr<T>& gamma,
                         const VarPtr<T>& beta, const std::vector<T>& rmean,
                         const std::vector<T>& rvar, T eps) {
  const auto& xs = x->value.shape;
  TAN_CHECK(xs.size() == 4 || xs.size() == 3, "batchnorm: need 3/4-d input");
  int N = xs.size() == 4 ? xs[0] : 1;
  int C = xs.size() == 4 ? xs[1] : xs[0];
  int64_t HW = x->numel() / (int64_t(N) * C);
  TAN_CHECK(int(rmean.size()) == C && int(rvar.size()) == C, "batchnorm: stats length");
  auto inv_std = std::make_shared<std::vector<T>>(size_t(C));
  auto mean = std::make_shared<std::vector<T>>(rmean);
  for (int c = 0; c < C; ++c) {
    TAN_CHECK(rvar[size_t(c)] >= T(0), "batchnorm: negative running variance");
    (*inv_std)[size_t(c)] = T(1.0 / std::sqrt(double(rvar[size_t(c)]) + double(eps)));
  }
  Tensor<T> y(xs);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T mu = (*mean)[size_t(c)], is = (*inv_std)[size_t(c)];
      T g = gamma->value.data[c], bv = beta->value.data[c];
      const T* p = x->value.data.data() + (int64_t(n) * C + c) * HW;
      T* q = y.data.data() + (int64_t(n) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) q[i] = g * (p[i] - mu) * is + bv;
    }
  auto bw = [x, gamma, beta, mean, inv_std, N, C, HW](Var<T>& out) {
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    for (int c = 0; c < C; ++c) {
      T mu = (*mean)[size_t(c)], is = (*inv_std)[size_t(c)];
      T g = gamma->value.data[c];
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int n = 0; n < N; ++n) {
        const T* dy = out.grad.data.data() + (int64_t(n) * C + c) * HW;
        const T* xp = x->value.data.data() + (int64_t(n) * C + c) * HW;
        T* dx = x->requires_grad ? x->grad.data.data() + (int64_t(n) * C + c) * HW
                                 : nullptr;
        for (int64_t i = 0; i < HW; ++i) {
          double xhat = double((xp[i] - mu) * is);
          sum_dy += double(dy[i]);
          sum_dy_xhat += double(dy[i]) * xhat;
          if (dx) dx[i] += T(double(g) * double(is) * double(dy[i]));
        }
      }
      if (gamma->requires_grad) gamma->grad.data[c] += T(sum_dy_xhat);
      if (beta->requires_grad) beta->grad.data[c] += T(sum_dy);
    }
  };
  return detail::make_op<T>(std::move(y), {x, gamma, beta}, std::move(bw));
}

/// Max pooling, NCHW.
template <class T>
VarPtr<T> maxpool2d(const VarPtr<T>& x, int k, int stride, int pad = 0) {
  const auto& xs = x->value.shape;
  TAN_CHECK(xs.size() == 4, "maxpool2d: need NCHW");
  int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  int Ho = (H + 2 * pad - k) / stride + 1;
  int Wo = (W + 2 * pad - k) / stride + 1;
  TAN_CHECK(Ho > 0 && Wo > 0, "maxpool2d: empty output");
  Tensor<T> y({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<int64_t>>(size_t(y.numel()));
  int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data.data() + (int64_t(n) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++o) {
          T best = std::numeric_limits<T>::lowest();
          int64_t best_idx = -1;
          for (int ky = 0; ky < k; ++ky) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              T v = p[int64_t(iy) * W + ix];
              if (v > best) {
                best = v;
                best_idx = (int64_t(n) * C + c) * H * W + int64_t(iy) * W + ix;
              }
            }
          }
          TAN_CHECK(best_idx >= 0, "maxpool2d: window fully padded");
          y.data[size_t(o)] = best;
          (*argmax)[size_t(o)] = best_idx;
        }
    }
  return detail::make_op<T>(std::move(y), {x}, [x, argmax](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i)
      x->grad.data[size_t((*argmax)[size_t(i)])] += out.grad.data[size_t(i)];
  });
}

/// Nearest-neighbour 2x upsample.
template <class T>
VarPtr<T> upsample2(const VarPtr<T>& x) {
  const auto& xs = x->value.shape;
  TAN_CHECK(xs.size() == 4, "upsample2: need NCHW");
  int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  Tensor<T> y({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data.data() + (int64_t(n) * C + c) * H * W;
      T* q = y.data.data() + (int64_t(n) * C + c) * 4 * H * W;
      for (int iy = 0; iy < H; ++iy)
        for (int ix = 0; ix < W; ++ix) {
          T v = p[int64_t(iy) * W + ix];
          int64_t base = int64_t(2 * iy) * 2 * W + 2 * ix;
          q[base] = v;
          q[base + 1] = v;
          q[base + 2 * W] = v;
          q[base + 2 * W + 1] = v;
        }
    }
  return detail::make_op<T>(std::move(y), {x}, [x, N, C, H, W](Var<T>& out) {
    x->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T* dp = x->grad.data.data() + (int64_t(n) * C + c) * H * W;
        const T* dq = out.grad.data.data() + (int64_t(n) * C + c) * 4 * H * W;
        for (int iy = 0; iy < H; ++iy)
          for (int ix = 0; ix < W; ++ix) {
            int64_t base = int64_t(2 * iy) * 2 * W + 2 * ix;
            dp[int64_t(iy) * W + ix] +=
                dq[base] + dq[base + 1] + dq[base + 2 * W] + dq[base + 2 * W + 1];
          }
      }
  });
}

/// Space-to-depth by 2 (the focus stem rearrangement): N x C x H x W ->
/// N x 4C x H/2 x W/2.
template <class T>
VarPtr<T> space_to_depth2(const VarPtr<T>& x) {
  const auto& xs = x->value.shape;
  TAN_CHECK(xs.size() == 4, "space_to_depth2: need NCHW");
  int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  TAN_CHECK(H % 2 == 0 && W % 2 == 0, "space_to_depth2: odd spatial size");
  int Ho = H / 2, Wo = W / 2;
  Tensor<T> y({N, 4 * C, Ho, Wo});
  // quadrant order: (0,0), (1,0), (0,1), (1,1) offsets (dy,dx)
  const int offs[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (int n = 0; n < N; ++n)
    for (int q4 = 0; q4 < 4; ++q4)
      for (int c = 0; c < C; ++c) {
        const T* p = x->value.data.data() + (int64_t(n) * C + c) * H * W;
        T* q = y.data.data() + ((int64_t(n) * 4 + q4) * C + c) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox)
            q[int64_t(oy) * Wo + ox] =
                p[int64_t(2 * oy + offs[q4][0]) * W + 2 * ox + offs[q4][1]];
      }
  return detail::make_op<T>(std::move(y), {x}, [x, N, C, H, W, Ho, Wo](Var<T>& out) {
    x->ensure_grad();
    const int offs[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    for (int n = 0; n < N; ++n)
      for (int q4 = 0; q4 < 4; ++q4)
        for (int c = 0; c < C; ++c) {
          T* dp = x->grad.data.data() + (int64_t(n) * C + c) * H * W;
          const T* dq =
              out.grad.data.data() + ((int64_t(n) * 4 + q4) * C + c) * Ho * Wo;
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox)
              dp[int64_t(2 * oy + offs[q4][0]) * W + 2 * ox + offs[q4][1]] +=
                  dq[int64_t(oy) * Wo + ox];
        }
  });
}

/// Linear layer on the last dimension: (..., Cin) x (Cout, Cin) -> (..., Cout).
template <class T>
VarPtr<T> linear(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  TAN_CHECK(!xs.empty() && ws.size() == 2, "linear: bad shapes");
  int Cin = xs.back();
  TAN_CHECK(ws[1] == Cin, "linear: in-features mismatch");
  int Cout = ws[0];
  int64_t rows = x->numel() / Cin;
  std::vector<int> os(xs.begin(), xs.end() - 1);
  os.push_back(Cout);
  Tensor<T> y(os);
  detail::CMapRM<T> Xm(x->value.data.data(), rows, Cin);
  detail::CMapRM<T> Wm(w->value.data.data(), Cout, Cin);
  detail::MapRM<T> Ym(y.data.data(), rows, Cout);
  Ym.noalias() = Xm * Wm.transpose();
  if (b) {
    TAN_CHECK(b->numel() == Cout, "linear: bias length mismatch");
    for (int64_t r = 0; r < rows; ++r)
      for (int c = 0; c < Cout; ++c) y.data[size_t(r * Cout + c)] += b->value.data[c];
  }
  std::vector<VarPtr<T>> parents = b ? std::vector<VarPtr<T>>{x, w, b}
                                     : std::vector<VarPtr<T>>{x, w};
  auto bw = [x, w, b, rows, Cin, Cout](Var<T>& out) {
    detail::CMapRM<T> dYm(out.grad.data.data(), rows, Cout);
    if (x->requires_grad) {
      x->ensure_grad();
      detail::MapRM<T> dXm(x->grad.data.data(), rows, Cin);
      detail::CMapRM<T> Wm(w->value.data.data(), Cout, Cin);
      dXm.noalias() += dYm * Wm;
    }
    if (w->requires_grad) {
      w->ensure_grad();
      detail::MapRM<T> dWm(w->grad.data.data(), Cout, Cin);
      detail::CMapRM<T> Xm(x->value.data.data(), rows, Cin);
      dWm.noalias() += dYm.transpose() * Xm;
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      for (int c = 0; c < Cout; ++c) {
        double acc = 0;
        for (int64_t r = 0; r < rows; ++r) acc += double(out.grad.data[size_t(r * Cout + c)]);
        b->grad.data[c] += T(acc);
      }
    }
  };
  return detail::make_op<T>(std::move(y), std::move(parents), std::move(bw));
}

/// Layer normalization over the last dimension.
template <class T>
VarPtr<T> layernorm(const VarPtr<T>& x, const VarPtr<T>& gamma,
                    const VarPtr<T>& beta, T eps) {
  const auto& xs = x->value.shape;
  int C = xs.back();
  TAN_CHECK(gamma->numel() == C && beta->numel() == C, "layernorm: param length");
  int64_t rows = x->numel() / C;
  Tensor<T> y(xs);
  auto mean = std::make_shared<std::vector<T>>(size_t(rows));
  auto inv_std = std::make_shared<std::vector<T>>(size_t(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = x->value.data.data() + r * C;
    double mu = 0;
    for (int c = 0; c < C; ++c) mu += double(p[c]);
    mu /= C;
    double v = 0;
    for (int c = 0; c < C; ++c) {
      double d = double(p[c]) - mu;
      v += d * d;
    }
    v /= C;
    T is = T(1.0 / std::sqrt(v + double(eps)));
    (*mean)[size_t(r)] = T(mu);
    (*inv_std)[size_t(r)] = is;
    T* q = y.data.data() + r * C;
    for (int c = 0; c < C; ++c)
      q[c] = gamma->value.data[c] * (p[c] - T(mu)) * is + beta->value.data[c];
  }
  auto bw = [x, gamma, beta, mean, inv_std, rows, C](Var<T>& out) {
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* p = x->value.data.data() + r * C;
      const T* dy = out.grad.data.data() + r * C;
      T mu = (*mean)[size_t(r)], is = (*inv_std)[size_t(r)];
      double sum_dyg = 0, sum_dyg_xhat = 0;
      for (int c = 0; c < C; ++c) {
        double xhat = double((p[c] - mu) * is);
        double dyg = double(dy[c]) * double(gamma->value.data[c]);
        sum_dyg += dyg;
        sum_dyg_xhat += dyg * xhat;
        if (gamma->requires_grad) gamma->grad.data[c] += T(double(dy[c]) * xhat);
        if (beta->requires_grad) beta->grad.data[c] += dy[c];
      }
      if (x->requires_grad) {
        T* dx = x->grad.data.data() + r * C;
        for (int c = 0; c < C; ++c) {
          double xhat = double((p[c] - mu) * is);
          double dyg = double(dy[c]) * double(gamma->value.data[c]);
          dx[c] += T(double(is) * (dyg - sum_dyg / C - xhat * sum_dyg_xhat / C));
        }
      }
    }
  };
  return detail::make_op<T>(std::move(y), {x, gamma, beta}, std::move(bw));
}

/// Softmax over the last dimension.
template <class T>
VarPtr<T> softmax_lastdim(const VarPtr<T>& x) {
  const auto& xs = x->value.shape;
  int C = xs.back();
  int64_t rows = x->numel() / C;
  Tensor<T> y(xs);
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = x->value.data.data() + r * C;
    T* q = y.data.data() + r * C;
    T mx = p[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, p[c]);
    double z = 0;
    for (int c = 0; c < C; ++c) {
      double e = std::exp(double(p[c] - mx));
      q[c] = T(e);
      z += e;
    }
    for (int c = 0; c < C; ++c) q[c] = T(double(q[c]) / z);
  }
  return detail::make_op<T>(std::move(y), {x}, [x, rows, C](Var<T>& out) {
    x->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* yv = out.value.data.data() + r * C;
      const T* dy = out.grad.data.data() + r * C;
      T* dx = x->grad.data.data() + r * C;
      double dot = 0;
      for (int c = 0; c < C; ++c) dot += double(dy[c]) * double(yv[c]);
      for (int c = 0; c < C; ++c) dx[c] += yv[c] * (dy[c] - T(dot));
    }
  });
}

/// Batched matmul: (B, M, K) x (B, K, N) -> (B, M, N). If transpose_b,
/// b is (B, N, K).
template <class T>
VarPtr<T> bmm(const VarPtr<T>& a, const VarPtr<T>& b, bool transpose_b = false) {
  const auto& as = a->value.shape;
  const auto& bs = b->value.shape;
  TAN_CHECK(as.size() == 3 && bs.size() == 3 && as[0] == bs[0], "bmm: bad shapes");
  int B = as[0], M = as[1], K = as[2];
  int N = transpose_b ? bs[1] : bs[2];
  TAN_CHECK((transpose_b ? bs[2] : bs[1]) == K, "bmm: inner dim mismatch");
  Tensor<T> y({B, M, N});
  for (int i = 0; i < B; ++i) {
    detail::CMapRM<T> Am(a->value.data.data() + int64_t(i) * M * K, M, K);
    detail::MapRM<T> Ym(y.data.data() + int64_t(i) * M * N, M, N);
    if (transpose_b) {
      detail::CMapRM<T> Bm(b->value.data.data() + int64_t(i) * N * K, N, K);
      Ym.noalias() = Am * Bm.transpose();
    } else {
      detail::CMapRM<T> Bm(b->value.data.data() + int64_t(i) * K * N, K, N);
      Ym.noalias() = Am * Bm;
    }
  }
  auto bw = [a, b, transpose_b, B, M, K, N](Var<T>& out) {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    for (int i = 0; i < B; ++i) {
      detail::CMapRM<T> dY(out.grad.data.data() + int64_t(i) * M * N, M, N);
      detail::CMapRM<T> Am(a->value.data.data() + int64_t(i) * M * K, M, K);
      if (transpose_b) {
        detail::CMapRM<T> Bm(b->value.data.data() + int64_t(i) * N * K, N, K);
        if (a->requires_grad) {
          detail::MapRM<T> dA(a->grad.data.data() + int64_t(i) * M * K, M, K);
          dA.noalias() += dY * Bm;
        }
        if (b->requires_grad) {
          detail::MapRM<T> dB(b->grad.data.data() + int64_t(i) * N * K, N, K);
          dB.noalias() += dY.transpose() * Am;
        }
      } else {
        detail::CMapRM<T> Bm(b->value.data.data() + int64_t(i) * K * N, K, N);
        if (a->requires_grad) {
          detail::MapRM<T> dA(a->grad.data.data() + int64_t(i) * M * K, M, K);
          dA.noalias() += dY * Bm.transpose();
        }
        if (b->requires_grad) {
          detail::MapRM<T> dB(b->grad.data.data() + int64_t(i) * K * N, K, N);
          dB.noalias() += Am.transpose() * dY;
        }
      }
    }
  };
  return detail::make_op<T>(std::move(y), {a, b}, std::move(bw));
}

}  // namespace tan
