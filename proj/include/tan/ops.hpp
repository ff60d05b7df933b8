// Copyright (c) 2026 the tan authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tan/autograd.hpp"

namespace tan {

namespace detail {

template <class T>
VarPtr<T> make_op(Tensor<T> value, std::vector<VarPtr<T>> parents,
                  std::function<void(Var<T>&)> bw) {
  auto out = make_var<T>(std::move(value));
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  out->requires_grad = needs;
  if (needs) {
    out->parents = std::move(parents);
    out->backward_fn = std::move(bw);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
VarPtr<T> add(const VarPtr<T>& a, const VarPtr<T>& b) {
  TAN_CHECK(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v.data[i] += b->value.data[i];
  return detail::make_op<T>(std::move(v), {a, b}, [a, b](Var<T>& out) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < out.numel(); ++i) a->grad.data[i] += out.grad.data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < out.numel(); ++i) b->grad.data[i] += out.grad.data[i];
    }
  });
}

template <class T>
VarPtr<T> mul(const VarPtr<T>& a, const VarPtr<T>& b) {
  TAN_CHECK(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v.data[i] *= b->value.data[i];
  return detail::make_op<T>(std::move(v), {a, b}, [a, b](Var<T>& out) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < out.numel(); ++i)
        a->grad.data[i] += out.grad.data[i] * b->value.data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < out.numel(); ++i)
        b->grad.data[i] += out.grad.data[i] * a->value.data[i];
    }
  });
}

/// alpha * x + beta, elementwise with scalar constants.
template <class T>
VarPtr<T> affine(const VarPtr<T>& x, T alpha, T beta) {
  Tensor<T> v = x->value;
  for (auto& e : v.data) e = alpha * e + beta;
  return detail::make_op<T>(std::move(v), {x}, [x, alpha](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) x->grad.data[i] += alpha * out.grad.data[i];
  });
}

template <class T>
VarPtr<T> sub(const VarPtr<T>& a, const VarPtr<T>& b) {
  return add(a, affine(b, T(-1), T(0)));
}

/// x^p with constant exponent.
template <class T>
VarPtr<T> powc(const VarPtr<T>& x, double p) {
  Tensor<T> v = x->value;
  for (auto& e : v.data) e = T(std::pow(double(e), p));
  return detail::make_op<T>(std::move(v), {x}, [x, p](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) {
      double xi = double(x->value.data[i]);
      x->grad.data[i] += T(p * std::pow(xi, p - 1.0)) * out.grad.data[i];
    }
  });
}

template <class T>
VarPtr<T> expv(const VarPtr<T>& x, double max_arg = 30.0) {
  Tensor<T> v = x->value;
  for (auto& e : v.data) e = T(std::exp(std::min(double(e), max_arg)));
  return detail::make_op<T>(std::move(v), {x}, [x, max_arg](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) {
      double xi = double(x->value.data[i]);
      T g = xi < max_arg ? out.value.data[i] : T(0);
      x->grad.data[i] += g * out.grad.data[i];
    }
  });
}

template <class T>
VarPtr<T> logv(const VarPtr<T>& x) {
  Tensor<T> v = x->value;
  for (auto& e : v.data) e = T(std::log(double(e)));
  return detail::make_op<T>(std::move(v), {x}, [x](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i)
      x->grad.data[i] += out.grad.data[i] / x->value.data[i];
  });
}

template <class T>
VarPtr<T> sigmoid(const VarPtr<T>& x) {
  Tensor<T> v = x->value;
  for (auto& e : v.data) e = T(1) / (T(1) + T(std::exp(-double(e))));
  return detail::make_op<T>(std::move(v), {x}, [x](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) {
      T s = out.value.data[i];
      x->grad.data[i] += s * (T(1) - s) * out.grad.data[i];
    }
  });
}

template <class T>
VarPtr<T> silu(const VarPtr<T>& x) {
  Tensor<T> v = x->value;
  for (auto& e : v.data) {
    T s = T(1) / (T(1) + T(std::exp(-double(e))));
    e = e * s;
  }
  return detail::make_op<T>(std::move(v), {x}, [x](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) {
      T xi = x->value.data[i];
      T s = T(1) / (T(1) + T(std::exp(-double(xi))));
      x->grad.data[i] += (s + xi * s * (T(1) - s)) * out.grad.data[i];
    }
  });
}

template <class T>
VarPtr<T> atanv(const VarPtr<T>& x) {
  Tensor<T> v = x->value;
  for (auto& e : v.data) e = T(std::atan(double(e)));
  return detail::make_op<T>(std::move(v), {x}, [x](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) {
      T xi = x->value.data[i];
      x->grad.data[i] += out.grad.data[i] / (T(1) + xi * xi);
    }
  });
}

/// Elementwise clamp; gradient passes only through unclamped entries.
template <class T>
VarPtr<T> clamp_op(const VarPtr<T>& x, T lo, T hi) {
  Tensor<T> v = x->value;
  for (auto& e : v.data) e = clampv(e, lo, hi);
  return detail::make_op<T>(std::move(v), {x}, [x, lo, hi](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) {
      T xi = x->value.data[i];
      if (xi > lo && xi < hi) x->grad.data[i] += out.grad.data[i];
    }
  });
}

template <class T>
VarPtr<T> vmax(const VarPtr<T>& a, const VarPtr<T>& b) {
  TAN_CHECK(a->value.same_shape(b->value), "vmax: shape mismatch");
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v.data[i] = std::max(v.data[i], b->value.data[i]);
  return detail::make_op<T>(std::move(v), {a, b}, [a, b](Var<T>& out) {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) {
      bool from_a = a->value.data[i] >= b->value.data[i];
      if (from_a && a->requires_grad) a->grad.data[i] += out.grad.data[i];
      if (!from_a && b->requires_grad) b->grad.data[i] += out.grad.data[i];
    }
  });
}

template <class T>
VarPtr<T> vmin(const VarPtr<T>& a, const VarPtr<T>& b) {
  TAN_CHECK(a->value.same_shape(b->value), "vmin: shape mismatch");
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v.data[i] = std::min(v.data[i], b->value.data[i]);
  return detail::make_op<T>(std::move(v), {a, b}, [a, b](Var<T>& out) {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) {
      bool from_a = a->value.data[i] <= b->value.data[i];
      if (from_a && a->requires_grad) a->grad.data[i] += out.grad.data[i];
      if (!from_a && b->requires_grad) b->grad.data[i] += out.grad.data[i];
    }
  });
}

template <class T>
VarPtr<T> divv(const VarPtr<T>& a, const VarPtr<T>& b) {
  return mul(a, powc(b, -1.0));
}

/// Multiply a tensor by a scalar Var (shape {1}), broadcast over all entries.
template <class T>
VarPtr<T> mul_scalarvar(const VarPtr<T>& x, const VarPtr<T>& s) {
  TAN_CHECK(s->numel() == 1, "mul_scalarvar: s must be scalar");
  Tensor<T> v = x->value;
  T sv = s->value.data[0];
  for (auto& e : v.data) e *= sv;
  return detail::make_op<T>(std::move(v), {x, s}, [x, s](Var<T>& out) {
    if (x->requires_grad) {
      x->ensure_grad();
      T sv = s->value.data[0];
      for (int64_t i = 0; i < out.numel(); ++i) x->grad.data[i] += sv * out.grad.data[i];
    }
    if (s->requires_grad) {
      s->ensure_grad();
      double acc = 0;
      for (int64_t i = 0; i < out.numel(); ++i)
        acc += double(out.grad.data[i]) * double(x->value.data[i]);
      s->grad.data[0] += T(acc);
    }
  });
}

/// Per-channel multiply: x is N x C x H x W (or C x H x W), w has length C.
template <class T>
VarPtr<T> mul_channels(const VarPtr<T>& x, const VarPtr<T>& w) {
  const auto& xs = x->value.shape;
  TAN_CHECK(xs.size() == 4 || xs.size() == 3, "mul_channels: need 3/4-d input");
  int N = xs.size() == 4 ? xs[0] : 1;
  int C = xs.size() == 4 ? xs[1] : xs[0];
  int64_t HW = x->numel() / (int64_t(N) * C);
  TAN_CHECK(w->numel() == C, "mul_channels: weight length mismatch");
  Tensor<T> v = x->value;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T wc = w->value.data[c];
      T* p = v.data.data() + (int64_t(n) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) p[i] *= wc;
    }
  return detail::make_op<T>(std::move(v), {x, w}, [x, w, N, C, HW](Var<T>& out) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          T wc = w->value.data[c];
          int64_t base = (int64_t(n) * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i)
            x->grad.data[base + i] += wc * out.grad.data[base + i];
        }
    }
    if (w->requires_grad) {
      w->ensure_grad();
      for (int c = 0; c < C; ++c) {
        double acc = 0;
        for (int n = 0; n < N; ++n) {
          int64_t base = (int64_t(n) * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i)
            acc += double(out.grad.data[base + i]) * double(x->value.data[base + i]);
        }
        w->grad.data[c] += T(acc);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions (double accumulation for stable, order-fixed sums)
// ---------------------------------------------------------------------------

template <class T>
VarPtr<T> sumv(const VarPtr<T>& x) {
  double acc = 0;
  for (auto e : x->value.data) acc += double(e);
  return detail::make_op<T>(Tensor<T>::scalar(T(acc)), {x}, [x](Var<T>& out) {
    x->ensure_grad();
    T g = out.grad.data[0];
    for (int64_t i = 0; i < x->numel(); ++i) x->grad.data[i] += g;
  });
}

template <class T>
VarPtr<T> meanv(const VarPtr<T>& x) {
  TAN_CHECK(x->numel() > 0, "meanv: empty tensor");
  double acc = 0;
  for (auto e : x->value.data) acc += double(e);
  double inv_n = 1.0 / double(x->numel());
  return detail::make_op<T>(Tensor<T>::scalar(T(acc * inv_n)), {x}, [x, inv_n](Var<T>& out) {
    x->ensure_grad();
    T g = T(double(out.grad.data[0]) * inv_n);
    for (int64_t i = 0; i < x->numel(); ++i) x->grad.data[i] += g;
  });
}

template <class T>
VarPtr<T> sumsq(const VarPtr<T>& x) {
  double acc = 0;
  for (auto e : x->value.data) acc += double(e) * double(e);
  return detail::make_op<T>(Tensor<T>::scalar(T(acc)), {x}, [x](Var<T>& out) {
    x->ensure_grad();
    T g = out.grad.data[0];
    for (int64_t i = 0; i < x->numel(); ++i)
      x->grad.data[i] += T(2) * x->value.data[i] * g;
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class T>
VarPtr<T> reshape(const VarPtr<T>& x, std::vector<int> shape) {
  Tensor<T> v = x->value.reshaped(shape);
  return detail::make_op<T>(std::move(v), {x}, [x](Var<T>& out) {
    x->ensure_grad();
    for (int64_t i = 0; i < out.numel(); ++i) x->grad.data[i] += out.grad.data[i];
  });
}

namespace detail {
inline std::vector<int64_t> strides_of(const std::vector<int>& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int i = int(shape.size()) - 2; i >= 0; --i)
    st[size_t(i)] = st[size_t(i) + 1] * shape[size_t(i) + 1];
  return st;
}
}  // namespace detail

/// Generic dimension permutation (copying).
template <class T>
VarPtr<T> permute(const VarPtr<T>& x, std::vector<int> perm) {
  const auto& xs = x->value.shape;
  TAN_CHECK(perm.size() == xs.size(), "permute: rank mismatch");
  std::vector<int> os(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) os[i] = xs[size_t(perm[i])];
  auto in_st = detail::strides_of(xs);
  auto out_st = detail::strides_of(os);
  // map output flat index -> input flat index
  std::vector<int64_t> src_stride(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) src_stride[i] = in_st[size_t(perm[i])];
  Tensor<T> v(os);
  int64_t n = v.numel();
  size_t rank = os.size();
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (size_t d = 0; d < rank; ++d) {
      int64_t idx = rem / out_st[d];
      rem -= idx * out_st[d];
      src += idx * src_stride[d];
    }
    v.data[size_t(o)] = x->value.data[size_t(src)];
  }
  return detail::make_op<T>(std::move(v), {x},
                            [x, out_st, src_stride, rank](Var<T>& out) {
    x->ensure_grad();
    int64_t n = out.numel();
    for (int64_t o = 0; o < n; ++o) {
      int64_t rem = o, src = 0;
      for (size_t d = 0; d < rank; ++d) {
        int64_t idx = rem / out_st[d];
        rem -= idx * out_st[d];
        src += idx * src_stride[d];
      }
      x->grad.data[size_t(src)] += out.grad.data[size_t(o)];
    }
  });
}

/// Gather arbitrary flat indices into a 1-d tensor; backward scatter-adds.
template <class T>
VarPtr<T> gather(const VarPtr<T>& x, std::vector<int64_t> idx) {
  Tensor<T> v({int(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) {
    TAN_CHECK(idx[i] >= 0 && idx[i] < x->numel(), "gather: index out of range");
    v.data[i] = x->value.data[size_t(idx[i])];
  }
  auto idx_shared = std::make_shared<std::vector<int64_t>>(std::move(idx));
  return detail::make_op<T>(std::move(v), {x}, [x, idx_shared](Var<T>& out) {
    x->ensure_grad();
    const auto& ix = *idx_shared;
    for (size_t i = 0; i < ix.size(); ++i)
      x->grad.data[size_t(ix[i])] += out.grad.data[i];
  });
}

/// Concatenate along the channel axis (dim 1 of NCHW).
template <class T>
VarPtr<T> concat_ch(const std::vector<VarPtr<T>>& xs) {
  TAN_CHECK(!xs.empty(), "concat_ch: empty input");
  const auto& s0 = xs[0]->value.shape;
  TAN_CHECK(s0.size() == 4, "concat_ch: need NCHW");
  int N = s0[0], H = s0[2], W = s0[3];
  int Ct = 0;
  for (const auto& x : xs) {
    const auto& s = x->value.shape;
    TAN_CHECK(s.size() == 4 && s[0] == N && s[2] == H && s[3] == W,
              "concat_ch: incompatible shapes");
    Ct += s[1];
  }
  Tensor<T> v({N, Ct, H, W});
  int64_t HW = int64_t(H) * W;
  for (int n = 0; n < N; ++n) {
    int64_t coff = 0;
    for (const auto& x : xs) {
      int C = x->value.shape[1];
      const T* src = x->value.data.data() + int64_t(n) * C * HW;
      T* dst = v.data.data() + (int64_t(n) * Ct + coff) * HW;
      std::copy(src, src + int64_t(C) * HW, dst);
      coff += C;
    }
  }
  std::vector<VarPtr<T>> parents = xs;
  return detail::make_op<T>(std::move(v), parents, [xs, N, Ct, HW](Var<T>& out) {
    for (int n = 0; n < N; ++n) {
      int64_t coff = 0;
      for (const auto& x : xs) {
        int C = x->value.shape[1];
        if (x->requires_grad) {
          x->ensure_grad();
          const T* src = out.grad.data.data() + (int64_t(n) * Ct + coff) * HW;
          T* dst = x->grad.data.data() + int64_t(n) * C * HW;
          for (int64_t i = 0; i < int64_t(C) * HW; ++i) dst[i] += src[i];
        }
        coff += C;
      }
    }
  });
}

}  // namespace tan
