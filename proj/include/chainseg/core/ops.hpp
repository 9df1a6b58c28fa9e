#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "chainseg/core/autodiff.hpp"

namespace chainseg {
namespace ops {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

// ---------------------------------------------------------------- pointwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  CS_CHECK(a->value.same_shape(b->value), "add: shape mismatch "
           << a->value.shape_string() << " vs " << b->value.shape_string());
  Tensor<T> out(a->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
  return make_op<T>(std::move(out), {a, b}, [a, b, n](Node<T>& o) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ga[i] += o.grad[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int64_t i = 0; i < n; ++i) gb[i] += o.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  CS_CHECK(a->value.same_shape(b->value), "mul: shape mismatch "
           << a->value.shape_string() << " vs " << b->value.shape_string());
  Tensor<T> out(a->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
  return make_op<T>(std::move(out), {a, b}, [a, b, n](Node<T>& o) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ga[i] += o.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int64_t i = 0; i < n; ++i) gb[i] += o.grad[i] * a->value[i];
    }
  });
}

// (N,C,H,W) ⊗ (N,1,H,W), broadcast over channels.
template <typename T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& m) {
  check_rank(x->value, 4, "mul_spatial");
  check_rank(m->value, 4, "mul_spatial");
  CS_CHECK(m->value.dim(1) == 1, "mul_spatial: mask channel axis must be 1, got "
                                     << m->value.dim(1));
  CS_CHECK(x->value.dim(0) == m->value.dim(0) && x->value.dim(2) == m->value.dim(2) &&
               x->value.dim(3) == m->value.dim(3),
           "mul_spatial: batch/spatial mismatch " << x->value.shape_string() << " vs "
                                                  << m->value.shape_string());
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor<T> out(x->value.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* xs = x->value.data() + (n * C + c) * HW;
      const T* ms = m->value.data() + n * HW;
      T* os = out.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) os[i] = xs[i] * ms[i];
    }
  return make_op<T>(std::move(out), {x, m}, [x, m, N, C, HW](Node<T>& o) {
    if (x->requires_grad) {
      auto& gx = x->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          T* g = gx.data() + (n * C + c) * HW;
          const T* dy = o.grad.data() + (n * C + c) * HW;
          const T* ms = m->value.data() + n * HW;
          for (int64_t i = 0; i < HW; ++i) g[i] += dy[i] * ms[i];
        }
    }
    if (m->requires_grad) {
      auto& gm = m->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          T* g = gm.data() + n * HW;
          const T* dy = o.grad.data() + (n * C + c) * HW;
          const T* xs = x->value.data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) g[i] += dy[i] * xs[i];
        }
    }
  });
}

// (N,C,H,W) ⊗ (N,C,1,1), broadcast over space.
template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& v) {
  check_rank(x->value, 4, "mul_channel");
  check_rank(v->value, 4, "mul_channel");
  CS_CHECK(v->value.dim(2) == 1 && v->value.dim(3) == 1,
           "mul_channel: vector spatial axes must be 1x1, got " << v->value.shape_string());
  CS_CHECK(x->value.dim(0) == v->value.dim(0) && x->value.dim(1) == v->value.dim(1),
           "mul_channel: batch/channel mismatch " << x->value.shape_string() << " vs "
                                                  << v->value.shape_string());
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor<T> out(x->value.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T s = v->value[n * C + c];
      const T* xs = x->value.data() + (n * C + c) * HW;
      T* os = out.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) os[i] = xs[i] * s;
    }
  return make_op<T>(std::move(out), {x, v}, [x, v, N, C, HW](Node<T>& o) {
    if (x->requires_grad) {
      auto& gx = x->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const T s = v->value[n * C + c];
          T* g = gx.data() + (n * C + c) * HW;
          const T* dy = o.grad.data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) g[i] += dy[i] * s;
        }
    }
    if (v->requires_grad) {
      auto& gv = v->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const T* dy = o.grad.data() + (n * C + c) * HW;
          const T* xs = x->value.data() + (n * C + c) * HW;
          T acc = T(0);
          for (int64_t i = 0; i < HW; ++i) acc += dy[i] * xs[i];
          gv[n * C + c] += acc;
        }
    }
  });
}

// x scaled by a single-element learnable scalar.
template <typename T>
Var<T> scale(const Var<T>& x, const Var<T>& alpha) {
  CS_CHECK(alpha->value.numel() == 1, "scale: alpha must hold exactly 1 value, has "
                                          << alpha->value.numel());
  const T a = alpha->value[0];
  Tensor<T> out(x->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = x->value[i] * a;
  return make_op<T>(std::move(out), {x, alpha}, [x, alpha, a, n](Node<T>& o) {
    if (x->requires_grad) {
      auto& gx = x->ensure_grad();
      for (int64_t i = 0; i < n; ++i) gx[i] += o.grad[i] * a;
    }
    if (alpha->requires_grad) {
      T acc = T(0);
      for (int64_t i = 0; i < n; ++i) acc += o.grad[i] * x->value[i];
      alpha->ensure_grad()[0] += acc;
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = x->value[i] > T(0) ? x->value[i] : T(0);
  return make_op<T>(std::move(out), {x}, [x, n](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      if (o.value[i] > T(0)) gx[i] += o.grad[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    const T v = x->value[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                       : std::exp(v) / (T(1) + std::exp(v));
  }
  return make_op<T>(std::move(out), {x}, [x, n](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < n; ++i) gx[i] += o.grad[i] * o.value[i] * (T(1) - o.value[i]);
  });
}

// ------------------------------------------------------------ concat / view

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  CS_CHECK(!parts.empty(), "concat_channels: no inputs");
  check_rank(parts[0]->value, 4, "concat_channels");
  const int64_t N = parts[0]->value.dim(0), H = parts[0]->value.dim(2),
                W = parts[0]->value.dim(3);
  int64_t Ctot = 0;
  for (const auto& p : parts) {
    check_rank(p->value, 4, "concat_channels");
    CS_CHECK(p->value.dim(0) == N && p->value.dim(2) == H && p->value.dim(3) == W,
             "concat_channels: batch/spatial mismatch " << p->value.shape_string()
                 << " vs " << parts[0]->value.shape_string());
    Ctot += p->value.dim(1);
  }
  Tensor<T> out({N, Ctot, H, W});
  const int64_t HW = H * W;
  int64_t coff = 0;
  for (const auto& p : parts) {
    const int64_t C = p->value.dim(1);
    for (int64_t n = 0; n < N; ++n)
      std::copy(p->value.data() + n * C * HW, p->value.data() + (n + 1) * C * HW,
                out.data() + (n * Ctot + coff) * HW);
    coff += C;
  }
  return make_op<T>(std::move(out), parts, [parts, N, Ctot, HW](Node<T>& o) {
    int64_t coff = 0;
    for (const auto& p : parts) {
      const int64_t C = p->value.dim(1);
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
          const T* dy = o.grad.data() + (n * Ctot + coff) * HW;
          T* gp = g.data() + n * C * HW;
          for (int64_t i = 0; i < C * HW; ++i) gp[i] += dy[i];
        }
      }
      coff += C;
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int64_t> shape) {
  Tensor<T> out(shape);
  CS_CHECK(out.numel() == x->value.numel(),
           "reshape: element count mismatch " << x->value.shape_string() << " -> "
                                              << detail::shape_str(shape));
  std::copy(x->value.data(), x->value.data() + x->value.numel(), out.data());
  return make_op<T>(std::move(out), {x}, [x](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += o.grad[i];
  });
}

// ----------------------------------------------------------------- pooling

template <typename T>
Var<T> max_pool2(const Var<T>& x) {
  check_rank(x->value, 4, "max_pool2");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  CS_CHECK(H % 2 == 0, "max_pool2: height " << H << " is odd");
  CS_CHECK(W % 2 == 0, "max_pool2: width " << W << " is odd");
  const int64_t OH = H / 2, OW = W / 2;
  Tensor<T> out({N, C, OH, OW});
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
  int64_t o = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox, ++o) {
          const int64_t base = ((n * C + c) * H + oy * 2) * W + ox * 2;
          int64_t best = base;
          T bv = x->value[base];
          const int64_t cands[3] = {base + 1, base + W, base + W + 1};
          for (int64_t k : cands)
            if (x->value[k] > bv) {
              bv = x->value[k];
              best = k;
            }
          out[o] = bv;
          (*idx)[static_cast<size_t>(o)] = best;
        }
  return make_op<T>(std::move(out), {x}, [x, idx](Node<T>& o2) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < o2.grad.numel(); ++i) gx[(*idx)[static_cast<size_t>(i)]] += o2.grad[i];
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  check_rank(x->value, 4, "avg_pool2");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  CS_CHECK(H % 2 == 0, "avg_pool2: height " << H << " is odd");
  CS_CHECK(W % 2 == 0, "avg_pool2: width " << W << " is odd");
  const int64_t OH = H / 2, OW = W / 2;
  Tensor<T> out({N, C, OH, OW});
  int64_t o = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox, ++o) {
          const int64_t base = ((n * C + c) * H + oy * 2) * W + ox * 2;
          out[o] = (x->value[base] + x->value[base + 1] + x->value[base + W] +
                    x->value[base + W + 1]) * T(0.25);
        }
  return make_op<T>(std::move(out), {x}, [x, N, C, OH, OW, H, W](Node<T>& o2) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    int64_t o = 0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t oy = 0; oy < OH; ++oy)
          for (int64_t ox = 0; ox < OW; ++ox, ++o) {
            const T g = o2.grad[o] * T(0.25);
            const int64_t base = ((n * C + c) * H + oy * 2) * W + ox * 2;
            gx[base] += g;
            gx[base + 1] += g;
            gx[base + W] += g;
            gx[base + W + 1] += g;
          }
  });
}

// -------------------------------------------------------------- reductions

template <typename T>
Var<T> channel_mean(const Var<T>& x) {
  check_rank(x->value, 4, "channel_mean");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor<T> out({N, 1, x->value.dim(2), x->value.dim(3)});
  const T inv = T(1) / static_cast<T>(C);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      T acc = T(0);
      for (int64_t c = 0; c < C; ++c) acc += x->value[(n * C + c) * HW + i];
      out[n * HW + i] = acc * inv;
    }
  return make_op<T>(std::move(out), {x}, [x, N, C, HW, inv](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        const T g = o.grad[n * HW + i] * inv;
        for (int64_t c = 0; c < C; ++c) gx[(n * C + c) * HW + i] += g;
      }
  });
}

template <typename T>
Var<T> channel_max(const Var<T>& x) {
  check_rank(x->value, 4, "channel_max");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor<T> out({N, 1, x->value.dim(2), x->value.dim(3)});
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * HW));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      int64_t best = (n * C + 0) * HW + i;
      T bv = x->value[best];
      for (int64_t c = 1; c < C; ++c) {
        const int64_t k = (n * C + c) * HW + i;
        if (x->value[k] > bv) {
          bv = x->value[k];
          best = k;
        }
      }
      out[n * HW + i] = bv;
      (*idx)[static_cast<size_t>(n * HW + i)] = best;
    }
  return make_op<T>(std::move(out), {x}, [x, idx](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < o.grad.numel(); ++i) gx[(*idx)[static_cast<size_t>(i)]] += o.grad[i];
  });
}

template <typename T>
Var<T> spatial_mean(const Var<T>& x) {
  check_rank(x->value, 4, "spatial_mean");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor<T> out({N, C, 1, 1});
  const T inv = T(1) / static_cast<T>(HW);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    T acc = T(0);
    for (int64_t i = 0; i < HW; ++i) acc += x->value[nc * HW + i];
    out[nc] = acc * inv;
  }
  return make_op<T>(std::move(out), {x}, [x, N, C, HW, inv](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const T g = o.grad[nc] * inv;
      for (int64_t i = 0; i < HW; ++i) gx[nc * HW + i] += g;
    }
  });
}

template <typename T>
Var<T> spatial_max(const Var<T>& x) {
  check_rank(x->value, 4, "spatial_max");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor<T> out({N, C, 1, 1});
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C));
  for (int64_t nc = 0; nc < N * C; ++nc) {
    int64_t best = nc * HW;
    T bv = x->value[best];
    for (int64_t i = 1; i < HW; ++i)
      if (x->value[nc * HW + i] > bv) {
        bv = x->value[nc * HW + i];
        best = nc * HW + i;
      }
    out[nc] = bv;
    (*idx)[static_cast<size_t>(nc)] = best;
  }
  return make_op<T>(std::move(out), {x}, [x, idx](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < o.grad.numel(); ++i) gx[(*idx)[static_cast<size_t>(i)]] += o.grad[i];
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  Tensor<T> out({1});
  T acc = T(0);
  for (int64_t i = 0; i < x->value.numel(); ++i) acc += x->value[i];
  out[0] = acc;
  return make_op<T>(std::move(out), {x}, [x](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    const T g = o.grad[0];
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

// Fixed-weight projection to a scalar; the workhorse of gradient checking
// (a random projection exercises every output element).
template <typename T>
Var<T> dot_const(const Var<T>& x, Tensor<T> w) {
  CS_CHECK(x->value.same_shape(w), "dot_const: shape mismatch "
           << x->value.shape_string() << " vs " << w.shape_string());
  Tensor<T> out({1});
  T acc = T(0);
  for (int64_t i = 0; i < w.numel(); ++i) acc += x->value[i] * w[i];
  out[0] = acc;
  auto ws = std::make_shared<Tensor<T>>(std::move(w));
  return make_op<T>(std::move(out), {x}, [x, ws](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    const T g = o.grad[0];
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g * (*ws)[i];
  });
}

// ------------------------------------------------------------- convolution

namespace detail {

template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* col) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < kh; ++ky)
      for (int64_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill(row + oy * OW, row + (oy + 1) * OW, T(0));
            continue;
          }
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            row[oy * OW + ox] = (ix >= 0 && ix < W) ? x[(c * H + iy) * W + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* gx) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < kh; ++ky)
      for (int64_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((c * kh + ky) * kw + kx) * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) gx[(c * H + iy) * W + ix] += row[oy * OW + ox];
          }
        }
      }
}

}  // namespace detail

// Zero-padded 2D convolution, weight layout (Cout, Cin, kh, kw). Bias may be
// an empty Var. Lowered to GEMM via im2col; the column buffer is rebuilt in
// the backward pass instead of being cached (memory over speed).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride = 1,
              int64_t pad = 0) {
  check_rank(x->value, 4, "conv2d input");
  check_rank(w->value, 4, "conv2d weight");
  const int64_t N = x->value.dim(0), Cin = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  const int64_t Cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  CS_CHECK(w->value.dim(1) == Cin, "conv2d: weight expects " << w->value.dim(1)
           << " input channels, input has " << Cin);
  CS_CHECK(stride >= 1, "conv2d: stride must be >= 1, got " << stride);
  CS_CHECK(H + 2 * pad >= kh, "conv2d: height " << H << " too small for kernel " << kh
                               << " with pad " << pad);
  CS_CHECK(W + 2 * pad >= kw, "conv2d: width " << W << " too small for kernel " << kw
                               << " with pad " << pad);
  if (b) {
    CS_CHECK(b->value.rank() == 1 && b->value.dim(0) == Cout,
             "conv2d: bias shape " << b->value.shape_string() << " does not match "
                                   << Cout << " output channels");
  }
  const int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const int64_t OW = (W + 2 * pad - kw) / stride + 1;
  const int64_t K = Cin * kh * kw, P = OH * OW;

  Tensor<T> out({N, Cout, OH, OW});
  {
    std::vector<T> col(static_cast<size_t>(K * P));
    CMapM<T> wm(w->value.data(), Cout, K);
    for (int64_t n = 0; n < N; ++n) {
      detail::im2col(x->value.data() + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad,
                     OH, OW, col.data());
      CMapM<T> cm(col.data(), K, P);
      MapM<T> om(out.data() + n * Cout * P, Cout, P);
      om.noalias() = wm * cm;
      if (b)
        for (int64_t c = 0; c < Cout; ++c) om.row(c).array() += b->value[c];
    }
  }

  std::vector<Var<T>> inputs = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  return make_op<T>(
      std::move(out), std::move(inputs),
      [x, w, b, N, Cin, H, W, Cout, kh, kw, stride, pad, OH, OW, K, P](Node<T>& o) {
        std::vector<T> col(static_cast<size_t>(K * P));
        std::vector<T> dcol(static_cast<size_t>(K * P));
        CMapM<T> wm(w->value.data(), Cout, K);
        const bool need_x = x->requires_grad, need_w = w->requires_grad;
        const bool need_b = b && b->requires_grad;
        if (need_w) w->ensure_grad();
        if (need_x) x->ensure_grad();
        if (need_b) b->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
          CMapM<T> dy(o.grad.data() + n * Cout * P, Cout, P);
          if (need_w || need_x)
            detail::im2col(x->value.data() + n * Cin * H * W, Cin, H, W, kh, kw, stride,
                           pad, OH, OW, col.data());
          if (need_w) {
            CMapM<T> cm(col.data(), K, P);
            MapM<T> gw(w->grad.data(), Cout, K);
            gw.noalias() += dy * cm.transpose();
          }
          if (need_b)
            // Plain left-to-right accumulation: a vectorized reduction changes
            // its split with the buffer's address, and bitwise reproducibility
            // across runs matters more here than the tail of a backward pass.
            for (int64_t c = 0; c < Cout; ++c) {
              const T* row = o.grad.data() + (n * Cout + c) * P;
              T s = 0;
              for (int64_t i = 0; i < P; ++i) s += row[i];
              b->grad[c] += s;
            }
          if (need_x) {
            MapM<T> dc(dcol.data(), K, P);
            dc.noalias() = wm.transpose() * dy;
            detail::col2im_add(dcol.data(), Cin, H, W, kh, kw, stride, pad, OH, OW,
                               x->grad.data() + n * Cin * H * W);
          }
        }
      });
}

// Fully connected layer: x (N,F) with weight (O,F), optional bias (O).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  check_rank(x->value, 2, "linear input");
  check_rank(w->value, 2, "linear weight");
  const int64_t N = x->value.dim(0), F = x->value.dim(1), O = w->value.dim(0);
  CS_CHECK(w->value.dim(1) == F, "linear: weight expects " << w->value.dim(1)
           << " features, input has " << F);
  if (b)
    CS_CHECK(b->value.rank() == 1 && b->value.dim(0) == O,
             "linear: bias shape " << b->value.shape_string() << " vs " << O << " outputs");
  Tensor<T> out({N, O});
  {
    CMapM<T> xm(x->value.data(), N, F);
    CMapM<T> wm(w->value.data(), O, F);
    MapM<T> om(out.data(), N, O);
    om.noalias() = xm * wm.transpose();
    if (b)
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < O; ++c) om(n, c) += b->value[c];
  }
  std::vector<Var<T>> inputs = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  return make_op<T>(std::move(out), std::move(inputs), [x, w, b, N, F, O](Node<T>& o) {
    CMapM<T> dy(o.grad.data(), N, O);
    if (x->requires_grad) {
      MapM<T> gx(x->ensure_grad().data(), N, F);
      CMapM<T> wm(w->value.data(), O, F);
      gx.noalias() += dy * wm;
    }
    if (w->requires_grad) {
      MapM<T> gw(w->ensure_grad().data(), O, F);
      CMapM<T> xm(x->value.data(), N, F);
      gw.noalias() += dy.transpose() * xm;
    }
    if (b && b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < O; ++c) gb[c] += dy(n, c);
    }
  });
}

// ------------------------------------------------------------ group norm

// Batch-independent normalization over channel groups, biased variance.
// Statistics are deterministic functions of the input (no running state).
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  int64_t groups, T eps = T(1e-5)) {
  check_rank(x->value, 4, "group_norm");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  CS_CHECK(groups >= 1 && C % groups == 0,
           "group_norm: channels " << C << " not divisible by groups " << groups);
  CS_CHECK(gamma->value.rank() == 1 && gamma->value.dim(0) == C,
           "group_norm: gamma shape " << gamma->value.shape_string() << " vs C=" << C);
  CS_CHECK(beta->value.rank() == 1 && beta->value.dim(0) == C,
           "group_norm: beta shape " << beta->value.shape_string() << " vs C=" << C);
  const int64_t cpg = C / groups, m = cpg * HW;

  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(N * groups));
  auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(N * groups));
  Tensor<T> out(x->value.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t g = 0; g < groups; ++g) {
      const T* xs = x->value.data() + (n * C + g * cpg) * HW;
      T mu = T(0);
      for (int64_t i = 0; i < m; ++i) mu += xs[i];
      mu /= static_cast<T>(m);
      T var = T(0);
      for (int64_t i = 0; i < m; ++i) {
        const T d = xs[i] - mu;
        var += d * d;
      }
      var /= static_cast<T>(m);
      const T is = T(1) / std::sqrt(var + eps);
      (*mean)[static_cast<size_t>(n * groups + g)] = mu;
      (*istd)[static_cast<size_t>(n * groups + g)] = is;
      T* os = out.data() + (n * C + g * cpg) * HW;
      for (int64_t c = 0; c < cpg; ++c) {
        const T ga = gamma->value[g * cpg + c], be = beta->value[g * cpg + c];
        for (int64_t i = 0; i < HW; ++i)
          os[c * HW + i] = (xs[c * HW + i] - mu) * is * ga + be;
      }
    }

  return make_op<T>(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, mean, istd, N, C, HW, groups, cpg, m](Node<T>& o) {
    const bool need_x = x->requires_grad;
    const bool need_g = gamma->requires_grad, need_b = beta->requires_grad;
    if (need_x) x->ensure_grad();
    if (need_g) gamma->ensure_grad();
    if (need_b) beta->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t g = 0; g < groups; ++g) {
        const T mu = (*mean)[static_cast<size_t>(n * groups + g)];
        const T is = (*istd)[static_cast<size_t>(n * groups + g)];
        const T* xs = x->value.data() + (n * C + g * cpg) * HW;
        const T* dy = o.grad.data() + (n * C + g * cpg) * HW;
        if (need_g || need_b) {
          for (int64_t c = 0; c < cpg; ++c) {
            T sg = T(0), sb = T(0);
            for (int64_t i = 0; i < HW; ++i) {
              sg += dy[c * HW + i] * (xs[c * HW + i] - mu) * is;
              sb += dy[c * HW + i];
            }
            if (need_g) gamma->grad[g * cpg + c] += sg;
            if (need_b) beta->grad[g * cpg + c] += sb;
          }
        }
        if (need_x) {
          T s1 = T(0), s2 = T(0);
          for (int64_t c = 0; c < cpg; ++c) {
            const T ga = gamma->value[g * cpg + c];
            for (int64_t i = 0; i < HW; ++i) {
              const T dxh = dy[c * HW + i] * ga;
              s1 += dxh;
              s2 += dxh * (xs[c * HW + i] - mu) * is;
            }
          }
          s1 /= static_cast<T>(m);
          s2 /= static_cast<T>(m);
          T* gx = x->grad.data() + (n * C + g * cpg) * HW;
          for (int64_t c = 0; c < cpg; ++c) {
            const T ga = gamma->value[g * cpg + c];
            for (int64_t i = 0; i < HW; ++i) {
              const T xh = (xs[c * HW + i] - mu) * is;
              gx[c * HW + i] += is * (dy[c * HW + i] * ga - s1 - xh * s2);
            }
          }
        }
      }
  });
}

// ------------------------------------------------------------- resampling

namespace detail {

// Half-pixel-center source coordinates with edge clamping (the
// align-corners=false convention).
inline void bilinear_axis(int64_t out_len, int64_t in_len, int64_t factor,
                          std::vector<int64_t>& i0, std::vector<int64_t>& i1,
                          std::vector<double>& w1) {
  i0.resize(static_cast<size_t>(out_len));
  i1.resize(static_cast<size_t>(out_len));
  w1.resize(static_cast<size_t>(out_len));
  for (int64_t o = 0; o < out_len; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    double f = std::floor(src);
    double frac = src - f;
    int64_t a = static_cast<int64_t>(f);
    int64_t b = a + 1;
    if (a < 0) a = 0;
    if (b < 0) b = 0;
    if (a > in_len - 1) a = in_len - 1;
    if (b > in_len - 1) b = in_len - 1;
    if (frac < 0.0) frac = 0.0;
    if (frac > 1.0) frac = 1.0;
    i0[static_cast<size_t>(o)] = a;
    i1[static_cast<size_t>(o)] = b;
    w1[static_cast<size_t>(o)] = frac;
  }
}

}  // namespace detail

template <typename T>
Var<T> bilinear_upsample(const Var<T>& x, int64_t factor) {
  check_rank(x->value, 4, "bilinear_upsample");
  CS_CHECK(factor >= 1, "bilinear_upsample: factor must be >= 1, got " << factor);
  const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  const int64_t OH = H * factor, OW = W * factor;
  std::vector<int64_t> y0, y1, x0, x1;
  std::vector<double> wy, wx;
  detail::bilinear_axis(OH, H, factor, y0, y1, wy);
  detail::bilinear_axis(OW, W, factor, x0, x1, wx);

  Tensor<T> out({N, C, OH, OW});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xs = x->value.data() + nc * H * W;
    T* os = out.data() + nc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy) {
      const int64_t a = y0[static_cast<size_t>(oy)], b = y1[static_cast<size_t>(oy)];
      const T fy = static_cast<T>(wy[static_cast<size_t>(oy)]);
      for (int64_t ox = 0; ox < OW; ++ox) {
        const int64_t l = x0[static_cast<size_t>(ox)], r = x1[static_cast<size_t>(ox)];
        const T fx = static_cast<T>(wx[static_cast<size_t>(ox)]);
        const T top = xs[a * W + l] * (T(1) - fx) + xs[a * W + r] * fx;
        const T bot = xs[b * W + l] * (T(1) - fx) + xs[b * W + r] * fx;
        os[oy * OW + ox] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  return make_op<T>(std::move(out), {x},
                    [x, N, C, H, W, OH, OW, y0, y1, x0, x1, wy, wx](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      T* gs = gx.data() + nc * H * W;
      const T* dy = o.grad.data() + nc * OH * OW;
      for (int64_t oy = 0; oy < OH; ++oy) {
        const int64_t a = y0[static_cast<size_t>(oy)], b = y1[static_cast<size_t>(oy)];
        const T fy = static_cast<T>(wy[static_cast<size_t>(oy)]);
        for (int64_t ox = 0; ox < OW; ++ox) {
          const int64_t l = x0[static_cast<size_t>(ox)], r = x1[static_cast<size_t>(ox)];
          const T fx = static_cast<T>(wx[static_cast<size_t>(ox)]);
          const T g = dy[oy * OW + ox];
          gs[a * W + l] += g * (T(1) - fy) * (T(1) - fx);
          gs[a * W + r] += g * (T(1) - fy) * fx;
          gs[b * W + l] += g * fy * (T(1) - fx);
          gs[b * W + r] += g * fy * fx;
        }
      }
    }
  });
}

template <typename T>
Var<T> nearest_upsample(const Var<T>& x, int64_t factor) {
  check_rank(x->value, 4, "nearest_upsample");
  CS_CHECK(factor >= 1, "nearest_upsample: factor must be >= 1, got " << factor);
  const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  const int64_t OH = H * factor, OW = W * factor;
  Tensor<T> out({N, C, OH, OW});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xs = x->value.data() + nc * H * W;
    T* os = out.data() + nc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox)
        os[oy * OW + ox] = xs[(oy / factor) * W + ox / factor];
  }
  return make_op<T>(std::move(out), {x}, [x, N, C, H, W, OH, OW, factor](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      T* gs = gx.data() + nc * H * W;
      const T* dy = o.grad.data() + nc * OH * OW;
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox)
          gs[(oy / factor) * W + ox / factor] += dy[oy * OW + ox];
    }
  });
}

// ---------------------------------------------------------- batched matmul

template <typename T>
Var<T> transpose12(const Var<T>& x) {
  check_rank(x->value, 3, "transpose12");
  const int64_t B = x->value.dim(0), P = x->value.dim(1), Q = x->value.dim(2);
  Tensor<T> out({B, Q, P});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < P; ++p)
      for (int64_t q = 0; q < Q; ++q) out.at(b, q, p) = x->value.at(b, p, q);
  return make_op<T>(std::move(out), {x}, [x, B, P, Q](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t p = 0; p < P; ++p)
        for (int64_t q = 0; q < Q; ++q) gx.at(b, p, q) += o.grad.at(b, q, p);
  });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  check_rank(a->value, 3, "bmm lhs");
  check_rank(b->value, 3, "bmm rhs");
  const int64_t B = a->value.dim(0), P = a->value.dim(1), Q = a->value.dim(2),
                R = b->value.dim(2);
  CS_CHECK(b->value.dim(0) == B, "bmm: batch mismatch " << B << " vs " << b->value.dim(0));
  CS_CHECK(b->value.dim(1) == Q, "bmm: inner axis mismatch " << Q << " vs " << b->value.dim(1));
  Tensor<T> out({B, P, R});
  for (int64_t i = 0; i < B; ++i) {
    CMapM<T> am(a->value.data() + i * P * Q, P, Q);
    CMapM<T> bm(b->value.data() + i * Q * R, Q, R);
    MapM<T> om(out.data() + i * P * R, P, R);
    om.noalias() = am * bm;
  }
  return make_op<T>(std::move(out), {a, b}, [a, b, B, P, Q, R](Node<T>& o) {
    for (int64_t i = 0; i < B; ++i) {
      CMapM<T> dy(o.grad.data() + i * P * R, P, R);
      if (a->requires_grad) {
        MapM<T> ga(a->ensure_grad().data() + i * P * Q, P, Q);
        CMapM<T> bm(b->value.data() + i * Q * R, Q, R);
        ga.noalias() += dy * bm.transpose();
      }
      if (b->requires_grad) {
        MapM<T> gb(b->ensure_grad().data() + i * Q * R, Q, R);
        CMapM<T> am(a->value.data() + i * P * Q, P, Q);
        gb.noalias() += am.transpose() * dy;
      }
    }
  });
}

// L2-normalizes each pixel's channel vector: y(:,h,w) = v/sqrt(|v|^2 + eps).
template <typename T>
Var<T> pixel_l2_normalize(const Var<T>& x, T eps = T(1e-12)) {
  check_rank(x->value, 4, "pixel_l2_normalize");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor<T> out(x->value.shape());
  auto inv = std::make_shared<std::vector<T>>(static_cast<size_t>(N * HW));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      T ss = T(0);
      for (int64_t c = 0; c < C; ++c) {
        const T v = x->value[(n * C + c) * HW + i];
        ss += v * v;
      }
      const T s = T(1) / std::sqrt(ss + eps);
      (*inv)[static_cast<size_t>(n * HW + i)] = s;
      for (int64_t c = 0; c < C; ++c)
        out[(n * C + c) * HW + i] = x->value[(n * C + c) * HW + i] * s;
    }
  return make_op<T>(std::move(out), {x}, [x, inv, N, C, HW](Node<T>& o) {
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        const T s = (*inv)[static_cast<size_t>(n * HW + i)];
        T vdoty = T(0);
        for (int64_t c = 0; c < C; ++c)
          vdoty += x->value[(n * C + c) * HW + i] * o.grad[(n * C + c) * HW + i];
        const T s3 = s * s * s;
        for (int64_t c = 0; c < C; ++c)
          gx[(n * C + c) * HW + i] += s * o.grad[(n * C + c) * HW + i] -
                                      s3 * x->value[(n * C + c) * HW + i] * vdoty;
      }
  });
}

}  // namespace ops
}  // namespace chainseg
