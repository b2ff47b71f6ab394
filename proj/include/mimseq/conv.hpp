#pragma once

#include <array>
#include <limits>

#include "mimseq/tensor.hpp"

namespace mimseq {

namespace detail {

inline long conv_extent(const char* op, long in, long k, long stride, long pad) {
  const long out = (in + 2 * pad - k) / stride + 1;
  if (out < 1)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) + " stride " +
                     std::to_string(stride) + " pad " + std::to_string(pad) +
                     " does not fit input extent " + std::to_string(in));
  return out;
}

// col is (Ci*kh*kw) x (B*OH*OW), row-major.
template <typename S>
void im2col_2d(const S* x, long b_count, long ci, long h, long w, long kh, long kw,
               long sh, long sw, long ph, long pw, long oh, long ow, S* col) {
  const long cols = b_count * oh * ow;
  for (long c = 0; c < ci; ++c) {
    for (long ki = 0; ki < kh; ++ki) {
      for (long kj = 0; kj < kw; ++kj) {
        S* row = col + ((c * kh + ki) * kw + kj) * cols;
        for (long b = 0; b < b_count; ++b) {
          const S* img = x + (b * ci + c) * h * w;
          for (long i = 0; i < oh; ++i) {
            const long yy = i * sh - ph + ki;
            S* dst = row + (b * oh + i) * ow;
            if (yy < 0 || yy >= h) {
              for (long j = 0; j < ow; ++j) dst[j] = S(0);
              continue;
            }
            for (long j = 0; j < ow; ++j) {
              const long xx = j * sw - pw + kj;
              dst[j] = (xx >= 0 && xx < w) ? img[yy * w + xx] : S(0);
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_2d_add(const S* col, long b_count, long ci, long h, long w, long kh,
                   long kw, long sh, long sw, long ph, long pw, long oh, long ow,
                   S* dx) {
  const long cols = b_count * oh * ow;
  for (long c = 0; c < ci; ++c) {
    for (long ki = 0; ki < kh; ++ki) {
      for (long kj = 0; kj < kw; ++kj) {
        const S* row = col + ((c * kh + ki) * kw + kj) * cols;
        for (long b = 0; b < b_count; ++b) {
          S* img = dx + (b * ci + c) * h * w;
          for (long i = 0; i < oh; ++i) {
            const long yy = i * sh - ph + ki;
            if (yy < 0 || yy >= h) continue;
            const S* src = row + (b * oh + i) * ow;
            for (long j = 0; j < ow; ++j) {
              const long xx = j * sw - pw + kj;
              if (xx >= 0 && xx < w) img[yy * w + xx] += src[j];
            }
          }
        }
      }
    }
  }
}

// col is (Ci*kt*kh*kw) x (OT*OH*OW) for a single batch item.
template <typename S>
void im2col_3d(const S* x, long ci, long t, long h, long w, long kt, long kh, long kw,
               long st, long sh, long sw, long pt, long ph, long pw, long ot, long oh,
               long ow, S* col) {
  const long cols = ot * oh * ow;
  for (long c = 0; c < ci; ++c) {
    for (long kd = 0; kd < kt; ++kd) {
      for (long ki = 0; ki < kh; ++ki) {
        for (long kj = 0; kj < kw; ++kj) {
          S* row = col + (((c * kt + kd) * kh + ki) * kw + kj) * cols;
          for (long d = 0; d < ot; ++d) {
            const long tt = d * st - pt + kd;
            for (long i = 0; i < oh; ++i) {
              const long yy = i * sh - ph + ki;
              S* dst = row + (d * oh + i) * ow;
              if (tt < 0 || tt >= t || yy < 0 || yy >= h) {
                for (long j = 0; j < ow; ++j) dst[j] = S(0);
                continue;
              }
              const S* img = x + ((c * t + tt) * h + yy) * w;
              for (long j = 0; j < ow; ++j) {
                const long xx = j * sw - pw + kj;
                dst[j] = (xx >= 0 && xx < w) ? img[xx] : S(0);
              }
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_3d_add(const S* col, long ci, long t, long h, long w, long kt, long kh,
                   long kw, long st, long sh, long sw, long pt, long ph, long pw,
                   long ot, long oh, long ow, S* dx) {
  const long cols = ot * oh * ow;
  for (long c = 0; c < ci; ++c) {
    for (long kd = 0; kd < kt; ++kd) {
      for (long ki = 0; ki < kh; ++ki) {
        for (long kj = 0; kj < kw; ++kj) {
          const S* row = col + (((c * kt + kd) * kh + ki) * kw + kj) * cols;
          for (long d = 0; d < ot; ++d) {
            const long tt = d * st - pt + kd;
            if (tt < 0 || tt >= t) continue;
            for (long i = 0; i < oh; ++i) {
              const long yy = i * sh - ph + ki;
              if (yy < 0 || yy >= h) continue;
              const S* src = row + (d * oh + i) * ow;
              S* img = dx + ((c * t + tt) * h + yy) * w;
              for (long j = 0; j < ow; ++j) {
                const long xx = j * sw - pw + kj;
                if (xx >= 0 && xx < w) img[xx] += src[j];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2D convolution over an NCHW batch. weight is (Co, Ci, kh, kw); bias, when
// defined, is (Co). Lowered to one im2col + GEMM across the whole batch; the
// column matrix is rebuilt in the backward pass rather than kept alive.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 std::array<long, 2> stride, std::array<long, 2> pad) {
  if (x.rank() != 4 || weight.rank() != 4)
    throw ShapeError("conv2d: expected 4-d input and weight, got " +
                     shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  const long b = x.extent(0), ci = x.extent(1), h = x.extent(2), w = x.extent(3);
  const long co = weight.extent(0), kh = weight.extent(2), kw = weight.extent(3);
  if (weight.extent(1) != ci)
    throw ShapeError("conv2d: input channels " + std::to_string(ci) +
                     " != weight channels " + std::to_string(weight.extent(1)) +
                     " (input " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()) + ")");
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != co))
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(co) + " output channels");
  const long oh = detail::conv_extent("conv2d", h, kh, stride[0], pad[0]);
  const long ow = detail::conv_extent("conv2d", w, kw, stride[1], pad[1]);
  const long kdim = ci * kh * kw;
  const long cols = b * oh * ow;

  std::vector<S> col(size_t(kdim * cols));
  detail::im2col_2d(x.values().data(), b, ci, h, w, kh, kw, stride[0], stride[1],
                    pad[0], pad[1], oh, ow, col.data());
  // GEMM result is (Co, B*OH*OW); reorder into (B, Co, OH, OW).
  std::vector<S> gemm(size_t(co * cols));
  MapRM<S>(gemm.data(), co, cols).noalias() =
      CMapRM<S>(weight.values().data(), co, kdim) * CMapRM<S>(col.data(), kdim, cols);
  std::vector<S> out(size_t(b * co * oh * ow));
  const long hw = oh * ow;
  for (long bb = 0; bb < b; ++bb)
    for (long c = 0; c < co; ++c) {
      const S* src = gemm.data() + c * cols + bb * hw;
      S* dst = out.data() + (bb * co + c) * hw;
      const S add = bias.defined() ? bias.values()[size_t(c)] : S(0);
      for (long i = 0; i < hw; ++i) dst[i] = src[i] + add;
    }

  auto xi = x.impl();
  auto wi = weight.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const std::array<long, 2> st = stride, pd = pad;
  return detail::make_node<S>(
      "conv2d", {b, co, oh, ow}, std::move(out), std::move(inputs),
      [xi, wi, bi, b, ci, h, w, co, kh, kw, st, pd, oh, ow, kdim,
       cols](const TensorImpl<S>& self) {
        const long hw = oh * ow;
        // Gather grad into (Co, B*OH*OW) layout.
        std::vector<S> gmat(size_t(co * cols));
        for (long bb = 0; bb < b; ++bb)
          for (long c = 0; c < co; ++c)
            std::memcpy(gmat.data() + c * cols + bb * hw,
                        self.grad.data() + (bb * co + c) * hw,
                        size_t(hw) * sizeof(S));
        if (bi && bi->requires_grad) {
          bi->ensure_grad();
          for (long c = 0; c < co; ++c) {
            S acc = S(0);
            const S* g = gmat.data() + c * cols;
            for (long i = 0; i < cols; ++i) acc += g[i];
            bi->grad[size_t(c)] += acc;
          }
        }
        if (wi->requires_grad) {
          std::vector<S> col(size_t(kdim * cols));
          detail::im2col_2d(xi->data.data(), b, ci, h, w, kh, kw, st[0], st[1], pd[0],
                            pd[1], oh, ow, col.data());
          wi->ensure_grad();
          MapRM<S>(wi->grad.data(), co, kdim).noalias() +=
              CMapRM<S>(gmat.data(), co, cols) *
              CMapRM<S>(col.data(), kdim, cols).transpose();
        }
        if (xi->requires_grad) {
          std::vector<S> dcol(size_t(kdim * cols));
          MapRM<S>(dcol.data(), kdim, cols).noalias() =
              CMapRM<S>(wi->data.data(), co, kdim).transpose() *
              CMapRM<S>(gmat.data(), co, cols);
          xi->ensure_grad();
          detail::col2im_2d_add(dcol.data(), b, ci, h, w, kh, kw, st[0], st[1], pd[0],
                                pd[1], oh, ow, xi->grad.data());
        }
      });
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 long stride = 1, long pad = 0) {
  return conv2d(x, weight, bias, {stride, stride}, {pad, pad});
}

// 3D convolution over an NCDHW batch (depth = time). weight is
// (Co, Ci, kt, kh, kw). Lowered per batch item.
template <typename S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 std::array<long, 3> stride, std::array<long, 3> pad) {
  if (x.rank() != 5 || weight.rank() != 5)
    throw ShapeError("conv3d: expected 5-d input and weight, got " +
                     shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  const long b = x.extent(0), ci = x.extent(1), t = x.extent(2), h = x.extent(3),
             w = x.extent(4);
  const long co = weight.extent(0), kt = weight.extent(2), kh = weight.extent(3),
             kw = weight.extent(4);
  if (weight.extent(1) != ci)
    throw ShapeError("conv3d: input channels " + std::to_string(ci) +
                     " != weight channels " + std::to_string(weight.extent(1)));
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != co))
    throw ShapeError("conv3d: bias shape " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(co) + " output channels");
  const long ot = detail::conv_extent("conv3d", t, kt, stride[0], pad[0]);
  const long oh = detail::conv_extent("conv3d", h, kh, stride[1], pad[1]);
  const long ow = detail::conv_extent("conv3d", w, kw, stride[2], pad[2]);
  const long kdim = ci * kt * kh * kw;
  const long cols = ot * oh * ow;

  std::vector<S> out(size_t(b * co * cols));
  {
    std::vector<S> col(size_t(kdim * cols));
    for (long bb = 0; bb < b; ++bb) {
      detail::im2col_3d(x.values().data() + bb * ci * t * h * w, ci, t, h, w, kt, kh,
                        kw, stride[0], stride[1], stride[2], pad[0], pad[1], pad[2],
                        ot, oh, ow, col.data());
      MapRM<S>(out.data() + bb * co * cols, co, cols).noalias() =
          CMapRM<S>(weight.values().data(), co, kdim) *
          CMapRM<S>(col.data(), kdim, cols);
    }
  }
  if (bias.defined()) {
    for (long bb = 0; bb < b; ++bb)
      for (long c = 0; c < co; ++c) {
        S* dst = out.data() + (bb * co + c) * cols;
        const S add = bias.values()[size_t(c)];
        for (long i = 0; i < cols; ++i) dst[i] += add;
      }
  }

  auto xi = x.impl();
  auto wi = weight.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const std::array<long, 3> st = stride, pd = pad;
  return detail::make_node<S>(
      "conv3d", {b, co, ot, oh, ow}, std::move(out), std::move(inputs),
      [xi, wi, bi, b, ci, t, h, w, co, kt, kh, kw, st, pd, ot, oh, ow, kdim,
       cols](const TensorImpl<S>& self) {
        if (bi && bi->requires_grad) {
          bi->ensure_grad();
          for (long bb = 0; bb < b; ++bb)
            for (long c = 0; c < co; ++c) {
              S acc = S(0);
              const S* g = self.grad.data() + (bb * co + c) * cols;
              for (long i = 0; i < cols; ++i) acc += g[i];
              bi->grad[size_t(c)] += acc;
            }
        }
        if (!wi->requires_grad && !xi->requires_grad) return;
        std::vector<S> col(size_t(kdim * cols));
        std::vector<S> dcol;
        if (xi->requires_grad) {
          dcol.resize(size_t(kdim * cols));
          xi->ensure_grad();
        }
        if (wi->requires_grad) wi->ensure_grad();
        for (long bb = 0; bb < b; ++bb) {
          CMapRM<S> g(self.grad.data() + bb * co * cols, co, cols);
          if (wi->requires_grad) {
            detail::im2col_3d(xi->data.data() + bb * ci * t * h * w, ci, t, h, w, kt,
                              kh, kw, st[0], st[1], st[2], pd[0], pd[1], pd[2], ot,
                              oh, ow, col.data());
            MapRM<S>(wi->grad.data(), co, kdim).noalias() +=
                g * CMapRM<S>(col.data(), kdim, cols).transpose();
          }
          if (xi->requires_grad) {
            MapRM<S>(dcol.data(), kdim, cols).noalias() =
                CMapRM<S>(wi->data.data(), co, kdim).transpose() * g;
            detail::col2im_3d_add(dcol.data(), ci, t, h, w, kt, kh, kw, st[0], st[1],
                                  st[2], pd[0], pd[1], pd[2], ot, oh, ow,
                                  xi->grad.data() + bb * ci * t * h * w);
          }
        }
      });
}

// Spatial max pooling over an NCHW batch, window k x k, stride s.
template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x, long k, long s) {
  if (x.rank() != 4)
    throw ShapeError("maxpool2d: expected 4-d input, got " + shape_str(x.shape()));
  const long b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const long oh = detail::conv_extent("maxpool2d", h, k, s, 0);
  const long ow = detail::conv_extent("maxpool2d", w, k, s, 0);
  std::vector<S> out(size_t(b * c * oh * ow));
  auto argmax = std::make_shared<std::vector<long>>(out.size());
  const S lowest = std::numeric_limits<S>::lowest();
  for (long n = 0; n < b * c; ++n) {
    const S* img = x.values().data() + n * h * w;
    for (long i = 0; i < oh; ++i)
      for (long j = 0; j < ow; ++j) {
        S best = lowest;
        long best_idx = 0;
        for (long ki = 0; ki < k; ++ki)
          for (long kj = 0; kj < k; ++kj) {
            const long yy = i * s + ki, xx = j * s + kj;
            const S v = img[yy * w + xx];
            if (v > best) {
              best = v;
              best_idx = n * h * w + yy * w + xx;
            }
          }
        const long o = (n * oh + i) * ow + j;
        out[size_t(o)] = best;
        (*argmax)[size_t(o)] = best_idx;
      }
  }
  auto xi = x.impl();
  return detail::make_node<S>("maxpool2d", {b, c, oh, ow}, std::move(out), {x},
                              [xi, argmax](const TensorImpl<S>& self) {
                                if (!xi->requires_grad) return;
                                xi->ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  xi->grad[size_t((*argmax)[i])] += self.grad[i];
                              });
}

}  // namespace mimseq
