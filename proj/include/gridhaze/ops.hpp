#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gridhaze/tape.hpp"
#include "gridhaze/tensor.hpp"

namespace gridhaze {

namespace detail {

inline std::int64_t conv_out_dim(std::int64_t in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// out[b,oc,:,:] += sum_ic x[b,ic,:,:] (*) w[oc,ic,:,:], cross-correlation.
template <typename T>
void conv2d_forward_kernel(const Shape& xs, const T* x, const Shape& ws, const T* w,
                           const T* bias, int stride, int pad, const Shape& os, T* out) {
  const int ci = ws.c, k = ws.h;
  parallel_for(static_cast<std::int64_t>(os.n) * os.c, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t idx = lo; idx < hi; ++idx) {
      const int b = static_cast<int>(idx / os.c);
      const int oc = static_cast<int>(idx % os.c);
      T* op = out + idx * os.h * os.w;
      const T bv = bias ? bias[oc] : T(0);
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(os.h) * os.w; ++i) op[i] = bv;
      for (int ic = 0; ic < ci; ++ic) {
        const T* xp = x + ((static_cast<std::int64_t>(b) * ci + ic) * xs.h) * xs.w;
        const T* wp = w + ((static_cast<std::int64_t>(oc) * ci + ic) * k) * k;
        for (int kh = 0; kh < k; ++kh) {
          for (int kw = 0; kw < k; ++kw) {
            const T wv = wp[kh * k + kw];
            if (wv == T(0)) continue;
            for (int oh = 0; oh < os.h; ++oh) {
              const int ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= xs.h) continue;
              const T* xrow = xp + static_cast<std::int64_t>(ih) * xs.w;
              T* orow = op + static_cast<std::int64_t>(oh) * os.w;
              // ow range with iw = ow*stride - pad + kw inside [0, w)
              int ow_lo = 0;
              const int off = kw - pad;
              if (off < 0) ow_lo = (-off + stride - 1) / stride;
              int ow_hi = os.w;
              // last ow with ow*stride + off <= xs.w - 1
              const int max_ow = (xs.w - 1 - off) / stride;
              if (max_ow + 1 < ow_hi) ow_hi = max_ow + 1;
              if (stride == 1) {
                const T* xr = xrow + off;
                for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * xr[ow];
              } else {
                for (int ow = ow_lo; ow < ow_hi; ++ow)
                  orow[ow] += wv * xrow[ow * stride + off];
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
void conv2d_backward_input(const Shape& xs, T* dx, const Shape& ws, const T* w,
                           int stride, int pad, const Shape& os, const T* dout) {
  const int ci = ws.c, k = ws.h, co = ws.n;
  parallel_for(xs.n, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t b = lo; b < hi; ++b) {
      for (int oc = 0; oc < co; ++oc) {
        const T* gp = dout + ((b * os.c + oc) * os.h) * static_cast<std::int64_t>(os.w);
        for (int ic = 0; ic < ci; ++ic) {
          T* dxp = dx + ((b * ci + ic) * xs.h) * static_cast<std::int64_t>(xs.w);
          const T* wp = w + ((static_cast<std::int64_t>(oc) * ci + ic) * k) * k;
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              const T wv = wp[kh * k + kw];
              if (wv == T(0)) continue;
              const int off = kw - pad;
              int ow_lo = 0;
              if (off < 0) ow_lo = (-off + stride - 1) / stride;
              int ow_hi = os.w;
              const int max_ow = (xs.w - 1 - off) / stride;
              if (max_ow + 1 < ow_hi) ow_hi = max_ow + 1;
              for (int oh = 0; oh < os.h; ++oh) {
                const int ih = oh * stride - pad + kh;
                if (ih < 0 || ih >= xs.h) continue;
                const T* grow = gp + static_cast<std::int64_t>(oh) * os.w;
                T* dxrow = dxp + static_cast<std::int64_t>(ih) * xs.w;
                if (stride == 1) {
                  T* dxr = dxrow + off;
                  for (int ow = ow_lo; ow < ow_hi; ++ow) dxr[ow] += wv * grow[ow];
                } else {
                  for (int ow = ow_lo; ow < ow_hi; ++ow)
                    dxrow[ow * stride + off] += wv * grow[ow];
                }
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
void conv2d_backward_weight(const Shape& xs, const T* x, const Shape& ws, T* dw,
                            int stride, int pad, const Shape& os, const T* dout) {
  const int ci = ws.c, k = ws.h;
  parallel_for(ws.n, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t oc = lo; oc < hi; ++oc) {
      for (int b = 0; b < xs.n; ++b) {
        const T* gp = dout + ((static_cast<std::int64_t>(b) * os.c + oc) * os.h) * os.w;
        for (int ic = 0; ic < ci; ++ic) {
          const T* xp = x + ((static_cast<std::int64_t>(b) * ci + ic) * xs.h) * xs.w;
          T* dwp = dw + ((oc * ci + ic) * k) * k;
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              const int off = kw - pad;
              int ow_lo = 0;
              if (off < 0) ow_lo = (-off + stride - 1) / stride;
              int ow_hi = os.w;
              const int max_ow = (xs.w - 1 - off) / stride;
              if (max_ow + 1 < ow_hi) ow_hi = max_ow + 1;
              T acc = T(0);
              for (int oh = 0; oh < os.h; ++oh) {
                const int ih = oh * stride - pad + kh;
                if (ih < 0 || ih >= xs.h) continue;
                const T* grow = gp + static_cast<std::int64_t>(oh) * os.w;
                const T* xrow = xp + static_cast<std::int64_t>(ih) * xs.w;
                if (stride == 1) {
                  const T* xr = xrow + off;
                  for (int ow = ow_lo; ow < ow_hi; ++ow) acc += grow[ow] * xr[ow];
                } else {
                  for (int ow = ow_lo; ow < ow_hi; ++ow)
                    acc += grow[ow] * xrow[ow * stride + off];
                }
              }
              dwp[kh * k + kw] += acc;
            }
          }
        }
      }
    }
  });
}

template <typename T>
void reduce_bias_grad(const Shape& os, const T* dout, T* dbias) {
  parallel_for(os.c, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t oc = lo; oc < hi; ++oc) {
      T acc = T(0);
      for (int b = 0; b < os.n; ++b) {
        const T* gp = dout + ((static_cast<std::int64_t>(b) * os.c + oc) * os.h) * os.w;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(os.h) * os.w; ++i) acc += gp[i];
      }
      dbias[oc] += acc;
    }
  });
}

}  // namespace detail

// Cross-correlation with weight (c_out, c_in, k, k) and bias (1, c_out, 1, 1).
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b, int stride, int padding) {
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require(ws.h == ws.w, "conv2d: kernel must be square, got " + ws.str());
  require(xs.c == ws.c, "conv2d: input has " + std::to_string(xs.c) +
                            " channels but weight " + ws.str() + " expects " +
                            std::to_string(ws.c));
  require(b.shape() == Shape{1, ws.n, 1, 1},
          "conv2d: bias shape " + b.shape().str() + " must be (1," +
              std::to_string(ws.n) + ",1,1)");
  const int k = ws.h;
  const std::int64_t oh = detail::conv_out_dim(xs.h, k, stride, padding);
  const std::int64_t ow = detail::conv_out_dim(xs.w, k, stride, padding);
  require(oh >= 1 && ow >= 1,
          "conv2d: input " + xs.str() + " with kernel " + std::to_string(k) +
              " stride " + std::to_string(stride) + " padding " +
              std::to_string(padding) + " yields empty output");
  const Shape os{xs.n, ws.n, static_cast<int>(oh), static_cast<int>(ow)};

  const bool track = x.tracked() || w.tracked() || b.tracked();
  Tensor<T> out = detail::make_op_output(tape, os, track);
  detail::conv2d_forward_kernel(xs, x.data().data(), ws, w.data().data(),
                                b.data().data(), stride, padding, os,
                                out.data().data());
  if (out.tracked()) {
    auto xst = x.st(), wst = w.st(), bst = b.st(), ost = out.st();
    tape.record(OpKind::Conv2d, {xst, wst, bst}, ost,
                [xst, wst, bst, ost, stride, padding]() {
                  const T* g = ost->grad.data();
                  if (xst->tracked)
                    detail::conv2d_backward_input(xst->shape, xst->grad.data(), wst->shape,
                                                  wst->data.data(), stride, padding,
                                                  ost->shape, g);
                  if (wst->tracked)
                    detail::conv2d_backward_weight(xst->shape, xst->data.data(), wst->shape,
                                                   wst->grad.data(), stride, padding,
                                                   ost->shape, g);
                  if (bst->tracked)
                    detail::reduce_bias_grad(ost->shape, g, bst->grad.data());
                });
  }
  return out;
}

// Adjoint of conv2d as a linear map: weight (c_in, c_out, k, k) where c_in is
// the channel count of x. out spatial dim = (in-1)*stride - 2*pad + k + out_padding.
template <typename T>
Tensor<T> transposed_conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<T>& b, int stride, int padding,
                            int out_padding = 0) {
  require(stride >= 1, "transposed_conv2d: stride must be >= 1");
  require(padding >= 0 && out_padding >= 0 && out_padding < stride,
          "transposed_conv2d: need padding >= 0 and 0 <= out_padding < stride");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require(ws.h == ws.w, "transposed_conv2d: kernel must be square, got " + ws.str());
  require(xs.c == ws.n, "transposed_conv2d: input has " + std::to_string(xs.c) +
                            " channels but weight " + ws.str() + " expects " +
                            std::to_string(ws.n));
  const int k = ws.h, co = ws.c;
  require(b.shape() == Shape{1, co, 1, 1},
          "transposed_conv2d: bias shape " + b.shape().str() + " must be (1," +
              std::to_string(co) + ",1,1)");
  const std::int64_t oh = static_cast<std::int64_t>(xs.h - 1) * stride - 2 * padding + k + out_padding;
  const std::int64_t ow = static_cast<std::int64_t>(xs.w - 1) * stride - 2 * padding + k + out_padding;
  require(oh >= 1 && ow >= 1, "transposed_conv2d: input " + xs.str() + " yields empty output");
  const Shape os{xs.n, co, static_cast<int>(oh), static_cast<int>(ow)};

  const bool track = x.tracked() || w.tracked() || b.tracked();
  Tensor<T> out = detail::make_op_output(tape, os, track);

  // Forward scatter: out[b,oc, ih*s-p+kh, iw*s-p+kw] += x[b,ic,ih,iw] * w[ic,oc,kh,kw]
  {
    const T* xp = x.data().data();
    const T* wp = w.data().data();
    const T* bp = b.data().data();
    T* op = out.data().data();
    const int ci = xs.c;
    parallel_for(static_cast<std::int64_t>(os.n) * co, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t idx = lo; idx < hi; ++idx) {
        const int bn = static_cast<int>(idx / co);
        const int oc = static_cast<int>(idx % co);
        T* oplane = op + idx * os.h * os.w;
        const T bv = bp[oc];
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(os.h) * os.w; ++i) oplane[i] = bv;
        for (int ic = 0; ic < ci; ++ic) {
          const T* xplane = xp + ((static_cast<std::int64_t>(bn) * ci + ic) * xs.h) * xs.w;
          const T* wk = wp + ((static_cast<std::int64_t>(ic) * co + oc) * k) * k;
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              const T wv = wk[kh * k + kw];
              if (wv == T(0)) continue;
              for (int ih = 0; ih < xs.h; ++ih) {
                const int out_h = ih * stride - padding + kh;
                if (out_h < 0 || out_h >= os.h) continue;
                const T* xrow = xplane + static_cast<std::int64_t>(ih) * xs.w;
                T* orow = oplane + static_cast<std::int64_t>(out_h) * os.w;
                for (int iw = 0; iw < xs.w; ++iw) {
                  const int out_w = iw * stride - padding + kw;
                  if (out_w < 0 || out_w >= os.w) continue;
                  orow[out_w] += wv * xrow[iw];
                }
              }
            }
          }
        }
      }
    });
  }

  if (out.tracked()) {
    auto xst = x.st(), wst = w.st(), bst = b.st(), ost = out.st();
    tape.record(OpKind::TransposedConv2d, {xst, wst, bst}, ost,
                [xst, wst, bst, ost, stride, padding]() {
                  const Shape& xsh = xst->shape;
                  const Shape& wsh = wst->shape;
                  const Shape& osh = ost->shape;
                  const int k = wsh.h, ci = xsh.c, co = wsh.c;
                  const T* g = ost->grad.data();
                  if (xst->tracked) {
                    // dx[b,ic,ih,iw] = sum_{oc,kh,kw} w[ic,oc,kh,kw] * g[b,oc,ih*s-p+kh,...]
                    T* dx = xst->grad.data();
                    const T* wp = wst->data.data();
                    parallel_for(xsh.n, [&](std::int64_t lo, std::int64_t hi) {
                      for (std::int64_t bn = lo; bn < hi; ++bn) {
                        for (int ic = 0; ic < ci; ++ic) {
                          T* dxp = dx + ((bn * ci + ic) * xsh.h) * static_cast<std::int64_t>(xsh.w);
                          for (int oc = 0; oc < co; ++oc) {
                            const T* gp = g + ((bn * co + oc) * osh.h) * static_cast<std::int64_t>(osh.w);
                            const T* wk = wp + ((static_cast<std::int64_t>(ic) * co + oc) * k) * k;
                            for (int kh = 0; kh < k; ++kh) {
                              for (int kw = 0; kw < k; ++kw) {
                                const T wv = wk[kh * k + kw];
                                if (wv == T(0)) continue;
                                for (int ih = 0; ih < xsh.h; ++ih) {
                                  const int oh = ih * stride - padding + kh;
                                  if (oh < 0 || oh >= osh.h) continue;
                                  const T* grow = gp + static_cast<std::int64_t>(oh) * osh.w;
                                  T* dxrow = dxp + static_cast<std::int64_t>(ih) * xsh.w;
                                  for (int iw = 0; iw < xsh.w; ++iw) {
                                    const int ow = iw * stride - padding + kw;
                                    if (ow < 0 || ow >= osh.w) continue;
                                    dxrow[iw] += wv * grow[ow];
                                  }
                                }
                              }
                            }
                          }
                        }
                      }
                    });
                  }
                  if (wst->tracked) {
                    // dw[ic,oc,kh,kw] = sum_{b,ih,iw} x[b,ic,ih,iw] * g[b,oc,...]
                    T* dw = wst->grad.data();
                    const T* xp = xst->data.data();
                    parallel_for(ci, [&](std::int64_t lo, std::int64_t hi) {
                      for (std::int64_t ic = lo; ic < hi; ++ic) {
                        for (int oc = 0; oc < co; ++oc) {
                          T* dwk = dw + ((ic * co + oc) * k) * static_cast<std::int64_t>(k);
                          for (int bn = 0; bn < xsh.n; ++bn) {
                            const T* xplane = xp + ((static_cast<std::int64_t>(bn) * ci + ic) * xsh.h) * xsh.w;
                            const T* gp = g + ((static_cast<std::int64_t>(bn) * co + oc) * osh.h) * osh.w;
                            for (int kh = 0; kh < k; ++kh) {
                              for (int kw = 0; kw < k; ++kw) {
                                T acc = T(0);
                                for (int ih = 0; ih < xsh.h; ++ih) {
                                  const int oh = ih * stride - padding + kh;
                                  if (oh < 0 || oh >= osh.h) continue;
                                  const T* xrow = xplane + static_cast<std::int64_t>(ih) * xsh.w;
                                  const T* grow = gp + static_cast<std::int64_t>(oh) * osh.w;
                                  for (int iw = 0; iw < xsh.w; ++iw) {
                                    const int ow = iw * stride - padding + kw;
                                    if (ow < 0 || ow >= osh.w) continue;
                                    acc += xrow[iw] * grow[ow];
                                  }
                                }
                                dwk[kh * k + kw] += acc;
                              }
                            }
                          }
                        }
                      }
                    });
                  }
                  if (bst->tracked) detail::reduce_bias_grad(osh, g, bst->grad.data());
                });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out = detail::make_op_output(tape, x.shape(), x.tracked());
  const T* xp = x.data().data();
  T* op = out.data().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
  if (out.tracked()) {
    auto xst = x.st(), ost = out.st();
    tape.record(OpKind::Relu, {xst}, ost, [xst, ost]() {
      const std::int64_t n = static_cast<std::int64_t>(xst->data.size());
      for (std::int64_t i = 0; i < n; ++i)
        if (xst->data[i] > T(0)) xst->grad[i] += ost->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out = detail::make_op_output(tape, x.shape(), x.tracked());
  const T* xp = x.data().data();
  T* op = out.data().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = xp[i];
    if (v >= T(0)) {
      const T e = std::exp(-v);
      op[i] = T(1) / (T(1) + e);
    } else {
      const T e = std::exp(v);
      op[i] = e / (T(1) + e);
    }
  }
  if (out.tracked()) {
    auto xst = x.st(), ost = out.st();
    tape.record(OpKind::Sigmoid, {xst}, ost, [xst, ost]() {
      const std::int64_t n = static_cast<std::int64_t>(xst->data.size());
      for (std::int64_t i = 0; i < n; ++i) {
        const T y = ost->data[i];
        xst->grad[i] += ost->grad[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

namespace detail {
template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      a.shape().str() + " vs " + b.shape().str());
}
}  // namespace detail

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out = detail::make_op_output(tape, a.shape(), a.tracked() || b.tracked());
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  if (out.tracked()) {
    auto ast = a.st(), bst = b.st(), ost = out.st();
    tape.record(OpKind::Add, {ast, bst}, ost, [ast, bst, ost]() {
      const std::int64_t n = static_cast<std::int64_t>(ost->grad.size());
      if (ast->tracked)
        for (std::int64_t i = 0; i < n; ++i) ast->grad[i] += ost->grad[i];
      if (bst->tracked)
        for (std::int64_t i = 0; i < n; ++i) bst->grad[i] += ost->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out = detail::make_op_output(tape, a.shape(), a.tracked() || b.tracked());
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] - bp[i];
  if (out.tracked()) {
    auto ast = a.st(), bst = b.st(), ost = out.st();
    tape.record(OpKind::Sub, {ast, bst}, ost, [ast, bst, ost]() {
      const std::int64_t n = static_cast<std::int64_t>(ost->grad.size());
      if (ast->tracked)
        for (std::int64_t i = 0; i < n; ++i) ast->grad[i] += ost->grad[i];
      if (bst->tracked)
        for (std::int64_t i = 0; i < n; ++i) bst->grad[i] -= ost->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out = detail::make_op_output(tape, a.shape(), a.tracked() || b.tracked());
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
  if (out.tracked()) {
    auto ast = a.st(), bst = b.st(), ost = out.st();
    tape.record(OpKind::Mul, {ast, bst}, ost, [ast, bst, ost]() {
      const std::int64_t n = static_cast<std::int64_t>(ost->grad.size());
      if (ast->tracked)
        for (std::int64_t i = 0; i < n; ++i) ast->grad[i] += ost->grad[i] * bst->data[i];
      if (bst->tracked)
        for (std::int64_t i = 0; i < n; ++i) bst->grad[i] += ost->grad[i] * ast->data[i];
    });
  }
  return out;
}

// Multiply by a compile-time-constant scalar (not a tracked quantity).
template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  Tensor<T> out = detail::make_op_output(tape, x.shape(), x.tracked());
  const T* xp = x.data().data();
  T* op = out.data().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) op[i] = xp[i] * factor;
  if (out.tracked()) {
    auto xst = x.st(), ost = out.st();
    tape.record(OpKind::Scale, {xst}, ost, [xst, ost, factor]() {
      const std::int64_t n = static_cast<std::int64_t>(xst->grad.size());
      for (std::int64_t i = 0; i < n; ++i) xst->grad[i] += ost->grad[i] * factor;
    });
  }
  return out;
}

// Per-channel scaling. weights has shape (1, C, 1, 1) matching x's channel
// count, or (1, 1, 1, 1) for a single shared scalar.
template <typename T>
Tensor<T> scale_channel(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weights) {
  const Shape& xs = x.shape();
  const Shape& ws = weights.shape();
  require(ws.n == 1 && ws.h == 1 && ws.w == 1 && (ws.c == xs.c || ws.c == 1),
          "scale_channel: weights " + ws.str() + " incompatible with input " + xs.str());
  const bool shared = (ws.c == 1 && xs.c != 1);
  Tensor<T> out = detail::make_op_output(tape, xs, x.tracked() || weights.tracked());
  const T* xp = x.data().data();
  const T* wp = weights.data().data();
  T* op = out.data().data();
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  for (int b = 0; b < xs.n; ++b) {
    for (int c = 0; c < xs.c; ++c) {
      const T wv = wp[shared ? 0 : c];
      const std::int64_t base = (static_cast<std::int64_t>(b) * xs.c + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) op[base + i] = xp[base + i] * wv;
    }
  }
  if (out.tracked()) {
    auto xst = x.st(), wst = weights.st(), ost = out.st();
    tape.record(OpKind::ScaleChannel, {xst, wst}, ost, [xst, wst, ost, shared]() {
      const Shape& xs = xst->shape;
      const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
      for (int b = 0; b < xs.n; ++b) {
        for (int c = 0; c < xs.c; ++c) {
          const std::int64_t base = (static_cast<std::int64_t>(b) * xs.c + c) * plane;
          const int wi = shared ? 0 : c;
          if (xst->tracked) {
            const T wv = wst->data[wi];
            for (std::int64_t i = 0; i < plane; ++i)
              xst->grad[base + i] += ost->grad[base + i] * wv;
          }
          if (wst->tracked) {
            T acc = T(0);
            for (std::int64_t i = 0; i < plane; ++i)
              acc += ost->grad[base + i] * xst->data[base + i];
            wst->grad[wi] += acc;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.n == bs.n && as.h == bs.h && as.w == bs.w,
          "concat_channels: mismatched (n,h,w) between " + as.str() + " and " + bs.str());
  const Shape os{as.n, as.c + bs.c, as.h, as.w};
  Tensor<T> out = detail::make_op_output(tape, os, a.tracked() || b.tracked());
  const std::int64_t plane = static_cast<std::int64_t>(as.h) * as.w;
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  for (int n = 0; n < as.n; ++n) {
    std::copy(ap + n * as.c * plane, ap + (n + 1) * as.c * plane,
              op + static_cast<std::int64_t>(n) * os.c * plane);
    std::copy(bp + n * bs.c * plane, bp + (n + 1) * bs.c * plane,
              op + (static_cast<std::int64_t>(n) * os.c + as.c) * plane);
  }
  if (out.tracked()) {
    auto ast = a.st(), bst = b.st(), ost = out.st();
    tape.record(OpKind::ConcatChannels, {ast, bst}, ost, [ast, bst, ost]() {
      const Shape& as = ast->shape;
      const Shape& bs = bst->shape;
      const Shape& os = ost->shape;
      const std::int64_t plane = static_cast<std::int64_t>(as.h) * as.w;
      for (int n = 0; n < as.n; ++n) {
        const T* g0 = ost->grad.data() + static_cast<std::int64_t>(n) * os.c * plane;
        if (ast->tracked) {
          T* da = ast->grad.data() + static_cast<std::int64_t>(n) * as.c * plane;
          for (std::int64_t i = 0; i < as.c * plane; ++i) da[i] += g0[i];
        }
        if (bst->tracked) {
          T* db = bst->grad.data() + static_cast<std::int64_t>(n) * bs.c * plane;
          const T* g1 = g0 + static_cast<std::int64_t>(as.c) * plane;
          for (std::int64_t i = 0; i < bs.c * plane; ++i) db[i] += g1[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& x, int first, int count) {
  const Shape& xs = x.shape();
  require(first >= 0 && count >= 1 && first + count <= xs.c,
          "slice_channels: range [" + std::to_string(first) + "," +
              std::to_string(first + count) + ") out of bounds for " + xs.str());
  const Shape os{xs.n, count, xs.h, xs.w};
  Tensor<T> out = detail::make_op_output(tape, os, x.tracked());
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const T* xp = x.data().data();
  T* op = out.data().data();
  for (int n = 0; n < xs.n; ++n)
    std::copy(xp + (static_cast<std::int64_t>(n) * xs.c + first) * plane,
              xp + (static_cast<std::int64_t>(n) * xs.c + first + count) * plane,
              op + static_cast<std::int64_t>(n) * count * plane);
  if (out.tracked()) {
    auto xst = x.st(), ost = out.st();
    tape.record(OpKind::SliceChannels, {xst}, ost, [xst, ost, first, count]() {
      const Shape& xs = xst->shape;
      const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
      for (int n = 0; n < xs.n; ++n) {
        T* dx = xst->grad.data() + (static_cast<std::int64_t>(n) * xs.c + first) * plane;
        const T* g = ost->grad.data() + static_cast<std::int64_t>(n) * count * plane;
        for (std::int64_t i = 0; i < count * plane; ++i) dx[i] += g[i];
      }
    });
  }
  return out;
}

// Mean over every element; returns a (1,1,1,1) scalar.
template <typename T>
Tensor<T> mean_all(Tape<T>& tape, const Tensor<T>& x) {
  require(x.size() > 0, "mean_all: empty tensor");
  Tensor<T> out = detail::make_op_output(tape, {1, 1, 1, 1}, x.tracked());
  const T* xp = x.data().data();
  const std::int64_t n = x.size();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) acc += xp[i];
  out.data()[0] = acc / static_cast<T>(n);
  if (out.tracked()) {
    auto xst = x.st(), ost = out.st();
    tape.record(OpKind::MeanAll, {xst}, ost, [xst, ost]() {
      const std::int64_t n = static_cast<std::int64_t>(xst->data.size());
      const T g = ost->grad[0] / static_cast<T>(n);
      for (std::int64_t i = 0; i < n; ++i) xst->grad[i] += g;
    });
  }
  return out;
}

// Mean over the spatial dims only: (n,c,h,w) -> (n,c,1,1).
template <typename T>
Tensor<T> mean_spatial(Tape<T>& tape, const Tensor<T>& x) {
  const Shape& xs = x.shape();
  require(xs.h * xs.w > 0, "mean_spatial: empty spatial extent");
  const Shape os{xs.n, xs.c, 1, 1};
  Tensor<T> out = detail::make_op_output(tape, os, x.tracked());
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const T* xp = x.data().data();
  T* op = out.data().data();
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(xs.n) * xs.c; ++p) {
    T acc = T(0);
    for (std::int64_t i = 0; i < plane; ++i) acc += xp[p * plane + i];
    op[p] = acc / static_cast<T>(plane);
  }
  if (out.tracked()) {
    auto xst = x.st(), ost = out.st();
    tape.record(OpKind::MeanSpatial, {xst}, ost, [xst, ost]() {
      const Shape& xs = xst->shape;
      const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
      for (std::int64_t p = 0; p < static_cast<std::int64_t>(xs.n) * xs.c; ++p) {
        const T g = ost->grad[p] / static_cast<T>(plane);
        for (std::int64_t i = 0; i < plane; ++i) xst->grad[p * plane + i] += g;
      }
    });
  }
  return out;
}

// Elementwise smooth-L1 kernel: 0.5 e^2 for |e| < 1, |e| - 0.5 otherwise.
template <typename T>
Tensor<T> huber(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out = detail::make_op_output(tape, x.shape(), x.tracked());
  const T* xp = x.data().data();
  T* op = out.data().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const T e = xp[i];
    const T a = std::abs(e);
    op[i] = a < T(1) ? T(0.5) * e * e : a - T(0.5);
  }
  if (out.tracked()) {
    auto xst = x.st(), ost = out.st();
    tape.record(OpKind::Huber, {xst}, ost, [xst, ost]() {
      const std::int64_t n = static_cast<std::int64_t>(xst->data.size());
      for (std::int64_t i = 0; i < n; ++i) {
        const T e = xst->data[i];
        const T d = std::abs(e) < T(1) ? e : (e > T(0) ? T(1) : T(-1));
        xst->grad[i] += ost->grad[i] * d;
      }
    });
  }
  return out;
}

// Scattering-model inversion J = (I - A*(1 - t')) / t' with t' = max(t, t_floor).
// hazy: (n,C,h,w), t: (n,1,h,w), airlight: (n,1,1,1). Output is not clamped;
// clamping is an inference-time concern.
template <typename T>
Tensor<T> invert_haze_op(Tape<T>& tape, const Tensor<T>& hazy, const Tensor<T>& t,
                         const Tensor<T>& airlight, T t_floor) {
  const Shape& is = hazy.shape();
  const Shape& ts = t.shape();
  require(t_floor > T(0), "invert_haze_op: t_floor must be positive");
  require(ts.n == is.n && ts.c == 1 && ts.h == is.h && ts.w == is.w,
          "invert_haze_op: transmission " + ts.str() + " incompatible with image " + is.str());
  require(airlight.shape() == Shape{is.n, 1, 1, 1},
          "invert_haze_op: airlight must be (n,1,1,1), got " + airlight.shape().str());
  const bool track = hazy.tracked() || t.tracked() || airlight.tracked();
  Tensor<T> out = detail::make_op_output(tape, is, track);
  const std::int64_t plane = static_cast<std::int64_t>(is.h) * is.w;
  {
    const T* ip = hazy.data().data();
    const T* tp = t.data().data();
    const T* ap = airlight.data().data();
    T* op = out.data().data();
    for (int b = 0; b < is.n; ++b) {
      const T A = ap[b];
      const T* tpl = tp + static_cast<std::int64_t>(b) * plane;
      for (int c = 0; c < is.c; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(b) * is.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const T tv = std::max(tpl[i], t_floor);
          op[base + i] = (ip[base + i] - A) / tv + A;
        }
      }
    }
  }
  if (out.tracked()) {
    auto ist = hazy.st(), tst = t.st(), ast = airlight.st(), ost = out.st();
    tape.record(OpKind::InvertHaze, {ist, tst, ast}, ost, [ist, tst, ast, ost, t_floor]() {
      const Shape& is = ist->shape;
      const std::int64_t plane = static_cast<std::int64_t>(is.h) * is.w;
      for (int b = 0; b < is.n; ++b) {
        const T A = ast->data[b];
        const T* tpl = tst->data.data() + static_cast<std::int64_t>(b) * plane;
        T dA = T(0);
        for (int c = 0; c < is.c; ++c) {
          const std::int64_t base = (static_cast<std::int64_t>(b) * is.c + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            const T g = ost->grad[base + i];
            if (g == T(0)) continue;
            const T tv = std::max(tpl[i], t_floor);
            if (ist->tracked) ist->grad[base + i] += g / tv;
            if (tst->tracked && tpl[i] > t_floor) {
              const T I = ist->data[base + i];
              tst->grad[static_cast<std::int64_t>(b) * plane + i] += g * (-(I - A) / (tv * tv));
            }
            if (ast->tracked) dA += g * (T(1) - T(1) / tv);
          }
        }
        if (ast->tracked) ast->grad[b] += dA;
      }
    });
  }
  return out;
}

// Inference-time clamp to [0,1]; pure function, never recorded.
template <typename T>
Tensor<T> clamp01(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data().data();
  T* op = out.data().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) op[i] = std::clamp(xp[i], T(0), T(1));
  return out;
}

}  // namespace gridhaze
