#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fuseloc/blas.hpp"
#include "fuseloc/common.hpp"
#include "fuseloc/params.hpp"
#include "fuseloc/reduce.hpp"
#include "fuseloc/tensor.hpp"

// Forward and backward kernels for the fixed set of differentiable operators
// the network is assembled from. Every function is a pure mapping of
// (inputs, parameters, mode) -> outputs; batch-norm running statistics are
// advanced by an explicit separate call, never as a hidden side effect.
//
// Convention: *_backward overwrites input-gradient tensors and ACCUMULATES
// (+=) into parameter-gradient tensors, so shared parameters collect
// contributions from every use site.

namespace fuseloc {

enum class Mode { kTrain, kInfer };

inline constexpr double kBnEps = 1e-5;
inline constexpr double kLnEps = 1e-5;
inline constexpr double kBnDecay = 0.9;  // running = 0.9*running + 0.1*batch

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError("diffcore", msg);
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* kind) {
    if (!t.all_finite())
        throw ValidityError("diffcore", std::string(kind) + ": non-finite input value");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// linear: y[N,dout] = x[N,din] * w[din,dout] (+ b[dout])
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b) {
    detail::require(x.rank() == 2 && w.rank() == 2, "linear: x and w must be rank 2");
    detail::require(x.dim(1) == w.dim(0), "linear: inner dims " + std::to_string(x.dim(1)) + " vs " +
                                              std::to_string(w.dim(0)));
    const int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
    Tensor<T> y({n, dout});
    gemm<T>(false, false, n, dout, din, T(1), x.data(), din, w.data(), dout, T(0), y.data(), dout);
    if (b != nullptr) {
        detail::require(b->rank() == 1 && b->dim(0) == dout, "linear: bias dim mismatch");
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dout; ++j) y(i, j) += (*b)[j];
    }
    return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& g, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* db) {
    const int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
    detail::require(g.rank() == 2 && g.dim(0) == n && g.dim(1) == dout, "linear: upstream shape mismatch");
    if (dx != nullptr) {
        *dx = Tensor<T>({n, din});
        gemm<T>(false, true, n, din, dout, T(1), g.data(), dout, w.data(), dout, T(0), dx->data(), din);
    }
    if (dw != nullptr)
        gemm<T>(true, false, din, dout, n, T(1), x.data(), din, g.data(), dout, T(1), dw->data(), dout);
    if (db != nullptr)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dout; ++j) (*db)[j] += g(i, j);
}

// ---------------------------------------------------------------------------
// conv2d on a single channels-last image: x[H,W,Cin], kernel[kh,kw,Cin/g,Cout]
// ---------------------------------------------------------------------------

struct Conv2dSpec {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

template <typename T>
void check_conv_shapes(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* b, const Conv2dSpec& s) {
    require(x.rank() == 3, "conv2d: input must be [H,W,C], got " + x.shape_string());
    require(k.rank() == 4, "conv2d: kernel must be [kh,kw,Cin/groups,Cout], got " + k.shape_string());
    require(s.stride >= 1 && s.padding >= 0 && s.groups >= 1, "conv2d: bad stride/padding/groups");
    const int cin = x.dim(2), cout = k.dim(3);
    require(cin % s.groups == 0 && cout % s.groups == 0,
            "conv2d: channels not divisible by groups (" + std::to_string(cin) + "," +
                std::to_string(cout) + " vs g=" + std::to_string(s.groups) + ")");
    require(k.dim(2) == cin / s.groups, "conv2d: kernel input channels " + std::to_string(k.dim(2)) +
                                            " != Cin/groups " + std::to_string(cin / s.groups));
    require(x.dim(0) + 2 * s.padding >= k.dim(0) && x.dim(1) + 2 * s.padding >= k.dim(1),
            "conv2d: kernel larger than padded input");
    if (b != nullptr) require(b->rank() == 1 && b->dim(0) == cout, "conv2d: bias dim mismatch");
}

// im2col for groups == 1: rows are output positions, columns (ki,kj,c).
template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, const Conv2dSpec& s, Tensor<T>& col) {
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const int ho = conv_out_dim(h, kh, s.stride, s.padding);
    const int wo = conv_out_dim(w, kw, s.stride, s.padding);
    col = Tensor<T>({ho * wo, kh * kw * c});
    T* out = col.data();
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            for (int ki = 0; ki < kh; ++ki) {
                const int iy = oy * s.stride - s.padding + ki;
                for (int kj = 0; kj < kw; ++kj) {
                    const int ix = ox * s.stride - s.padding + kj;
                    if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                        const T* src = &x(iy, ix, 0);
                        for (int cc = 0; cc < c; ++cc) *out++ = src[cc];
                    } else {
                        for (int cc = 0; cc < c; ++cc) *out++ = T(0);
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>* bias,
                         const Conv2dSpec& s) {
    detail::check_conv_shapes(x, kernel, bias, s);
    const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    const int cin = x.dim(2);
    const int ho = conv_out_dim(x.dim(0), kh, s.stride, s.padding);
    const int wo = conv_out_dim(x.dim(1), kw, s.stride, s.padding);
    Tensor<T> y({ho, wo, cout});
    if (s.groups == 1) {
        Tensor<T> col;
        detail::im2col(x, kh, kw, s, col);
        gemm<T>(false, false, ho * wo, cout, kh * kw * cin, T(1), col.data(), kh * kw * cin,
                kernel.data(), cout, T(0), y.data(), cout);
    } else {
        const int cpg_in = cin / s.groups, cpg_out = cout / s.groups;
        const int h = x.dim(0), w = x.dim(1);
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox)
                for (int g = 0; g < s.groups; ++g)
                    for (int co = 0; co < cpg_out; ++co) {
                        T acc = T(0);
                        for (int ki = 0; ki < kh; ++ki) {
                            const int iy = oy * s.stride - s.padding + ki;
                            if (iy < 0 || iy >= h) continue;
                            for (int kj = 0; kj < kw; ++kj) {
                                const int ix = ox * s.stride - s.padding + kj;
                                if (ix < 0 || ix >= w) continue;
                                for (int ci = 0; ci < cpg_in; ++ci)
                                    acc += x(iy, ix, g * cpg_in + ci) * kernel(ki, kj, ci, g * cpg_out + co);
                            }
                        }
                        y(oy, ox, g * cpg_out + co) = acc;
                    }
    }
    if (bias != nullptr)
        for (int i = 0; i < ho * wo; ++i)
            for (int co = 0; co < cout; ++co) y[static_cast<std::int64_t>(i) * cout + co] += (*bias)[co];
    return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& g,
                     const Conv2dSpec& s, Tensor<T>* dx, Tensor<T>* dkernel, Tensor<T>* dbias) {
    detail::check_conv_shapes(x, kernel, static_cast<const Tensor<T>*>(nullptr), s);
    const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    const int h = x.dim(0), w = x.dim(1), cin = x.dim(2);
    const int ho = conv_out_dim(h, kh, s.stride, s.padding);
    const int wo = conv_out_dim(w, kw, s.stride, s.padding);
    detail::require(g.rank() == 3 && g.dim(0) == ho && g.dim(1) == wo && g.dim(2) == cout,
                    "conv2d: upstream shape mismatch, got " + g.shape_string());
    if (dbias != nullptr)
        for (int i = 0; i < ho * wo; ++i)
            for (int co = 0; co < cout; ++co) (*dbias)[co] += g[static_cast<std::int64_t>(i) * cout + co];
    if (s.groups == 1) {
        Tensor<T> col;
        detail::im2col(x, kh, kw, s, col);
        const int kcols = kh * kw * cin;
        if (dkernel != nullptr)
            gemm<T>(true, false, kcols, cout, ho * wo, T(1), col.data(), kcols, g.data(), cout, T(1),
                    dkernel->data(), cout);
        if (dx != nullptr) {
            Tensor<T> dcol({ho * wo, kcols});
            gemm<T>(false, true, ho * wo, kcols, cout, T(1), g.data(), cout, kernel.data(), cout, T(0),
                    dcol.data(), kcols);
            *dx = Tensor<T>({h, w, cin});
            const T* src = dcol.data();
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox)
                    for (int ki = 0; ki < kh; ++ki) {
                        const int iy = oy * s.stride - s.padding + ki;
                        for (int kj = 0; kj < kw; ++kj) {
                            const int ix = ox * s.stride - s.padding + kj;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                                T* dst = &(*dx)(iy, ix, 0);
                                for (int cc = 0; cc < cin; ++cc) dst[cc] += src[cc];
                            }
                            src += cin;
                        }
                    }
        }
    } else {
        const int cpg_in = cin / s.groups, cpg_out = cout / s.groups;
        if (dx != nullptr) *dx = Tensor<T>({h, w, cin});
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox)
                for (int grp = 0; grp < s.groups; ++grp)
                    for (int co = 0; co < cpg_out; ++co) {
                        const T gd = g(oy, ox, grp * cpg_out + co);
                        for (int ki = 0; ki < kh; ++ki) {
                            const int iy = oy * s.stride - s.padding + ki;
                            if (iy < 0 || iy >= h) continue;
                            for (int kj = 0; kj < kw; ++kj) {
                                const int ix = ox * s.stride - s.padding + kj;
                                if (ix < 0 || ix >= w) continue;
                                for (int ci = 0; ci < cpg_in; ++ci) {
                                    if (dkernel != nullptr)
                                        (*dkernel)(ki, kj, ci, grp * cpg_out + co) +=
                                            x(iy, ix, grp * cpg_in + ci) * gd;
                                    if (dx != nullptr)
                                        (*dx)(iy, ix, grp * cpg_in + ci) +=
                                            kernel(ki, kj, ci, grp * cpg_out + co) * gd;
                                }
                            }
                        }
                    }
    }
}

// ---------------------------------------------------------------------------
// pointwise-mlp: 1x1 conv (linear over rows) + batch-norm + relu
// ---------------------------------------------------------------------------

template <typename T>
struct PwMlpCtx {
    Tensor<T> xhat;         // normalized activations
    std::vector<T> inv_std; // per-channel 1/sqrt(var+eps) actually used
    std::vector<T> mean;    // per-channel mean actually used
    Tensor<T> out;
};

// Batch statistics are reduced with the exact accumulator so the outputs are
// unchanged — bit for bit — under any permutation of the input rows.
template <typename T>
Tensor<T> pwmlp_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gamma,
                        const Tensor<T>& beta, const Tensor<T>& running_mean,
                        const Tensor<T>& running_var, Mode mode, PwMlpCtx<T>* ctx) {
    const int dout = w.dim(1);
    detail::require(gamma.numel() == dout && beta.numel() == dout && running_mean.numel() == dout &&
                        running_var.numel() == dout,
                    "pointwise-mlp: batch-norm parameter dims must equal output channels");
    Tensor<T> z = linear_forward(x, w, static_cast<const Tensor<T>*>(nullptr));
    const int n = z.dim(0);
    std::vector<T> mean(dout), inv_std(dout);
    if (mode == Mode::kTrain) {
        std::vector<double> m, v;
        exact_mean_var_columns(z.data(), n, dout, &m, &v);
        for (int c = 0; c < dout; ++c) {
            mean[c] = static_cast<T>(m[static_cast<std::size_t>(c)]);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(v[static_cast<std::size_t>(c)] + kBnEps));
        }
    } else {
        for (int c = 0; c < dout; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + kBnEps));
        }
    }
    Tensor<T> out({n, dout});
    {
        T* __restrict__ zp = z.data();
        T* __restrict__ op = out.data();
        const T* __restrict__ mp = mean.data();
        const T* __restrict__ sp = inv_std.data();
        const T* __restrict__ gp = gamma.data();
        const T* __restrict__ bp = beta.data();
        for (int i = 0; i < n; ++i, zp += dout, op += dout)
            for (int c = 0; c < dout; ++c) {
                const T xh = (zp[c] - mp[c]) * sp[c];
                zp[c] = xh;  // z is re-used as xhat storage
                const T pre = gp[c] * xh + bp[c];
                op[c] = pre > T(0) ? pre : T(0);
            }
    }
    if (ctx != nullptr) {
        ctx->xhat = std::move(z);
        ctx->inv_std = std::move(inv_std);
        ctx->mean = std::move(mean);
        ctx->out = out;
    }
    return out;
}

// Advances running statistics from the batch statistics of the given ctx.
// Called by training code after a kTrain forward; forward itself stays pure.
template <typename T>
void pwmlp_update_running(const PwMlpCtx<T>& ctx, Tensor<T>& running_mean, Tensor<T>& running_var) {
    const int dout = static_cast<int>(ctx.mean.size());
    for (int c = 0; c < dout; ++c) {
        const double istd = static_cast<double>(ctx.inv_std[c]);
        const double var = 1.0 / (istd * istd) - kBnEps;
        running_mean[c] = static_cast<T>(kBnDecay * running_mean[c] + (1.0 - kBnDecay) * ctx.mean[c]);
        running_var[c] = static_cast<T>(kBnDecay * running_var[c] + (1.0 - kBnDecay) * var);
    }
}

template <typename T>
void pwmlp_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gamma,
                    const Tensor<T>& beta, const PwMlpCtx<T>& ctx, const Tensor<T>& g, Mode mode,
                    Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* dgamma, Tensor<T>* dbeta) {
    const int n = ctx.xhat.dim(0), dout = ctx.xhat.dim(1);
    detail::require(g.rank() == 2 && g.dim(0) == n && g.dim(1) == dout,
                    "pointwise-mlp: upstream shape mismatch");
    // gradients need plain deterministic sums, not order-insensitive ones;
    // one fused sweep handles relu, the affine parameters and the dxhat
    // column moments, a second recomputes dxhat on the fly and forms dz
    Tensor<T> dz({n, dout});
    std::vector<double> sum_dxh(static_cast<std::size_t>(dout), 0.0);
    std::vector<double> sum_dxh_xh(static_cast<std::size_t>(dout), 0.0);
    std::vector<double> dgamma_acc(static_cast<std::size_t>(dout), 0.0);
    std::vector<double> dbeta_acc(static_cast<std::size_t>(dout), 0.0);
    {
        const T* __restrict__ xh = ctx.xhat.data();
        const T* __restrict__ gup = g.data();
        const T* __restrict__ gam = gamma.data();
        const T* __restrict__ bet = beta.data();
        double* __restrict__ s1 = sum_dxh.data();
        double* __restrict__ s2 = sum_dxh_xh.data();
        double* __restrict__ dg = dgamma_acc.data();
        double* __restrict__ db = dbeta_acc.data();
        for (int i = 0; i < n; ++i, xh += dout, gup += dout)
            for (int c = 0; c < dout; ++c) {
                const T pre = gam[c] * xh[c] + bet[c];
                const T gp = pre > T(0) ? gup[c] : T(0);
                dg[c] += static_cast<double>(gp) * xh[c];
                db[c] += static_cast<double>(gp);
                const T d = gp * gam[c];
                s1[c] += static_cast<double>(d);
                s2[c] += static_cast<double>(d) * xh[c];
            }
    }
    if (dgamma != nullptr)
        for (int c = 0; c < dout; ++c) (*dgamma)[c] += static_cast<T>(dgamma_acc[static_cast<std::size_t>(c)]);
    if (dbeta != nullptr)
        for (int c = 0; c < dout; ++c) (*dbeta)[c] += static_cast<T>(dbeta_acc[static_cast<std::size_t>(c)]);
    {
        const bool batch_stats = mode == Mode::kTrain;
        std::vector<T> m1(static_cast<std::size_t>(dout), T(0)), m2(static_cast<std::size_t>(dout), T(0));
        if (batch_stats)
            for (int c = 0; c < dout; ++c) {
                m1[static_cast<std::size_t>(c)] = static_cast<T>(sum_dxh[static_cast<std::size_t>(c)] / n);
                m2[static_cast<std::size_t>(c)] = static_cast<T>(sum_dxh_xh[static_cast<std::size_t>(c)] / n);
            }
        const T* __restrict__ xh = ctx.xhat.data();
        const T* __restrict__ gup = g.data();
        T* __restrict__ dzp = dz.data();
        const T* __restrict__ istd = ctx.inv_std.data();
        const T* __restrict__ gam = gamma.data();
        const T* __restrict__ bet = beta.data();
        const T* __restrict__ a = m1.data();
        const T* __restrict__ b = m2.data();
        for (int i = 0; i < n; ++i, xh += dout, gup += dout, dzp += dout)
            for (int c = 0; c < dout; ++c) {
                const T pre = gam[c] * xh[c] + bet[c];
                const T d = (pre > T(0) ? gup[c] : T(0)) * gam[c];
                dzp[c] = istd[c] * (d - a[c] - xh[c] * b[c]);
            }
    }
    linear_backward(x, w, dz, dx, dw, static_cast<Tensor<T>*>(nullptr));
}

// ---------------------------------------------------------------------------
// elementwise kinds
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& g) {
    detail::require(x.same_shape(g), "relu: upstream shape mismatch");
    Tensor<T> dx(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > T(0) ? g[i] : T(0);
    return dx;
}

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
    return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& g) {
    detail::require(y.same_shape(g), "sigmoid: upstream shape mismatch");
    Tensor<T> dx(y.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) dx[i] = g[i] * y[i] * (T(1) - y[i]);
    return dx;
}

template <typename T>
Tensor<T> add_forward(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.same_shape(b), "add: shapes " + a.shape_string() + " vs " + b.shape_string());
    Tensor<T> y(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
    return y;
}

// ---------------------------------------------------------------------------
// softmax over the last axis of a [N,M] matrix, max-shifted
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows_forward(const Tensor<T>& x) {
    detail::require(x.rank() == 2, "softmax-rows: input must be rank 2, got " + x.shape_string());
    const int n = x.dim(0), m = x.dim(1);
    Tensor<T> y({n, m});
    for (int i = 0; i < n; ++i) {
        T mx = x(i, 0);
        for (int j = 1; j < m; ++j) mx = std::max(mx, x(i, j));
        T denom = T(0);
        for (int j = 0; j < m; ++j) {
            const T e = std::exp(x(i, j) - mx);
            y(i, j) = e;
            denom += e;
        }
        const T inv = T(1) / denom;
        for (int j = 0; j < m; ++j) y(i, j) *= inv;
    }
    return y;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& g) {
    detail::require(y.same_shape(g), "softmax-rows: upstream shape mismatch");
    const int n = y.dim(0), m = y.dim(1);
    Tensor<T> dx({n, m});
    for (int i = 0; i < n; ++i) {
        T dot = T(0);
        for (int j = 0; j < m; ++j) dot += g(i, j) * y(i, j);
        for (int j = 0; j < m; ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// layer-norm over the last axis of [N,d]
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormCtx {
    Tensor<T> xhat;
    std::vector<T> inv_std;
};

template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             LayerNormCtx<T>* ctx) {
    detail::require(x.rank() == 2, "layer-norm: input must be rank 2");
    const int n = x.dim(0), d = x.dim(1);
    detail::require(gamma.numel() == d && beta.numel() == d, "layer-norm: parameter dims != feature dim");
    Tensor<T> y({n, d});
    Tensor<T> xhat({n, d});
    std::vector<T> inv_std(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += static_cast<double>(x(i, j));
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dv = static_cast<double>(x(i, j)) - mu;
            var += dv * dv;
        }
        var /= d;
        const T istd = static_cast<T>(1.0 / std::sqrt(var + kLnEps));
        inv_std[static_cast<std::size_t>(i)] = istd;
        for (int j = 0; j < d; ++j) {
            const T xh = (x(i, j) - static_cast<T>(mu)) * istd;
            xhat(i, j) = xh;
            y(i, j) = gamma[j] * xh + beta[j];
        }
    }
    if (ctx != nullptr) {
        ctx->xhat = std::move(xhat);
        ctx->inv_std = std::move(inv_std);
    }
    return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& gamma, const LayerNormCtx<T>& ctx, const Tensor<T>& g,
                         Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta) {
    const int n = ctx.xhat.dim(0), d = ctx.xhat.dim(1);
    detail::require(g.rank() == 2 && g.dim(0) == n && g.dim(1) == d, "layer-norm: upstream shape mismatch");
    if (dx != nullptr) *dx = Tensor<T>({n, d});
    for (int i = 0; i < n; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
            const T dxh = g(i, j) * gamma[j];
            m1 += static_cast<double>(dxh);
            m2 += static_cast<double>(dxh) * ctx.xhat(i, j);
            if (dgamma != nullptr) (*dgamma)[j] += g(i, j) * ctx.xhat(i, j);
            if (dbeta != nullptr) (*dbeta)[j] += g(i, j);
        }
        m1 /= d;
        m2 /= d;
        if (dx != nullptr) {
            const T istd = ctx.inv_std[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j) {
                const T dxh = g(i, j) * gamma[j];
                (*dx)(i, j) = istd * (dxh - static_cast<T>(m1) - ctx.xhat(i, j) * static_cast<T>(m2));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// max-pool over the middle (set) axis: [G,k,d] -> [G,d]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> max_pool_set_forward(const Tensor<T>& x, std::vector<int>* argmax) {
    detail::require(x.rank() == 3, "max-pool-over-set: input must be [groups,k,d], got " + x.shape_string());
    const int gcount = x.dim(0), k = x.dim(1), d = x.dim(2);
    Tensor<T> y({gcount, d});
    if (argmax != nullptr) argmax->assign(static_cast<std::size_t>(gcount) * d, 0);
    for (int gi = 0; gi < gcount; ++gi)
        for (int c = 0; c < d; ++c) {
            T best = x(gi, 0, c);
            int bi = 0;
            for (int j = 1; j < k; ++j)
                if (x(gi, j, c) > best) {
                    best = x(gi, j, c);
                    bi = j;
                }
            y(gi, c) = best;
            if (argmax != nullptr) (*argmax)[static_cast<std::size_t>(gi) * d + c] = bi;
        }
    return y;
}

template <typename T>
Tensor<T> max_pool_set_backward(const std::vector<int>& argmax, const std::vector<int>& xshape,
                                const Tensor<T>& g) {
    const int gcount = xshape[0], k = xshape[1], d = xshape[2];
    detail::require(g.rank() == 2 && g.dim(0) == gcount && g.dim(1) == d,
                    "max-pool-over-set: upstream shape mismatch");
    Tensor<T> dx({gcount, k, d});
    for (int gi = 0; gi < gcount; ++gi)
        for (int c = 0; c < d; ++c) dx(gi, argmax[static_cast<std::size_t>(gi) * d + c], c) = g(gi, c);
    return dx;
}

// ---------------------------------------------------------------------------
// row-wise l2 normalization; the zero row maps to the zero row
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> l2_normalize_rows_forward(const Tensor<T>& x, std::vector<T>* norms) {
    detail::require(x.rank() == 2, "l2-normalize: input must be rank 2");
    const int n = x.dim(0), d = x.dim(1);
    Tensor<T> y({n, d});
    if (norms != nullptr) norms->assign(static_cast<std::size_t>(n), T(0));
    for (int i = 0; i < n; ++i) {
        double sq = 0.0;
        for (int j = 0; j < d; ++j) sq += static_cast<double>(x(i, j)) * x(i, j);
        const T norm = static_cast<T>(std::sqrt(sq));
        if (norms != nullptr) (*norms)[static_cast<std::size_t>(i)] = norm;
        if (norm > T(0)) {
            const T inv = T(1) / norm;
            for (int j = 0; j < d; ++j) y(i, j) = x(i, j) * inv;
        }
        // zero row stays zero: no direction to invent
    }
    return y;
}

template <typename T>
Tensor<T> l2_normalize_rows_backward(const Tensor<T>& y, const std::vector<T>& norms, const Tensor<T>& g) {
    detail::require(y.same_shape(g), "l2-normalize: upstream shape mismatch");
    const int n = y.dim(0), d = y.dim(1);
    Tensor<T> dx({n, d});
    for (int i = 0; i < n; ++i) {
        const T norm = norms[static_cast<std::size_t>(i)];
        if (norm <= T(0)) continue;  // gradient defined as zero at the zero row
        T dot = T(0);
        for (int j = 0; j < d; ++j) dot += g(i, j) * y(i, j);
        const T inv = T(1) / norm;
        for (int j = 0; j < d; ++j) dx(i, j) = (g(i, j) - y(i, j) * dot) * inv;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// concat along an axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_forward(const std::vector<const Tensor<T>*>& xs, int axis) {
    detail::require(!xs.empty(), "concat: needs at least one input");
    const int rank = xs[0]->rank();
    detail::require(axis >= 0 && axis < rank, "concat: axis out of range");
    std::vector<int> shape = xs[0]->shape();
    for (std::size_t i = 1; i < xs.size(); ++i) {
        detail::require(xs[i]->rank() == rank, "concat: rank mismatch");
        for (int dindex = 0; dindex < rank; ++dindex)
            if (dindex != axis)
                detail::require(xs[i]->dim(dindex) == shape[static_cast<std::size_t>(dindex)],
                                "concat: non-axis dims differ");
        shape[static_cast<std::size_t>(axis)] += xs[i]->dim(axis);
    }
    Tensor<T> y(shape);
    // outer = product of dims before axis, inner = product after
    std::int64_t outer = 1, inner = 1;
    for (int dindex = 0; dindex < axis; ++dindex) outer *= shape[static_cast<std::size_t>(dindex)];
    for (int dindex = axis + 1; dindex < rank; ++dindex) inner *= shape[static_cast<std::size_t>(dindex)];
    const std::int64_t out_axis = shape[static_cast<std::size_t>(axis)];
    std::int64_t offset = 0;
    for (const Tensor<T>* x : xs) {
        const std::int64_t ax = x->dim(axis);
        for (std::int64_t o = 0; o < outer; ++o) {
            const T* src = x->data() + o * ax * inner;
            T* dst = y.data() + (o * out_axis + offset) * inner;
            for (std::int64_t idx = 0; idx < ax * inner; ++idx) dst[idx] = src[idx];
        }
        offset += ax;
    }
    return y;
}

template <typename T>
std::vector<Tensor<T>> concat_backward(const std::vector<std::vector<int>>& shapes, int axis,
                                       const Tensor<T>& g) {
    std::vector<Tensor<T>> grads;
    grads.reserve(shapes.size());
    const int rank = static_cast<int>(shapes[0].size());
    std::int64_t outer = 1, inner = 1;
    for (int dindex = 0; dindex < axis; ++dindex) outer *= g.shape()[static_cast<std::size_t>(dindex)];
    for (int dindex = axis + 1; dindex < rank; ++dindex) inner *= g.shape()[static_cast<std::size_t>(dindex)];
    const std::int64_t out_axis = g.dim(axis);
    std::int64_t offset = 0;
    for (const auto& shape : shapes) {
        Tensor<T> dx(shape);
        const std::int64_t ax = shape[static_cast<std::size_t>(axis)];
        for (std::int64_t o = 0; o < outer; ++o) {
            const T* src = g.data() + (o * out_axis + offset) * inner;
            T* dst = dx.data() + o * ax * inner;
            for (std::int64_t idx = 0; idx < ax * inner; ++idx) dst[idx] = src[idx];
        }
        offset += ax;
        grads.push_back(std::move(dx));
    }
    return grads;
}

// ---------------------------------------------------------------------------
// uniform dispatcher over the kind enumeration (verification surface)
// ---------------------------------------------------------------------------

struct PrimitiveKind {
    enum class Type {
        kLinear,
        kConv2d,
        kPointwiseMlp,
        kRelu,
        kSigmoid,
        kSoftmaxRows,
        kLayerNorm,
        kMaxPoolOverSet,
        kL2Normalize,
        kConcat,
        kAdd,
    };
    Type type = Type::kRelu;
    Conv2dSpec conv;  // conv2d only
    int axis = 0;     // concat only

    static PrimitiveKind linear() { return {Type::kLinear, {}, 0}; }
    static PrimitiveKind conv2d(int stride, int padding, int groups) {
        return {Type::kConv2d, Conv2dSpec{stride, padding, groups}, 0};
    }
    static PrimitiveKind pointwise_mlp() { return {Type::kPointwiseMlp, {}, 0}; }
    static PrimitiveKind relu() { return {Type::kRelu, {}, 0}; }
    static PrimitiveKind sigmoid() { return {Type::kSigmoid, {}, 0}; }
    static PrimitiveKind softmax_rows() { return {Type::kSoftmaxRows, {}, 0}; }
    static PrimitiveKind layer_norm() { return {Type::kLayerNorm, {}, 0}; }
    static PrimitiveKind max_pool_over_set() { return {Type::kMaxPoolOverSet, {}, 0}; }
    static PrimitiveKind l2_normalize() { return {Type::kL2Normalize, {}, 0}; }
    static PrimitiveKind concat(int axis) { return {Type::kConcat, {}, axis}; }
    static PrimitiveKind add() { return {Type::kAdd, {}, 0}; }

    const char* name() const {
        switch (type) {
            case Type::kLinear: return "linear";
            case Type::kConv2d: return "conv2d";
            case Type::kPointwiseMlp: return "pointwise-mlp";
            case Type::kRelu: return "relu";
            case Type::kSigmoid: return "sigmoid";
            case Type::kSoftmaxRows: return "softmax-rows";
            case Type::kLayerNorm: return "layer-norm";
            case Type::kMaxPoolOverSet: return "max-pool-over-set";
            case Type::kL2Normalize: return "l2-normalize";
            case Type::kConcat: return "concat";
            case Type::kAdd: return "add";
        }
        return "unknown";
    }
};

// Parameter slice names expected per kind: linear {weight[,bias]},
// conv2d {kernel[,bias]}, pointwise-mlp {weight,gamma,beta,running_mean,
// running_var}, layer-norm {gamma,beta}. Other kinds take no parameters.
template <typename T>
Tensor<T> primitive_forward(const PrimitiveKind& kind, const std::vector<Tensor<T>>& inputs,
                            const ParameterTable<T>& params, Mode mode = Mode::kTrain) {
    for (const auto& x : inputs) detail::require_finite(x, kind.name());
    using Type = PrimitiveKind::Type;
    auto one_input = [&]() -> const Tensor<T>& {
        detail::require(inputs.size() == 1,
                        std::string(kind.name()) + ": expected exactly one input tensor");
        return inputs[0];
    };
    switch (kind.type) {
        case Type::kLinear:
            return linear_forward(one_input(), params.at("weight"), params.find("bias"));
        case Type::kConv2d:
            return conv2d_forward(one_input(), params.at("kernel"), params.find("bias"), kind.conv);
        case Type::kPointwiseMlp:
            return pwmlp_forward(one_input(), params.at("weight"), params.at("gamma"), params.at("beta"),
                                 params.at("running_mean"), params.at("running_var"), mode,
                                 static_cast<PwMlpCtx<T>*>(nullptr));
        case Type::kRelu: return relu_forward(one_input());
        case Type::kSigmoid: return sigmoid_forward(one_input());
        case Type::kSoftmaxRows: return softmax_rows_forward(one_input());
        case Type::kLayerNorm:
            return layer_norm_forward(one_input(), params.at("gamma"), params.at("beta"),
                                      static_cast<LayerNormCtx<T>*>(nullptr));
        case Type::kMaxPoolOverSet: return max_pool_set_forward(one_input(), nullptr);
        case Type::kL2Normalize:
            return l2_normalize_rows_forward(one_input(), static_cast<std::vector<T>*>(nullptr));
        case Type::kConcat: {
            detail::require(!inputs.empty(), "concat: needs at least one input");
            std::vector<const Tensor<T>*> ptrs;
            for (const auto& x : inputs) ptrs.push_back(&x);
            return concat_forward(ptrs, kind.axis);
        }
        case Type::kAdd:
            detail::require(inputs.size() == 2, "add: expected exactly two inputs");
            return add_forward(inputs[0], inputs[1]);
    }
    throw ContractError("diffcore", "unknown primitive kind");
}

template <typename T>
void primitive_backward(const PrimitiveKind& kind, const std::vector<Tensor<T>>& inputs,
                        const ParameterTable<T>& params, const Tensor<T>& upstream,
                        std::vector<Tensor<T>>& input_grads, ParameterTable<T>& param_grads,
                        Mode mode = Mode::kTrain) {
    using Type = PrimitiveKind::Type;
    input_grads.clear();
    auto pgrad = [&](const char* pname) -> Tensor<T>* {
        const Tensor<T>* p = params.find(pname);
        if (p == nullptr) return nullptr;
        return &param_grads.accum(pname, p->shape());
    };
    switch (kind.type) {
        case Type::kLinear: {
            Tensor<T> dx;
            linear_backward(inputs[0], params.at("weight"), upstream, &dx, pgrad("weight"), pgrad("bias"));
            input_grads.push_back(std::move(dx));
            return;
        }
        case Type::kConv2d: {
            Tensor<T> dx;
            conv2d_backward(inputs[0], params.at("kernel"), upstream, kind.conv, &dx, pgrad("kernel"),
                            pgrad("bias"));
            input_grads.push_back(std::move(dx));
            return;
        }
        case Type::kPointwiseMlp: {
            PwMlpCtx<T> ctx;
            pwmlp_forward(inputs[0], params.at("weight"), params.at("gamma"), params.at("beta"),
                          params.at("running_mean"), params.at("running_var"), mode, &ctx);
            Tensor<T> dx;
            pwmlp_backward(inputs[0], params.at("weight"), params.at("gamma"), params.at("beta"), ctx,
                           upstream, mode, &dx, pgrad("weight"), pgrad("gamma"), pgrad("beta"));
            input_grads.push_back(std::move(dx));
            return;
        }
        case Type::kRelu: input_grads.push_back(relu_backward(inputs[0], upstream)); return;
        case Type::kSigmoid:
            input_grads.push_back(sigmoid_backward(sigmoid_forward(inputs[0]), upstream));
            return;
        case Type::kSoftmaxRows:
            input_grads.push_back(softmax_rows_backward(softmax_rows_forward(inputs[0]), upstream));
            return;
        case Type::kLayerNorm: {
            LayerNormCtx<T> ctx;
            layer_norm_forward(inputs[0], params.at("gamma"), params.at("beta"), &ctx);
            Tensor<T> dx;
            layer_norm_backward(params.at("gamma"), ctx, upstream, &dx, pgrad("gamma"), pgrad("beta"));
            input_grads.push_back(std::move(dx));
            return;
        }
        case Type::kMaxPoolOverSet: {
            std::vector<int> argmax;
            max_pool_set_forward(inputs[0], &argmax);
            input_grads.push_back(max_pool_set_backward<T>(argmax, inputs[0].shape(), upstream));
            return;
        }
        case Type::kL2Normalize: {
            std::vector<T> norms;
            Tensor<T> y = l2_normalize_rows_forward(inputs[0], &norms);
            input_grads.push_back(l2_normalize_rows_backward(y, norms, upstream));
            return;
        }
        case Type::kConcat: {
            std::vector<std::vector<int>> shapes;
            for (const auto& x : inputs) shapes.push_back(x.shape());
            input_grads = concat_backward(shapes, kind.axis, upstream);
            return;
        }
        case Type::kAdd:
            detail::require(inputs[0].same_shape(upstream), "add: upstream shape mismatch");
            input_grads.push_back(upstream);
            input_grads.push_back(upstream);
            return;
    }
    throw ContractError("diffcore", "unknown primitive kind");
}

}  // namespace fuseloc
