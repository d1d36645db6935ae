#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fuseloc/embedding.hpp"
#include "fuseloc/params.hpp"
#include "fuseloc/primitives.hpp"
#include "fuseloc/reduce.hpp"

// Intra-modal self-attention blocks and the dual-stage cross-modal fusion:
// a sequence-interaction stage (bidirectional cross-attention with separate
// parameters per direction) followed by a feature-fusion stage (inverted
// residual over the concatenated token sequence).
//
// Key/value tokens are processed in a canonical content order: rows of the
// projected (K|V) matrix are sorted by value before any reduction over the
// token axis. Identical token multisets therefore produce identical float
// reductions, which makes self-attention exactly permutation-equivariant and
// cross-attention exactly permutation-invariant in its key/value sequence.

namespace fuseloc {

struct AttentionConfig {
    int heads = 4;
    int dim = 256;
    double dropout = 0.0;  // the canonical configuration trains without dropout
    int ffn_hidden = 512;
    int depth = 1;

    int head_dim() const { return dim / heads; }

    void validate() const {
        if (heads < 1 || dim < 1 || dim % heads != 0)
            throw ContractError("attention", "model dim " + std::to_string(dim) +
                                                 " must be divisible by heads " + std::to_string(heads));
        if (dropout != 0.0)
            throw ContractError("attention", "dropout is fixed at 0 in this implementation");
        if (ffn_hidden < 1 || depth < 1) throw ContractError("attention", "bad ffn_hidden/depth");
    }
};

namespace detail {

// Gather rows of src into dst following order (dst row j = src row order[j]).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, const std::vector<int>& order) {
    const int n = src.dim(0), d = src.dim(1);
    Tensor<T> dst({n, d});
    for (int j = 0; j < n; ++j) {
        const T* s = src.data() + static_cast<std::int64_t>(order[static_cast<std::size_t>(j)]) * d;
        T* t = dst.data() + static_cast<std::int64_t>(j) * d;
        for (int c = 0; c < d; ++c) t[c] = s[c];
    }
    return dst;
}

template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& src, const std::vector<int>& order) {
    const int n = src.dim(0), d = src.dim(1);
    Tensor<T> dst({n, d});
    for (int j = 0; j < n; ++j) {
        const T* s = src.data() + static_cast<std::int64_t>(j) * d;
        T* t = dst.data() + static_cast<std::int64_t>(order[static_cast<std::size_t>(j)]) * d;
        for (int c = 0; c < d; ++c) t[c] = s[c];
    }
    return dst;
}

// Canonical key/value order: lexicographic over the concatenated (K|V) row.
template <typename T>
std::vector<int> kv_order(const Tensor<T>& k, const Tensor<T>& v) {
    const int n = k.dim(0), dk = k.dim(1), dv = v.dim(1);
    Tensor<T> keyvals({n, dk + dv});
    for (int i = 0; i < n; ++i) {
        T* dst = keyvals.data() + static_cast<std::int64_t>(i) * (dk + dv);
        const T* ks = k.data() + static_cast<std::int64_t>(i) * dk;
        const T* vs = v.data() + static_cast<std::int64_t>(i) * dv;
        for (int c = 0; c < dk; ++c) dst[c] = ks[c];
        for (int c = 0; c < dv; ++c) dst[dk + c] = vs[c];
    }
    return content_order(keyvals.data(), n, dk + dv);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// multi-head self-attention, Wo projection, no biases on the projections
// ---------------------------------------------------------------------------

template <typename T>
struct MsaCtx {
    Tensor<T> q, ks, vs;    // projections; k/v in canonical order
    Tensor<T> attn;         // [H, L, L] row-stochastic weights
    Tensor<T> heads_out;    // [L, d] concatenated head outputs
    std::vector<int> order;
};

template <typename T>
struct MultiHeadSelfAttention {
    AttentionConfig cfg;
    std::string prefix;

    void init_params(ParameterTable<T>& p, Rng& rng) const {
        const int d = cfg.dim;
        p.add(prefix + ".wq", init::xavier_normal<T>({d, d}, d, d, rng));
        p.add(prefix + ".wk", init::xavier_normal<T>({d, d}, d, d, rng));
        p.add(prefix + ".wv", init::xavier_normal<T>({d, d}, d, d, rng));
        p.add(prefix + ".wo", init::xavier_normal<T>({d, d}, d, d, rng));
    }

    Tensor<T> forward(const Tensor<T>& x, const ParameterTable<T>& p, MsaCtx<T>* ctx) const {
        if (x.rank() != 2 || x.dim(1) != cfg.dim)
            throw ContractError("attention", "msa: tokens must be [L," + std::to_string(cfg.dim) +
                                                 "], got " + x.shape_string());
        const int len = x.dim(0), d = cfg.dim, hn = cfg.heads, dk = cfg.head_dim();
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
        Tensor<T> q = linear_forward(x, p.at(prefix + ".wq"), static_cast<const Tensor<T>*>(nullptr));
        Tensor<T> k = linear_forward(x, p.at(prefix + ".wk"), static_cast<const Tensor<T>*>(nullptr));
        Tensor<T> v = linear_forward(x, p.at(prefix + ".wv"), static_cast<const Tensor<T>*>(nullptr));
        std::vector<int> order = detail::kv_order(k, v);
        Tensor<T> ks = detail::gather_rows(k, order);
        Tensor<T> vs = detail::gather_rows(v, order);
        Tensor<T> attn({hn, len, len});
        Tensor<T> heads_out({len, d});
        for (int h = 0; h < hn; ++h) {
            T* a = attn.data() + static_cast<std::int64_t>(h) * len * len;
            gemm<T>(false, true, len, len, dk, scale, q.data() + h * dk, d, ks.data() + h * dk, d, T(0), a,
                    len);
            Tensor<T> scores = Tensor<T>::from({len, len}, std::vector<T>(a, a + static_cast<std::int64_t>(len) * len));
            Tensor<T> soft = softmax_rows_forward(scores);
            for (std::int64_t i = 0; i < soft.numel(); ++i) a[i] = soft[i];
            gemm<T>(false, false, len, dk, len, T(1), a, len, vs.data() + h * dk, d, T(0),
                    heads_out.data() + h * dk, d);
        }
        Tensor<T> out = linear_forward(heads_out, p.at(prefix + ".wo"), static_cast<const Tensor<T>*>(nullptr));
        if (ctx != nullptr) {
            ctx->q = std::move(q);
            ctx->ks = std::move(ks);
            ctx->vs = std::move(vs);
            ctx->attn = std::move(attn);
            ctx->heads_out = std::move(heads_out);
            ctx->order = std::move(order);
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& x, const MsaCtx<T>& ctx, const Tensor<T>& g,
                       const ParameterTable<T>& p, ParameterTable<T>& grads) const {
        const int len = x.dim(0), d = cfg.dim, hn = cfg.heads, dk = cfg.head_dim();
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
        Tensor<T> dheads;
        linear_backward(ctx.heads_out, p.at(prefix + ".wo"), g, &dheads,
                        &grads.accum(prefix + ".wo", {d, d}), static_cast<Tensor<T>*>(nullptr));
        Tensor<T> dq({len, d}), dks({len, d}), dvs({len, d});
        for (int h = 0; h < hn; ++h) {
            const T* a = ctx.attn.data() + static_cast<std::int64_t>(h) * len * len;
            Tensor<T> da({len, len});
            gemm<T>(false, true, len, len, dk, T(1), dheads.data() + h * dk, d, ctx.vs.data() + h * dk, d,
                    T(0), da.data(), len);
            gemm<T>(true, false, len, dk, len, T(1), a, len, dheads.data() + h * dk, d, T(1),
                    dvs.data() + h * dk, d);
            Tensor<T> attn_h = Tensor<T>::from({len, len}, std::vector<T>(a, a + static_cast<std::int64_t>(len) * len));
            Tensor<T> ds = softmax_rows_backward(attn_h, da);
            gemm<T>(false, false, len, dk, len, scale, ds.data(), len, ctx.ks.data() + h * dk, d, T(1),
                    dq.data() + h * dk, d);
            gemm<T>(true, false, len, dk, len, scale, ds.data(), len, ctx.q.data() + h * dk, d, T(1),
                    dks.data() + h * dk, d);
        }
        Tensor<T> dkraw = detail::scatter_rows(dks, ctx.order);
        Tensor<T> dvraw = detail::scatter_rows(dvs, ctx.order);
        Tensor<T> dx({len, d});
        gemm<T>(false, true, len, d, d, T(1), dq.data(), d, p.at(prefix + ".wq").data(), d, T(0), dx.data(), d);
        gemm<T>(false, true, len, d, d, T(1), dkraw.data(), d, p.at(prefix + ".wk").data(), d, T(1), dx.data(), d);
        gemm<T>(false, true, len, d, d, T(1), dvraw.data(), d, p.at(prefix + ".wv").data(), d, T(1), dx.data(), d);
        gemm<T>(true, false, d, d, len, T(1), x.data(), d, dq.data(), d, T(1),
                grads.accum(prefix + ".wq", {d, d}).data(), d);
        gemm<T>(true, false, d, d, len, T(1), x.data(), d, dkraw.data(), d, T(1),
                grads.accum(prefix + ".wk", {d, d}).data(), d);
        gemm<T>(true, false, d, d, len, T(1), x.data(), d, dvraw.data(), d, T(1),
                grads.accum(prefix + ".wv", {d, d}).data(), d);
        return dx;
    }
};

// ---------------------------------------------------------------------------
// pre-norm residual feed-forward: y = x + lin2(relu(lin1(LN(x))))
// ---------------------------------------------------------------------------

template <typename T>
struct FfnCtx {
    LayerNormCtx<T> ln;
    Tensor<T> ln_out;
    Tensor<T> z1;  // pre-relu hidden
    Tensor<T> a1;  // post-relu hidden
};

template <typename T>
struct ResidualFfn {
    int dim = 256;
    int hidden = 512;
    std::string prefix;

    void init_params(ParameterTable<T>& p, Rng& rng) const {
        p.add(prefix + ".ln.gamma", Tensor<T>::full({dim}, T(1)));
        p.add(prefix + ".ln.beta", Tensor<T>({dim}));
        p.add(prefix + ".lin1.weight", init::he_normal<T>({dim, hidden}, dim, rng));
        p.add(prefix + ".lin1.bias", Tensor<T>({hidden}));
        p.add(prefix + ".lin2.weight", init::xavier_normal<T>({hidden, dim}, hidden, dim, rng));
        p.add(prefix + ".lin2.bias", Tensor<T>({dim}));
    }

    Tensor<T> forward(const Tensor<T>& x, const ParameterTable<T>& p, FfnCtx<T>* ctx) const {
        FfnCtx<T> local;
        FfnCtx<T>& c = ctx != nullptr ? *ctx : local;
        c.ln_out = layer_norm_forward(x, p.at(prefix + ".ln.gamma"), p.at(prefix + ".ln.beta"), &c.ln);
        c.z1 = linear_forward(c.ln_out, p.at(prefix + ".lin1.weight"), &p.at(prefix + ".lin1.bias"));
        c.a1 = relu_forward(c.z1);
        Tensor<T> delta = linear_forward(c.a1, p.at(prefix + ".lin2.weight"), &p.at(prefix + ".lin2.bias"));
        return add_forward(x, delta);
    }

    Tensor<T> backward(const FfnCtx<T>& ctx, const Tensor<T>& g, const ParameterTable<T>& p,
                       ParameterTable<T>& grads) const {
        Tensor<T> da1;
        linear_backward(ctx.a1, p.at(prefix + ".lin2.weight"), g, &da1,
                        &grads.accum(prefix + ".lin2.weight", {hidden, dim}),
                        &grads.accum(prefix + ".lin2.bias", {dim}));
        Tensor<T> dz1 = relu_backward(ctx.z1, da1);
        Tensor<T> dln;
        linear_backward(ctx.ln_out, p.at(prefix + ".lin1.weight"), dz1, &dln,
                        &grads.accum(prefix + ".lin1.weight", {dim, hidden}),
                        &grads.accum(prefix + ".lin1.bias", {hidden}));
        Tensor<T> dx;
        layer_norm_backward(p.at(prefix + ".ln.gamma"), ctx.ln, dln, &dx,
                            &grads.accum(prefix + ".ln.gamma", {dim}), &grads.accum(prefix + ".ln.beta", {dim}));
        return add_forward(dx, g);  // residual path
    }
};

// ---------------------------------------------------------------------------
// internal transformer block: pre-norm residual MSA + residual FFN
// ---------------------------------------------------------------------------

template <typename T>
struct BlockCtx {
    LayerNormCtx<T> ln1;
    Tensor<T> ln1_out;
    MsaCtx<T> msa;
    Tensor<T> u;  // after the attention residual
    FfnCtx<T> ffn;
};

template <typename T>
struct TransformerBlock {
    AttentionConfig cfg;
    std::string prefix;

    MultiHeadSelfAttention<T> msa() const { return {cfg, prefix + ".msa"}; }
    ResidualFfn<T> ffn() const { return {cfg.dim, cfg.ffn_hidden, prefix + ".ffn"}; }

    void init_params(ParameterTable<T>& p, Rng& rng) const {
        p.add(prefix + ".ln1.gamma", Tensor<T>::full({cfg.dim}, T(1)));
        p.add(prefix + ".ln1.beta", Tensor<T>({cfg.dim}));
        msa().init_params(p, rng);
        ffn().init_params(p, rng);
    }

    Tensor<T> forward(const Tensor<T>& x, const ParameterTable<T>& p, BlockCtx<T>* ctx) const {
        BlockCtx<T> local;
        BlockCtx<T>& c = ctx != nullptr ? *ctx : local;
        c.ln1_out = layer_norm_forward(x, p.at(prefix + ".ln1.gamma"), p.at(prefix + ".ln1.beta"), &c.ln1);
        Tensor<T> att = msa().forward(c.ln1_out, p, &c.msa);
        c.u = add_forward(x, att);
        return ffn().forward(c.u, p, &c.ffn);
    }

    Tensor<T> backward(const BlockCtx<T>& ctx, const Tensor<T>& g, const ParameterTable<T>& p,
                       ParameterTable<T>& grads) const {
        Tensor<T> du = ffn().backward(ctx.ffn, g, p, grads);
        Tensor<T> datt = msa().backward(ctx.ln1_out, ctx.msa, du, p, grads);
        Tensor<T> dx;
        layer_norm_backward(p.at(prefix + ".ln1.gamma"), ctx.ln1, datt, &dx,
                            &grads.accum(prefix + ".ln1.gamma", {cfg.dim}),
                            &grads.accum(prefix + ".ln1.beta", {cfg.dim}));
        return add_forward(dx, du);
    }
};

// ---------------------------------------------------------------------------
// cross-attention: queries from one modality, keys/values from the other.
// The query and key share one projection per head; head outputs are summed
// and projected from head_dim up to the model dim.
// ---------------------------------------------------------------------------

template <typename T>
struct CrossAttnCtx {
    Tensor<T> q, ks, vs;
    Tensor<T> attn;  // [H, Lq, Lkv]
    Tensor<T> head_sum;
    std::vector<int> order;
};

template <typename T>
struct CrossAttention {
    AttentionConfig cfg;
    std::string prefix;

    void init_params(ParameterTable<T>& p, Rng& rng) const {
        const int d = cfg.dim, dk = cfg.head_dim();
        p.add(prefix + ".wqk", init::xavier_normal<T>({d, d}, d, d, rng));
        p.add(prefix + ".wv", init::xavier_normal<T>({d, d}, d, d, rng));
        p.add(prefix + ".wo", init::xavier_normal<T>({dk, d}, dk, d, rng));
    }

    Tensor<T> forward(const Tensor<T>& xq, const Tensor<T>& xkv, const ParameterTable<T>& p,
                      CrossAttnCtx<T>* ctx) const {
        if (xq.rank() != 2 || xkv.rank() != 2 || xq.dim(1) != cfg.dim || xkv.dim(1) != cfg.dim)
            throw ContractError("attention", "cross: token dims must equal model dim " +
                                                 std::to_string(cfg.dim) + ", got " + xq.shape_string() +
                                                 " and " + xkv.shape_string());
        const int lq = xq.dim(0), lkv = xkv.dim(0), d = cfg.dim, hn = cfg.heads, dk = cfg.head_dim();
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
        Tensor<T> q = linear_forward(xq, p.at(prefix + ".wqk"), static_cast<const Tensor<T>*>(nullptr));
        Tensor<T> k = linear_forward(xkv, p.at(prefix + ".wqk"), static_cast<const Tensor<T>*>(nullptr));
        Tensor<T> v = linear_forward(xkv, p.at(prefix + ".wv"), static_cast<const Tensor<T>*>(nullptr));
        std::vector<int> order = detail::kv_order(k, v);
        Tensor<T> ks = detail::gather_rows(k, order);
        Tensor<T> vs = detail::gather_rows(v, order);
        Tensor<T> attn({hn, lq, lkv});
        Tensor<T> head_sum({lq, dk});
        for (int h = 0; h < hn; ++h) {
            T* a = attn.data() + static_cast<std::int64_t>(h) * lq * lkv;
            gemm<T>(false, true, lq, lkv, dk, scale, q.data() + h * dk, d, ks.data() + h * dk, d, T(0), a,
                    lkv);
            Tensor<T> scores = Tensor<T>::from({lq, lkv}, std::vector<T>(a, a + static_cast<std::int64_t>(lq) * lkv));
            Tensor<T> soft = softmax_rows_forward(scores);
            for (std::int64_t i = 0; i < soft.numel(); ++i) a[i] = soft[i];
            gemm<T>(false, false, lq, dk, lkv, T(1), a, lkv, vs.data() + h * dk, d, T(1), head_sum.data(),
                    dk);
        }
        Tensor<T> out = linear_forward(head_sum, p.at(prefix + ".wo"), static_cast<const Tensor<T>*>(nullptr));
        if (ctx != nullptr) {
            ctx->q = std::move(q);
            ctx->ks = std::move(ks);
            ctx->vs = std::move(vs);
            ctx->attn = std::move(attn);
            ctx->head_sum = std::move(head_sum);
            ctx->order = std::move(order);
        }
        return out;
    }

    // Returns (dxq, dxkv).
    std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& xq, const Tensor<T>& xkv,
                                             const CrossAttnCtx<T>& ctx, const Tensor<T>& g,
                                             const ParameterTable<T>& p, ParameterTable<T>& grads) const {
        const int lq = xq.dim(0), lkv = xkv.dim(0), d = cfg.dim, hn = cfg.heads, dk = cfg.head_dim();
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
        Tensor<T> dhead_sum;
        linear_backward(ctx.head_sum, p.at(prefix + ".wo"), g, &dhead_sum,
                        &grads.accum(prefix + ".wo", {dk, d}), static_cast<Tensor<T>*>(nullptr));
        Tensor<T> dq({lq, d}), dks({lkv, d}), dvs({lkv, d});
        for (int h = 0; h < hn; ++h) {
            const T* a = ctx.attn.data() + static_cast<std::int64_t>(h) * lq * lkv;
            Tensor<T> da({lq, lkv});
            gemm<T>(false, true, lq, lkv, dk, T(1), dhead_sum.data(), dk, ctx.vs.data() + h * dk, d, T(0),
                    da.data(), lkv);
            gemm<T>(true, false, lkv, dk, lq, T(1), a, lkv, dhead_sum.data(), dk, T(1),
                    dvs.data() + h * dk, d);
            Tensor<T> attn_h = Tensor<T>::from({lq, lkv}, std::vector<T>(a, a + static_cast<std::int64_t>(lq) * lkv));
            Tensor<T> ds = softmax_rows_backward(attn_h, da);
            gemm<T>(false, false, lq, dk, lkv, scale, ds.data(), lkv, ctx.ks.data() + h * dk, d, T(1),
                    dq.data() + h * dk, d);
            gemm<T>(true, false, lkv, dk, lq, scale, ds.data(), lkv, ctx.q.data() + h * dk, d, T(1),
                    dks.data() + h * dk, d);
        }
        Tensor<T> dkraw = detail::scatter_rows(dks, ctx.order);
        Tensor<T> dvraw = detail::scatter_rows(dvs, ctx.order);
        Tensor<T> dxq({lq, d}), dxkv({lkv, d});
        const Tensor<T>& wqk = p.at(prefix + ".wqk");
        gemm<T>(false, true, lq, d, d, T(1), dq.data(), d, wqk.data(), d, T(0), dxq.data(), d);
        gemm<T>(false, true, lkv, d, d, T(1), dkraw.data(), d, wqk.data(), d, T(0), dxkv.data(), d);
        gemm<T>(false, true, lkv, d, d, T(1), dvraw.data(), d, p.at(prefix + ".wv").data(), d, T(1),
                dxkv.data(), d);
        Tensor<T>& dwqk = grads.accum(prefix + ".wqk", {d, d});
        gemm<T>(true, false, d, d, lq, T(1), xq.data(), d, dq.data(), d, T(1), dwqk.data(), d);
        gemm<T>(true, false, d, d, lkv, T(1), xkv.data(), d, dkraw.data(), d, T(1), dwqk.data(), d);
        gemm<T>(true, false, d, d, lkv, T(1), xkv.data(), d, dvraw.data(), d, T(1),
                grads.accum(prefix + ".wv", {d, d}).data(), d);
        return {std::move(dxq), std::move(dxkv)};
    }
};

// ---------------------------------------------------------------------------
// sequence-wise interaction: symmetric cross-attention, attended features
// concatenated with the originals, projected back to d, residual FFN.
// Direction p2i attends image queries over point tokens; i2p the reverse.
// ---------------------------------------------------------------------------

template <typename T>
struct SisDirectionCtx {
    CrossAttnCtx<T> cross;
    Tensor<T> cat;  // [Lq, 2d]
    Tensor<T> proj; // [Lq, d]
    FfnCtx<T> ffn;
};

template <typename T>
struct SisCtx {
    SisDirectionCtx<T> p2i, i2p;
};

template <typename T>
struct SequenceInteraction {
    AttentionConfig cfg;
    std::string prefix = "etm.sis";

    CrossAttention<T> cross(const std::string& dir) const { return {cfg, prefix + "." + dir + ".cross"}; }
    ResidualFfn<T> ffn(const std::string& dir) const {
        return {cfg.dim, cfg.ffn_hidden, prefix + "." + dir + ".ffn"};
    }

    void init_params(ParameterTable<T>& p, Rng& rng) const {
        for (const std::string dir : {"p2i", "i2p"}) {
            cross(dir).init_params(p, rng);
            // concat projection starts as [anything | identity] so the block
            // passes the original tokens through when the attended half is 0
            Tensor<T> w = init::xavier_normal<T>({2 * cfg.dim, cfg.dim}, 2 * cfg.dim, cfg.dim, rng);
            for (int i = 0; i < cfg.dim; ++i)
                for (int j = 0; j < cfg.dim; ++j) w(cfg.dim + i, j) = i == j ? T(1) : T(0);
            p.add(prefix + "." + dir + ".proj.weight", std::move(w));
            p.add(prefix + "." + dir + ".proj.bias", Tensor<T>({cfg.dim}));
            ffn(dir).init_params(p, rng);
        }
    }

    // One direction: query tokens attended over kv tokens.
    Tensor<T> forward_direction(const std::string& dir, const Tensor<T>& xq, const Tensor<T>& xkv,
                                const ParameterTable<T>& p, SisDirectionCtx<T>* ctx) const {
        SisDirectionCtx<T> local;
        SisDirectionCtx<T>& c = ctx != nullptr ? *ctx : local;
        Tensor<T> attended = cross(dir).forward(xq, xkv, p, &c.cross);
        std::vector<const Tensor<T>*> parts{&attended, &xq};
        c.cat = concat_forward(parts, 1);
        c.proj = linear_forward(c.cat, p.at(prefix + "." + dir + ".proj.weight"),
                                &p.at(prefix + "." + dir + ".proj.bias"));
        return ffn(dir).forward(c.proj, p, &c.ffn);
    }

    // Returns (dxq, dxkv) of one direction.
    std::pair<Tensor<T>, Tensor<T>> backward_direction(const std::string& dir, const Tensor<T>& xq,
                                                       const Tensor<T>& xkv, const SisDirectionCtx<T>& ctx,
                                                       const Tensor<T>& g, const ParameterTable<T>& p,
                                                       ParameterTable<T>& grads) const {
        Tensor<T> dproj = ffn(dir).backward(ctx.ffn, g, p, grads);
        const Tensor<T>& w = p.at(prefix + "." + dir + ".proj.weight");
        Tensor<T> dcat;
        linear_backward(ctx.cat, w, dproj, &dcat, &grads.accum(prefix + "." + dir + ".proj.weight", w.shape()),
                        &grads.accum(prefix + "." + dir + ".proj.bias", {cfg.dim}));
        auto split = concat_backward<T>({{xq.dim(0), cfg.dim}, {xq.dim(0), cfg.dim}}, 1, dcat);
        auto [dxq_attn, dxkv] = cross(dir).backward(xq, xkv, ctx.cross, split[0], p, grads);
        return {add_forward(dxq_attn, split[1]), std::move(dxkv)};
    }

    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& img, const Tensor<T>& pc,
                                            const ParameterTable<T>& p, SisCtx<T>* ctx) const {
        SisCtx<T> local;
        SisCtx<T>& c = ctx != nullptr ? *ctx : local;
        Tensor<T> img2 = forward_direction("p2i", img, pc, p, &c.p2i);
        Tensor<T> pc2 = forward_direction("i2p", pc, img, p, &c.i2p);
        return {std::move(img2), std::move(pc2)};
    }

    // Returns (dimg, dpc).
    std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& img, const Tensor<T>& pc, const SisCtx<T>& ctx,
                                             const Tensor<T>& gimg, const Tensor<T>& gpc,
                                             const ParameterTable<T>& p, ParameterTable<T>& grads) const {
        auto [dimg_a, dpc_a] = backward_direction("p2i", img, pc, ctx.p2i, gimg, p, grads);
        auto [dpc_b, dimg_b] = backward_direction("i2p", pc, img, ctx.i2p, gpc, p, grads);
        return {add_forward(dimg_a, dimg_b), add_forward(dpc_a, dpc_b)};
    }
};

// ---------------------------------------------------------------------------
// feature-wise fusion: token-axis concatenation, inverted residual with a
// depth-wise convolution along the token axis, shortcut after the projection
// ---------------------------------------------------------------------------

template <typename T>
struct FfsCtx {
    Tensor<T> z;       // [L, d] concatenated tokens
    PwMlpCtx<T> expand;
    Tensor<T> dw_pre;  // [L, 2d] pre-relu depthwise output
    Tensor<T> dw_act;  // [L, 2d]
    int len_img = 0, len_pc = 0;
};

template <typename T>
struct FeatureFusion {
    int dim = 256;
    int expansion = 2;
    std::string prefix = "etm.ffs";

    int wide() const { return dim * expansion; }

    void init_params(ParameterTable<T>& p, Rng& rng) const {
        init::add_pwmlp(p, prefix + ".expand", dim, wide(), rng);
        // only the middle kernel row touches data on a height-1 signal
        p.add(prefix + ".dw.kernel", init::he_normal<T>({3, 3, 1, wide()}, 3, rng));
        p.add(prefix + ".dw.bias", Tensor<T>({wide()}));
        // zero projection: the block starts as the identity shortcut
        p.add(prefix + ".proj.weight", Tensor<T>({wide(), dim}));
        p.add(prefix + ".proj.bias", Tensor<T>({dim}));
    }

    Tensor<T> forward(const Tensor<T>& img, const Tensor<T>& pc, const ParameterTable<T>& p, Mode mode,
                      FfsCtx<T>* ctx) const {
        if (img.dim(1) != dim || pc.dim(1) != dim)
            throw ContractError("attention", "ffs: branch token dims must equal model dim");
        FfsCtx<T> local;
        FfsCtx<T>& c = ctx != nullptr ? *ctx : local;
        c.len_img = img.dim(0);
        c.len_pc = pc.dim(0);
        std::vector<const Tensor<T>*> parts{&img, &pc};
        c.z = concat_forward(parts, 0);
        const int len = c.z.dim(0);
        PwMlpLayer<T> expand{prefix + ".expand"};
        Tensor<T> e = expand.forward(c.z, p, mode, &c.expand);
        Conv2dSpec spec{1, 1, wide()};
        c.dw_pre = conv2d_forward(e.reshaped({1, len, wide()}), p.at(prefix + ".dw.kernel"),
                                  &p.at(prefix + ".dw.bias"), spec)
                       .reshaped({len, wide()});
        c.dw_act = relu_forward(c.dw_pre);
        Tensor<T> y = linear_forward(c.dw_act, p.at(prefix + ".proj.weight"), &p.at(prefix + ".proj.bias"));
        return add_forward(c.z, y);
    }

    // Returns (dimg, dpc).
    std::pair<Tensor<T>, Tensor<T>> backward(const FfsCtx<T>& ctx, const Tensor<T>& g,
                                             const ParameterTable<T>& p, Mode mode,
                                             ParameterTable<T>& grads) const {
        const int len = ctx.z.dim(0);
        Tensor<T> ddw_act;
        linear_backward(ctx.dw_act, p.at(prefix + ".proj.weight"), g, &ddw_act,
                        &grads.accum(prefix + ".proj.weight", {wide(), dim}),
                        &grads.accum(prefix + ".proj.bias", {dim}));
        Tensor<T> ddw_pre = relu_backward(ctx.dw_pre, ddw_act);
        Conv2dSpec spec{1, 1, wide()};
        Tensor<T> de3;
        conv2d_backward(ctx.expand.out.reshaped({1, len, wide()}), p.at(prefix + ".dw.kernel"),
                        ddw_pre.reshaped({1, len, wide()}), spec, &de3,
                        &grads.accum(prefix + ".dw.kernel", {3, 3, 1, wide()}),
                        &grads.accum(prefix + ".dw.bias", {wide()}));
        PwMlpLayer<T> expand{prefix + ".expand"};
        Tensor<T> dz = expand.backward(ctx.z, p, ctx.expand, de3.reshaped({len, wide()}), mode, grads);
        Tensor<T> dz_total = add_forward(dz, g);
        auto split = concat_backward<T>({{ctx.len_img, dim}, {ctx.len_pc, dim}}, 0, dz_total);
        return {std::move(split[0]), std::move(split[1])};
    }

    void update_running(const FfsCtx<T>& ctx, ParameterTable<T>& p) const {
        PwMlpLayer<T>{prefix + ".expand"}.update_running(ctx.expand, p);
    }
};

}  // namespace fuseloc
