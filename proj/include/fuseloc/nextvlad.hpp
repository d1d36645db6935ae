#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fuseloc/embedding.hpp"
#include "fuseloc/params.hpp"
#include "fuseloc/primitives.hpp"
#include "fuseloc/reduce.hpp"

// Grouped, attention-gated VLAD aggregation of a token sequence into one
// compact sub-descriptor, and assembly of the three-branch global descriptor.
//
// Residual accumulation over tokens runs through the exact accumulator: the
// aggregate is bit-identical under token permutation, and doubling every
// token doubles the pre-normalization aggregate exactly.

namespace fuseloc {

struct NeXtVladConfig {
    int clusters = 64;  // K
    int groups = 8;     // G
    int expansion = 2;  // width multiplier
    int out_dim = 256;

    void validate(int dim) const {
        if (clusters < 1 || groups < 1 || expansion < 1 || out_dim < 1)
            throw ContractError("aggregation", "NeXtVLAD config values must be positive");
        if ((expansion * dim) % groups != 0)
            throw ContractError("aggregation", "expanded dim " + std::to_string(expansion * dim) +
                                                   " not divisible by groups " + std::to_string(groups));
    }

    int wide(int dim) const { return expansion * dim; }
    int group_dim(int dim) const { return expansion * dim / groups; }
};

template <typename T>
struct NeXtVladCtx {
    Tensor<T> xe;        // [L, wide] expanded tokens
    Tensor<T> assign;    // [L, G, K] softmax cluster assignment
    Tensor<T> gates;     // [L, G] sigmoid attention gates
    Tensor<T> vlad;      // [K, gd] pre-normalization aggregate
    Tensor<T> vlad_n;    // [K, gd] intra-normalized
    std::vector<T> vlad_norms;
    std::vector<double> wsum;  // per-cluster sum of gate*assign over tokens
    Tensor<T> proj_out;        // [1, out] pre-normalization projection
    std::vector<T> out_norm;
};

template <typename T>
struct NeXtVlad {
    NeXtVladConfig cfg;
    int dim = 256;
    std::string prefix;
    double proj_scale = 0.1;  // initial scale of the output projection

    void init_params(ParameterTable<T>& p, Rng& rng) const {
        cfg.validate(dim);
        const int wide = cfg.wide(dim), gd = cfg.group_dim(dim);
        p.add(prefix + ".expand.weight", init::xavier_normal<T>({dim, wide}, dim, wide, rng));
        p.add(prefix + ".expand.bias", Tensor<T>({wide}));
        p.add(prefix + ".assign.weight",
              init::xavier_normal<T>({wide, cfg.groups * cfg.clusters}, wide, cfg.groups * cfg.clusters, rng));
        p.add(prefix + ".assign.bias", Tensor<T>({cfg.groups * cfg.clusters}));
        p.add(prefix + ".gate.weight", init::xavier_normal<T>({wide, cfg.groups}, wide, cfg.groups, rng));
        p.add(prefix + ".gate.bias", Tensor<T>({cfg.groups}));
        p.add(prefix + ".clusters", Tensor<T>::randn({cfg.clusters, gd}, rng,
                                                     static_cast<T>(1.0 / std::sqrt(static_cast<double>(gd)))));
        p.add(prefix + ".proj.weight",
              init::xavier_normal<T>({cfg.clusters * gd, cfg.out_dim}, cfg.clusters * gd, cfg.out_dim, rng,
                                     proj_scale));
    }

    // tokens [L, dim] -> L2-normalized sub-descriptor [out_dim]
    Tensor<T> forward(const Tensor<T>& tokens, const ParameterTable<T>& p, NeXtVladCtx<T>* ctx) const {
        if (tokens.rank() != 2 || tokens.dim(1) != dim)
            throw ContractError("aggregation", "tokens must be [L," + std::to_string(dim) + "], got " +
                                                   tokens.shape_string());
        if (tokens.dim(0) < 1) throw ContractError("aggregation", "empty token list");
        const int len = tokens.dim(0), wide = cfg.wide(dim), gd = cfg.group_dim(dim);
        const int kk = cfg.clusters, gg = cfg.groups;
        NeXtVladCtx<T> local;
        NeXtVladCtx<T>& c = ctx != nullptr ? *ctx : local;

        c.xe = linear_forward(tokens, p.at(prefix + ".expand.weight"), &p.at(prefix + ".expand.bias"));
        Tensor<T> logits = linear_forward(c.xe, p.at(prefix + ".assign.weight"), &p.at(prefix + ".assign.bias"));
        c.assign = softmax_rows_forward(logits.reshaped({len * gg, kk})).reshaped({len, gg, kk});
        c.gates = sigmoid_forward(
            linear_forward(c.xe, p.at(prefix + ".gate.weight"), &p.at(prefix + ".gate.bias")));

        const Tensor<T>& clusters = p.at(prefix + ".clusters");
        ExactColumnSums acc(kk * gd);
        c.wsum.assign(static_cast<std::size_t>(kk), 0.0);
        std::vector<T> contrib(static_cast<std::size_t>(kk) * gd);
        for (int i = 0; i < len; ++i) {
            const T* xg = c.xe.data() + static_cast<std::int64_t>(i) * wide;  // groups are slices of xe
            for (auto& v : contrib) v = T(0);
            for (int k = 0; k < kk; ++k) {
                T wk = T(0);
                for (int g = 0; g < gg; ++g) wk += c.gates(i, g) * c.assign(i, g, k);
                c.wsum[static_cast<std::size_t>(k)] += static_cast<double>(wk);
                T* row = contrib.data() + static_cast<std::size_t>(k) * gd;
                const T* ck = clusters.data() + static_cast<std::int64_t>(k) * gd;
                for (int g = 0; g < gg; ++g) {
                    const T q = c.gates(i, g) * c.assign(i, g, k);
                    const T* x = xg + g * gd;
                    for (int j = 0; j < gd; ++j) row[j] += q * x[j];
                }
                for (int j = 0; j < gd; ++j) row[j] -= wk * ck[j];
            }
            // one rounded contribution per (token, cluster, coordinate)
            acc.add_rows(contrib.data(), 1);
        }
        c.vlad = Tensor<T>({kk, gd});
        for (std::int64_t idx = 0; idx < c.vlad.numel(); ++idx)
            c.vlad[idx] = static_cast<T>(acc.value(static_cast<int>(idx)));

        c.vlad_n = l2_normalize_rows_forward(c.vlad, &c.vlad_norms);
        Tensor<T> flat = c.vlad_n.reshaped({1, kk * gd});
        c.proj_out = linear_forward(flat, p.at(prefix + ".proj.weight"), static_cast<const Tensor<T>*>(nullptr));
        Tensor<T> normalized = l2_normalize_rows_forward(c.proj_out, &c.out_norm);
        return normalized.reshaped({cfg.out_dim});
    }

    Tensor<T> backward(const Tensor<T>& tokens, const NeXtVladCtx<T>& ctx, const Tensor<T>& g,
                       const ParameterTable<T>& p, ParameterTable<T>& grads) const {
        const int len = tokens.dim(0), wide = cfg.wide(dim), gd = cfg.group_dim(dim);
        const int kk = cfg.clusters, gg = cfg.groups;
        const Tensor<T>& clusters = p.at(prefix + ".clusters");

        Tensor<T> yout = l2_normalize_rows_forward(ctx.proj_out, static_cast<std::vector<T>*>(nullptr));
        Tensor<T> dproj = l2_normalize_rows_backward(yout, ctx.out_norm, g.reshaped({1, cfg.out_dim}));

        const Tensor<T>& wp = p.at(prefix + ".proj.weight");
        Tensor<T> dflat;
        linear_backward(ctx.vlad_n.reshaped({1, kk * gd}), wp, dproj, &dflat,
                        &grads.accum(prefix + ".proj.weight", wp.shape()), static_cast<Tensor<T>*>(nullptr));
        Tensor<T> dvlad =
            l2_normalize_rows_backward(ctx.vlad_n, ctx.vlad_norms, dflat.reshaped({kk, gd}));

        // cluster centers: d/dc_k = -(sum_i w_ik) * dV[k]
        Tensor<T>& dclusters = grads.accum(prefix + ".clusters", clusters.shape());
        for (int k = 0; k < kk; ++k)
            for (int j = 0; j < gd; ++j)
                dclusters(k, j) -= static_cast<T>(ctx.wsum[static_cast<std::size_t>(k)]) * dvlad(k, j);

        Tensor<T> dxe({len, wide});
        Tensor<T> dassign_logits({len * gg, kk});
        Tensor<T> dgates({len, gg});
        std::vector<T> dq(static_cast<std::size_t>(gg) * kk);
        for (int i = 0; i < len; ++i) {
            const T* xg = ctx.xe.data() + static_cast<std::int64_t>(i) * wide;
            T* dxg = dxe.data() + static_cast<std::int64_t>(i) * wide;
            // dq_igk = dV[k] . (x_g - c_k);  dx_g += sum_k q_igk dV[k]
            for (int g = 0; g < gg; ++g) {
                const T* x = xg + g * gd;
                T* dx = dxg + g * gd;
                for (int k = 0; k < kk; ++k) {
                    const T* dv = dvlad.data() + static_cast<std::int64_t>(k) * gd;
                    const T* ck = clusters.data() + static_cast<std::int64_t>(k) * gd;
                    const T q = ctx.gates(i, g) * ctx.assign(i, g, k);
                    T acc = T(0);
                    for (int j = 0; j < gd; ++j) {
                        acc += dv[j] * (x[j] - ck[j]);
                        dx[j] += q * dv[j];
                    }
                    dq[static_cast<std::size_t>(g) * kk + k] = acc;
                }
            }
            for (int g = 0; g < gg; ++g) {
                T dgate = T(0);
                for (int k = 0; k < kk; ++k) {
                    const T dqv = dq[static_cast<std::size_t>(g) * kk + k];
                    dgate += dqv * ctx.assign(i, g, k);
                    dassign_logits(i * gg + g, k) = dqv * ctx.gates(i, g);  // pre-softmax fixup below
                }
                dgates(i, g) = dgate;
            }
        }
        // softmax backward per (token, group) row
        Tensor<T> dlogits = softmax_rows_backward(ctx.assign.reshaped({len * gg, kk}), dassign_logits);
        // sigmoid backward on the gates
        Tensor<T> dgate_pre = sigmoid_backward(ctx.gates, dgates);

        const Tensor<T>& wa = p.at(prefix + ".assign.weight");
        const Tensor<T>& wg = p.at(prefix + ".gate.weight");
        Tensor<T> dxe_assign;
        linear_backward(ctx.xe, wa, dlogits.reshaped({len, gg * kk}), &dxe_assign,
                        &grads.accum(prefix + ".assign.weight", wa.shape()),
                        &grads.accum(prefix + ".assign.bias", {gg * kk}));
        Tensor<T> dxe_gate;
        linear_backward(ctx.xe, wg, dgate_pre, &dxe_gate, &grads.accum(prefix + ".gate.weight", wg.shape()),
                        &grads.accum(prefix + ".gate.bias", {gg}));
        for (std::int64_t i = 0; i < dxe.numel(); ++i) dxe[i] += dxe_assign[i] + dxe_gate[i];

        const Tensor<T>& we = p.at(prefix + ".expand.weight");
        Tensor<T> dtokens;
        linear_backward(tokens, we, dxe, &dtokens, &grads.accum(prefix + ".expand.weight", we.shape()),
                        &grads.accum(prefix + ".expand.bias", {wide}));
        return dtokens;
    }
};

// ---------------------------------------------------------------------------
// three-branch global descriptor
// ---------------------------------------------------------------------------

// Canonical deployment dimensions; files and evaluation require them.
inline constexpr int kSubDescriptorDim = 256;
inline constexpr int kGlobalDescriptorDim = 3 * kSubDescriptorDim;

// Fixed segment order: [image; point; fusion]. Each input must already be an
// L2-normalized sub-descriptor of the same dim (256 canonically); the result
// is not re-normalized, so squared distances decompose exactly into
// per-branch terms.
template <typename T>
Tensor<T> assemble_global_descriptor(const Tensor<T>& img_sub, const Tensor<T>& pc_sub,
                                     const Tensor<T>& fusion_sub) {
    const int dim = img_sub.rank() == 1 ? img_sub.dim(0) : -1;
    for (const Tensor<T>* s : {&img_sub, &pc_sub, &fusion_sub})
        if (s->rank() != 1 || s->dim(0) != dim || dim < 1)
            throw ContractError("aggregation", "sub-descriptor segments must be equal rank-1 vectors, got " +
                                                   img_sub.shape_string() + "/" + pc_sub.shape_string() +
                                                   "/" + fusion_sub.shape_string());
    Tensor<T> out({3 * dim});
    for (int i = 0; i < dim; ++i) {
        out[i] = img_sub[i];
        out[dim + i] = pc_sub[i];
        out[2 * dim + i] = fusion_sub[i];
    }
    return out;
}

}  // namespace fuseloc
