#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fuseloc/params.hpp"
#include "fuseloc/pointops.hpp"
#include "fuseloc/primitives.hpp"
#include "fuseloc/rng.hpp"

// Tokenizers for the two input modalities: a small convolutional stem with
// non-overlapping patch flattening for images, and a cascaded-MLP stem with
// two sample-group-encode-pool stages for point clouds. Point positions enter
// the tokens only through a zero-initialized linear map of the surviving
// center coordinates, so at initialization the point tokens are functions of
// coordinate deltas alone.

namespace fuseloc {

namespace init {

template <typename T>
Tensor<T> he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
    return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(std::sqrt(2.0 / fan_in)));
}

template <typename T>
Tensor<T> xavier_normal(std::vector<int> shape, int fan_in, int fan_out, Rng& rng, double scale = 1.0) {
    return Tensor<T>::randn(std::move(shape), rng,
                            static_cast<T>(scale * std::sqrt(2.0 / (fan_in + fan_out))));
}

template <typename T>
void add_pwmlp(ParameterTable<T>& p, const std::string& prefix, int din, int dout, Rng& rng) {
    p.add(prefix + ".weight", he_normal<T>({din, dout}, din, rng));
    p.add(prefix + ".gamma", Tensor<T>::full({dout}, T(1)));
    p.add(prefix + ".beta", Tensor<T>({dout}));
    p.add(prefix + ".running_mean", Tensor<T>({dout}), /*trainable=*/false);
    p.add(prefix + ".running_var", Tensor<T>::full({dout}, T(1)), /*trainable=*/false);
}

}  // namespace init

// Runs one pointwise-mlp parameter set by path prefix.
template <typename T>
struct PwMlpLayer {
    std::string prefix;

    Tensor<T> forward(const Tensor<T>& x, const ParameterTable<T>& p, Mode mode, PwMlpCtx<T>* ctx) const {
        return pwmlp_forward(x, p.at(prefix + ".weight"), p.at(prefix + ".gamma"), p.at(prefix + ".beta"),
                             p.at(prefix + ".running_mean"), p.at(prefix + ".running_var"), mode, ctx);
    }

    Tensor<T> backward(const Tensor<T>& x, const ParameterTable<T>& p, const PwMlpCtx<T>& ctx,
                       const Tensor<T>& g, Mode mode, ParameterTable<T>& grads) const {
        Tensor<T> dx;
        pwmlp_backward(x, p.at(prefix + ".weight"), p.at(prefix + ".gamma"), p.at(prefix + ".beta"), ctx, g,
                       mode, &dx, &grads.accum(prefix + ".weight", p.at(prefix + ".weight").shape()),
                       &grads.accum(prefix + ".gamma", p.at(prefix + ".gamma").shape()),
                       &grads.accum(prefix + ".beta", p.at(prefix + ".beta").shape()));
        return dx;
    }

    void update_running(const PwMlpCtx<T>& ctx, ParameterTable<T>& p) const {
        pwmlp_update_running(ctx, p.at(prefix + ".running_mean"), p.at(prefix + ".running_var"));
    }
};

// ---------------------------------------------------------------------------
// Conv-patch embedding for images
// ---------------------------------------------------------------------------

template <typename T>
struct ConvPatchCtx {
    Tensor<T> conv_in[3];   // input of each stem conv (post-relu of previous)
    Tensor<T> conv_out[3];  // pre-relu conv outputs
    Tensor<T> patches;      // [Np, P*P*C] flattened windows
};

template <typename T>
struct ConvPatchEmbed {
    int patch = 8;
    int dim = 256;
    int stem_channels = 16;
    std::string prefix = "img";

    void init_params(ParameterTable<T>& p, Rng& rng) const {
        p.add(prefix + ".stem.conv1.kernel", init::he_normal<T>({3, 3, 3, stem_channels}, 27, rng));
        p.add(prefix + ".stem.conv1.bias", Tensor<T>({stem_channels}));
        for (int i = 2; i <= 3; ++i) {
            p.add(prefix + ".stem.conv" + std::to_string(i) + ".kernel",
                  init::he_normal<T>({3, 3, stem_channels, stem_channels}, 9 * stem_channels, rng));
            p.add(prefix + ".stem.conv" + std::to_string(i) + ".bias", Tensor<T>({stem_channels}));
        }
        const int pcols = patch * patch * stem_channels;
        p.add(prefix + ".patch.proj.weight", init::xavier_normal<T>({pcols, dim}, pcols, dim, rng));
        p.add(prefix + ".patch.proj.bias", Tensor<T>({dim}));
    }

    // Patch lattice of the canonical input (rows along the first image axis).
    int grid_rows(int h) const { return h / 2 / patch; }
    int grid_cols(int w) const { return w / 2 / patch; }
    int token_count(int h, int w) const { return grid_rows(h) * grid_cols(w); }

    Tensor<T> forward(const Tensor<T>& image, const ParameterTable<T>& p, ConvPatchCtx<T>* ctx) const {
        if (image.rank() != 3 || image.dim(2) != 3)
            throw ContractError("embedding", "image must be [H,W,3], got " + image.shape_string());
        const int h = image.dim(0), w = image.dim(1);
        if (h % (2 * patch) != 0 || w % (2 * patch) != 0)
            throw ContractError("embedding", "image dims " + std::to_string(h) + "x" + std::to_string(w) +
                                                 " must be divisible by 2*patch_size=" +
                                                 std::to_string(2 * patch));
        Conv2dSpec first{2, 1, 1}, rest{1, 1, 1};
        Tensor<T> x = image;
        ConvPatchCtx<T> local;
        ConvPatchCtx<T>& c = ctx != nullptr ? *ctx : local;
        for (int i = 0; i < 3; ++i) {
            const std::string base = prefix + ".stem.conv" + std::to_string(i + 1);
            c.conv_in[i] = x;
            Tensor<T> z = conv2d_forward(x, p.at(base + ".kernel"), &p.at(base + ".bias"),
                                         i == 0 ? first : rest);
            c.conv_out[i] = z;
            x = relu_forward(z);
        }
        // non-overlapping PxP windows, row-major over the patch lattice
        const int rows = grid_rows(h), cols = grid_cols(w);
        const int np = rows * cols, pcols = patch * patch * stem_channels;
        Tensor<T> patches({np, pcols});
        for (int pr = 0; pr < rows; ++pr)
            for (int pc = 0; pc < cols; ++pc) {
                T* dst = patches.data() + static_cast<std::int64_t>(pr * cols + pc) * pcols;
                for (int pi = 0; pi < patch; ++pi)
                    for (int pj = 0; pj < patch; ++pj) {
                        const T* src = &x(pr * patch + pi, pc * patch + pj, 0);
                        for (int cc = 0; cc < stem_channels; ++cc) *dst++ = src[cc];
                    }
            }
        c.patches = patches;
        return linear_forward(patches, p.at(prefix + ".patch.proj.weight"), &p.at(prefix + ".patch.proj.bias"));
    }

    void backward(const ConvPatchCtx<T>& ctx, const Tensor<T>& g, const ParameterTable<T>& p,
                  ParameterTable<T>& grads) const {
        const Tensor<T>& wproj = p.at(prefix + ".patch.proj.weight");
        Tensor<T> dpatches;
        linear_backward(ctx.patches, wproj, g, &dpatches,
                        &grads.accum(prefix + ".patch.proj.weight", wproj.shape()),
                        &grads.accum(prefix + ".patch.proj.bias", {dim}));
        // scatter patch rows back onto the conv3 activation grid
        const Tensor<T>& act = ctx.conv_out[2];
        const int hc = act.dim(0), wc = act.dim(1);
        const int rows = hc / patch, cols = wc / patch;
        Tensor<T> dact({hc, wc, stem_channels});
        const int pcols = patch * patch * stem_channels;
        for (int pr = 0; pr < rows; ++pr)
            for (int pc = 0; pc < cols; ++pc) {
                const T* src = dpatches.data() + static_cast<std::int64_t>(pr * cols + pc) * pcols;
                for (int pi = 0; pi < patch; ++pi)
                    for (int pj = 0; pj < patch; ++pj) {
                        T* dst = &dact(pr * patch + pi, pc * patch + pj, 0);
                        for (int cc = 0; cc < stem_channels; ++cc) dst[cc] = *src++;
                    }
            }
        Conv2dSpec first{2, 1, 1}, rest{1, 1, 1};
        Tensor<T> up = std::move(dact);
        for (int i = 2; i >= 0; --i) {
            const std::string base = prefix + ".stem.conv" + std::to_string(i + 1);
            up = relu_backward(ctx.conv_out[i], up);
            Tensor<T> dx;
            const Tensor<T>& kern = p.at(base + ".kernel");
            conv2d_backward(ctx.conv_in[i], kern, up, i == 0 ? first : rest,
                            i == 0 ? nullptr : &dx,  // the image itself is a leaf
                            &grads.accum(base + ".kernel", kern.shape()),
                            &grads.accum(base + ".bias", {stem_channels}));
            if (i > 0) up = std::move(dx);
        }
    }
};

// ---------------------------------------------------------------------------
// Set-abstraction stage: sample centers, group neighbors, encode deltas, pool
// ---------------------------------------------------------------------------

struct StageIndexCache {
    std::vector<int> fps;
    IndexMatrix nbr;
};

template <typename T>
struct SetAbstractionCtx {
    Tensor<T> grouped_flat;  // [m*k, D+3]
    PwMlpCtx<T> mlp1, mlp2;
    std::vector<int> argmax;
    StageIndexCache indices;
    std::vector<int> in_shape;  // [m, k, dout] of the pooled input
};

template <typename T>
struct SetAbstraction {
    int m_out = 512;
    int k = 16;
    int d_out = 128;
    std::string prefix;  // e.g. "pc.sa1"
    int fps_start = 0;

    void init_params(ParameterTable<T>& p, int d_in, Rng& rng) const {
        init::add_pwmlp(p, prefix + ".htheta.1", d_in + 3, d_out, rng);
        init::add_pwmlp(p, prefix + ".htheta.2", d_out, d_out, rng);
    }

    // Returns (sampled coords, pooled features). `cache` may carry the
    // parameter-independent sampling indices across repeated forwards.
    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& coords, const Tensor<T>& feats,
                                            const ParameterTable<T>& p, Mode mode,
                                            SetAbstractionCtx<T>* ctx,
                                            const StageIndexCache* cache = nullptr) const {
        if (feats.rank() != 2 || feats.dim(0) != coords.dim(0))
            throw ContractError("embedding", "set abstraction requires per-point features");
        StageIndexCache indices;
        if (cache != nullptr) {
            indices = *cache;
        } else {
            indices.fps = farthest_point_sample(coords, m_out, fps_start);
            Tensor<T> centers({m_out, 3});
            for (int i = 0; i < m_out; ++i)
                for (int c = 0; c < 3; ++c) centers(i, c) = coords(indices.fps[static_cast<std::size_t>(i)], c);
            indices.nbr = knn(centers, coords, k);
        }
        const int fdim = feats.dim(1);
        Tensor<T> centers({m_out, 3});
        Tensor<T> center_feats({m_out, fdim});
        for (int i = 0; i < m_out; ++i) {
            const int src = indices.fps[static_cast<std::size_t>(i)];
            for (int c = 0; c < 3; ++c) centers(i, c) = coords(src, c);
            for (int c = 0; c < fdim; ++c) center_feats(i, c) = feats(src, c);
        }
        Tensor<T> grouped = group_neighborhood(centers, center_feats, coords, feats, indices.nbr);
        Tensor<T> flat = grouped.reshaped({m_out * k, fdim + 3});
        SetAbstractionCtx<T> local;
        SetAbstractionCtx<T>& c = ctx != nullptr ? *ctx : local;
        c.grouped_flat = flat;
        c.indices = std::move(indices);
        PwMlpLayer<T> l1{prefix + ".htheta.1"}, l2{prefix + ".htheta.2"};
        Tensor<T> h1 = l1.forward(flat, p, mode, &c.mlp1);
        Tensor<T> h2 = l2.forward(h1, p, mode, &c.mlp2);
        c.in_shape = {m_out, k, d_out};
        Tensor<T> pooled = max_pool_set_forward(h2.reshaped({m_out, k, d_out}), &c.argmax);
        return {std::move(centers), std::move(pooled)};
    }

    // Propagates feature gradients back to the stage input; coordinates do
    // not carry gradients.
    Tensor<T> backward(const SetAbstractionCtx<T>& ctx, const Tensor<T>& g, const ParameterTable<T>& p,
                       Mode mode, ParameterTable<T>& grads, int n_input_points) const {
        Tensor<T> dh2 = max_pool_set_backward<T>(ctx.argmax, ctx.in_shape, g).reshaped({m_out * k, d_out});
        PwMlpLayer<T> l1{prefix + ".htheta.1"}, l2{prefix + ".htheta.2"};
        Tensor<T> dh1 = l2.backward(ctx.mlp1.out, p, ctx.mlp2, dh2, mode, grads);
        Tensor<T> dflat = l1.backward(ctx.grouped_flat, p, ctx.mlp1, dh1, mode, grads);
        const int fdim = dflat.dim(1) - 3;
        Tensor<T> dfeats({n_input_points, fdim});
        Tensor<T> dcenter_feats({m_out, fdim});
        group_backward(dflat.reshaped({m_out, k, fdim + 3}), ctx.indices.nbr, dfeats, dcenter_feats);
        for (int i = 0; i < m_out; ++i) {
            const int src = ctx.indices.fps[static_cast<std::size_t>(i)];
            for (int c = 0; c < fdim; ++c) dfeats(src, c) += dcenter_feats(i, c);
        }
        return dfeats;
    }

    void update_running(const SetAbstractionCtx<T>& ctx, ParameterTable<T>& p) const {
        PwMlpLayer<T>{prefix + ".htheta.1"}.update_running(ctx.mlp1, p);
        PwMlpLayer<T>{prefix + ".htheta.2"}.update_running(ctx.mlp2, p);
    }
};

// ---------------------------------------------------------------------------
// Full point-cloud embedding: stem MLPs, two abstraction stages, positional
// projection of the surviving coordinates
// ---------------------------------------------------------------------------

struct PointEmbedConfig {
    int stem_dim = 64;
    int sa1_points = 512;
    int sa1_dim = 128;
    int sa2_points = 256;
    int sa2_dim = 256;
    int k = 16;
};

struct PointEmbedCache {
    StageIndexCache sa1, sa2;
    bool ready = false;
};

template <typename T>
struct PointTokens {
    Tensor<T> tokens;  // [N_t, d]
    Tensor<T> coords;  // [N_t, 3]
};

template <typename T>
struct PointEmbedCtx {
    Tensor<T> cloud;
    PwMlpCtx<T> stem1, stem2;
    SetAbstractionCtx<T> sa1, sa2;
    Tensor<T> sa1_coords, sa1_feats;
    Tensor<T> out_coords;
};

template <typename T>
struct PointEmbed {
    PointEmbedConfig cfg;
    std::string prefix = "pc";

    SetAbstraction<T> stage1() const { return {cfg.sa1_points, cfg.k, cfg.sa1_dim, prefix + ".sa1", 0}; }
    SetAbstraction<T> stage2() const { return {cfg.sa2_points, cfg.k, cfg.sa2_dim, prefix + ".sa2", 0}; }

    void init_params(ParameterTable<T>& p, Rng& rng) const {
        init::add_pwmlp(p, prefix + ".stem.mlp1", 3, cfg.stem_dim, rng);
        init::add_pwmlp(p, prefix + ".stem.mlp2", cfg.stem_dim, cfg.stem_dim, rng);
        stage1().init_params(p, cfg.stem_dim, rng);
        stage2().init_params(p, cfg.sa1_dim, rng);
        // positional projection starts at zero: translation invariance of the
        // delta features is preserved at initialization, training may opt in
        p.add(prefix + ".pos.linear.weight", Tensor<T>({3, cfg.sa2_dim}));
        p.add(prefix + ".pos.linear.bias", Tensor<T>({cfg.sa2_dim}));
    }

    // Fills the stage index cache (parameter-independent) for repeated
    // forwards over the same cloud.
    void build_cache(const Tensor<T>& cloud, PointEmbedCache* cache) const {
        SetAbstraction<T> s1 = stage1();
        cache->sa1.fps = farthest_point_sample(cloud, s1.m_out, s1.fps_start);
        Tensor<T> c1({s1.m_out, 3});
        for (int i = 0; i < s1.m_out; ++i)
            for (int c = 0; c < 3; ++c) c1(i, c) = cloud(cache->sa1.fps[static_cast<std::size_t>(i)], c);
        cache->sa1.nbr = knn(c1, cloud, s1.k);
        SetAbstraction<T> s2 = stage2();
        cache->sa2.fps = farthest_point_sample(c1, s2.m_out, s2.fps_start);
        Tensor<T> c2({s2.m_out, 3});
        for (int i = 0; i < s2.m_out; ++i)
            for (int c = 0; c < 3; ++c) c2(i, c) = c1(cache->sa2.fps[static_cast<std::size_t>(i)], c);
        cache->sa2.nbr = knn(c2, c1, s2.k);
        cache->ready = true;
    }

    PointTokens<T> forward(const Tensor<T>& cloud, const ParameterTable<T>& p, Mode mode,
                           PointEmbedCtx<T>* ctx, const PointEmbedCache* cache = nullptr) const {
        if (cloud.rank() != 2 || cloud.dim(1) != 3)
            throw ContractError("embedding", "cloud must be [N,3], got " + cloud.shape_string());
        if (cloud.dim(0) < cfg.sa1_points || cloud.dim(0) < cfg.k)
            throw ContractError("embedding", "too few points: " + std::to_string(cloud.dim(0)) +
                                                 " < stage requirement " + std::to_string(cfg.sa1_points));
        PointEmbedCtx<T> local;
        PointEmbedCtx<T>& c = ctx != nullptr ? *ctx : local;
        c.cloud = cloud;
        PwMlpLayer<T> s1{prefix + ".stem.mlp1"}, s2{prefix + ".stem.mlp2"};
        Tensor<T> f0 = s1.forward(cloud, p, mode, &c.stem1);
        Tensor<T> f1 = s2.forward(f0, p, mode, &c.stem2);
        auto [c1, g1] = stage1().forward(cloud, f1, p, mode, &c.sa1,
                                         cache != nullptr && cache->ready ? &cache->sa1 : nullptr);
        c.sa1_coords = c1;
        c.sa1_feats = g1;
        auto [c2, g2] = stage2().forward(c1, g1, p, mode, &c.sa2,
                                         cache != nullptr && cache->ready ? &cache->sa2 : nullptr);
        c.out_coords = c2;
        Tensor<T> pos = linear_forward(c2, p.at(prefix + ".pos.linear.weight"),
                                       &p.at(prefix + ".pos.linear.bias"));
        return {add_forward(g2, pos), std::move(c2)};
    }

    void backward(const PointEmbedCtx<T>& ctx, const Tensor<T>& g, const ParameterTable<T>& p, Mode mode,
                  ParameterTable<T>& grads) const {
        const Tensor<T>& wpos = p.at(prefix + ".pos.linear.weight");
        linear_backward(ctx.out_coords, wpos, g, static_cast<Tensor<T>*>(nullptr),
                        &grads.accum(prefix + ".pos.linear.weight", wpos.shape()),
                        &grads.accum(prefix + ".pos.linear.bias", {cfg.sa2_dim}));
        Tensor<T> dg1 = stage2().backward(ctx.sa2, g, p, mode, grads, cfg.sa1_points);
        Tensor<T> df1 = stage1().backward(ctx.sa1, dg1, p, mode, grads, ctx.cloud.dim(0));
        PwMlpLayer<T> s1{prefix + ".stem.mlp1"}, s2{prefix + ".stem.mlp2"};
        Tensor<T> df0 = s2.backward(ctx.stem1.out, p, ctx.stem2, df1, mode, grads);
        Tensor<T> dcloud;
        pwmlp_backward(ctx.cloud, p.at(prefix + ".stem.mlp1.weight"), p.at(prefix + ".stem.mlp1.gamma"),
                       p.at(prefix + ".stem.mlp1.beta"), ctx.stem1, df0, mode,
                       static_cast<Tensor<T>*>(nullptr),
                       &grads.accum(prefix + ".stem.mlp1.weight", p.at(prefix + ".stem.mlp1.weight").shape()),
                       &grads.accum(prefix + ".stem.mlp1.gamma", p.at(prefix + ".stem.mlp1.gamma").shape()),
                       &grads.accum(prefix + ".stem.mlp1.beta", p.at(prefix + ".stem.mlp1.beta").shape()));
        (void)dcloud;
    }

    void update_running(const PointEmbedCtx<T>& ctx, ParameterTable<T>& p) const {
        PwMlpLayer<T>{prefix + ".stem.mlp1"}.update_running(ctx.stem1, p);
        PwMlpLayer<T>{prefix + ".stem.mlp2"}.update_running(ctx.stem2, p);
        stage1().update_running(ctx.sa1, p);
        stage2().update_running(ctx.sa2, p);
    }
};

}  // namespace fuseloc
