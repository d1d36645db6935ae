#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fuseloc/attention.hpp"
#include "fuseloc/embedding.hpp"
#include "fuseloc/nextvlad.hpp"
#include "fuseloc/params.hpp"

// Assembly of the full three-branch descriptor network:
//   image  -> conv-patch embed -> transformer blocks -> NeXtVLAD -> 256-d
//   points -> point embed      -> transformer blocks -> NeXtVLAD -> 256-d
//   fusion -> sequence interaction + feature fusion  -> NeXtVLAD -> 256-d
// concatenated (image; point; fusion) into the 768-d global descriptor.

namespace fuseloc {

struct NetworkConfig {
    int image_h = 320;  // first image axis of the canonical input
    int image_w = 96;   // second image axis
    int patch_size = 8;
    int stem_channels = 16;
    PointEmbedConfig point;
    AttentionConfig attn;
    NeXtVladConfig vlad;
    double vlad_proj_scale = 0.1;

    int dim() const { return attn.dim; }

    void validate() const {
        attn.validate();
        vlad.validate(attn.dim);
        if (image_h % (2 * patch_size) != 0 || image_w % (2 * patch_size) != 0)
            throw ContractError("network", "image dims must be divisible by 2*patch_size");
        if (point.sa2_dim != attn.dim)
            throw ContractError("network", "final point feature dim must equal model dim");
    }
};

template <typename T>
struct NetworkTrace {
    ConvPatchCtx<T> patch;
    Tensor<T> patch_tokens;
    PointEmbedCtx<T> point;
    Tensor<T> point_tokens;
    std::vector<BlockCtx<T>> itm_img, itm_pc;
    Tensor<T> img_enc, pc_enc;  // branch tokens after the ITM
    SisCtx<T> sis;
    Tensor<T> img_sis, pc_sis;
    FfsCtx<T> ffs;
    Tensor<T> fused;
    NeXtVladCtx<T> vlad_img, vlad_pc, vlad_fus;
};

// Parameter-independent per-sample state that may be reused across training
// steps: the point-sampling index structure depends only on coordinates.
struct SampleCache {
    PointEmbedCache point;
};

template <typename T>
struct ThreeBranchNetwork {
    NetworkConfig cfg;

    ConvPatchEmbed<T> patch_embed() const {
        return {cfg.patch_size, cfg.dim(), cfg.stem_channels, "img"};
    }
    PointEmbed<T> point_embed() const { return {cfg.point, "pc"}; }
    TransformerBlock<T> itm_block(const char* branch, int i) const {
        return {cfg.attn, std::string("itm.") + branch + ".block" + std::to_string(i)};
    }
    SequenceInteraction<T> sis() const { return {cfg.attn, "etm.sis"}; }
    FeatureFusion<T> ffs() const { return {cfg.dim(), 2, "etm.ffs"}; }
    NeXtVlad<T> vlad(const char* branch) const {
        return {cfg.vlad, cfg.dim(), std::string("agg.") + branch, cfg.vlad_proj_scale};
    }

    void init_params(ParameterTable<T>& p, std::uint64_t seed) const {
        cfg.validate();
        Rng rng(seed);
        patch_embed().init_params(p, rng);
        point_embed().init_params(p, rng);
        for (int i = 0; i < cfg.attn.depth; ++i) itm_block("img", i).init_params(p, rng);
        for (int i = 0; i < cfg.attn.depth; ++i) itm_block("pc", i).init_params(p, rng);
        sis().init_params(p, rng);
        ffs().init_params(p, rng);
        vlad("img").init_params(p, rng);
        vlad("pc").init_params(p, rng);
        vlad("fus").init_params(p, rng);
    }

    // image [H,W,3] in [0,1], cloud [N,3] meters -> global descriptor [768]
    Tensor<T> forward(const Tensor<T>& image, const Tensor<T>& cloud, const ParameterTable<T>& p,
                      Mode mode, NetworkTrace<T>* trace, const SampleCache* cache = nullptr) const {
        NetworkTrace<T> local;
        NetworkTrace<T>& t = trace != nullptr ? *trace : local;
        t.patch_tokens = patch_embed().forward(image, p, &t.patch);
        PointTokens<T> pts = point_embed().forward(cloud, p, mode, &t.point,
                                                   cache != nullptr ? &cache->point : nullptr);
        t.point_tokens = pts.tokens;

        t.itm_img.resize(static_cast<std::size_t>(cfg.attn.depth));
        t.itm_pc.resize(static_cast<std::size_t>(cfg.attn.depth));
        Tensor<T> xi = t.patch_tokens;
        for (int i = 0; i < cfg.attn.depth; ++i)
            xi = itm_block("img", i).forward(xi, p, &t.itm_img[static_cast<std::size_t>(i)]);
        Tensor<T> xp = t.point_tokens;
        for (int i = 0; i < cfg.attn.depth; ++i)
            xp = itm_block("pc", i).forward(xp, p, &t.itm_pc[static_cast<std::size_t>(i)]);
        t.img_enc = xi;
        t.pc_enc = xp;

        auto [img2, pc2] = sis().forward(t.img_enc, t.pc_enc, p, &t.sis);
        t.img_sis = std::move(img2);
        t.pc_sis = std::move(pc2);
        t.fused = ffs().forward(t.img_sis, t.pc_sis, p, mode, &t.ffs);

        Tensor<T> sub_img = vlad("img").forward(t.img_enc, p, &t.vlad_img);
        Tensor<T> sub_pc = vlad("pc").forward(t.pc_enc, p, &t.vlad_pc);
        Tensor<T> sub_fus = vlad("fus").forward(t.fused, p, &t.vlad_fus);
        return assemble_global_descriptor(sub_img, sub_pc, sub_fus);
    }

    void backward(const NetworkTrace<T>& t, const Tensor<T>& g_global, const ParameterTable<T>& p,
                  Mode mode, ParameterTable<T>& grads) const {
        const int sub = cfg.vlad.out_dim;
        if (g_global.rank() != 1 || g_global.dim(0) != 3 * sub)
            throw ContractError("network", "descriptor gradient must be [" + std::to_string(3 * sub) + "]");
        Tensor<T> g_img({sub}), g_pc({sub}), g_fus({sub});
        for (int i = 0; i < sub; ++i) {
            g_img[i] = g_global[i];
            g_pc[i] = g_global[sub + i];
            g_fus[i] = g_global[2 * sub + i];
        }
        Tensor<T> dfused = vlad("fus").backward(t.fused, t.vlad_fus, g_fus, p, grads);
        auto [dimg_sis, dpc_sis] = ffs().backward(t.ffs, dfused, p, mode, grads);
        auto [dimg_enc, dpc_enc] = sis().backward(t.img_enc, t.pc_enc, t.sis, dimg_sis, dpc_sis, p, grads);
        Tensor<T> dimg_v = vlad("img").backward(t.img_enc, t.vlad_img, g_img, p, grads);
        Tensor<T> dpc_v = vlad("pc").backward(t.pc_enc, t.vlad_pc, g_pc, p, grads);
        Tensor<T> dxi = add_forward(dimg_enc, dimg_v);
        Tensor<T> dxp = add_forward(dpc_enc, dpc_v);
        for (int i = cfg.attn.depth - 1; i >= 0; --i)
            dxi = itm_block("img", i).backward(t.itm_img[static_cast<std::size_t>(i)], dxi, p, grads);
        for (int i = cfg.attn.depth - 1; i >= 0; --i)
            dxp = itm_block("pc", i).backward(t.itm_pc[static_cast<std::size_t>(i)], dxp, p, grads);
        patch_embed().backward(t.patch, dxi, p, grads);
        point_embed().backward(t.point, dxp, p, mode, grads);
    }

    // Advances every batch-norm running statistic from a training forward.
    void update_running(const NetworkTrace<T>& t, ParameterTable<T>& p) const {
        point_embed().update_running(t.point, p);
        ffs().update_running(t.ffs, p);
    }

    // Fills the reusable per-sample index cache.
    void build_cache(const Tensor<T>& cloud, SampleCache* cache) const {
        point_embed().build_cache(cloud, &cache->point);
    }
};

// ---------------------------------------------------------------------------
// descriptor file ("FLD1"): magic, u32 count, u32 dim, count*dim float32 LE
// ---------------------------------------------------------------------------

inline void save_descriptors(const std::vector<Tensor<float>>& descriptors, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("aggregation", "cannot open '" + path + "' for writing");
    os.write("FLD1", 4);
    const std::uint32_t count = static_cast<std::uint32_t>(descriptors.size());
    const std::uint32_t dim = count > 0 ? static_cast<std::uint32_t>(descriptors[0].numel())
                                        : static_cast<std::uint32_t>(kGlobalDescriptorDim);
    detail::write_bytes(os, &count, 4);
    detail::write_bytes(os, &dim, 4);
    for (const auto& d : descriptors) {
        if (static_cast<std::uint32_t>(d.numel()) != dim)
            throw ContractError("aggregation", "descriptor dim mismatch while writing '" + path + "'");
        detail::write_bytes(os, d.data(), sizeof(float) * dim);
    }
    if (!os) throw IoError("aggregation", "write failed for '" + path + "'");
}

// Returns a [count, dim] matrix.
inline Tensor<float> load_descriptors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("aggregation", "cannot open '" + path + "'");
    char magic[4];
    detail::read_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, "FLD1", 4) != 0)
        throw FormatError("aggregation", "bad magic in '" + path + "'");
    std::uint32_t count = 0, dim = 0;
    detail::read_bytes(is, &count, 4, "count");
    detail::read_bytes(is, &dim, 4, "dim");
    if (count == 0 || dim == 0 || dim > (1u << 20))
        throw FormatError("aggregation", "implausible descriptor header in '" + path + "'");
    Tensor<float> m({static_cast<int>(count), static_cast<int>(dim)});
    detail::read_bytes(is, m.data(), sizeof(float) * count * dim, "descriptor data");
    return m;
}

}  // namespace fuseloc
