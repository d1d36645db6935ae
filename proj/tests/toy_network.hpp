#pragma once

#include "fuseloc/network.hpp"

// Scaled-down network configuration shared by composite gradient checks and
// the acceptance suite: canonical wiring, toy dimensions.

namespace fuseloc_test {

inline fuseloc::NetworkConfig toy_network_config() {
    fuseloc::NetworkConfig cfg;
    cfg.image_h = 16;
    cfg.image_w = 8;
    cfg.patch_size = 2;
    cfg.stem_channels = 4;
    cfg.point = fuseloc::PointEmbedConfig{4, 10, 6, 6, 8, 3};
    cfg.attn.dim = 8;
    cfg.attn.heads = 2;
    cfg.attn.ffn_hidden = 12;
    cfg.attn.depth = 1;
    cfg.vlad.clusters = 4;
    cfg.vlad.groups = 2;
    cfg.vlad.expansion = 2;
    cfg.vlad.out_dim = 16;
    cfg.vlad_proj_scale = 0.5;
    return cfg;
}

// Biases start at zero, which parks relu pre-activations exactly on their
// kink; nudge every bias so central differences see a smooth neighborhood.
inline void nudge_biases(fuseloc::ParameterTable<double>& params, std::uint64_t seed) {
    fuseloc::Rng rng(seed);
    for (auto& e : params.entries()) {
        if (!e.trainable) continue;
        const bool is_bias = e.path.size() > 5 && e.path.substr(e.path.size() - 5) == ".bias";
        const bool is_beta = e.path.size() > 5 && e.path.substr(e.path.size() - 5) == ".beta";
        if (!is_bias && !is_beta) continue;
        for (std::int64_t i = 0; i < e.value.numel(); ++i) {
            const double n = rng.normal() * 0.05;
            e.value[i] += n + (n < 0 ? -0.1 : 0.1);
        }
    }
}

}  // namespace fuseloc_test
