#pragma once

// Shared builders for decoder-level tests: a small configuration, random
// feature maps, and fully initialized parameter stores.

#include <vector>

#include "qrlab/decoder.hpp"
#include "qrlab/rng.hpp"

namespace testutil {

inline qrlab::DecoderConfig small_config() {
    qrlab::DecoderConfig cfg;
    cfg.stages = 6;
    cfg.queries = 5;
    cfg.dim = 8;
    cfg.ffn_hidden = 12;
    cfg.classes = 3;
    cfg.grid_h = 3;
    cfg.grid_w = 3;
    return cfg;
}

inline qrlab::FeatureMap random_features(const qrlab::DecoderConfig& cfg, qrlab::Rng& rng) {
    qrlab::FeatureMap x;
    x.h = cfg.grid_h;
    x.w = cfg.grid_w;
    x.channels = cfg.feat_channels();
    x.cells.resize(static_cast<std::size_t>(x.cell_count()) * x.channels);
    for (double& v : x.cells) v = rng.uniform(-1.0, 1.0);
    return x;
}

inline qrlab::ParamStore make_params(const qrlab::DecoderConfig& cfg, std::uint64_t seed) {
    qrlab::ParamStore ps;
    qrlab::Rng rng(seed);
    qrlab::create_decoder_params(ps, cfg, rng);
    return ps;
}

inline bool bitwise_equal(const qrlab::Tensor& a, const qrlab::Tensor& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.values()[i] != b.values()[i]) return false;
    return true;
}

} // namespace testutil
