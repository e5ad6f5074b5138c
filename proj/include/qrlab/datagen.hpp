#pragma once

// Deterministic synthetic detection task. A scene is a handful of axis-
// aligned boxes with class labels; rendering paints each box's class channel
// over the grid cells whose centers it covers, adds Gaussian noise, and
// appends clean positional channels plus two pure-noise context channels.
// Everything is a pure function of (config, seed).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "qrlab/decoder.hpp"
#include "qrlab/errors.hpp"
#include "qrlab/geometry.hpp"
#include "qrlab/matching.hpp"
#include "qrlab/rng.hpp"

namespace qrlab {

struct DatagenConfig {
    int grid_h = 16;
    int grid_w = 16;
    int classes = 4; // K; channel count is K + 4
    int min_objects = 2;
    int max_objects = 8;
    double min_side = 0.08; // never below 0.05
    double max_side = 0.35;
    double max_overlap = 0.7; // pairwise IoU cap among scene boxes
    double noise_sigma = 0.25;

    int feat_channels() const { return classes + 4; }
};

struct Scene {
    GroundTruth gt;
    std::uint64_t seed = 0;
};

struct RenderedSample {
    FeatureMap features;
    GroundTruth gt;
    std::uint64_t seed = 0;
};

/// Rejection-samples boxes until the pairwise-overlap cap holds. The object
/// count, box geometry, and labels all derive from the seed alone.
inline Scene generate_scene(const DatagenConfig& cfg, std::uint64_t seed) {
    if (cfg.min_side < 0.05) throw ConfigError("scene boxes must have sides of at least 0.05");
    if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects)
        throw ConfigError("invalid scene object-count range");
    Rng rng(derive_seed(seed, 0x5ce4e5ULL, 1));
    Scene scene;
    scene.seed = seed;
    const int target = cfg.min_objects +
                       static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
    int attempts = 0;
    while (scene.gt.count() < target) {
        if (++attempts > 10000) throw ContractError("scene sampling failed to satisfy the overlap cap");
        BBox b;
        b.w = cfg.min_side + (cfg.max_side - cfg.min_side) * rng.uniform01();
        b.h = cfg.min_side + (cfg.max_side - cfg.min_side) * rng.uniform01();
        b.cx = b.w / 2.0 + (1.0 - b.w) * rng.uniform01();
        b.cy = b.h / 2.0 + (1.0 - b.h) * rng.uniform01();
        const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.classes)));
        bool ok = true;
        for (const auto& other : scene.gt.boxes)
            if (iou(b, other) > cfg.max_overlap) {
                ok = false;
                break;
            }
        if (!ok) continue;
        scene.gt.boxes.push_back(b);
        scene.gt.labels.push_back(label);
    }
    return scene;
}

namespace detail {

inline bool center_inside(double cx, double cy, const BBox& b) {
    return cx > b.x0() && cx < b.x1() && cy > b.y0() && cy < b.y1();
}

} // namespace detail

/// Channel layout per cell: [0..K-1] class paint + noise, [K] cell-center x,
/// [K+1] cell-center y (both clean), [K+2..K+3] pure noise.
inline RenderedSample render(const DatagenConfig& cfg, const Scene& scene) {
    RenderedSample out;
    out.gt = scene.gt;
    out.seed = scene.seed;
    FeatureMap& f = out.features;
    f.h = cfg.grid_h;
    f.w = cfg.grid_w;
    f.channels = cfg.feat_channels();
    f.cells.assign(static_cast<std::size_t>(f.cell_count()) * static_cast<std::size_t>(f.channels), 0.0);

    const int K = cfg.classes;
    for (int y = 0; y < f.h; ++y) {
        for (int x = 0; x < f.w; ++x) {
            const double cx = (x + 0.5) / f.w;
            const double cy = (y + 0.5) / f.h;
            double* cell = f.cells.data() + static_cast<std::size_t>(y * f.w + x) * static_cast<std::size_t>(f.channels);
            for (int j = 0; j < scene.gt.count(); ++j)
                if (detail::center_inside(cx, cy, scene.gt.boxes[static_cast<std::size_t>(j)]))
                    cell[scene.gt.labels[static_cast<std::size_t>(j)]] += 1.0;
            cell[K] = cx;
            cell[K + 1] = cy;
        }
    }

    Rng rng(derive_seed(scene.seed, 0x4015eULL, 2));
    for (int c = 0; c < f.cell_count(); ++c) {
        double* cell = f.cells.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(f.channels);
        for (int ch = 0; ch < K; ++ch) cell[ch] += cfg.noise_sigma * rng.normal();
        cell[K + 2] = cfg.noise_sigma * rng.normal();
        cell[K + 3] = cfg.noise_sigma * rng.normal();
    }
    return out;
}

enum class Split { Train, Val };

inline std::uint64_t sample_seed(Split split, std::uint64_t base_seed, int index) {
    const std::uint64_t tag = split == Split::Train ? 0xA11CEULL : 0xB0BULL;
    return derive_seed(base_seed, tag, static_cast<std::uint64_t>(index));
}

inline RenderedSample sample_at(const DatagenConfig& cfg, Split split, std::uint64_t base_seed,
                                int index) {
    return render(cfg, generate_scene(cfg, sample_seed(split, base_seed, index)));
}

/// Materializes a whole split; train and val streams are disjoint by seed
/// derivation. Defaults: 2000 train / 200 val.
inline std::vector<RenderedSample> dataset(const DatagenConfig& cfg, Split split, int size,
                                           std::uint64_t base_seed) {
    std::vector<RenderedSample> out;
    out.reserve(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) out.push_back(sample_at(cfg, split, base_seed, i));
    return out;
}

inline constexpr int kDefaultTrainSize = 2000;
inline constexpr int kDefaultValSize = 200;

// ---------------------------------------------------------------------------
// Sample archive: little-endian binary, one record per sample.

static_assert(std::endian::native == std::endian::little, "archive format assumes little-endian");

namespace detail {

inline constexpr std::uint32_t kArchiveMagic = 0x53445251u; // "QRDS"
inline constexpr std::uint32_t kArchiveVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw SchemaError("sample archive truncated");
    return v;
}

} // namespace detail

inline void save_archive(const std::string& path, const DatagenConfig& cfg,
                         const std::vector<RenderedSample>& samples) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot open archive for writing: " + path);
    detail::put<std::uint32_t>(os, detail::kArchiveMagic);
    detail::put<std::uint32_t>(os, detail::kArchiveVersion);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.grid_h));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.grid_w));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.feat_channels()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.classes));
    detail::put<std::uint64_t>(os, samples.size());
    for (const auto& s : samples) {
        detail::put<std::uint64_t>(os, s.seed);
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.gt.count()));
        for (int j = 0; j < s.gt.count(); ++j) {
            const BBox& b = s.gt.boxes[static_cast<std::size_t>(j)];
            detail::put<double>(os, b.cx);
            detail::put<double>(os, b.cy);
            detail::put<double>(os, b.w);
            detail::put<double>(os, b.h);
            detail::put<std::int32_t>(os, s.gt.labels[static_cast<std::size_t>(j)]);
        }
        os.write(reinterpret_cast<const char*>(s.features.cells.data()),
                 static_cast<std::streamsize>(s.features.cells.size() * sizeof(double)));
    }
    if (!os) throw ConfigError("archive write failed: " + path);
}

struct ArchiveHeader {
    int grid_h = 0, grid_w = 0, channels = 0, classes = 0;
};

inline std::vector<RenderedSample> load_archive(const std::string& path, ArchiveHeader* header = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open archive: " + path);
    if (detail::get<std::uint32_t>(is) != detail::kArchiveMagic)
        throw SchemaError("not a sample archive: " + path);
    const auto version = detail::get<std::uint32_t>(is);
    if (version != detail::kArchiveVersion)
        throw SchemaError("unsupported archive version " + std::to_string(version));
    ArchiveHeader h;
    h.grid_h = static_cast<int>(detail::get<std::uint32_t>(is));
    h.grid_w = static_cast<int>(detail::get<std::uint32_t>(is));
    h.channels = static_cast<int>(detail::get<std::uint32_t>(is));
    h.classes = static_cast<int>(detail::get<std::uint32_t>(is));
    const auto count = detail::get<std::uint64_t>(is);
    std::vector<RenderedSample> samples;
    samples.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        RenderedSample s;
        s.seed = detail::get<std::uint64_t>(is);
        const auto m = detail::get<std::uint32_t>(is);
        for (std::uint32_t j = 0; j < m; ++j) {
            BBox b;
            b.cx = detail::get<double>(is);
            b.cy = detail::get<double>(is);
            b.w = detail::get<double>(is);
            b.h = detail::get<double>(is);
            s.gt.boxes.push_back(b);
            s.gt.labels.push_back(detail::get<std::int32_t>(is));
        }
        s.features.h = h.grid_h;
        s.features.w = h.grid_w;
        s.features.channels = h.channels;
        s.features.cells.resize(static_cast<std::size_t>(h.grid_h * h.grid_w) * static_cast<std::size_t>(h.channels));
        is.read(reinterpret_cast<char*>(s.features.cells.data()),
                static_cast<std::streamsize>(s.features.cells.size() * sizeof(double)));
        if (!is) throw SchemaError("sample archive truncated");
        samples.push_back(std::move(s));
    }
    if (header) *header = h;
    return samples;
}

/// Ground-truth cell label for probe-style checks: the class of the single
/// box covering the cell center, K for background, -1 when ambiguous
/// (covered by more than one box).
inline int cell_label(const DatagenConfig& cfg, const GroundTruth& gt, int x, int y) {
    const double cx = (x + 0.5) / cfg.grid_w;
    const double cy = (y + 0.5) / cfg.grid_h;
    int label = cfg.classes;
    int covers = 0;
    for (int j = 0; j < gt.count(); ++j)
        if (detail::center_inside(cx, cy, gt.boxes[static_cast<std::size_t>(j)])) {
            label = gt.labels[static_cast<std::size_t>(j)];
            covers += 1;
        }
    return covers > 1 ? -1 : label;
}

} // namespace qrlab
