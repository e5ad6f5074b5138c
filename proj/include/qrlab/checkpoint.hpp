#pragma once

// Versioned binary checkpoint: the effective run config (JSON text), every
// parameter tensor, and the full optimizer state. Parameters are stored in
// sorted-name order, so identical states produce byte-identical files.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "qrlab/config.hpp"
#include "qrlab/errors.hpp"
#include "qrlab/optim.hpp"
#include "qrlab/params.hpp"

namespace qrlab {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian");

namespace detail {

inline constexpr std::uint32_t kCheckpointMagic = 0x4b435251u; // "QRCK"
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_string(std::ostream& os, const std::string& s) {
    put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
    const auto n = get<std::uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw SchemaError("checkpoint truncated");
    return s;
}

inline void put_doubles(std::ostream& os, const std::vector<double>& v) {
    put<std::uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> get_doubles(std::istream& is) {
    const auto n = get<std::uint64_t>(is);
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw SchemaError("checkpoint truncated");
    return v;
}

} // namespace detail

struct Checkpoint {
    RunConfig config;
    ParamStore params;
    OptimState optim;
};

inline void save_checkpoint(const std::string& path, const RunConfig& config,
                            const ParamStore& params, const OptimState& optim) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot open checkpoint for writing: " + path);
    detail::put<std::uint32_t>(os, detail::kCheckpointMagic);
    detail::put<std::uint32_t>(os, detail::kCheckpointVersion);
    detail::put_string(os, serialize_run_config(config));

    detail::put<std::uint64_t>(os, params.size());
    for (const auto& [name, e] : params) {
        detail::put_string(os, name);
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
        for (int d : e.shape) detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        detail::put_doubles(os, e.value);
    }

    detail::put<std::int64_t>(os, optim.step);
    detail::put<double>(os, optim.lr);
    detail::put<double>(os, optim.beta1);
    detail::put<double>(os, optim.beta2);
    detail::put<double>(os, optim.eps);
    detail::put<double>(os, optim.weight_decay);
    detail::put<std::uint64_t>(os, optim.m.size());
    for (const auto& [name, v] : optim.m) {
        detail::put_string(os, name);
        detail::put_doubles(os, v);
    }
    detail::put<std::uint64_t>(os, optim.v.size());
    for (const auto& [name, v] : optim.v) {
        detail::put_string(os, name);
        detail::put_doubles(os, v);
    }
    if (!os) throw ConfigError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open checkpoint: " + path);
    if (detail::get<std::uint32_t>(is) != detail::kCheckpointMagic)
        throw SchemaError("not a checkpoint file: " + path);
    const auto version = detail::get<std::uint32_t>(is);
    if (version != detail::kCheckpointVersion)
        throw SchemaError("unsupported checkpoint version " + std::to_string(version));

    Checkpoint ck;
    ck.config = parse_run_config(detail::get_string(is));

    const auto count = detail::get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = detail::get_string(is);
        const auto ndim = detail::get<std::uint32_t>(is);
        Shape shape;
        for (std::uint32_t d = 0; d < ndim; ++d)
            shape.push_back(static_cast<int>(detail::get<std::uint32_t>(is)));
        auto& e = ck.params.create(name, shape);
        e.value = detail::get_doubles(is);
        if (e.value.size() != e.grad.size()) throw SchemaError("checkpoint tensor size mismatch");
    }

    ck.optim.step = detail::get<std::int64_t>(is);
    ck.optim.lr = detail::get<double>(is);
    ck.optim.beta1 = detail::get<double>(is);
    ck.optim.beta2 = detail::get<double>(is);
    ck.optim.eps = detail::get<double>(is);
    ck.optim.weight_decay = detail::get<double>(is);
    const auto mcount = detail::get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < mcount; ++i) {
        const std::string name = detail::get_string(is);
        ck.optim.m[name] = detail::get_doubles(is);
    }
    const auto vcount = detail::get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < vcount; ++i) {
        const std::string name = detail::get_string(is);
        ck.optim.v[name] = detail::get_doubles(is);
    }
    return ck;
}

} // namespace qrlab
