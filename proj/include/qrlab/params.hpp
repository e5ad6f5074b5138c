#pragma once

#include <cstddef>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "qrlab/errors.hpp"
#include "qrlab/rng.hpp"

namespace qrlab {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

/// Named parameter tensors with matching gradient accumulators.
/// Iteration order is the sorted name order, so optimizer sweeps and
/// checkpoint layouts are reproducible.
class ParamStore {
public:
    struct Entry {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
    };

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& create(const std::string& name, Shape shape) {
        if (contains(name)) throw ConfigError("parameter already exists: " + name);
        Entry e;
        e.value.assign(numel(shape), 0.0);
        e.grad.assign(numel(shape), 0.0);
        e.shape = std::move(shape);
        return entries_.emplace(name, std::move(e)).first->second;
    }

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter path: " + name);
        return it->second;
    }

    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter path: " + name);
        return it->second;
    }

    void zero_grads() {
        for (auto& [name, e] : entries_) std::fill(e.grad.begin(), e.grad.end(), 0.0);
    }

    std::size_t size() const { return entries_.size(); }

    std::size_t value_count() const {
        std::size_t n = 0;
        for (const auto& [name, e] : entries_) n += e.value.size();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::map<std::string, Entry> entries_;
};

/// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline void init_uniform_fan_in(ParamStore::Entry& e, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : e.value) v = rng.uniform(-bound, bound);
}

/// Creates `path/w` [in,out] with fan-in init and `path/b` [out] at zero.
inline void create_linear(ParamStore& ps, const std::string& path, int in, int out, Rng& rng) {
    init_uniform_fan_in(ps.create(path + "/w", {in, out}), in, rng);
    ps.create(path + "/b", {out});
}

/// Creates the two-layer perceptron parameters used by `mlp`.
inline void create_mlp(ParamStore& ps, const std::string& path, int in, int hidden, int out, Rng& rng) {
    create_linear(ps, path + "/fc1", in, hidden, rng);
    create_linear(ps, path + "/fc2", hidden, out, rng);
}

} // namespace qrlab
