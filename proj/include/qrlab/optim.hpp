#pragma once

// Decoupled-weight-decay Adam over a ParamStore. Moment buffers are keyed by
// parameter path and created lazily, so the state survives parameters being
// added between steps (it simply starts their moments at zero).

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "qrlab/errors.hpp"
#include "qrlab/params.hpp"

namespace qrlab {

struct OptimState {
    long step = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::map<std::string, std::vector<double>> m; // first moments
    std::map<std::string, std::vector<double>> v; // second moments
};

/// One update over every parameter in the store, consuming accumulated
/// gradients (they are zeroed afterwards). Update rule per element:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr * ( mhat / (sqrt(vhat) + eps) + wd * p )
/// with bias-corrected mhat, vhat.
inline void opt_step(ParamStore& params, OptimState& state) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (auto& [name, entry] : params) {
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != entry.value.size()) m.assign(entry.value.size(), 0.0);
        if (v.size() != entry.value.size()) v.assign(entry.value.size(), 0.0);
        for (std::size_t i = 0; i < entry.value.size(); ++i) {
            const double g = entry.grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            entry.value[i] -=
                state.lr * (mhat / (std::sqrt(vhat) + state.eps) + state.weight_decay * entry.value[i]);
        }
        entry.grad.assign(entry.grad.size(), 0.0);
    }
}

} // namespace qrlab
