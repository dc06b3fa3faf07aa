#pragma once

// Adam with bias correction. Moments live alongside the parameter store,
// keyed by parameter name.

#include <string>
#include <unordered_map>
#include <vector>

#include "clim/params.hpp"

namespace clim {

struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step_count = 0;

    struct Moments {
        std::vector<double> first;
        std::vector<double> second;
    };
    std::unordered_map<std::string, Moments> moments;
};

// One Adam update over every trainable (non-frozen) parameter. Each such
// parameter must carry an allocated gradient; frozen parameters are skipped.
inline void adam_step(ModelParams& params, AdamState& state) {
    state.step_count += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(state.step_count));
    const double bc2 = 1.0 - std::pow(b2, double(state.step_count));
    for (auto& e : params.entries()) {
        if (e.frozen) continue;
        if (!e.tensor.has_grad())
            throw ContractError("adam_step: missing gradient for trainable parameter '" +
                                e.name + "'");
        auto& m = state.moments[e.name];
        const auto n = e.tensor.values().size();
        if (m.first.size() != n) {
            m.first.assign(n, 0.0);
            m.second.assign(n, 0.0);
        }
        const auto& g = e.tensor.grad();
        auto& w = e.tensor.values();
        for (std::size_t i = 0; i < n; ++i) {
            m.first[i] = b1 * m.first[i] + (1.0 - b1) * g[i];
            m.second[i] = b2 * m.second[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = m.first[i] / bc1;
            const double vhat = m.second[i] / bc2;
            w[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

}  // namespace clim
