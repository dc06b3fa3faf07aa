#pragma once

// Shared test helpers: finite-difference gradient checking and a small
// deterministic synthetic dataset for end-to-end training tests.

#include <functional>
#include <string>
#include <vector>

#include "clim/data.hpp"
#include "clim/params.hpp"
#include "clim/tensor.hpp"

namespace clim::testing {

// err = |a - fd| / (|a| + |fd| + 1e-6); the additive floor keeps noise-level
// finite-difference values on near-zero gradients from counting as failures.
inline double rel_err(double analytic, double fd) {
    return std::abs(analytic - fd) / (std::abs(analytic) + std::abs(fd) + 1e-6);
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // "param[i]" of the worst index
    long checked = 0;
};

// Central finite differences (h = 1e-5) on every element of every tensor in
// `leaves`, against gradients produced by one analytic backward pass of
// `loss_fn`. `loss_fn` must be a pure function of the leaf values.
inline GradCheckResult check_gradients(const std::vector<std::pair<std::string, Tensor>>& leaves,
                                       const std::function<double()>& loss_fn_value,
                                       const std::function<Tensor()>& loss_fn_graph,
                                       double h = 1e-5) {
    for (auto& [name, t] : leaves) const_cast<Tensor&>(t).zero_grad();
    Tensor loss = loss_fn_graph();
    backward(loss);
    GradCheckResult res;
    for (auto& [name, t] : leaves) {
        auto& tensor = const_cast<Tensor&>(t);
        const auto& g = tensor.grad();
        for (long i = 0; i < tensor.size(); ++i) {
            const double orig = tensor.values()[std::size_t(i)];
            tensor.values()[std::size_t(i)] = orig + h;
            const double fp = loss_fn_value();
            tensor.values()[std::size_t(i)] = orig - h;
            const double fm = loss_fn_value();
            tensor.values()[std::size_t(i)] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double err = rel_err(g[std::size_t(i)], fd);
            ++res.checked;
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.worst = name + "[" + std::to_string(i) + "] analytic=" +
                            std::to_string(g[std::size_t(i)]) + " fd=" +
                            std::to_string(fd);
            }
        }
    }
    return res;
}

// Convenience overload for a whole parameter store.
inline GradCheckResult check_gradients(ModelParams& params,
                                       const std::function<Tensor()>& loss_fn,
                                       double h = 1e-5) {
    std::vector<std::pair<std::string, Tensor>> leaves;
    for (const auto& e : params.entries())
        if (!e.frozen) leaves.emplace_back(e.name, e.tensor);
    auto value_fn = [&] {
        NoGradGuard ng;
        return loss_fn().item();
    };
    return check_gradients(leaves, value_fn, loss_fn, h);
}

// ---------------------------------------------------------------------------
// Deterministic synthetic command-language corpus: three intents with
// template-filled slots. Learnable by a small model in a few epochs.

inline std::vector<Example> synthetic_examples(long count, std::uint64_t seed) {
    const std::vector<std::string> cities = {"boston",  "denver", "atlanta",
                                             "chicago", "dallas", "seattle"};
    const std::vector<std::string> days = {"monday", "tuesday", "friday", "sunday"};
    const std::vector<std::string> artists = {"baker", "ellington", "holiday"};
    Rng rng(seed);
    std::vector<Example> out;
    for (long i = 0; i < count; ++i) {
        Example ex;
        switch (i % 3) {
            case 0: {
                const auto& from = cities[rng.below(cities.size())];
                const auto& to = cities[rng.below(cities.size())];
                const auto& day = days[rng.below(days.size())];
                ex.tokens = {"book", "a", "flight", "from", from, "to", to, "on", day};
                ex.slot_labels = {"O", "O", "O", "O", "B-from_city",
                                  "O", "B-to_city", "O", "B-day"};
                ex.intent = "book_flight";
                break;
            }
            case 1: {
                const auto& city = cities[rng.below(cities.size())];
                const auto& day = days[rng.below(days.size())];
                ex.tokens = {"what", "is", "the", "weather", "in", city, "on", day};
                ex.slot_labels = {"O", "O", "O", "O", "O", "B-city", "O", "B-day"};
                ex.intent = "weather";
                break;
            }
            default: {
                const auto& artist = artists[rng.below(artists.size())];
                ex.tokens = {"play", "some", "music", "by", artist};
                ex.slot_labels = {"O", "O", "O", "O", "B-artist"};
                ex.intent = "play_music";
                break;
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace clim::testing
