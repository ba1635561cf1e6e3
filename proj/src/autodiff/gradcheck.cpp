// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include "muse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "muse/errors.hpp"

namespace muse::ad {
namespace {

struct Coord {
    std::size_t input;
    std::size_t index;
};

void check_eps(double eps) {
    if (!(eps > 0.0) || eps > 1e-2) {
        throw ArgumentError("finite_difference_check: eps must lie in (0, 1e-2], got " +
                            std::to_string(eps));
    }
}

std::vector<Coord> pick_coords(std::span<const std::size_t> sizes, const FdOptions& options) {
    std::vector<Coord> all;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        for (std::size_t j = 0; j < sizes[i]; ++j) all.push_back({i, j});
    }
    if (options.max_coords == 0 || options.max_coords >= all.size()) return all;
    std::mt19937_64 rng(options.seed);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(options.max_coords);
    std::sort(all.begin(), all.end(), [](const Coord& a, const Coord& b) {
        return a.input != b.input ? a.input < b.input : a.index < b.index;
    });
    return all;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

// Shared driver: `evaluate` recomputes the loss from the current values,
// `slot` exposes a mutable coordinate, `analytic` holds the backward result.
template <typename Evaluate, typename Slot>
FdResult run_check(Evaluate&& evaluate, Slot&& slot, const std::vector<std::vector<double>>& analytic,
                   double base, const FdOptions& options) {
    std::vector<std::size_t> sizes;
    for (const auto& a : analytic) sizes.push_back(a.size());
    const auto coords = pick_coords(sizes, options);
    FdResult result;
    for (const auto& c : coords) {
        double& x = slot(c.input, c.index);
        const double saved = x;
        x = saved + options.eps;
        const double up = evaluate();
        x = saved - options.eps;
        const double down = evaluate();
        x = saved;
        const double numeric = (up - down) / (2.0 * options.eps);
        const double a = analytic[c.input][c.index];
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        if (rel > result.max_rel_error || result.coords_checked == 0) {
            result.max_rel_error = rel;
            result.worst_input = c.input;
            result.worst_index = c.index;
            result.worst_analytic = a;
            result.worst_numeric = numeric;
        }
        ++result.coords_checked;
    }
    if (!same_bits(evaluate(), base)) {
        throw OracleError("finite_difference_check: inputs were not restored exactly");
    }
    return result;
}

}  // namespace

FdResult finite_difference_check(const LeafLossBuilder& f, std::vector<Tensor<double>> inputs,
                                 const FdOptions& options) {
    check_eps(options.eps);
    auto evaluate = [&](bool with_grad, std::vector<std::vector<double>>* grads) {
        Graph<double> g;
        std::vector<Var<double>> leaves;
        leaves.reserve(inputs.size());
        for (const auto& t : inputs) leaves.push_back(g.leaf(t, with_grad));
        auto loss = f(g, leaves);
        if (loss.size() != 1) throw ArgumentError("finite_difference_check: f must be scalar");
        if (grads != nullptr) {
            g.backward(loss);
            for (const auto& l : leaves) {
                auto gr = g.grad(l);
                grads->emplace_back(gr.begin(), gr.end());
            }
        }
        return loss.item();
    };

    std::vector<std::vector<double>> analytic;
    const double base = evaluate(true, &analytic);
    if (!same_bits(evaluate(false, nullptr), base)) {
        throw OracleError("finite_difference_check: f is not deterministic");
    }
    return run_check([&] { return evaluate(false, nullptr); },
                     [&](std::size_t i, std::size_t j) -> double& { return inputs[i].values[j]; },
                     analytic, base, options);
}

FdResult finite_difference_check(const ParamLossBuilder& f,
                                 std::span<Parameter<double>* const> params,
                                 const FdOptions& options) {
    check_eps(options.eps);
    for (auto* p : params) p->zero_grad();
    auto evaluate = [&] {
        Graph<double> g;
        auto loss = f(g);
        if (loss.size() != 1) throw ArgumentError("finite_difference_check: f must be scalar");
        return loss.item();
    };

    double base = 0.0;
    {
        Graph<double> g;
        auto loss = f(g);
        if (loss.size() != 1) throw ArgumentError("finite_difference_check: f must be scalar");
        base = loss.item();
        g.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto* p : params) {
        analytic.push_back(p->grad);
        p->zero_grad();
    }
    if (!same_bits(evaluate(), base)) {
        throw OracleError("finite_difference_check: f is not deterministic");
    }
    return run_check(evaluate,
                     [&](std::size_t i, std::size_t j) -> double& { return params[i]->value[j]; },
                     analytic, base, options);
}

}  // namespace muse::ad
