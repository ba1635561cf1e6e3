// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include "muse/optimizer.hpp"

#include <cmath>

#include "muse/errors.hpp"

namespace muse {

template <typename Real>
AdamW<Real>::AdamW(AdamWConfig config, const std::vector<Parameter<Real>>& params)
    : config_(config), t_(params.size(), 0) {
    for (const auto& p : params) {
        m_.emplace_back(p.size(), Real(0));
        v_.emplace_back(p.size(), Real(0));
    }
}

template <typename Real>
void AdamW<Real>::step(std::vector<Parameter<Real>>& params, double lr,
                       const std::set<Subspace>& frozen, long step_index) {
    if (params.size() != m_.size()) {
        throw ArgumentError("optimizer state holds " + std::to_string(m_.size()) +
                            " tensors, got " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (frozen.contains(p.subspace)) continue;
        for (Real g : p.grad) {
            if (!std::isfinite(g)) {
                throw NumericError("non-finite gradient at step " + std::to_string(step_index) +
                                   " in parameter '" + p.name + "'");
            }
        }
    }
    const double b1 = config_.beta1, b2 = config_.beta2;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (frozen.contains(p.subspace)) continue;
        const long t = ++t_[i];
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        const double decay = 1.0 - lr * config_.weight_decay;
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double g = static_cast<double>(p.grad[k]);
            const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * g;
            const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * g * g;
            m[k] = static_cast<Real>(mk);
            v[k] = static_cast<Real>(vk);
            const double update = (mk / c1) / (std::sqrt(vk / c2) + config_.eps);
            p.value[k] = static_cast<Real>(static_cast<double>(p.value[k]) * decay - lr * update);
        }
    }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace muse
