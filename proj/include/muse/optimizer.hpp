// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <set>
#include <vector>

#include "muse/parameter.hpp"

namespace muse {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Adaptive moments with bias correction and decoupled weight decay. Frozen
/// parameters keep their values, moments and step count untouched.
template <typename Real>
class AdamW {
public:
    AdamW() = default;
    AdamW(AdamWConfig config, const std::vector<Parameter<Real>>& params);

    /// Throws NumericError naming `step_index` and the parameter on a NaN/Inf gradient.
    void step(std::vector<Parameter<Real>>& params, double lr, const std::set<Subspace>& frozen,
              long step_index);

    [[nodiscard]] const AdamWConfig& config() const { return config_; }
    [[nodiscard]] const std::vector<Real>& first_moment(std::size_t i) const { return m_[i]; }
    [[nodiscard]] const std::vector<Real>& second_moment(std::size_t i) const { return v_[i]; }
    [[nodiscard]] long updates(std::size_t i) const { return t_[i]; }

private:
    AdamWConfig config_;
    std::vector<std::vector<Real>> m_;
    std::vector<std::vector<Real>> v_;
    std::vector<long> t_;
};

}  // namespace muse
