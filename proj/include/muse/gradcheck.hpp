// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient oracle. Always runs in double precision.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "muse/autodiff.hpp"

namespace muse::ad {

struct FdOptions {
    double eps = 1e-5;
    /// 0 checks every coordinate; otherwise a seeded random subset of this size.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
};

struct FdResult {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    // Location of the worst coordinate.
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Builds a scalar from leaves created by the oracle (one per input tensor).
using LeafLossBuilder = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;
/// Builds a scalar by binding the given parameters itself.
using ParamLossBuilder = std::function<Var<double>(Graph<double>&)>;

/// Relative error |a - n| / max(1e-8, |a| + |n|) maximized over coordinates.
/// Evaluates f twice at the base point; any bitwise difference is an OracleError.
FdResult finite_difference_check(const LeafLossBuilder& f, std::vector<Tensor<double>> inputs,
                                 const FdOptions& options = {});

FdResult finite_difference_check(const ParamLossBuilder& f,
                                 std::span<Parameter<double>* const> params,
                                 const FdOptions& options = {});

}  // namespace muse::ad
