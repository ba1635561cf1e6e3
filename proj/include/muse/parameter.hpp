// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace muse {

using Shape = std::vector<std::size_t>;

[[nodiscard]] std::size_t numel(const Shape& shape);
[[nodiscard]] std::string shape_string(const Shape& shape);

/// Parameter subspaces. TOPOLOGY = {W_Q, W_K}; SEMANTIC = value path, MLP,
/// layer norms, projector, class table, temperature, query tokens; BACKBONE =
/// patch embedding and positions; DECODER = patch decoder. ALL selects every
/// parameter and is never assigned to one.
enum class Subspace { Topology, Semantic, Backbone, Decoder, All };

[[nodiscard]] std::string_view subspace_name(Subspace s);
[[nodiscard]] Subspace parse_subspace(std::string_view name);

template <typename Real>
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    Subspace subspace = Subspace::Semantic;
    std::optional<int> layer;  // block index for per-block parameters
    int stream = 0;            // duplicated parameter sets (two-stream) use 1

    Parameter() = default;
    Parameter(std::string n, Shape s, Subspace tag, std::optional<int> l = std::nullopt, int st = 0)
        : name(std::move(n)),
          shape(std::move(s)),
          value(numel(shape), Real(0)),
          grad(numel(shape), Real(0)),
          subspace(tag),
          layer(l),
          stream(st) {}

    [[nodiscard]] std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), Real(0)); }
};

}  // namespace muse
