// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-loss gradient snapshots, cosine similarity per parameter subspace and
// gradient-norm distributions.

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "muse/autodiff.hpp"
#include "muse/objectives.hpp"
#include "muse/parameter.hpp"

namespace muse {

inline constexpr double kCosineNormFloor = 1e-12;

/// Concatenated gradients of the parameters tagged `tag` (every parameter for
/// All), in declaration order, optionally restricted to the given streams.
/// ArgumentError when nothing matches.
template <typename Real>
[[nodiscard]] std::vector<double> subspace_gradient(const std::vector<Parameter<Real>>& params,
                                                    Subspace tag,
                                                    const std::optional<std::set<int>>& streams = std::nullopt);

/// Cosine similarity, or nullopt when either norm is <= 1e-12.
[[nodiscard]] std::optional<double> gradient_cosine(std::span<const double> a,
                                                    std::span<const double> b);

using LossPair = std::pair<LossKind, LossKind>;

/// Parses "anchor:topo"; ConfigError on unknown names or a repeated loss.
[[nodiscard]] LossPair parse_loss_pair(std::string_view text);
[[nodiscard]] std::string loss_pair_name(const LossPair& pair);
/// anchor-topo, anchor-rec, topo-rec.
[[nodiscard]] std::vector<LossPair> default_loss_pairs();

struct MatrixNorm {
    LossKind loss;
    Subspace subspace;
    std::optional<int> layer;
    std::string matrix;
    double norm;
};

struct GradReport {
    long step = 0;
    std::map<LossKind, double> loss_values;
    /// cosine per (pair, subspace); nullopt = undefined.
    std::map<LossPair, std::map<Subspace, std::optional<double>>> cosines;
    /// L2 norm of each loss's gradient restricted to a subspace.
    std::map<LossKind, std::map<Subspace, double>> subspace_norms;
    std::vector<MatrixNorm> matrix_norms;
};

/// Per-loss gradients of one parameter state, as produced by a probe.
struct GradSnapshot {
    std::map<LossKind, std::vector<std::vector<double>>> grads;  // loss -> per parameter
};

template <typename Real>
using LossBuilder = std::function<std::map<LossKind, ad::Var<Real>>(ad::Graph<Real>&)>;

/// One forward through `build`, then per loss: zero gradients, backward,
/// snapshot. Gradients are zero again on return; values are untouched.
template <typename Real>
[[nodiscard]] GradSnapshot snapshot_gradients(std::vector<Parameter<Real>>& params,
                                              const LossBuilder<Real>& build,
                                              std::map<LossKind, double>* loss_values = nullptr);

/// Builds a report from snapshots. Cosines are taken over the parameters of
/// the streams on which both losses have a nonzero gradient; when no stream
/// is shared the cosine is undefined.
template <typename Real>
[[nodiscard]] GradReport make_report(const std::vector<Parameter<Real>>& params,
                                     const GradSnapshot& snapshot, const std::vector<LossPair>& pairs,
                                     const std::set<Subspace>& tags, long step);

template <typename Real>
[[nodiscard]] GradReport conflict_probe(std::vector<Parameter<Real>>& params,
                                        const LossBuilder<Real>& build,
                                        const std::vector<LossPair>& pairs,
                                        const std::set<Subspace>& tags, long step);

struct NormSummary {
    double min = 0, q25 = 0, median = 0, q75 = 0, max = 0, mean = 0;
    std::vector<double> samples;
};

/// Quantile with the midpoint convention: for sorted x of size n and h = p*n,
/// an integral h in [1, n-1] gives (x[h-1] + x[h]) / 2, otherwise x[ceil(h)-1].
[[nodiscard]] double midpoint_quantile(std::span<const double> sorted, double p);

/// ArgumentError when there are no samples.
[[nodiscard]] NormSummary norm_distribution(std::span<const GradReport> reports, LossKind loss,
                                            Subspace tag);

inline constexpr std::string_view kViolinHeader = "step,loss,subspace,layer,matrix,norm";
inline constexpr std::string_view kGradReportHeader = "step,loss_a,loss_b,subspace,cosine,undefined";

void write_violin_rows(std::ostream& out, const GradReport& report);
void write_grad_report_rows(std::ostream& out, const GradReport& report);

/// Shortest round-trip decimal form used by every CSV writer.
[[nodiscard]] std::string format_number(double v);

}  // namespace muse
