// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: attention-topology distillation, contrastive label
// anchoring, patch reconstruction, the toy flow-matching loss and the staged
// weighted total.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "muse/autodiff.hpp"

namespace muse {

enum class LossKind { Topo, Anchor, Rec };

[[nodiscard]] std::string_view loss_name(LossKind k);
/// ConfigError on an unknown name ("topo", "anchor", "rec").
[[nodiscard]] LossKind parse_loss(std::string_view name);

// Teacher resampling -----------------------------------------------------------

/// Resamples a (g_t^2 x g_t^2) row-stochastic map to (g_s^2 x g_s^2) by
/// bilinear interpolation (half-pixel centres) on each of the four grid axes,
/// then renormalizes every row. ArgumentError when an input row sum is off by
/// more than 1e-4.
[[nodiscard]] std::vector<double> psi_resample(std::span<const double> teacher, std::size_t g_t,
                                               std::size_t g_s);

// Topology ---------------------------------------------------------------------

/// Mean over layers of kl_rows(teacher, student). `students` are restricted
/// patch maps [batch*heads*N_p x N_p]; `teacher` holds batch x N_p x N_p values
/// and is shared by every head of its sample.
template <typename Real>
ad::Var<Real> topo_loss(std::span<const ad::Var<Real>> students, std::span<const Real> teacher,
                        std::size_t batch, std::size_t heads);

// Anchoring --------------------------------------------------------------------

struct AnchorOptions {
    bool symmetric = true;
    double tau_lo = 1e-3;
    double tau_hi = 10.0;
};

template <typename Real>
struct AnchorResult {
    ad::Var<Real> loss;
    ad::Var<Real> logits;  // [B x B]
    /// Set when the temperature was outside [tau_lo, tau_hi] and a clamped
    /// constant was used instead.
    std::optional<std::string> warning;
};

/// In-batch InfoNCE between unit image embeddings and label embeddings.
/// logits[i][j] = <e_i, t_{label_j}> / tau with label rows normalized inside.
/// Pairs j != i sharing i's label are removed from the negatives.
template <typename Real>
AnchorResult<Real> anchor_loss(ad::Var<Real> embeddings, std::span<const std::size_t> labels,
                               ad::Var<Real> class_table, ad::Var<Real> tau,
                               const AnchorOptions& options = {});

// Reconstruction -----------------------------------------------------------------

template <typename Real>
ad::Var<Real> recon_loss(ad::Var<Real> recon, std::span<const Real> target);

// Flow matching ------------------------------------------------------------------

/// x_t = t*x1 + (1-t)*x0 per sample; ArgumentError for t outside [0, 1].
[[nodiscard]] std::vector<double> flow_interpolate(std::span<const double> x0,
                                                   std::span<const double> x1,
                                                   std::span<const double> t, std::size_t dim);

/// Mean squared error between the predicted velocity and x1 - x0.
template <typename Real>
ad::Var<Real> flow_matching_loss(ad::Var<Real> v_pred, std::span<const Real> x1,
                                 std::span<const Real> x0);

/// Two-layer velocity predictor over concatenated (x_t, t, condition).
struct FlowPredictor {
    std::size_t dim = 0;
    std::size_t cond_dim = 0;
    std::size_t hidden = 0;
    std::vector<Parameter<double>> params;  // w1, b1, w2, b2

    static FlowPredictor init(std::size_t dim, std::size_t cond_dim, std::size_t hidden,
                              std::uint64_t seed);
    ad::Var<double> forward(ad::Graph<double>& g, std::span<const double> x_t,
                            std::span<const double> t, std::span<const double> cond,
                            std::size_t batch);
};

struct FlowTrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> losses;  // per step
};

/// Trains on fixed pairs with freshly drawn t each step. Initial and final
/// losses are measured on a fixed t grid.
FlowTrainResult train_flow_predictor(FlowPredictor& model, std::span<const double> x0,
                                     std::span<const double> x1, std::span<const double> cond,
                                     std::size_t batch, std::size_t steps, double lr,
                                     std::uint64_t seed);

// Weighted total -------------------------------------------------------------------

struct LossWeights {
    double topo = 1.0;
    double anchor = 0.2;
    double rec = 1.0;
    double spec = 0.5;  // multiplies the reconstruction term
    double reg = 0.3;   // projection strength of the soft-regularization preset

    [[nodiscard]] double weight(LossKind k) const;
};

/// Default per-stage weights (stage s at index s-1).
[[nodiscard]] std::array<LossWeights, 3> default_stage_weights();

/// Losses each stage requires in the default curriculum.
[[nodiscard]] std::set<LossKind> stage_losses(int stage);

struct LossValues {
    std::optional<double> topo, anchor, rec;
    [[nodiscard]] std::optional<double> get(LossKind k) const;
};

/// Weighted sum over `active` losses. ConfigError if a required part is
/// missing or the stage is not 1..3.
[[nodiscard]] double total_loss(int stage, const LossValues& parts, const LossWeights& weights,
                                const std::set<LossKind>& active);

template <typename Real>
struct LossParts {
    std::optional<ad::Var<Real>> topo, anchor, rec;
    [[nodiscard]] std::optional<ad::Var<Real>> get(LossKind k) const;
};

template <typename Real>
ad::Var<Real> total_loss(int stage, const LossParts<Real>& parts, const LossWeights& weights,
                         const std::set<LossKind>& active);

}  // namespace muse
