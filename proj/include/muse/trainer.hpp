// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Three-stage curriculum: topology warmup, semantic injection, joint tuning.
// Presets reproduce the objective and architecture ablations.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "muse/diagnostics.hpp"
#include "muse/encoder.hpp"
#include "muse/objectives.hpp"
#include "muse/optimizer.hpp"
#include "muse/scenes.hpp"

namespace muse {

enum class Preset { Muse, NaiveShared, SoftReg, TwoStream, SemanticOnly, TopologyOnly, BaselineRecOnly };

[[nodiscard]] std::string_view preset_name(Preset p);
/// ConfigError listing the valid names.
[[nodiscard]] Preset parse_preset(std::string_view name);
[[nodiscard]] std::string preset_names();

enum class Precision { F32, F64 };
[[nodiscard]] std::string_view precision_name(Precision p);
[[nodiscard]] Precision parse_precision(std::string_view name);

struct TrainConfig {
    Preset preset = Preset::Muse;
    /// Unset means the preset's routing (strict unless the preset forces one).
    std::optional<Routing> routing;
    EncoderConfig encoder;
    std::array<long, 3> steps{1000, 1000, 1000};
    std::array<double, 3> lr{4e-4, 2e-4, 1e-5};
    std::array<double, 3> min_lr{1e-5, 1e-5, 1e-6};
    std::array<LossWeights, 3> weights = default_stage_weights();
    double warmup_fraction = 0.05;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    Precision precision = Precision::F32;
    long probe_interval = 10;
    double teacher_smoothing = 0.0;
    /// Patch size on which the teacher is built before resampling to the
    /// student grid; 0 uses the student patch size.
    std::size_t teacher_patch = 0;
    bool symmetric_anchor = true;
    std::vector<LossPair> pairs = default_loss_pairs();
    AdamWConfig optimizer;

    void validate() const;
    /// Routing after preset overrides; ConfigError on a contradiction.
    [[nodiscard]] Routing effective_routing() const;
    /// Every field materialized; keys sorted.
    [[nodiscard]] std::string to_json() const;
    /// Applies the keys present in `text` on top of `base`. Unknown keys are
    /// a ConfigError.
    [[nodiscard]] static TrainConfig from_json(std::string_view text, TrainConfig base);
    [[nodiscard]] static TrainConfig from_json(std::string_view text);
};

struct StagePolicy {
    std::set<LossKind> losses;
    std::set<Subspace> frozen;
    double lr = 0.0;
    LossWeights weights;
    Routing routing = Routing::Strict;
    bool soft_reg = false;
};

[[nodiscard]] StagePolicy stage_policy(int stage, const TrainConfig& config);

/// Linear warmup over the first warmup_fraction of the stage, then cosine
/// decay from the peak to the stage's minimum rate.
[[nodiscard]] double learning_rate(const TrainConfig& config, int stage, long step_in_stage);

struct SoftRegOutcome {
    std::vector<double> a, b;
    bool flagged = false;  // a zero-norm partner left a gradient unchanged
};

/// When <a, b> < 0 each gradient loses lambda times its projection onto the
/// other; otherwise both are returned unchanged.
[[nodiscard]] SoftRegOutcome soft_reg_adjust(std::span<const double> a, std::span<const double> b,
                                             double lambda);

/// Simultaneous pairwise projection over several gradients, each using the
/// original partners. Returns true when any partner had zero norm.
bool soft_reg_adjust_all(std::vector<std::vector<double>>& grads, double lambda);

inline constexpr std::string_view kMetricsHeader =
    "step,stage,loss_topo,loss_anchor,loss_rec,loss_total,cos_anchor_topo,cos_anchor_rec,"
    "cos_topo_rec,undef_flags,gnorm_topology_topo,gnorm_topology_anchor,gnorm_topology_rec,"
    "gnorm_semantic_topo,gnorm_semantic_anchor,gnorm_semantic_rec";

struct MetricsRow {
    long step = 0;
    int stage = 0;
    LossValues losses;
    double total = 0.0;
    std::optional<GradReport> probe;
};

/// One CSV line (no newline) for a metrics row.
[[nodiscard]] std::string format_metrics_row(const MetricsRow& row);

struct TrainResult {
    std::vector<MetricsRow> rows;
    std::vector<GradReport> reports;
    EncoderParams<double> initial;
    EncoderParams<double> final;
    std::vector<std::filesystem::path> checkpoints;
    std::vector<std::string> warnings;
};

struct TrainOptions {
    /// When set, metrics.csv, violin.csv and checkpoints are written here.
    std::optional<std::filesystem::path> out_dir;
    /// Called after every step.
    std::function<void(const MetricsRow&)> on_step;
};

[[nodiscard]] TrainResult train_run(const TrainConfig& config, const Dataset& dataset,
                                    const TrainOptions& options = {});

/// Batch of dataset samples prepared for the encoder.
template <typename Real>
struct PreparedBatch {
    std::size_t size = 0;
    std::vector<Real> patches;          // size x N_p x patch_dim
    std::vector<std::size_t> labels;
    std::vector<Real> teacher;          // size x N_p x N_p
    std::vector<std::vector<std::uint8_t>> patch_masks;
};

/// Patch size of the teacher grid actually used by `config`.
[[nodiscard]] std::size_t teacher_patch_size(const TrainConfig& config);

template <typename Real>
[[nodiscard]] PreparedBatch<Real> prepare_batch(const Dataset& dataset,
                                                std::span<const std::size_t> indices,
                                                const EncoderConfig& encoder,
                                                double teacher_smoothing, std::size_t teacher_patch);

/// Sample indices of the batch used at `step` (with replacement).
[[nodiscard]] std::vector<std::size_t> batch_indices(std::uint64_t seed, long step,
                                                     std::size_t batch, std::size_t dataset_size);

/// Builds every requested loss on one forward pass.
template <typename Real>
[[nodiscard]] std::map<LossKind, ad::Var<Real>> build_losses(
    ad::Graph<Real>& graph, EncoderParams<Real>& params, const PreparedBatch<Real>& batch,
    const std::set<LossKind>& losses, const ForwardOptions& forward, const AnchorOptions& anchor,
    std::vector<std::string>* warnings = nullptr);

struct DiagnoseOptions {
    std::vector<LossPair> pairs = default_loss_pairs();
    std::uint64_t seed = 0;
    std::size_t batch = 32;
};

/// One gradient probe of a checkpoint on a seeded batch, using the routing
/// and teacher settings recorded in the checkpoint config (strict when none
/// are recorded). Runs in 64-bit precision with nothing frozen.
[[nodiscard]] GradReport diagnose_checkpoint(const Checkpoint<double>& checkpoint, const Dataset& dataset,
                                             const DiagnoseOptions& options);

}  // namespace muse
