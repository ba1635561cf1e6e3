// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale evaluation: attention segmentation, linear probe, label
// retrieval and reconstruction PSNR.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "muse/encoder.hpp"
#include "muse/scenes.hpp"

namespace muse {

struct SegmentationScore {
    double pair_acc = 0.0;
    double iou = 0.0;
    std::size_t samples = 0;
    std::size_t skipped = 0;  // scenes without foreground patches
};

/// `maps[s]` is the N_p x N_p mean patch attention of sample s and
/// `patch_masks[s]` its majority segment ids (0 = background).
/// pair_acc: unordered pairs predicted same-segment iff A[i][j] + A[j][i] > 2/N_p.
/// iou: seed = foreground patch with the largest attention mass on the other
/// foreground patches (lowest index on ties); predicted set = {j : A[seed][j] > 1/N_p},
/// compared with the patches of the seed's segment.
[[nodiscard]] SegmentationScore attention_segmentation(const std::vector<std::vector<double>>& maps,
                                                       const std::vector<std::vector<std::uint8_t>>& patch_masks);

/// Mean over layers and heads of the renormalized patch-to-patch attention,
/// one N_p x N_p map per sample. `patches` holds batch x N_p x patch_dim.
[[nodiscard]] std::vector<std::vector<double>> mean_patch_attention(EncoderParams<double>& params,
                                                                    std::span<const double> patches,
                                                                    std::size_t batch);

struct ProbeResult {
    double accuracy = 0.0;
    std::size_t train = 0;
    std::size_t test = 0;
};

/// One-vs-rest ridge regression without bias on a seeded 80/20 split.
/// `features` is M x dim row-major. Argmax ties go to the lowest class.
/// ArgumentError when M < 2 * classes; NumericError on non-finite features.
[[nodiscard]] ProbeResult linear_probe(std::span<const double> features, std::size_t dim,
                                       std::span<const std::size_t> labels, std::size_t classes,
                                       std::uint64_t seed, double ridge = 1e-3);

/// Top-1 accuracy of argmax_c <e_i, t_c>; ties go to the lowest class.
/// `embeddings` is M x dim, `class_embeddings` is C x dim.
[[nodiscard]] double retrieval_top1(std::span<const double> embeddings, std::size_t dim,
                                    std::span<const std::size_t> labels,
                                    std::span<const double> class_embeddings);

/// 10 log10(1 / MSE); +inf when the inputs are identical.
[[nodiscard]] double psnr(std::span<const double> recon, std::span<const double> target);

struct EvalReport {
    std::string config_hash;
    std::string checkpoint;
    double seg_pair_acc = 0.0;
    double seg_iou = 0.0;
    double probe_acc = 0.0;
    double retrieval_top1 = 0.0;
    double psnr_db = 0.0;
    double recon_mse = 0.0;
    std::size_t n = 0;
    std::size_t seg_skipped = 0;

    /// Keys sorted; non-finite values written as strings ("inf").
    [[nodiscard]] std::string to_json() const;
};

/// FNV-1a (64-bit, hex) of the canonical form of a JSON document.
[[nodiscard]] std::string config_hash(std::string_view json_text);

/// Runs every metric over the whole dataset. Deterministic in (checkpoint, seed).
[[nodiscard]] EvalReport evaluate(const Checkpoint<double>& checkpoint, const Dataset& dataset,
                                  std::uint64_t seed, const std::string& checkpoint_label = {});

}  // namespace muse
