// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Synergistic block stack: attention topology from W_Q/W_K, token values from
// W_V aggregated by that topology, learnable query tokens, a pooled semantic
// projector and a linear patch decoder. Forward passes are batched: tokens of
// sample b occupy rows [b*N, (b+1)*N) with the patches first.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "muse/autodiff.hpp"
#include "muse/parameter.hpp"

namespace muse {

/// Gradient routing between the topology and value paths.
///   Strict:    Q/K read a detached input, values use a detached attention map,
///              the decoder sees stack output only through a straight-through
///              path onto the patch embedding. Loss supports are disjoint.
///   Relaxed:   as Strict but Q/K read the live input.
///   Naive:     no detachment anywhere.
///   TwoStream: two full parameter copies, stream 0 for topology and
///              reconstruction, stream 1 for anchoring; each runs naive.
enum class Routing { Strict, Relaxed, Naive, TwoStream };

[[nodiscard]] std::string_view routing_name(Routing r);
/// ConfigError on an unknown name.
[[nodiscard]] Routing parse_routing(std::string_view name);

struct EncoderConfig {
    std::size_t image_size = 32;
    std::size_t patch = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t layers = 6;
    std::size_t embed_dim = 32;
    std::size_t queries = 16;
    std::size_t classes = 8;
    double tau_init = 0.07;
    double tau_min = 0.01;
    double tau_max = 1.0;

    [[nodiscard]] std::size_t grid() const { return image_size / patch; }
    [[nodiscard]] std::size_t num_patches() const { return grid() * grid(); }
    [[nodiscard]] std::size_t patch_dim() const { return patch * patch * 3; }
    [[nodiscard]] std::size_t tokens() const { return num_patches() + queries; }
    [[nodiscard]] std::size_t head_dim() const { return dim / heads; }
    [[nodiscard]] std::size_t hidden() const { return 4 * dim; }
    void validate() const;

    [[nodiscard]] std::string to_json() const;
    [[nodiscard]] static EncoderConfig from_json(std::string_view text);
    bool operator==(const EncoderConfig&) const = default;
};

struct BlockIndex {
    std::size_t ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias, fc1_w, fc1_b, fc2_w,
        fc2_b;
};

struct StreamIndex {
    std::size_t patch_w, patch_b, pos, queries;
    std::vector<BlockIndex> blocks;
    std::size_t proj_w, proj_b, class_emb, tau, dec_w, dec_b;
};

template <typename Real>
struct EncoderParams {
    EncoderConfig config;
    bool two_stream = false;
    std::vector<Parameter<Real>> params;  // declaration order
    std::vector<StreamIndex> streams;     // one entry, or two for two-stream

    [[nodiscard]] std::size_t scalar_count() const;
    [[nodiscard]] const Parameter<Real>* find(std::string_view name) const;
    void zero_grads();
    /// Keeps every temperature inside [tau_min, tau_max].
    void clamp_tau();

    template <typename Other>
    [[nodiscard]] EncoderParams<Other> cast() const {
        EncoderParams<Other> out;
        out.config = config;
        out.two_stream = two_stream;
        out.streams = streams;
        out.params.reserve(params.size());
        for (const auto& p : params) {
            Parameter<Other> q(p.name, p.shape, p.subspace, p.layer, p.stream);
            for (std::size_t i = 0; i < p.value.size(); ++i) q.value[i] = static_cast<Other>(p.value[i]);
            out.params.push_back(std::move(q));
        }
        return out;
    }
};

/// Parameter layout with zero values (used by init and checkpoint loading).
template <typename Real>
[[nodiscard]] EncoderParams<Real> make_layout(const EncoderConfig& config, bool two_stream);

/// Fan-in scaled uniform linear maps, zero biases, unit layer-norm gains,
/// N(0, 0.02) positions and query tokens, temperature tau_init.
template <typename Real>
[[nodiscard]] EncoderParams<Real> init_params(std::uint64_t seed, const EncoderConfig& config,
                                              bool two_stream = false);

/// Graph handles for one block's parameters.
template <typename Real>
struct BlockVars {
    ad::Var<Real> ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias, fc1_w, fc1_b, fc2_w,
        fc2_b;
};

template <typename Real>
struct BlockOutput {
    ad::Var<Real> tokens;     // [batch*N x D]
    ad::Var<Real> attention;  // [batch*heads*N x N], live (not detached)
};

/// One pre-norm block. For TwoStream pass Naive.
template <typename Real>
BlockOutput<Real> block_forward(ad::Var<Real> input, const BlockVars<Real>& block, std::size_t batch,
                                std::size_t heads, Routing routing);

template <typename Real>
struct EncoderOutput {
    std::vector<ad::Var<Real>> attention;  // per layer, live maps of the structural stream
    ad::Var<Real> tokens;                  // final tokens of the structural stream
    ad::Var<Real> pooled;                  // [batch x D], mean of query rows
    ad::Var<Real> embedding;               // [batch x D_e], unit rows
    ad::Var<Real> recon;                   // [batch*N_p x patch_dim]
    ad::Var<Real> class_table;             // class embeddings of the anchoring stream
    ad::Var<Real> tau;                     // temperature of the anchoring stream
};

struct ForwardOptions {
    Routing routing = Routing::Strict;
    /// Parameters in these subspaces are bound without gradients.
    std::set<Subspace> frozen;
    /// Two-stream only: skip the anchoring stream when it is not needed.
    bool need_embedding = true;
};

/// `patches` holds batch x N_p x patch_dim values.
template <typename Real>
EncoderOutput<Real> encoder_forward(ad::Graph<Real>& graph, EncoderParams<Real>& params,
                                    std::span<const Real> patches, std::size_t batch,
                                    const ForwardOptions& options);

/// Patch-to-patch attention of every (sample, head): keeps the leading
/// `num_patches` rows/cols of each N x N map and renormalizes the rows.
template <typename Real>
ad::Var<Real> extract_student_topology(ad::Var<Real> attention, std::size_t tokens,
                                       std::size_t num_patches);

// Checkpoints ---------------------------------------------------------------

struct CheckpointHeader {
    int version = 1;
    std::string config_json;  // must contain "encoder" and "two_stream"
    long step = 0;
    int stage = 0;
};

inline constexpr int kCheckpointVersion = 1;

template <typename Real>
struct Checkpoint {
    CheckpointHeader header;
    EncoderParams<Real> params;
};

/// Builds the config object stored in checkpoints when no trainer config exists.
[[nodiscard]] std::string checkpoint_config(const EncoderConfig& config, bool two_stream);

template <typename Real>
[[nodiscard]] std::string serialize_checkpoint(const EncoderParams<Real>& params,
                                               const CheckpointHeader& header);
template <typename Real>
[[nodiscard]] Checkpoint<Real> parse_checkpoint(std::string_view bytes);
template <typename Real>
void write_checkpoint(const std::filesystem::path& path, const EncoderParams<Real>& params,
                      const CheckpointHeader& header);
template <typename Real>
[[nodiscard]] Checkpoint<Real> read_checkpoint(const std::filesystem::path& path);

}  // namespace muse
