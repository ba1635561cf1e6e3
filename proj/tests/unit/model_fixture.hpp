// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Small encoder configurations and batches for routing and gradient tests.

#pragma once

#include <random>
#include <set>
#include <vector>

#include "muse/encoder.hpp"
#include "muse/scenes.hpp"
#include "muse/trainer.hpp"

namespace muse::testing {

/// 2x2 patch grid + 4 queries = 8 tokens, two blocks.
inline EncoderConfig tiny_encoder() {
    EncoderConfig c;
    c.image_size = 8;
    c.patch = 4;
    c.dim = 8;
    c.heads = 2;
    c.layers = 2;
    c.embed_dim = 4;
    c.queries = 4;
    c.classes = 4;
    return c;
}

/// Random patches, labels and two-segment teachers for `batch` samples.
inline PreparedBatch<double> random_batch(const EncoderConfig& c, std::size_t batch, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PreparedBatch<double> b;
    b.size = batch;
    const std::size_t np = c.num_patches();
    b.patches.resize(batch * np * c.patch_dim());
    for (auto& v : b.patches) v = u(rng);
    for (std::size_t s = 0; s < batch; ++s) {
        b.labels.push_back(s % c.classes);
        std::vector<std::uint8_t> mask(np, 0);
        for (std::size_t i = 0; i < np; ++i) mask[i] = (i + s) % 3 == 0 ? 1 : 0;
        mask[0] = 1;
        const auto t = teacher_attention_from_mask(mask, 0.0);
        b.teacher.insert(b.teacher.end(), t.begin(), t.end());
        b.patch_masks.push_back(mask);
    }
    return b;
}

/// Perturbs every parameter so no gradient is accidentally zero at init.
inline void jitter(EncoderParams<double>& params, std::uint64_t seed, double scale = 0.05) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& p : params.params) {
        if (p.name.ends_with("tau")) continue;
        for (auto& v : p.value) v += n(rng);
    }
}

inline const std::set<LossKind>& all_losses() {
    static const std::set<LossKind> s{LossKind::Topo, LossKind::Anchor, LossKind::Rec};
    return s;
}

}  // namespace muse::testing
