// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include "muse/scenes.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "muse/errors.hpp"
#include "../util/rng.hpp"

namespace muse {
namespace {

enum class ShapeKind { Square, Circle, Triangle, Bar };

struct Placement {
    ShapeKind kind;
    double cx, cy;  // centre in pixels
    double size;    // half extent in pixels
    bool vertical;  // bars only
};

bool covers(const Placement& p, double x, double y) {
    const double dx = x - p.cx, dy = y - p.cy, s = p.size;
    switch (p.kind) {
        case ShapeKind::Square: return std::abs(dx) <= s && std::abs(dy) <= s;
        case ShapeKind::Circle: return dx * dx + dy * dy <= s * s;
        case ShapeKind::Triangle: {
            if (dy < -s || dy > s) return false;
            const double half_width = 0.5 * (dy + s);  // apex at the top
            return std::abs(dx) <= half_width;
        }
        case ShapeKind::Bar: {
            const double along = p.vertical ? dy : dx;
            const double across = p.vertical ? dx : dy;
            return std::abs(along) <= s && std::abs(across) <= std::max(2.0, s / 3.0);
        }
    }
    return false;
}

std::array<double, 3> object_colour(bool warm, rng::Stream& r) {
    if (warm) return {r.uniform(0.80, 0.95), r.uniform(0.25, 0.60), r.uniform(0.05, 0.20)};
    return {r.uniform(0.05, 0.20), r.uniform(0.35, 0.70), r.uniform(0.80, 0.95)};
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

std::vector<std::uint8_t> majority_mask(const std::vector<std::uint8_t>& mask, std::size_t w,
                                        std::size_t patch, std::size_t grid) {
    std::vector<std::uint8_t> out(grid * grid);
    std::array<std::size_t, 256> counts{};
    for (std::size_t pr = 0; pr < grid; ++pr) {
        for (std::size_t pc = 0; pc < grid; ++pc) {
            counts.fill(0);
            for (std::size_t y = 0; y < patch; ++y) {
                for (std::size_t x = 0; x < patch; ++x) {
                    ++counts[mask[(pr * patch + y) * w + pc * patch + x]];
                }
            }
            // Ties resolve to the lowest segment id.
            out[pr * grid + pc] = static_cast<std::uint8_t>(
                std::max_element(counts.begin(), counts.end()) - counts.begin());
        }
    }
    return out;
}

constexpr int kMaxAttempts = 200;

// Object half extent as a fraction of the image side.
constexpr double kSizeLo = 0.25;
constexpr double kSizeHi = 0.27;

}  // namespace

void SceneConfig::validate() const {
    if (patch == 0 || image_size == 0) throw ConfigError("image size and patch must be positive");
    if (image_size % patch != 0) {
        throw ConfigError("image size " + std::to_string(image_size) +
                          " is not divisible by patch size " + std::to_string(patch));
    }
    if (classes < 2 || classes > kMaxClasses) {
        throw ConfigError("classes must lie in [2, " + std::to_string(kMaxClasses) + "], got " +
                          std::to_string(classes));
    }
    if (objects < 1 || objects > 8) throw ConfigError("objects must lie in [1, 8]");
    if (grid() < 8) {
        throw ConfigError("object larger than image: a " + std::to_string(grid()) + "x" +
                          std::to_string(grid()) + " patch grid cannot hold a " +
                          std::to_string(kMinObjectPatches) + "-patch object with background");
    }
}

std::uint64_t sample_seed(std::uint64_t base_seed, std::uint64_t index) {
    return rng::splitmix64(base_seed + index);
}

SceneSample generate_scene(std::uint64_t seed, const SceneConfig& config) {
    config.validate();
    const std::size_t n = config.image_size;
    rng::Stream r(seed);

    SceneSample s;
    s.image_h = n;
    s.image_w = n;
    s.seed = seed;
    s.image.assign(n * n * kChannels, 0.0f);
    s.mask.assign(n * n, 0);

    std::array<double, 3> base{};
    for (auto& c : base) c = r.uniform(0.35, 0.55);
    for (std::size_t i = 0; i < n * n; ++i) {
        for (std::size_t c = 0; c < kChannels; ++c) {
            s.image[i * kChannels + c] = clamp01(base[c] + r.uniform(-0.03, 0.03));
        }
    }

    const double extent = static_cast<double>(n);
    for (std::size_t obj = 0; obj < config.objects; ++obj) {
        const auto label = static_cast<std::uint16_t>(r.below(config.classes));
        if (obj == 0) s.label = label;
        const auto kind = static_cast<ShapeKind>(label / 2);
        const bool warm = label % 2 == 0;
        const auto id = static_cast<std::uint8_t>(obj + 1);

        bool placed = false;
        for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
            Placement p{kind, 0, 0, r.uniform(kSizeLo, kSizeHi) * extent, r.uniform() < 0.5};
            p.cx = r.uniform(p.size, extent - p.size);
            p.cy = r.uniform(p.size, extent - p.size);

            auto trial = s.mask;
            for (std::size_t y = 0; y < n; ++y) {
                for (std::size_t x = 0; x < n; ++x) {
                    if (covers(p, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
                        trial[y * n + x] = id;
                    }
                }
            }
            const auto pm = majority_mask(trial, n, config.patch, config.grid());
            bool ok = true;
            for (std::size_t k = 1; k <= id; ++k) {
                if (static_cast<std::size_t>(std::count(pm.begin(), pm.end(), k)) < kMinObjectPatches) {
                    ok = false;
                }
            }
            if (!ok) continue;

            const auto colour = object_colour(warm, r);
            for (std::size_t i = 0; i < n * n; ++i) {
                if (trial[i] != id) continue;
                for (std::size_t c = 0; c < kChannels; ++c) {
                    s.image[i * kChannels + c] = clamp01(colour[c] + r.uniform(-0.02, 0.02));
                }
            }
            s.mask = std::move(trial);
            placed = true;
        }
        if (!placed) {
            throw ConfigError("object larger than image: could not place object " +
                              std::to_string(obj + 1) + " covering " +
                              std::to_string(kMinObjectPatches) + " patches");
        }
    }
    return s;
}

std::vector<SceneSample> generate_scenes(std::size_t count, std::uint64_t base_seed,
                                         const SceneConfig& config) {
    std::vector<SceneSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(sample_seed(base_seed, i), config));
    return out;
}

PatchGrid to_patches(const SceneSample& sample, std::size_t patch) {
    if (patch == 0 || sample.image_h != sample.image_w || sample.image_h % patch != 0) {
        throw ConfigError("image " + std::to_string(sample.image_h) + "x" +
                          std::to_string(sample.image_w) + " cannot be split into " +
                          std::to_string(patch) + "-pixel patches");
    }
    const std::size_t n = sample.image_w, grid = n / patch;
    PatchGrid g;
    g.grid = grid;
    g.patch = patch;
    g.tokens.resize(grid * grid * g.patch_dim());
    auto out = g.tokens.begin();
    for (std::size_t pr = 0; pr < grid; ++pr) {
        for (std::size_t pc = 0; pc < grid; ++pc) {
            for (std::size_t y = 0; y < patch; ++y) {
                const auto row = sample.image.begin() +
                                 static_cast<std::ptrdiff_t>(((pr * patch + y) * n + pc * patch) * kChannels);
                out = std::copy_n(row, patch * kChannels, out);
            }
        }
    }
    g.patch_mask = majority_mask(sample.mask, n, patch, grid);
    return g;
}

std::vector<float> from_patches(const PatchGrid& g) {
    const std::size_t n = g.grid * g.patch;
    std::vector<float> image(n * n * kChannels);
    auto in = g.tokens.begin();
    for (std::size_t pr = 0; pr < g.grid; ++pr) {
        for (std::size_t pc = 0; pc < g.grid; ++pc) {
            for (std::size_t y = 0; y < g.patch; ++y) {
                auto row = image.begin() +
                           static_cast<std::ptrdiff_t>(((pr * g.patch + y) * n + pc * g.patch) * kChannels);
                std::copy_n(in, g.patch * kChannels, row);
                in += static_cast<std::ptrdiff_t>(g.patch * kChannels);
            }
        }
    }
    return image;
}

std::vector<double> teacher_attention_from_mask(std::span<const std::uint8_t> patch_mask,
                                                 double smoothing) {
    if (!(smoothing >= 0.0 && smoothing < 1.0)) {
        throw ArgumentError("teacher smoothing must lie in [0, 1)");
    }
    const std::size_t np = patch_mask.size();
    std::array<std::size_t, 256> sizes{};
    for (auto m : patch_mask) ++sizes[m];
    std::vector<double> t(np * np);
    const double spread = smoothing / static_cast<double>(np);
    for (std::size_t i = 0; i < np; ++i) {
        const double same = (1.0 - smoothing) / static_cast<double>(sizes[patch_mask[i]]);
        for (std::size_t j = 0; j < np; ++j) {
            t[i * np + j] = (patch_mask[i] == patch_mask[j] ? same : 0.0) + spread;
        }
    }
    return t;
}

}  // namespace muse
