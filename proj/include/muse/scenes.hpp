// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural toy scenes: one textured background plus coloured shapes. Each
// sample provides pixels, a segment mask and a class label.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace muse {

inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kShapeKinds = 4;  // square, circle, triangle, bar
inline constexpr std::size_t kMaxClasses = 8;  // shape x {warm, cool}
inline constexpr std::size_t kMinObjectPatches = 4;

struct SceneConfig {
    std::size_t image_size = 32;
    std::size_t patch = 4;
    std::size_t classes = 8;
    std::size_t objects = 1;

    [[nodiscard]] std::size_t grid() const { return image_size / patch; }
    [[nodiscard]] std::size_t num_patches() const { return grid() * grid(); }
    [[nodiscard]] std::size_t patch_dim() const { return patch * patch * kChannels; }
    /// Throws ConfigError on an unusable configuration.
    void validate() const;
};

struct SceneSample {
    std::size_t image_h = 0;
    std::size_t image_w = 0;
    std::vector<float> image;         // H x W x 3, values in [0, 1]
    std::vector<std::uint8_t> mask;   // H x W, 0 = background
    std::uint16_t label = 0;
    std::uint64_t seed = 0;

    bool operator==(const SceneSample&) const = default;
};

struct PatchGrid {
    std::size_t grid = 0;
    std::size_t patch = 0;
    std::vector<float> tokens;             // num_patches x (patch*patch*3)
    std::vector<std::uint8_t> patch_mask;  // majority segment id per patch

    [[nodiscard]] std::size_t num_patches() const { return grid * grid; }
    [[nodiscard]] std::size_t patch_dim() const { return patch * patch * kChannels; }
};

/// Seed of sample `index` in a dataset with the given base seed.
[[nodiscard]] std::uint64_t sample_seed(std::uint64_t base_seed, std::uint64_t index);

[[nodiscard]] SceneSample generate_scene(std::uint64_t seed, const SceneConfig& config);
[[nodiscard]] std::vector<SceneSample> generate_scenes(std::size_t count, std::uint64_t base_seed,
                                                       const SceneConfig& config);

[[nodiscard]] PatchGrid to_patches(const SceneSample& sample, std::size_t patch);
/// Inverse of to_patches for the pixel values.
[[nodiscard]] std::vector<float> from_patches(const PatchGrid& grid);

/// Row i = (1 - eps) * uniform over patches sharing i's segment + eps * uniform
/// over all patches. Returns num_patches x num_patches, row-major.
[[nodiscard]] std::vector<double> teacher_attention_from_mask(std::span<const std::uint8_t> patch_mask,
                                                              double smoothing = 0.0);

struct DatasetHeader {
    int version = 1;
    std::size_t count = 0;
    std::size_t image_h = 32;
    std::size_t image_w = 32;
    std::size_t patch = 4;
    std::size_t classes = 8;
    std::uint64_t base_seed = 0;
};

struct Dataset {
    DatasetHeader header;
    std::vector<SceneSample> samples;

    [[nodiscard]] SceneConfig scene_config() const;
};

inline constexpr int kDatasetVersion = 1;

[[nodiscard]] Dataset make_dataset(std::size_t count, std::uint64_t base_seed, const SceneConfig& config);
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
[[nodiscard]] Dataset read_dataset(const std::filesystem::path& path);
/// In-memory variants used by the file functions and by tests.
[[nodiscard]] std::string serialize_dataset(const Dataset& dataset);
[[nodiscard]] Dataset parse_dataset(std::string_view bytes);

}  // namespace muse
