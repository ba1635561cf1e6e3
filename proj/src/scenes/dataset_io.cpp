// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include <json.hpp>

#include "muse/errors.hpp"
#include "muse/scenes.hpp"
#include "../util/bytes.hpp"

namespace muse {
namespace {

constexpr std::string_view kMagic = "MUSEDS01";

}  // namespace

SceneConfig Dataset::scene_config() const {
    SceneConfig c;
    c.image_size = header.image_h;
    c.patch = header.patch;
    c.classes = header.classes;
    return c;
}

Dataset make_dataset(std::size_t count, std::uint64_t base_seed, const SceneConfig& config) {
    config.validate();
    Dataset d;
    d.header.count = count;
    d.header.image_h = config.image_size;
    d.header.image_w = config.image_size;
    d.header.patch = config.patch;
    d.header.classes = config.classes;
    d.header.base_seed = base_seed;
    d.samples = generate_scenes(count, base_seed, config);
    return d;
}

std::string serialize_dataset(const Dataset& d) {
    const auto& h = d.header;
    if (d.samples.size() != h.count) {
        throw ArgumentError("dataset header count " + std::to_string(h.count) + " but " +
                            std::to_string(d.samples.size()) + " samples");
    }
    nlohmann::json header = {{"version", h.version}, {"count", h.count},     {"image_h", h.image_h},
                             {"image_w", h.image_w}, {"patch", h.patch},     {"classes", h.classes},
                             {"base_seed", h.base_seed}};
    std::string out(kMagic);
    out += header.dump();
    out += '\n';
    const std::size_t pixels = h.image_h * h.image_w;
    out.reserve(out.size() + h.count * (pixels * (kChannels * 4 + 1) + 2));
    for (const auto& s : d.samples) {
        if (s.image.size() != pixels * kChannels || s.mask.size() != pixels) {
            throw DimensionError("sample size does not match the dataset header");
        }
        for (float v : s.image) bytes::put_f32(out, v);
        out.append(reinterpret_cast<const char*>(s.mask.data()), s.mask.size());
        bytes::put_le(out, s.label);
    }
    return out;
}

Dataset parse_dataset(std::string_view data) {
    bytes::Reader r(data);
    if (data.size() < kMagic.size() || data.substr(0, kMagic.size()) != kMagic) {
        throw ParseError(ParseFailure::BadMagic, 0, "not a MUSEDS01 dataset (bad magic)");
    }
    r.take(kMagic.size(), "magic");
    const std::size_t header_offset = r.offset();
    const auto line = r.line("header");
    Dataset d;
    try {
        const auto j = nlohmann::json::parse(line);
        d.header.version = j.at("version").get<int>();
        if (d.header.version != kDatasetVersion) {
            throw ParseError(ParseFailure::VersionMismatch, header_offset,
                             "dataset version " + std::to_string(d.header.version) +
                                 " is not supported (expected " + std::to_string(kDatasetVersion) + ")");
        }
        d.header.count = j.at("count").get<std::size_t>();
        d.header.image_h = j.at("image_h").get<std::size_t>();
        d.header.image_w = j.at("image_w").get<std::size_t>();
        d.header.patch = j.at("patch").get<std::size_t>();
        d.header.classes = j.at("classes").get<std::size_t>();
        d.header.base_seed = j.at("base_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(ParseFailure::BadHeader, header_offset,
                         std::string("malformed dataset header: ") + e.what());
    }
    const auto& h = d.header;
    if (h.image_h == 0 || h.image_w == 0 || h.image_h > 4096 || h.image_w > 4096) {
        throw ParseError(ParseFailure::BadHeader, header_offset, "implausible image size in header");
    }
    const std::size_t pixels = h.image_h * h.image_w;
    d.samples.reserve(std::min<std::size_t>(h.count, 1u << 16));
    for (std::size_t i = 0; i < h.count; ++i) {
        SceneSample s;
        s.image_h = h.image_h;
        s.image_w = h.image_w;
        s.seed = sample_seed(h.base_seed, i);
        s.image.resize(pixels * kChannels);
        for (auto& v : s.image) v = r.f32("sample image");
        const auto m = r.take(pixels, "sample mask");
        s.mask.assign(m.begin(), m.end());
        s.label = r.le<std::uint16_t>("sample label");
        d.samples.push_back(std::move(s));
    }
    return d;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    bytes::write_file(path, serialize_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) { return parse_dataset(bytes::read_file(path)); }

}  // namespace muse
