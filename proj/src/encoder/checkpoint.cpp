// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include <json.hpp>

#include "muse/encoder.hpp"
#include "muse/errors.hpp"
#include "../util/bytes.hpp"

namespace muse {
namespace {

constexpr std::string_view kMagic = "MUSECK01";

}  // namespace

std::string checkpoint_config(const EncoderConfig& config, bool two_stream) {
    nlohmann::json j = {{"encoder", nlohmann::json::parse(config.to_json())},
                        {"two_stream", two_stream}};
    return j.dump();
}

template <typename Real>
std::string serialize_checkpoint(const EncoderParams<Real>& params, const CheckpointHeader& header) {
    nlohmann::json config;
    try {
        config = nlohmann::json::parse(header.config_json);
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    nlohmann::json head = {{"version", header.version},
                           {"config", config},
                           {"step", header.step},
                           {"stage", header.stage}};
    nlohmann::json index = nlohmann::json::array();
    for (const auto& p : params.params) index.push_back({{"name", p.name}, {"shape", p.shape}});

    std::string out(kMagic);
    out += head.dump();
    out += '\n';
    out += index.dump();
    out += '\n';
    for (const auto& p : params.params) {
        for (Real v : p.value) bytes::put_f32(out, static_cast<float>(v));
    }
    return out;
}

template <typename Real>
Checkpoint<Real> parse_checkpoint(std::string_view data) {
    if (data.size() < kMagic.size() || data.substr(0, kMagic.size()) != kMagic) {
        throw ParseError(ParseFailure::BadMagic, 0, "not a MUSECK01 checkpoint (bad magic)");
    }
    bytes::Reader r(data);
    r.take(kMagic.size(), "magic");
    Checkpoint<Real> ck;
    const std::size_t head_offset = r.offset();
    const auto head_line = r.line("checkpoint header");
    EncoderConfig enc;
    bool two_stream = false;
    try {
        const auto head = nlohmann::json::parse(head_line);
        ck.header.version = head.at("version").get<int>();
        if (ck.header.version != kCheckpointVersion) {
            throw ParseError(ParseFailure::VersionMismatch, head_offset,
                             "checkpoint version " + std::to_string(ck.header.version) +
                                 " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
        }
        const auto& config = head.at("config");
        ck.header.config_json = config.dump();
        ck.header.step = head.at("step").get<long>();
        ck.header.stage = head.at("stage").get<int>();
        enc = EncoderConfig::from_json(config.at("encoder").dump());
        two_stream = config.at("two_stream").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(ParseFailure::BadHeader, head_offset,
                         std::string("malformed checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw ParseError(ParseFailure::BadHeader, head_offset, e.what());
    }
    try {
        ck.params = make_layout<Real>(enc, two_stream);
    } catch (const ConfigError& e) {
        throw ParseError(ParseFailure::BadHeader, head_offset, e.what());
    }

    const std::size_t index_offset = r.offset();
    const auto index_line = r.line("tensor index");
    try {
        const auto index = nlohmann::json::parse(index_line);
        if (!index.is_array() || index.size() != ck.params.params.size()) {
            throw ParseError(ParseFailure::BadHeader, index_offset,
                             "tensor index does not match the configured layout");
        }
        for (std::size_t i = 0; i < index.size(); ++i) {
            const auto& p = ck.params.params[i];
            const auto name = index[i].at("name").get<std::string>();
            const auto shape = index[i].at("shape").get<Shape>();
            if (name != p.name || shape != p.shape) {
                throw ParseError(ParseFailure::BadHeader, index_offset,
                                 "tensor " + std::to_string(i) + " is '" + name + "' " +
                                     shape_string(shape) + ", layout expects '" + p.name + "' " +
                                     shape_string(p.shape));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(ParseFailure::BadHeader, index_offset,
                         std::string("malformed tensor index: ") + e.what());
    }
    for (auto& p : ck.params.params) {
        for (auto& v : p.value) v = static_cast<Real>(r.f32(p.name.c_str()));
    }
    return ck;
}

template <typename Real>
void write_checkpoint(const std::filesystem::path& path, const EncoderParams<Real>& params,
                      const CheckpointHeader& header) {
    bytes::write_file(path, serialize_checkpoint(params, header));
}

template <typename Real>
Checkpoint<Real> read_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint<Real>(bytes::read_file(path));
}

#define MUSE_CHECKPOINT_INSTANTIATE(Real)                                                        \
    template std::string serialize_checkpoint(const EncoderParams<Real>&, const CheckpointHeader&); \
    template Checkpoint<Real> parse_checkpoint<Real>(std::string_view);                          \
    template void write_checkpoint(const std::filesystem::path&, const EncoderParams<Real>&,     \
                                   const CheckpointHeader&);                                     \
    template Checkpoint<Real> read_checkpoint<Real>(const std::filesystem::path&);

MUSE_CHECKPOINT_INSTANTIATE(float)
MUSE_CHECKPOINT_INSTANTIATE(double)

#undef MUSE_CHECKPOINT_INSTANTIATE

}  // namespace muse
