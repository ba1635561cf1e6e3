// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Little-endian byte packing and whole-file helpers shared by the file formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "muse/errors.hpp"

namespace muse::bytes {

template <typename U>
void put_le(std::string& out, U value) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<char>((value >> (8 * i)) & 0xFFu));
    }
}

inline void put_f32(std::string& out, float value) { put_le(out, std::bit_cast<std::uint32_t>(value)); }

/// Sequential reader that reports truncation with the failing offset.
class Reader {
public:
    explicit Reader(std::string_view data) : data_(data) {}

    [[nodiscard]] std::size_t offset() const { return pos_; }
    [[nodiscard]] std::size_t remaining() const { return data_.size() - pos_; }

    std::string_view take(std::size_t n, const char* what) {
        if (remaining() < n) {
            throw ParseError(ParseFailure::Truncated, pos_,
                             std::string("truncated ") + what + ": need " + std::to_string(n) +
                                 " bytes, have " + std::to_string(remaining()));
        }
        auto out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    template <typename U>
    U le(const char* what) {
        auto raw = take(sizeof(U), what);
        U value = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            value |= static_cast<U>(static_cast<unsigned char>(raw[i])) << (8 * i);
        }
        return value;
    }

    float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }

    /// Bytes up to (excluding) the next '\n'; consumes the newline.
    std::string_view line(const char* what) {
        const auto end = data_.find('\n', pos_);
        if (end == std::string_view::npos) {
            throw ParseError(ParseFailure::BadHeader, pos_,
                             std::string("unterminated ") + what + " line");
        }
        auto out = data_.substr(pos_, end - pos_);
        pos_ = end + 1;
        return out;
    }

private:
    std::string_view data_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
    return data;
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace muse::bytes
