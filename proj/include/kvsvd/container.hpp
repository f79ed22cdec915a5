// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvsvd/densemat.hpp"

namespace kvsvd {

// On-disk tensor container shared by plain and compressed models:
//
//   <dir>/config.json   header object + "format_version": 1 + "tensors":
//                       [{name, rows, cols, offset}] in blob order
//   <dir>/weights.bin   row-major little-endian binary64, concatenated in
//                       manifest order; every offset is a multiple of 8
//   <dir>/checksum.txt  CRC-64/XZ of weights.bin, 16 lowercase hex digits

inline constexpr int kFormatVersion = 1;

struct TensorRecord {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;
};

class TensorWriter {
public:
    void add(std::string name, const Matrix& m);
    void add(std::string name, std::span<const double> v); // stored as 1 x n

    /// Creates `dir` if needed and writes the three container files.
    void write(const std::filesystem::path& dir, nlohmann::json header) const;

private:
    std::vector<TensorRecord> records_;
    std::vector<double> blob_;
};

class TensorBundle {
public:
    /// Validates version, manifest layout, blob length and checksum before
    /// returning; nothing partial escapes on failure.
    static TensorBundle read(const std::filesystem::path& dir);

    const nlohmann::json& header() const { return header_; }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    /// Throws MissingTensorError when absent.
    Matrix matrix(const std::string& name) const;
    std::vector<double> vector(const std::string& name) const;
    Matrix matrix(const std::string& name, std::size_t rows, std::size_t cols) const;

private:
    nlohmann::json header_;
    std::map<std::string, TensorRecord> index_;
    std::vector<double> blob_;
};

std::uint64_t crc64(std::span<const unsigned char> bytes);
std::string hex64(std::uint64_t value);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

} // namespace kvsvd
