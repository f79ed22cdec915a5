// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/container.hpp"

#include <bit>
#include <boost/crc.hpp>
#include <fstream>
#include <iterator>
#include <sstream>

#include "kvsvd/error.hpp"

namespace kvsvd {

namespace fs = std::filesystem;

namespace {

using Crc64Xz = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ull, ~0ull, ~0ull, true, true>;

std::vector<unsigned char> encode_le(std::span<const double> values) {
    std::vector<unsigned char> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) {
            bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
        }
    }
    return bytes;
}

std::vector<double> decode_le(std::span<const unsigned char> bytes) {
    std::vector<double> values(bytes.size() / 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        }
        values[i] = std::bit_cast<double>(bits);
    }
    return values;
}

std::vector<unsigned char> read_binary(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open " + path.string());
    }
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace

std::uint64_t crc64(std::span<const unsigned char> bytes) {
    Crc64Xz crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

std::string hex64(std::uint64_t value) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[value & 0xF];
        value >>= 4;
    }
    return out;
}

nlohmann::json read_json_file(const fs::path& path) {
    const std::string text = read_text(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
}

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot write " + path.string());
    }
    out << text;
    if (!out) {
        fail(ErrorKind::io, "write failed for " + path.string());
    }
}

void TensorWriter::add(std::string name, const Matrix& m) {
    records_.push_back({std::move(name), m.rows(), m.cols(), blob_.size() * 8});
    blob_.insert(blob_.end(), m.data().begin(), m.data().end());
}

void TensorWriter::add(std::string name, std::span<const double> v) {
    records_.push_back({std::move(name), 1, v.size(), blob_.size() * 8});
    blob_.insert(blob_.end(), v.begin(), v.end());
}

void TensorWriter::write(const fs::path& dir, nlohmann::json header) const {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        fail(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
    }
    header["format_version"] = kFormatVersion;
    auto tensors = nlohmann::json::array();
    for (const auto& r : records_) {
        tensors.push_back({{"name", r.name}, {"rows", r.rows}, {"cols", r.cols}, {"offset", r.offset}});
    }
    header["tensors"] = std::move(tensors);

    const auto bytes = encode_le(blob_);
    {
        std::ofstream out(dir / "weights.bin", std::ios::binary | std::ios::trunc);
        if (!out) {
            fail(ErrorKind::io, "cannot write " + (dir / "weights.bin").string());
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            fail(ErrorKind::io, "write failed for weights.bin");
        }
    }
    write_text_file(dir / "config.json", header.dump(2) + "\n");
    write_text_file(dir / "checksum.txt", hex64(crc64(bytes)) + "\n");
}

TensorBundle TensorBundle::read(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        fail(ErrorKind::io, "not a model container directory: " + dir.string());
    }
    TensorBundle b;
    b.header_ = read_json_file(dir / "config.json");
    if (!b.header_.is_object() || !b.header_.contains("format_version") || !b.header_.contains("tensors")) {
        fail(ErrorKind::format, "config.json lacks format_version or tensors");
    }
    if (b.header_["format_version"] != kFormatVersion) {
        fail(ErrorKind::format, "unsupported format_version " + b.header_["format_version"].dump());
    }

    std::size_t expected = 0;
    try {
        for (const auto& t : b.header_["tensors"]) {
            TensorRecord r{t.at("name").get<std::string>(), t.at("rows").get<std::size_t>(),
                           t.at("cols").get<std::size_t>(), t.at("offset").get<std::size_t>()};
            if (r.offset % 8 != 0 || r.offset != expected) {
                fail(ErrorKind::validation, "tensor " + r.name + " has a misplaced offset");
            }
            if (r.rows == 0 || r.cols == 0) {
                fail(ErrorKind::validation, "tensor " + r.name + " has an empty shape");
            }
            expected += r.rows * r.cols * 8;
            if (!b.index_.emplace(r.name, r).second) {
                fail(ErrorKind::validation, "duplicate tensor " + r.name);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("malformed tensor manifest: ") + e.what());
    }

    const auto bytes = read_binary(dir / "weights.bin");
    if (bytes.size() != expected) {
        std::ostringstream os;
        os << "weights.bin holds " << bytes.size() << " bytes, manifest expects " << expected;
        fail(ErrorKind::checksum, os.str());
    }
    std::string recorded = read_text(dir / "checksum.txt");
    while (!recorded.empty() && (recorded.back() == '\n' || recorded.back() == '\r' || recorded.back() == ' ')) {
        recorded.pop_back();
    }
    const std::string actual = hex64(crc64(bytes));
    if (recorded != actual) {
        fail(ErrorKind::checksum, "checksum mismatch: recorded " + recorded + ", computed " + actual);
    }
    b.blob_ = decode_le(bytes);
    return b;
}

Matrix TensorBundle::matrix(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) {
        throw MissingTensorError(name);
    }
    const auto& r = it->second;
    const auto first = blob_.begin() + static_cast<std::ptrdiff_t>(r.offset / 8);
    try {
        return Matrix(r.rows, r.cols, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(r.rows * r.cols)));
    } catch (const Error&) {
        fail(ErrorKind::validation, "tensor " + name + " holds non-finite values");
    }
}

std::vector<double> TensorBundle::vector(const std::string& name) const {
    const Matrix m = matrix(name);
    if (m.rows() != 1) {
        fail(ErrorKind::validation, "tensor " + name + " is not a vector");
    }
    return {m.data().begin(), m.data().end()};
}

Matrix TensorBundle::matrix(const std::string& name, std::size_t rows, std::size_t cols) const {
    Matrix m = matrix(name);
    if (m.rows() != rows || m.cols() != cols) {
        std::ostringstream os;
        os << "tensor " << name << " is " << m.rows() << "x" << m.cols() << ", expected " << rows << "x" << cols;
        fail(ErrorKind::validation, os.str());
    }
    return m;
}

} // namespace kvsvd
