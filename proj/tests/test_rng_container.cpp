// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "kvsvd/container.hpp"
#include "kvsvd/error.hpp"
#include "kvsvd/rng.hpp"
#include "test_util.hpp"

using namespace kvsvd;
namespace fs = std::filesystem;

using testutil::kind_of;
using testutil::scratch;

TEST(Rng, SplitmixReferenceValue) {
    // First output of the reference splitmix64 stream seeded with 0.
    EXPECT_EQ(splitmix64(0), 0xE220A8397B1DCDAFull);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(a.next_u64(), b.next_u64());
    }
}

TEST(Rng, NearbySeedsDiffer) {
    Rng a(0);
    Rng b(1);
    EXPECT_NE(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformInHalfOpenUnitInterval) {
    Rng r(3);
    for (int i = 0; i < 100000; ++i) {
        const double u = r.uniform();
        ASSERT_GT(u, 0.0);
        ASSERT_LE(u, 1.0);
    }
}

TEST(Rng, NormalMoments) {
    Rng r(4);
    const int n = 200000;
    double s = 0.0;
    double s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
    Rng r(5);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 10000; ++i) {
        const auto v = r.below(7);
        ASSERT_LT(v, 7u);
        seen.insert(v);
    }
    EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, ForkIsDeterministicAndDistinct) {
    const Rng root(9);
    Rng a = root.fork(1);
    Rng b = root.fork(1);
    Rng c = root.fork(2);
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
}

TEST(Crc64, XzCheckValue) {
    const std::string s = "123456789";
    const auto bytes = std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size());
    EXPECT_EQ(crc64(bytes), 0x995DC9BBDF1939FAull);
    EXPECT_EQ(hex64(0x995DC9BBDF1939FAull), "995dc9bbdf1939fa");
}

TEST(Container, RoundTripBitExact) {
    const auto dir = scratch("roundtrip");
    TensorWriter w;
    const Matrix m(2, 3, {1.5, -2.0, 3.25, 1e-300, -0.0, 7.0});
    const std::vector<double> v{0.1, 0.2, 0.3};
    w.add("m", m);
    w.add("v", std::span<const double>(v));
    w.write(dir, {{"kind", "test"}});
    const auto b = TensorBundle::read(dir);
    EXPECT_EQ(b.header().at("kind"), "test");
    EXPECT_EQ(b.header().at("format_version"), kFormatVersion);
    const Matrix back = b.matrix("m");
    ASSERT_EQ(back.rows(), 2u);
    for (std::size_t i = 0; i < m.size(); ++i) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(back.data()[i]), std::bit_cast<std::uint64_t>(m.data()[i]));
    }
    EXPECT_EQ(b.vector("v"), v);
    EXPECT_EQ(b.header().at("tensors").at(1).at("offset"), 48);
    fs::remove_all(dir);
}

TEST(Container, WeightsAreLittleEndianBinary64) {
    const auto dir = scratch("endian");
    TensorWriter w;
    w.add("m", Matrix(1, 1, {1.0}));
    w.write(dir, nlohmann::json::object());
    std::ifstream in(dir / "weights.bin", std::ios::binary);
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    // 1.0 = 0x3FF0000000000000, least significant byte first.
    EXPECT_EQ(bytes[0], 0x00);
    EXPECT_EQ(bytes[6], 0xF0);
    EXPECT_EQ(bytes[7], 0x3F);
    fs::remove_all(dir);
}

TEST(Container, TruncatedBlobIsChecksumError) {
    const auto dir = scratch("trunc");
    TensorWriter w;
    w.add("m", Matrix(3, 3));
    w.write(dir, nlohmann::json::object());
    fs::resize_file(dir / "weights.bin", 40);
    EXPECT_EQ(kind_of([&] { TensorBundle::read(dir); }), ErrorKind::checksum);
    fs::remove_all(dir);
}

TEST(Container, FlippedByteIsChecksumError) {
    const auto dir = scratch("flip");
    TensorWriter w;
    w.add("m", Matrix(2, 2, {1, 2, 3, 4}));
    w.write(dir, nlohmann::json::object());
    {
        std::fstream f(dir / "weights.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(3);
        f.put('\x7f');
    }
    EXPECT_EQ(kind_of([&] { TensorBundle::read(dir); }), ErrorKind::checksum);
    fs::remove_all(dir);
}

TEST(Container, MissingTensorNamesIt) {
    const auto dir = scratch("missing");
    TensorWriter w;
    w.add("present", Matrix(1, 1));
    w.write(dir, nlohmann::json::object());
    const auto b = TensorBundle::read(dir);
    try {
        b.matrix("absent");
        FAIL() << "no exception";
    } catch (const MissingTensorError& e) {
        EXPECT_EQ(e.kind(), ErrorKind::missing_tensor);
        EXPECT_EQ(e.name(), "absent");
    }
    fs::remove_all(dir);
}

TEST(Container, ShapeMismatchIsValidation) {
    const auto dir = scratch("shape");
    TensorWriter w;
    w.add("m", Matrix(2, 3));
    w.write(dir, nlohmann::json::object());
    const auto b = TensorBundle::read(dir);
    EXPECT_EQ(kind_of([&] { b.matrix("m", 3, 2); }), ErrorKind::validation);
    fs::remove_all(dir);
}

TEST(Container, MissingDirectoryIsIo) {
    EXPECT_EQ(kind_of([] { TensorBundle::read(scratch("nowhere")); }), ErrorKind::io);
}

TEST(Container, GarbageConfigIsFormat) {
    const auto dir = scratch("garbage");
    TensorWriter w;
    w.add("m", Matrix(1, 1));
    w.write(dir, nlohmann::json::object());
    write_text_file(dir / "config.json", "{ not json");
    EXPECT_EQ(kind_of([&] { TensorBundle::read(dir); }), ErrorKind::format);
    fs::remove_all(dir);
}

TEST(Container, WrongVersionIsFormat) {
    const auto dir = scratch("version");
    TensorWriter w;
    w.add("m", Matrix(1, 1));
    w.write(dir, nlohmann::json::object());
    auto j = read_json_file(dir / "config.json");
    j["format_version"] = 2;
    write_text_file(dir / "config.json", j.dump());
    EXPECT_EQ(kind_of([&] { TensorBundle::read(dir); }), ErrorKind::format);
    fs::remove_all(dir);
}
