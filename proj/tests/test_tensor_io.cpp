#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "senformer/tensor_io.hpp"
#include "test_support.hpp"

namespace senf {
namespace {

TEST(Container, OneByteTensorIsFifteenBytes) {
  auto bytes = encode_container(host_u8({1}, {7}));
  ASSERT_EQ(bytes.size(), 15u);
  EXPECT_EQ(std::memcmp(bytes.data(), "SENF", 4), 0);
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  EXPECT_EQ(bytes[8], 1);   // dtype u8
  EXPECT_EQ(bytes[9], 1);   // ndim
  EXPECT_EQ(bytes[10], 1);  // extent, little-endian
  EXPECT_EQ(bytes[14], 7);
}

TEST(Container, LittleEndianLayout) {
  auto bytes = encode_container(host_i32({2}, {0x01020304, -1}));
  ASSERT_EQ(bytes.size(), 4u + 4u + 1u + 1u + 4u + 8u);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[14], 0x04);
  EXPECT_EQ(bytes[17], 0x01);
  EXPECT_EQ(bytes[18], 0xff);
}

TEST(Container, F32RoundtripBitExact) {
  std::vector<float> v{0.1f, -0.0f, 1e-38f, 3.4e38f, -2.5f, 7.0f};
  std::uint32_t nan_bits = 0x7fc00123;
  float nan;
  std::memcpy(&nan, &nan_bits, 4);
  v[5] = nan;
  auto dir = test::scratch_dir("container");
  write_container(dir / "t.bin", host_f32({2, 3}, v));
  auto back = read_container(dir / "t.bin");
  EXPECT_EQ(back.shape, (Shape{2, 3}));
  ASSERT_EQ(back.dtype(), DType::kF32);
  EXPECT_EQ(std::memcmp(back.f32().data(), v.data(), v.size() * 4), 0);
}

TEST(Container, AllDtypesRoundtrip) {
  auto a = decode_container(encode_container(host_u8({3, 1}, {0, 128, 255})));
  EXPECT_EQ(a.u8(), (std::vector<std::uint8_t>{0, 128, 255}));
  auto b = decode_container(encode_container(host_i32({2, 2}, {-5, 0, 5, 1 << 30})));
  EXPECT_EQ(b.i32(), (std::vector<std::int32_t>{-5, 0, 5, 1 << 30}));
  EXPECT_EQ(b.shape, (Shape{2, 2}));
  auto c = decode_container(encode_container(host_f32({}, {4.0f})));
  EXPECT_EQ(c.shape, Shape{});
  EXPECT_EQ(c.f32(), std::vector<float>{4.0f});
}

TEST(Container, CorruptedMagicRejectedFirst) {
  auto bytes = encode_container(host_f32({2}, {1, 2}));
  bytes[0] = 'X';
  // extents claiming ~16 GiB must not be allocated before the magic is checked
  bytes[10] = bytes[11] = bytes[12] = 0xff;
  bytes[13] = 0xff;
  try {
    decode_container(bytes);
    FAIL() << "accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
  }
}

TEST(Container, BadVersionAndDtype) {
  auto bytes = encode_container(host_f32({1}, {1}));
  auto v = bytes;
  v[4] = 2;
  try {
    decode_container(v);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  auto d = bytes;
  d[8] = 9;
  try {
    decode_container(d);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
}

TEST(Container, HugeExtentsWithShortPayloadRejected) {
  auto bytes = encode_container(host_f32({2}, {1, 2}));
  bytes[10] = bytes[11] = bytes[12] = bytes[13] = 0xff;
  EXPECT_THROW(decode_container(bytes), FormatError);
}

TEST(Container, TruncationRejectedWithOffset) {
  auto bytes = encode_container(host_f32({4}, {1, 2, 3, 4}));
  for (std::size_t cut : {0u, 3u, 9u, 12u, 20u}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    try {
      decode_container(t, 100);
      FAIL() << "accepted cut " << cut;
    } catch (const FormatError& e) {
      EXPECT_GE(e.offset(), 100u);
      EXPECT_LE(e.offset(), 100u + bytes.size());
    }
  }
}

TEST(Bundle, RoundtripNamesShapesValues) {
  Bundle b;
  b.meta = {{"kind", "test"}, {"iter", 7}};
  b.tensors.push_back({"a.weight", host_f32({2, 3}, {1, 2, 3, 4, 5, 6})});
  b.tensors.push_back({"labels", host_u8({4}, {0, 1, 2, 255})});
  b.tensors.push_back({"steps", host_i32({1}, {42})});
  auto dir = test::scratch_dir("bundle");
  write_bundle(dir / "b.senf", b);
  auto back = read_bundle(dir / "b.senf");
  EXPECT_EQ(back.meta, b.meta);
  ASSERT_EQ(back.tensors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.tensors[i].name, b.tensors[i].name);
    EXPECT_EQ(back.tensors[i].tensor.shape, b.tensors[i].tensor.shape);
    EXPECT_EQ(back.tensors[i].tensor.data, b.tensors[i].tensor.data);
  }
  EXPECT_TRUE(back.contains("labels"));
  EXPECT_FALSE(back.contains("nope"));
  EXPECT_EQ(back.get("steps").i32()[0], 42);
  EXPECT_EQ(encode_bundle(back), encode_bundle(b));
}

TEST(Bundle, CorruptedHeaderAndTruncation) {
  Bundle b;
  b.tensors.push_back({"x", host_f32({8}, std::vector<float>(8, 1.0f))});
  auto bytes = encode_bundle(b);
  auto bad = bytes;
  bad[2] = '?';
  EXPECT_THROW(decode_bundle(bad), FormatError);
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 5);
  EXPECT_THROW(decode_bundle(cut), FormatError);
  auto huge = bytes;
  for (std::size_t i = 12; i < 20; ++i) huge[i] = 0xff;  // manifest length
  EXPECT_THROW(decode_bundle(huge), FormatError);
}

TEST(AtomicWrite, ReplacesAndLeavesNoTemporary) {
  auto dir = test::scratch_dir("atomic");
  std::vector<std::uint8_t> a{1, 2, 3}, b{4, 5};
  write_file_atomic(dir / "f", a);
  write_file_atomic(dir / "f", b);
  EXPECT_EQ(read_file(dir / "f"), b);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
  EXPECT_ANY_THROW(write_file_atomic(dir / "missing" / "f", a));
}

}  // namespace
}  // namespace senf
