#pragma once

// Binary tensor container and the single-file bundle used for checkpoints and
// datasets.
//
// Container: "SENF" | u32 version (1) | u8 dtype (0 f32, 1 u8, 2 i32) |
// u8 ndim | ndim x u32 extents | row-major payload; all little-endian.
//
// Bundle: "SENFCKPT" | u32 version (1) | u64 manifest length | manifest JSON |
// concatenated containers. The manifest lists every entry's name, offset and
// length relative to the start of the blob section, plus free-form metadata.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "senformer/tensor.hpp"

namespace senf {

enum class DType : std::uint8_t { kF32 = 0, kU8 = 1, kI32 = 2 };

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

struct HostTensor {
  Shape shape;
  std::variant<std::vector<float>, std::vector<std::uint8_t>, std::vector<std::int32_t>> data;

  DType dtype() const { return static_cast<DType>(data.index()); }
  std::size_t numel() const;

  const std::vector<float>& f32() const { return std::get<std::vector<float>>(data); }
  const std::vector<std::uint8_t>& u8() const { return std::get<std::vector<std::uint8_t>>(data); }
  const std::vector<std::int32_t>& i32() const { return std::get<std::vector<std::int32_t>>(data); }
};

HostTensor host_f32(Shape shape, std::vector<float> values);
HostTensor host_u8(Shape shape, std::vector<std::uint8_t> values);
HostTensor host_i32(Shape shape, std::vector<std::int32_t> values);

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::uint32_t kBundleVersion = 1;

std::vector<std::uint8_t> encode_container(const HostTensor& t);
// `base` is added to reported byte offsets (position of `bytes` in a file).
// Sets *consumed to the container's length when non-null.
HostTensor decode_container(std::span<const std::uint8_t> bytes, std::uint64_t base = 0,
                            std::size_t* consumed = nullptr);

// Writes go to a temporary sibling which is renamed over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

void write_container(const std::filesystem::path& path, const HostTensor& t);
HostTensor read_container(const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  HostTensor tensor;
};

struct Bundle {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const HostTensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::vector<std::uint8_t> encode_bundle(const Bundle& bundle);
Bundle decode_bundle(std::span<const std::uint8_t> bytes);
void write_bundle(const std::filesystem::path& path, const Bundle& bundle);
Bundle read_bundle(const std::filesystem::path& path);

}  // namespace senf
