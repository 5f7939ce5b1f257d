#include "senformer/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace senf {

namespace {

constexpr char kContainerMagic[4] = {'S', 'E', 'N', 'F'};
constexpr char kBundleMagic[8] = {'S', 'E', 'N', 'F', 'C', 'K', 'P', 'T'};

std::size_t element_size(DType t) { return t == DType::kU8 ? 1 : 4; }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void need(std::span<const std::uint8_t> bytes, std::size_t pos, std::size_t n, const char* what,
          std::uint64_t base) {
  if (bytes.size() < pos || bytes.size() - pos < n) {
    throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(n) + " bytes, have " +
                          std::to_string(bytes.size() > pos ? bytes.size() - pos : 0),
                      base + pos);
  }
}

}  // namespace

std::size_t HostTensor::numel() const {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

HostTensor host_f32(Shape shape, std::vector<float> values) { return {std::move(shape), std::move(values)}; }
HostTensor host_u8(Shape shape, std::vector<std::uint8_t> values) { return {std::move(shape), std::move(values)}; }
HostTensor host_i32(Shape shape, std::vector<std::int32_t> values) { return {std::move(shape), std::move(values)}; }

std::vector<std::uint8_t> encode_container(const HostTensor& t) {
  if (t.shape.size() > 255) throw std::invalid_argument("container: more than 255 axes");
  if (shape_numel(t.shape) != t.numel()) {
    throw std::invalid_argument("container: shape " + shape_str(t.shape) + " does not match " +
                                std::to_string(t.numel()) + " values");
  }
  std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 4);
  put_u32(out, kContainerVersion);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  out.push_back(static_cast<std::uint8_t>(t.shape.size()));
  for (std::size_t e : t.shape) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw std::invalid_argument("container: extent too large");
    put_u32(out, static_cast<std::uint32_t>(e));
  }
  switch (t.dtype()) {
    case DType::kF32:
      for (float v : t.f32()) put_u32(out, std::bit_cast<std::uint32_t>(v));
      break;
    case DType::kU8:
      out.insert(out.end(), t.u8().begin(), t.u8().end());
      break;
    case DType::kI32:
      for (std::int32_t v : t.i32()) put_u32(out, static_cast<std::uint32_t>(v));
      break;
  }
  return out;
}

HostTensor decode_container(std::span<const std::uint8_t> bytes, std::uint64_t base, std::size_t* consumed) {
  need(bytes, 0, 4, "magic", base);
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0) throw FormatError("bad container magic", base);
  need(bytes, 4, 4, "version", base);
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version), base + 4);
  }
  need(bytes, 8, 2, "header", base);
  const std::uint8_t dtype = bytes[8];
  if (dtype > 2) throw FormatError("unknown dtype code " + std::to_string(dtype), base + 8);
  const std::size_t ndim = bytes[9];
  need(bytes, 10, 4 * ndim, "extents", base);
  Shape shape(ndim);
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    shape[i] = get_u32(bytes.data() + 10 + 4 * i);
    if (shape[i] == 0) throw FormatError("zero extent on axis " + std::to_string(i), base + 10 + 4 * i);
    if (count > std::numeric_limits<std::uint64_t>::max() / shape[i]) {
      throw FormatError("element count overflows", base + 10 + 4 * i);
    }
    count *= shape[i];
  }
  const std::size_t header = 10 + 4 * ndim;
  const auto type = static_cast<DType>(dtype);
  const std::uint64_t payload = count * element_size(type);
  if (payload / element_size(type) != count) throw FormatError("payload size overflows", base + header);
  need(bytes, header, static_cast<std::size_t>(payload), "payload", base);

  const std::uint8_t* p = bytes.data() + header;
  HostTensor t;
  t.shape = std::move(shape);
  switch (type) {
    case DType::kF32: {
      std::vector<float> v(count);
      for (std::size_t i = 0; i < count; ++i) v[i] = std::bit_cast<float>(get_u32(p + 4 * i));
      t.data = std::move(v);
      break;
    }
    case DType::kU8:
      t.data = std::vector<std::uint8_t>(p, p + count);
      break;
    case DType::kI32: {
      std::vector<std::int32_t> v(count);
      for (std::size_t i = 0; i < count; ++i) v[i] = static_cast<std::int32_t>(get_u32(p + 4 * i));
      t.data = std::move(v);
      break;
    }
  }
  if (consumed) *consumed = header + static_cast<std::size_t>(payload);
  return t;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw std::runtime_error("write failed: " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw std::runtime_error("cannot move " + tmp.string() + " to " + path.string());
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_container(const std::filesystem::path& path, const HostTensor& t) {
  write_file_atomic(path, encode_container(t));
}

HostTensor read_container(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t used = 0;
  HostTensor t = decode_container(bytes, 0, &used);
  if (used != bytes.size()) throw FormatError("trailing bytes after container", used);
  return t;
}

const HostTensor& Bundle::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw std::out_of_range("bundle has no tensor '" + name + "'");
}

bool Bundle::contains(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

std::vector<std::uint8_t> encode_bundle(const Bundle& bundle) {
  std::vector<std::uint8_t> blobs;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : bundle.tensors) {
    const auto c = encode_container(t.tensor);
    entries.push_back({{"name", t.name},
                       {"offset", blobs.size()},
                       {"length", c.size()},
                       {"dtype", static_cast<int>(t.tensor.dtype())},
                       {"shape", t.tensor.shape}});
    blobs.insert(blobs.end(), c.begin(), c.end());
  }
  const nlohmann::json manifest = {{"meta", bundle.meta}, {"tensors", entries}};
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(kBundleMagic, kBundleMagic + 8);
  put_u32(out, kBundleVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blobs.begin(), blobs.end());
  return out;
}

Bundle decode_bundle(std::span<const std::uint8_t> bytes) {
  need(bytes, 0, 8, "magic", 0);
  if (std::memcmp(bytes.data(), kBundleMagic, 8) != 0) throw FormatError("bad checkpoint magic", 0);
  need(bytes, 8, 4, "version", 0);
  const std::uint32_t version = get_u32(bytes.data() + 8);
  if (version != kBundleVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 8);
  need(bytes, 12, 8, "manifest length", 0);
  const std::uint64_t mlen = get_u64(bytes.data() + 12);
  if (mlen > bytes.size()) throw FormatError("truncated manifest: need " + std::to_string(mlen) + " bytes", 20);
  need(bytes, 20, static_cast<std::size_t>(mlen), "manifest", 0);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what(), 20);
  }
  const std::uint64_t blob_start = 20 + mlen;
  const auto blobs = bytes.subspan(static_cast<std::size_t>(blob_start));
  Bundle b;
  b.meta = manifest.value("meta", nlohmann::json::object());
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw FormatError("manifest lacks a tensor list", 20);
  }
  for (const auto& e : manifest["tensors"]) {
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto length = e.at("length").get<std::uint64_t>();
    if (offset > blobs.size() || blobs.size() - offset < length) {
      throw FormatError("truncated blob '" + e.at("name").get<std::string>() + "'", blob_start + offset);
    }
    std::size_t used = 0;
    HostTensor t = decode_container(blobs.subspan(static_cast<std::size_t>(offset), static_cast<std::size_t>(length)),
                                    blob_start + offset, &used);
    if (used != length) throw FormatError("blob length mismatch", blob_start + offset);
    b.tensors.push_back({e.at("name").get<std::string>(), std::move(t)});
  }
  return b;
}

void write_bundle(const std::filesystem::path& path, const Bundle& bundle) {
  write_file_atomic(path, encode_bundle(bundle));
}

Bundle read_bundle(const std::filesystem::path& path) { return decode_bundle(read_file(path)); }

}  // namespace senf
