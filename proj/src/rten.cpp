#include "vitprune/rten.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "vitprune/errors.hpp"

namespace vitprune::rten {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode(const Tensor& t) {
  if (t.ndim() > 255) throw FormatError("rten: too many dimensions");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(kDtypeF32);
  out.push_back(static_cast<std::uint8_t>(t.ndim()));
  out.push_back(0);
  for (auto extent : t.shape()) {
    if (extent > 0xFFFFFFFFu) throw FormatError("rten: extent exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(extent));
  }
  out.reserve(out.size() + 4 * t.numel());
  for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("rten: bad magic");
  if (bytes[4] != kVersion) throw FormatError("rten: unsupported version " + std::to_string(bytes[4]));
  if (bytes[5] != kDtypeF32) throw FormatError("rten: unsupported dtype " + std::to_string(bytes[5]));
  const std::size_t ndim = bytes[6];
  std::size_t pos = 8;
  if (bytes.size() < pos + 4 * ndim) throw FormatError("rten: truncated header");
  Shape shape(ndim);
  for (std::size_t i = 0; i < ndim; ++i, pos += 4) shape[i] = get_u32(bytes.data() + pos);
  const std::size_t count = shape_numel(shape);
  if (bytes.size() != pos + 4 * count) throw FormatError("rten: payload size mismatch");
  std::vector<float> values(count);
  for (std::size_t i = 0; i < count; ++i, pos += 4) values[i] = std::bit_cast<float>(get_u32(bytes.data() + pos));
  return Tensor(std::move(shape), std::move(values));
}

void write(std::ostream& os, const Tensor& t) {
  const auto bytes = encode(t);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor read(std::istream& is) {
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

void save(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("rten: cannot open " + path.string() + " for writing");
  write(os, t);
}

Tensor load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("rten: cannot open " + path.string());
  return read(is);
}

}  // namespace vitprune::rten
