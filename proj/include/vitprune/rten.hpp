#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "vitprune/tensor.hpp"

namespace vitprune::rten {

// "RTEN v1": magic `RTEN`, u8 version = 1, u8 dtype (0 = f32), u8 ndim,
// one padding byte, ndim × u32 LE extents, then the LE row-major payload.
inline constexpr char kMagic[4] = {'R', 'T', 'E', 'N'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

std::vector<std::uint8_t> encode(const Tensor& t);
Tensor decode(const std::vector<std::uint8_t>& bytes);

void write(std::ostream& os, const Tensor& t);
Tensor read(std::istream& is);

void save(const std::filesystem::path& path, const Tensor& t);
Tensor load(const std::filesystem::path& path);

}  // namespace vitprune::rten
