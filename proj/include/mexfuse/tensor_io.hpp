#pragma once

#include <filesystem>
#include <iosfwd>

#include "mexfuse/tensor.hpp"

namespace mexfuse {

/// MEXT binary tensor format, all fields little-endian:
///   "MEXT" | version u16 | dtype u8 (0=f64, 1=f32) | rank u8 | extents u64[rank] | values
inline constexpr std::uint16_t kMextVersion = 1;

void write_mext(std::ostream& out, const Tensor& t);
[[nodiscard]] Tensor read_mext(std::istream& in);

void save_mext(const std::filesystem::path& path, const Tensor& t);
[[nodiscard]] Tensor load_mext(const std::filesystem::path& path);

}  // namespace mexfuse
