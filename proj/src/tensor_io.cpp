#include "mexfuse/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "mexfuse/errors.hpp"

namespace mexfuse {

namespace {

constexpr std::array<char, 4> kMagic{'M', 'E', 'X', 'T'};

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& in, const char* field) {
  std::array<char, sizeof(T)> bytes{};
  if (!in.read(bytes.data(), bytes.size())) {
    throw ParseError(std::string("MEXT: truncated stream while reading ") + field);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void write_mext(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint16_t>(out, kMextVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
  if (t.rank() > 255) throw DimensionError("MEXT: rank above 255");
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (const std::size_t e : t.shape()) put_le<std::uint64_t>(out, e);
  for (const double v : t.values()) {
    if (t.dtype() == DType::f32) {
      put_le<float>(out, static_cast<float>(v));
    } else {
      put_le<double>(out, v);
    }
  }
  if (!out) throw IoError("MEXT: write failed");
}

Tensor read_mext(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw ParseError("MEXT: bad magic");
  }
  const auto version = get_le<std::uint16_t>(in, "version");
  if (version != kMextVersion) {
    throw ParseError("MEXT: unsupported version " + std::to_string(version));
  }
  const auto code = get_le<std::uint8_t>(in, "dtype");
  if (code > 1) throw ParseError("MEXT: unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const auto rank = get_le<std::uint8_t>(in, "rank");
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(get_le<std::uint64_t>(in, "extent"));
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) {
    v = dtype == DType::f32 ? static_cast<double>(get_le<float>(in, "value"))
                            : get_le<double>(in, "value");
  }
  return Tensor::from_values(std::move(shape), std::move(values), dtype);
}

void save_mext(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_mext(out, t);
}

Tensor load_mext(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  try {
    return read_mext(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace mexfuse
