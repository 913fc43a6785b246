#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <type_traits>

#include "hallucinet/errors.hpp"
#include "hallucinet/tensor.hpp"

namespace hallucinet {

// Binary layout: "MTNS", version, dtype code, rank, rank x u32 LE extents,
// row-major little-endian payload.
inline constexpr std::array<char, 4> kTensorMagic{'M', 'T', 'N', 'S'};
inline constexpr std::uint8_t kTensorFileVersion = 1;

enum class DType : std::uint8_t { f32 = 1, u8 = 2 };

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::f32;
  } else if constexpr (std::is_same_v<T, std::uint8_t>) {
    return DType::u8;
  } else {
    static_assert(!sizeof(T), "tensor files hold float or uint8 data");
  }
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 1; }

namespace detail {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace detail

template <class T>
std::string encode_tensor(const Tensor<T>& t) {
  constexpr DType dt = dtype_of<T>();
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  std::string out(kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(static_cast<char>(kTensorFileVersion));
  out.push_back(static_cast<char>(dt));
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > 0xffffffffu) throw FormatError("tensor extent exceeds 32 bits");
    detail::put_u32(out, static_cast<std::uint32_t>(e));
  }
  const std::size_t header = out.size();
  out.resize(header + t.size() * dtype_size(dt));
  if constexpr (dt == DType::u8) {
    std::memcpy(out.data() + header, t.data(), t.size());
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, t.data() + i, 4);
      for (int b = 0; b < 4; ++b) out[header + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
  return out;
}

/// Reads the dtype recorded in an encoded tensor without decoding it.
inline DType peek_dtype(const std::string& bytes) {
  if (bytes.size() < 7 || std::memcmp(bytes.data(), kTensorMagic.data(), 4) != 0) {
    throw FormatError("not a tensor file (bad magic)");
  }
  return static_cast<DType>(static_cast<unsigned char>(bytes[5]));
}

template <class T>
Tensor<T> decode_tensor(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(p, kTensorMagic.data(), 4) != 0) {
    throw FormatError("not a tensor file (bad magic)");
  }
  if (bytes.size() < 7) throw FormatError("truncated tensor header");
  if (p[4] != kTensorFileVersion) {
    throw FormatError("unsupported tensor file version " + std::to_string(p[4]));
  }
  constexpr DType want = dtype_of<T>();
  if (p[5] != static_cast<std::uint8_t>(DType::f32) && p[5] != static_cast<std::uint8_t>(DType::u8)) {
    throw FormatError("unknown dtype code " + std::to_string(p[5]));
  }
  if (p[5] != static_cast<std::uint8_t>(want)) {
    throw FormatError("tensor file dtype code " + std::to_string(p[5]) + ", expected " +
                      std::to_string(static_cast<int>(want)));
  }
  const std::size_t rank = p[6];
  if (rank == 0) throw FormatError("tensor file with rank 0");
  std::size_t pos = 7;
  if (bytes.size() < pos + 4 * rank) throw FormatError("truncated tensor header");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i, pos += 4) {
    shape[i] = detail::get_u32(p + pos);
    if (shape[i] == 0) throw FormatError("tensor file with a zero extent");
  }
  const std::size_t count = shape_size(shape);
  const std::size_t payload = count * dtype_size(want);
  if (bytes.size() - pos < payload) throw FormatError("truncated tensor payload");
  if (bytes.size() - pos > payload) throw FormatError("trailing bytes after tensor payload");
  Tensor<T> t(std::move(shape));
  if constexpr (want == DType::u8) {
    std::memcpy(t.data(), p + pos, count);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t bits = detail::get_u32(p + pos + 4 * i);
      std::memcpy(t.data() + i, &bits, 4);
    }
  }
  return t;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed for " + path.string());
  return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

template <class T>
void write_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file_bytes(path, encode_tensor(t));
}

template <class T>
Tensor<T> read_tensor_file(const std::filesystem::path& path) {
  try {
    return decode_tensor<T>(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace hallucinet
