#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "tele/tensor.hpp"

namespace tele {

// TNS1 container: "TNS1", u8 dtype (1 = float32, 2 = float64), u8 ndim,
// ndim × u32 dims, then the row-major payload. Everything little-endian.

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

std::size_t dtype_size(DType dtype);

class TnsError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, BadDType, RankTooLarge, DimensionOverflow, Truncated, Io };
  TnsError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct StoredTensor {
  Shape shape;
  DType dtype = DType::Float64;
  Buffer data;
};

inline constexpr std::size_t kMaxTnsRank = 4;

std::string encode_tns(const Shape& shape, const Buffer& data, DType dtype);
/// Parses one TNS1 blob; trailing bytes beyond the payload are rejected
/// unless `consumed` is given, in which case it receives the blob length.
StoredTensor decode_tns(std::string_view bytes, std::size_t* consumed = nullptr);

void save_tensor(const std::filesystem::path& path, const Shape& shape, const Buffer& data,
                 DType dtype = DType::Float64);
StoredTensor load_tensor(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace tele
