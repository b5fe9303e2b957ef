#include "tele/tns.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace tele {

namespace {

constexpr std::string_view kMagic = "TNS1";

template <class U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFFu));
  }
}

template <class U>
U get_le(const unsigned char* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
  return value;
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::Float32:
      return 4;
    case DType::Float64:
      return 8;
  }
  throw TnsError(TnsError::Kind::BadDType, "unknown dtype");
}

std::string encode_tns(const Shape& shape, const Buffer& data, DType dtype) {
  if (shape.size() > kMaxTnsRank) {
    throw TnsError(TnsError::Kind::RankTooLarge,
                   "TNS1 supports rank <= 4, got " + std::to_string(shape.size()));
  }
  for (Index d : shape) {
    if (d < 0 || static_cast<std::uint64_t>(d) > std::numeric_limits<std::uint32_t>::max()) {
      throw TnsError(TnsError::Kind::DimensionOverflow,
                     "dimension " + std::to_string(d) + " does not fit in u32");
    }
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("encode_tns: data length " + std::to_string(data.size()) +
                         " does not match shape " + to_string(shape));
  }
  std::string out;
  out.reserve(6 + 4 * shape.size() + dtype_size(dtype) * static_cast<std::size_t>(data.size()));
  out.append(kMagic);
  out.push_back(static_cast<char>(dtype));
  out.push_back(static_cast<char>(shape.size()));
  for (Index d : shape) put_le(out, static_cast<std::uint32_t>(d));
  for (Index i = 0; i < data.size(); ++i) {
    if (dtype == DType::Float32) {
      put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(data[i])));
    } else {
      put_le(out, std::bit_cast<std::uint64_t>(data[i]));
    }
  }
  return out;
}

StoredTensor decode_tns(std::string_view bytes, std::size_t* consumed) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 6 || bytes.substr(0, 4) != kMagic) {
    throw TnsError(TnsError::Kind::BadMagic, "not a TNS1 tensor (bad magic)");
  }
  StoredTensor t;
  const auto code = static_cast<std::uint8_t>(p[4]);
  if (code != 1 && code != 2) {
    throw TnsError(TnsError::Kind::BadDType, "unknown TNS1 dtype code " + std::to_string(code));
  }
  t.dtype = static_cast<DType>(code);
  const std::size_t ndim = p[5];
  if (ndim > kMaxTnsRank) {
    throw TnsError(TnsError::Kind::RankTooLarge, "TNS1 rank " + std::to_string(ndim) + " > 4");
  }
  const std::size_t header = 6 + 4 * ndim;
  if (bytes.size() < header) {
    throw TnsError(TnsError::Kind::Truncated,
                   "truncated TNS1 header: expected " + std::to_string(header) + " bytes, got " +
                       std::to_string(bytes.size()));
  }
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint32_t d = get_le<std::uint32_t>(p + 6 + 4 * i);
    if (d != 0 && count > (std::uint64_t{1} << 40) / d) {
      throw TnsError(TnsError::Kind::DimensionOverflow, "TNS1 element count overflows");
    }
    count *= d;
    t.shape.push_back(static_cast<Index>(d));
  }
  const std::uint64_t payload = count * dtype_size(t.dtype);
  const std::uint64_t total = header + payload;
  if (bytes.size() < total) {
    throw TnsError(TnsError::Kind::Truncated,
                   "truncated TNS1 payload: expected " + std::to_string(total) + " bytes, got " +
                       std::to_string(bytes.size()));
  }
  if (consumed) {
    *consumed = static_cast<std::size_t>(total);
  } else if (bytes.size() != total) {
    throw TnsError(TnsError::Kind::Truncated,
                   "TNS1 size mismatch: expected " + std::to_string(total) + " bytes, got " +
                       std::to_string(bytes.size()));
  }
  t.data.resize(static_cast<Index>(count));
  const unsigned char* q = p + header;
  for (std::uint64_t i = 0; i < count; ++i) {
    if (t.dtype == DType::Float32) {
      t.data[static_cast<Index>(i)] = std::bit_cast<float>(get_le<std::uint32_t>(q + 4 * i));
    } else {
      t.data[static_cast<Index>(i)] = std::bit_cast<double>(get_le<std::uint64_t>(q + 8 * i));
    }
  }
  return t;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TnsError(TnsError::Kind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TnsError(TnsError::Kind::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TnsError(TnsError::Kind::Io, "short write to " + path.string());
}

void save_tensor(const std::filesystem::path& path, const Shape& shape, const Buffer& data,
                 DType dtype) {
  write_file(path, encode_tns(shape, data, dtype));
}

StoredTensor load_tensor(const std::filesystem::path& path) { return decode_tns(read_file(path)); }

}  // namespace tele
