#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace dq {

// LSB-first bit packing. Fields are written low bit first into a little-
// endian byte stream; widths up to 32 bits.

class BitWriter {
public:
  void put(std::uint32_t value, int width) {
    acc_ |= static_cast<std::uint64_t>(value & mask(width)) << fill_;
    fill_ += width;
    while (fill_ >= 8) {
      bytes_.push_back(static_cast<std::uint8_t>(acc_ & 0xff));
      acc_ >>= 8;
      fill_ -= 8;
    }
  }
  std::vector<std::uint8_t> finish() {
    if (fill_ > 0) {
      bytes_.push_back(static_cast<std::uint8_t>(acc_ & 0xff));
      acc_ = 0;
      fill_ = 0;
    }
    return std::move(bytes_);
  }

private:
  static std::uint64_t mask(int width) {
    return width >= 32 ? 0xffffffffull : ((1ull << width) - 1);
  }
  std::vector<std::uint8_t> bytes_;
  std::uint64_t acc_ = 0;
  int fill_ = 0;
};

class BitReader {
public:
  explicit BitReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint32_t get(int width) {
    while (fill_ < width) {
      std::uint64_t next = pos_ < bytes_.size() ? bytes_[pos_++] : 0;
      acc_ |= next << fill_;
      fill_ += 8;
    }
    auto v = static_cast<std::uint32_t>(
        acc_ & (width >= 32 ? 0xffffffffull : ((1ull << width) - 1)));
    acc_ >>= width;
    fill_ -= width;
    return v;
  }
  std::size_t bytes_consumed() const { return pos_; }

private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::uint64_t acc_ = 0;
  int fill_ = 0;
};

/// Storage width for a code of `bits` bits: the smallest of {1, 2, 4, 8}
/// that fits, so codes never straddle byte boundaries.
inline int code_width(int bits) {
  if (bits <= 1)
    return 1;
  if (bits <= 2)
    return 2;
  if (bits <= 4)
    return 4;
  return 8;
}

inline std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes,
                                            int width) {
  BitWriter w;
  for (auto c : codes)
    w.put(c, width);
  return w.finish();
}

inline std::vector<std::uint8_t>
unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count,
             int width) {
  BitReader r(bytes);
  std::vector<std::uint8_t> codes(count);
  for (std::size_t i = 0; i < count; ++i)
    codes[i] = static_cast<std::uint8_t>(r.get(width));
  return codes;
}

} // namespace dq
