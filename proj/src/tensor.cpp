#include "dq/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace dq {

Tensor::Tensor(std::vector<std::size_t> shape_) : shape(std::move(shape_)) {
  for (auto d : shape)
    if (d == 0)
      throw Error(ErrorCode::shape_mismatch, "tensor dimensions must be positive");
  data.assign(numel(), 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
  for (auto d : shape)
    if (d == 0)
      throw Error(ErrorCode::shape_mismatch, "tensor dimensions must be positive");
  if (data.size() != numel())
    throw Error(ErrorCode::length_mismatch,
                "data length does not match product of shape");
}

BlockPartition partition(std::size_t axis_len, std::size_t block_size) {
  BlockPartition p;
  p.axis_len = axis_len;
  p.block_size = block_size;
  p.blocks.reserve((axis_len + block_size - 1) / block_size);
  for (std::size_t start = 0; start < axis_len; start += block_size) {
    std::size_t len = std::min(block_size, axis_len - start);
    p.blocks.push_back({start, len});
  }
  return p;
}

namespace {

struct FileCloser {
  void operator()(std::FILE *f) const {
    if (f)
      std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

constexpr char kTensorMagic[4] = {'D', 'Q', 'T', '1'};

} // namespace

Tensor load_tensor(const std::string &path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f)
    throw Error(ErrorCode::io, "cannot open " + path);

  char magic[4];
  if (std::fread(magic, 1, 4, f.get()) != 4 ||
      std::memcmp(magic, kTensorMagic, 4) != 0)
    throw Error(ErrorCode::malformed_header, path + ": bad tensor magic");

  std::uint32_t rank = 0;
  if (std::fread(&rank, sizeof(rank), 1, f.get()) != 1 || rank > 8)
    throw Error(ErrorCode::malformed_header, path + ": bad tensor rank");

  std::vector<std::size_t> shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint64_t dim = 0;
    if (std::fread(&dim, sizeof(dim), 1, f.get()) != 1)
      throw Error(ErrorCode::malformed_header, path + ": truncated dims");
    if (dim == 0)
      throw Error(ErrorCode::malformed_header, path + ": zero dimension");
    shape[i] = static_cast<std::size_t>(dim);
  }

  std::size_t n = 1;
  for (auto d : shape)
    n *= d;

  std::vector<float> data(n);
  if (n > 0 && std::fread(data.data(), sizeof(float), n, f.get()) != n)
    throw Error(ErrorCode::length_mismatch,
                path + ": payload shorter than declared shape");
  // trailing bytes mean the header lied about the element count
  if (std::fgetc(f.get()) != EOF)
    throw Error(ErrorCode::length_mismatch,
                path + ": payload longer than declared shape");

  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(data[i]))
      throw Error(ErrorCode::non_finite,
                  path + ": non-finite element at index " + std::to_string(i));

  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const Tensor &t, const std::string &path) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f)
    throw Error(ErrorCode::io, "cannot open " + path + " for writing");

  std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
  bool ok = std::fwrite(kTensorMagic, 1, 4, f.get()) == 4 &&
            std::fwrite(&rank, sizeof(rank), 1, f.get()) == 1;
  for (std::size_t i = 0; ok && i < t.rank(); ++i) {
    std::uint64_t dim = t.shape[i];
    ok = std::fwrite(&dim, sizeof(dim), 1, f.get()) == 1;
  }
  if (ok && t.numel() > 0)
    ok = std::fwrite(t.data.data(), sizeof(float), t.numel(), f.get()) ==
         t.numel();
  if (!ok)
    throw Error(ErrorCode::io, "short write to " + path);
}

} // namespace dq
