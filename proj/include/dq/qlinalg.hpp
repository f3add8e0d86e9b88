#pragma once

#include "dq/quantizer.hpp"
#include "dq/tensor.hpp"

#include <span>
#include <vector>

namespace dq {

/// A 2-d operand quantized along its contraction axis: axis 1 blocks the
/// rows of an activation matrix X (n x i), axis 0 blocks the columns of a
/// weight matrix W (i x o). blocks are vector-major: block j of vector v
/// at index v * part.blocks.size() + j, where vectors are rows (axis 1)
/// or columns (axis 0).
struct QuantizedMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t axis = 0;
  BlockPartition part;
  std::size_t num_vectors = 0;
  std::vector<QuantizedBlock> blocks;

  const QuantizedBlock &block(std::size_t vec, std::size_t blk) const {
    return blocks[vec * part.blocks.size() + blk];
  }
  QuantizedBlock &block(std::size_t vec, std::size_t blk) {
    return blocks[vec * part.blocks.size() + blk];
  }
};

/// Quantize a 2-d tensor along `axis` (0 = block columns down the rows
/// dimension, 1 = block rows along the columns dimension).
QuantizedMatrix quantize_matrix(const Tensor &m, std::size_t axis,
                                const QuantConfig &cfg);

/// Elementwise reconstruction a*q + b of every block, reassembled.
Tensor reconstruct_matrix(const QuantizedMatrix &qm);

/// Plain float matmul in double accumulation; the error reference.
/// X may carry leading batch dimensions; its last axis contracts with
/// W's first.
Tensor matmul_reference(const Tensor &X, const Tensor &W);

/// Reconstruct-then-multiply composition per contraction block, summed
/// over blocks in partition order.
Tensor fake_quant_matmul(const Tensor &X, const Tensor &W,
                         const QuantConfig &cfgX, const QuantConfig &cfgW);

/// The exact expansion of the quantized product into four terms per
/// block span s:
///   (aX aW) o (QX QW) + bX (1 QW o aW) + (aX o QX 1) bW + bX |s| bW
/// Algebraically identical to fake_quant_matmul on the same codes; the
/// heavy inner product involves integer codes only.
Tensor integer_expand_matmul(const QuantizedMatrix &Xq,
                             const QuantizedMatrix &Wq);

struct MatmulReport {
  int bits = 0;
  std::size_t block_size = 0;
  double lambda = 0;
  double max_abs_err = 0;
  double rel_frobenius_err = 0;
  double effective_bits_x = 0;
  double effective_bits_w = 0;
};

/// One report per (bits, block_size, lambda) grid point: fake-quant
/// product vs the float reference on the same operands.
std::vector<MatmulReport> matmul_sweep(const Tensor &X, const Tensor &W,
                                       std::span<const int> bits_list,
                                       std::span<const std::size_t> block_sizes,
                                       std::span<const double> lambdas);

} // namespace dq
