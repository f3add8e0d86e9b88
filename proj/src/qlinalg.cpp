#include "dq/qlinalg.hpp"

#include <cmath>

namespace dq {

namespace {

void require_2d(const Tensor &t, const char *name) {
  if (t.rank() != 2)
    throw Error(ErrorCode::shape_mismatch,
                std::string(name) + " must be a 2-d tensor");
}

// X as a flat (rows x k) view: every leading dimension folds into rows
std::pair<std::size_t, std::size_t> folded_shape(const Tensor &X) {
  if (X.rank() < 1)
    throw Error(ErrorCode::shape_mismatch, "matmul operand must have rank >= 1");
  std::size_t k = X.shape.back();
  return {X.numel() / k, k};
}

std::vector<std::size_t> output_shape(const Tensor &X, std::size_t out_cols) {
  auto shape = X.shape;
  shape.back() = out_cols;
  return shape;
}

} // namespace

QuantizedMatrix quantize_matrix(const Tensor &m, std::size_t axis,
                                const QuantConfig &cfg) {
  require_2d(m, "quantize_matrix operand");
  if (axis > 1)
    throw Error(ErrorCode::invalid_config, "matrix axis must be 0 or 1");
  QuantizedTensor qt = quantize_tensor(m, axis, cfg);
  QuantizedMatrix qm;
  qm.rows = m.shape[0];
  qm.cols = m.shape[1];
  qm.axis = axis;
  qm.part = std::move(qt.part);
  qm.num_vectors = qt.num_vectors;
  qm.blocks = std::move(qt.blocks);
  return qm;
}

Tensor reconstruct_matrix(const QuantizedMatrix &qm) {
  Tensor out({qm.rows, qm.cols});
  const std::size_t nblk = qm.part.blocks.size();
  for (std::size_t v = 0; v < qm.num_vectors; ++v) {
    for (std::size_t t = 0; t < nblk; ++t) {
      const Span &s = qm.part.blocks[t];
      const QuantizedBlock &blk = qm.block(v, t);
      for (std::size_t j = 0; j < s.len; ++j) {
        const double r = blk.a * blk.q[j] + blk.b;
        if (qm.axis == 1)
          out.at(v, s.start + j) = static_cast<float>(r);
        else
          out.at(s.start + j, v) = static_cast<float>(r);
      }
    }
  }
  return out;
}

Tensor matmul_reference(const Tensor &X, const Tensor &W) {
  require_2d(W, "W");
  auto [rows, k] = folded_shape(X);
  if (k != W.shape[0])
    throw Error(ErrorCode::shape_mismatch, "matmul inner dimensions differ");
  const std::size_t cols = W.shape[1];
  Tensor out(output_shape(X, cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = 0;
      for (std::size_t j = 0; j < k; ++j)
        acc += static_cast<double>(X.data[r * k + j]) *
               static_cast<double>(W.data[j * cols + c]);
      out.data[r * cols + c] = static_cast<float>(acc);
    }
  return out;
}

Tensor fake_quant_matmul(const Tensor &X, const Tensor &W,
                         const QuantConfig &cfgX, const QuantConfig &cfgW) {
  require_2d(W, "W");
  auto [rows, k] = folded_shape(X);
  if (k != W.shape[0])
    throw Error(ErrorCode::shape_mismatch, "matmul inner dimensions differ");
  const std::size_t cols = W.shape[1];

  Tensor Xflat({rows, k}, X.data);
  QuantizedMatrix Xq = quantize_matrix(Xflat, 1, cfgX);
  QuantizedMatrix Wq = quantize_matrix(W, 0, cfgW);
  Tensor Xr = reconstruct_matrix(Xq);
  Tensor Wr = reconstruct_matrix(Wq);

  // per-block partial products, accumulated in partition order
  std::vector<double> acc(rows * cols, 0.0);
  for (const Span &s : Xq.part.blocks)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        double partial = 0;
        for (std::size_t j = 0; j < s.len; ++j)
          partial += static_cast<double>(Xr.at(r, s.start + j)) *
                     static_cast<double>(Wr.at(s.start + j, c));
        acc[r * cols + c] += partial;
      }

  Tensor out(output_shape(X, cols));
  for (std::size_t i = 0; i < acc.size(); ++i)
    out.data[i] = static_cast<float>(acc[i]);
  return out;
}

Tensor integer_expand_matmul(const QuantizedMatrix &Xq,
                             const QuantizedMatrix &Wq) {
  if (Xq.axis != 1 || Wq.axis != 0)
    throw Error(ErrorCode::partition_mismatch,
                "expected X blocked along axis 1 and W along axis 0");
  if (Xq.cols != Wq.rows || Xq.part.blocks != Wq.part.blocks)
    throw Error(ErrorCode::partition_mismatch,
                "contraction partitions do not match");

  const std::size_t rows = Xq.rows, cols = Wq.cols;
  const std::size_t nblk = Xq.part.blocks.size();
  std::vector<double> acc(rows * cols, 0.0);

  std::vector<double> w_colsum(cols);
  for (std::size_t t = 0; t < nblk; ++t) {
    const std::size_t len = Xq.part.blocks[t].len;
    for (std::size_t c = 0; c < cols; ++c) {
      const QuantizedBlock &wb = Wq.block(c, t);
      double s = 0;
      for (std::size_t j = 0; j < len; ++j)
        s += wb.q[j];
      w_colsum[c] = s;
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const QuantizedBlock &xb = Xq.block(r, t);
      double x_rowsum = 0;
      for (std::size_t j = 0; j < len; ++j)
        x_rowsum += xb.q[j];
      for (std::size_t c = 0; c < cols; ++c) {
        const QuantizedBlock &wb = Wq.block(c, t);
        double code_dot = 0; // exact: codes are small integers
        for (std::size_t j = 0; j < len; ++j)
          code_dot += static_cast<double>(xb.q[j]) * wb.q[j];
        acc[r * cols + c] += xb.a * wb.a * code_dot +
                             xb.b * w_colsum[c] * wb.a +
                             xb.a * x_rowsum * wb.b +
                             xb.b * wb.b * static_cast<double>(len);
      }
    }
  }

  Tensor out({rows, cols});
  for (std::size_t i = 0; i < acc.size(); ++i)
    out.data[i] = static_cast<float>(acc[i]);
  return out;
}

std::vector<MatmulReport> matmul_sweep(const Tensor &X, const Tensor &W,
                                       std::span<const int> bits_list,
                                       std::span<const std::size_t> block_sizes,
                                       std::span<const double> lambdas) {
  require_2d(W, "W");
  auto [rows, k] = folded_shape(X);
  (void)rows;
  if (k != W.shape[0])
    throw Error(ErrorCode::shape_mismatch, "matmul inner dimensions differ");

  Tensor ref = matmul_reference(X, W);
  double ref_fro = 0;
  for (float v : ref.data)
    ref_fro += static_cast<double>(v) * v;
  ref_fro = std::sqrt(ref_fro);

  std::vector<MatmulReport> reports;
  for (int bits : bits_list)
    for (std::size_t bs : block_sizes)
      for (double lambda : lambdas) {
        QuantConfig cfg;
        cfg.bits = bits;
        cfg.block_size = bs;
        cfg.lambda = lambda;
        Tensor y = fake_quant_matmul(X, W, cfg, cfg);

        MatmulReport rep;
        rep.bits = bits;
        rep.block_size = bs;
        rep.lambda = lambda;
        double err_fro = 0;
        for (std::size_t i = 0; i < y.data.size(); ++i) {
          const double e =
              static_cast<double>(y.data[i]) - static_cast<double>(ref.data[i]);
          err_fro += e * e;
          rep.max_abs_err = std::max(rep.max_abs_err, std::abs(e));
        }
        rep.rel_frobenius_err =
            ref_fro > 0 ? std::sqrt(err_fro) / ref_fro : std::sqrt(err_fro);
        const double blocks_per_vec =
            static_cast<double>((k + bs - 1) / bs);
        rep.effective_bits_x = bits + cfg.coeff_bits() * blocks_per_vec /
                                          static_cast<double>(k);
        rep.effective_bits_w = rep.effective_bits_x; // same contraction axis
        reports.push_back(rep);
      }
  return reports;
}

} // namespace dq
