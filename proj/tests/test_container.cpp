#include "dq/container.hpp"

#include "dq/bitpack.hpp"
#include "dq/rng.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace dq;

namespace {

std::string temp_path(const char *name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

Tensor random_tensor(Rng &rng, std::vector<std::size_t> shape) {
  Tensor t(std::move(shape));
  for (auto &v : t.data)
    v = static_cast<float>(rng.gaussian());
  return t;
}

} // namespace

TEST_CASE("bitpack: round trip at every code width") {
  Rng rng(51);
  for (int width : {1, 2, 4, 8}) {
    for (int it = 0; it < 50; ++it) {
      const std::size_t n = 1 + rng.below(300);
      std::vector<std::uint8_t> codes(n);
      for (auto &c : codes)
        c = static_cast<std::uint8_t>(rng.below(1u << width));
      auto packed = pack_codes(codes, width);
      CHECK(packed.size() == (n * width + 7) / 8);
      CHECK(unpack_codes(packed, n, width) == codes);
    }
  }
}

TEST_CASE("bitpack: lsb-first layout is frozen") {
  std::vector<std::uint8_t> codes = {1, 0, 1, 1, 0, 0, 0, 1};
  auto packed = pack_codes(codes, 1);
  REQUIRE(packed.size() == 1);
  CHECK(packed[0] == 0b10001101);
  auto p2 = pack_codes(std::vector<std::uint8_t>{3, 1}, 2);
  CHECK(p2[0] == 0b0111);
}

TEST_CASE("code width selection") {
  CHECK(code_width(1) == 1);
  CHECK(code_width(2) == 2);
  CHECK(code_width(3) == 4);
  CHECK(code_width(4) == 4);
  CHECK(code_width(5) == 8);
  CHECK(code_width(8) == 8);
}

TEST_CASE("container: plain quantized tensor round trip") {
  Rng rng(52);
  const std::string path = temp_path("dq_cont_plain.dqz");
  Tensor t = random_tensor(rng, {6, 130});
  for (int bits : {1, 3, 8}) {
    QuantConfig cfg;
    cfg.bits = bits;
    cfg.block_size = 32;
    QuantizedTensor qt = quantize_tensor(t, 1, cfg);
    write_container(qt, path);
    QuantContainer rt = read_container(path);

    CHECK(rt.qt.shape == qt.shape);
    CHECK(rt.qt.axis == qt.axis);
    CHECK(rt.qt.cfg.bits == bits);
    CHECK(rt.qt.cfg.block_size == 32);
    CHECK(rt.qt.part.blocks == qt.part.blocks);
    CHECK_FALSE(rt.sparsity.has_value());
    REQUIRE(rt.qt.blocks.size() == qt.blocks.size());
    for (std::size_t i = 0; i < qt.blocks.size(); ++i) {
      CHECK(rt.qt.blocks[i].q == qt.blocks[i].q);
      // coefficients are stored as binary32
      CHECK(rt.qt.blocks[i].a == static_cast<float>(qt.blocks[i].a));
      CHECK(rt.qt.blocks[i].b == static_cast<float>(qt.blocks[i].b));
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("container: e5m2 coefficients survive exactly") {
  Rng rng(53);
  const std::string path = temp_path("dq_cont_e5m2.dqz");
  Tensor t = random_tensor(rng, {4, 64});
  QuantConfig cfg;
  cfg.bits = 4;
  cfg.block_size = 32;
  cfg.coeff_precision = CoeffPrecision::e5m2_simulated;
  QuantizedTensor qt = quantize_tensor(t, 1, cfg);
  write_container(qt, path);
  QuantContainer rt = read_container(path);
  for (std::size_t i = 0; i < qt.blocks.size(); ++i) {
    // a and the block mean sit on the e5m2 grid; b is re-derived from
    // them with the same arithmetic, so the round trip loses nothing
    CHECK(rt.qt.blocks[i].a == qt.blocks[i].a);
    CHECK(rt.qt.blocks[i].b == qt.blocks[i].b);
  }
  std::remove(path.c_str());
}

TEST_CASE("container: dequantize after reload matches") {
  Rng rng(54);
  const std::string path = temp_path("dq_cont_deq.dqz");
  Tensor t = random_tensor(rng, {3, 100});
  QuantConfig cfg;
  cfg.bits = 4;
  cfg.block_size = 32;
  QuantizedTensor qt = quantize_tensor(t, 1, cfg);
  Tensor before = dequantize_tensor(qt);
  write_container(qt, path);
  Tensor after = dequantize_tensor(read_container(path).qt);
  for (std::size_t i = 0; i < before.numel(); ++i)
    CHECK(after.data[i] == doctest::Approx(before.data[i]).epsilon(1e-6));
  std::remove(path.c_str());
}

TEST_CASE("container: unstructured sparsity bitmask round trip") {
  Rng rng(55);
  const std::string path = temp_path("dq_cont_mask.dqz");
  Tensor t = random_tensor(rng, {4, 70});
  SparsityConfig scfg;
  scfg.mode = SparsityMode::toward_mean;
  scfg.fraction = 0.5;
  QuantConfig qcfg;
  qcfg.bits = 3;
  qcfg.block_size = 32;
  SparseQuantizedTensor sq = sparsify_quantize_tensor(t, 1, scfg, qcfg);
  write_container(sq, path);
  QuantContainer rt = read_container(path);
  REQUIRE(rt.sparsity.has_value());
  CHECK(rt.sparsity->mode == SparsityMode::toward_mean);
  CHECK(rt.sparsity->fraction == 0.5);
  REQUIRE(rt.patterns.size() == sq.patterns.size());
  for (std::size_t i = 0; i < sq.patterns.size(); ++i)
    CHECK(rt.patterns[i].kept == sq.patterns[i].kept);
  std::remove(path.c_str());
}

TEST_CASE("container: structured kept-index round trip, ragged blocks") {
  Rng rng(56);
  const std::string path = temp_path("dq_cont_mn.dqz");
  Tensor t = random_tensor(rng, {3, 41}); // ragged block and ragged group
  SparsityConfig scfg;
  scfg.mode = SparsityMode::structured_mn;
  scfg.m = 2;
  scfg.n = 4;
  QuantConfig qcfg;
  qcfg.bits = 1;
  qcfg.block_size = 16;
  SparseQuantizedTensor sq = sparsify_quantize_tensor(t, 1, scfg, qcfg);
  write_container(sq, path);
  QuantContainer rt = read_container(path);
  REQUIRE(rt.sparsity.has_value());
  CHECK(rt.sparsity->m == 2);
  CHECK(rt.sparsity->n == 4);
  REQUIRE(rt.patterns.size() == sq.patterns.size());
  for (std::size_t i = 0; i < sq.patterns.size(); ++i)
    CHECK(rt.patterns[i].kept == sq.patterns[i].kept);
  std::remove(path.c_str());
}

TEST_CASE("container: corruption is rejected") {
  Rng rng(57);
  const std::string path = temp_path("dq_cont_bad.dqz");

  SUBCASE("bad magic") {
    std::ofstream out(path, std::ios::binary);
    out << "WHAT";
    out.close();
    try {
      read_container(path);
      FAIL("expected error");
    } catch (const Error &e) {
      CHECK(e.code() == ErrorCode::malformed_header);
    }
  }

  SUBCASE("truncated body") {
    Tensor t = random_tensor(rng, {2, 64});
    QuantConfig cfg;
    cfg.bits = 8;
    QuantizedTensor qt = quantize_tensor(t, 1, cfg);
    write_container(qt, path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 6);
    try {
      read_container(path);
      FAIL("expected error");
    } catch (const Error &e) {
      CHECK(e.code() == ErrorCode::length_mismatch);
    }
  }

  std::remove(path.c_str());
}
