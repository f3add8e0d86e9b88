#include "dq/container.hpp"

#include "dq/bitpack.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>

namespace dq {

namespace {

constexpr char kMagic[4] = {'D', 'Q', 'Z', '1'};

struct FileCloser {
  void operator()(std::FILE *f) const {
    if (f)
      std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Writer {
  std::FILE *f;
  void raw(const void *p, std::size_t n) {
    if (std::fwrite(p, 1, n, f) != n)
      throw Error(ErrorCode::io, "short container write");
  }
  template <typename T> void put(T v) { raw(&v, sizeof(T)); }
};

struct Reader {
  std::FILE *f;
  std::string path;
  void raw(void *p, std::size_t n) {
    if (std::fread(p, 1, n, f) != n)
      throw Error(ErrorCode::length_mismatch, path + ": truncated container");
  }
  template <typename T> T get() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
};

int index_bits(int n) {
  return std::max(1, static_cast<int>(std::bit_width(unsigned(n - 1))));
}

std::size_t structured_keep(int m, int n, std::size_t glen) {
  return glen == static_cast<std::size_t>(n)
             ? static_cast<std::size_t>(m)
             : (static_cast<std::size_t>(m) * glen + n - 1) / n;
}

void write_pattern(Writer &w, const SparsityPattern &pat,
                   const SparsityConfig &scfg) {
  if (scfg.mode == SparsityMode::structured_mn) {
    BitWriter bw;
    const int ib = index_bits(scfg.n);
    const auto un = static_cast<std::size_t>(scfg.n);
    for (std::size_t g = 0; g < pat.kept.size(); g += un) {
      const std::size_t glen = std::min(un, pat.kept.size() - g);
      for (std::size_t j = 0; j < glen; ++j)
        if (pat.kept[g + j])
          bw.put(static_cast<std::uint32_t>(j), ib);
    }
    auto bytes = bw.finish();
    if (!bytes.empty())
      w.raw(bytes.data(), bytes.size());
  } else {
    BitWriter bw;
    for (auto k : pat.kept)
      bw.put(k ? 1u : 0u, 1);
    auto bytes = bw.finish();
    if (!bytes.empty())
      w.raw(bytes.data(), bytes.size());
  }
}

SparsityPattern read_pattern(Reader &r, std::size_t len,
                             const SparsityConfig &scfg) {
  SparsityPattern pat;
  pat.kept.assign(len, 0);
  if (scfg.mode == SparsityMode::structured_mn) {
    const int ib = index_bits(scfg.n);
    const auto un = static_cast<std::size_t>(scfg.n);
    std::size_t total_bits = 0;
    for (std::size_t g = 0; g < len; g += un)
      total_bits += structured_keep(scfg.m, scfg.n, std::min(un, len - g)) * ib;
    std::vector<std::uint8_t> bytes((total_bits + 7) / 8);
    if (!bytes.empty())
      r.raw(bytes.data(), bytes.size());
    BitReader br(bytes);
    for (std::size_t g = 0; g < len; g += un) {
      const std::size_t glen = std::min(un, len - g);
      const std::size_t keep = structured_keep(scfg.m, scfg.n, glen);
      for (std::size_t j = 0; j < keep; ++j) {
        std::size_t idx = br.get(ib);
        if (idx >= glen)
          throw Error(ErrorCode::malformed_header,
                      r.path + ": kept index out of group range");
        pat.kept[g + idx] = 1;
      }
    }
  } else {
    std::vector<std::uint8_t> bytes((len + 7) / 8);
    if (!bytes.empty())
      r.raw(bytes.data(), bytes.size());
    BitReader br(bytes);
    for (std::size_t i = 0; i < len; ++i)
      pat.kept[i] = static_cast<std::uint8_t>(br.get(1));
  }
  return pat;
}

void write_impl(const QuantizedTensor &qt, const SparsityConfig *scfg,
                const std::vector<SparsityPattern> *patterns,
                const std::string &path) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f)
    throw Error(ErrorCode::io, "cannot open " + path + " for writing");
  Writer w{f.get()};

  w.raw(kMagic, 4);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(qt.shape.size()));
  for (auto d : qt.shape)
    w.put<std::uint64_t>(d);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(qt.axis));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(qt.cfg.bits));
  w.put<std::uint64_t>(qt.cfg.block_size);
  w.put<double>(qt.cfg.lambda);
  w.put<double>(qt.cfg.epsilon);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(qt.cfg.rounding));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(qt.cfg.coeff_precision));
  w.put<std::uint8_t>(scfg ? static_cast<std::uint8_t>(scfg->mode) : 0);
  if (scfg) {
    if (scfg->mode == SparsityMode::structured_mn) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(scfg->m));
      w.put<std::uint32_t>(static_cast<std::uint32_t>(scfg->n));
    } else {
      w.put<double>(scfg->fraction);
    }
  }
  w.put<std::uint64_t>(qt.num_vectors);
  w.put<std::uint64_t>(qt.part.blocks.size());
  for (const Span &s : qt.part.blocks) {
    w.put<std::uint64_t>(s.start);
    w.put<std::uint64_t>(s.len);
  }

  const int width = code_width(qt.cfg.bits);
  for (const QuantizedBlock &blk : qt.blocks) {
    auto packed = pack_codes(blk.q, width);
    if (!packed.empty())
      w.raw(packed.data(), packed.size());
  }
  const bool e5m2 = qt.cfg.coeff_precision == CoeffPrecision::e5m2_simulated;
  for (const QuantizedBlock &blk : qt.blocks) {
    if (e5m2) {
      // centered-form coefficients: a and the block mean, both already on
      // the e5m2 grid (b + a*q_mean recovers the mean to within an ulp,
      // which the encoder then snaps back to the exact grid point)
      w.put<std::uint8_t>(e5m2_encode(blk.a));
      w.put<std::uint8_t>(e5m2_encode(blk.b + blk.a * codes_mean(blk)));
    } else {
      w.put<float>(static_cast<float>(blk.a));
      w.put<float>(static_cast<float>(blk.b));
    }
  }
  if (scfg && patterns)
    for (const SparsityPattern &pat : *patterns)
      write_pattern(w, pat, *scfg);
}

} // namespace

void write_container(const QuantizedTensor &qt, const std::string &path) {
  write_impl(qt, nullptr, nullptr, path);
}

void write_container(const SparseQuantizedTensor &sq, const std::string &path) {
  write_impl(sq.qt, &sq.scfg, &sq.patterns, path);
}

QuantContainer read_container(const std::string &path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f)
    throw Error(ErrorCode::io, "cannot open " + path);
  Reader r{f.get(), path};

  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw Error(ErrorCode::malformed_header, path + ": bad container magic");

  QuantContainer out;
  QuantizedTensor &qt = out.qt;

  auto rank = r.get<std::uint32_t>();
  if (rank > 8)
    throw Error(ErrorCode::malformed_header, path + ": bad rank");
  qt.shape.resize(rank);
  for (auto &d : qt.shape) {
    auto v = r.get<std::uint64_t>();
    if (v == 0)
      throw Error(ErrorCode::malformed_header, path + ": zero dimension");
    d = static_cast<std::size_t>(v);
  }
  qt.axis = r.get<std::uint32_t>();
  qt.cfg.bits = static_cast<int>(r.get<std::uint32_t>());
  qt.cfg.block_size = static_cast<std::size_t>(r.get<std::uint64_t>());
  qt.cfg.lambda = r.get<double>();
  qt.cfg.epsilon = r.get<double>();
  qt.cfg.rounding = static_cast<Rounding>(r.get<std::uint8_t>());
  qt.cfg.coeff_precision = static_cast<CoeffPrecision>(r.get<std::uint8_t>());
  qt.cfg.validate();
  if (qt.axis >= qt.shape.size())
    throw Error(ErrorCode::malformed_header, path + ": axis out of range");

  auto smode = r.get<std::uint8_t>();
  if (smode != 0) {
    SparsityConfig scfg;
    scfg.mode = static_cast<SparsityMode>(smode);
    if (scfg.mode == SparsityMode::structured_mn) {
      scfg.m = static_cast<int>(r.get<std::uint32_t>());
      scfg.n = static_cast<int>(r.get<std::uint32_t>());
    } else {
      scfg.fraction = r.get<double>();
    }
    scfg.validate();
    out.sparsity = scfg;
  }

  qt.num_vectors = static_cast<std::size_t>(r.get<std::uint64_t>());
  auto nblk = static_cast<std::size_t>(r.get<std::uint64_t>());
  qt.part.axis_len = qt.shape[qt.axis];
  qt.part.block_size = qt.cfg.block_size;
  qt.part.blocks.resize(nblk);
  std::size_t covered = 0;
  for (Span &s : qt.part.blocks) {
    s.start = static_cast<std::size_t>(r.get<std::uint64_t>());
    s.len = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (s.start != covered || s.len == 0)
      throw Error(ErrorCode::malformed_header, path + ": bad block table");
    covered += s.len;
  }
  if (covered != qt.part.axis_len)
    throw Error(ErrorCode::malformed_header,
                path + ": block table does not cover the axis");

  const AxisView view = AxisView::of(qt.shape, qt.axis);
  if (qt.num_vectors != view.num_vectors())
    throw Error(ErrorCode::malformed_header, path + ": bad vector count");

  const std::size_t total = qt.num_vectors * nblk;
  const int width = code_width(qt.cfg.bits);
  qt.blocks.resize(total);
  for (std::size_t i = 0; i < total; ++i) {
    const Span &s = qt.part.blocks[i % nblk];
    std::vector<std::uint8_t> bytes((s.len * width + 7) / 8);
    r.raw(bytes.data(), bytes.size());
    qt.blocks[i].q = unpack_codes(bytes, s.len, width);
    qt.blocks[i].n = s.len;
    const int max_code = (1 << qt.cfg.bits) - 1;
    for (auto c : qt.blocks[i].q)
      if (c > max_code)
        throw Error(ErrorCode::malformed_header,
                    path + ": code exceeds 2^bits - 1");
  }
  const bool e5m2 = qt.cfg.coeff_precision == CoeffPrecision::e5m2_simulated;
  for (std::size_t i = 0; i < total; ++i) {
    if (e5m2) {
      qt.blocks[i].a = e5m2_decode(r.get<std::uint8_t>());
      const double mean = e5m2_decode(r.get<std::uint8_t>());
      qt.blocks[i].b = mean - qt.blocks[i].a * codes_mean(qt.blocks[i]);
    } else {
      qt.blocks[i].a = r.get<float>();
      qt.blocks[i].b = r.get<float>();
    }
  }
  if (out.sparsity) {
    out.patterns.reserve(total);
    for (std::size_t i = 0; i < total; ++i)
      out.patterns.push_back(
          read_pattern(r, qt.part.blocks[i % nblk].len, *out.sparsity));
  }
  if (std::fgetc(f.get()) != EOF)
    throw Error(ErrorCode::length_mismatch, path + ": trailing bytes");
  return out;
}

} // namespace dq
