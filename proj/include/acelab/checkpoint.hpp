#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "acelab/matrix.hpp"
#include "acelab/optim.hpp"
#include "acelab/rng.hpp"
#include "acelab/transformer.hpp"

namespace acelab {

// Training snapshot: model, optimizer, epoch, RNG. Serializes to a versioned
// binary container that round-trips bit-exactly; a trailing FNV-1a hash of
// the preceding bytes guards against truncation and tampering.
struct Checkpoint {
  TransformerParams params;
  AdamWState opt;
  long epoch = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
};

namespace detail {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n,
                           std::uint64_t h = kFnvOffset) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

class ByteWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void i32(std::int32_t v) { raw(&v, 4); }
  void i64(std::int64_t v) { raw(&v, 8); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void matrix(const Matrix& m) {
    i32(m.rows);
    i32(m.cols);
    raw(m.data.data(), m.data.size() * sizeof(double));
  }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> b) : buf_(std::move(b)) {}
  std::uint32_t u32() { return take<std::uint32_t>(); }
  std::int32_t i32() { return take<std::int32_t>(); }
  std::int64_t i64() { return take<std::int64_t>(); }
  std::uint64_t u64() { return take<std::uint64_t>(); }
  double f64() { return take<double>(); }
  std::string str() {
    std::uint32_t n = u32();
    check(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  Matrix matrix() {
    const int rows = i32();
    const int cols = i32();
    Matrix m(rows, cols);
    check(m.size() * sizeof(double));
    std::memcpy(m.data.data(), buf_.data() + pos_, m.size() * sizeof(double));
    pos_ += m.size() * sizeof(double);
    return m;
  }
  std::size_t pos() const { return pos_; }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  template <typename T>
  T take() {
    check(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void check(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.u32(0x4C454341);  // "ACEL"
  w.u32(1);           // format version
  const TransformerConfig& c = ck.params.cfg;
  for (int v : {c.n_layers, c.d_model, c.d_ff, c.n_heads, c.vocab_size, c.max_seq_len})
    w.i32(v);
  auto names = TransformerParams::tensor_names(c);
  w.u32(static_cast<std::uint32_t>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    w.str(names[i]);
    w.matrix(ck.params.tensors[i]);
  }
  w.f64(ck.opt.lr);
  w.f64(ck.opt.weight_decay);
  w.f64(ck.opt.beta1);
  w.f64(ck.opt.beta2);
  w.f64(ck.opt.eps);
  w.i64(ck.opt.step);
  for (const Matrix& m : ck.opt.m) w.matrix(m);
  for (const Matrix& m : ck.opt.v) w.matrix(m);
  w.i64(ck.epoch);
  w.u64(ck.rng_seed);
  w.u64(ck.rng_counter);
  std::vector<std::uint8_t> out = w.bytes();
  std::uint64_t h = detail::fnv1a(out.data(), out.size());
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(h >> (8 * i)));
  return out;
}

inline Checkpoint deserialize_checkpoint(std::vector<std::uint8_t> bytes) {
  if (bytes.size() < 8) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
  bytes.resize(bytes.size() - 8);
  if (detail::fnv1a(bytes.data(), bytes.size()) != stored)
    throw std::runtime_error("checkpoint: content hash mismatch");
  detail::ByteReader r(std::move(bytes));
  if (r.u32() != 0x4C454341) throw std::runtime_error("checkpoint: bad magic");
  if (r.u32() != 1) throw std::runtime_error("checkpoint: unsupported format version");
  Checkpoint ck;
  TransformerConfig& c = ck.params.cfg;
  c.n_layers = r.i32();
  c.d_model = r.i32();
  c.d_ff = r.i32();
  c.n_heads = r.i32();
  c.vocab_size = r.i32();
  c.max_seq_len = r.i32();
  c.validate();
  auto names = TransformerParams::tensor_names(c);
  if (r.u32() != names.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  ck.params.tensors.reserve(names.size());
  for (const std::string& expect : names) {
    if (r.str() != expect) throw std::runtime_error("checkpoint: tensor name mismatch");
    ck.params.tensors.push_back(r.matrix());
  }
  ck.opt.lr = r.f64();
  ck.opt.weight_decay = r.f64();
  ck.opt.beta1 = r.f64();
  ck.opt.beta2 = r.f64();
  ck.opt.eps = r.f64();
  ck.opt.step = r.i64();
  for (std::size_t i = 0; i < names.size(); ++i) ck.opt.m.push_back(r.matrix());
  for (std::size_t i = 0; i < names.size(); ++i) ck.opt.v.push_back(r.matrix());
  ck.epoch = r.i64();
  ck.rng_seed = r.u64();
  ck.rng_counter = r.u64();
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  auto bytes = serialize_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(std::move(bytes));
}

inline std::uint64_t checkpoint_content_hash(const Checkpoint& ck) {
  auto bytes = serialize_checkpoint(ck);
  return detail::fnv1a(bytes.data(), bytes.size());
}

}  // namespace acelab
