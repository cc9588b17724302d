#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "attnet/errors.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

// Binary layout (all integers and floats little-endian):
//
//   "ATTN" | u32 version | u32 block count
//   per block:   u16 name length | name | u8 rank | u32 dims[rank] | f64 values
//   trailer:     u32 moment count
//                per moment: u16 name length | name | u32 count | f64 m[count] | f64 v[count]
//                u64 optimizer step | f64 baseline | u32 epoch
//                u32 rng state length | rng state bytes
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  struct Block {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };
  struct Moments {
    std::string name;
    std::vector<double> first;
    std::vector<double> second;
  };

  std::uint32_t version = kVersion;
  std::vector<Block> blocks;
  std::vector<Moments> moments;
  std::uint64_t optimizer_step = 0;
  double baseline = 0.5;
  std::uint32_t epoch = 0;
  std::string rng_state;

  const Block* find(const std::string& name) const {
    for (const auto& b : blocks) {
      if (b.name == name) return &b;
    }
    return nullptr;
  }

  void add_blocks(const std::vector<NamedTensor>& named) {
    for (const auto& n : named) {
      blocks.push_back({n.name, n.tensor.shape(), {n.tensor.data().begin(), n.tensor.data().end()}});
    }
  }
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void name(const std::string& s) {
    if (s.size() > 0xffff) throw ContractError("checkpoint: name too long: " + s.substr(0, 32));
    uint(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw FormatError(FormatError::Kind::truncated, std::string("checkpoint truncated while reading ") + what);
    }
  }
  template <class U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  std::vector<double> f64s(std::size_t n, const char* what) {
    if (n > (in_.size() - pos_) / 8) need(n * 8, what);
    std::vector<double> v(n);
    for (double& x : v) x = f64(what);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes("ATTN", 4);
  w.uint(ck.version);
  w.uint(static_cast<std::uint32_t>(ck.blocks.size()));
  for (const auto& b : ck.blocks) {
    if (numel(b.shape) != b.values.size()) throw DimensionError("checkpoint block " + b.name + " has inconsistent shape");
    if (b.shape.size() > 0xff) throw ContractError("checkpoint block " + b.name + " has too many dims");
    w.name(b.name);
    w.uint(static_cast<std::uint8_t>(b.shape.size()));
    for (std::size_t d : b.shape) w.uint(static_cast<std::uint32_t>(d));
    for (double v : b.values) w.f64(v);
  }
  w.uint(static_cast<std::uint32_t>(ck.moments.size()));
  for (const auto& m : ck.moments) {
    if (m.first.size() != m.second.size()) throw DimensionError("checkpoint moments " + m.name + " differ in length");
    w.name(m.name);
    w.uint(static_cast<std::uint32_t>(m.first.size()));
    for (double v : m.first) w.f64(v);
    for (double v : m.second) w.f64(v);
  }
  w.uint(ck.optimizer_step);
  w.f64(ck.baseline);
  w.uint(ck.epoch);
  w.uint(static_cast<std::uint32_t>(ck.rng_state.size()));
  w.bytes(ck.rng_state.data(), ck.rng_state.size());
  return w.take();
}

inline Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError(FormatError::Kind::truncated, "checkpoint truncated before magic");
  if (std::memcmp(bytes.data(), "ATTN", 4) != 0) throw FormatError(FormatError::Kind::bad_magic, "not a checkpoint: bad magic");
  detail::ByteReader r(bytes.subspan(4));
  Checkpoint ck;
  ck.version = r.uint<std::uint32_t>("version");
  if (ck.version != Checkpoint::kVersion) {
    throw FormatError(FormatError::Kind::bad_version, "unsupported checkpoint version " + std::to_string(ck.version));
  }
  const auto nblocks = r.uint<std::uint32_t>("block count");
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    Checkpoint::Block b;
    b.name = r.str(r.uint<std::uint16_t>("block name length"), "block name");
    const auto rank = r.uint<std::uint8_t>("block rank");
    for (std::uint8_t d = 0; d < rank; ++d) b.shape.push_back(r.uint<std::uint32_t>("block dims"));
    b.values = r.f64s(numel(b.shape), "block values");
    ck.blocks.push_back(std::move(b));
  }
  const auto nmoments = r.uint<std::uint32_t>("moment count");
  for (std::uint32_t i = 0; i < nmoments; ++i) {
    Checkpoint::Moments m;
    m.name = r.str(r.uint<std::uint16_t>("moment name length"), "moment name");
    const auto n = r.uint<std::uint32_t>("moment length");
    m.first = r.f64s(n, "first moments");
    m.second = r.f64s(n, "second moments");
    ck.moments.push_back(std::move(m));
  }
  ck.optimizer_step = r.uint<std::uint64_t>("optimizer step");
  ck.baseline = r.f64("baseline");
  ck.epoch = r.uint<std::uint32_t>("epoch");
  ck.rng_state = r.str(r.uint<std::uint32_t>("rng state length"), "rng state");
  if (!r.done()) throw FormatError(FormatError::Kind::malformed, "checkpoint has trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file_bytes(path)); }

}  // namespace attnet
