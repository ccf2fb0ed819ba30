#include "grlvr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "grlvr/error.hpp"

namespace grlvr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoder assumes a little-endian host");

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

}  // namespace

std::string encode_config_header(const char (&magic)[8], const ModelConfig& cfg) {
  std::string out(magic, 8);
  put_u64(out, static_cast<std::uint64_t>(cfg.d_model));
  put_u64(out, static_cast<std::uint64_t>(cfg.n_layers));
  put_u64(out, static_cast<std::uint64_t>(cfg.n_heads));
  put_u64(out, static_cast<std::uint64_t>(cfg.d_ff));
  put_u64(out, static_cast<std::uint64_t>(cfg.vocab_size));
  put_u64(out, static_cast<std::uint64_t>(cfg.max_seq_len));
  put_f64(out, cfg.rms_eps);
  put_u64(out, static_cast<std::uint64_t>(cfg.activation));
  return out;
}

void append_weights(std::string& out, const Weights& w) {
  for (const auto& t : w.tensors())
    for (double x : t.tensor->flat()) put_f64(out, x);
}

std::string encode_checkpoint(const PolicyParams& params) {
  std::string out = encode_config_header(kCheckpointMagic, params.config);
  append_weights(out, params.weights);
  return out;
}

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) throw InputError("checkpoint truncated");
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v;
  std::memcpy(&v, bytes_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::expect_magic(const char (&magic)[8]) {
  need(8);
  if (std::memcmp(bytes_.data() + pos_, magic, 8) != 0)
    throw InputError("bad magic: not a " + std::string(magic, 8) + " file");
  pos_ += 8;
}

ModelConfig ByteReader::config() {
  ModelConfig c;
  auto as_int = [this]() {
    const auto v = u64();
    if (v > (1u << 30)) throw InputError("checkpoint config field out of range");
    return static_cast<int>(v);
  };
  c.d_model = as_int();
  c.n_layers = as_int();
  c.n_heads = as_int();
  c.d_ff = as_int();
  c.vocab_size = as_int();
  c.max_seq_len = as_int();
  c.rms_eps = f64();
  const auto act = u64();
  if (act > 1) throw InputError("checkpoint has unknown activation code");
  c.activation = static_cast<Activation>(act);
  c.validate();
  return c;
}

void ByteReader::read_weights(Weights& w) {
  for (auto& t : w.tensors()) {
    need(8 * t.tensor->size());
    for (double& x : t.tensor->flat()) x = f64();
  }
}

PolicyParams decode_checkpoint(const std::string& bytes, const ModelConfig* expected) {
  ByteReader rd(bytes);
  rd.expect_magic(kCheckpointMagic);
  PolicyParams p;
  p.config = rd.config();
  if (expected && !(*expected == p.config))
    throw InputError("checkpoint config does not match the expected model config");
  p.weights = Weights::zeros(p.config);
  rd.read_weights(p.weights);
  if (!rd.at_end()) throw InputError("checkpoint has trailing bytes");
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const auto bytes = encode_checkpoint(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

PolicyParams load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str(), expected);
}

}  // namespace grlvr
