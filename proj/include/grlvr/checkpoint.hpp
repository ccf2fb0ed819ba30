#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "grlvr/model.hpp"

namespace grlvr {

/// Binary checkpoint layout (all little-endian):
///   8 bytes  magic "GRLVRCP1"
///   u64 x 6  d_model, n_layers, n_heads, d_ff, vocab_size, max_seq_len
///   f64      rms_eps
///   u64      activation (0 = silu, 1 = relu)
///   f64 ...  every tensor of Weights in canonical order, row-major
inline constexpr char kCheckpointMagic[8] = {'G', 'R', 'L', 'V', 'R', 'C', 'P', '1'};

void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params);

/// Throws InputError on bad magic, truncated file, or (when `expected` is given) a config
/// that differs from it.
PolicyParams load_checkpoint(const std::filesystem::path& path,
                             const ModelConfig* expected = nullptr);

/// Serialization to/from an in-memory byte string (same layout as the file).
std::string encode_checkpoint(const PolicyParams& params);
PolicyParams decode_checkpoint(const std::string& bytes, const ModelConfig* expected = nullptr);

/// Shared helpers for the optimizer-state file, which reuses the header and tensor layout.
std::string encode_config_header(const char (&magic)[8], const ModelConfig& cfg);
void append_weights(std::string& out, const Weights& w);

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}
  std::uint64_t u64();
  double f64();
  void expect_magic(const char (&magic)[8]);
  ModelConfig config();
  void read_weights(Weights& w);
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const;
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace grlvr
