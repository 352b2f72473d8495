#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "remedi/lm.hpp"

namespace remedi {

// Binary container: "RMDF" magic, u16 version, length-prefixed canonical
// config JSON, named little-endian float64 parameter blobs, trailing FNV-1a64
// checksum over all preceding bytes.

struct CheckpointFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointIntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Container {
  std::string config_json;
  std::map<std::string, Tensor> params;
};

void save_container(const Container& c, const std::string& path);
Container load_container(const std::string& path);

// Checksum of the serialized container bytes (without writing a file).
uint64_t container_checksum(const Container& c);

void save_checkpoint(const TransformerLM& lm, const std::string& path);
// expected_vocab_hash = 0 skips the vocabulary consistency check.
TransformerLM load_checkpoint(const std::string& path, uint64_t expected_vocab_hash = 0);

}  // namespace remedi
