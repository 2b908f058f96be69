#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fewshot {

// Minimal incremental SHA-256 (FIPS 180-4). Used for config digests and
// checkpoint fingerprints in eval reports; not performance critical.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  // Finalizes and returns the lowercase hex digest. The object must not be
  // updated afterwards.
  std::string hex_digest();

  static std::string hex(const void* data, size_t len);
  static std::string hex(const std::string& s);
  static std::string hex_of_file(const std::string& path);

 private:
  void process_block(const uint8_t* block);

  uint32_t h_[8];
  uint64_t bit_len_ = 0;
  uint8_t buf_[64];
  size_t buf_len_ = 0;
  bool finalized_ = false;
};

}  // namespace fewshot
