#pragma once

#include <cstdint>
#include <string>

#include "more/moe_policy.hpp"

namespace more {

uint64_t config_fingerprint(const ModelConfig& cfg);

// Binary container: a text header listing one (name, dtype, shape) line per
// tensor, then raw float32 little-endian payloads in header order.
void save_checkpoint(const std::string& path, const Trainables& tr, uint64_t fingerprint,
                     const std::string& rng_state);

struct CheckpointHeader {
  uint64_t fingerprint = 0;
  std::string rng_state;
};

// Loads into tr, whose layout must already match the stored shapes.
CheckpointHeader load_checkpoint(const std::string& path, Trainables& tr);

} // namespace more
