#pragma once

#include <stdexcept>
#include <string>

#include "tws/model.hpp"

namespace tws {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  Model model;
  std::string stage;
};

// Container layout:
//   8 bytes   magic "TWSCKPT1"
//   8 bytes   header length, little-endian u64
//   header    UTF-8 JSON: spec, activation quantizer, per-matrix branch
//             schemes, stage tag, and a directory of blocks with offsets
//             relative to the start of the data section
//   data      little-endian float32 parameter blocks; quantized binary and
//             ternary branches add packed sign bits (1 = non-negative),
//             ternary branches a packed nonzero mask, and float32 scales
// Values are rounded to float32, so a round trip is exact only to float32
// precision. Latent matrices are snapped back onto the latent grid on load.
void save_checkpoint(const std::string& path, const Model& m, const std::string& stage);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tws
