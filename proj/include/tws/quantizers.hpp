#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "tws/autograd.hpp"
#include "tws/tensor.hpp"

namespace tws {

// kBinaryTwnScale binarizes with the ternary scale of the same weights; it
// backs the smooth ternary-to-binary baseline.
enum class QuantKind { kFull, kTernary, kBinary, kUniform, kBinaryTwnScale };
enum class Granularity { kPerMatrix, kPerRow };

std::string to_string(QuantKind kind);
std::string to_string(Granularity g);
QuantKind quant_kind_from_string(const std::string& s);
Granularity granularity_from_string(const std::string& s);

// How one weight matrix is quantized. Full precision is a scheme too, so
// that a precision map can cover every splittable matrix.
struct QuantScheme {
  QuantKind kind = QuantKind::kFull;
  Granularity granularity = Granularity::kPerMatrix;
  int bits = 32;

  static QuantScheme full() { return {QuantKind::kFull, Granularity::kPerMatrix, 32}; }
  static QuantScheme ternary(Granularity g = Granularity::kPerMatrix) {
    return {QuantKind::kTernary, g, 2};
  }
  static QuantScheme binary(Granularity g = Granularity::kPerMatrix) {
    return {QuantKind::kBinary, g, 1};
  }
  static QuantScheme uniform(int bits) {
    return {QuantKind::kUniform, Granularity::kPerMatrix, bits};
  }
  // Weight bit-width scheme used by bit-width sweeps: 32 -> full, 2 -> TWN,
  // 1 -> BWN, otherwise symmetric uniform.
  static QuantScheme for_bits(int bits, Granularity g = Granularity::kPerMatrix);

  bool quantized() const { return kind != QuantKind::kFull; }
  bool is_binary() const { return kind == QuantKind::kBinary || kind == QuantKind::kBinaryTwnScale; }
  void validate() const;
  bool operator==(const QuantScheme&) const = default;
};

// Index partition of a ternarized tensor. Elements zeroed by the threshold
// with w > 0 go to `zeroed_pos`; the remaining zeroed elements (w <= 0) go to
// `zeroed_neg`, matching the "otherwise" branch of the split rules.
struct TernaryResult {
  Tensor w_hat;
  std::vector<double> alpha;  // one per group
  std::vector<double> delta;  // one per group
  std::size_t group_size = 0;  // elements per group (contiguous)
  std::vector<std::size_t> nonzero;     // I
  std::vector<std::size_t> zeroed_pos;  // J
  std::vector<std::size_t> zeroed_neg;  // K

  std::size_t groups() const { return alpha.size(); }
};

struct BinaryResult {
  Tensor w_hat;
  std::vector<double> alpha;  // one per group
  std::size_t group_size = 0;
};

// Contiguous groups for a granularity: the whole tensor, or each row.
std::size_t group_size_for(const Tensor& w, Granularity g);

TernaryResult ternarize(const Tensor& w, Granularity g = Granularity::kPerMatrix);
BinaryResult binarize(const Tensor& w, Granularity g = Granularity::kPerMatrix);

// Binarization whose scale is the ternary scale of the same weights (mean |w|
// over the above-threshold support) instead of mean |w| over all entries.
BinaryResult binarize_with_ternary_scale(const Tensor& w,
                                         Granularity g = Granularity::kPerMatrix);

// Symmetric absmax grid with 2^k - 1 levels; nearest rounding, ties to even.
Tensor quantize_uniform_weight(const Tensor& w, int bits);

// Per-tensor absmax grid with 2^bits codes and an exact zero level. Signed
// inputs use codes -2^(bits-1) .. 2^(bits-1)-1; unsigned inputs (softmax
// probabilities) use 0 .. 2^bits-1 over [0, absmax]. Worst-case error is
// absmax / (2^bits - 1) in both cases.
Tensor quantize_activation_minmax(const Tensor& x, int bits = 8, bool is_signed = true);

// Quantized image of `w` under `scheme` (identity for full precision).
Tensor quantize_weight(const Tensor& w, const QuantScheme& scheme);

// Latent weight matrices are kept on a dyadic fixed-point grid (multiples of
// 2^-44, magnitude below 2^8). Sums and differences of grid values with
// magnitude below 2^9 are exact in binary64, which makes ternary weight
// splitting satisfy w1 + w2 == w bit-for-bit.
inline constexpr double kLatentQuantum = 0x1p-44;
inline constexpr double kLatentBound = 0x1p8;
double snap_latent(double v);
void snap_latent(Tensor& w);
bool on_latent_grid(const Tensor& w);

// Learned step-size state for one activation site.
struct LsqState {
  double step = 1.0;
  int bits = 8;
  bool is_signed = true;

  int qn() const { return is_signed ? -(1 << (bits - 1)) : 0; }
  int qp() const { return is_signed ? (1 << (bits - 1)) - 1 : (1 << bits) - 1; }
  // 2 * mean|x| / sqrt(qp).
  static double initial_step(const Tensor& x, int bits, bool is_signed);
};

class QuantStateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct LsqResult {
  Tensor x_hat;
  Tensor grad_x_mask;   // 1 inside the clip range, 0 outside
  Tensor dstep;         // per-element d x_hat / d s (unscaled)
  double grad_scale = 0.0;  // 1 / sqrt(N * qp)
};

// Forward of the learned step-size quantizer plus its backward factors.
LsqResult lsq_quantize(const Tensor& x, const LsqState& state);

namespace ops {
// Recorded LSQ quantizer; `step` is a shape-{1} node holding s. Gradient to x
// is the clip mask; gradient to s is grad_scale * sum(g * dstep).
Var lsq(Var x, Var step, int bits, bool is_signed);
}  // namespace ops

}  // namespace tws
