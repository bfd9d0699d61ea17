#pragma once

#include <set>
#include <string>
#include <vector>

#include "tws/model.hpp"

namespace tws {

inline constexpr double kMiB = 1024.0 * 1024.0;

// Everything the cost model needs; `split` lists matrices stored as two
// branches of the scheme given in `precision`.
struct CostInput {
  ModelSpec spec;
  PrecisionMap precision;
  std::set<MatrixKey> split;
  int act_bits = 32;  // 32 disables activation quantization
  bool count_scales = true;
};

CostInput cost_input(const Model& m);

struct CostItem {
  std::string name;
  std::size_t params = 0;  // per branch
  int branches = 1;
  int weight_bits = 32;
  int act_bits = 32;
  double bytes = 0.0;
  double flops = 0.0;
};

struct CostReport {
  std::vector<CostItem> items;
  double bytes = 0.0;
  double flops = 0.0;

  double mib() const { return bytes / kMiB; }
  std::string csv() const;
};

int weight_bits(const QuantScheme& s);

// One multiply of a w-bit weight by an a-bit activation costs w*a/64 FLOPs;
// full precision on both sides costs 1.
double multiply_flops(int w_bits, int a_bits);
// M x K times K x N: 2*M*K*N multiplies-and-adds, scaled as above.
double matmul_flops(double m, double k, double n, int w_bits, int a_bits);

// Bytes of one stored matrix: params * bits / 8 plus 4 bytes per scale for
// quantized schemes; both branches of split matrices.
double matrix_bytes(const ModelSpec& spec, const MatrixKey& key, const QuantScheme& scheme, bool split,
                    bool count_scales = true);

double model_size_bytes(const CostInput& in);

// Matmul FLOPs for one sequence of length `seq`: 2*M*K*N at full precision,
// scaled by (w*a)/64 when weights or activations are quantized. A split
// matrix is costed as the width-doubled single matrix it realizes (two
// half-width branches equal one full-width matmul); the pooler, whose width
// is never squeezed, keeps its single-matrix cost. Attention score and
// context products of a layer whose query/key (resp. value) matrices are
// split are likewise counted at doubled head count. Embedding lookups and
// elementwise operations are not counted.
double model_flops(const CostInput& in, int seq = 128);

CostReport cost_report(const CostInput& in, int seq = 128);

}  // namespace tws
