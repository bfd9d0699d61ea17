#pragma once

#include <stdexcept>
#include <vector>

#include "tws/model.hpp"
#include "tws/quantizers.hpp"
#include "tws/tensor.hpp"

namespace tws {

// Raised when a ternary group has no nonzero entries (alpha == 0), which
// leaves the split coefficient a undefined.
class DegenerateTernary : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct SplitResult {
  Tensor w1;
  Tensor w2;
  std::vector<double> a;  // one per ternary group
  std::vector<double> b;
  std::vector<double> alpha1;  // binary scales of the two halves
  std::vector<double> alpha2;
  double latent_error = 0.0;     // max |w1 + w2 - w|
  double quantized_error = 0.0;  // max |bin(w1) + bin(w2) - ter(w)|
};

// Splits latent `w` whose ternarization is `t` into two latents whose binary
// images sum to t.w_hat. Each ternary group (matrix or embedding row) is
// split independently. When `w` lies on the latent grid the halves are
// rounded onto it as well, so w1 + w2 == w holds exactly.
SplitResult tws_split(const Tensor& w, const TernaryResult& t);
SplitResult tws_split(const Tensor& w, Granularity g = Granularity::kPerMatrix);

// Replaces every ternary single matrix by a binary pair; everything else is
// copied. DegenerateTernary messages name the offending matrix.
Model split_model(const Model& ternary);

}  // namespace tws
