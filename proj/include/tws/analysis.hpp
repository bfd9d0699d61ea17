#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tws/model.hpp"

namespace tws {

struct PowerOptions {
  std::size_t max_iterations = 100;
  double rel_tol = 1e-4;      // stop when the Rayleigh quotient changes less than this
  double eps_scale = 1e-3;    // HVP step = eps_scale * |w| / |v|
  std::uint64_t seed = 0;     // start vector
};

struct PowerResult {
  double lambda = 0.0;  // |dominant eigenvalue|
  double signed_lambda = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

using GradFn = std::function<std::vector<double>(const std::vector<double>& w)>;

// Power iteration on central-difference Hessian-vector products of `grad`
// at `w`. When |w| == 0 the HVP step falls back to eps_scale.
PowerResult power_method(const GradFn& grad, const std::vector<double>& w, const PowerOptions& opt = {});

// Loss-and-gradient view of one parameter group of a model. The group's
// matrices become single full-precision matrices holding their current
// effective (quantized) weights, and activation quantizers are disabled, so
// the loss is smooth in the group's weights.
class GroupObjective {
 public:
  GroupObjective(const Model& m, std::vector<MatrixKey> group, Batch batch);
  const std::vector<double>& point() const { return w0_; }
  double loss(const std::vector<double>& w);
  std::vector<double> grad(const std::vector<double>& w);

 private:
  void load(const std::vector<double>& w);
  Model model_;
  std::vector<MatrixKey> group_;
  Batch batch_;
  std::vector<double> w0_;
};

PowerResult top_eigenvalue(const Model& m, const std::vector<MatrixKey>& group, const Batch& batch,
                           const PowerOptions& opt = {});

struct LandscapeGrid {
  std::string tag_a;
  std::string tag_b;
  std::vector<double> fractions;  // axis values as fractions of mean |w|
  double mean_abs_a = 0.0;
  double mean_abs_b = 0.0;
  std::vector<std::vector<double>> loss;  // loss[i][j]: fractions[i] on a, fractions[j] on b

  std::string csv() const;
};

// Adds x * 1 and y * 1 to the latent weights of groups a and b (every branch
// of split matrices) for x, y in {0, +-0.2, ..., +-1.0} * mean |w| (k = 5)
// and evaluates the eval-mode cross-entropy on `batch`. Quantizers apply as
// the model dictates.
LandscapeGrid landscape_grid(const Model& m, const std::vector<MatrixKey>& group_a,
                             const std::vector<MatrixKey>& group_b, const Batch& batch, int k = 5);

// The same grid over an arbitrary loss of the two absolute shifts.
LandscapeGrid landscape_grid(const std::function<double(double, double)>& loss_at, double mean_abs_a,
                             double mean_abs_b, int k = 5);

// Eval-mode cross-entropy of `m` on `batch`.
double batch_loss(const Model& m, const Batch& batch);

struct SteepnessEntry {
  std::string model;  // "fp", "ternary", "binary"
  Part part = Part::kQueryKey;
  int layer = 0;
  std::size_t batch = 0;
  double lambda = 0.0;
  bool converged = false;
  // Quantization-noise check for quantized models: loss(w_hat) - loss(w)
  // against lambda * |w - w_hat|^2, with the latent gradient norm attached.
  double loss_increase = 0.0;
  double noise_sq = 0.0;
  double grad_norm = 0.0;
  bool bound_holds = true;
};

struct SteepnessSummary {
  Part part = Part::kQueryKey;
  double fp_mean = 0.0, fp_std = 0.0;
  double ternary_mean = 0.0, ternary_std = 0.0;
  double binary_mean = 0.0, binary_std = 0.0;
  double ternary_ratio_mean = 0.0, ternary_ratio_std = 0.0;  // ternary / fp per (layer, batch)
  double binary_ratio_mean = 0.0, binary_ratio_std = 0.0;
};

struct SteepnessReport {
  std::vector<SteepnessEntry> entries;
  std::vector<SteepnessSummary> parts;
  double bound_fraction = 0.0;  // share of quantized entries satisfying the bound

  std::string csv() const;
};

SteepnessReport steepness_report(const Model& fp, const Model& ternary, const Model& binary,
                                 const std::vector<Batch>& batches, const PowerOptions& opt = {});

}  // namespace tws
