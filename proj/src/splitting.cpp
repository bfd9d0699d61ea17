#include "tws/splitting.hpp"

#include <algorithm>
#include <cmath>

namespace tws {

SplitResult tws_split(const Tensor& w, const TernaryResult& t) {
  require_same_shape(w, t.w_hat, "tws_split");
  const std::size_t n = t.group_size;
  if (n != w.size() && n != w.cols()) throw ShapeError("tws_split: groups must be the matrix or its rows");
  const std::size_t groups = w.size() / n;
  const bool grid = on_latent_grid(w);

  // Membership per element: 0 = I, 1 = J, 2 = K.
  std::vector<unsigned char> member(w.size(), 0);
  for (auto i : t.zeroed_pos) member[i] = 1;
  for (auto i : t.zeroed_neg) member[i] = 2;

  SplitResult r;
  r.w1 = Tensor(w.shape());
  r.w2 = Tensor(w.shape());
  std::vector<double> mag_i, mag_j, mag_k;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * n;
    if (!(t.alpha[g] > 0.0)) {
      throw DegenerateTernary("ternary group " + std::to_string(g) + " has no nonzero entries");
    }
    mag_i.clear();
    mag_j.clear();
    mag_k.clear();
    for (std::size_t i = base; i < base + n; ++i) {
      const double m = std::abs(w[i]);
      (member[i] == 0 ? mag_i : member[i] == 1 ? mag_j : mag_k).push_back(m);
    }
    const double sum_i = accurate_sum(mag_i);
    const double sum_j = accurate_sum(mag_j);
    const double sum_k = accurate_sum(mag_k);
    // Equal branch scales require a*sum_I + sum_J = (1-a)*sum_I + sum_K.
    const double a = (sum_i + sum_k - sum_j) / (2.0 * sum_i);
    const std::size_t n_jk = mag_j.size() + mag_k.size();
    // (n/|I| * sum_I - sum_all) / (2(|J|+|K|)) rearranged to avoid the large
    // cancelling terms: half the gap between the mean kept and mean dropped
    // magnitudes.
    double b = 0.0;
    if (n_jk > 0) {
      b = 0.5 * (sum_i / static_cast<double>(mag_i.size()) -
                 (sum_j + sum_k) / static_cast<double>(n_jk));
    }
    double bq = b;
    if (grid && n_jk > 0) bq = std::max(snap_latent(b), kLatentQuantum);
    for (std::size_t i = base; i < base + n; ++i) {
      const double v = w[i];
      switch (member[i]) {
        case 0: {
          const double h = grid ? snap_latent(a * v) : a * v;
          r.w1[i] = h;
          r.w2[i] = v - h;
          break;
        }
        case 1:
          r.w1[i] = v + bq;
          r.w2[i] = -bq;
          break;
        default:
          r.w1[i] = bq;
          r.w2[i] = v - bq;
          break;
      }
    }
    r.a.push_back(a);
    r.b.push_back(b);
  }

  const Granularity g = groups == 1 ? Granularity::kPerMatrix : Granularity::kPerRow;
  const BinaryResult b1 = binarize(r.w1, g);
  const BinaryResult b2 = binarize(r.w2, g);
  r.alpha1 = b1.alpha;
  r.alpha2 = b2.alpha;
  for (std::size_t i = 0; i < w.size(); ++i) {
    r.latent_error = std::max(r.latent_error, std::abs(r.w1[i] + r.w2[i] - w[i]));
    r.quantized_error =
        std::max(r.quantized_error, std::abs(b1.w_hat[i] + b2.w_hat[i] - t.w_hat[i]));
  }
  return r;
}

SplitResult tws_split(const Tensor& w, Granularity g) { return tws_split(w, ternarize(w, g)); }

Model split_model(const Model& ternary) {
  Model m = ternary;
  for (WeightSlot* s : m.slots()) {
    if (s->is_pair()) throw ConfigError("matrix " + to_string(s->key) + " is already split");
    const WeightBranch& src = s->branches[0];
    if (src.scheme.kind != QuantKind::kTernary) continue;
    SplitResult r;
    try {
      r = tws_split(src.latent.value, ternarize(src.latent.value, src.scheme.granularity));
    } catch (const DegenerateTernary& e) {
      throw DegenerateTernary(to_string(s->key) + ": " + e.what());
    }
    const QuantScheme bin = QuantScheme::binary(src.scheme.granularity);
    const std::string name = src.latent.name;
    s->branches.clear();
    s->branches.push_back({bin, Parameter{name, std::move(r.w1)}});
    s->branches.push_back({bin, Parameter{name + "_2", std::move(r.w2)}});
  }
  return m;
}

}  // namespace tws
