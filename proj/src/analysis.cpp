#include "tws/analysis.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace tws {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace

PowerResult power_method(const GradFn& grad, const std::vector<double>& w, const PowerOptions& opt) {
  const std::size_t n = w.size();
  if (n == 0) throw std::invalid_argument("power_method: empty parameter vector");
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  double vn = norm(v);
  for (auto& x : v) x /= vn;
  const double wn = norm(w);
  const double eps = wn > 0.0 ? opt.eps_scale * wn : opt.eps_scale;

  PowerResult r;
  std::vector<double> wp(n), wm(n), hv(n);
  double prev = 0.0;
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      wp[i] = w[i] + eps * v[i];
      wm[i] = w[i] - eps * v[i];
    }
    const auto gp = grad(wp);
    const auto gm = grad(wm);
    for (std::size_t i = 0; i < n; ++i) hv[i] = (gp[i] - gm[i]) / (2.0 * eps);
    const double lambda = dot(v, hv);
    r.iterations = it + 1;
    r.signed_lambda = lambda;
    r.lambda = std::abs(lambda);
    if (it > 0 && std::abs(lambda - prev) < opt.rel_tol * std::abs(lambda)) {
      r.converged = true;
      break;
    }
    prev = lambda;
    const double hn = norm(hv);
    if (hn == 0.0) {
      r.converged = true;
      break;
    }
    for (std::size_t i = 0; i < n; ++i) v[i] = hv[i] / hn;
  }
  return r;
}

GroupObjective::GroupObjective(const Model& m, std::vector<MatrixKey> group, Batch batch)
    : model_(m), group_(std::move(group)), batch_(std::move(batch)) {
  if (group_.empty()) throw std::invalid_argument("GroupObjective: empty group");
  model_.act.kind = ActKind::kNone;
  for (const auto& k : group_) {
    WeightSlot& s = model_.slot(k);
    Tensor w = s.effective_weight();
    const std::string name = s.branches[0].latent.name;
    s.branches.clear();
    s.branches.push_back({QuantScheme::full(), Parameter{name, std::move(w)}});
    const auto span = s.branches[0].latent.value.span();
    w0_.insert(w0_.end(), span.begin(), span.end());
  }
}

void GroupObjective::load(const std::vector<double>& w) {
  if (w.size() != w0_.size()) throw ShapeError("GroupObjective: parameter vector has the wrong length");
  std::size_t off = 0;
  for (const auto& k : group_) {
    auto span = model_.slot(k).branches[0].latent.value.span();
    std::copy(w.begin() + static_cast<std::ptrdiff_t>(off),
              w.begin() + static_cast<std::ptrdiff_t>(off + span.size()), span.begin());
    off += span.size();
  }
}

double GroupObjective::loss(const std::vector<double>& w) {
  load(w);
  return batch_loss(model_, batch_);
}

std::vector<double> GroupObjective::grad(const std::vector<double>& w) {
  load(w);
  const ModelOutput out = forward(model_, batch_);
  const Var loss = ops::cross_entropy(out.logits, batch_.labels);
  out.tape->backward(loss);
  std::vector<double> g;
  g.reserve(w.size());
  for (const auto& k : group_) {
    const Tensor gt = out.tape->grad_of(model_.slot(k).branches[0].latent);
    g.insert(g.end(), gt.span().begin(), gt.span().end());
  }
  return g;
}

PowerResult top_eigenvalue(const Model& m, const std::vector<MatrixKey>& group, const Batch& batch,
                           const PowerOptions& opt) {
  GroupObjective obj(m, group, batch);
  return power_method([&](const std::vector<double>& w) { return obj.grad(w); }, obj.point(), opt);
}

double batch_loss(const Model& m, const Batch& batch) {
  const ModelOutput out = forward(m, batch);
  return out.tape->value(ops::cross_entropy(out.logits, batch.labels)).item();
}

// ---------------------------------------------------------------------------
// Landscape

namespace {

double group_mean_abs(const Model& m, const std::vector<MatrixKey>& group) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& k : group) {
    for (const auto& b : m.slot(k).branches) {
      s += l1_norm(b.latent.value.span());
      n += b.latent.value.size();
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

void shift_group(Model& m, const std::vector<MatrixKey>& group, double x) {
  for (const auto& k : group) {
    for (auto& b : m.slot(k).branches) {
      for (auto& v : b.latent.value.span()) v += x;
    }
  }
}

std::string join_keys(const std::vector<MatrixKey>& g) {
  std::string s;
  for (const auto& k : g) s += (s.empty() ? "" : "+") + to_string(k);
  return s;
}

}  // namespace

LandscapeGrid landscape_grid(const std::function<double(double, double)>& loss_at, double mean_abs_a,
                             double mean_abs_b, int k) {
  if (k < 1) throw std::invalid_argument("landscape_grid: k must be >= 1");
  LandscapeGrid g;
  g.mean_abs_a = mean_abs_a;
  g.mean_abs_b = mean_abs_b;
  for (int i = -k; i <= k; ++i) g.fractions.push_back(static_cast<double>(i) / static_cast<double>(k));
  g.loss.assign(g.fractions.size(), std::vector<double>(g.fractions.size()));
  for (std::size_t i = 0; i < g.fractions.size(); ++i) {
    for (std::size_t j = 0; j < g.fractions.size(); ++j) {
      g.loss[i][j] = loss_at(g.fractions[i] * mean_abs_a, g.fractions[j] * mean_abs_b);
    }
  }
  return g;
}

LandscapeGrid landscape_grid(const Model& m, const std::vector<MatrixKey>& group_a,
                             const std::vector<MatrixKey>& group_b, const Batch& batch, int k) {
  if (group_a.empty() || group_b.empty()) throw std::invalid_argument("landscape_grid: empty group");
  for (const auto& key : group_a) (void)m.slot(key);
  for (const auto& key : group_b) (void)m.slot(key);
  LandscapeGrid g = landscape_grid(
      [&](double x, double y) {
        if (x == 0.0 && y == 0.0) return batch_loss(m, batch);
        Model p = m;
        shift_group(p, group_a, x);
        shift_group(p, group_b, y);
        return batch_loss(p, batch);
      },
      group_mean_abs(m, group_a), group_mean_abs(m, group_b), k);
  g.tag_a = join_keys(group_a);
  g.tag_b = join_keys(group_b);
  return g;
}

std::string LandscapeGrid::csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "x_fraction,y_fraction,x,y,loss\n";
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    for (std::size_t j = 0; j < fractions.size(); ++j) {
      os << fractions[i] << ',' << fractions[j] << ',' << fractions[i] * mean_abs_a << ','
         << fractions[j] * mean_abs_b << ',' << loss[i][j] << '\n';
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Steepness

namespace {

std::vector<MatrixKey> part_group(const ModelSpec& spec, Part part, int layer) {
  return parameters_by_tag(spec).at(PartTag{part, layer});
}

// Loss with the group's quantized weights versus with its latent weights.
void noise_check(const Model& m, const std::vector<MatrixKey>& group, const Batch& batch, SteepnessEntry& e) {
  Model latent = m;
  latent.act.kind = ActKind::kNone;
  Model quant = latent;
  double sq = 0.0;
  for (const auto& k : group) {
    WeightSlot& s = latent.slot(k);
    const Tensor w = s.latent_sum();
    const Tensor w_hat = s.effective_weight();
    for (std::size_t i = 0; i < w.size(); ++i) sq += (w[i] - w_hat[i]) * (w[i] - w_hat[i]);
    const std::string name = s.branches[0].latent.name;
    s.branches.clear();
    s.branches.push_back({QuantScheme::full(), Parameter{name, w}});
  }
  e.noise_sq = sq;
  e.loss_increase = batch_loss(quant, batch) - batch_loss(latent, batch);
  GroupObjective obj(latent, group, batch);
  e.grad_norm = norm(obj.grad(obj.point()));
  e.bound_holds = e.loss_increase <= e.lambda * e.noise_sq;
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
}

}  // namespace

SteepnessReport steepness_report(const Model& fp, const Model& ternary, const Model& binary,
                                 const std::vector<Batch>& batches, const PowerOptions& opt) {
  if (!(fp.spec.layers == ternary.spec.layers && fp.spec.layers == binary.spec.layers)) {
    throw std::invalid_argument("steepness_report: models differ in depth");
  }
  if (batches.empty()) throw std::invalid_argument("steepness_report: no batches");
  SteepnessReport rep;
  const std::pair<const char*, const Model*> models[] = {{"fp", &fp}, {"ternary", &ternary}, {"binary", &binary}};
  std::size_t quantized_entries = 0;
  std::size_t holds = 0;
  for (Part part : kTransformerParts) {
    SteepnessSummary sum;
    sum.part = part;
    std::vector<double> lam[3];
    std::vector<double> ratio_t, ratio_b;
    for (int l = 0; l < fp.spec.layers; ++l) {
      for (std::size_t bi = 0; bi < batches.size(); ++bi) {
        double vals[3];
        for (int mi = 0; mi < 3; ++mi) {
          const Model& m = *models[mi].second;
          const auto group = part_group(m.spec, part, l);
          SteepnessEntry e;
          e.model = models[mi].first;
          e.part = part;
          e.layer = l;
          e.batch = bi;
          const PowerResult pr = top_eigenvalue(m, group, batches[bi], opt);
          e.lambda = pr.lambda;
          e.converged = pr.converged;
          if (mi > 0) {
            noise_check(m, group, batches[bi], e);
            ++quantized_entries;
            holds += e.bound_holds;
          }
          vals[mi] = e.lambda;
          lam[mi].push_back(e.lambda);
          rep.entries.push_back(e);
        }
        ratio_t.push_back(vals[1] / vals[0]);
        ratio_b.push_back(vals[2] / vals[0]);
      }
    }
    mean_std(lam[0], sum.fp_mean, sum.fp_std);
    mean_std(lam[1], sum.ternary_mean, sum.ternary_std);
    mean_std(lam[2], sum.binary_mean, sum.binary_std);
    mean_std(ratio_t, sum.ternary_ratio_mean, sum.ternary_ratio_std);
    mean_std(ratio_b, sum.binary_ratio_mean, sum.binary_ratio_std);
    rep.parts.push_back(sum);
  }
  rep.bound_fraction = quantized_entries ? static_cast<double>(holds) / static_cast<double>(quantized_entries) : 1.0;
  return rep;
}

std::string SteepnessReport::csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "part,fp_mean,fp_std,ternary_mean,ternary_std,binary_mean,binary_std,"
        "ternary_ratio_mean,ternary_ratio_std,binary_ratio_mean,binary_ratio_std\n";
  for (const auto& s : parts) {
    os << to_string(s.part) << ',' << s.fp_mean << ',' << s.fp_std << ',' << s.ternary_mean << ','
       << s.ternary_std << ',' << s.binary_mean << ',' << s.binary_std << ',' << s.ternary_ratio_mean << ','
       << s.ternary_ratio_std << ',' << s.binary_ratio_mean << ',' << s.binary_ratio_std << '\n';
  }
  return os.str();
}

}  // namespace tws
