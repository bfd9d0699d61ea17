#include "tws/adaptive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "tws/accounting.hpp"

namespace tws {

std::string to_string(SensitivityMetric m) { return m == SensitivityMetric::kAccuracy ? "accuracy" : "neg-loss"; }

SensitivityMetric sensitivity_metric_from_string(const std::string& s) {
  if (s == "accuracy") return SensitivityMetric::kAccuracy;
  if (s == "neg-loss") return SensitivityMetric::kNegLoss;
  throw std::invalid_argument("unknown sensitivity metric '" + s + "'");
}

GainStat summarize(std::string name, std::size_t params, std::vector<double> samples) {
  GainStat g;
  g.name = std::move(name);
  g.params = params;
  g.samples = std::move(samples);
  if (g.samples.empty()) return g;
  const double n = static_cast<double>(g.samples.size());
  g.mean = accurate_sum(g.samples) / n;
  if (g.samples.size() > 1) {
    double ss = 0.0;
    for (double v : g.samples) ss += (v - g.mean) * (v - g.mean);
    g.stddev = std::sqrt(ss / (n - 1.0));
  }
  return g;
}

std::size_t part_params(const ModelSpec& spec, Part p) {
  std::size_t n = 0;
  for (const auto& k : splittable_matrices(spec)) {
    if (part_of(k.slot) != p) continue;
    const auto [r, c] = matrix_shape(spec, k);
    n += r * c;
  }
  return n;
}

std::size_t layer_params(const ModelSpec& spec, int layer) {
  std::size_t n = 0;
  for (const auto& k : splittable_matrices(spec)) {
    if (k.layer != layer) continue;
    const auto [r, c] = matrix_shape(spec, k);
    n += r * c;
  }
  return n;
}

std::vector<double> sensitivity_vector(const ModelSpec& spec, const std::vector<GainStat>& parts,
                                       const std::vector<GainStat>& layers, const GainStat& embedding,
                                       const GainStat& pooler, bool scale_by_params) {
  if (parts.size() != std::size(kTransformerParts) || layers.size() != static_cast<std::size_t>(spec.layers)) {
    throw std::invalid_argument("sensitivity_vector: gain lists do not match the spec");
  }
  auto pw = [](const GainStat& g) {
    if (g.params == 0) throw std::invalid_argument("sensitivity_vector: group " + g.name + " has no parameters");
    return std::max(0.0, g.mean) / static_cast<double>(g.params);
  };
  std::vector<double> u;
  for (const auto& k : splittable_matrices(spec)) {
    double v = 0.0;
    if (k.slot == Slot::kEmbedding) {
      v = pw(embedding);
    } else if (k.slot == Slot::kPooler) {
      v = pw(pooler);
    } else {
      const auto pi = static_cast<std::size_t>(part_of(k.slot));
      v = pw(parts[pi]) + pw(layers[static_cast<std::size_t>(k.layer)]);
    }
    if (scale_by_params) {
      const auto [r, c] = matrix_shape(spec, k);
      v *= static_cast<double>(r * c);
    }
    if (!std::isfinite(v)) throw std::domain_error("sensitivity_vector: non-finite entry");
    u.push_back(v);
  }
  return u;
}

namespace {

double run_metric(const Task& task, const Model& teacher, const ModelSpec& half, const PrecisionMap& precision,
                  const PipelineConfig& cfg, SensitivityMetric metric, const Model* backbone) {
  const Model m = train_quantized(task, teacher, half.width, precision, cfg, 1, nullptr, backbone);
  if (metric == SensitivityMetric::kAccuracy) return accuracy(m, task.dev, task.seq);
  Task dev = task;
  dev.train = task.dev;
  return -mean_loss(m, dev, Objective::kTask);
}

}  // namespace

SensitivityReport measure_sensitivity(const Task& task, const Model& teacher, const SensitivityConfig& cfg,
                                      const Model* backbone) {
  if (cfg.seeds.empty()) throw std::invalid_argument("measure_sensitivity: need at least one seed");
  ModelSpec half = teacher.spec;
  half.width = cfg.pipeline.student_width;
  half.validate();
  const PrecisionMap all_binary = binary_precision(half);
  const std::size_t n_parts = std::size(kTransformerParts);
  const auto L = static_cast<std::size_t>(half.layers);

  std::vector<double> base;
  std::vector<std::vector<double>> part_gain(n_parts), layer_gain(L);
  std::vector<double> emb_gain, pool_gain;
  for (std::uint64_t seed : cfg.seeds) {
    PipelineConfig pc = cfg.pipeline;
    pc.seed = seed;
    auto with_full = [&](auto pred) {
      PrecisionMap p = all_binary;
      for (auto& [k, s] : p) {
        if (pred(k)) s = QuantScheme::full();
      }
      return run_metric(task, teacher, half, p, pc, cfg.metric, backbone);
    };
    const double b = run_metric(task, teacher, half, all_binary, pc, cfg.metric, backbone);
    base.push_back(b);
    for (std::size_t i = 0; i < n_parts; ++i) {
      const Part part = kTransformerParts[i];
      part_gain[i].push_back(with_full([&](const MatrixKey& k) { return k.layer >= 0 && part_of(k.slot) == part; }) - b);
    }
    for (std::size_t l = 0; l < L; ++l) {
      layer_gain[l].push_back(with_full([&](const MatrixKey& k) { return k.layer == static_cast<int>(l); }) - b);
    }
    emb_gain.push_back(with_full([](const MatrixKey& k) { return k.slot == Slot::kEmbedding; }) - b);
    pool_gain.push_back(with_full([](const MatrixKey& k) { return k.slot == Slot::kPooler; }) - b);
  }

  SensitivityReport r;
  r.baseline = summarize("baseline", 0, base);
  for (std::size_t i = 0; i < n_parts; ++i) {
    r.parts.push_back(summarize(to_string(kTransformerParts[i]), part_params(half, kTransformerParts[i]), part_gain[i]));
  }
  for (std::size_t l = 0; l < L; ++l) {
    r.layers.push_back(summarize("layer" + std::to_string(l), layer_params(half, static_cast<int>(l)), layer_gain[l]));
  }
  const MatrixKey emb{Slot::kEmbedding, -1};
  const MatrixKey pool{Slot::kPooler, -1};
  r.embedding = summarize("embedding", matrix_shape(half, emb).first * matrix_shape(half, emb).second, emb_gain);
  r.pooler = summarize("pooler", matrix_shape(half, pool).first * matrix_shape(half, pool).second, pool_gain);
  r.keys = splittable_matrices(half);
  r.scale_by_params = cfg.scale_by_params;
  r.u = sensitivity_vector(half, r.parts, r.layers, r.embedding, r.pooler, cfg.scale_by_params);
  return r;
}

// ---------------------------------------------------------------------------
// Knapsack

KnapsackResult knapsack_select(const std::vector<double>& u, const std::vector<std::int64_t>& c,
                               std::int64_t capacity) {
  if (capacity < 0) throw BudgetError("knapsack: negative budget");
  if (u.size() != c.size()) throw std::invalid_argument("knapsack: value/cost length mismatch");
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (c[i] <= 0) throw std::invalid_argument("knapsack: costs must be positive");
    if (!std::isfinite(u[i])) throw std::invalid_argument("knapsack: values must be finite");
  }
  const std::size_t Z = u.size();
  // Work on the common divisor of the costs; capacity floors onto it.
  std::int64_t g = 0;
  for (auto ci : c) g = std::gcd(g, ci);
  if (g == 0) g = 1;
  const std::int64_t total = std::accumulate(c.begin(), c.end(), std::int64_t{0});
  const auto cap = static_cast<std::size_t>(std::min(capacity, total) / g);
  const std::size_t width = cap + 1;

  // f[x]: best value over the items processed so far (a suffix of the list)
  // with total cost exactly x * g. Items are processed from last to first so
  // that reconstruction runs forward and can prefer s_i = 0 on ties.
  constexpr double kNone = -std::numeric_limits<double>::infinity();
  std::vector<double> f(width, kNone);
  f[0] = 0.0;
  const std::size_t words = (width + 63) / 64;
  std::vector<std::uint64_t> take(Z * words, 0);
  for (std::size_t ii = Z; ii-- > 0;) {
    const auto ci = static_cast<std::size_t>(c[ii] / g);
    if (ci > cap) continue;
    for (std::size_t x = cap; x + 1 > ci; --x) {
      if (f[x - ci] == kNone) continue;
      const double cand = f[x - ci] + u[ii];
      if (cand > f[x]) {
        f[x] = cand;
        take[ii * words + x / 64] |= std::uint64_t{1} << (x % 64);
      }
      if (x == 0) break;
    }
  }
  std::size_t best = 0;
  for (std::size_t x = 1; x < width; ++x) {
    if (f[x] > f[best]) best = x;
  }
  KnapsackResult r;
  r.s.assign(Z, 0);
  r.value = f[best];
  std::size_t x = best;
  for (std::size_t i = 0; i < Z; ++i) {
    if (take[i * words + x / 64] >> (x % 64) & 1u) {
      r.s[i] = 1;
      x -= static_cast<std::size_t>(c[i] / g);
      r.cost += c[i];
    }
  }
  return r;
}

std::string to_string(PlanStrategy s) {
  switch (s) {
    case PlanStrategy::kMaximal: return "maximal";
    case PlanStrategy::kRandom: return "random";
    case PlanStrategy::kMinimal: return "minimal";
  }
  return "?";
}

PlanStrategy plan_strategy_from_string(const std::string& s) {
  if (s == "maximal") return PlanStrategy::kMaximal;
  if (s == "random") return PlanStrategy::kRandom;
  if (s == "minimal") return PlanStrategy::kMinimal;
  throw std::invalid_argument("unknown plan strategy '" + s + "'");
}

std::int64_t SplitPlan::used() const {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < s.size(); ++i) n += s[i] ? cost[i] : 0;
  return n;
}

std::vector<std::int64_t> split_costs(const ModelSpec& spec) {
  std::vector<std::int64_t> out;
  for (const auto& k : splittable_matrices(spec)) {
    const QuantScheme bin =
        k.slot == Slot::kEmbedding ? QuantScheme::binary(Granularity::kPerRow) : QuantScheme::binary();
    const double extra = matrix_bytes(spec, k, bin, true) - matrix_bytes(spec, k, bin, false);
    out.push_back(static_cast<std::int64_t>(std::ceil(extra)));
  }
  return out;
}

std::int64_t binary_baseline_bytes(const ModelSpec& spec) {
  CostInput in;
  in.spec = spec;
  in.precision = binary_precision(spec);
  return static_cast<std::int64_t>(std::ceil(model_size_bytes(in)));
}

SplitPlan make_plan(const ModelSpec& spec, const std::vector<double>& u, std::int64_t capacity,
                    PlanStrategy strategy, std::uint64_t seed) {
  if (capacity < 0) throw BudgetError("plan: budget below the all-binary baseline");
  SplitPlan p;
  p.keys = splittable_matrices(spec);
  if (u.size() != p.keys.size()) throw std::invalid_argument("plan: sensitivity vector length mismatch");
  p.cost = split_costs(spec);
  p.baseline_bytes = binary_baseline_bytes(spec);
  p.capacity = capacity;
  p.strategy = strategy;
  if (strategy == PlanStrategy::kMaximal) {
    const KnapsackResult k = knapsack_select(u, p.cost, capacity);
    p.s = k.s;
  } else {
    std::vector<std::size_t> order(u.size());
    std::iota(order.begin(), order.end(), 0);
    if (strategy == PlanStrategy::kMinimal) {
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return u[a] < u[b]; });
    } else {
      std::mt19937_64 rng(seed);
      std::shuffle(order.begin(), order.end(), rng);
    }
    p.s.assign(u.size(), 0);
    std::int64_t left = capacity;
    for (std::size_t i : order) {
      if (p.cost[i] <= left) {
        p.s[i] = 1;
        left -= p.cost[i];
      }
    }
  }
  for (std::size_t i = 0; i < u.size(); ++i) p.value += p.s[i] ? u[i] : 0.0;
  return p;
}

PrecisionMap plan_precision(const ModelSpec& spec, const SplitPlan& plan) {
  const auto keys = splittable_matrices(spec);
  if (keys != plan.keys) throw std::invalid_argument("plan does not match the model spec");
  PrecisionMap p;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const Granularity g = keys[i].slot == Slot::kEmbedding ? Granularity::kPerRow : Granularity::kPerMatrix;
    p[keys[i]] = plan.s[i] ? QuantScheme::ternary(g) : QuantScheme::binary(g);
  }
  return p;
}

PipelineResult apply_plan(const Task& task, const Model& teacher, const SplitPlan& plan, const PipelineConfig& cfg,
                          const Model* backbone) {
  ModelSpec half = teacher.spec;
  half.width = cfg.student_width;
  PipelineConfig pc = cfg;
  pc.student_precision = plan_precision(half, plan);
  return run_tws_pipeline(task, teacher, pc, backbone);
}

// ---------------------------------------------------------------------------
// JSON

namespace {

using nlohmann::json;

json gain_json(const GainStat& g) {
  return {{"name", g.name}, {"params", g.params}, {"samples", g.samples}, {"mean", g.mean}, {"stddev", g.stddev}};
}

GainStat gain_from_json(const json& j) {
  GainStat g;
  g.name = j.at("name").get<std::string>();
  g.params = j.at("params").get<std::size_t>();
  g.samples = j.at("samples").get<std::vector<double>>();
  g.mean = j.at("mean").get<double>();
  g.stddev = j.at("stddev").get<double>();
  return g;
}

template <class F>
auto reading(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string(what) + ": " + e.what());
  }
}

std::vector<std::string> key_names(const std::vector<MatrixKey>& keys) {
  std::vector<std::string> out;
  for (const auto& k : keys) out.push_back(to_string(k));
  return out;
}

std::vector<MatrixKey> keys_from(const json& j) {
  std::vector<MatrixKey> out;
  for (const auto& n : j) out.push_back(matrix_key_from_string(n.get<std::string>()));
  return out;
}

}  // namespace

json to_json(const SensitivityReport& r) {
  json parts = json::array(), layers = json::array();
  for (const auto& g : r.parts) parts.push_back(gain_json(g));
  for (const auto& g : r.layers) layers.push_back(gain_json(g));
  return {{"baseline", gain_json(r.baseline)}, {"parts", parts},
          {"layers", layers},                  {"embedding", gain_json(r.embedding)},
          {"pooler", gain_json(r.pooler)},     {"keys", key_names(r.keys)},
          {"u", r.u},                          {"scale_by_params", r.scale_by_params}};
}

SensitivityReport sensitivity_from_json(const json& j) {
  return reading("sensitivity report", [&] {
    SensitivityReport r;
    r.baseline = gain_from_json(j.at("baseline"));
    for (const auto& g : j.at("parts")) r.parts.push_back(gain_from_json(g));
    for (const auto& g : j.at("layers")) r.layers.push_back(gain_from_json(g));
    r.embedding = gain_from_json(j.at("embedding"));
    r.pooler = gain_from_json(j.at("pooler"));
    r.keys = keys_from(j.at("keys"));
    r.u = j.at("u").get<std::vector<double>>();
    r.scale_by_params = j.at("scale_by_params").get<bool>();
    if (r.u.size() != r.keys.size()) throw std::invalid_argument("sensitivity report: u and keys differ in length");
    return r;
  });
}

json to_json(const SplitPlan& p) {
  return {{"strategy", to_string(p.strategy)},
          {"keys", key_names(p.keys)},
          {"s", p.s},
          {"cost", p.cost},
          {"baseline_bytes", p.baseline_bytes},
          {"capacity", p.capacity},
          {"used", p.used()},
          {"value", p.value}};
}

SplitPlan plan_from_json(const json& j) {
  return reading("split plan", [&] {
    SplitPlan p;
    p.strategy = plan_strategy_from_string(j.at("strategy").get<std::string>());
    p.keys = keys_from(j.at("keys"));
    p.s = j.at("s").get<std::vector<int>>();
    p.cost = j.at("cost").get<std::vector<std::int64_t>>();
    p.baseline_bytes = j.at("baseline_bytes").get<std::int64_t>();
    p.capacity = j.at("capacity").get<std::int64_t>();
    p.value = j.at("value").get<double>();
    if (p.s.size() != p.keys.size() || p.cost.size() != p.keys.size()) {
      throw std::invalid_argument("split plan: keys, s and cost differ in length");
    }
    return p;
  });
}

}  // namespace tws
