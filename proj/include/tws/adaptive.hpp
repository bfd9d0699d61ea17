#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tws/model.hpp"
#include "tws/pipeline.hpp"
#include "tws/task.hpp"

namespace tws {

struct GainStat {
  std::string name;
  std::size_t params = 0;
  std::vector<double> samples;  // metric - baseline, one per seed
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
};

enum class SensitivityMetric { kAccuracy, kNegLoss };
std::string to_string(SensitivityMetric m);
SensitivityMetric sensitivity_metric_from_string(const std::string& s);

struct SensitivityConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  PipelineConfig pipeline;
  SensitivityMetric metric = SensitivityMetric::kAccuracy;
  // Multiply each u_z by the matrix's own parameter count.
  bool scale_by_params = false;
};

struct SensitivityReport {
  GainStat baseline;  // raw metric of the all-binary student
  std::vector<GainStat> parts;   // the five Transformer parts
  std::vector<GainStat> layers;  // one per layer
  GainStat embedding;
  GainStat pooler;
  std::vector<MatrixKey> keys;  // canonical splittable order
  std::vector<double> u;
  bool scale_by_params = false;
};

GainStat summarize(std::string name, std::size_t params, std::vector<double> samples);

// Sensitivity vector from gains: u_z = pw(part of z) + pw(layer of z) for
// Transformer matrices and pw(embedding), pw(pooler) otherwise, where pw is
// the clamped mean gain divided by the group's parameter count.
std::vector<double> sensitivity_vector(const ModelSpec& spec, const std::vector<GainStat>& parts,
                                       const std::vector<GainStat>& layers, const GainStat& embedding,
                                       const GainStat& pooler, bool scale_by_params);

// Leave-one-out sensitivity on the half-width all-binary student: each run
// keeps one part, layer, the embedding or the pooler at full precision.
// Students start from `backbone` when given (see run_tws_pipeline).
SensitivityReport measure_sensitivity(const Task& task, const Model& teacher, const SensitivityConfig& cfg,
                                      const Model* backbone = nullptr);

// Parameter counts of the analysis groups at `spec`'s width.
std::size_t part_params(const ModelSpec& spec, Part p);
std::size_t layer_params(const ModelSpec& spec, int layer);

class BudgetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct KnapsackResult {
  std::vector<int> s;
  double value = 0.0;
  std::int64_t cost = 0;
};

// Exact 0/1 knapsack over integer costs: maximizes u.s subject to c.s <=
// capacity; ties go to the smaller total cost, then to the lexicographically
// smallest s.
KnapsackResult knapsack_select(const std::vector<double>& u, const std::vector<std::int64_t>& c,
                               std::int64_t capacity);

enum class PlanStrategy { kMaximal, kRandom, kMinimal };
std::string to_string(PlanStrategy s);
PlanStrategy plan_strategy_from_string(const std::string& s);

struct SplitPlan {
  std::vector<MatrixKey> keys;
  std::vector<int> s;
  std::vector<std::int64_t> cost;  // bytes added by ternarize-then-split
  std::int64_t baseline_bytes = 0;  // C0: half-width all-binary model
  std::int64_t capacity = 0;        // C - C0
  double value = 0.0;
  PlanStrategy strategy = PlanStrategy::kMaximal;

  std::int64_t used() const;
};

// Per-matrix byte costs of splitting at `spec` (half width) and C0.
std::vector<std::int64_t> split_costs(const ModelSpec& spec);
std::int64_t binary_baseline_bytes(const ModelSpec& spec);

// Maximal: knapsack on u. Minimal: fill greedily by ascending u.
// Random: fill greedily in a seeded random order.
SplitPlan make_plan(const ModelSpec& spec, const std::vector<double>& u, std::int64_t capacity,
                    PlanStrategy strategy, std::uint64_t seed = 0);

PrecisionMap plan_precision(const ModelSpec& spec, const SplitPlan& plan);

// JSON forms used by the CLI; the *_from_json readers throw
// std::invalid_argument on missing or inconsistent fields.
nlohmann::json to_json(const SensitivityReport& r);
SensitivityReport sensitivity_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SplitPlan& p);
SplitPlan plan_from_json(const nlohmann::json& j);

// Trains the mixed ternary/binary student for `plan` and splits it.
PipelineResult apply_plan(const Task& task, const Model& teacher, const SplitPlan& plan,
                          const PipelineConfig& cfg, const Model* backbone = nullptr);

}  // namespace tws
