#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tws/adaptive.hpp"
#include "tws/model.hpp"
#include "tws/pipeline.hpp"
#include "tws/task.hpp"

namespace tws {

inline constexpr const char* kVersion = "0.1.0";

struct TaskConfig {
  std::string kind = "pattern";  // parity | majority | pattern | tsv
  std::uint64_t seed = 0;
  SynthOptions synth{64, 16, 4000, 1000};
  std::string tsv_path;
  TsvSchema tsv;
};

struct ExperimentConfig {
  TaskConfig task;
  ModelSpec spec;
  TrainConfig teacher;
  // Half-width full-precision backbone that initializes quantized students;
  // zero epochs slices the teacher instead.
  TrainConfig backbone;
  PipelineConfig pipeline;
  SensitivityMetric metric = SensitivityMetric::kAccuracy;
  bool scale_by_params = false;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "runs";

  // Settings the acceptance suite was tuned with: a 2-layer, 32-wide encoder
  // on the pattern task, one epoch per distillation stage.
  static ExperimentConfig desk();
  // Spec and training settings consistent; referenced input files exist.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& t);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const ExperimentConfig& c);
// Keys missing from `j` keep their desk() values; unknown keys are errors.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
// Reads a JSON config file. TWS_OUTPUT_DIR, when set, replaces output_dir.
ExperimentConfig load_config(const std::string& path);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);
// Hash of the canonical JSON form of `c`, ignoring output_dir.
std::string config_hash(const ExperimentConfig& c);

Task make_task(const ExperimentConfig& c);
Model make_teacher(const Task& task, const ExperimentConfig& c);
// Null when backbone epochs are zero.
std::unique_ptr<Model> make_backbone(const Task& task, const Model& teacher, const ExperimentConfig& c);

// Weight precision of a bit-width sweep point: 32 full, 2 TWN, 1 BWN (per-row
// on the embedding), otherwise uniform k-bit everywhere.
PrecisionMap sweep_precision(const ModelSpec& spec, int bits);

struct SweepRow {
  int bits = 32;
  std::vector<double> samples;  // dev accuracy per seed
  double mean = 0.0;
  double stddev = 0.0;
};

// Full-width students distilled from `teacher` at each weight bit-width.
std::vector<SweepRow> sweep_bits(const Task& task, const Model& teacher, const std::vector<int>& bits,
                                 const PipelineConfig& cfg, const std::vector<std::uint64_t>& seeds);
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct Artifact {
  std::string name;
  std::size_t bytes = 0;
  std::string hash;
};

// Writes `content` to dir/name, creating dir.
Artifact write_artifact(const std::string& dir, const std::string& name, const std::string& content);

// manifest.json: command, its arguments, config, config hash, seeds,
// versions and artifact hashes. Contains no timestamps.
Artifact write_manifest(const std::string& dir, const std::string& command, const ExperimentConfig& c,
                        const std::vector<Artifact>& artifacts,
                        const nlohmann::json& args = nlohmann::json::object());

}  // namespace tws
