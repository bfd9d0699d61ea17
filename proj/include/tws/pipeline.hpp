#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tws/model.hpp"
#include "tws/task.hpp"

namespace tws {

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr = 5e-5;
  std::size_t epochs = 6;
  double warmup = 0.1;
  double weight_decay = 1e-2;
  double clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  std::uint64_t seed = 0;

  void validate() const;
};

// Linear warmup over the first `warmup` fraction of `total` steps to `peak`,
// then linear decay to zero. Step `round(warmup * total)` gets `peak`.
double lr_at(std::size_t step, std::size_t total, double peak, double warmup);

// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

// Adam with decoupled weight decay. Moments are keyed by parameter name, so a
// copied or rebuilt model continues with the same state.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg);
  void step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads, double lr);
  std::size_t steps() const { return steps_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  TrainConfig cfg_;
  std::map<std::string, Moments> state_;
  std::size_t steps_ = 0;
};

enum class Objective { kTask, kIntermediate, kPrediction };
std::string to_string(Objective o);

enum class StageTag { kTeacher, kIntDistilTernary, kPredDistilTernary, kSplitFinetune, kBaseline };
std::string to_string(StageTag s);

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageResult {
  std::vector<double> losses;  // one per optimizer step
  std::size_t steps = 0;
};

// Trains `model` in place with a fresh optimizer and schedule. Distillation
// objectives need `teacher`, which runs in eval mode.
StageResult train_stage(Model& model, const Task& task, Objective objective, const TrainConfig& cfg,
                        const Model* teacher = nullptr);

std::vector<int> predict(const Model& m, std::span<const Example> examples, int seq);
double accuracy(const Model& m, std::span<const Example> examples, int seq);
// Eval-mode objective averaged over the training set.
double mean_loss(const Model& m, const Task& task, Objective objective, const Model* teacher = nullptr);

Model train_teacher(const Task& task, const ModelSpec& spec, const TrainConfig& cfg, std::uint64_t seed);

struct PipelineConfig {
  ActivationQuant act{ActKind::kMinMax, 8};
  double student_width = 0.5;
  TrainConfig stage1;  // intermediate-layer distillation
  TrainConfig stage2;  // prediction-layer distillation
  TrainConfig stage3;  // fine-tuning after the split
  // Half-width precision; unset means every matrix ternary.
  std::optional<PrecisionMap> student_precision;
  std::uint64_t seed = 0;

  // Learning rates 5e-5 / 2e-5 / 2e-5, batch 32, 6 epochs per stage.
  static PipelineConfig paper_preset();
  // The preset with learning rates multiplied by `lr_scale` and `epochs`
  // epochs per stage.
  static PipelineConfig desk(double lr_scale, std::size_t epochs);
};

struct PipelineResult {
  Model ternary;
  Model binary;
  StageResult stage1, stage2, stage3;
  double split_latent_error = 0.0;
  std::map<std::string, double> metrics;
};

PrecisionMap ternary_precision(const ModelSpec& spec);
PrecisionMap binary_precision(const ModelSpec& spec, QuantKind kind = QuantKind::kBinary);

// Full-precision model at `width`, sliced from `teacher` and trained with
// prediction-layer distillation. Serves as the initialization of narrower
// quantized students.
Model train_backbone(const Task& task, const Model& teacher, double width, const TrainConfig& cfg);

// Half-width ternary student distilled from `teacher` in two stages, split
// into binary pairs, then fine-tuned. The student starts from `backbone`
// when given (its width must equal the student width), otherwise from a
// slice of the teacher.
PipelineResult run_tws_pipeline(const Task& task, const Model& teacher, const PipelineConfig& cfg,
                                const Model* backbone = nullptr);

// Student at `width` with `precision`, trained with the two distillation
// stages using `epoch_factor` times the configured epochs. Initialization
// follows run_tws_pipeline.
Model train_quantized(const Task& task, const Model& teacher, double width, const PrecisionMap& precision,
                      const PipelineConfig& cfg, std::size_t epoch_factor,
                      std::map<std::string, double>* metrics = nullptr, const Model* backbone = nullptr);

// Direct binary baseline at full width with doubled epochs.
Model run_bwn_baseline(const Task& task, const Model& teacher, const PipelineConfig& cfg,
                       std::map<std::string, double>* metrics = nullptr);

// Binarizes an already trained ternary model and fine-tunes it with
// prediction-layer distillation. `twn_scale` keeps the ternary scale.
Model run_gradual_bwn(const Task& task, const Model& teacher, const Model& ternary,
                      const PipelineConfig& cfg, bool twn_scale);

}  // namespace tws
