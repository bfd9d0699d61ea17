#include "tws/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "tws/distillation.hpp"
#include "tws/splitting.hpp"

namespace tws {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(warmup >= 0.0 && warmup < 1.0)) throw ConfigError("warmup portion must be in [0, 1)");
  if (weight_decay < 0.0 || !(clip > 0.0)) throw ConfigError("weight decay and clip must be valid");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
    throw ConfigError("invalid Adam constants");
  }
}

double lr_at(std::size_t step, std::size_t total, double peak, double warmup) {
  if (total == 0 || step >= total) return 0.0;
  const auto warm = static_cast<std::size_t>(std::nearbyint(warmup * static_cast<double>(total)));
  if (step < warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warm);
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g.span()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

AdamW::AdamW(const TrainConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

void AdamW::step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("AdamW: parameter/gradient count mismatch");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i].param;
    const Tensor& g = grads[i];
    require_same_shape(p.value, g, "AdamW");
    auto [it, fresh] = state_.try_emplace(p.name);
    if (fresh || !it->second.m.same_shape(p.value)) {
      it->second.m = Tensor::zeros_like(p.value);
      it->second.v = Tensor::zeros_like(p.value);
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    const double decay = params[i].decay ? cfg_.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps) + decay * p.value[k];
      p.value[k] -= lr * update;
    }
    if (params[i].latent) snap_latent(p.value);
    if (params[i].positive) {
      for (auto& s : p.value.span()) s = std::max(s, 1e-8);
    }
  }
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::kTask: return "task";
    case Objective::kIntermediate: return "intermediate";
    case Objective::kPrediction: return "prediction";
  }
  return "?";
}

std::string to_string(StageTag s) {
  switch (s) {
    case StageTag::kTeacher: return "teacher";
    case StageTag::kIntDistilTernary: return "int-distil-ternary";
    case StageTag::kPredDistilTernary: return "pred-distil-ternary";
    case StageTag::kSplitFinetune: return "split-finetune";
    case StageTag::kBaseline: return "baseline";
  }
  return "?";
}

namespace {

Var objective_loss(const ModelOutput& out, const Batch& batch, Objective objective, const Model* teacher) {
  switch (objective) {
    case Objective::kTask: return ops::cross_entropy(out.logits, batch.labels);
    case Objective::kIntermediate:
    case Objective::kPrediction: {
      if (teacher == nullptr) throw ConfigError("distillation objective needs a teacher");
      const ModelOutput t = forward(*teacher, batch);
      const DistillTargets targets = capture_targets(t);
      return objective == Objective::kIntermediate ? loss_int(out.inter, targets)
                                                   : loss_pred(out.logits, targets.logits);
    }
  }
  throw std::logic_error("unhandled objective");
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

StageResult train_stage(Model& model, const Task& task, Objective objective, const TrainConfig& cfg,
                        const Model* teacher) {
  cfg.validate();
  StageResult result;
  if (cfg.epochs == 0 || task.train.empty()) return result;
  std::mt19937_64 rng(mix(cfg.seed, 1));
  if (model.act.kind == ActKind::kLsq) {
    const std::size_t n = std::min(cfg.batch_size, task.train.size());
    calibrate_activations(model, make_batch(std::span(task.train).first(n), task.seq));
  }
  const std::size_t per_epoch = (task.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  AdamW opt(cfg);
  const std::vector<ParamRef> params = model.parameters();
  std::vector<Tensor> grads(params.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const Batch& batch : epoch_batches(task, cfg.batch_size, rng)) {
      ForwardOptions fo;
      fo.train = true;
      fo.dropout_seed = mix(cfg.seed, result.steps + 2);
      ModelOutput out;
      Var loss;
      try {
        out = forward(model, batch, fo);
        loss = objective_loss(out, batch, objective, teacher);
      } catch (const QuantStateError&) {
        throw;
      } catch (const std::domain_error& e) {
        throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(result.steps));
      }
      const double value = out.tape->value(loss).item();
      if (!std::isfinite(value)) {
        throw DivergenceError("non-finite " + to_string(objective) + " loss at step " +
                              std::to_string(result.steps));
      }
      out.tape->backward(loss);
      for (std::size_t i = 0; i < params.size(); ++i) grads[i] = out.tape->grad_of(*params[i].param);
      clip_global_norm(grads, cfg.clip);
      opt.step(params, grads, lr_at(result.steps, total, cfg.lr, cfg.warmup));
      result.losses.push_back(value);
      ++result.steps;
    }
  }
  return result;
}

std::vector<int> predict(const Model& m, std::span<const Example> examples, int seq) {
  std::vector<int> out;
  for (const Batch& b : eval_batches(examples, seq)) {
    const auto p = argmax_rows(predict_logits(m, b));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

double accuracy(const Model& m, std::span<const Example> examples, int seq) {
  if (examples.empty()) return 0.0;
  const auto p = predict(m, examples, seq);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < p.size(); ++i) hits += p[i] == examples[i].label;
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

double mean_loss(const Model& m, const Task& task, Objective objective, const Model* teacher) {
  double total = 0.0;
  std::size_t count = 0;
  for (const Batch& b : eval_batches(task.train, task.seq)) {
    const ModelOutput out = forward(m, b);
    total += out.tape->value(objective_loss(out, b, objective, teacher)).item() * static_cast<double>(b.size);
    count += b.size;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

Model train_teacher(const Task& task, const ModelSpec& spec, const TrainConfig& cfg, std::uint64_t seed) {
  Model m = build_model(spec, uniform_precision(spec, QuantScheme::full()), {}, seed);
  train_stage(m, task, Objective::kTask, cfg);
  return m;
}

PipelineConfig PipelineConfig::paper_preset() {
  PipelineConfig c;
  c.stage1.lr = 5e-5;
  c.stage2.lr = 2e-5;
  c.stage3.lr = 2e-5;
  return c;
}

PipelineConfig PipelineConfig::desk(double lr_scale, std::size_t epochs) {
  PipelineConfig c = paper_preset();
  for (TrainConfig* t : {&c.stage1, &c.stage2, &c.stage3}) {
    t->lr *= lr_scale;
    t->epochs = epochs;
  }
  return c;
}

PrecisionMap ternary_precision(const ModelSpec& spec) {
  return uniform_precision(spec, QuantScheme::ternary(), QuantScheme::ternary(Granularity::kPerRow));
}

PrecisionMap binary_precision(const ModelSpec& spec, QuantKind kind) {
  return uniform_precision(spec, QuantScheme{kind, Granularity::kPerMatrix, 1},
                           QuantScheme{kind, Granularity::kPerRow, 1});
}

namespace {

TrainConfig seeded(TrainConfig t, std::uint64_t seed, std::uint64_t salt) {
  t.seed = mix(seed, salt);
  return t;
}

Model init_student(const Model& teacher, const Model* backbone, double width, const PrecisionMap& precision) {
  if (backbone == nullptr) return shrink_width(teacher, width, precision);
  if (backbone->spec.width != width) throw ConfigError("backbone width does not match the student width");
  return shrink_width(*backbone, width, precision);
}

}  // namespace

Model train_backbone(const Task& task, const Model& teacher, double width, const TrainConfig& cfg) {
  Model m = shrink_width(teacher, width, uniform_precision(teacher.spec, QuantScheme::full()));
  train_stage(m, task, Objective::kPrediction, cfg, &teacher);
  return m;
}

PipelineResult run_tws_pipeline(const Task& task, const Model& teacher, const PipelineConfig& cfg,
                                const Model* backbone) {
  ModelSpec half = teacher.spec;
  half.width = cfg.student_width;
  const PrecisionMap precision = cfg.student_precision ? *cfg.student_precision : ternary_precision(half);
  PipelineResult r;
  r.ternary = init_student(teacher, backbone, cfg.student_width, precision);
  r.ternary.act = cfg.act;
  if (r.ternary.act.kind == ActKind::kLsq && !task.train.empty()) {
    const std::size_t n = std::min(cfg.stage1.batch_size, task.train.size());
    calibrate_activations(r.ternary, make_batch(std::span(task.train).first(n), task.seq));
  }
  r.metrics["init_acc"] = accuracy(r.ternary, task.dev, task.seq);
  r.stage1 = train_stage(r.ternary, task, Objective::kIntermediate, seeded(cfg.stage1, cfg.seed, 11), &teacher);
  r.metrics["stage1_acc"] = accuracy(r.ternary, task.dev, task.seq);
  r.stage2 = train_stage(r.ternary, task, Objective::kPrediction, seeded(cfg.stage2, cfg.seed, 12), &teacher);
  r.metrics["ternary_acc"] = accuracy(r.ternary, task.dev, task.seq);
  r.binary = split_model(r.ternary);
  for (const WeightSlot* s : r.binary.slots()) {
    if (!s->is_pair()) continue;
    const Tensor sum = s->latent_sum();
    r.split_latent_error =
        std::max(r.split_latent_error, max_abs_diff(sum, r.ternary.slot(s->key).branches[0].latent.value));
  }
  r.metrics["split_acc"] = accuracy(r.binary, task.dev, task.seq);
  r.metrics["split_train_loss"] = mean_loss(r.binary, task, Objective::kPrediction, &teacher);
  r.stage3 = train_stage(r.binary, task, Objective::kPrediction, seeded(cfg.stage3, cfg.seed, 13), &teacher);
  r.metrics["final_acc"] = accuracy(r.binary, task.dev, task.seq);
  r.metrics["final_train_loss"] = mean_loss(r.binary, task, Objective::kPrediction, &teacher);
  return r;
}

Model train_quantized(const Task& task, const Model& teacher, double width, const PrecisionMap& precision,
                      const PipelineConfig& cfg, std::size_t epoch_factor,
                      std::map<std::string, double>* metrics, const Model* backbone) {
  Model m = init_student(teacher, backbone, width, precision);
  m.act = cfg.act;
  TrainConfig s1 = seeded(cfg.stage1, cfg.seed, 21);
  TrainConfig s2 = seeded(cfg.stage2, cfg.seed, 22);
  s1.epochs *= epoch_factor;
  s2.epochs *= epoch_factor;
  train_stage(m, task, Objective::kIntermediate, s1, &teacher);
  if (metrics) (*metrics)["stage1_acc"] = accuracy(m, task.dev, task.seq);
  train_stage(m, task, Objective::kPrediction, s2, &teacher);
  if (metrics) (*metrics)["final_acc"] = accuracy(m, task.dev, task.seq);
  return m;
}

Model run_bwn_baseline(const Task& task, const Model& teacher, const PipelineConfig& cfg,
                       std::map<std::string, double>* metrics) {
  return train_quantized(task, teacher, teacher.spec.width, binary_precision(teacher.spec), cfg, 2, metrics);
}

Model run_gradual_bwn(const Task& task, const Model& teacher, const Model& ternary,
                      const PipelineConfig& cfg, bool twn_scale) {
  Model m = ternary;
  set_precision(m, binary_precision(m.spec, twn_scale ? QuantKind::kBinaryTwnScale : QuantKind::kBinary));
  train_stage(m, task, Objective::kPrediction, seeded(cfg.stage3, cfg.seed, twn_scale ? 32 : 31), &teacher);
  return m;
}

}  // namespace tws
