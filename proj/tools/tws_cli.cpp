// Command-line driver: every subcommand writes its artifacts and a
// manifest.json into one run directory.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tws/accounting.hpp"
#include "tws/adaptive.hpp"
#include "tws/analysis.hpp"
#include "tws/checkpoint.hpp"
#include "tws/experiment.hpp"
#include "tws/pipeline.hpp"
#include "tws/splitting.hpp"

using namespace tws;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string teacher;
};

struct Run {
  std::string command;
  ExperimentConfig cfg;
  std::string dir;
  json args = json::object();
  std::vector<Artifact> artifacts;

  void write(const std::string& name, const std::string& content) {
    artifacts.push_back(write_artifact(dir, name, content));
  }
  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }
  void checkpoint(const std::string& name, const Model& m, const std::string& stage) {
    std::filesystem::create_directories(dir);
    const std::string path = (std::filesystem::path(dir) / name).string();
    save_checkpoint(path, m, stage);
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    const std::string bytes = os.str();
    artifacts.push_back({name, bytes.size(), hex64(fnv1a64(bytes))});
  }
  void finish() {
    write_manifest(dir, command, cfg, artifacts, args);
    std::printf("%s: wrote %zu artifacts to %s\n", command.c_str(), artifacts.size() + 1, dir.c_str());
  }
};

Run start(const std::string& command, const Common& c) {
  Run r;
  r.command = command;
  r.cfg = c.config.empty() ? ExperimentConfig::desk() : load_config(c.config);
  if (c.seed) r.cfg.seeds = {*c.seed};
  r.cfg.validate();
  r.dir = c.out.empty() ? (std::filesystem::path(r.cfg.output_dir) / command).string() : c.out;
  if (!c.teacher.empty()) r.args["teacher"] = c.teacher;
  return r;
}

Model load_model(const std::string& path) { return load_checkpoint(path).model; }

Model teacher_for(const Task& task, const Run& r, const Common& c) {
  if (!c.teacher.empty()) return load_model(c.teacher);
  return make_teacher(task, r.cfg);
}

PipelineConfig seeded(const PipelineConfig& base, std::uint64_t seed) {
  PipelineConfig pc = base;
  pc.seed = seed;
  return pc;
}

json metrics_json(const std::map<std::string, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

std::string loss_csv(const std::vector<std::pair<std::string, const StageResult*>>& stages) {
  std::ostringstream os;
  os.precision(17);
  os << "stage,step,loss\n";
  for (const auto& [name, s] : stages) {
    for (std::size_t i = 0; i < s->losses.size(); ++i) os << name << ',' << i << ',' << s->losses[i] << '\n';
  }
  return os.str();
}

std::vector<MatrixKey> parse_keys(const std::vector<std::string>& names) {
  std::vector<MatrixKey> keys;
  for (const auto& n : names) keys.push_back(matrix_key_from_string(n));
  return keys;
}

std::vector<Batch> leading_batches(const Task& task, std::size_t count, std::size_t size) {
  if (task.train.size() < count * size) throw std::invalid_argument("training set too small for the requested batches");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(make_batch(std::span(task.train).subspan(i * size, size), task.seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

void train_fp(const Common& c) {
  Run r = start("train-fp", c);
  const Task task = make_task(r.cfg);
  const Model teacher = make_teacher(task, r.cfg);
  r.write_json("metrics.json", {{"dev_acc", accuracy(teacher, task.dev, task.seq)},
                                {"train_loss", mean_loss(teacher, task, Objective::kTask)}});
  r.checkpoint("teacher.ckpt", teacher, "fp");
  r.finish();
}

void train_ternary(const Common& c) {
  Run r = start("train-ternary", c);
  const Task task = make_task(r.cfg);
  const Model teacher = teacher_for(task, r, c);
  const auto backbone = make_backbone(task, teacher, r.cfg);
  const PipelineConfig pc = seeded(r.cfg.pipeline, r.cfg.seeds.front());
  ModelSpec half = teacher.spec;
  half.width = pc.student_width;
  std::map<std::string, double> m;
  const Model tern = train_quantized(task, teacher, pc.student_width,
                                     pc.student_precision ? *pc.student_precision : ternary_precision(half), pc, 1,
                                     &m, backbone.get());
  r.write_json("metrics.json", metrics_json(m));
  r.checkpoint("ternary.ckpt", tern, "ternary");
  r.finish();
}

void split(const Common& c, const std::string& model_path) {
  Run r = start("split", c);
  r.args["model"] = model_path;
  const Task task = make_task(r.cfg);
  const Model tern = load_model(model_path);
  const Model bin = split_model(tern);
  double worst = 0.0;
  for (const Batch& b : eval_batches(task.dev, task.seq)) {
    worst = std::max(worst, max_abs_diff(predict_logits(tern, b), predict_logits(bin, b)));
  }
  r.write_json("metrics.json", {{"ternary_acc", accuracy(tern, task.dev, task.seq)},
                                {"split_acc", accuracy(bin, task.dev, task.seq)},
                                {"max_logit_diff", worst}});
  r.checkpoint("binary.ckpt", bin, "split");
  r.finish();
}

void finetune(const Common& c, const std::string& model_path) {
  Run r = start("finetune", c);
  r.args["model"] = model_path;
  const Task task = make_task(r.cfg);
  const Model teacher = teacher_for(task, r, c);
  Model m = load_model(model_path);
  const double before = accuracy(m, task.dev, task.seq);
  TrainConfig tc = r.cfg.pipeline.stage3;
  tc.seed = r.cfg.seeds.front();
  const StageResult s = train_stage(m, task, Objective::kPrediction, tc, &teacher);
  r.write_json("metrics.json", {{"acc_before", before}, {"acc_after", accuracy(m, task.dev, task.seq)}});
  r.write("losses.csv", loss_csv({{"finetune", &s}}));
  r.checkpoint("finetuned.ckpt", m, "finetuned");
  r.finish();
}

void pipeline(const Common& c) {
  Run r = start("pipeline", c);
  const Task task = make_task(r.cfg);
  const Model teacher = teacher_for(task, r, c);
  const auto backbone = make_backbone(task, teacher, r.cfg);
  json metrics = json::object();
  for (std::uint64_t seed : r.cfg.seeds) {
    const PipelineResult p = run_tws_pipeline(task, teacher, seeded(r.cfg.pipeline, seed), backbone.get());
    json m = metrics_json(p.metrics);
    m["split_latent_error"] = p.split_latent_error;
    metrics[std::to_string(seed)] = m;
    r.write("losses_seed" + std::to_string(seed) + ".csv",
            loss_csv({{"stage1", &p.stage1}, {"stage2", &p.stage2}, {"stage3", &p.stage3}}));
    if (seed == r.cfg.seeds.front()) r.checkpoint("binary.ckpt", p.binary, "finetuned");
  }
  r.write_json("metrics.json", metrics);
  r.finish();
}

void train_bwn(const Common& c) {
  Run r = start("train-bwn", c);
  const Task task = make_task(r.cfg);
  const Model teacher = teacher_for(task, r, c);
  json metrics = json::object();
  for (std::uint64_t seed : r.cfg.seeds) {
    std::map<std::string, double> m;
    run_bwn_baseline(task, teacher, seeded(r.cfg.pipeline, seed), &m);
    metrics[std::to_string(seed)] = metrics_json(m);
  }
  r.write_json("metrics.json", metrics);
  r.finish();
}

SensitivityReport sensitivity_report(const Run& r, const Task& task, const Model& teacher) {
  SensitivityConfig sc;
  sc.seeds = r.cfg.seeds;
  sc.pipeline = r.cfg.pipeline;
  sc.metric = r.cfg.metric;
  sc.scale_by_params = r.cfg.scale_by_params;
  const auto backbone = make_backbone(task, teacher, r.cfg);
  return measure_sensitivity(task, teacher, sc, backbone.get());
}

std::string gains_csv(const SensitivityReport& s) {
  std::ostringstream os;
  os.precision(17);
  os << "group,params,mean_gain,std_gain\n";
  auto row = [&](const GainStat& g) { os << g.name << ',' << g.params << ',' << g.mean << ',' << g.stddev << '\n'; };
  for (const auto& g : s.parts) row(g);
  for (const auto& g : s.layers) row(g);
  row(s.embedding);
  row(s.pooler);
  os << "matrix,u\n";
  for (std::size_t i = 0; i < s.keys.size(); ++i) os << to_string(s.keys[i]) << ',' << s.u[i] << '\n';
  return os.str();
}

void sensitivity(const Common& c) {
  Run r = start("sensitivity", c);
  const Task task = make_task(r.cfg);
  const Model teacher = teacher_for(task, r, c);
  const SensitivityReport s = sensitivity_report(r, task, teacher);
  r.write_json("sensitivity.json", to_json(s));
  r.write("sensitivity.csv", gains_csv(s));
  r.finish();
}

void plan(const Common& c, const std::string& sens_path, std::int64_t budget, const std::string& strategy,
          bool apply) {
  Run r = start("plan", c);
  r.args["budget"] = budget;
  r.args["strategy"] = strategy;
  r.args["apply"] = apply;
  const Task task = make_task(r.cfg);
  std::optional<Model> teacher;
  auto need_teacher = [&]() -> const Model& {
    if (!teacher) teacher = teacher_for(task, r, c);
    return *teacher;
  };
  SensitivityReport s;
  if (!sens_path.empty()) {
    r.args["sensitivity"] = sens_path;
    std::ifstream in(sens_path);
    if (!in) throw std::runtime_error("cannot read '" + sens_path + "'");
    s = sensitivity_from_json(json::parse(in));
  } else {
    s = sensitivity_report(r, task, need_teacher());
    r.write_json("sensitivity.json", to_json(s));
  }
  ModelSpec half = r.cfg.spec;
  half.width = r.cfg.pipeline.student_width;
  const SplitPlan p = make_plan(half, s.u, budget, plan_strategy_from_string(strategy), r.cfg.seeds.front());
  r.write_json("plan.json", to_json(p));
  if (apply) {
    const auto backbone = make_backbone(task, need_teacher(), r.cfg);
    json metrics = json::object();
    for (std::uint64_t seed : r.cfg.seeds) {
      const PipelineResult res =
          apply_plan(task, need_teacher(), p, seeded(r.cfg.pipeline, seed), backbone.get());
      metrics[std::to_string(seed)] = metrics_json(res.metrics);
    }
    r.write_json("metrics.json", metrics);
  }
  r.finish();
}

void sweep(const Common& c, const std::vector<int>& bits) {
  Run r = start("sweep-bits", c);
  r.args["bits"] = bits;
  const Task task = make_task(r.cfg);
  const Model teacher = teacher_for(task, r, c);
  r.write("sweep.csv", sweep_csv(sweep_bits(task, teacher, bits, r.cfg.pipeline, r.cfg.seeds)));
  r.finish();
}

void landscape(const Common& c, const std::string& model_path, const std::vector<std::string>& a,
               const std::vector<std::string>& b, std::size_t batch_size) {
  Run r = start("landscape", c);
  r.args["model"] = model_path;
  r.args["a"] = a;
  r.args["b"] = b;
  r.args["batch_size"] = batch_size;
  const Task task = make_task(r.cfg);
  const Model m = model_path.empty() ? teacher_for(task, r, c) : load_model(model_path);
  const Batch batch = leading_batches(task, 1, batch_size).front();
  r.write("landscape.csv", landscape_grid(m, parse_keys(a), parse_keys(b), batch).csv());
  r.finish();
}

void steepness(const Common& c, const std::string& tern_path, const std::string& bin_path, std::size_t batches,
               std::size_t iterations) {
  Run r = start("steepness", c);
  r.args["ternary"] = tern_path;
  r.args["binary"] = bin_path;
  r.args["batches"] = batches;
  r.args["iterations"] = iterations;
  const Task task = make_task(r.cfg);
  const Model teacher = teacher_for(task, r, c);
  const PipelineConfig pc = seeded(r.cfg.pipeline, r.cfg.seeds.front());
  auto student = [&](const std::string& path, int bits) {
    if (!path.empty()) return load_model(path);
    return train_quantized(task, teacher, teacher.spec.width, sweep_precision(teacher.spec, bits), pc, 1);
  };
  const Model tern = student(tern_path, 2);
  const Model bin = student(bin_path, 1);
  PowerOptions opt;
  opt.max_iterations = iterations;
  const SteepnessReport rep = steepness_report(teacher, tern, bin, leading_batches(task, batches, 32), opt);
  r.write("steepness.csv", rep.csv());
  std::ostringstream os;
  os.precision(17);
  os << "model,part,layer,batch,lambda,converged,loss_increase,noise_sq,grad_norm,bound_holds\n";
  for (const auto& e : rep.entries) {
    os << e.model << ',' << to_string(e.part) << ',' << e.layer << ',' << e.batch << ',' << e.lambda << ','
       << e.converged << ',' << e.loss_increase << ',' << e.noise_sq << ',' << e.grad_norm << ',' << e.bound_holds
       << '\n';
  }
  r.write("steepness_entries.csv", os.str());
  r.finish();
}

void account(const Common& c, bool bert, const std::string& weights, double width, int act_bits, bool split_all,
             int seq) {
  Run r = start("account", c);
  r.args["bert"] = bert;
  r.args["weights"] = weights;
  r.args["width"] = width;
  r.args["act_bits"] = act_bits;
  r.args["split"] = split_all;
  r.args["seq"] = seq;
  CostInput in;
  in.spec = bert ? ModelSpec::bert_base() : r.cfg.spec;
  in.spec.width = width;
  in.act_bits = act_bits;
  if (weights == "fp") {
    in.precision = uniform_precision(in.spec, QuantScheme::full());
  } else if (weights == "ternary") {
    in.precision = ternary_precision(in.spec);
  } else if (weights == "binary") {
    in.precision = binary_precision(in.spec);
  } else {
    throw std::invalid_argument("--weights must be fp, ternary or binary");
  }
  if (split_all) {
    if (weights != "binary") throw std::invalid_argument("--split needs binary weights");
    for (const auto& k : splittable_matrices(in.spec)) in.split.insert(k);
  }
  const CostReport rep = cost_report(in, seq);
  r.write("cost.csv", rep.csv());
  r.write_json("cost.json", {{"bytes", model_size_bytes(in)},
                             {"megabytes", model_size_bytes(in) / kMiB},
                             {"flops", model_flops(in, seq)}});
  r.finish();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ternary weight splitting experiments"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed = 0;
  app.add_option("--config", common.config, "JSON experiment config (default: desk settings)");
  app.add_option("--out", common.out, "Run directory (default: <output_dir>/<command>)");
  auto* seed_opt = app.add_option("--seed", seed, "Run this single seed instead of the configured seeds");
  app.add_option("--teacher", common.teacher, "Teacher checkpoint; trained from the config when omitted");

  std::string model_path, sens_path, strategy = "maximal", tern_path, bin_path, weights = "binary";
  std::int64_t budget = 0;
  bool apply = false, bert = false, split_all = false;
  std::vector<int> bits{32, 8, 4, 3, 2, 1};
  std::vector<std::string> group_a{"layer0.query", "layer0.key"}, group_b{"layer1.ffn_mid"};
  std::size_t batch_size = 32, batches = 2, iterations = 100;
  double width = 1.0;
  int act_bits = 8, seq = 128;

  auto* c_fp = app.add_subcommand("train-fp", "Train the full-precision teacher");
  auto* c_tern = app.add_subcommand("train-ternary", "Distill the half-width ternary student");
  auto* c_split = app.add_subcommand("split", "Split a ternary checkpoint into binary pairs");
  c_split->add_option("--model", model_path, "Ternary checkpoint")->required();
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune a split checkpoint");
  c_ft->add_option("--model", model_path, "Split checkpoint")->required();
  auto* c_pipe = app.add_subcommand("pipeline", "Ternary training, split and fine-tuning");
  auto* c_bwn = app.add_subcommand("train-bwn", "Direct binary baseline with doubled epochs");
  auto* c_sens = app.add_subcommand("sensitivity", "Leave-one-out sensitivity of the binary student");
  auto* c_plan = app.add_subcommand("plan", "Choose matrices to split under a byte budget");
  c_plan->add_option("--budget", budget, "Bytes available above the all-binary model")->required();
  c_plan->add_option("--sensitivity", sens_path, "sensitivity.json; measured when omitted");
  c_plan->add_option("--strategy", strategy, "maximal, minimal or random");
  c_plan->add_flag("--apply", apply, "Train and split the planned model");
  auto* c_sweep = app.add_subcommand("sweep-bits", "Accuracy against weight bit-width");
  c_sweep->add_option("--bits", bits, "Comma-separated bit-widths")->delimiter(',');
  auto* c_land = app.add_subcommand("landscape", "Loss surface over two perturbation directions");
  c_land->add_option("--model", model_path, "Checkpoint; the teacher when omitted");
  c_land->add_option("--a", group_a, "First matrix group")->delimiter(',');
  c_land->add_option("--b", group_b, "Second matrix group")->delimiter(',');
  c_land->add_option("--batch-size", batch_size, "Training examples in the evaluation batch");
  auto* c_steep = app.add_subcommand("steepness", "Top Hessian eigenvalue per part");
  c_steep->add_option("--ternary", tern_path, "Full-width ternary checkpoint; trained when omitted");
  c_steep->add_option("--binary", bin_path, "Full-width binary checkpoint; trained when omitted");
  c_steep->add_option("--batches", batches, "Number of 32-example batches");
  c_steep->add_option("--iterations", iterations, "Power iterations");
  auto* c_acc = app.add_subcommand("account", "Model size and FLOPs");
  c_acc->add_flag("--bert", bert, "Use BERT-base dimensions instead of the config spec");
  c_acc->add_option("--weights", weights, "fp, ternary or binary");
  c_acc->add_option("--width", width, "Width multiplier");
  c_acc->add_option("--act-bits", act_bits, "Activation bits (32 for none)");
  c_acc->add_flag("--split", split_all, "Every matrix is a split pair");
  c_acc->add_option("--seq", seq, "Sequence length for FLOPs");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) common.seed = seed;

  try {
    if (*c_fp) train_fp(common);
    if (*c_tern) train_ternary(common);
    if (*c_split) split(common, model_path);
    if (*c_ft) finetune(common, model_path);
    if (*c_pipe) pipeline(common);
    if (*c_bwn) train_bwn(common);
    if (*c_sens) sensitivity(common);
    if (*c_plan) plan(common, sens_path, budget, strategy, apply);
    if (*c_sweep) sweep(common, bits);
    if (*c_land) landscape(common, model_path, group_a, group_b, batch_size);
    if (*c_steep) steepness(common, tern_path, bin_path, batches, iterations);
    if (*c_acc) account(common, bert, weights, width, act_bits, split_all, seq);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
