#include "tws/experiment.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "tws/serialize.hpp"

namespace tws {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.spec.layers = 2;
  c.spec.hidden = 32;
  c.spec.heads = 4;
  c.spec.ffn = 64;
  c.spec.vocab = 64;
  c.spec.max_len = 16;
  c.teacher.lr = 2e-3;
  c.teacher.epochs = 15;
  c.backbone = c.teacher;
  c.backbone.epochs = 5;
  c.pipeline = PipelineConfig::desk(20.0, 1);
  return c;
}

void ExperimentConfig::validate() const {
  spec.validate();
  for (const TrainConfig* t : {&teacher, &pipeline.stage1, &pipeline.stage2, &pipeline.stage3}) t->validate();
  if (backbone.epochs > 0) backbone.validate();
  if (!(pipeline.student_width > 0.0 && pipeline.student_width <= 1.0)) {
    throw ConfigError("student_width must be in (0, 1]");
  }
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (task.kind == "tsv") {
    if (task.tsv_path.empty() || !std::filesystem::exists(task.tsv_path)) {
      throw ConfigError("tsv file not found: '" + task.tsv_path + "'");
    }
    if (!task.tsv.dev_path.empty() && !std::filesystem::exists(task.tsv.dev_path)) {
      throw ConfigError("tsv dev file not found: '" + task.tsv.dev_path + "'");
    }
    if (task.tsv.vocab > spec.vocab || task.tsv.seq > spec.max_len) {
      throw ConfigError("tsv vocab/seq exceed the model spec");
    }
  } else {
    task_kind_from_string(task.kind);
    if (task.synth.vocab > spec.vocab || task.synth.seq > spec.max_len) {
      throw ConfigError("task vocab/seq exceed the model spec");
    }
  }
}

json to_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size}, {"lr", t.lr},       {"epochs", t.epochs},
          {"warmup", t.warmup},         {"weight_decay", t.weight_decay}, {"clip", t.clip},
          {"beta1", t.beta1},           {"beta2", t.beta2}, {"eps", t.eps}, {"seed", t.seed}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig t) {
  reject_unknown(j, {"batch_size", "lr", "epochs", "warmup", "weight_decay", "clip", "beta1", "beta2", "eps", "seed"},
                 "train config");
  read(j, "batch_size", t.batch_size);
  read(j, "lr", t.lr);
  read(j, "epochs", t.epochs);
  read(j, "warmup", t.warmup);
  read(j, "weight_decay", t.weight_decay);
  read(j, "clip", t.clip);
  read(j, "beta1", t.beta1);
  read(j, "beta2", t.beta2);
  read(j, "eps", t.eps);
  read(j, "seed", t.seed);
  t.validate();
  return t;
}

json to_json(const ExperimentConfig& c) {
  json task = {{"kind", c.task.kind},
               {"seed", c.task.seed},
               {"vocab", c.task.synth.vocab},
               {"seq", c.task.synth.seq},
               {"train", c.task.synth.train},
               {"dev", c.task.synth.dev},
               {"tsv_path", c.task.tsv_path},
               {"text_columns", c.task.tsv.text_columns},
               {"label_column", c.task.tsv.label_column},
               {"tsv_vocab", c.task.tsv.vocab},
               {"tsv_seq", c.task.tsv.seq},
               {"hash_buckets", c.task.tsv.hash_buckets},
               {"dev_path", c.task.tsv.dev_path}};
  json pipeline = {{"activation", to_json(c.pipeline.act)},
                   {"student_width", c.pipeline.student_width},
                   {"stage1", to_json(c.pipeline.stage1)},
                   {"stage2", to_json(c.pipeline.stage2)},
                   {"stage3", to_json(c.pipeline.stage3)}};
  return {{"task", task},
          {"model", to_json(c.spec)},
          {"teacher", to_json(c.teacher)},
          {"backbone", to_json(c.backbone)},
          {"pipeline", pipeline},
          {"sensitivity_metric", to_string(c.metric)},
          {"scale_by_params", c.scale_by_params},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c = ExperimentConfig::desk();
  reject_unknown(j, {"task", "model", "teacher", "backbone", "pipeline", "sensitivity_metric", "scale_by_params",
                     "seeds", "output_dir"},
                 "config");
  try {
    if (j.contains("task")) {
      const json& t = j.at("task");
      reject_unknown(t, {"kind", "seed", "vocab", "seq", "train", "dev", "tsv_path", "text_columns", "label_column",
                         "tsv_vocab", "tsv_seq", "hash_buckets", "dev_path"},
                     "task");
      read(t, "kind", c.task.kind);
      read(t, "seed", c.task.seed);
      read(t, "vocab", c.task.synth.vocab);
      read(t, "seq", c.task.synth.seq);
      read(t, "train", c.task.synth.train);
      read(t, "dev", c.task.synth.dev);
      read(t, "tsv_path", c.task.tsv_path);
      read(t, "text_columns", c.task.tsv.text_columns);
      read(t, "label_column", c.task.tsv.label_column);
      read(t, "tsv_vocab", c.task.tsv.vocab);
      read(t, "tsv_seq", c.task.tsv.seq);
      read(t, "hash_buckets", c.task.tsv.hash_buckets);
      read(t, "dev_path", c.task.tsv.dev_path);
    }
    if (j.contains("model")) {
      json merged = to_json(c.spec);
      merged.update(j.at("model"));
      reject_unknown(merged, {"layers", "hidden", "heads", "ffn", "vocab", "max_len", "segments", "width", "classes",
                              "dropout", "init_std"},
                     "model");
      c.spec = spec_from_json(merged);
    }
    if (j.contains("teacher")) c.teacher = train_config_from_json(j.at("teacher"), c.teacher);
    if (j.contains("backbone")) c.backbone = train_config_from_json(j.at("backbone"), c.backbone);
    if (j.contains("pipeline")) {
      const json& p = j.at("pipeline");
      reject_unknown(p, {"activation", "student_width", "stage1", "stage2", "stage3"}, "pipeline");
      if (p.contains("activation")) c.pipeline.act = act_from_json(p.at("activation"));
      read(p, "student_width", c.pipeline.student_width);
      if (p.contains("stage1")) c.pipeline.stage1 = train_config_from_json(p.at("stage1"), c.pipeline.stage1);
      if (p.contains("stage2")) c.pipeline.stage2 = train_config_from_json(p.at("stage2"), c.pipeline.stage2);
      if (p.contains("stage3")) c.pipeline.stage3 = train_config_from_json(p.at("stage3"), c.pipeline.stage3);
    }
    if (j.contains("sensitivity_metric")) {
      c.metric = sensitivity_metric_from_string(j.at("sensitivity_metric").get<std::string>());
    }
    read(j, "scale_by_params", c.scale_by_params);
    read(j, "seeds", c.seeds);
    read(j, "output_dir", c.output_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  ExperimentConfig c = experiment_from_json(j);
  if (const char* dir = std::getenv("TWS_OUTPUT_DIR"); dir != nullptr && *dir != '\0') c.output_dir = dir;
  return c;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return hex64(fnv1a64(j.dump()));
}

Task make_task(const ExperimentConfig& c) {
  if (c.task.kind == "tsv") return ingest_tsv(c.task.tsv_path, c.task.tsv);
  return synth_task(task_kind_from_string(c.task.kind), c.task.seed, c.task.synth);
}

Model make_teacher(const Task& task, const ExperimentConfig& c) {
  ModelSpec spec = c.spec;
  spec.width = 1.0;
  spec.classes = task.classes;
  return train_teacher(task, spec, c.teacher, c.teacher.seed);
}

std::unique_ptr<Model> make_backbone(const Task& task, const Model& teacher, const ExperimentConfig& c) {
  if (c.backbone.epochs == 0) return nullptr;
  return std::make_unique<Model>(train_backbone(task, teacher, c.pipeline.student_width, c.backbone));
}

PrecisionMap sweep_precision(const ModelSpec& spec, int bits) {
  const QuantScheme s = QuantScheme::for_bits(bits);
  if (s.kind == QuantKind::kUniform || s.kind == QuantKind::kFull) return uniform_precision(spec, s, s);
  return uniform_precision(spec, s, QuantScheme::for_bits(bits, Granularity::kPerRow));
}

std::vector<SweepRow> sweep_bits(const Task& task, const Model& teacher, const std::vector<int>& bits,
                                 const PipelineConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  std::vector<SweepRow> rows;
  for (int b : bits) {
    SweepRow row;
    row.bits = b;
    const PrecisionMap p = sweep_precision(teacher.spec, b);
    for (std::uint64_t seed : seeds) {
      PipelineConfig pc = cfg;
      pc.seed = seed;
      const Model m = train_quantized(task, teacher, teacher.spec.width, p, pc, 1);
      row.samples.push_back(accuracy(m, task.dev, task.seq));
    }
    const GainStat g = summarize("", 0, row.samples);
    row.mean = g.mean;
    row.stddev = g.stddev;
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "bits,seeds,mean_acc,std_acc,samples\n";
  out.precision(6);
  out << std::fixed;
  for (const auto& r : rows) {
    out << r.bits << ',' << r.samples.size() << ',' << r.mean << ',' << r.stddev << ',';
    for (std::size_t i = 0; i < r.samples.size(); ++i) out << (i ? ";" : "") << r.samples[i];
    out << '\n';
  }
  return out.str();
}

Artifact write_artifact(const std::string& dir, const std::string& name, const std::string& content) {
  std::filesystem::create_directories(dir);
  const std::string path = (std::filesystem::path(dir) / name).string();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << content;
  if (!out) throw std::runtime_error("write failed: '" + path + "'");
  return {name, content.size(), hex64(fnv1a64(content))};
}

Artifact write_manifest(const std::string& dir, const std::string& command, const ExperimentConfig& c,
                        const std::vector<Artifact>& artifacts, const json& args) {
  json arts = json::array();
  for (const auto& a : artifacts) arts.push_back({{"name", a.name}, {"bytes", a.bytes}, {"fnv1a64", a.hash}});
  json cfg = to_json(c);
  cfg.erase("output_dir");
  const json m = {{"command", command},
                  {"args", args},
                  {"config", cfg},
                  {"config_hash", config_hash(c)},
                  {"seeds", c.seeds},
                  {"versions",
                   {{"tws", kVersion},
                    {"compiler", __VERSION__},
                    {"cxx_standard", __cplusplus},
                    {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                  std::to_string(EIGEN_MINOR_VERSION)},
                    {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                          std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                          std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
                  {"artifacts", arts}};
  return write_artifact(dir, "manifest.json", m.dump(2) + "\n");
}

}  // namespace tws
