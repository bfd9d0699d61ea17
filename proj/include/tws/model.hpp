#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tws/autograd.hpp"
#include "tws/quantizers.hpp"
#include "tws/tensor.hpp"

namespace tws {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelSpec {
  int layers = 4;
  int hidden = 128;
  int heads = 4;
  int ffn = 512;
  int vocab = 1024;
  int max_len = 32;
  int segments = 0;  // token-type rows appended to the embedding table
  double width = 1.0;
  int classes = 2;
  double dropout = 0.1;
  double init_std = 0.02;

  // Width scaling applies to attention heads and FFN units only.
  int active_heads() const;
  int active_ffn() const;
  int head_dim() const { return hidden / heads; }
  int attn_dim() const { return active_heads() * head_dim(); }
  int embedding_rows() const { return vocab + max_len + segments; }
  void validate() const;
  bool operator==(const ModelSpec&) const = default;

  static ModelSpec bert_base();
};

enum class Part { kQueryKey, kValue, kAttnOut, kFfnMid, kFfnOut, kEmbedding, kPooler };
inline constexpr Part kTransformerParts[] = {Part::kQueryKey, Part::kValue, Part::kAttnOut,
                                             Part::kFfnMid, Part::kFfnOut};

// Individual splittable matrices. Query and key both belong to the MHA-QK part.
enum class Slot { kEmbedding, kQuery, kKey, kValue, kAttnOut, kFfnMid, kFfnOut, kPooler };

std::string to_string(Part p);
Part part_from_string(const std::string& s);
Part part_of(Slot s);

struct PartTag {
  Part part = Part::kQueryKey;
  int layer = -1;  // -1 for embedding and pooler
  auto operator<=>(const PartTag&) const = default;
};
std::string to_string(const PartTag& t);
PartTag part_tag_from_string(const std::string& s);

struct MatrixKey {
  Slot slot = Slot::kEmbedding;
  int layer = -1;
  auto operator<=>(const MatrixKey&) const = default;
  PartTag tag() const { return {part_of(slot), layer}; }
};
std::string to_string(const MatrixKey& k);
MatrixKey matrix_key_from_string(const std::string& s);

// Canonical order: embedding, then per layer query, key, value, attn_out,
// ffn_mid, ffn_out, then pooler.
std::vector<MatrixKey> splittable_matrices(const ModelSpec& spec);
// (rows, cols) of a splittable matrix at the spec's width.
std::pair<std::size_t, std::size_t> matrix_shape(const ModelSpec& spec, const MatrixKey& k);

using PrecisionMap = std::map<MatrixKey, QuantScheme>;

// Transformer and pooler matrices get `body` (per-matrix); the embedding gets
// `embedding` with per-row granularity.
PrecisionMap uniform_precision(const ModelSpec& spec, QuantScheme body, QuantScheme embedding);
PrecisionMap uniform_precision(const ModelSpec& spec, QuantScheme scheme);

enum class ActKind { kNone, kMinMax, kLsq };
std::string to_string(ActKind k);
ActKind act_kind_from_string(const std::string& s);

struct ActivationQuant {
  ActKind kind = ActKind::kNone;
  int bits = 8;
  bool operator==(const ActivationQuant&) const = default;
};

struct WeightBranch {
  QuantScheme scheme;
  Parameter latent;
};

// Single matrix or split pair; a pair computes x*W1 + x*W2.
struct WeightSlot {
  MatrixKey key;
  std::vector<WeightBranch> branches;

  bool is_pair() const { return branches.size() == 2; }
  bool quantized() const;
  // Latent sum over branches.
  Tensor latent_sum() const;
  // Quantized image summed over branches.
  Tensor effective_weight() const;
};

struct ActSite {
  std::string name;
  bool is_signed = true;
  bool calibrated = false;
  Parameter step;  // LSQ step, shape {1}
};

struct QuantLinear {
  WeightSlot weight;
  Parameter bias;
  ActSite input;
};

struct LayerNormParams {
  Parameter gain;
  Parameter bias;
};

struct EncoderLayer {
  QuantLinear query, key, value, attn_out, ffn_mid, ffn_out;
  ActSite q_act, k_act, prob_act, v_act;
  LayerNormParams attn_ln, ffn_ln;
};

struct EmbeddingBlock {
  WeightSlot table;  // rows: vocab tokens, then positions, then segments
  LayerNormParams ln;
};

struct ParamRef {
  Parameter* param = nullptr;
  bool decay = false;   // weight decay applies (matrices, not biases/LN)
  bool latent = false;  // splittable latent matrix kept on the latent grid
  bool positive = false;  // LSQ step, kept strictly positive
};

struct Model {
  ModelSpec spec;
  ActivationQuant act;
  EmbeddingBlock embedding;
  std::vector<EncoderLayer> layers;
  QuantLinear pooler;
  Parameter cls_weight;
  Parameter cls_bias;

  std::vector<ParamRef> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<WeightSlot*> slots();
  std::vector<const WeightSlot*> slots() const;
  WeightSlot& slot(const MatrixKey& k);
  const WeightSlot& slot(const MatrixKey& k) const;
  std::vector<ActSite*> act_sites();
  PrecisionMap precision() const;
  std::size_t parameter_count() const;
  bool any_quantized() const;
};

// Configuration errors when `precision` misses a splittable matrix, names an
// unknown one, or uses per-row granularity outside the embedding.
Model build_model(const ModelSpec& spec, const PrecisionMap& precision, const ActivationQuant& act,
                  std::uint64_t seed);

// Copies `src` into a model at `width`, keeping the first heads and FFN units
// (embedding, pooler, LN and classifier unchanged). Precision is reassigned.
Model shrink_width(const Model& src, double width, const PrecisionMap& precision);

// Reassigns schemes on single (unsplit) matrices; latent weights unchanged.
void set_precision(Model& m, const PrecisionMap& precision);

// Parameter groups: the five Transformer parts per layer plus embedding and
// pooler. Each group lists its splittable matrices.
std::map<PartTag, std::vector<MatrixKey>> parameters_by_tag(const ModelSpec& spec);

struct Batch {
  std::size_t size = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;           // size * seq, row-major
  std::vector<std::size_t> lengths;  // valid positions per sample
  std::vector<int> labels;           // optional, size entries
};

struct ForwardOptions {
  bool train = false;
  std::uint64_t dropout_seed = 0;
  // Uncalibrated LSQ sites take their initial step from this batch instead
  // of raising QuantStateError.
  bool calibrate = false;
};

struct Intermediates {
  Var embedding;
  std::vector<Var> mha;
  std::vector<Var> ffn;
};

struct ModelOutput {
  std::unique_ptr<Tape> tape;
  Var logits;
  Intermediates inter;
  std::vector<std::pair<std::string, double>> calibration;  // site name -> step
  std::size_t quantized_weight_matmuls = 0;
  std::size_t weight_act_sites = 0;     // quantizers on inputs of weight matmuls
  std::size_t attention_act_sites = 0;  // quantizers on q, k, probs, v

  const Tensor& logits_value() const { return tape->value(logits); }
};

ModelOutput forward(const Model& m, const Batch& batch, const ForwardOptions& opt = {});

// Eval-mode logits.
Tensor predict_logits(const Model& m, const Batch& batch);
std::vector<int> argmax_rows(const Tensor& logits);

// Sets every uncalibrated LSQ step from one forward pass over `batch`.
void calibrate_activations(Model& m, const Batch& batch);

}  // namespace tws
