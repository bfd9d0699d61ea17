#include "tws/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace tws {

namespace {

bool integral(double v) { return std::abs(v - std::nearbyint(v)) < 1e-9; }

const char* slot_name(Slot s) {
  switch (s) {
    case Slot::kEmbedding: return "embedding";
    case Slot::kQuery: return "query";
    case Slot::kKey: return "key";
    case Slot::kValue: return "value";
    case Slot::kAttnOut: return "attn_out";
    case Slot::kFfnMid: return "ffn_mid";
    case Slot::kFfnOut: return "ffn_out";
    case Slot::kPooler: return "pooler";
  }
  return "?";
}

constexpr Slot kLayerSlots[] = {Slot::kQuery,   Slot::kKey,    Slot::kValue,
                                Slot::kAttnOut, Slot::kFfnMid, Slot::kFfnOut};

// "layer12.rest" -> (12, "rest"); returns -1 when there is no layer prefix.
int split_layer_prefix(const std::string& s, std::string& rest) {
  if (s.rfind("layer", 0) != 0) {
    rest = s;
    return -1;
  }
  const auto dot = s.find('.');
  if (dot == std::string::npos || dot == 5) throw std::invalid_argument("malformed name '" + s + "'");
  std::size_t used = 0;
  const int layer = std::stoi(s.substr(5, dot - 5), &used);
  if (used != dot - 5 || layer < 0) throw std::invalid_argument("malformed name '" + s + "'");
  rest = s.substr(dot + 1);
  return layer;
}

Parameter make_param(std::string name, Tensor value) { return Parameter{std::move(name), std::move(value)}; }

Tensor normal_matrix(std::size_t r, std::size_t c, double std_dev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std_dev);
  Tensor t({r, c});
  for (auto& v : t.span()) v = dist(rng);
  snap_latent(t);
  return t;
}

WeightSlot make_slot(const ModelSpec& spec, const MatrixKey& key, const QuantScheme& scheme,
                     std::mt19937_64& rng) {
  const auto [r, c] = matrix_shape(spec, key);
  WeightSlot slot;
  slot.key = key;
  slot.branches.push_back(
      {scheme, make_param(to_string(key) + ".weight", normal_matrix(r, c, spec.init_std, rng))});
  return slot;
}

ActSite make_site(std::string name, bool is_signed) {
  ActSite s;
  s.name = std::move(name);
  s.is_signed = is_signed;
  s.step = make_param(s.name + ".step", Tensor({1}, 1.0));
  return s;
}

QuantLinear make_linear(const ModelSpec& spec, const MatrixKey& key, const QuantScheme& scheme,
                        std::mt19937_64& rng) {
  QuantLinear lin;
  lin.weight = make_slot(spec, key, scheme, rng);
  const std::size_t out = matrix_shape(spec, key).second;
  lin.bias = make_param(to_string(key) + ".bias", Tensor({1, out}));
  lin.input = make_site(to_string(key) + ".input", true);
  return lin;
}

LayerNormParams make_ln(const std::string& prefix, std::size_t width) {
  return {make_param(prefix + ".gain", Tensor({1, width}, 1.0)),
          make_param(prefix + ".bias", Tensor({1, width}))};
}

void check_precision(const ModelSpec& spec, const PrecisionMap& precision) {
  const auto keys = splittable_matrices(spec);
  for (const auto& k : keys) {
    const auto it = precision.find(k);
    if (it == precision.end()) throw ConfigError("precision map misses matrix " + to_string(k));
    try {
      it->second.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(to_string(k) + ": " + e.what());
    }
    if (it->second.granularity == Granularity::kPerRow && k.slot != Slot::kEmbedding) {
      throw ConfigError("per-row granularity is only allowed for the embedding, not " + to_string(k));
    }
  }
  if (precision.size() != keys.size()) throw ConfigError("precision map names unknown matrices");
}

template <typename Fn>
void for_each_linear(EncoderLayer& l, Fn&& fn) {
  for (QuantLinear* lin : {&l.query, &l.key, &l.value, &l.attn_out, &l.ffn_mid, &l.ffn_out}) fn(*lin);
}

template <typename Fn>
void for_each_linear(const EncoderLayer& l, Fn&& fn) {
  for (const QuantLinear* lin : {&l.query, &l.key, &l.value, &l.attn_out, &l.ffn_mid, &l.ffn_out}) {
    fn(*lin);
  }
}

QuantLinear& linear_for(EncoderLayer& l, Slot s) {
  switch (s) {
    case Slot::kQuery: return l.query;
    case Slot::kKey: return l.key;
    case Slot::kValue: return l.value;
    case Slot::kAttnOut: return l.attn_out;
    case Slot::kFfnMid: return l.ffn_mid;
    case Slot::kFfnOut: return l.ffn_out;
    default: break;
  }
  throw std::invalid_argument("slot is not a layer matrix");
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelSpec

int ModelSpec::active_heads() const { return static_cast<int>(std::nearbyint(heads * width)); }
int ModelSpec::active_ffn() const { return static_cast<int>(std::nearbyint(ffn * width)); }

void ModelSpec::validate() const {
  if (layers < 1 || hidden < 1 || heads < 1 || ffn < 1 || vocab < 1 || max_len < 1 || classes < 1 ||
      segments < 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (hidden % heads != 0) throw ConfigError("hidden size must be divisible by the head count");
  if (!(width > 0.0 && width <= 1.0)) throw ConfigError("width multiplier must be in (0, 1]");
  if (!integral(heads * width) || active_heads() < 1) {
    throw ConfigError("width multiplier must keep a whole number of heads");
  }
  if (!integral(ffn * width) || active_ffn() < 1) {
    throw ConfigError("width multiplier must keep a whole number of FFN units");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

ModelSpec ModelSpec::bert_base() {
  ModelSpec s;
  s.layers = 12;
  s.hidden = 768;
  s.heads = 12;
  s.ffn = 3072;
  s.vocab = 30522;
  s.max_len = 512;
  s.segments = 2;
  s.classes = 2;
  return s;
}

// ---------------------------------------------------------------------------
// Names

std::string to_string(Part p) {
  switch (p) {
    case Part::kQueryKey: return "mha-qk";
    case Part::kValue: return "mha-v";
    case Part::kAttnOut: return "mha-o";
    case Part::kFfnMid: return "ffn-mid";
    case Part::kFfnOut: return "ffn-out";
    case Part::kEmbedding: return "embedding";
    case Part::kPooler: return "pooler";
  }
  return "?";
}

Part part_from_string(const std::string& s) {
  for (Part p : {Part::kQueryKey, Part::kValue, Part::kAttnOut, Part::kFfnMid, Part::kFfnOut,
                 Part::kEmbedding, Part::kPooler}) {
    if (to_string(p) == s) return p;
  }
  throw std::invalid_argument("unknown part '" + s + "'");
}

Part part_of(Slot s) {
  switch (s) {
    case Slot::kEmbedding: return Part::kEmbedding;
    case Slot::kQuery:
    case Slot::kKey: return Part::kQueryKey;
    case Slot::kValue: return Part::kValue;
    case Slot::kAttnOut: return Part::kAttnOut;
    case Slot::kFfnMid: return Part::kFfnMid;
    case Slot::kFfnOut: return Part::kFfnOut;
    case Slot::kPooler: return Part::kPooler;
  }
  return Part::kEmbedding;
}

std::string to_string(const PartTag& t) {
  if (t.layer < 0) return to_string(t.part);
  return "layer" + std::to_string(t.layer) + "." + to_string(t.part);
}

PartTag part_tag_from_string(const std::string& s) {
  std::string rest;
  const int layer = split_layer_prefix(s, rest);
  PartTag t{part_from_string(rest), layer};
  const bool global = t.part == Part::kEmbedding || t.part == Part::kPooler;
  if (global != (layer < 0)) throw std::invalid_argument("malformed part tag '" + s + "'");
  return t;
}

std::string to_string(const MatrixKey& k) {
  if (k.layer < 0) return slot_name(k.slot);
  return "layer" + std::to_string(k.layer) + "." + slot_name(k.slot);
}

MatrixKey matrix_key_from_string(const std::string& s) {
  std::string rest;
  const int layer = split_layer_prefix(s, rest);
  for (Slot slot : {Slot::kEmbedding, Slot::kQuery, Slot::kKey, Slot::kValue, Slot::kAttnOut,
                    Slot::kFfnMid, Slot::kFfnOut, Slot::kPooler}) {
    if (rest != slot_name(slot)) continue;
    const bool global = slot == Slot::kEmbedding || slot == Slot::kPooler;
    if (global != (layer < 0)) break;
    return {slot, layer};
  }
  throw std::invalid_argument("unknown matrix '" + s + "'");
}

std::vector<MatrixKey> splittable_matrices(const ModelSpec& spec) {
  std::vector<MatrixKey> keys;
  keys.push_back({Slot::kEmbedding, -1});
  for (int l = 0; l < spec.layers; ++l) {
    for (Slot s : kLayerSlots) keys.push_back({s, l});
  }
  keys.push_back({Slot::kPooler, -1});
  return keys;
}

std::pair<std::size_t, std::size_t> matrix_shape(const ModelSpec& spec, const MatrixKey& k) {
  const auto h = static_cast<std::size_t>(spec.hidden);
  const auto a = static_cast<std::size_t>(spec.attn_dim());
  const auto f = static_cast<std::size_t>(spec.active_ffn());
  switch (k.slot) {
    case Slot::kEmbedding: return {static_cast<std::size_t>(spec.embedding_rows()), h};
    case Slot::kQuery:
    case Slot::kKey:
    case Slot::kValue: return {h, a};
    case Slot::kAttnOut: return {a, h};
    case Slot::kFfnMid: return {h, f};
    case Slot::kFfnOut: return {f, h};
    case Slot::kPooler: return {h, h};
  }
  return {0, 0};
}

PrecisionMap uniform_precision(const ModelSpec& spec, QuantScheme body, QuantScheme embedding) {
  if (embedding.quantized() && embedding.kind != QuantKind::kUniform) {
    embedding.granularity = Granularity::kPerRow;
  }
  PrecisionMap map;
  for (const auto& k : splittable_matrices(spec)) map[k] = k.slot == Slot::kEmbedding ? embedding : body;
  return map;
}

PrecisionMap uniform_precision(const ModelSpec& spec, QuantScheme scheme) {
  return uniform_precision(spec, scheme, scheme);
}

std::string to_string(ActKind k) {
  switch (k) {
    case ActKind::kNone: return "none";
    case ActKind::kMinMax: return "minmax";
    case ActKind::kLsq: return "lsq";
  }
  return "?";
}

ActKind act_kind_from_string(const std::string& s) {
  if (s == "none") return ActKind::kNone;
  if (s == "minmax") return ActKind::kMinMax;
  if (s == "lsq") return ActKind::kLsq;
  throw std::invalid_argument("unknown activation quantizer '" + s + "'");
}

// ---------------------------------------------------------------------------
// WeightSlot

bool WeightSlot::quantized() const {
  return std::any_of(branches.begin(), branches.end(), [](const WeightBranch& b) { return b.scheme.quantized(); });
}

Tensor WeightSlot::latent_sum() const {
  Tensor out = branches.at(0).latent.value;
  for (std::size_t i = 1; i < branches.size(); ++i) out += branches[i].latent.value;
  return out;
}

Tensor WeightSlot::effective_weight() const {
  Tensor out = quantize_weight(branches.at(0).latent.value, branches[0].scheme);
  for (std::size_t i = 1; i < branches.size(); ++i) {
    out += quantize_weight(branches[i].latent.value, branches[i].scheme);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  const bool lsq = act.kind == ActKind::kLsq;
  auto add_slot = [&](WeightSlot& s) {
    for (auto& b : s.branches) out.push_back({&b.latent, true, true, false});
  };
  auto add_site = [&](ActSite& s) {
    if (lsq) out.push_back({&s.step, false, false, true});
  };
  auto add_linear = [&](QuantLinear& lin) {
    add_slot(lin.weight);
    out.push_back({&lin.bias, false, false, false});
    add_site(lin.input);
  };
  auto add_ln = [&](LayerNormParams& ln) {
    out.push_back({&ln.gain, false, false, false});
    out.push_back({&ln.bias, false, false, false});
  };
  add_slot(embedding.table);
  add_ln(embedding.ln);
  for (auto& l : layers) {
    for_each_linear(l, add_linear);
    for (ActSite* s : {&l.q_act, &l.k_act, &l.prob_act, &l.v_act}) add_site(*s);
    add_ln(l.attn_ln);
    add_ln(l.ffn_ln);
  }
  add_linear(pooler);
  out.push_back({&cls_weight, true, false, false});
  out.push_back({&cls_bias, false, false, false});
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  for (const ParamRef& r : const_cast<Model*>(this)->parameters()) out.push_back(r.param);
  return out;
}

std::vector<WeightSlot*> Model::slots() {
  std::vector<WeightSlot*> out{&embedding.table};
  for (auto& l : layers) for_each_linear(l, [&](QuantLinear& lin) { out.push_back(&lin.weight); });
  out.push_back(&pooler.weight);
  return out;
}

std::vector<const WeightSlot*> Model::slots() const {
  std::vector<const WeightSlot*> out;
  for (WeightSlot* s : const_cast<Model*>(this)->slots()) out.push_back(s);
  return out;
}

WeightSlot& Model::slot(const MatrixKey& k) {
  if (k.slot == Slot::kEmbedding && k.layer < 0) return embedding.table;
  if (k.slot == Slot::kPooler && k.layer < 0) return pooler.weight;
  if (k.layer < 0 || k.layer >= static_cast<int>(layers.size())) {
    throw std::out_of_range("no matrix " + to_string(k));
  }
  return linear_for(layers[static_cast<std::size_t>(k.layer)], k.slot).weight;
}

const WeightSlot& Model::slot(const MatrixKey& k) const { return const_cast<Model*>(this)->slot(k); }

std::vector<ActSite*> Model::act_sites() {
  std::vector<ActSite*> out;
  for (auto& l : layers) {
    for_each_linear(l, [&](QuantLinear& lin) { out.push_back(&lin.input); });
    for (ActSite* s : {&l.q_act, &l.k_act, &l.prob_act, &l.v_act}) out.push_back(s);
  }
  out.push_back(&pooler.input);
  return out;
}

PrecisionMap Model::precision() const {
  PrecisionMap map;
  for (const WeightSlot* s : slots()) map[s->key] = s->branches.at(0).scheme;
  return map;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) {
    if (p->name.ends_with(".step")) continue;
    n += p->value.size();
  }
  return n;
}

bool Model::any_quantized() const {
  const auto all = slots();
  return std::any_of(all.begin(), all.end(), [](const WeightSlot* s) { return s->quantized(); });
}

Model build_model(const ModelSpec& spec, const PrecisionMap& precision, const ActivationQuant& act,
                  std::uint64_t seed) {
  spec.validate();
  check_precision(spec, precision);
  if (act.kind != ActKind::kNone && (act.bits < 2 || act.bits > 16)) {
    throw ConfigError("activation bits must be in 2..16");
  }
  std::mt19937_64 rng(seed);
  Model m;
  m.spec = spec;
  m.act = act;
  const auto h = static_cast<std::size_t>(spec.hidden);
  const MatrixKey emb{Slot::kEmbedding, -1};
  m.embedding.table = make_slot(spec, emb, precision.at(emb), rng);
  m.embedding.ln = make_ln("embedding.ln", h);
  for (int l = 0; l < spec.layers; ++l) {
    EncoderLayer layer;
    for (Slot s : kLayerSlots) {
      const MatrixKey key{s, l};
      linear_for(layer, s) = make_linear(spec, key, precision.at(key), rng);
    }
    const std::string prefix = "layer" + std::to_string(l);
    layer.q_act = make_site(prefix + ".q_act", true);
    layer.k_act = make_site(prefix + ".k_act", true);
    layer.prob_act = make_site(prefix + ".prob_act", false);
    layer.v_act = make_site(prefix + ".v_act", true);
    layer.attn_ln = make_ln(prefix + ".attn_ln", h);
    layer.ffn_ln = make_ln(prefix + ".ffn_ln", h);
    m.layers.push_back(std::move(layer));
  }
  const MatrixKey pool{Slot::kPooler, -1};
  m.pooler = make_linear(spec, pool, precision.at(pool), rng);
  std::normal_distribution<double> dist(0.0, spec.init_std);
  m.cls_weight = make_param("classifier.weight", Tensor({h, static_cast<std::size_t>(spec.classes)}));
  for (auto& v : m.cls_weight.value.span()) v = dist(rng);
  m.cls_bias = make_param("classifier.bias", Tensor({1, static_cast<std::size_t>(spec.classes)}));
  return m;
}

void set_precision(Model& m, const PrecisionMap& precision) {
  check_precision(m.spec, precision);
  for (WeightSlot* s : m.slots()) {
    if (s->is_pair()) throw ConfigError("cannot reassign precision of split matrix " + to_string(s->key));
    s->branches[0].scheme = precision.at(s->key);
  }
}

Model shrink_width(const Model& src, double width, const PrecisionMap& precision) {
  ModelSpec spec = src.spec;
  spec.width = width;
  spec.validate();
  if (spec.active_heads() > src.spec.active_heads() || spec.active_ffn() > src.spec.active_ffn()) {
    throw ConfigError("shrink_width cannot widen a model");
  }
  for (const WeightSlot* s : src.slots()) {
    if (s->is_pair()) throw ConfigError("shrink_width expects an unsplit model");
  }
  Model m = build_model(spec, precision, src.act, 0);
  m.embedding.table.branches[0].latent.value = src.embedding.table.branches[0].latent.value;
  m.embedding.ln = src.embedding.ln;
  const std::size_t a = static_cast<std::size_t>(spec.attn_dim());
  const std::size_t f = static_cast<std::size_t>(spec.active_ffn());
  auto keep_cols = [](const Tensor& w, std::size_t n) {
    Tensor out({w.rows(), n});
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t c = 0; c < n; ++c) out.at(r, c) = w.at(r, c);
    }
    return out;
  };
  auto keep_rows = [](const Tensor& w, std::size_t n) {
    Tensor out({n, w.cols()});
    std::copy(w.data(), w.data() + n * w.cols(), out.data());
    return out;
  };
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const EncoderLayer& s = src.layers[l];
    EncoderLayer& d = m.layers[l];
    auto copy_cols = [&](const QuantLinear& from, QuantLinear& to, std::size_t n) {
      to.weight.branches[0].latent.value = keep_cols(from.weight.branches[0].latent.value, n);
      to.bias.value = keep_cols(from.bias.value, n);
      to.input.step = from.input.step;
      to.input.calibrated = from.input.calibrated;
    };
    auto copy_rows = [&](const QuantLinear& from, QuantLinear& to, std::size_t n) {
      to.weight.branches[0].latent.value = keep_rows(from.weight.branches[0].latent.value, n);
      to.bias.value = from.bias.value;
      to.input.step = from.input.step;
      to.input.calibrated = from.input.calibrated;
    };
    copy_cols(s.query, d.query, a);
    copy_cols(s.key, d.key, a);
    copy_cols(s.value, d.value, a);
    copy_rows(s.attn_out, d.attn_out, a);
    copy_cols(s.ffn_mid, d.ffn_mid, f);
    copy_rows(s.ffn_out, d.ffn_out, f);
    d.attn_ln = s.attn_ln;
    d.ffn_ln = s.ffn_ln;
  }
  m.pooler.weight.branches[0].latent.value = src.pooler.weight.branches[0].latent.value;
  m.pooler.bias = src.pooler.bias;
  m.cls_weight = src.cls_weight;
  m.cls_bias = src.cls_bias;
  return m;
}

std::map<PartTag, std::vector<MatrixKey>> parameters_by_tag(const ModelSpec& spec) {
  std::map<PartTag, std::vector<MatrixKey>> groups;
  for (const auto& k : splittable_matrices(spec)) groups[k.tag()].push_back(k);
  return groups;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

struct Ctx {
  const Model& m;
  const ForwardOptions& opt;
  Tape& tape;
  ModelOutput& out;
  std::mt19937_64 rng;
  bool attention_quant;
};

Var quantize_act(Ctx& c, const ActSite& site, Var x) {
  switch (c.m.act.kind) {
    case ActKind::kNone: return x;
    case ActKind::kMinMax: {
      const int bits = c.m.act.bits;
      const bool is_signed = site.is_signed;
      return ops::ste(x, [bits, is_signed](const Tensor& v) {
        return quantize_activation_minmax(v, bits, is_signed);
      });
    }
    case ActKind::kLsq: {
      Var step;
      if (site.calibrated) {
        step = c.tape.parameter(site.step);
      } else if (c.opt.calibrate) {
        const double s0 = LsqState::initial_step(c.tape.value(x), c.m.act.bits, site.is_signed);
        c.out.calibration.emplace_back(site.name, s0);
        step = c.tape.constant(Tensor({1}, s0));
      } else {
        throw QuantStateError("activation site " + site.name + " has no calibrated step");
      }
      return ops::lsq(x, step, c.m.act.bits, site.is_signed);
    }
  }
  return x;
}

std::vector<Var> weight_leaves(Ctx& c, const WeightSlot& slot) {
  std::vector<Var> out;
  for (const auto& b : slot.branches) {
    if (b.scheme.quantized()) {
      out.push_back(c.tape.parameter(b.latent, quantize_weight(b.latent.value, b.scheme)));
    } else {
      out.push_back(c.tape.parameter(b.latent));
    }
  }
  return out;
}

Var linear(Ctx& c, const QuantLinear& lin, Var x) {
  Var in = x;
  if (lin.weight.quantized()) {
    ++c.out.quantized_weight_matmuls;
    if (c.m.act.kind != ActKind::kNone) {
      in = quantize_act(c, lin.input, x);
      ++c.out.weight_act_sites;
    }
  }
  Var y;
  bool first = true;
  for (Var w : weight_leaves(c, lin.weight)) {
    Var part = ops::matmul(in, w);
    y = first ? part : ops::add(y, part);
    first = false;
  }
  return ops::add_row(y, c.tape.parameter(lin.bias));
}

Var attention_operand(Ctx& c, const ActSite& site, Var x) {
  if (!c.attention_quant) return x;
  ++c.out.attention_act_sites;
  return quantize_act(c, site, x);
}

Var maybe_dropout(Ctx& c, Var x) {
  if (!c.opt.train || c.m.spec.dropout == 0.0) return x;
  return ops::dropout(x, c.m.spec.dropout, c.rng);
}

Var layer_norm(Ctx& c, const LayerNormParams& ln, Var x) {
  return ops::layer_norm(x, c.tape.parameter(ln.gain), c.tape.parameter(ln.bias));
}

void check_batch(const ModelSpec& spec, const Batch& b) {
  if (b.size == 0 || b.seq == 0) throw std::invalid_argument("forward: empty batch");
  if (b.seq > static_cast<std::size_t>(spec.max_len)) {
    throw std::invalid_argument("forward: sequence length exceeds max_len");
  }
  if (b.tokens.size() != b.size * b.seq || b.lengths.size() != b.size) {
    throw ShapeError("forward: batch token/length arrays do not match its shape");
  }
  for (int t : b.tokens) {
    if (t < 0 || t >= spec.vocab) throw std::out_of_range("forward: token id outside vocabulary");
  }
  for (std::size_t len : b.lengths) {
    if (len == 0 || len > b.seq) throw std::invalid_argument("forward: invalid sequence length");
  }
}

}  // namespace

ModelOutput forward(const Model& m, const Batch& batch, const ForwardOptions& opt) {
  check_batch(m.spec, batch);
  ModelOutput out;
  out.tape = std::make_unique<Tape>();
  Ctx c{m, opt, *out.tape, out, std::mt19937_64(opt.dropout_seed),
        m.act.kind != ActKind::kNone && m.any_quantized()};
  Tape& t = c.tape;
  const std::size_t B = batch.size;
  const std::size_t T = batch.seq;

  std::vector<std::size_t> tok_rows(B * T);
  std::vector<std::size_t> pos_rows(B * T);
  for (std::size_t i = 0; i < B * T; ++i) {
    tok_rows[i] = static_cast<std::size_t>(batch.tokens[i]);
    pos_rows[i] = static_cast<std::size_t>(m.spec.vocab) + i % T;
  }
  Var h;
  bool first = true;
  for (Var table : weight_leaves(c, m.embedding.table)) {
    Var e = ops::add(ops::gather_rows(table, tok_rows), ops::gather_rows(table, pos_rows));
    h = first ? e : ops::add(h, e);
    first = false;
  }
  h = maybe_dropout(c, layer_norm(c, m.embedding.ln, h));
  out.inter.embedding = h;

  ops::AttentionShape shape;
  shape.batch = B;
  shape.seq = T;
  shape.heads = static_cast<std::size_t>(m.spec.active_heads());
  shape.head_dim = static_cast<std::size_t>(m.spec.head_dim());
  shape.lengths = batch.lengths;

  for (const EncoderLayer& l : m.layers) {
    Var q = attention_operand(c, l.q_act, linear(c, l.query, h));
    Var k = attention_operand(c, l.k_act, linear(c, l.key, h));
    Var v = attention_operand(c, l.v_act, linear(c, l.value, h));
    Var p = maybe_dropout(c, ops::attention_probs(q, k, shape));
    p = attention_operand(c, l.prob_act, p);
    Var ctx = ops::attention_context(p, v, shape);
    Var attn = maybe_dropout(c, linear(c, l.attn_out, ctx));
    h = layer_norm(c, l.attn_ln, ops::add(h, attn));
    out.inter.mha.push_back(h);
    Var mid = ops::gelu(linear(c, l.ffn_mid, h));
    Var ffn = maybe_dropout(c, linear(c, l.ffn_out, mid));
    h = layer_norm(c, l.ffn_ln, ops::add(h, ffn));
    out.inter.ffn.push_back(h);
  }

  std::vector<std::size_t> cls_rows(B);
  for (std::size_t b = 0; b < B; ++b) cls_rows[b] = b * T;
  Var pooled = ops::tanh(linear(c, m.pooler, ops::gather_rows(h, cls_rows)));
  pooled = maybe_dropout(c, pooled);
  out.logits = ops::add_row(ops::matmul(pooled, t.parameter(m.cls_weight)), t.parameter(m.cls_bias));
  return out;
}

Tensor predict_logits(const Model& m, const Batch& batch) {
  ModelOutput out = forward(m, batch);
  return out.logits_value();
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row_span(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

void calibrate_activations(Model& m, const Batch& batch) {
  if (m.act.kind != ActKind::kLsq) return;
  ForwardOptions opt;
  opt.calibrate = true;
  const ModelOutput out = forward(m, batch, opt);
  for (const auto& [name, step] : out.calibration) {
    for (ActSite* s : m.act_sites()) {
      if (s->name == name) {
        s->step.value[0] = step;
        s->calibrated = true;
      }
    }
  }
}

}  // namespace tws
