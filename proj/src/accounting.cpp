#include "tws/accounting.hpp"

#include <sstream>

namespace tws {

CostInput cost_input(const Model& m) {
  CostInput in;
  in.spec = m.spec;
  in.precision = m.precision();
  for (const WeightSlot* s : m.slots()) {
    if (s->is_pair()) in.split.insert(s->key);
  }
  in.act_bits = m.act.kind == ActKind::kNone ? 32 : m.act.bits;
  return in;
}

int weight_bits(const QuantScheme& s) { return s.quantized() ? s.bits : 32; }

double multiply_flops(int w_bits, int a_bits) {
  if (w_bits >= 32 && a_bits >= 32) return 1.0;
  return static_cast<double>(w_bits) * static_cast<double>(a_bits) / 64.0;
}

double matmul_flops(double m, double k, double n, int w_bits, int a_bits) {
  return 2.0 * m * k * n * multiply_flops(w_bits, a_bits);
}

namespace {

std::size_t scale_count(const ModelSpec& spec, const MatrixKey& key, const QuantScheme& scheme) {
  if (!scheme.quantized()) return 0;
  return scheme.granularity == Granularity::kPerRow ? matrix_shape(spec, key).first : 1;
}

double scaled(double macs, int w_bits, int a_bits) { return 2.0 * macs * multiply_flops(w_bits, a_bits); }

std::size_t count_fp_params(const ModelSpec& spec) {
  const auto h = static_cast<std::size_t>(spec.hidden);
  const auto a = static_cast<std::size_t>(spec.attn_dim());
  const auto f = static_cast<std::size_t>(spec.active_ffn());
  const auto c = static_cast<std::size_t>(spec.classes);
  std::size_t n = 2 * h;  // embedding LN
  n += static_cast<std::size_t>(spec.layers) * (3 * a + h + f + h + 4 * h);  // biases + 2 LN
  n += h;                                                                   // pooler bias
  n += h * c + c;                                                           // classifier
  return n;
}

}  // namespace

double matrix_bytes(const ModelSpec& spec, const MatrixKey& key, const QuantScheme& scheme, bool split,
                    bool count_scales) {
  const auto [r, c] = matrix_shape(spec, key);
  const double params = static_cast<double>(r * c);
  double bytes = params * static_cast<double>(weight_bits(scheme)) / 8.0;
  if (count_scales) bytes += 4.0 * static_cast<double>(scale_count(spec, key, scheme));
  return split ? 2.0 * bytes : bytes;
}

CostReport cost_report(const CostInput& in, int seq) {
  in.spec.validate();
  CostReport rep;
  const auto T = static_cast<double>(seq);
  const int act = in.act_bits;
  bool any_quantized = false;
  for (const auto& [k, s] : in.precision) any_quantized |= s.quantized();
  const int attn_act = any_quantized && act < 32 ? act : 32;

  for (const auto& key : splittable_matrices(in.spec)) {
    const QuantScheme& s = in.precision.at(key);
    const bool split = in.split.count(key) > 0;
    const auto [r, c] = matrix_shape(in.spec, key);
    CostItem it;
    it.name = to_string(key);
    it.params = r * c;
    it.branches = split ? 2 : 1;
    it.weight_bits = weight_bits(s);
    it.act_bits = s.quantized() ? act : 32;
    it.bytes = matrix_bytes(in.spec, key, s, split, in.count_scales);
    if (key.slot != Slot::kEmbedding) {
      // The pooler only sees the first position. A split pair is costed as
      // the width-doubled matrix it realizes; the pooler is never squeezed,
      // so its pair keeps the single-matrix shape.
      const double rows_in = key.slot == Slot::kPooler ? 1.0 : T;
      const double widen = split && key.slot != Slot::kPooler ? 2.0 : 1.0;
      it.flops = widen * scaled(rows_in * static_cast<double>(r * c), it.weight_bits, it.act_bits);
    }
    rep.items.push_back(it);
  }

  const auto heads = static_cast<double>(in.spec.active_heads());
  const auto d = static_cast<double>(in.spec.head_dim());
  for (int l = 0; l < in.spec.layers; ++l) {
    const bool qk_split = in.split.count({Slot::kQuery, l}) && in.split.count({Slot::kKey, l});
    const bool v_split = in.split.count({Slot::kValue, l}) > 0;
    CostItem scores;
    scores.name = "layer" + std::to_string(l) + ".scores";
    scores.act_bits = attn_act;
    scores.weight_bits = attn_act;
    scores.flops = scaled((qk_split ? 2.0 : 1.0) * heads * T * T * d, attn_act, attn_act);
    CostItem context = scores;
    context.name = "layer" + std::to_string(l) + ".context";
    context.flops = scaled((v_split ? 2.0 : 1.0) * heads * T * T * d, attn_act, attn_act);
    rep.items.push_back(scores);
    rep.items.push_back(context);
  }

  CostItem fp;
  fp.name = "full-precision";
  fp.params = count_fp_params(in.spec);
  fp.bytes = 4.0 * static_cast<double>(fp.params);
  fp.flops = 2.0 * static_cast<double>(in.spec.hidden) * static_cast<double>(in.spec.classes);
  rep.items.push_back(fp);

  for (const auto& it : rep.items) {
    rep.bytes += it.bytes;
    rep.flops += it.flops;
  }
  return rep;
}

double model_size_bytes(const CostInput& in) { return cost_report(in).bytes; }
double model_flops(const CostInput& in, int seq) { return cost_report(in, seq).flops; }

std::string CostReport::csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "item,params,branches,weight_bits,act_bits,bytes,flops\n";
  for (const auto& it : items) {
    os << it.name << ',' << it.params << ',' << it.branches << ',' << it.weight_bits << ','
       << it.act_bits << ',' << it.bytes << ',' << it.flops << '\n';
  }
  os << "total,,,,," << bytes << ',' << flops << '\n';
  return os.str();
}

}  // namespace tws
