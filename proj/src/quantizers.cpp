#include "tws/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace tws {

namespace {

double sign_of(double v) { return v >= 0.0 ? 1.0 : -1.0; }

// Products of quantized operands land exactly on half-codes, where the last
// ulp of x / step would otherwise pick the code. Resolving the ratio on a
// 2^-20 grid first makes such ties round the same way under tiny input noise.
double round_code(double u) { return std::nearbyint(std::nearbyint(u * 0x1p20) * 0x1p-20); }

void require_nonempty(const Tensor& w, const char* what) {
  if (w.empty()) throw ShapeError(std::string(what) + ": empty tensor");
}

}  // namespace

std::string to_string(QuantKind kind) {
  switch (kind) {
    case QuantKind::kFull: return "full";
    case QuantKind::kTernary: return "ternary";
    case QuantKind::kBinary: return "binary";
    case QuantKind::kUniform: return "uniform";
    case QuantKind::kBinaryTwnScale: return "binary-twn-scale";
  }
  return "unknown";
}

std::string to_string(Granularity g) {
  return g == Granularity::kPerRow ? "per-row" : "per-matrix";
}

QuantKind quant_kind_from_string(const std::string& s) {
  if (s == "full") return QuantKind::kFull;
  if (s == "ternary") return QuantKind::kTernary;
  if (s == "binary") return QuantKind::kBinary;
  if (s == "uniform") return QuantKind::kUniform;
  if (s == "binary-twn-scale") return QuantKind::kBinaryTwnScale;
  throw std::invalid_argument("unknown quantization kind '" + s + "'");
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "per-row") return Granularity::kPerRow;
  if (s == "per-matrix") return Granularity::kPerMatrix;
  throw std::invalid_argument("unknown granularity '" + s + "'");
}

QuantScheme QuantScheme::for_bits(int bits, Granularity g) {
  if (bits >= 32) return full();
  if (bits == 2) return ternary(g);
  if (bits == 1) return binary(g);
  if (bits < 1) throw std::invalid_argument("bit-width must be >= 1");
  return uniform(bits);
}

void QuantScheme::validate() const {
  switch (kind) {
    case QuantKind::kFull:
      if (bits != 32) throw std::invalid_argument("full-precision scheme must use 32 bits");
      break;
    case QuantKind::kTernary:
      if (bits != 2) throw std::invalid_argument("ternary scheme must use 2 bits");
      break;
    case QuantKind::kBinary:
    case QuantKind::kBinaryTwnScale:
      if (bits != 1) throw std::invalid_argument("binary scheme must use 1 bit");
      break;
    case QuantKind::kUniform:
      if (bits < 2 || bits > 16) throw std::invalid_argument("uniform scheme needs 2..16 bits");
      if (granularity != Granularity::kPerMatrix) {
        throw std::invalid_argument("uniform scheme is per-matrix only");
      }
      break;
  }
}

std::size_t group_size_for(const Tensor& w, Granularity g) {
  return g == Granularity::kPerRow ? w.cols() : w.size();
}

TernaryResult ternarize(const Tensor& w, Granularity g) {
  require_nonempty(w, "ternarize");
  TernaryResult r;
  r.group_size = group_size_for(w, g);
  r.w_hat = Tensor(w.shape());
  const std::size_t n = r.group_size;
  const std::size_t groups = w.size() / n;
  r.alpha.resize(groups);
  r.delta.resize(groups);
  std::vector<double> kept;
  for (std::size_t grp = 0; grp < groups; ++grp) {
    const std::size_t base = grp * n;
    std::span<const double> vals(w.data() + base, n);
    const double delta = 0.7 / static_cast<double>(n) * l1_norm(vals);
    kept.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const double v = vals[i];
      if (std::abs(v) >= delta) {
        kept.push_back(std::abs(v));
        r.nonzero.push_back(base + i);
      } else if (v > 0.0) {
        r.zeroed_pos.push_back(base + i);
      } else {
        r.zeroed_neg.push_back(base + i);
      }
    }
    const double alpha = kept.empty() ? 0.0 : accurate_sum(kept) / static_cast<double>(kept.size());
    r.alpha[grp] = alpha;
    r.delta[grp] = delta;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = vals[i];
      r.w_hat[base + i] = std::abs(v) >= delta ? alpha * sign_of(v) : 0.0;
    }
  }
  return r;
}

BinaryResult binarize(const Tensor& w, Granularity g) {
  require_nonempty(w, "binarize");
  BinaryResult r;
  r.group_size = group_size_for(w, g);
  r.w_hat = Tensor(w.shape());
  const std::size_t n = r.group_size;
  const std::size_t groups = w.size() / n;
  r.alpha.resize(groups);
  for (std::size_t grp = 0; grp < groups; ++grp) {
    const std::size_t base = grp * n;
    std::span<const double> vals(w.data() + base, n);
    const double alpha = l1_norm(vals) / static_cast<double>(n);
    r.alpha[grp] = alpha;
    for (std::size_t i = 0; i < n; ++i) r.w_hat[base + i] = alpha * sign_of(vals[i]);
  }
  return r;
}

BinaryResult binarize_with_ternary_scale(const Tensor& w, Granularity g) {
  const TernaryResult t = ternarize(w, g);
  BinaryResult r;
  r.group_size = t.group_size;
  r.alpha = t.alpha;
  r.w_hat = Tensor(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    r.w_hat[i] = t.alpha[i / t.group_size] * sign_of(w[i]);
  }
  return r;
}

Tensor quantize_uniform_weight(const Tensor& w, int bits) {
  if (bits < 2) throw std::invalid_argument("uniform weight quantization needs >= 2 bits");
  const double absmax = max_abs(w.span());
  Tensor out(w.shape());
  if (absmax == 0.0) return out;
  const double levels = static_cast<double>((1 << (bits - 1)) - 1);
  const double step = absmax / levels;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double q = std::clamp(std::nearbyint(w[i] / step), -levels, levels);
    out[i] = absmax * (q / levels);
  }
  return out;
}

Tensor quantize_activation_minmax(const Tensor& x, int bits, bool is_signed) {
  if (bits < 1 || bits > 16) throw std::invalid_argument("activation bits must be in 1..16");
  const double absmax = max_abs(x.span());
  Tensor out(x.shape());
  if (absmax == 0.0) return out;
  const double top = static_cast<double>((1u << bits) - 1u);
  // Signed: codes -2^(b-1) .. 2^(b-1)-1 with step 2*absmax/top, so +absmax
  // lands half a step above the last code. Unsigned: codes 0 .. top.
  const double step = is_signed ? 2.0 * absmax / top : absmax / top;
  const double lo = is_signed ? -static_cast<double>(1u << (bits - 1)) : 0.0;
  const double hi = is_signed ? static_cast<double>((1u << (bits - 1)) - 1u) : top;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = step * std::clamp(round_code(x[i] / step), lo, hi);
  }
  return out;
}

Tensor quantize_weight(const Tensor& w, const QuantScheme& scheme) {
  switch (scheme.kind) {
    case QuantKind::kFull: return w;
    case QuantKind::kTernary: return ternarize(w, scheme.granularity).w_hat;
    case QuantKind::kBinary: return binarize(w, scheme.granularity).w_hat;
    case QuantKind::kUniform: return quantize_uniform_weight(w, scheme.bits);
    case QuantKind::kBinaryTwnScale: return binarize_with_ternary_scale(w, scheme.granularity).w_hat;
  }
  return w;
}

double snap_latent(double v) {
  const double clamped = std::clamp(v, -kLatentBound + kLatentQuantum, kLatentBound - kLatentQuantum);
  return std::nearbyint(clamped / kLatentQuantum) * kLatentQuantum;
}

void snap_latent(Tensor& w) {
  for (auto& v : w.span()) v = snap_latent(v);
}

bool on_latent_grid(const Tensor& w) {
  return std::all_of(w.span().begin(), w.span().end(), [](double v) {
    return std::abs(v) < kLatentBound && std::nearbyint(v / kLatentQuantum) * kLatentQuantum == v;
  });
}

double LsqState::initial_step(const Tensor& x, int bits, bool is_signed) {
  const LsqState probe{1.0, bits, is_signed};
  const double mean_abs = x.empty() ? 0.0 : l1_norm(x.span()) / static_cast<double>(x.size());
  const double s = 2.0 * mean_abs / std::sqrt(static_cast<double>(probe.qp()));
  return s > 0.0 ? s : 1e-8;
}

LsqResult lsq_quantize(const Tensor& x, const LsqState& state) {
  if (!(state.step > 0.0)) throw QuantStateError("LSQ step size must be positive");
  if (state.bits < 2 || state.bits > 16) throw QuantStateError("LSQ bits must be in 2..16");
  const double s = state.step;
  const int qn = state.qn();
  const int qp = state.qp();
  LsqResult r;
  r.x_hat = Tensor(x.shape());
  r.grad_x_mask = Tensor(x.shape());
  r.dstep = Tensor(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i] / s;
    if (v <= qn) {
      r.x_hat[i] = s * qn;
      r.dstep[i] = qn;
    } else if (v >= qp) {
      r.x_hat[i] = s * qp;
      r.dstep[i] = qp;
    } else {
      const double q = std::nearbyint(v);
      r.x_hat[i] = s * q;
      r.dstep[i] = q - v;
      r.grad_x_mask[i] = 1.0;
    }
  }
  r.grad_scale = 1.0 / std::sqrt(static_cast<double>(x.size()) * static_cast<double>(qp));
  return r;
}

namespace ops {

Var lsq(Var x, Var step, int bits, bool is_signed) {
  if (x.tape == nullptr || x.tape != step.tape) throw GraphError("lsq: operands on different tapes");
  Tape& t = *x.tape;
  const LsqState state{t.value(step).item(), bits, is_signed};
  auto res = std::make_shared<LsqResult>(lsq_quantize(t.value(x), state));
  Tensor out = res->x_hat;
  return t.record(std::move(out), {x.id, step.id},
                  [ix = x.id, is = step.id, res](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    if (tp.needs_grad_at(ix)) {
                      Tensor& gx = tp.grad_mut(ix);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * res->grad_x_mask[i];
                    }
                    if (tp.needs_grad_at(is)) {
                      double acc = 0.0;
                      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * res->dstep[i];
                      tp.grad_mut(is)[0] += acc * res->grad_scale;
                    }
                  },
                  "lsq");
}

}  // namespace ops
}  // namespace tws
