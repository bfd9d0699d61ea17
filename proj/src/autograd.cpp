#include "tws/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace tws {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

CMapMat view(const Tensor& t) { return CMapMat(t.data(), t.rows(), t.cols()); }
MapMat view(Tensor& t) { return MapMat(t.data(), t.rows(), t.cols()); }

void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw std::domain_error(std::string(op) + ": non-finite input");
}

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

}  // namespace

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() { nodes_.reserve(256); }

std::size_t Tape::check(Var v) const {
  if (v.tape != this) throw GraphError("variable belongs to a different tape");
  if (v.id >= nodes_.size()) throw GraphError("variable id not recorded on this tape");
  return v.id;
}

Var Tape::constant(Tensor value, const char* tag) {
  Node n;
  n.value = std::move(value);
  n.tag = tag;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(const Parameter& p, Tensor value) {
  Node n;
  n.value = std::move(value);
  n.tag = "param";
  n.param = &p;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, Backward backward,
                 const char* tag) {
  Node n;
  n.value = std::move(value);
  n.tag = tag;
  for (auto p : parents) {
    if (p >= nodes_.size()) throw GraphError("parent id not recorded on this tape");
    n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  }
  n.parents = std::move(parents);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return nodes_[check(v)].value; }
const Tensor& Tape::grad(Var v) const { return nodes_[check(v)].grad; }
bool Tape::requires_grad(Var v) const { return nodes_[check(v)].needs_grad; }
const char* Tape::tag(Var v) const { return nodes_[check(v)].tag; }

Tensor& Tape::grad_mut(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

void Tape::backward(Var loss) {
  const std::size_t root = check(loss);
  if (nodes_[root].value.size() != 1) throw GraphError("backward() requires a scalar loss");
  if (backward_done_) throw GraphError("backward() already ran on this tape");
  backward_done_ = true;
  if (!nodes_[root].needs_grad) return;
  grad_mut(root)[0] = 1.0;
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

Tensor Tape::grad_of(const Parameter& p) const {
  Tensor g = Tensor::zeros_like(p.value);
  for (const Node& n : nodes_) {
    if (n.param == &p && !n.grad.empty()) g += n.grad;
  }
  return g;
}

bool Tape::touches(const Parameter& p) const {
  return std::any_of(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.param == &p; });
}

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

double gelu(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_grad(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

Tensor softmax_rows(const Tensor& x) {
  require_finite(x, "softmax");
  Tensor out(x.shape());
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row_span(r);
    auto o = out.row_span(r);
    const double m = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - m);
      z += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimensions disagree: " + a.shape_string() + " x " +
                     b.shape_string());
  }
  Tensor out({a.rows(), b.cols()});
  view(out).noalias() = view(a) * view(b);
  return out;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Ops

namespace ops {

namespace {
Tape& tape_of(Var v) {
  if (v.tape == nullptr) throw GraphError("variable is not attached to a tape");
  return *v.tape;
}
Tape& common_tape(Var a, Var b) {
  if (a.tape != b.tape) throw GraphError("operands live on different tapes");
  Tape& t = tape_of(a);
  t.check(a);
  t.check(b);
  return t;
}
}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  Tensor out = kernels::matmul(t.value(a), t.value(b));
  return t.record(std::move(out), {a.id, b.id},
                  [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
                    const auto g = view(tp.grad_at(self));
                    if (tp.needs_grad_at(ia)) {
                      view(tp.grad_mut(ia)).noalias() += g * view(tp.value_at(ib)).transpose();
                    }
                    if (tp.needs_grad_at(ib)) {
                      view(tp.grad_mut(ib)).noalias() += view(tp.value_at(ia)).transpose() * g;
                    }
                  },
                  "matmul");
}

Var add(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape(t.value(a), t.value(b), "add");
  Tensor out = t.value(a);
  out += t.value(b);
  return t.record(std::move(out), {a.id, b.id},
                  [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    if (tp.needs_grad_at(ia)) tp.grad_mut(ia) += g;
                    if (tp.needs_grad_at(ib)) tp.grad_mut(ib) += g;
                  },
                  "add");
}

Var sub(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape(t.value(a), t.value(b), "sub");
  Tensor out = t.value(a);
  const Tensor& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.record(std::move(out), {a.id, b.id},
                  [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    if (tp.needs_grad_at(ia)) tp.grad_mut(ia) += g;
                    if (tp.needs_grad_at(ib)) {
                      Tensor& gb = tp.grad_mut(ib);
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                    }
                  },
                  "sub");
}

Var mul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape(t.value(a), t.value(b), "mul");
  Tensor out = t.value(a);
  const Tensor& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), {a.id, b.id},
                  [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    const Tensor& av = tp.value_at(ia);
                    const Tensor& bv2 = tp.value_at(ib);
                    if (tp.needs_grad_at(ia)) {
                      Tensor& ga = tp.grad_mut(ia);
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                    }
                    if (tp.needs_grad_at(ib)) {
                      Tensor& gb = tp.grad_mut(ib);
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                    }
                  },
                  "mul");
}

Var add_row(Var x, Var bias) {
  Tape& t = common_tape(x, bias);
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(bias);
  if (bv.size() != xv.cols()) {
    throw ShapeError("add_row: bias " + bv.shape_string() + " vs input " + xv.shape_string());
  }
  Tensor out = xv;
  const std::size_t cols = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  return t.record(std::move(out), {x.id, bias.id},
                  [ix = x.id, ib = bias.id, cols](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    if (tp.needs_grad_at(ix)) tp.grad_mut(ix) += g;
                    if (tp.needs_grad_at(ib)) {
                      Tensor& gb = tp.grad_mut(ib);
                      const std::size_t rows = g.size() / cols;
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                      }
                    }
                  },
                  "add_row");
}

Var scale(Var x, double s) {
  Tape& t = tape_of(x);
  Tensor out = t.value(x);
  out *= s;
  return t.record(std::move(out), {x.id},
                  [ix = x.id, s](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    Tensor& gx = tp.grad_mut(ix);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
                  },
                  "scale");
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  const double total = accurate_sum(t.value(x).span());
  return t.record(Tensor::scalar(total), {x.id},
                  [ix = x.id](Tape& tp, std::size_t self) {
                    const double g = tp.grad_at(self)[0];
                    Tensor& gx = tp.grad_mut(ix);
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                  },
                  "sum");
}

Var gelu(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  require_finite(xv, "gelu");
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = kernels::gelu(xv[i]);
  return t.record(std::move(out), {x.id},
                  [ix = x.id](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    const Tensor& xin = tp.value_at(ix);
                    Tensor& gx = tp.grad_mut(ix);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kernels::gelu_grad(xin[i]);
                  },
                  "gelu");
}

Var tanh(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  return t.record(std::move(out), {x.id},
                  [ix = x.id](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    const Tensor& y = tp.value_at(self);
                    Tensor& gx = tp.grad_mut(ix);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
                  },
                  "tanh");
}

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  Tensor out = kernels::softmax_rows(t.value(x));
  return t.record(std::move(out), {x.id},
                  [ix = x.id](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    const Tensor& p = tp.value_at(self);
                    Tensor& gx = tp.grad_mut(ix);
                    const std::size_t cols = p.cols();
                    for (std::size_t r = 0; r < p.rows(); ++r) {
                      double dot = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * p[r * cols + c];
                      for (std::size_t c = 0; c < cols; ++c) {
                        gx[r * cols + c] += p[r * cols + c] * (g[r * cols + c] - dot);
                      }
                    }
                  },
                  "softmax");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x);
  t.check(gain);
  t.check(bias);
  const Tensor& xv = t.value(x);
  require_finite(xv, "layer_norm");
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (t.value(gain).size() != cols || t.value(bias).size() != cols) {
    throw ShapeError("layer_norm: gain/bias width does not match input " + xv.shape_string());
  }
  const Tensor& gv = t.value(gain);
  const Tensor& bv = t.value(bias);
  Tensor out(xv.shape());
  auto normed = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row_span(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double n = (in[c] - mean) * is;
      (*normed)[r * cols + c] = n;
      out[r * cols + c] = n * gv[c] + bv[c];
    }
  }
  return t.record(
      std::move(out), {x.id, gain.id, bias.id},
      [ix = x.id, ig = gain.id, ib = bias.id, normed, inv_std, rows, cols](Tape& tp,
                                                                          std::size_t self) {
        const Tensor& g = tp.grad_at(self);
        const Tensor& gv2 = tp.value_at(ig);
        if (tp.needs_grad_at(ig) || tp.needs_grad_at(ib)) {
          Tensor& gg = tp.grad_mut(ig);
          Tensor& gb = tp.grad_mut(ib);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
              gg[c] += g[r * cols + c] * (*normed)[r * cols + c];
              gb[c] += g[r * cols + c];
            }
          }
        }
        if (!tp.needs_grad_at(ix)) return;
        Tensor& gx = tp.grad_mut(ix);
        const double inv_n = 1.0 / static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dn = 0.0;
          double mean_dn_n = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double dn = g[r * cols + c] * gv2[c];
            mean_dn += dn;
            mean_dn_n += dn * (*normed)[r * cols + c];
          }
          mean_dn *= inv_n;
          mean_dn_n *= inv_n;
          for (std::size_t c = 0; c < cols; ++c) {
            const double dn = g[r * cols + c] * gv2[c];
            gx[r * cols + c] +=
                (*inv_std)[r] * (dn - mean_dn - (*normed)[r * cols + c] * mean_dn_n);
          }
        }
      },
      "layer_norm");
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  Tape& t = tape_of(x);
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  const Tensor& xv = t.value(x);
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    // 53 random mantissa bits; avoids distribution-implementation drift.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    (*mask)[i] = u >= rate ? keep_scale : 0.0;
    out[i] = xv[i] * (*mask)[i];
  }
  return t.record(std::move(out), {x.id},
                  [ix = x.id, mask](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    Tensor& gx = tp.grad_mut(ix);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
                  },
                  "dropout");
}

Var gather_rows(Var table, std::span<const std::size_t> rows) {
  Tape& t = tape_of(table);
  const Tensor& tv = t.value(table);
  const std::size_t cols = tv.cols();
  Tensor out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= tv.rows()) throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(tv.data() + rows[i] * cols, cols, out.data() + i * cols);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return t.record(std::move(out), {table.id},
                  [it = table.id, idx, cols](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    Tensor& gt = tp.grad_mut(it);
                    for (std::size_t i = 0; i < idx->size(); ++i) {
                      const double* src = g.data() + i * cols;
                      double* dst = gt.data() + (*idx)[i] * cols;
                      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                    }
                  },
                  "gather_rows");
}

Var ste(Var x, const QuantizeFn& quantize) {
  Tape& t = tape_of(x);
  Tensor out = quantize(t.value(x));
  require_same_shape(out, t.value(x), "ste");
  return t.record(std::move(out), {x.id},
                  [ix = x.id](Tape& tp, std::size_t self) { tp.grad_mut(ix) += tp.grad_at(self); },
                  "ste");
}

namespace {
void check_attention_operand(const Tensor& t, const AttentionShape& s, const char* what) {
  if (t.rows() != s.batch * s.seq || t.cols() != s.heads * s.head_dim) {
    throw ShapeError(std::string("attention: ") + what + " has shape " + t.shape_string());
  }
  if (s.lengths.size() != s.batch) throw ShapeError("attention: lengths size != batch");
}
}  // namespace

Var attention_probs(Var q, Var k, const AttentionShape& shape) {
  Tape& t = common_tape(q, k);
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  check_attention_operand(qv, shape, "query");
  check_attention_operand(kv, shape, "key");
  const std::size_t T = shape.seq;
  const std::size_t d = shape.head_dim;
  const std::size_t width = shape.heads * d;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor probs({shape.batch * shape.heads * T, T});
  for (std::size_t b = 0; b < shape.batch; ++b) {
    const std::size_t len = shape.lengths[b];
    for (std::size_t h = 0; h < shape.heads; ++h) {
      CStrided qb(qv.data() + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
      CStrided kb(kv.data() + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
      MapMat pb(probs.data() + (b * shape.heads + h) * T * T, T, T);
      pb.noalias() = (qb * kb.transpose()) * inv_sqrt_d;
      for (std::size_t i = 0; i < T; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) m = std::max(m, pb(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          const double e = j < len ? std::exp(pb(i, j) - m) : 0.0;
          pb(i, j) = e;
          z += e;
        }
        for (std::size_t j = 0; j < len; ++j) pb(i, j) /= z;
      }
    }
  }
  if (!probs.all_finite()) throw std::domain_error("attention: non-finite scores");
  return t.record(
      std::move(probs), {q.id, k.id},
      [iq = q.id, ik = k.id, shape, inv_sqrt_d](Tape& tp, std::size_t self) {
        const std::size_t T = shape.seq;
        const std::size_t d = shape.head_dim;
        const std::size_t width = shape.heads * d;
        const Tensor& p = tp.value_at(self);
        const Tensor& g = tp.grad_at(self);
        const Tensor& qv2 = tp.value_at(iq);
        const Tensor& kv2 = tp.value_at(ik);
        const bool need_q = tp.needs_grad_at(iq);
        const bool need_k = tp.needs_grad_at(ik);
        double* gq = need_q ? tp.grad_mut(iq).data() : nullptr;
        double* gk = need_k ? tp.grad_mut(ik).data() : nullptr;
        RowMat ds(T, T);
        for (std::size_t b = 0; b < shape.batch; ++b) {
          for (std::size_t h = 0; h < shape.heads; ++h) {
            const std::size_t off = (b * shape.heads + h) * T * T;
            CMapMat pb(p.data() + off, T, T);
            CMapMat gb(g.data() + off, T, T);
            for (std::size_t i = 0; i < T; ++i) {
              const double dot = pb.row(i).dot(gb.row(i));
              for (std::size_t j = 0; j < T; ++j) ds(i, j) = pb(i, j) * (gb(i, j) - dot);
            }
            ds *= inv_sqrt_d;
            CStrided qb(qv2.data() + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
            CStrided kb(kv2.data() + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
            if (need_q) {
              Strided gqb(gq + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
              gqb.noalias() += ds * kb;
            }
            if (need_k) {
              Strided gkb(gk + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
              gkb.noalias() += ds.transpose() * qb;
            }
          }
        }
      },
      "attention_probs");
}

Var attention_context(Var probs, Var v, const AttentionShape& shape) {
  Tape& t = common_tape(probs, v);
  const Tensor& pv = t.value(probs);
  const Tensor& vv = t.value(v);
  check_attention_operand(vv, shape, "value");
  const std::size_t T = shape.seq;
  const std::size_t d = shape.head_dim;
  const std::size_t width = shape.heads * d;
  if (pv.rows() != shape.batch * shape.heads * T || pv.cols() != T) {
    throw ShapeError("attention: probabilities have shape " + pv.shape_string());
  }
  Tensor out({shape.batch * T, width});
  for (std::size_t b = 0; b < shape.batch; ++b) {
    for (std::size_t h = 0; h < shape.heads; ++h) {
      CMapMat pb(pv.data() + (b * shape.heads + h) * T * T, T, T);
      CStrided vb(vv.data() + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
      Strided ob(out.data() + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
      ob.noalias() = pb * vb;
    }
  }
  return t.record(
      std::move(out), {probs.id, v.id},
      [ip = probs.id, iv = v.id, shape](Tape& tp, std::size_t self) {
        const std::size_t T = shape.seq;
        const std::size_t d = shape.head_dim;
        const std::size_t width = shape.heads * d;
        const Tensor& g = tp.grad_at(self);
        const Tensor& pv2 = tp.value_at(ip);
        const Tensor& vv2 = tp.value_at(iv);
        const bool need_p = tp.needs_grad_at(ip);
        const bool need_v = tp.needs_grad_at(iv);
        double* gp = need_p ? tp.grad_mut(ip).data() : nullptr;
        double* gv = need_v ? tp.grad_mut(iv).data() : nullptr;
        for (std::size_t b = 0; b < shape.batch; ++b) {
          for (std::size_t h = 0; h < shape.heads; ++h) {
            const std::size_t poff = (b * shape.heads + h) * T * T;
            CStrided gb(g.data() + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
            if (need_p) {
              CStrided vb(vv2.data() + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
              MapMat(gp + poff, T, T).noalias() += gb * vb.transpose();
            }
            if (need_v) {
              CMapMat pb(pv2.data() + poff, T, T);
              Strided gvb(gv + b * T * width + h * d, T, d, Eigen::OuterStride<>(width));
              gvb.noalias() += pb.transpose() * gb;
            }
          }
        }
      },
      "attention_context");
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = tape_of(logits);
  const Tensor& lv = t.value(logits);
  if (labels.size() != lv.rows()) throw ShapeError("cross_entropy: label count != batch");
  auto probs = std::make_shared<Tensor>(kernels::softmax_rows(lv));
  const std::size_t cols = lv.cols();
  double loss = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
      throw std::out_of_range("cross_entropy: label out of range");
    }
    loss -= std::log((*probs)[r * cols + static_cast<std::size_t>(labels[r])]);
  }
  const double inv_n = 1.0 / static_cast<double>(lv.rows());
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  return t.record(Tensor::scalar(loss * inv_n), {logits.id},
                  [il = logits.id, probs, lab, cols, inv_n](Tape& tp, std::size_t self) {
                    const double g = tp.grad_at(self)[0] * inv_n;
                    Tensor& gl = tp.grad_mut(il);
                    for (std::size_t r = 0; r < lab->size(); ++r) {
                      for (std::size_t c = 0; c < cols; ++c) {
                        const double onehot = static_cast<int>(c) == (*lab)[r] ? 1.0 : 0.0;
                        gl[r * cols + c] += g * ((*probs)[r * cols + c] - onehot);
                      }
                    }
                  },
                  "cross_entropy");
}

Var soft_cross_entropy(Var logits, const Tensor& target_probs) {
  Tape& t = tape_of(logits);
  const Tensor& lv = t.value(logits);
  require_same_shape(lv, target_probs, "soft_cross_entropy");
  auto probs = std::make_shared<Tensor>(kernels::softmax_rows(lv));
  auto target = std::make_shared<Tensor>(target_probs);
  const std::size_t cols = lv.cols();
  double loss = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    auto in = lv.row_span(r);
    const double m = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double v : in) z += std::exp(v - m);
    const double log_z = m + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) loss -= target_probs.at(r, c) * (in[c] - log_z);
  }
  const double inv_n = 1.0 / static_cast<double>(lv.rows());
  return t.record(Tensor::scalar(loss * inv_n), {logits.id},
                  [il = logits.id, probs, target, inv_n](Tape& tp, std::size_t self) {
                    const double g = tp.grad_at(self)[0] * inv_n;
                    Tensor& gl = tp.grad_mut(il);
                    // Rows of `target` sum to one.
                    for (std::size_t i = 0; i < gl.size(); ++i) {
                      gl[i] += g * ((*probs)[i] - (*target)[i]);
                    }
                  },
                  "soft_cross_entropy");
}

Var mse(Var a, Var b) {
  Tape& t = common_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "mse");
  if (av.empty()) throw ShapeError("mse of empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  const double inv_n = 1.0 / static_cast<double>(av.size());
  return t.record(Tensor::scalar(acc * inv_n), {a.id, b.id},
                  [ia = a.id, ib = b.id, inv_n](Tape& tp, std::size_t self) {
                    const double g = 2.0 * tp.grad_at(self)[0] * inv_n;
                    const Tensor& x = tp.value_at(ia);
                    const Tensor& y = tp.value_at(ib);
                    if (tp.needs_grad_at(ia)) {
                      Tensor& gx = tp.grad_mut(ia);
                      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g * (x[i] - y[i]);
                    }
                    if (tp.needs_grad_at(ib)) {
                      Tensor& gy = tp.grad_mut(ib);
                      for (std::size_t i = 0; i < x.size(); ++i) gy[i] -= g * (x[i] - y[i]);
                    }
                  },
                  "mse");
}

}  // namespace ops
}  // namespace tws
