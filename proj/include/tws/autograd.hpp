#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tws/tensor.hpp"

namespace tws {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A trainable value. The optimizer owns the update; the tape only reads the
// value and reports gradients back keyed by the parameter's address.
struct Parameter {
  std::string name;
  Tensor value;
};

class Tape;

// Handle to a node on a particular tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

// Reverse-mode recorder. Nodes are appended in creation order, so node ids
// form a topological order; backward() walks ids in decreasing order and
// visits each node exactly once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value, const char* tag = "const");
  // Leaf bound to a parameter; `value` may differ from p.value (e.g. the
  // quantized image under a straight-through estimator).
  Var parameter(const Parameter& p, Tensor value);
  Var parameter(const Parameter& p) { return parameter(p, p.value); }

  Var record(Tensor value, std::vector<std::size_t> parents, Backward backward,
             const char* tag);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  const char* tag(Var v) const;

  void backward(Var loss);

  // Gradient accumulated into every leaf bound to `p` (zero tensor if none).
  Tensor grad_of(const Parameter& p) const;
  bool touches(const Parameter& p) const;

  // Used by backward closures.
  const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_at(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad_at(std::size_t id) const { return nodes_[id].needs_grad; }
  Tensor& grad_mut(std::size_t id);

  std::size_t check(Var v) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    Backward backward;
    const char* tag = "";
    const Parameter* param = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

using QuantizeFn = std::function<Tensor(const Tensor&)>;

namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_row(Var x, Var bias);
Var scale(Var x, double s);
Var sum(Var x);
Var gelu(Var x);
Var tanh(Var x);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12);
Var dropout(Var x, double rate, std::mt19937_64& rng);
Var gather_rows(Var table, std::span<const std::size_t> rows);

// Straight-through estimator: forward quantize(x), backward identity.
Var ste(Var x, const QuantizeFn& quantize);

struct AttentionShape {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::vector<std::size_t> lengths;  // valid key positions per sample
};

// q, k: (batch*seq) x (heads*head_dim). Returns attention probabilities laid
// out as (batch*heads*seq) x seq, masked on padded keys.
Var attention_probs(Var q, Var k, const AttentionShape& shape);
// probs from attention_probs, v: (batch*seq) x (heads*head_dim).
Var attention_context(Var probs, Var v, const AttentionShape& shape);

Var cross_entropy(Var logits, std::span<const int> labels);
// Mean over rows of -sum_c target_c * log softmax(logits)_c; target rows are
// probability vectors.
Var soft_cross_entropy(Var logits, const Tensor& target_probs);
Var mse(Var a, Var b);

}  // namespace ops

// Pure kernels shared by ops and by analysis code.
namespace kernels {
double gelu(double x);
double gelu_grad(double x);
Tensor softmax_rows(const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);
}  // namespace kernels

}  // namespace tws
