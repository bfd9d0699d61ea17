#include "tws/distillation.hpp"

namespace tws {

DistillTargets capture_targets(const ModelOutput& teacher) {
  const Tape& t = *teacher.tape;
  DistillTargets d;
  d.embedding = t.value(teacher.inter.embedding);
  for (Var v : teacher.inter.mha) d.mha.push_back(t.value(v));
  for (Var v : teacher.inter.ffn) d.ffn.push_back(t.value(v));
  d.logits = t.value(teacher.logits);
  return d;
}

Var loss_int(const Intermediates& student, const DistillTargets& teacher) {
  if (student.mha.size() != teacher.mha.size() || student.ffn.size() != teacher.ffn.size()) {
    throw ShapeError("loss_int: student and teacher layer counts differ");
  }
  Tape& tape = *student.embedding.tape;
  Var total = ops::mse(student.embedding, tape.constant(teacher.embedding, "target"));
  for (std::size_t l = 0; l < student.mha.size(); ++l) {
    total = ops::add(total, ops::mse(student.mha[l], tape.constant(teacher.mha[l], "target")));
  }
  for (std::size_t l = 0; l < student.ffn.size(); ++l) {
    total = ops::add(total, ops::mse(student.ffn[l], tape.constant(teacher.ffn[l], "target")));
  }
  return total;
}

Var loss_pred(Var student_logits, const Tensor& teacher_logits) {
  return ops::soft_cross_entropy(student_logits, kernels::softmax_rows(teacher_logits));
}

}  // namespace tws
