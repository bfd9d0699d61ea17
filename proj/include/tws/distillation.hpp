#pragma once

#include <vector>

#include "tws/autograd.hpp"
#include "tws/model.hpp"
#include "tws/tensor.hpp"

namespace tws {

// Teacher values at the distillation hooks, detached from the teacher tape.
struct DistillTargets {
  Tensor embedding;
  std::vector<Tensor> mha;
  std::vector<Tensor> ffn;
  Tensor logits;
};

DistillTargets capture_targets(const ModelOutput& teacher);

// MSE(E) + sum_l MSE(M_l) + sum_l MSE(F_l), each MSE a mean over elements.
Var loss_int(const Intermediates& student, const DistillTargets& teacher);

// Soft cross-entropy against softmax(teacher logits), temperature 1,
// averaged over the batch.
Var loss_pred(Var student_logits, const Tensor& teacher_logits);

}  // namespace tws
