#include "malm/distillation.hpp"

#include <iostream>

#include "malm/common.hpp"

namespace malm {

void DistillConfig::validate() const {
    check(beta > 0.0, "beta must be positive");
    check(ema_momentum >= 0.0 && ema_momentum <= 1.0, "ema_momentum must lie in [0, 1]");
    check(depth >= 1 && heads >= 1, "reconstruction depth/heads must be >= 1");
}

ReconstructionHeadImpl::ReconstructionHeadImpl(int64_t dim, int64_t depth, int64_t heads) {
    stack = register_module("stack", TransformerStack(dim, depth, heads, /*final_norm=*/false));
    output = register_module("output", torch::nn::Linear(dim, dim));
}

torch::Tensor ReconstructionHeadImpl::forward(const torch::Tensor& masked_sequence) {
    check(masked_sequence.dim() == 3, "reconstruction input must be B x N x D");
    return output(stack(masked_sequence));
}

torch::Tensor smooth_l1(const torch::Tensor& a, const torch::Tensor& b, double beta) {
    check(beta > 0.0, "smooth_l1: beta must be positive");
    check(a.sizes() == b.sizes(), "smooth_l1: shape mismatch");
    torch::Tensor d = (a - b).abs();
    torch::Tensor elem = torch::where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta);
    return elem.mean();
}

torch::Tensor distillation_loss(const torch::Tensor& predicted,
                                const torch::Tensor& teacher_targets,
                                const MaskSpec& mask, double beta) {
    check(beta > 0.0, "distillation_loss: beta must be positive");
    check(predicted.sizes() == teacher_targets.sizes(),
          "prediction/target shape mismatch");
    check(predicted.size(1) == 1 + mask.num_positions,
          "distillation_loss expects full-length sequences");
    if (mask.count() == 0) {
        static bool warned = false;
        if (!warned) {
            std::cerr << "warning: empty mask, distillation loss is 0 "
                         "(ratio 0 disables distillation)\n";
            warned = true;
        }
        return torch::zeros({});
    }
    const int64_t B = predicted.size(0), m = mask.count(), D = predicted.size(2);
    torch::Tensor idx = mask.seq_positions.unsqueeze(-1).expand({B, m, D});
    torch::Tensor pred_rows = torch::gather(predicted, 1, idx);
    torch::Tensor target_rows = torch::gather(teacher_targets, 1, idx).detach();
    return smooth_l1(pred_rows, target_rows, beta);
}

void ema_update(const std::vector<torch::Tensor>& student_params,
                std::vector<torch::Tensor>& teacher_params, double momentum) {
    check(momentum >= 0.0 && momentum <= 1.0, "ema momentum must lie in [0, 1]");
    check(student_params.size() == teacher_params.size(),
          "ema_update: parameter trees differ in size");
    torch::NoGradGuard no_grad;
    for (size_t i = 0; i < student_params.size(); ++i) {
        check(student_params[i].sizes() == teacher_params[i].sizes(),
              "ema_update: parameter shape mismatch at index " + std::to_string(i));
        teacher_params[i].mul_(momentum).add_(student_params[i], 1.0 - momentum);
    }
}

void ema_update(const torch::nn::Module& student, torch::nn::Module& teacher,
                double momentum) {
    auto s = student.named_parameters(true);
    auto t = teacher.named_parameters(true);
    check(s.size() == t.size(), "ema_update: parameter trees differ in size");
    torch::NoGradGuard no_grad;
    for (const auto& item : s) {
        torch::Tensor* target = t.find(item.key());
        check(target != nullptr, "ema_update: missing parameter " + item.key());
        check(target->sizes() == item.value().sizes(),
              "ema_update: parameter shape mismatch: " + item.key());
        target->mul_(momentum).add_(item.value(), 1.0 - momentum);
    }
}

}  // namespace malm
