#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "malm/encoders.hpp"
#include "malm/masking.hpp"

namespace malm {

struct DistillConfig {
    double beta = 1.0;
    double ema_momentum = 0.999;
    int64_t depth = 2;
    int64_t heads = 2;
    void validate() const;
};

/// Transformer that predicts the full-length teacher features from the
/// mask-appended student sequence, followed by a linear output head back
/// into the target dimension. No final layer norm so the head can be
/// identity-initialized.
struct ReconstructionHeadImpl : torch::nn::Module {
    ReconstructionHeadImpl(int64_t dim, int64_t depth, int64_t heads);
    torch::Tensor forward(const torch::Tensor& masked_sequence);

    TransformerStack stack{nullptr};
    torch::nn::Linear output{nullptr};
};
TORCH_MODULE(ReconstructionHead);

/// Huber-style loss: 0.5 d^2 / beta for |d| < beta, |d| - beta/2 otherwise;
/// mean over all elements. beta must be positive.
torch::Tensor smooth_l1(const torch::Tensor& a, const torch::Tensor& b, double beta);

/// Mean smooth-L1 over the masked positions only. Targets must already carry
/// the stop-gradient contract (detached teacher features). An empty mask
/// yields a zero loss with a warning: ratio 0 disables distillation.
torch::Tensor distillation_loss(const torch::Tensor& predicted,
                                const torch::Tensor& teacher_targets,
                                const MaskSpec& mask, double beta);

/// theta_t <- momentum * theta_t + (1 - momentum) * theta_s, elementwise,
/// applied once per optimizer step after the step. Structural mismatch of
/// the two parameter lists is an error.
void ema_update(const std::vector<torch::Tensor>& student_params,
                std::vector<torch::Tensor>& teacher_params, double momentum);

/// Same update over two modules' named parameters (names must correspond).
void ema_update(const torch::nn::Module& student, torch::nn::Module& teacher,
                double momentum);

}  // namespace malm
