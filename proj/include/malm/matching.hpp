#pragma once

#include <cstdint>
#include <utility>

#include <torch/torch.h>

namespace malm {

struct MatchingConfig {
    int64_t depth = 4;
    int64_t heads = 4;
    double temperature_init = 0.07;
    bool normalize = true;                  // L2-normalize rows before scores
    bool literal_eq7_denominator = true;    // exclude k = i from the denominator
    bool literal_sum_loss = false;          // minimize raw ratios, not -log
    bool include_cls_in_local = true;
    bool reduction_mean = true;             // mean over the batch (sum otherwise)
    static constexpr double kTempMin = 0.01;
    static constexpr double kTempMax = 1.0;
};

struct MatchOutputs {
    torch::Tensor image_features;    // I_att: B x (1+P) x D
    torch::Tensor recipe_features;   // R_att: B x S x D
    torch::Tensor image_attention;   // A_I:  B x (1+P) x S, rows sum to 1
    torch::Tensor recipe_attention;  // A_R:  B x S x (1+P), rows sum to 1
};

/// Counters bumped by the in-loop invariant assertions, so the acceptance
/// suite can verify they actually ran.
struct InvariantCounters {
    int64_t attention_rows_checked = 0;
    int64_t reports_checked = 0;
};
InvariantCounters& invariant_counters();

/// One pure cross-attention application: queries from `x`, keys/values from
/// `ctx`, multi-head with per-head scaling. Returns the output sequence and
/// the head-averaged attention map (each row sums to 1).
struct CrossAttentionLayerImpl : torch::nn::Module {
    CrossAttentionLayerImpl(int64_t dim, int64_t heads);
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x,
                                                    const torch::Tensor& ctx);

    torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr};
    int64_t heads;
};
TORCH_MODULE(CrossAttentionLayer);

/// Iterated cross attention: layer l takes queries from layer l-1's output
/// while keys/values always come from `ctx`, so the final output is exactly
/// attention-weights times values of the context. Returns the last layer's
/// output and attention map.
struct CrossAttentionStackImpl : torch::nn::Module {
    CrossAttentionStackImpl(int64_t dim, int64_t depth, int64_t heads);
    std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor x,
                                                    const torch::Tensor& ctx);

    torch::nn::ModuleList layers;
};
TORCH_MODULE(CrossAttentionStack);

torch::Tensor l2_normalize_rows(const torch::Tensor& x);

/// Per-sample log of the contrastive ratio: log Z_i where
///   Z(x_i, y_i) = exp(x_i . y_i / tau) / sum_k exp(x_i . y_k / tau),
/// with k != i when `literal_denominator` (the default) and k over the whole
/// batch otherwise. Rows are L2-normalized first when `normalize`.
torch::Tensor contrastive_log_ratio(const torch::Tensor& x, const torch::Tensor& y,
                                    const torch::Tensor& tau, bool normalize,
                                    bool literal_denominator);

/// Symmetric two-direction contrastive objective over B x D globals.
/// Default form is the batch-reduced mean of -(log Z(x->y) + log Z(y->x))/2;
/// the literal-sum mode averages the raw ratios instead.
torch::Tensor bidirectional_contrastive_loss(const torch::Tensor& x,
                                             const torch::Tensor& y,
                                             const torch::Tensor& tau,
                                             const MatchingConfig& cfg);

/// (I_g, R_g): CLS row of the cross-attended image features and the mean
/// over S of the cross-attended recipe features.
std::pair<torch::Tensor, torch::Tensor> global_features(const MatchOutputs& out);

/// Patch-relevant recipe features: R_l[:,p,:] = mean_s A_I[:,p,s] * R_att[:,s,:].
torch::Tensor local_recipe_features(const torch::Tensor& image_attention,
                                    const torch::Tensor& recipe_features);

/// Per-position contrastive loss over B x L x D feature stacks: at each
/// position the negatives are the same-position features of the other batch
/// samples. Averaged over positions; batch reduction as configured.
torch::Tensor local_contrastive_loss(const torch::Tensor& image_features,
                                     const torch::Tensor& local_recipe,
                                     const torch::Tensor& tau,
                                     const MatchingConfig& cfg);

struct MatchingHeadImpl : torch::nn::Module {
    MatchingHeadImpl(int64_t dim, MatchingConfig cfg);

    /// Runs both cross-attention stacks; the recipe stack attends to the
    /// cross-attended image features (sequential dependency).
    MatchOutputs forward(const torch::Tensor& image_tokens,
                         const torch::Tensor& recipe_tokens);

    torch::Tensor temperature() const;   // tau = exp(-log_inv_temperature)
    void clamp_temperature();            // called after every optimizer step

    torch::Tensor global_loss(const torch::Tensor& image_global,
                              const torch::Tensor& recipe_global);
    /// Slices off the CLS row first when configured to exclude it.
    torch::Tensor local_loss(const torch::Tensor& image_features,
                             const torch::Tensor& local_recipe);

    CrossAttentionStack image_stack{nullptr}, recipe_stack{nullptr};
    torch::Tensor log_inv_temperature;
    MatchingConfig cfg;
};
TORCH_MODULE(MatchingHead);

}  // namespace malm
