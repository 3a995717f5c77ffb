#include "malm/matching.hpp"

#include <cmath>

#include "malm/common.hpp"

namespace malm {

InvariantCounters& invariant_counters() {
    static InvariantCounters counters;
    return counters;
}

namespace {

void assert_rows_normalized(const torch::Tensor& attn) {
    torch::NoGradGuard no_grad;
    torch::Tensor sums = attn.detach().sum(-1);
    double err = (sums - 1.0).abs().max().item<double>();
    check(err <= 1e-5, "attention rows must sum to 1 (max error " + std::to_string(err) + ")");
    check(attn.detach().isfinite().all().item<bool>(), "attention weights must be finite");
    invariant_counters().attention_rows_checked += attn.numel() / attn.size(-1);
}

}  // namespace

torch::Tensor l2_normalize_rows(const torch::Tensor& x) {
    return x / x.norm(2, -1, true).clamp_min(1e-12);
}

// ------------------------------------------------------- cross attention --

CrossAttentionLayerImpl::CrossAttentionLayerImpl(int64_t dim, int64_t heads_)
    : heads(heads_) {
    check(dim % heads == 0, "matching dim must be divisible by heads");
    auto opts = torch::nn::LinearOptions(dim, dim).bias(false);
    to_q = register_module("to_q", torch::nn::Linear(opts));
    to_k = register_module("to_k", torch::nn::Linear(opts));
    to_v = register_module("to_v", torch::nn::Linear(opts));
}

std::pair<torch::Tensor, torch::Tensor> CrossAttentionLayerImpl::forward(
    const torch::Tensor& x, const torch::Tensor& ctx) {
    check(x.size(-1) == ctx.size(-1), "query/context dim mismatch");
    int64_t B = x.size(0), N = x.size(1), M = ctx.size(1), D = x.size(2);
    int64_t Dh = D / heads;
    torch::Tensor q = to_q(x).view({B, N, heads, Dh}).permute({0, 2, 1, 3});
    torch::Tensor k = to_k(ctx).view({B, M, heads, Dh}).permute({0, 2, 1, 3});
    torch::Tensor v = to_v(ctx).view({B, M, heads, Dh}).permute({0, 2, 1, 3});
    double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
    torch::Tensor attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
    torch::Tensor out = torch::matmul(attn, v).permute({0, 2, 1, 3}).reshape({B, N, D});
    return {out, attn.mean(1)};  // attention averaged over heads
}

CrossAttentionStackImpl::CrossAttentionStackImpl(int64_t dim, int64_t depth, int64_t heads) {
    check(depth >= 1, "cross-attention depth must be >= 1");
    layers = register_module("layers", torch::nn::ModuleList());
    for (int64_t i = 0; i < depth; ++i) layers->push_back(CrossAttentionLayer(dim, heads));
}

std::pair<torch::Tensor, torch::Tensor> CrossAttentionStackImpl::forward(
    torch::Tensor x, const torch::Tensor& ctx) {
    torch::Tensor attn;
    for (const auto& layer : *layers)
        std::tie(x, attn) = layer->as<CrossAttentionLayer>()->forward(x, ctx);
    assert_rows_normalized(attn);
    return {x, attn};
}

// ---------------------------------------------------- contrastive pieces --

torch::Tensor contrastive_log_ratio(const torch::Tensor& x, const torch::Tensor& y,
                                    const torch::Tensor& tau, bool normalize,
                                    bool literal_denominator) {
    check(x.dim() == 2 && y.dim() == 2 && x.sizes() == y.sizes(),
          "contrastive inputs must be matching B x D matrices");
    int64_t B = x.size(0);
    check(B >= 2, "contrastive ratio needs a batch of at least 2");
    torch::Tensor xn = normalize ? l2_normalize_rows(x) : x;
    torch::Tensor yn = normalize ? l2_normalize_rows(y) : y;
    torch::Tensor logits = torch::matmul(xn, yn.transpose(0, 1)) / tau;  // B x B
    torch::Tensor diagonal = logits.diagonal();
    torch::Tensor denom_logits = logits;
    if (literal_denominator) {
        torch::Tensor eye = torch::eye(B, torch::kBool);
        denom_logits = logits.masked_fill(eye, -std::numeric_limits<double>::infinity());
    }
    return diagonal - torch::logsumexp(denom_logits, 1);
}

namespace {

torch::Tensor reduce_batch(const torch::Tensor& per_sample, const MatchingConfig& cfg) {
    return cfg.reduction_mean ? per_sample.mean() : per_sample.sum();
}

torch::Tensor direction_average(const torch::Tensor& log_fwd, const torch::Tensor& log_bwd,
                                const MatchingConfig& cfg) {
    if (cfg.literal_sum_loss) return (log_fwd.exp() + log_bwd.exp()) / 2.0;
    return -(log_fwd + log_bwd) / 2.0;
}

}  // namespace

torch::Tensor bidirectional_contrastive_loss(const torch::Tensor& x, const torch::Tensor& y,
                                             const torch::Tensor& tau,
                                             const MatchingConfig& cfg) {
    torch::Tensor fwd = contrastive_log_ratio(x, y, tau, cfg.normalize,
                                              cfg.literal_eq7_denominator);
    torch::Tensor bwd = contrastive_log_ratio(y, x, tau, cfg.normalize,
                                              cfg.literal_eq7_denominator);
    return reduce_batch(direction_average(fwd, bwd, cfg), cfg);
}

std::pair<torch::Tensor, torch::Tensor> global_features(const MatchOutputs& out) {
    torch::Tensor image_global = out.image_features.index(
        {torch::indexing::Slice(), 0, torch::indexing::Slice()});
    torch::Tensor recipe_global = out.recipe_features.mean(1);
    return {image_global, recipe_global};
}

torch::Tensor local_recipe_features(const torch::Tensor& image_attention,
                                    const torch::Tensor& recipe_features) {
    check(image_attention.size(0) == recipe_features.size(0) &&
              image_attention.size(2) == recipe_features.size(1),
          "attention/recipe shape mismatch");
    int64_t S = recipe_features.size(1);
    return torch::matmul(image_attention, recipe_features) / static_cast<double>(S);
}

torch::Tensor local_contrastive_loss(const torch::Tensor& image_features,
                                     const torch::Tensor& local_recipe,
                                     const torch::Tensor& tau, const MatchingConfig& cfg) {
    check(image_features.sizes() == local_recipe.sizes(),
          "local loss inputs must be matching B x L x D stacks");
    int64_t B = image_features.size(0);
    check(B >= 2, "local contrastive loss needs a batch of at least 2");

    torch::Tensor x = cfg.normalize ? l2_normalize_rows(image_features) : image_features;
    torch::Tensor y = cfg.normalize ? l2_normalize_rows(local_recipe) : local_recipe;
    // per position p: logits[p, i, k] = x[i, p] . y[k, p] / tau
    torch::Tensor logits = torch::einsum("ipd,kpd->pik", {x, y}) / tau;  // L x B x B
    torch::Tensor diag_fwd = logits.diagonal(0, 1, 2);                   // L x B
    torch::Tensor logits_bwd = logits.transpose(1, 2);
    torch::Tensor diag_bwd = logits_bwd.diagonal(0, 1, 2);

    torch::Tensor denom_fwd = logits, denom_bwd = logits_bwd;
    if (cfg.literal_eq7_denominator) {
        torch::Tensor eye = torch::eye(B, torch::kBool).unsqueeze(0);
        denom_fwd = logits.masked_fill(eye, -std::numeric_limits<double>::infinity());
        denom_bwd = logits_bwd.masked_fill(eye, -std::numeric_limits<double>::infinity());
    }
    torch::Tensor log_fwd = diag_fwd - torch::logsumexp(denom_fwd, 2);
    torch::Tensor log_bwd = diag_bwd - torch::logsumexp(denom_bwd, 2);
    torch::Tensor per = direction_average(log_fwd, log_bwd, cfg).mean(0);  // mean over L -> B
    return reduce_batch(per, cfg);
}

// --------------------------------------------------------- matching head --

MatchingHeadImpl::MatchingHeadImpl(int64_t dim, MatchingConfig cfg_) : cfg(cfg_) {
    check(cfg.temperature_init >= MatchingConfig::kTempMin &&
              cfg.temperature_init <= MatchingConfig::kTempMax,
          "temperature_init outside the clamp bounds");
    image_stack = register_module("image_stack",
                                  CrossAttentionStack(dim, cfg.depth, cfg.heads));
    recipe_stack = register_module("recipe_stack",
                                   CrossAttentionStack(dim, cfg.depth, cfg.heads));
    log_inv_temperature = register_parameter(
        "log_inv_temperature", torch::tensor(std::log(1.0 / cfg.temperature_init)));
}

MatchOutputs MatchingHeadImpl::forward(const torch::Tensor& image_tokens,
                                       const torch::Tensor& recipe_tokens) {
    MatchOutputs out;
    std::tie(out.image_features, out.image_attention) =
        image_stack(image_tokens, recipe_tokens);
    std::tie(out.recipe_features, out.recipe_attention) =
        recipe_stack(recipe_tokens, out.image_features);
    return out;
}

torch::Tensor MatchingHeadImpl::temperature() const {
    return torch::exp(-log_inv_temperature);
}

void MatchingHeadImpl::clamp_temperature() {
    torch::NoGradGuard no_grad;
    const double lo = std::log(1.0 / MatchingConfig::kTempMax);
    const double hi = std::log(1.0 / MatchingConfig::kTempMin);
    log_inv_temperature.clamp_(lo, hi);
}

torch::Tensor MatchingHeadImpl::global_loss(const torch::Tensor& image_global,
                                            const torch::Tensor& recipe_global) {
    return bidirectional_contrastive_loss(image_global, recipe_global, temperature(), cfg);
}

torch::Tensor MatchingHeadImpl::local_loss(const torch::Tensor& image_features,
                                           const torch::Tensor& local_recipe) {
    torch::Tensor x = image_features, y = local_recipe;
    if (!cfg.include_cls_in_local) {
        x = x.index({torch::indexing::Slice(), torch::indexing::Slice(1)});
        y = y.index({torch::indexing::Slice(), torch::indexing::Slice(1)});
    }
    return local_contrastive_loss(x, y, temperature(), cfg);
}

}  // namespace malm
