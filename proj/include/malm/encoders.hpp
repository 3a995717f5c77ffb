#pragma once

#include <array>
#include <cstdint>

#include <torch/torch.h>

#include "malm/data.hpp"
#include "malm/masking.hpp"

namespace malm {

// -------------------------------------------------------------------------
// transformer building blocks (pre-norm, GELU MLP at ratio 4)
// -------------------------------------------------------------------------

struct SelfAttentionImpl : torch::nn::Module {
    SelfAttentionImpl(int64_t dim, int64_t heads);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Linear qkv{nullptr};
    torch::nn::Linear proj{nullptr};
    int64_t heads;
};
TORCH_MODULE(SelfAttention);

struct EncoderBlockImpl : torch::nn::Module {
    EncoderBlockImpl(int64_t dim, int64_t heads);
    torch::Tensor forward(torch::Tensor x);

    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    SelfAttention attn{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(EncoderBlock);

struct TransformerStackImpl : torch::nn::Module {
    TransformerStackImpl(int64_t dim, int64_t depth, int64_t heads, bool final_norm);
    torch::Tensor forward(torch::Tensor x);

    torch::nn::ModuleList blocks;
    torch::nn::LayerNorm norm{nullptr};  // null when final_norm = false
};
TORCH_MODULE(TransformerStack);

/// Multi-head cross attention used inside the recipe fusion decoder.
struct CrossAttentionMHImpl : torch::nn::Module {
    CrossAttentionMHImpl(int64_t dim, int64_t heads);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& ctx);

    torch::nn::Linear to_q{nullptr}, to_kv{nullptr}, proj{nullptr};
    int64_t heads;
};
TORCH_MODULE(CrossAttentionMH);

struct FusionLayerImpl : torch::nn::Module {
    FusionLayerImpl(int64_t dim, int64_t heads);
    torch::Tensor forward(torch::Tensor x, const torch::Tensor& ctx);

    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr};
    SelfAttention self_attn{nullptr};
    CrossAttentionMH cross_attn{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(FusionLayer);

// -------------------------------------------------------------------------
// image encoder (small ViT, instantiated twice as student and teacher)
// -------------------------------------------------------------------------

struct ImageEncoderConfig {
    int64_t image_size = 32;
    int64_t patch_size = 8;
    int64_t channels = 1;
    int64_t hidden_dim = 64;
    int64_t depth = 2;
    int64_t heads = 2;
    int64_t num_patches() const {
        int64_t g = image_size / patch_size;
        return g * g;
    }
    void validate() const;
};

struct ImageEncoderImpl : torch::nn::Module {
    explicit ImageEncoderImpl(const ImageEncoderConfig& cfg);

    /// Full sequence: CLS + all patches, B x (1+P) x hidden.
    torch::Tensor encode_full(const torch::Tensor& images);
    /// Visible tokens only: CLS + unmasked patches in original order,
    /// B x (1+P-|M|) x hidden. Positional embeddings of masked positions are
    /// not consumed here; they are added back at mask-token insertion.
    torch::Tensor encode_visible(const torch::Tensor& images, const MaskSpec& mask);

    torch::Tensor patchify(const torch::Tensor& images) const;  // B x P x (ps*ps*C)

    ImageEncoderConfig cfg;
    torch::nn::Linear patch_embed{nullptr};
    torch::Tensor cls_token;  // 1 x 1 x hidden
    torch::Tensor pos_embed;  // 1 x (1+P) x hidden
    TransformerStack stack{nullptr};

private:
    torch::Tensor run(torch::Tensor tokens_with_cls);
};
TORCH_MODULE(ImageEncoder);

// -------------------------------------------------------------------------
// hierarchical recipe encoder
// -------------------------------------------------------------------------

struct RecipeEncoderConfig {
    int64_t vocab_size = 0;
    int64_t hidden_dim = 64;
    int64_t component_depth = 2;
    int64_t component_heads = 2;
    int64_t fusion_depth = 1;
    int64_t fusion_heads = 2;
    DataCaps caps;
    /// Diagnostic switch: drop positional embeddings for a component
    /// (title, ingredients, instructions) to expose permutation equivariance.
    std::array<bool, 3> use_positional{true, true, true};
    void validate() const;
};

struct RecipeEncoderImpl : torch::nn::Module {
    explicit RecipeEncoderImpl(const RecipeEncoderConfig& cfg);

    /// Fused token features, B x S x hidden with S = sum of the caps. Each
    /// component runs through its own encoder; the fusion decoder lets every
    /// component cross-attend to the other two; outputs are concatenated in
    /// (title, ingredients, instructions) order.
    torch::Tensor forward(const torch::Tensor& title_ids,
                          const torch::Tensor& ingredient_ids,
                          const torch::Tensor& instruction_ids,
                          const MaskSpec* token_mask = nullptr);

    RecipeEncoderConfig cfg;
    torch::nn::Embedding token_embed{nullptr};
    torch::Tensor mask_token;  // used only in the mask-both-modalities mode
    std::array<torch::Tensor, 3> pos_embed;
    std::array<TransformerStack, 3> component{nullptr, nullptr, nullptr};
    std::array<torch::nn::ModuleList, 3> fusion;
    std::array<torch::nn::LayerNorm, 3> fusion_norm{nullptr, nullptr, nullptr};

private:
    torch::Tensor embed_component(int comp, const torch::Tensor& ids,
                                  const MaskSpec* token_mask, int64_t offset);
};
TORCH_MODULE(RecipeEncoder);

// -------------------------------------------------------------------------
// projection into the shared dimension
// -------------------------------------------------------------------------

struct ProjectionImpl : torch::nn::Module {
    ProjectionImpl(int64_t in_dim, int64_t out_dim);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Linear linear{nullptr};
    int64_t in_dim, out_dim;
};
TORCH_MODULE(Projection);

/// Copies parameters from `src` into `dst` by name; shapes must match.
void copy_parameters(const torch::nn::Module& src, torch::nn::Module& dst);

}  // namespace malm
