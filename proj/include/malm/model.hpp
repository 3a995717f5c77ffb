#pragma once

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "malm/config.hpp"
#include "malm/data.hpp"
#include "malm/distillation.hpp"
#include "malm/encoders.hpp"
#include "malm/masking.hpp"
#include "malm/matching.hpp"

namespace malm {

struct ModelConfig {
    ImageEncoderConfig image;
    RecipeEncoderConfig recipe;
    int64_t shared_dim = 64;
    MatchingConfig matching;
    DistillConfig distill;
    double mask_ratio = 0.75;
    bool mask_recipe = false;

    static ModelConfig from_run_config(const RunConfig& cfg, int64_t vocab_size);
    void validate() const;
};

/// Named scalar losses plus the weighted total.
struct LossBundle {
    torch::Tensor itc;    // triplet loss on encoder globals
    torch::Tensor gc;     // global contrastive
    torch::Tensor lc;     // local contrastive
    torch::Tensor dist;   // masked self-distillation (both modalities when enabled)
    torch::Tensor total;  // filled by total_loss
};

struct StepOutputs {
    LossBundle losses;
    MatchOutputs match;
    torch::Tensor image_tokens;     // I_f: mask-appended projected sequence
    torch::Tensor recipe_tokens;    // R_f: projected fused recipe sequence
    torch::Tensor reconstructed;    // predicted teacher features
    torch::Tensor teacher_targets;  // detached
};

struct MalmModelImpl : torch::nn::Module {
    explicit MalmModelImpl(const ModelConfig& cfg);

    /// Copies the student image encoder (and recipe encoder when both
    /// modalities are masked) into the teacher(s); teachers never get grads.
    void init_teacher();

    /// Full training forward: student visible encoding, mask-token assembly,
    /// teacher targets, two-level matching and reconstruction. The loss
    /// components come back unweighted; the trainer combines them.
    StepOutputs forward_train(const PairedBatch& batch, const MaskSpec& mask,
                              const MaskSpec* recipe_mask, double triplet_margin);

    /// Inference path: encoder outputs only, no masking, unit-normalized.
    torch::Tensor embed_images(const torch::Tensor& images);
    torch::Tensor embed_recipes(const PairedBatch& batch);
    /// Cross-attention maps for a full (unmasked) forward; used by the
    /// attention-localization diagnostic.
    MatchOutputs match_full(const PairedBatch& batch);

    /// Parameters by optimizer group; teacher parameters never appear.
    std::vector<torch::Tensor> image_encoder_parameters();
    std::vector<torch::Tensor> main_parameters();

    void ema_step(double momentum);

    ModelConfig cfg;
    ImageEncoder student{nullptr};
    ImageEncoder teacher{nullptr};
    RecipeEncoder recipe{nullptr};
    RecipeEncoder teacher_recipe{nullptr};  // only when mask_recipe
    Projection proj_image{nullptr};
    Projection proj_recipe{nullptr};
    MaskAssembler assembler{nullptr};
    MatchingHead matching{nullptr};
    ReconstructionHead recon{nullptr};
    ReconstructionHead recipe_recon{nullptr};  // only when mask_recipe
};
TORCH_MODULE(MalmModel);

/// Bidirectional triplet-margin loss with batch-hard negatives on cosine
/// similarity, averaged over both directions and the batch.
torch::Tensor triplet_loss(const torch::Tensor& image_global,
                           const torch::Tensor& recipe_global, double margin);

}  // namespace malm
