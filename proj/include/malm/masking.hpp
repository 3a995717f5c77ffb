#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace malm {

/// Per-sample set of masked sequence positions. For images the maskable
/// positions are 1..P (position 0 is CLS and never masked); every sample
/// masks exactly floor(ratio * P) positions.
struct MaskSpec {
    int64_t num_positions = 0;      // P
    double ratio = 0.0;
    torch::Tensor seq_positions;    // B x m int64, sorted ascending, values in [1, P]

    int64_t batch() const { return seq_positions.size(0); }
    int64_t count() const { return seq_positions.size(1); }

    /// Complementary 0-based patch indices, B x (P - m), sorted.
    torch::Tensor visible_patches() const;
    /// Visible sequence positions including CLS, B x (1 + P - m).
    torch::Tensor visible_seq_positions() const;

    /// Uniform without replacement per sample, platform-stable given seed.
    /// ratio must lie in [0, 1): the student needs at least one visible patch.
    static MaskSpec sample(int64_t num_positions, double ratio, int64_t batch,
                           uint64_t seed);
    /// Wraps explicit indices (tests, recipe-side masking); validates range,
    /// per-sample sortedness and uniform count.
    static MaskSpec from_indices(int64_t num_positions, torch::Tensor seq_positions);
};

/// Holds the learnable mask token and the positional table used when masked
/// positions are re-inserted, and performs the scatter/gather bookkeeping
/// between visible-only and full-length sequences.
struct MaskAssemblerImpl : torch::nn::Module {
    MaskAssemblerImpl(int64_t num_positions, int64_t dim);

    /// visible: B x (1+P-m) x D student features (CLS first, patches in
    /// original order). Returns the full B x (1+P) x D sequence where each
    /// masked position holds mask_token + its positional embedding.
    torch::Tensor assemble(const torch::Tensor& visible, const MaskSpec& mask);

    /// Inverse bookkeeping: pulls CLS + visible rows out of a full sequence.
    torch::Tensor extract_visible(const torch::Tensor& full, const MaskSpec& mask) const;
    /// Rows at the masked positions, B x m x D.
    torch::Tensor gather_masked(const torch::Tensor& full, const MaskSpec& mask) const;

    torch::Tensor mask_token;  // D
    torch::Tensor pos_embed;   // (1+P) x D
    int64_t num_positions;
    int64_t dim;
};
TORCH_MODULE(MaskAssembler);

}  // namespace malm
