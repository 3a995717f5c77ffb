#include "malm/masking.hpp"

#include <algorithm>
#include <vector>

#include "malm/common.hpp"

namespace malm {

MaskSpec MaskSpec::sample(int64_t num_positions, double ratio, int64_t batch,
                          uint64_t seed) {
    check(num_positions >= 1, "sample_mask: need at least one position");
    check(batch >= 1, "sample_mask: batch must be >= 1");
    check(ratio >= 0.0 && ratio < 1.0,
          "mask ratio must lie in [0, 1): at least one patch must stay visible");
    const int64_t m = static_cast<int64_t>(ratio * static_cast<double>(num_positions));

    torch::Tensor indices = torch::empty({batch, m}, torch::kInt64);
    std::vector<int64_t> pool(static_cast<size_t>(num_positions));
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t i = 0; i < num_positions; ++i) pool[static_cast<size_t>(i)] = i + 1;
        SplitMix64 rng(mix_seed(seed, 0x6d61736bu, static_cast<uint64_t>(b)));
        for (int64_t j = 0; j < m; ++j) {
            uint64_t pick = static_cast<uint64_t>(j) +
                            rng.bounded(static_cast<uint64_t>(num_positions - j));
            std::swap(pool[static_cast<size_t>(j)], pool[pick]);
        }
        std::sort(pool.begin(), pool.begin() + m);
        for (int64_t j = 0; j < m; ++j)
            indices[b][j] = pool[static_cast<size_t>(j)];
    }

    MaskSpec spec;
    spec.num_positions = num_positions;
    spec.ratio = ratio;
    spec.seq_positions = indices;
    return spec;
}

MaskSpec MaskSpec::from_indices(int64_t num_positions, torch::Tensor seq_positions) {
    check(seq_positions.dim() == 2, "mask indices must be B x m");
    check(seq_positions.dtype() == torch::kInt64, "mask indices must be int64");
    auto acc = seq_positions.accessor<int64_t, 2>();
    for (int64_t b = 0; b < seq_positions.size(0); ++b) {
        for (int64_t j = 0; j < seq_positions.size(1); ++j) {
            int64_t v = acc[b][j];
            check(v >= 1 && v <= num_positions,
                  "mask index out of range (CLS position 0 is never maskable): " +
                      std::to_string(v));
            if (j > 0) check(acc[b][j - 1] < v, "mask indices must be strictly increasing");
        }
    }
    MaskSpec spec;
    spec.num_positions = num_positions;
    spec.ratio = seq_positions.size(1) == 0
                     ? 0.0
                     : static_cast<double>(seq_positions.size(1)) /
                           static_cast<double>(num_positions);
    spec.seq_positions = std::move(seq_positions);
    return spec;
}

torch::Tensor MaskSpec::visible_patches() const {
    const int64_t B = batch(), m = count(), P = num_positions;
    torch::Tensor out = torch::empty({B, P - m}, torch::kInt64);
    auto idx = seq_positions.accessor<int64_t, 2>();
    auto acc = out.accessor<int64_t, 2>();
    for (int64_t b = 0; b < B; ++b) {
        int64_t j = 0, w = 0;
        for (int64_t p = 1; p <= P; ++p) {
            if (j < m && idx[b][j] == p) { ++j; continue; }
            acc[b][w++] = p - 1;  // 0-based patch index
        }
    }
    return out;
}

torch::Tensor MaskSpec::visible_seq_positions() const {
    torch::Tensor patches = visible_patches();
    torch::Tensor cls = torch::zeros({batch(), 1}, torch::kInt64);
    return torch::cat({cls, patches + 1}, 1);
}

MaskAssemblerImpl::MaskAssemblerImpl(int64_t num_positions_, int64_t dim_)
    : num_positions(num_positions_), dim(dim_) {
    mask_token = register_parameter("mask_token", torch::randn({dim}) * 0.02);
    pos_embed = register_parameter("pos_embed", torch::randn({num_positions + 1, dim}) * 0.02);
}

torch::Tensor MaskAssemblerImpl::assemble(const torch::Tensor& visible, const MaskSpec& mask) {
    check(mask.num_positions == num_positions, "mask/assembler size mismatch");
    const int64_t B = visible.size(0), m = mask.count(), P = num_positions;
    check(visible.size(1) == 1 + P - m,
          "assemble: visible length " + std::to_string(visible.size(1)) +
              " != 1 + P - |M| = " + std::to_string(1 + P - m));
    check(visible.size(2) == dim, "assemble: feature dim mismatch");

    // masked rows: shared token + positional embedding of each masked position
    torch::Tensor pos_rows = pos_embed.index({mask.seq_positions});       // B x m x D
    torch::Tensor mask_rows = mask_token.view({1, 1, dim}) + pos_rows;    // B x m x D

    // restore order: for every output position, index into [visible | masked]
    torch::Tensor source = torch::cat({visible, mask_rows}, 1);           // B x (1+P) x D
    torch::Tensor restore = torch::empty({B, 1 + P}, torch::kInt64);
    auto idx = mask.seq_positions.accessor<int64_t, 2>();
    auto acc = restore.accessor<int64_t, 2>();
    for (int64_t b = 0; b < B; ++b) {
        int64_t j = 0;    // next masked rank
        int64_t v = 0;    // next visible rank
        for (int64_t p = 0; p <= P; ++p) {
            if (j < m && p > 0 && idx[b][j] == p) {
                acc[b][p] = (1 + P - m) + j;
                ++j;
            } else {
                acc[b][p] = v++;
            }
        }
    }
    return torch::gather(source, 1, restore.unsqueeze(-1).expand({B, 1 + P, dim}));
}

torch::Tensor MaskAssemblerImpl::extract_visible(const torch::Tensor& full,
                                                 const MaskSpec& mask) const {
    check(full.size(1) == 1 + num_positions, "extract_visible: bad sequence length");
    torch::Tensor vis = mask.visible_seq_positions();  // B x (1+P-m)
    return torch::gather(full, 1,
                         vis.unsqueeze(-1).expand({full.size(0), vis.size(1), full.size(2)}));
}

torch::Tensor MaskAssemblerImpl::gather_masked(const torch::Tensor& full,
                                               const MaskSpec& mask) const {
    check(full.size(1) == 1 + num_positions, "gather_masked: bad sequence length");
    return torch::gather(full, 1,
                         mask.seq_positions.unsqueeze(-1).expand(
                             {full.size(0), mask.count(), full.size(2)}));
}

}  // namespace malm
