// Small synthetic setups shared by the heavier test suites.
#pragma once

#include <numeric>

#include "malm/common.hpp"
#include "malm/data.hpp"
#include "malm/model.hpp"

namespace malm::testing {

inline SyntheticSpec tiny_spec(uint64_t seed) {
    SyntheticSpec spec;
    spec.grid_rows = spec.grid_cols = 3;  // P = 9
    spec.patch_size = 4;                  // 12 x 12 images
    spec.channels = 1;
    spec.n_ingredient_classes = 6;
    spec.vocab_size = 20;
    spec.noise_std = 0.0;
    spec.seed = seed;
    return spec;
}

inline DataCaps tiny_caps() { return DataCaps{12, 5, 12}; }

inline ModelConfig tiny_model_cfg(int64_t vocab_size) {
    ModelConfig cfg;
    cfg.image.image_size = 12;
    cfg.image.patch_size = 4;
    cfg.image.channels = 1;
    cfg.image.hidden_dim = 8;
    cfg.image.depth = 1;
    cfg.image.heads = 2;
    cfg.recipe.vocab_size = vocab_size;
    cfg.recipe.hidden_dim = 8;
    cfg.recipe.component_depth = 1;
    cfg.recipe.component_heads = 2;
    cfg.recipe.fusion_depth = 1;
    cfg.recipe.fusion_heads = 2;
    cfg.recipe.caps = tiny_caps();
    cfg.shared_dim = 8;
    cfg.matching.depth = 1;
    cfg.matching.heads = 2;
    cfg.distill.depth = 1;
    cfg.distill.heads = 2;
    cfg.mask_ratio = 0.5;
    return cfg;
}

struct TinyWorld {
    SyntheticData data;
    MalmModel model{nullptr};
    PairedBatch batch;
    MaskSpec mask;
};

inline TinyWorld tiny_world(uint64_t seed, int64_t n_pairs = 8, int64_t batch_size = 4) {
    TinyWorld w;
    w.data = generate_synthetic(tiny_spec(seed), n_pairs, tiny_caps());
    reseed(static_cast<int64_t>(seed));
    w.model = MalmModel(tiny_model_cfg(w.data.tokenizer.vocab_size()));
    std::vector<int64_t> idx(static_cast<size_t>(batch_size));
    std::iota(idx.begin(), idx.end(), 0);
    w.batch = collate(w.data.pairs, idx);
    w.mask = MaskSpec::sample(w.model->cfg.image.num_patches(), w.model->cfg.mask_ratio,
                              batch_size, mix_seed(seed, 0xABu));
    return w;
}

}  // namespace malm::testing
