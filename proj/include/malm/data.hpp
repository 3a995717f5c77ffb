#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "malm/tokenizer.hpp"

namespace malm {

/// Per-component token caps. Sequences are truncated and padded to exactly
/// these lengths, so the fused recipe length S is always their sum.
struct DataCaps {
    int64_t title = 16;
    int64_t ingredients = 64;
    int64_t instructions = 128;
    int64_t total() const { return title + ingredients + instructions; }
};

struct RecipeDoc {
    std::string id;
    std::string title_text;
    std::vector<std::string> ingredient_lines;
    std::vector<std::string> instruction_lines;
    std::string image_ref;
    // token ids, padded to the caps used at load time
    std::vector<int64_t> title_ids;
    std::vector<int64_t> ingredient_ids;
    std::vector<int64_t> instruction_ids;
};

/// One aligned image-recipe pair. The image is a C x H x W double tensor
/// with values in [0, 1], H == W, H divisible by the patch size.
struct SamplePair {
    torch::Tensor image;
    RecipeDoc recipe;
};

struct SyntheticSpec {
    int64_t vocab_size = 64;
    int64_t n_ingredient_classes = 12;
    int64_t grid_rows = 4;
    int64_t grid_cols = 4;
    int64_t patch_size = 8;  // pixels per patch side
    int64_t channels = 1;
    double noise_std = 0.0;
    uint64_t seed = 0;

    int64_t num_patches() const { return grid_rows * grid_cols; }
    int64_t image_size() const { return grid_rows * patch_size; }
    /// Throws Error when the spec cannot be honored (see generator contract).
    void validate() const;
};

/// Sample id -> (0-based patch index -> ingredient class index).
using GroundTruth = std::map<std::string, std::map<int64_t, int64_t>>;

struct SyntheticData {
    std::vector<SamplePair> pairs;
    GroundTruth groundtruth;
    std::vector<std::string> class_words;
    Tokenizer tokenizer;  // frozen synthetic vocabulary
    SyntheticSpec spec;
};

/// Deterministic class texture for one patch, values in [0, 1] quantized to
/// 8-bit levels so PNG materialization round-trips exactly.
torch::Tensor synthetic_class_pattern(int64_t class_id, int64_t patch_size,
                                      int64_t channels);

/// Procedural paired data with known patch -> ingredient correspondence.
/// Every sample paints k (uniform in [2,5]) class patterns into the patches
/// owned by those classes and writes a templated recipe naming exactly those
/// classes.
SyntheticData generate_synthetic(const SyntheticSpec& spec, int64_t n,
                                 const DataCaps& caps);

/// Writes dir/dataset.json (Recipe1M-format), dir/images/*.png and
/// dir/groundtruth.json.
void materialize_synthetic(const SyntheticData& data, const std::string& dir);

GroundTruth load_groundtruth(const std::string& path,
                             std::vector<std::string>* class_words = nullptr);

struct LoadReport {
    int64_t total_records = 0;
    int64_t missing_image = 0;     // unpaired entries, filtered silently
    int64_t unreadable_images = 0; // files that failed to decode, skipped with warning
};

/// Loads a Recipe1M-format JSON array, keeping only paired entries. Text is
/// tokenized with `tok` (fitted in place unless frozen). Images are read from
/// `image_root`, converted to `channels` planes, resized to `image_size` and
/// scaled to [0, 1].
std::vector<SamplePair> load_recipe1m(const std::string& path,
                                      const std::string& image_root,
                                      Tokenizer& tok, const DataCaps& caps,
                                      int64_t image_size, int64_t channels,
                                      LoadReport* report = nullptr);

/// Re-tokenizes documents in place (used when a frozen checkpoint vocabulary
/// replaces the fit-time one).
void retokenize(std::vector<SamplePair>& pairs, const Tokenizer& tok,
                const DataCaps& caps);

/// Reads one image file through the same conversion as the dataset loader.
/// Throws on unreadable files.
torch::Tensor decode_image_file(const std::string& path, int64_t channels,
                                int64_t image_size);

struct PairedBatch {
    torch::Tensor images;           // B x C x H x W
    torch::Tensor title_ids;        // B x cap_title (int64)
    torch::Tensor ingredient_ids;   // B x cap_ingredients
    torch::Tensor instruction_ids;  // B x cap_instructions
    std::vector<std::string> ids;
    std::vector<int64_t> source_indices;
    int64_t size() const { return images.size(0); }
};

PairedBatch collate(const std::vector<SamplePair>& pairs,
                    const std::vector<int64_t>& indices);

/// Seeded epoch shuffling into aligned batches. A trailing batch smaller
/// than 2 is always dropped: the contrastive losses need negatives.
class Batcher {
public:
    Batcher(const std::vector<SamplePair>& pairs, int64_t batch_size,
            uint64_t seed, bool drop_last);

    std::vector<PairedBatch> epoch(int64_t epoch_index) const;
    int64_t batches_per_epoch() const;

private:
    const std::vector<SamplePair>& pairs_;
    int64_t batch_size_;
    uint64_t seed_;
    bool drop_last_;
};

}  // namespace malm
