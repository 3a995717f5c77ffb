#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "malm/model.hpp"

namespace malm {

struct BagScores {
    double med_rank = 0;
    double r1 = 0, r5 = 0, r10 = 0;  // percent
};

struct RetrievalReport {
    std::string direction;  // "image-to-recipe" | "recipe-to-image"
    int64_t bag_size = 0;
    int64_t n_bags = 0;
    std::vector<BagScores> per_bag;
    double med_rank = 0;  // means over bags
    double r1 = 0, r5 = 0, r10 = 0;
};

/// Unit-normalized global embeddings for every pair: student-encoder CLS
/// (projected) for images, pooled fused tokens (projected) for recipes.
/// No masking at inference; matching and reconstruction heads are unused.
std::pair<torch::Tensor, torch::Tensor> embed_corpus(MalmModel& model,
                                                     const std::vector<SamplePair>& pairs,
                                                     int64_t batch_size = 64);

/// Bagged retrieval protocol: per bag, cosine-similarity ranking of the true
/// pair (1-based; ties resolved pessimistically to the worst rank), median
/// rank and R@{1,5,10}, then means over bags. Bags are sampled without
/// replacement within a bag, deterministically from the seed.
RetrievalReport rank_and_score(const torch::Tensor& image_embeddings,
                               const torch::Tensor& recipe_embeddings,
                               const std::string& direction, int64_t bag_size,
                               int64_t n_bags, uint64_t seed);

nlohmann::json report_to_json(const RetrievalReport& report);
std::string report_table(const std::vector<RetrievalReport>& reports);

// ------------------------------------------------------------- ablation --

struct AblationVariant {
    std::string name;
    std::map<std::string, std::string> overrides;  // config deltas over the base
};

std::vector<AblationVariant> table2_variants();
std::vector<AblationVariant> table3_variants();

struct AblationRow {
    std::string name;
    bool failed = false;
    std::string error;
    std::vector<double> r1_per_seed;
    std::vector<double> med_rank_per_seed;
    double r1_mean = 0, r1_std = 0;
    double med_rank_mean = 0;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::vector<uint64_t> seeds;
};

/// Trains every variant on a shared seed set and evaluates image-to-recipe
/// retrieval on the held-out pairs. Per-row failures are recorded and the
/// remaining rows continue.
AblationTable run_ablation(const std::vector<SamplePair>& train_pairs,
                           const std::vector<SamplePair>& eval_pairs,
                           const Tokenizer& tokenizer, const RunConfig& base,
                           const std::vector<AblationVariant>& variants,
                           const std::vector<uint64_t>& seeds);

std::string ablation_table_text(const AblationTable& table);
nlohmann::json ablation_table_json(const AblationTable& table);

// --------------------------------------------------------- localization --

struct LocalizationResult {
    double score = 0;      // mean attention mass on the true ingredient tokens
    double chance = 0;     // expected mass under uniform attention
    double null_p95 = 0;   // 95th percentile of the permutation null
    double null_mean = 0;
    double null_std = 0;
    double p_value = 1.0;
    int64_t n_permutations = 0;
    int64_t n_patches_scored = 0;
};

/// Pure scoring核: fraction of each ground-truth patch row's attention mass
/// on that patch's ingredient tokens. Exposed for direct unit testing.
double localization_score_from_attention(
    const torch::Tensor& image_attention,  // B x (1+P) x S
    const torch::Tensor& token_ids,        // B x S
    const std::vector<std::vector<std::pair<int64_t, int64_t>>>& patch_class_tokens);

/// Diagnostic for the local-matching claim: how much of each painted patch's
/// cross-attention lands on its own ingredient's tokens, against a
/// random-patch permutation null. Rejects pairs without ground truth.
LocalizationResult attention_localization(MalmModel& model,
                                          const std::vector<SamplePair>& pairs,
                                          const GroundTruth& groundtruth,
                                          const std::vector<std::string>& class_words,
                                          const Tokenizer& tokenizer, uint64_t seed,
                                          int64_t n_permutations = 200,
                                          int64_t batch_size = 32);

}  // namespace malm
