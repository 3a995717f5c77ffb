#include "malm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "malm/common.hpp"
#include "malm/training.hpp"

namespace malm {

std::pair<torch::Tensor, torch::Tensor> embed_corpus(MalmModel& model,
                                                     const std::vector<SamplePair>& pairs,
                                                     int64_t batch_size) {
    check(!pairs.empty(), "embed_corpus: empty corpus");
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> image_chunks, recipe_chunks;
    for (size_t start = 0; start < pairs.size(); start += static_cast<size_t>(batch_size)) {
        size_t end = std::min(pairs.size(), start + static_cast<size_t>(batch_size));
        std::vector<int64_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), static_cast<int64_t>(start));
        PairedBatch batch = collate(pairs, idx);
        image_chunks.push_back(model->embed_images(batch.images));
        recipe_chunks.push_back(model->embed_recipes(batch));
    }
    return {torch::cat(image_chunks, 0), torch::cat(recipe_chunks, 0)};
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

void assert_report_invariants(const RetrievalReport& r) {
    check(r.med_rank >= 1.0, "median rank must be >= 1");
    check(r.r1 >= 0 && r.r10 <= 100.0 + 1e-9, "recalls must lie in [0, 100]");
    check(r.r1 <= r.r5 + 1e-9 && r.r5 <= r.r10 + 1e-9,
          "recall monotonicity violated: R@1 <= R@5 <= R@10");
    invariant_counters().reports_checked += 1;
}

}  // namespace

RetrievalReport rank_and_score(const torch::Tensor& image_embeddings,
                               const torch::Tensor& recipe_embeddings,
                               const std::string& direction, int64_t bag_size,
                               int64_t n_bags, uint64_t seed) {
    check(image_embeddings.dim() == 2 && recipe_embeddings.dim() == 2 &&
              image_embeddings.sizes() == recipe_embeddings.sizes(),
          "embedding matrices must match");
    check(direction == "image-to-recipe" || direction == "recipe-to-image",
          "direction must be image-to-recipe or recipe-to-image");
    const int64_t N = image_embeddings.size(0);
    check(bag_size >= 2, "bag_size must be >= 2");
    check(bag_size <= N, "bag_size exceeds corpus size");
    check(n_bags >= 1, "n_bags must be >= 1");

    const bool i2r = direction == "image-to-recipe";
    const torch::Tensor& queries = i2r ? image_embeddings : recipe_embeddings;
    const torch::Tensor& candidates = i2r ? recipe_embeddings : image_embeddings;

    RetrievalReport report;
    report.direction = direction;
    report.bag_size = bag_size;
    report.n_bags = n_bags;

    std::vector<int64_t> pool(static_cast<size_t>(N));
    for (int64_t bag = 0; bag < n_bags; ++bag) {
        // bag members: first bag_size of a seeded permutation (no replacement)
        std::iota(pool.begin(), pool.end(), 0);
        SplitMix64 rng(mix_seed(seed, 0xBA6u, static_cast<uint64_t>(bag)));
        for (int64_t j = 0; j < bag_size; ++j) {
            uint64_t pick = static_cast<uint64_t>(j) +
                            rng.bounded(static_cast<uint64_t>(N - j));
            std::swap(pool[static_cast<size_t>(j)], pool[pick]);
        }
        torch::Tensor members =
            torch::tensor(std::vector<int64_t>(pool.begin(), pool.begin() + bag_size),
                          torch::kInt64);
        torch::Tensor q = queries.index_select(0, members);
        torch::Tensor c = candidates.index_select(0, members);
        torch::Tensor sim = torch::matmul(q, c.transpose(0, 1));  // cosine (unit rows)

        auto acc = sim.accessor<double, 2>();
        std::vector<double> ranks(static_cast<size_t>(bag_size));
        for (int64_t i = 0; i < bag_size; ++i) {
            double true_score = acc[i][i];
            int64_t worse_or_tied = 0;
            for (int64_t j = 0; j < bag_size; ++j) {
                if (j == i) continue;
                if (acc[i][j] >= true_score) ++worse_or_tied;  // pessimistic ties
            }
            ranks[static_cast<size_t>(i)] = static_cast<double>(1 + worse_or_tied);
        }
        BagScores scores;
        scores.med_rank = median(ranks);
        int64_t hit1 = 0, hit5 = 0, hit10 = 0;
        for (double r : ranks) {
            if (r <= 1) ++hit1;
            if (r <= 5) ++hit5;
            if (r <= 10) ++hit10;
        }
        scores.r1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(bag_size);
        scores.r5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(bag_size);
        scores.r10 = 100.0 * static_cast<double>(hit10) / static_cast<double>(bag_size);
        report.per_bag.push_back(scores);

        report.med_rank += scores.med_rank;
        report.r1 += scores.r1;
        report.r5 += scores.r5;
        report.r10 += scores.r10;
    }
    report.med_rank /= static_cast<double>(n_bags);
    report.r1 /= static_cast<double>(n_bags);
    report.r5 /= static_cast<double>(n_bags);
    report.r10 /= static_cast<double>(n_bags);
    assert_report_invariants(report);
    return report;
}

nlohmann::json report_to_json(const RetrievalReport& report) {
    nlohmann::json per_bag = nlohmann::json::array();
    for (const auto& bag : report.per_bag)
        per_bag.push_back({{"medR", bag.med_rank},
                           {"r1", bag.r1},
                           {"r5", bag.r5},
                           {"r10", bag.r10}});
    return nlohmann::json{{"direction", report.direction},
                          {"bag_size", report.bag_size},
                          {"n_bags", report.n_bags},
                          {"medR", report.med_rank},
                          {"r1", report.r1},
                          {"r5", report.r5},
                          {"r10", report.r10},
                          {"per_bag", per_bag}};
}

std::string report_table(const std::vector<RetrievalReport>& reports) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-18s %8s %7s %7s %7s  (%s)\n", "direction", "medR",
                  "R@1", "R@5", "R@10", "bags");
    out << line;
    for (const auto& r : reports) {
        std::snprintf(line, sizeof(line), "%-18s %8.1f %7.1f %7.1f %7.1f  (%lld x %lld)\n",
                      r.direction.c_str(), r.med_rank, r.r1, r.r5, r.r10,
                      static_cast<long long>(r.n_bags), static_cast<long long>(r.bag_size));
        out << line;
    }
    return out.str();
}

// ---------------------------------------------------------------- ablation --

std::vector<AblationVariant> table2_variants() {
    return {
        {"baseline", {{"lambda_itm", "0"}, {"lambda_dist", "0"}, {"mask_ratio", "0"}}},
        {"+local", {{"lambda_itm", "1"}, {"use_lc", "true"}, {"use_gc", "false"},
                    {"lambda_dist", "0"}}},
        {"+local+global", {{"lambda_itm", "1"}, {"use_lc", "true"}, {"use_gc", "true"},
                           {"lambda_dist", "0"}}},
        {"+local+global+distill", {{"lambda_itm", "1"}, {"use_lc", "true"},
                                   {"use_gc", "true"}, {"lambda_dist", "1"}}},
    };
}

std::vector<AblationVariant> table3_variants() {
    std::vector<AblationVariant> out;
    for (const char* ratio : {"0.90", "0.75", "0.50", "0.25"})
        out.push_back({std::string("mask ") + ratio, {{"mask_ratio", ratio}}});
    return out;
}

AblationTable run_ablation(const std::vector<SamplePair>& train_pairs,
                           const std::vector<SamplePair>& eval_pairs,
                           const Tokenizer& tokenizer, const RunConfig& base,
                           const std::vector<AblationVariant>& variants,
                           const std::vector<uint64_t>& seeds) {
    check(!variants.empty() && !seeds.empty(), "run_ablation: nothing to run");
    AblationTable table;
    table.seeds = seeds;
    for (const auto& variant : variants) {
        AblationRow row;
        row.name = variant.name;
        try {
            for (uint64_t seed : seeds) {
                RunConfig cfg = base;
                for (const auto& [key, value] : variant.overrides)
                    cfg.set(key, value, Provenance::Flag);
                cfg.set("seed", std::to_string(seed), Provenance::Flag);

                reseed(static_cast<int64_t>(seed));
                MalmModel model(
                    ModelConfig::from_run_config(cfg, tokenizer.vocab_size()));
                TrainSchedule schedule = TrainSchedule::from_run_config(cfg);
                schedule.val_fraction = 0.0;  // the held-out set is explicit here
                ObjectiveConfig objective = ObjectiveConfig::from_run_config(cfg);
                train(model, train_pairs, schedule, objective, cfg, tokenizer, "");

                auto [img, rec] = embed_corpus(model, eval_pairs);
                int64_t bag = std::min<int64_t>(cfg.get_int("bag_size"),
                                                static_cast<int64_t>(eval_pairs.size()));
                RetrievalReport report =
                    rank_and_score(img, rec, "image-to-recipe", bag,
                                   cfg.get_int("n_bags"), mix_seed(seed, 0xE7A1u));
                row.r1_per_seed.push_back(report.r1);
                row.med_rank_per_seed.push_back(report.med_rank);
            }
            double mean = std::accumulate(row.r1_per_seed.begin(), row.r1_per_seed.end(), 0.0) /
                          static_cast<double>(row.r1_per_seed.size());
            double var = 0;
            for (double v : row.r1_per_seed) var += (v - mean) * (v - mean);
            var /= static_cast<double>(row.r1_per_seed.size());
            row.r1_mean = mean;
            row.r1_std = std::sqrt(var);
            row.med_rank_mean = std::accumulate(row.med_rank_per_seed.begin(),
                                                row.med_rank_per_seed.end(), 0.0) /
                                static_cast<double>(row.med_rank_per_seed.size());
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string ablation_table_text(const AblationTable& table) {
    std::ostringstream out;
    char line[200];
    std::snprintf(line, sizeof(line), "%-24s %10s %14s %10s\n", "variant", "medR",
                  "R@1 mean+-std", "seeds");
    out << line;
    for (const auto& row : table.rows) {
        if (row.failed) {
            std::snprintf(line, sizeof(line), "%-24s FAILED: %s\n", row.name.c_str(),
                          row.error.c_str());
            out << line;
            continue;
        }
        std::snprintf(line, sizeof(line), "%-24s %10.1f %7.1f+-%5.1f %10zu\n",
                      row.name.c_str(), row.med_rank_mean, row.r1_mean, row.r1_std,
                      row.r1_per_seed.size());
        out << line;
    }
    return out.str();
}

nlohmann::json ablation_table_json(const AblationTable& table) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : table.rows) {
        nlohmann::json j{{"variant", row.name}, {"failed", row.failed}};
        if (row.failed) {
            j["error"] = row.error;
        } else {
            j["r1_per_seed"] = row.r1_per_seed;
            j["medR_per_seed"] = row.med_rank_per_seed;
            j["r1_mean"] = row.r1_mean;
            j["r1_std"] = row.r1_std;
            j["medR_mean"] = row.med_rank_mean;
        }
        rows.push_back(j);
    }
    return nlohmann::json{{"seeds", table.seeds}, {"rows", rows}};
}

// ------------------------------------------------------------ localization --

double localization_score_from_attention(
    const torch::Tensor& image_attention, const torch::Tensor& token_ids,
    const std::vector<std::vector<std::pair<int64_t, int64_t>>>& patch_class_tokens) {
    auto attn = image_attention.accessor<double, 3>();
    auto ids = token_ids.accessor<int64_t, 2>();
    const int64_t S = token_ids.size(1);
    double total = 0;
    int64_t count = 0;
    for (int64_t b = 0; b < image_attention.size(0); ++b) {
        for (const auto& [patch, token] : patch_class_tokens[static_cast<size_t>(b)]) {
            double mass = 0;
            for (int64_t s = 0; s < S; ++s)
                if (ids[b][s] == token) mass += attn[b][1 + patch][s];
            total += mass;
            ++count;
        }
    }
    check(count > 0, "localization: no ground-truth patches to score");
    return total / static_cast<double>(count);
}

LocalizationResult attention_localization(MalmModel& model,
                                          const std::vector<SamplePair>& pairs,
                                          const GroundTruth& groundtruth,
                                          const std::vector<std::string>& class_words,
                                          const Tokenizer& tokenizer, uint64_t seed,
                                          int64_t n_permutations, int64_t batch_size) {
    check(!pairs.empty(), "localization: empty dataset");
    std::vector<int64_t> class_token_ids;
    for (const auto& word : class_words) class_token_ids.push_back(tokenizer.id_of(word));

    const int64_t P = model->cfg.image.num_patches();
    const int64_t S = model->cfg.recipe.caps.total();

    torch::NoGradGuard no_grad;
    double observed_sum = 0, chance_sum = 0;
    int64_t scored = 0;
    // flat list of (attention row copy omitted; we keep per-batch tensors)
    struct Entry { torch::Tensor attn_rows; /* (1+P) x S */ torch::Tensor ids; /* S */
                   std::vector<std::pair<int64_t, int64_t>> patch_tokens; };
    std::vector<Entry> entries;

    for (size_t start = 0; start < pairs.size(); start += static_cast<size_t>(batch_size)) {
        size_t end = std::min(pairs.size(), start + static_cast<size_t>(batch_size));
        std::vector<int64_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), static_cast<int64_t>(start));
        PairedBatch batch = collate(pairs, idx);
        MatchOutputs match = model->match_full(batch);
        torch::Tensor token_ids = torch::cat(
            {batch.title_ids, batch.ingredient_ids, batch.instruction_ids}, 1);

        std::vector<std::vector<std::pair<int64_t, int64_t>>> batch_map;
        for (size_t b = 0; b < batch.ids.size(); ++b) {
            auto it = groundtruth.find(batch.ids[b]);
            check(it != groundtruth.end(),
                  "localization requires synthetic ground truth; sample without it: " +
                      batch.ids[b]);
            std::vector<std::pair<int64_t, int64_t>> m;
            for (const auto& [patch, cls] : it->second) {
                check(patch >= 0 && patch < P, "ground-truth patch index out of range");
                check(cls >= 0 && cls < static_cast<int64_t>(class_token_ids.size()),
                      "ground-truth class out of range");
                m.emplace_back(patch, class_token_ids[static_cast<size_t>(cls)]);
            }
            batch_map.push_back(std::move(m));
        }

        auto attn = match.image_attention.accessor<double, 3>();
        auto ids = token_ids.accessor<int64_t, 2>();
        for (size_t b = 0; b < batch.ids.size(); ++b) {
            Entry e;
            e.attn_rows = match.image_attention[static_cast<int64_t>(b)];
            e.ids = token_ids[static_cast<int64_t>(b)];
            e.patch_tokens = batch_map[b];
            for (const auto& [patch, token] : e.patch_tokens) {
                double mass = 0;
                int64_t matches = 0;
                for (int64_t s = 0; s < S; ++s)
                    if (ids[static_cast<int64_t>(b)][s] == token) {
                        mass += attn[static_cast<int64_t>(b)][1 + patch][s];
                        ++matches;
                    }
                observed_sum += mass;
                chance_sum += static_cast<double>(matches) / static_cast<double>(S);
                ++scored;
            }
            entries.push_back(std::move(e));
        }
    }
    check(scored > 0, "localization: nothing to score");

    LocalizationResult result;
    result.score = observed_sum / static_cast<double>(scored);
    result.chance = chance_sum / static_cast<double>(scored);
    result.n_patches_scored = scored;
    result.n_permutations = n_permutations;

    // permutation null: score each ground-truth ingredient against a random
    // patch row instead of its own patch
    std::vector<double> null_scores;
    int64_t at_or_above = 0;
    for (int64_t r = 0; r < n_permutations; ++r) {
        SplitMix64 rng(mix_seed(seed, 0x9E21u, static_cast<uint64_t>(r)));
        double sum = 0;
        for (const auto& e : entries) {
            auto attn = e.attn_rows.accessor<double, 2>();
            auto ids = e.ids.accessor<int64_t, 1>();
            for (const auto& [patch, token] : e.patch_tokens) {
                int64_t random_patch = static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(P)));
                double mass = 0;
                for (int64_t s = 0; s < S; ++s)
                    if (ids[s] == token) mass += attn[1 + random_patch][s];
                sum += mass;
            }
        }
        double score = sum / static_cast<double>(scored);
        null_scores.push_back(score);
        if (score >= result.score) ++at_or_above;
    }
    std::sort(null_scores.begin(), null_scores.end());
    size_t p95_index = static_cast<size_t>(
        std::ceil(0.95 * static_cast<double>(null_scores.size()))) - 1;
    result.null_p95 = null_scores[std::min(p95_index, null_scores.size() - 1)];
    double mean = std::accumulate(null_scores.begin(), null_scores.end(), 0.0) /
                  static_cast<double>(null_scores.size());
    double var = 0;
    for (double v : null_scores) var += (v - mean) * (v - mean);
    result.null_mean = mean;
    result.null_std = std::sqrt(var / static_cast<double>(null_scores.size()));
    result.p_value = static_cast<double>(1 + at_or_above) /
                     static_cast<double>(1 + n_permutations);
    return result;
}

}  // namespace malm
