#include "malm/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "malm/checkpoint.hpp"
#include "malm/checks.hpp"
#include "malm/common.hpp"
#include "malm/evaluation.hpp"
#include "malm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace malm {

namespace {

const std::set<std::string> kCommands = {"generate-data", "train",    "eval",
                                         "ablate",        "retrieve", "check"};

}  // namespace

std::string usage() {
    std::ostringstream out;
    out << "usage: malm <command> [--config FILE] [--key value ...]\n"
        << "\n"
        << "commands:\n"
        << "  generate-data   write a synthetic dataset (images, recipes, ground truth)\n"
        << "  train           train a model on a Recipe1M-format dataset\n"
        << "  eval            bagged retrieval metrics for a checkpoint\n"
        << "  ablate          train and score the ablation variants\n"
        << "  retrieve        top-k retrieval for a recipe or image query\n"
        << "  check           run the gradient/oracle/invariant suites\n"
        << "\n"
        << "Any config key can be overridden as a flag, e.g. --mask-ratio 0.75.\n"
        << "Flags take precedence over --config file values, which take\n"
        << "precedence over defaults. See README.md for the key list.\n";
    return out.str();
}

ParsedArgs parse_args(const std::vector<std::string>& args) {
    ParsedArgs parsed;
    if (args.empty()) {
        parsed.exit_code = 2;
        parsed.usage_text = usage();
        return parsed;
    }
    if (args[0] == "--help" || args[0] == "-h" || args[0] == "help") {
        parsed.exit_code = 0;
        parsed.usage_text = usage();
        return parsed;
    }
    parsed.command = args[0];
    if (!kCommands.count(parsed.command)) {
        parsed.exit_code = 2;
        parsed.usage_text = "unknown command: " + parsed.command + "\n\n" + usage();
        return parsed;
    }

    // collect flag pairs; apply --config first, then flags (flag precedence)
    std::vector<std::pair<std::string, std::string>> flags;
    std::string config_file;
    for (size_t i = 1; i < args.size(); ++i) {
        const std::string& arg = args[i];
        if (arg.rfind("--", 0) != 0) {
            parsed.exit_code = 2;
            parsed.usage_text = "expected a --flag, got: " + arg + "\n\n" + usage();
            return parsed;
        }
        if (i + 1 >= args.size()) {
            parsed.exit_code = 2;
            parsed.usage_text = "flag " + arg + " needs a value\n\n" + usage();
            return parsed;
        }
        const std::string& value = args[++i];
        if (arg == "--config") {
            config_file = value;
        } else {
            flags.emplace_back(flag_to_key(arg), value);
        }
    }
    try {
        if (!config_file.empty()) parsed.config.load_file(config_file);
        for (const auto& [key, value] : flags)
            parsed.config.set(key, value, Provenance::Flag);
    } catch (const Error& e) {
        parsed.exit_code = 2;
        parsed.usage_text = std::string(e.what()) + "\n\n" + usage();
        return parsed;
    }
    return parsed;
}

namespace {

std::string timestamp() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", std::localtime(&t));
    return buf;
}

/// Resolves the run directory and echoes the resolved config into it.
std::string prepare_run_dir(RunConfig& config) {
    std::string dir = config.get_str("out_dir");
    if (dir.empty()) {
        dir = (fs::path("run") / timestamp()).string();
        config.set("out_dir", dir, Provenance::Flag);
    }
    fs::create_directories(dir);
    std::ofstream out(fs::path(dir) / "config.resolved");
    out << config.resolved_text();
    return dir;
}

DataCaps caps_from_config(const RunConfig& cfg) {
    DataCaps caps;
    caps.title = cfg.get_int("cap_title");
    caps.ingredients = cfg.get_int("cap_ingredients");
    caps.instructions = cfg.get_int("cap_instructions");
    return caps;
}

std::vector<SamplePair> load_dataset(const RunConfig& cfg, const std::string& path,
                                     Tokenizer& tok, LoadReport* report = nullptr) {
    check(!path.empty(), "no dataset given (set --data-path)");
    return load_recipe1m(path, cfg.get_str("image_root"), tok, caps_from_config(cfg),
                         cfg.get_int("image_size"), cfg.get_int("image_channels"),
                         report);
}

int cmd_generate_data(RunConfig& config) {
    std::string dir = prepare_run_dir(config);
    SyntheticSpec spec;
    spec.vocab_size = config.get_int("synthetic_vocab_size");
    spec.n_ingredient_classes = config.get_int("n_ingredient_classes");
    spec.grid_rows = config.get_int("grid_rows");
    spec.grid_cols = config.get_int("grid_cols");
    spec.patch_size = config.get_int("image_patch_size");
    spec.channels = config.get_int("image_channels");
    spec.noise_std = config.get_real("noise_std");
    spec.seed = static_cast<uint64_t>(config.get_int("seed"));

    SyntheticData data = generate_synthetic(spec, config.get_int("gen_n"),
                                            caps_from_config(config));
    materialize_synthetic(data, dir);
    std::cout << "wrote " << data.pairs.size() << " samples to " << dir
              << " (dataset.json, images/, groundtruth.json)\n";
    return 0;
}

int cmd_train(RunConfig& config) {
    init_runtime(config.get_int("seed"));
    std::string dir = prepare_run_dir(config);

    Tokenizer tok;
    std::vector<SamplePair> pairs = load_dataset(config, config.get_str("data_path"), tok);
    tok.freeze();
    check(pairs.size() >= 2, "dataset too small to train on");
    std::cout << "loaded " << pairs.size() << " pairs, vocab " << tok.vocab_size()
              << "\n";

    reseed(config.get_int("seed"));
    MalmModel model(ModelConfig::from_run_config(config, tok.vocab_size()));
    TrainSchedule schedule = TrainSchedule::from_run_config(config);
    ObjectiveConfig objective = ObjectiveConfig::from_run_config(config);

    TrainResult result = train(model, pairs, schedule, objective, config, tok, dir);
    if (result.diverged) {
        std::cerr << "training aborted: " << result.divergence_reason
                  << "\nlast good checkpoint: " << result.last_checkpoint_path << "\n";
        return 1;
    }
    std::cout << "trained " << result.steps << " steps\n";
    for (const auto& v : result.validations)
        std::cout << "epoch " << v.epoch << ": val medR " << v.med_rank << ", R@1 "
                  << v.r1 << ", R@5 " << v.r5 << ", R@10 " << v.r10 << "\n";
    std::cout << "checkpoints: " << result.last_checkpoint_path;
    if (!result.best_checkpoint_path.empty())
        std::cout << " (best: " << result.best_checkpoint_path << ")";
    std::cout << "\n";
    return 0;
}

int cmd_eval(RunConfig& config) {
    init_runtime(config.get_int("seed"));
    std::string dir = prepare_run_dir(config);
    check(!config.get_str("checkpoint_path").empty(), "set --checkpoint-path");
    LoadedCheckpoint ckpt = load_checkpoint(config.get_str("checkpoint_path"));

    std::vector<SamplePair> pairs =
        load_dataset(ckpt.config, config.get_str("data_path").empty()
                                      ? config.get_str("eval_data_path")
                                      : config.get_str("data_path"),
                     ckpt.tokenizer);

    auto [img, rec] = embed_corpus(ckpt.model, pairs);
    int64_t bag = std::min<int64_t>(config.get_int("bag_size"),
                                    static_cast<int64_t>(pairs.size()));
    uint64_t seed = static_cast<uint64_t>(config.get_int("seed"));

    std::vector<RetrievalReport> reports;
    std::string direction = config.get_str("direction");
    if (direction == "both" || direction == "image-to-recipe")
        reports.push_back(rank_and_score(img, rec, "image-to-recipe", bag,
                                         config.get_int("n_bags"), seed));
    if (direction == "both" || direction == "recipe-to-image")
        reports.push_back(rank_and_score(img, rec, "recipe-to-image", bag,
                                         config.get_int("n_bags"), seed));
    check(!reports.empty(), "direction must be image-to-recipe, recipe-to-image or both");

    std::cout << report_table(reports);
    json out = json::array();
    for (const auto& r : reports) out.push_back(report_to_json(r));
    std::ofstream file(fs::path(dir) / "report.json");
    file << out.dump(1) << "\n";
    std::cout << "report: " << (fs::path(dir) / "report.json").string() << "\n";
    return 0;
}

int cmd_ablate(RunConfig& config) {
    init_runtime(config.get_int("seed"));
    std::string dir = prepare_run_dir(config);

    Tokenizer tok;
    std::vector<SamplePair> train_pairs =
        load_dataset(config, config.get_str("data_path"), tok);
    std::vector<SamplePair> eval_pairs;
    if (!config.get_str("eval_data_path").empty()) {
        eval_pairs = load_dataset(config, config.get_str("eval_data_path"), tok);
        tok.freeze();
    } else {
        tok.freeze();
        // hold out a fifth of the data when no eval set was given
        size_t n_eval = std::max<size_t>(2, train_pairs.size() / 5);
        eval_pairs.assign(train_pairs.end() - static_cast<long>(n_eval), train_pairs.end());
        train_pairs.resize(train_pairs.size() - n_eval);
    }
    if (!tok.frozen()) tok.freeze();

    std::vector<AblationVariant> variants;
    std::string which = config.get_str("variants");
    if (which == "table2" || which == "both") {
        auto v = table2_variants();
        variants.insert(variants.end(), v.begin(), v.end());
    }
    if (which == "table3" || which == "both") {
        auto v = table3_variants();
        variants.insert(variants.end(), v.begin(), v.end());
    }
    check(!variants.empty(), "variants must be table2, table3 or both");

    RunConfig base = config;
    base.set("max_steps", std::to_string(config.get_int("ablate_steps")), Provenance::Flag);
    base.set("epochs", "1000000", Provenance::Flag);
    base.set("val_fraction", "0", Provenance::Flag);

    std::vector<uint64_t> seeds;
    uint64_t seed0 = static_cast<uint64_t>(config.get_int("seed"));
    for (int64_t s = 0; s < config.get_int("ablate_seeds"); ++s)
        seeds.push_back(seed0 + static_cast<uint64_t>(s));

    AblationTable table = run_ablation(train_pairs, eval_pairs, tok, base, variants, seeds);
    std::cout << ablation_table_text(table);
    std::ofstream file(fs::path(dir) / "ablation.json");
    file << ablation_table_json(table).dump(1) << "\n";
    std::cout << "table: " << (fs::path(dir) / "ablation.json").string() << "\n";
    for (const auto& row : table.rows)
        if (row.failed) return 1;
    return 0;
}

int cmd_retrieve(RunConfig& config) {
    init_runtime(config.get_int("seed"));
    std::string dir = prepare_run_dir(config);
    check(!config.get_str("checkpoint_path").empty(), "set --checkpoint-path");
    LoadedCheckpoint ckpt = load_checkpoint(config.get_str("checkpoint_path"));

    std::string corpus_path = config.get_str("corpus_path").empty()
                                  ? config.get_str("data_path")
                                  : config.get_str("corpus_path");
    std::vector<SamplePair> corpus = load_dataset(ckpt.config, corpus_path, ckpt.tokenizer);
    auto [img_emb, rec_emb] = embed_corpus(ckpt.model, corpus);

    std::string query_path = config.get_str("query_path");
    check(!query_path.empty(), "set --query-path (recipe .json or an image file)");
    int64_t k = config.get_int("top_k");
    check(k >= 0, "top_k must be >= 0");

    torch::Tensor query_emb;
    std::string direction;
    json query_echo;
    if (query_path.size() >= 5 && query_path.substr(query_path.size() - 5) == ".json") {
        std::ifstream in(query_path);
        check(in.good(), "cannot open query file: " + query_path);
        json q = json::parse(in);
        for (const char* field : {"title", "ingredients", "instructions"})
            check(q.contains(field), "query schema error: missing field '" +
                                         std::string(field) + "'");
        check(q["title"].is_string(), "query schema error: field 'title' must be a string");
        check(q["ingredients"].is_array(),
              "query schema error: field 'ingredients' must be an array of strings");
        check(q["instructions"].is_array(),
              "query schema error: field 'instructions' must be an array of strings");
        RecipeDoc doc;
        doc.id = q.contains("id") && q["id"].is_string() ? q["id"].get<std::string>()
                                                         : "query";
        doc.title_text = q["title"].get<std::string>();
        for (const auto& l : q["ingredients"]) doc.ingredient_lines.push_back(l.get<std::string>());
        for (const auto& l : q["instructions"]) doc.instruction_lines.push_back(l.get<std::string>());
        DataCaps caps = caps_from_config(ckpt.config);
        std::string joined_ingr, joined_instr;
        for (const auto& l : doc.ingredient_lines) joined_ingr += (joined_ingr.empty() ? "" : " ") + l;
        for (const auto& l : doc.instruction_lines) joined_instr += (joined_instr.empty() ? "" : " ") + l;
        doc.title_ids = ckpt.tokenizer.encode_padded(doc.title_text, caps.title);
        doc.ingredient_ids = ckpt.tokenizer.encode_padded(joined_ingr, caps.ingredients);
        doc.instruction_ids = ckpt.tokenizer.encode_padded(joined_instr, caps.instructions);
        SamplePair pair;
        pair.image = torch::zeros({ckpt.model->cfg.image.channels,
                                   ckpt.model->cfg.image.image_size,
                                   ckpt.model->cfg.image.image_size});
        pair.recipe = doc;
        std::vector<SamplePair> one{pair};
        PairedBatch batch = collate(one, {0});
        torch::NoGradGuard no_grad;
        query_emb = ckpt.model->embed_recipes(batch)[0];
        direction = "recipe-to-image";
        query_echo = {{"type", "recipe"}, {"id", doc.id}};
    } else {
        torch::Tensor image = decode_image_file(query_path,
                                                ckpt.model->cfg.image.channels,
                                                ckpt.model->cfg.image.image_size);
        torch::NoGradGuard no_grad;
        query_emb = ckpt.model->embed_images(image.unsqueeze(0))[0];
        direction = "image-to-recipe";
        query_echo = {{"type", "image"}, {"path", query_path}};
    }

    const torch::Tensor& candidates = direction == "recipe-to-image" ? img_emb : rec_emb;
    torch::Tensor scores = torch::matmul(candidates, query_emb);
    int64_t n = scores.size(0);
    bool clipped = k > n;
    int64_t kk = std::min<int64_t>(k, n);
    auto [top_scores, top_idx] = scores.topk(kk);

    json results = json::array();
    std::cout << "query (" << direction << "), top " << kk << ":\n";
    for (int64_t i = 0; i < kk; ++i) {
        int64_t idx = top_idx[i].item<int64_t>();
        double score = top_scores[i].item<double>();
        const RecipeDoc& doc = corpus[static_cast<size_t>(idx)].recipe;
        results.push_back({{"id", doc.id}, {"score", score}, {"title", doc.title_text}});
        std::printf("  %2lld. %-24s %.4f  %s\n", static_cast<long long>(i + 1),
                    doc.id.c_str(), score, doc.title_text.c_str());
    }
    json out{{"query", query_echo},
             {"direction", direction},
             {"k", k},
             {"results", results}};
    if (clipped)
        out["note"] = "k exceeds corpus size; full ranking returned";
    std::ofstream file(fs::path(dir) / "retrieval.json");
    file << out.dump(1) << "\n";
    std::cout << "results: " << (fs::path(dir) / "retrieval.json").string() << "\n";
    return 0;
}

int cmd_check(RunConfig& config) {
    init_runtime(config.get_int("seed"));
    std::vector<CheckResult> results = run_all_checks();
    print_results(results);
    return all_passed(results) ? 0 : 1;
}

}  // namespace

int run_command(const std::string& command, RunConfig& config) {
    if (command == "generate-data") return cmd_generate_data(config);
    if (command == "train") return cmd_train(config);
    if (command == "eval") return cmd_eval(config);
    if (command == "ablate") return cmd_ablate(config);
    if (command == "retrieve") return cmd_retrieve(config);
    if (command == "check") return cmd_check(config);
    throw Error("unknown command: " + command);
}

}  // namespace malm
