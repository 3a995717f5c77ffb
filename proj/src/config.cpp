#include "malm/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "malm/common.hpp"

namespace malm {

const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::Default: return "default";
        case Provenance::File: return "file";
        case Provenance::Flag: return "flag";
    }
    return "?";
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, bool& out) {
    if (v == "true" || v == "1") { out = true; return true; }
    if (v == "false" || v == "0") { out = false; return true; }
    return false;
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    using T = Type;
    // runtime
    c.add("seed", T::Int, "0", "master seed propagated to all modules");
    c.add("out_dir", T::Str, "", "run directory; empty -> run/<timestamp>");
    // data
    c.add("data_path", T::Str, "", "dataset JSON (Recipe1M-format array)");
    c.add("eval_data_path", T::Str, "", "held-out dataset JSON for eval/ablate");
    c.add("image_root", T::Str, "", "root for relative image paths; empty -> dataset dir");
    c.add("image_size", T::Int, "32", "square image side in pixels");
    c.add("image_channels", T::Int, "1", "1 = grayscale, 3 = RGB");
    c.add("cap_title", T::Int, "16", "max title tokens (truncate/pad)");
    c.add("cap_ingredients", T::Int, "64", "max ingredient tokens (truncate/pad)");
    c.add("cap_instructions", T::Int, "128", "max instruction tokens (truncate/pad)");
    c.add("batch_size", T::Int, "16", "training batch size (>= 2)");
    c.add("drop_last", T::Bool, "true", "drop trailing partial batch");
    c.add("val_fraction", T::Real, "0.1", "held-out fraction for per-epoch validation");
    // synthetic generator
    c.add("gen_n", T::Int, "200", "number of synthetic samples to generate");
    c.add("grid_rows", T::Int, "4", "synthetic patch grid rows");
    c.add("grid_cols", T::Int, "4", "synthetic patch grid cols");
    c.add("n_ingredient_classes", T::Int, "12", "synthetic ingredient classes");
    c.add("synthetic_vocab_size", T::Int, "64", "vocab budget for synthetic recipes");
    c.add("noise_std", T::Real, "0.0", "synthetic pixel noise stddev");
    // encoders
    c.add("shared_dim", T::Int, "64", "projection output dimension shared by both modalities");
    c.add("image_patch_size", T::Int, "8", "image patch side in pixels");
    c.add("image_depth", T::Int, "2", "image encoder transformer depth");
    c.add("image_heads", T::Int, "2", "image encoder attention heads");
    c.add("image_hidden", T::Int, "64", "image encoder width");
    c.add("recipe_component_depth", T::Int, "2", "per-component recipe encoder depth");
    c.add("recipe_component_heads", T::Int, "2", "per-component recipe encoder heads");
    c.add("recipe_component_hidden", T::Int, "64", "recipe encoder width");
    c.add("recipe_fusion_depth", T::Int, "1", "recipe fusion decoder depth");
    c.add("recipe_fusion_heads", T::Int, "2", "recipe fusion decoder heads");
    // masking
    c.add("mask_ratio", T::Real, "0.75", "fraction of image patches masked during training");
    c.add("mask_recipe", T::Bool, "false", "also mask recipe tokens (untuned optional mode)");
    // matching
    c.add("temperature_init", T::Real, "0.07", "initial contrastive temperature");
    c.add("normalize_features", T::Bool, "true", "L2-normalize features before contrastive scores");
    c.add("literal_eq7_denominator", T::Bool, "true", "exclude the positive from the contrastive denominator");
    c.add("literal_sum_loss", T::Bool, "false", "minimize raw ratios instead of their negative logs");
    c.add("include_cls_in_local", T::Bool, "true", "include the CLS row in the local loss positions");
    c.add("matching_depth", T::Int, "4", "cross-attention layers per matching stack");
    c.add("matching_heads", T::Int, "4", "attention heads in the matching stacks");
    c.add("use_gc", T::Bool, "true", "enable the global contrastive term");
    c.add("use_lc", T::Bool, "true", "enable the local contrastive term");
    // distillation
    c.add("beta", T::Real, "1.0", "smooth-L1 transition point");
    c.add("ema_momentum", T::Real, "0.999", "teacher EMA momentum");
    c.add("recon_depth", T::Int, "2", "reconstruction transformer depth");
    c.add("recon_heads", T::Int, "2", "reconstruction transformer heads");
    // training
    c.add("lambda_itm", T::Real, "1.0", "weight of the matching losses");
    c.add("lambda_dist", T::Real, "1.0", "weight of the distillation loss");
    c.add("triplet_margin", T::Real, "0.3", "margin of the bidirectional triplet loss");
    c.add("epochs", T::Int, "25", "training epochs");
    c.add("max_steps", T::Int, "0", "hard step cap, 0 = no cap");
    c.add("freeze_image_encoder_epochs", T::Int, "0", "epochs with the image encoder excluded from updates");
    c.add("lr_main", T::Real, "1e-3", "learning rate for all modules but the image encoder");
    c.add("lr_image_encoder", T::Real, "1e-3", "learning rate for the image encoder");
    c.add("grad_clip_norm", T::Real, "1.0", "global gradient-norm clip, 0 disables");
    // evaluation
    c.add("checkpoint_path", T::Str, "", "checkpoint to evaluate / retrieve with");
    c.add("direction", T::Str, "both", "image-to-recipe | recipe-to-image | both");
    c.add("bag_size", T::Int, "100", "retrieval bag size (capped at corpus size)");
    c.add("n_bags", T::Int, "10", "number of retrieval bags");
    // retrieve
    c.add("query_path", T::Str, "", "query: recipe JSON (.json) or image file");
    c.add("corpus_path", T::Str, "", "corpus dataset JSON for retrieval");
    c.add("top_k", T::Int, "5", "results per query");
    // ablation
    c.add("variants", T::Str, "table2", "ablation set: table2 | table3 | both");
    c.add("ablate_seeds", T::Int, "5", "seeds per ablation variant");
    c.add("ablate_steps", T::Int, "300", "training steps per ablation run");
    return c;
}

void RunConfig::add(const std::string& key, Type type, const std::string& value,
                    const std::string& help) {
    entries_[key] = Entry{type, value, Provenance::Default, help};
}

bool RunConfig::has(const std::string& key) const { return entries_.count(key) > 0; }

const RunConfig::Entry& RunConfig::entry(const std::string& key) const {
    auto it = entries_.find(key);
    check(it != entries_.end(), "unknown config key: " + key);
    return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
    const Entry& e = entry(key);
    check(e.type == Type::Int, "config key is not an int: " + key);
    return std::strtoll(e.value.c_str(), nullptr, 10);
}

double RunConfig::get_real(const std::string& key) const {
    const Entry& e = entry(key);
    check(e.type == Type::Real || e.type == Type::Int,
          "config key is not a real: " + key);
    return std::strtod(e.value.c_str(), nullptr);
}

bool RunConfig::get_bool(const std::string& key) const {
    const Entry& e = entry(key);
    check(e.type == Type::Bool, "config key is not a bool: " + key);
    bool b = false;
    parse_bool(e.value, b);
    return b;
}

const std::string& RunConfig::get_str(const std::string& key) const {
    const Entry& e = entry(key);
    check(e.type == Type::Str, "config key is not a string: " + key);
    return e.value;
}

void RunConfig::validate_value(Type type, const std::string& key,
                               const std::string& value) {
    char* end = nullptr;
    switch (type) {
        case Type::Int: {
            if (value.empty()) throw Error("empty int value for key: " + key);
            std::strtoll(value.c_str(), &end, 10);
            check(end && *end == '\0', "bad int value for key " + key + ": " + value);
            break;
        }
        case Type::Real: {
            if (value.empty()) throw Error("empty real value for key: " + key);
            std::strtod(value.c_str(), &end);
            check(end && *end == '\0', "bad real value for key " + key + ": " + value);
            break;
        }
        case Type::Bool: {
            bool b;
            check(parse_bool(value, b), "bad bool value for key " + key + ": " + value +
                                            " (expected true/false/1/0)");
            break;
        }
        case Type::Str: break;
    }
}

void RunConfig::set(const std::string& key, const std::string& value, Provenance prov) {
    auto it = entries_.find(key);
    check(it != entries_.end(), "unknown config key: " + key);
    validate_value(it->second.type, key, value);
    it->second.value = value;
    it->second.provenance = prov;
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        check(eq != std::string::npos,
              origin + ":" + std::to_string(lineno) + ": expected `key = value`");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        set(key, value, Provenance::File);
    }
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    load_text(buf.str(), path);
}

Provenance RunConfig::provenance(const std::string& key) const {
    return entry(key).provenance;
}

std::string RunConfig::resolved_text() const {
    std::ostringstream out;
    for (const auto& [key, e] : entries_) {
        out << key << " = " << e.value << "  # " << provenance_name(e.provenance)
            << "\n";
    }
    return out.str();
}

std::vector<std::string> RunConfig::keys() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [key, _] : entries_) out.push_back(key);
    return out;
}

std::string flag_to_key(const std::string& flag) {
    std::string s = flag;
    if (s.rfind("--", 0) == 0) s = s.substr(2);
    std::replace(s.begin(), s.end(), '-', '_');
    return s;
}

std::string key_to_flag(const std::string& key) {
    std::string s = key;
    std::replace(s.begin(), s.end(), '_', '-');
    return "--" + s;
}

}  // namespace malm
