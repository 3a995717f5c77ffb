#include "malm/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "malm/common.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace malm {

void SyntheticSpec::validate() const {
    check(grid_rows >= 1 && grid_cols >= 1, "synthetic grid must be positive");
    check(grid_rows == grid_cols, "synthetic grid must be square (H = W images)");
    check(patch_size >= 1, "patch_size must be positive");
    check(channels == 1 || channels == 3, "channels must be 1 or 3");
    check(noise_std >= 0.0, "noise_std must be nonnegative");
    check(n_ingredient_classes >= 5,
          "need at least 5 ingredient classes (samples draw up to 5)");
    check(n_ingredient_classes <= num_patches(),
          "more ingredient classes than patch regions; a sample could paint "
          "overlapping regions");
    // 7 base words: [PAD] [UNK] dish with and add serve
    check(vocab_size >= 7 + n_ingredient_classes,
          "vocab_size too small for the ingredient class range");
}

torch::Tensor synthetic_class_pattern(int64_t class_id, int64_t patch_size,
                                      int64_t channels) {
    torch::Tensor out = torch::empty({channels, patch_size, patch_size});
    auto acc = out.accessor<double, 3>();
    SplitMix64 rng(mix_seed(0xC1A55u, static_cast<uint64_t>(class_id)));
    for (int64_t c = 0; c < channels; ++c)
        for (int64_t y = 0; y < patch_size; ++y)
            for (int64_t x = 0; x < patch_size; ++x) {
                // 8-bit levels in [51, 230] so PNG quantization is exact
                uint64_t level = 51 + rng.bounded(180);
                acc[c][y][x] = static_cast<double>(level) / 255.0;
            }
    return out;
}

namespace {

std::string class_word(int64_t class_id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "ing%02d", static_cast<int>(class_id));
    return buf;
}

std::string join_lines(const std::vector<std::string>& lines) {
    std::string out;
    for (const auto& l : lines) {
        if (!out.empty()) out.push_back(' ');
        out += l;
    }
    return out;
}

void tokenize_doc(RecipeDoc& doc, const Tokenizer& tok, const DataCaps& caps) {
    doc.title_ids = tok.encode_padded(doc.title_text, caps.title);
    doc.ingredient_ids = tok.encode_padded(join_lines(doc.ingredient_lines), caps.ingredients);
    doc.instruction_ids = tok.encode_padded(join_lines(doc.instruction_lines), caps.instructions);
    check(!doc.title_ids.empty() && !doc.ingredient_ids.empty() && !doc.instruction_ids.empty(),
          "record " + doc.id + ": empty component after tokenization");
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec, int64_t n,
                                 const DataCaps& caps) {
    check(n >= 1, "generate_synthetic: n must be >= 1");
    spec.validate();

    SyntheticData data;
    data.spec = spec;
    Tokenizer tok;
    for (const char* w : {"dish", "with", "and", "add", "serve"}) tok.fit(w);
    for (int64_t c = 0; c < spec.n_ingredient_classes; ++c) {
        data.class_words.push_back(class_word(c));
        tok.fit(data.class_words.back());
    }
    check(tok.vocab_size() <= spec.vocab_size, "synthetic vocab overflow");
    tok.freeze();
    data.tokenizer = tok;

    const int64_t P = spec.num_patches();
    const int64_t size = spec.image_size();
    data.pairs.reserve(static_cast<size_t>(n));

    for (int64_t i = 0; i < n; ++i) {
        SplitMix64 rng(mix_seed(spec.seed, static_cast<uint64_t>(i)));
        int64_t k = 2 + static_cast<int64_t>(rng.bounded(4));  // uniform in [2,5]

        // k distinct classes via partial Fisher-Yates
        std::vector<int64_t> classes(static_cast<size_t>(spec.n_ingredient_classes));
        for (size_t c = 0; c < classes.size(); ++c) classes[c] = static_cast<int64_t>(c);
        for (int64_t j = 0; j < k; ++j) {
            uint64_t pick = j + rng.bounded(static_cast<uint64_t>(classes.size()) - j);
            std::swap(classes[static_cast<size_t>(j)], classes[pick]);
        }
        classes.resize(static_cast<size_t>(k));
        std::sort(classes.begin(), classes.end());

        torch::Tensor image = torch::zeros({spec.channels, size, size});
        std::map<int64_t, int64_t> patch_map;
        for (int64_t cls : classes) {
            int64_t patch = cls;  // class id owns its patch; injective since classes <= P
            check(patch < P, "internal: patch index out of range");
            int64_t r0 = (patch / spec.grid_cols) * spec.patch_size;
            int64_t c0 = (patch % spec.grid_cols) * spec.patch_size;
            torch::Tensor patch_px = synthetic_class_pattern(cls, spec.patch_size, spec.channels);
            if (spec.noise_std > 0.0) {
                torch::Tensor noise = torch::empty_like(patch_px);
                auto acc = noise.accessor<double, 3>();
                for (int64_t c = 0; c < spec.channels; ++c)
                    for (int64_t y = 0; y < spec.patch_size; ++y)
                        for (int64_t x = 0; x < spec.patch_size; ++x)
                            acc[c][y][x] = rng.normal() * spec.noise_std;
                patch_px = (patch_px + noise).clamp(0.0, 1.0);
            }
            image.index_put_({torch::indexing::Slice(),
                              torch::indexing::Slice(r0, r0 + spec.patch_size),
                              torch::indexing::Slice(c0, c0 + spec.patch_size)},
                             patch_px);
            patch_map[patch] = cls;
        }

        RecipeDoc doc;
        char idbuf[24];
        std::snprintf(idbuf, sizeof(idbuf), "syn-%05d", static_cast<int>(i));
        doc.id = idbuf;
        std::string title = "dish with";
        for (size_t j = 0; j < classes.size(); ++j) {
            if (j > 0) title += " and";
            title += " " + class_word(classes[j]);
        }
        doc.title_text = title;
        for (int64_t cls : classes) doc.ingredient_lines.push_back(class_word(cls));
        for (int64_t cls : classes) doc.instruction_lines.push_back("add " + class_word(cls));
        doc.instruction_lines.push_back("serve");
        doc.image_ref = "images/" + doc.id + ".png";
        tokenize_doc(doc, tok, caps);

        data.groundtruth[doc.id] = std::move(patch_map);
        data.pairs.push_back(SamplePair{image, std::move(doc)});
    }
    return data;
}

namespace {

cv::Mat tensor_to_mat8(const torch::Tensor& image) {
    torch::Tensor t = (image.detach() * 255.0).round().clamp(0, 255).to(torch::kUInt8);
    int64_t ch = t.size(0), h = t.size(1), w = t.size(2);
    if (ch == 1) {
        cv::Mat m(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
        std::memcpy(m.data, t.contiguous().data_ptr<uint8_t>(), static_cast<size_t>(h * w));
        return m;
    }
    // torch is C,H,W planar RGB; OpenCV wants interleaved BGR
    torch::Tensor hwc = t.permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(h), static_cast<int>(w), CV_8UC3, hwc.data_ptr<uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

torch::Tensor mat_to_tensor(const cv::Mat& m, int64_t channels, int64_t image_size) {
    cv::Mat conv;
    if (channels == 1) {
        if (m.channels() == 1) conv = m;
        else cv::cvtColor(m, conv, cv::COLOR_BGR2GRAY);
    } else {
        if (m.channels() == 1) cv::cvtColor(m, conv, cv::COLOR_GRAY2RGB);
        else cv::cvtColor(m, conv, cv::COLOR_BGR2RGB);
    }
    if (conv.rows != image_size || conv.cols != image_size) {
        cv::Mat resized;
        cv::resize(conv, resized, cv::Size(static_cast<int>(image_size), static_cast<int>(image_size)),
                   0, 0, cv::INTER_AREA);
        conv = resized;
    }
    torch::Tensor t = torch::empty({channels, image_size, image_size});
    auto acc = t.accessor<double, 3>();
    for (int64_t y = 0; y < image_size; ++y) {
        const uint8_t* row = conv.ptr<uint8_t>(static_cast<int>(y));
        for (int64_t x = 0; x < image_size; ++x)
            for (int64_t c = 0; c < channels; ++c)
                acc[c][y][x] = static_cast<double>(row[x * channels + c]) / 255.0;
    }
    return t;
}

json doc_to_json(const RecipeDoc& doc) {
    return json{{"id", doc.id},
                {"title", doc.title_text},
                {"ingredients", doc.ingredient_lines},
                {"instructions", doc.instruction_lines},
                {"image", doc.image_ref}};
}

}  // namespace

void materialize_synthetic(const SyntheticData& data, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    json dataset = json::array();
    for (const auto& pair : data.pairs) {
        dataset.push_back(doc_to_json(pair.recipe));
        cv::Mat m = tensor_to_mat8(pair.image);
        std::string path = (fs::path(dir) / pair.recipe.image_ref).string();
        check(cv::imwrite(path, m), "failed to write image: " + path);
    }
    std::ofstream out(fs::path(dir) / "dataset.json");
    out << dataset.dump(1) << "\n";

    json gt;
    gt["grid"] = {data.spec.grid_rows, data.spec.grid_cols};
    gt["n_classes"] = data.spec.n_ingredient_classes;
    gt["class_words"] = data.class_words;
    json samples = json::object();
    for (const auto& [id, patches] : data.groundtruth) {
        json rec = json::object();
        for (const auto& [patch, cls] : patches) rec[std::to_string(patch)] = cls;
        samples[id] = rec;
    }
    gt["samples"] = samples;
    std::ofstream gout(fs::path(dir) / "groundtruth.json");
    gout << gt.dump(1) << "\n";
}

GroundTruth load_groundtruth(const std::string& path, std::vector<std::string>* class_words) {
    std::ifstream in(path);
    check(in.good(), "cannot open groundtruth file: " + path);
    json gt = json::parse(in);
    if (class_words) *class_words = gt.at("class_words").get<std::vector<std::string>>();
    GroundTruth out;
    for (const auto& [id, rec] : gt.at("samples").items()) {
        std::map<int64_t, int64_t> patches;
        for (const auto& [patch, cls] : rec.items())
            patches[std::stoll(patch)] = cls.get<int64_t>();
        out[id] = std::move(patches);
    }
    return out;
}

namespace {

std::string field_error(const json& rec, size_t index, const std::string& field) {
    std::string id = rec.is_object() && rec.contains("id") && rec["id"].is_string()
                         ? rec["id"].get<std::string>()
                         : "#" + std::to_string(index);
    return "record " + id + ": missing or invalid field '" + field + "'";
}

}  // namespace

std::vector<SamplePair> load_recipe1m(const std::string& path, const std::string& image_root,
                                      Tokenizer& tok, const DataCaps& caps,
                                      int64_t image_size, int64_t channels,
                                      LoadReport* report) {
    std::ifstream in(path);
    check(in.good(), "cannot open dataset file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();
    // an entirely empty file counts as an empty dataset
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return {};

    json root = json::parse(text);
    check(root.is_array(), "dataset must be a JSON array: " + path);

    LoadReport local;
    std::string base = image_root.empty() ? fs::path(path).parent_path().string() : image_root;

    struct Raw { RecipeDoc doc; std::string image_path; };
    std::vector<Raw> raws;
    for (size_t i = 0; i < root.size(); ++i) {
        const json& rec = root[i];
        ++local.total_records;
        check(rec.is_object(), "record #" + std::to_string(i) + ": not an object");
        check(rec.contains("id") && rec["id"].is_string(), field_error(rec, i, "id"));
        check(rec.contains("title") && rec["title"].is_string(), field_error(rec, i, "title"));
        check(rec.contains("ingredients") && rec["ingredients"].is_array(),
              field_error(rec, i, "ingredients"));
        check(rec.contains("instructions") && rec["instructions"].is_array(),
              field_error(rec, i, "instructions"));

        if (!rec.contains("image") || rec["image"].is_null()) {
            ++local.missing_image;  // unpaired, only paired data is used
            continue;
        }
        check(rec["image"].is_string(), field_error(rec, i, "image"));

        Raw raw;
        raw.doc.id = rec["id"].get<std::string>();
        raw.doc.title_text = rec["title"].get<std::string>();
        for (const auto& line : rec["ingredients"]) {
            check(line.is_string(), field_error(rec, i, "ingredients"));
            raw.doc.ingredient_lines.push_back(line.get<std::string>());
        }
        for (const auto& line : rec["instructions"]) {
            check(line.is_string(), field_error(rec, i, "instructions"));
            raw.doc.instruction_lines.push_back(line.get<std::string>());
        }
        check(!raw.doc.title_text.empty() && !raw.doc.ingredient_lines.empty() &&
                  !raw.doc.instruction_lines.empty(),
              "record " + raw.doc.id + ": empty component");
        raw.doc.image_ref = rec["image"].get<std::string>();
        raw.image_path = (fs::path(base) / raw.doc.image_ref).string();
        raws.push_back(std::move(raw));
    }

    if (!tok.frozen()) {
        for (const auto& raw : raws) {
            tok.fit(raw.doc.title_text);
            tok.fit(join_lines(raw.doc.ingredient_lines));
            tok.fit(join_lines(raw.doc.instruction_lines));
        }
    }

    std::vector<SamplePair> out;
    for (auto& raw : raws) {
        cv::Mat m = cv::imread(raw.image_path, cv::IMREAD_UNCHANGED);
        if (m.empty()) {
            ++local.unreadable_images;
            std::cerr << "warning: skipping unreadable image " << raw.image_path << "\n";
            continue;
        }
        SamplePair pair;
        pair.image = mat_to_tensor(m, channels, image_size);
        pair.recipe = std::move(raw.doc);
        tokenize_doc(pair.recipe, tok, caps);
        out.push_back(std::move(pair));
    }
    if (local.unreadable_images > 0)
        std::cerr << "warning: " << local.unreadable_images << " unreadable image(s) skipped\n";
    if (report) *report = local;
    return out;
}

void retokenize(std::vector<SamplePair>& pairs, const Tokenizer& tok, const DataCaps& caps) {
    for (auto& pair : pairs) tokenize_doc(pair.recipe, tok, caps);
}

torch::Tensor decode_image_file(const std::string& path, int64_t channels,
                                int64_t image_size) {
    cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
    check(!m.empty(), "cannot read image: " + path);
    return mat_to_tensor(m, channels, image_size);
}

PairedBatch collate(const std::vector<SamplePair>& pairs, const std::vector<int64_t>& indices) {
    check(!indices.empty(), "collate: empty batch");
    const auto& first = pairs.at(static_cast<size_t>(indices[0]));
    int64_t capT = static_cast<int64_t>(first.recipe.title_ids.size());
    int64_t capG = static_cast<int64_t>(first.recipe.ingredient_ids.size());
    int64_t capN = static_cast<int64_t>(first.recipe.instruction_ids.size());
    int64_t B = static_cast<int64_t>(indices.size());

    PairedBatch batch;
    std::vector<torch::Tensor> images;
    batch.title_ids = torch::empty({B, capT}, torch::kInt64);
    batch.ingredient_ids = torch::empty({B, capG}, torch::kInt64);
    batch.instruction_ids = torch::empty({B, capN}, torch::kInt64);
    for (int64_t b = 0; b < B; ++b) {
        const auto& pair = pairs.at(static_cast<size_t>(indices[static_cast<size_t>(b)]));
        images.push_back(pair.image);
        check(static_cast<int64_t>(pair.recipe.title_ids.size()) == capT &&
                  static_cast<int64_t>(pair.recipe.ingredient_ids.size()) == capG &&
                  static_cast<int64_t>(pair.recipe.instruction_ids.size()) == capN,
              "collate: inconsistent token caps in batch");
        batch.title_ids[b] = torch::tensor(pair.recipe.title_ids, torch::kInt64);
        batch.ingredient_ids[b] = torch::tensor(pair.recipe.ingredient_ids, torch::kInt64);
        batch.instruction_ids[b] = torch::tensor(pair.recipe.instruction_ids, torch::kInt64);
        batch.ids.push_back(pair.recipe.id);
        batch.source_indices.push_back(indices[static_cast<size_t>(b)]);
    }
    batch.images = torch::stack(images, 0);
    return batch;
}

Batcher::Batcher(const std::vector<SamplePair>& pairs, int64_t batch_size,
                 uint64_t seed, bool drop_last)
    : pairs_(pairs), batch_size_(batch_size), seed_(seed), drop_last_(drop_last) {
    check(batch_size_ >= 2, "batch_size must be >= 2 (contrastive losses need negatives)");
    check(!pairs_.empty(), "Batcher: empty dataset");
}

int64_t Batcher::batches_per_epoch() const {
    int64_t n = static_cast<int64_t>(pairs_.size());
    if (drop_last_) return n / batch_size_;
    int64_t full = n / batch_size_;
    int64_t rest = n % batch_size_;
    return full + (rest >= 2 ? 1 : 0);
}

std::vector<PairedBatch> Batcher::epoch(int64_t epoch_index) const {
    std::vector<int64_t> order(pairs_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    SplitMix64 rng(mix_seed(seed_, 0x5u, static_cast<uint64_t>(epoch_index)));
    for (size_t i = order.size(); i > 1; --i) {
        uint64_t j = rng.bounded(i);
        std::swap(order[i - 1], order[j]);
    }

    std::vector<PairedBatch> out;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size_)) {
        size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size_));
        size_t count = end - start;
        if (count < static_cast<size_t>(batch_size_) && drop_last_) break;
        if (count < 2) break;  // a singleton batch has no negatives
        out.push_back(collate(pairs_, {order.begin() + static_cast<long>(start),
                                       order.begin() + static_cast<long>(end)}));
    }
    return out;
}

}  // namespace malm
