#include "malm/training.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "malm/common.hpp"
#include "malm/evaluation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace malm {

ObjectiveConfig ObjectiveConfig::from_run_config(const RunConfig& cfg) {
    ObjectiveConfig o;
    o.lambda_itm = cfg.get_real("lambda_itm");
    o.lambda_dist = cfg.get_real("lambda_dist");
    o.triplet_margin = cfg.get_real("triplet_margin");
    o.use_gc = cfg.get_bool("use_gc");
    o.use_lc = cfg.get_bool("use_lc");
    check(o.lambda_itm >= 0.0 && o.lambda_dist >= 0.0, "loss weights must be >= 0");
    return o;
}

torch::Tensor total_loss(LossBundle& bundle, const ObjectiveConfig& cfg) {
    auto require_finite = [](const torch::Tensor& t, const char* name) {
        check(t.defined(), std::string("loss component undefined: ") + name);
        check(t.isfinite().all().item<bool>(),
              std::string("non-finite loss component: ") + name);
    };
    require_finite(bundle.itc, "L_itc");
    require_finite(bundle.gc, "L_GC");
    require_finite(bundle.lc, "L_LC");
    require_finite(bundle.dist, "L_dist");
    torch::Tensor matching = (cfg.use_gc ? bundle.gc : torch::zeros({})) +
                             (cfg.use_lc ? bundle.lc : torch::zeros({}));
    bundle.total = bundle.itc + cfg.lambda_itm * matching + cfg.lambda_dist * bundle.dist;
    return bundle.total;
}

TrainSchedule TrainSchedule::from_run_config(const RunConfig& cfg) {
    TrainSchedule s;
    s.epochs = cfg.get_int("epochs");
    s.max_steps = cfg.get_int("max_steps");
    s.freeze_image_encoder_epochs = cfg.get_int("freeze_image_encoder_epochs");
    s.lr_main = cfg.get_real("lr_main");
    s.lr_image_encoder = cfg.get_real("lr_image_encoder");
    s.batch_size = cfg.get_int("batch_size");
    s.seed = static_cast<uint64_t>(cfg.get_int("seed"));
    s.grad_clip_norm = cfg.get_real("grad_clip_norm");
    s.val_fraction = cfg.get_real("val_fraction");
    s.validate();
    return s;
}

void TrainSchedule::validate() const {
    check(epochs >= 0, "epochs must be >= 0");
    check(freeze_image_encoder_epochs <= epochs || epochs == 0,
          "freeze epochs exceed total epochs");
    check(batch_size >= 2, "batch_size must be >= 2");
    check(val_fraction >= 0.0 && val_fraction < 1.0, "val_fraction must lie in [0, 1)");
    check(lr_main > 0.0 && lr_image_encoder > 0.0, "learning rates must be positive");
}

namespace {

void write_metrics(std::ofstream& out, const MetricsRecord& r) {
    if (!out.is_open()) return;
    json j{{"step", r.step},   {"epoch", r.epoch}, {"L", r.total},
           {"L_itc", r.itc},   {"L_GC", r.gc},     {"L_LC", r.lc},
           {"L_dist", r.dist}, {"lr", r.lr}};
    out << j.dump() << "\n";
    out.flush();
}

ValidationRecord validate_epoch(MalmModel& model, const std::vector<SamplePair>& val,
                                int64_t epoch, uint64_t seed) {
    auto [img, rec] = embed_corpus(model, val);
    int64_t bag = std::min<int64_t>(100, static_cast<int64_t>(val.size()));
    RetrievalReport report = rank_and_score(img, rec, "image-to-recipe", bag, 1,
                                            mix_seed(seed, 0x7641u));
    ValidationRecord v;
    v.epoch = epoch;
    v.med_rank = report.med_rank;
    v.r1 = report.r1;
    v.r5 = report.r5;
    v.r10 = report.r10;
    return v;
}

}  // namespace

TrainResult train(MalmModel& model, const std::vector<SamplePair>& dataset,
                  const TrainSchedule& schedule, const ObjectiveConfig& objective,
                  const RunConfig& run_config, const Tokenizer& tokenizer,
                  const std::string& run_dir,
                  const std::vector<SamplePair>* explicit_val) {
    schedule.validate();
    check(!dataset.empty(), "train: empty dataset");

    // held-out split for per-epoch validation
    std::vector<SamplePair> train_pairs, val_pairs;
    if (explicit_val) {
        train_pairs = dataset;
        val_pairs = *explicit_val;
    } else if (schedule.val_fraction > 0.0 && dataset.size() >= 4) {
        std::vector<int64_t> order(dataset.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
        SplitMix64 rng(mix_seed(schedule.seed, 0x5411u));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.bounded(i)]);
        size_t n_val = std::max<size_t>(2, static_cast<size_t>(
                                               schedule.val_fraction *
                                               static_cast<double>(dataset.size())));
        for (size_t i = 0; i < order.size(); ++i) {
            const auto& p = dataset[static_cast<size_t>(order[i])];
            (i < n_val ? val_pairs : train_pairs).push_back(p);
        }
    } else {
        train_pairs = dataset;
    }
    check(train_pairs.size() >= 2, "train: need at least 2 training pairs");

    TrainResult result;
    std::ofstream metrics_out;
    if (!run_dir.empty()) {
        fs::create_directories(run_dir);
        metrics_out.open(fs::path(run_dir) / "metrics.jsonl", std::ios::app);
        result.last_checkpoint_path = (fs::path(run_dir) / "last.ckpt").string();
        result.best_checkpoint_path = (fs::path(run_dir) / "best.ckpt").string();
        // initial checkpoint doubles as the "last good" state for divergence
        save_checkpoint(model, run_config, tokenizer, result.last_checkpoint_path);
    }

    const int64_t P = model->cfg.image.num_patches();
    const int64_t S = model->cfg.recipe.caps.total();
    Batcher batcher(train_pairs, schedule.batch_size, schedule.seed, /*drop_last=*/true);
    check(schedule.epochs == 0 || batcher.batches_per_epoch() > 0,
          "dataset too small for the batch size");

    std::vector<torch::optim::OptimizerParamGroup> groups;
    {
        auto main_opts = std::make_unique<torch::optim::AdamOptions>(schedule.lr_main);
        auto image_opts = std::make_unique<torch::optim::AdamOptions>(schedule.lr_image_encoder);
        groups.emplace_back(model->main_parameters(), std::move(main_opts));
        groups.emplace_back(model->image_encoder_parameters(), std::move(image_opts));
    }
    torch::optim::Adam optimizer(groups, torch::optim::AdamOptions(schedule.lr_main));

    auto all_trainable = [&]() {
        std::vector<torch::Tensor> out = model->main_parameters();
        auto img = model->image_encoder_parameters();
        out.insert(out.end(), img.begin(), img.end());
        return out;
    }();

    int64_t step = 0;
    bool stop = false;
    for (int64_t epoch = 0; epoch < schedule.epochs && !stop; ++epoch) {
        const bool frozen = epoch < schedule.freeze_image_encoder_epochs;
        for (const PairedBatch& batch : batcher.epoch(epoch)) {
            MaskSpec mask = MaskSpec::sample(P, model->cfg.mask_ratio, batch.size(),
                                             mix_seed(schedule.seed, 0x6d31u,
                                                      static_cast<uint64_t>(step)));
            std::optional<MaskSpec> recipe_mask;
            if (model->cfg.mask_recipe)
                recipe_mask = MaskSpec::sample(S, model->cfg.mask_ratio, batch.size(),
                                               mix_seed(schedule.seed, 0x6d32u,
                                                        static_cast<uint64_t>(step)));

            optimizer.zero_grad();
            StepOutputs outputs;
            torch::Tensor loss;
            try {
                outputs = model->forward_train(batch, mask,
                                               recipe_mask ? &*recipe_mask : nullptr,
                                               objective.triplet_margin);
                loss = total_loss(outputs.losses, objective);
            } catch (const Error& e) {
                result.diverged = true;
                result.divergence_reason = e.what();
                stop = true;
                break;
            }
            loss.backward();

            if (frozen) {
                // gradients are computed but never applied during the freeze
                for (auto& p : model->image_encoder_parameters())
                    if (p.mutable_grad().defined()) p.mutable_grad().reset();
            }
            if (schedule.grad_clip_norm > 0.0)
                torch::nn::utils::clip_grad_norm_(all_trainable, schedule.grad_clip_norm);
            optimizer.step();
            model->matching->clamp_temperature();
            model->ema_step(model->cfg.distill.ema_momentum);

            MetricsRecord rec;
            rec.step = step;
            rec.epoch = epoch;
            rec.total = outputs.losses.total.item<double>();
            rec.itc = outputs.losses.itc.item<double>();
            rec.gc = outputs.losses.gc.item<double>();
            rec.lc = outputs.losses.lc.item<double>();
            rec.dist = outputs.losses.dist.item<double>();
            rec.lr = schedule.lr_main;
            result.trace.push_back(rec);
            write_metrics(metrics_out, rec);

            ++step;
            if (schedule.max_steps > 0 && step >= schedule.max_steps) {
                stop = true;
                break;
            }
        }
        if (result.diverged) break;

        if (!val_pairs.empty()) {
            torch::NoGradGuard no_grad;
            ValidationRecord v = validate_epoch(model, val_pairs, epoch, schedule.seed);
            result.validations.push_back(v);
            if (v.r1 > result.best_val_r1) {
                result.best_val_r1 = v.r1;
                result.best_val_epoch = epoch;
                if (!run_dir.empty())
                    save_checkpoint(model, run_config, tokenizer,
                                    result.best_checkpoint_path);
            }
        }
        if (!run_dir.empty() && !result.diverged)
            save_checkpoint(model, run_config, tokenizer, result.last_checkpoint_path);
    }

    result.steps = step;
    if (!run_dir.empty() && !result.diverged)
        save_checkpoint(model, run_config, tokenizer, result.last_checkpoint_path);
    if (result.best_val_epoch < 0) result.best_checkpoint_path.clear();
    return result;
}

}  // namespace malm
