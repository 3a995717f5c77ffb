#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "malm/checkpoint.hpp"
#include "malm/model.hpp"

namespace malm {

struct ObjectiveConfig {
    double lambda_itm = 1.0;
    double lambda_dist = 1.0;
    double triplet_margin = 0.3;
    bool use_gc = true;
    bool use_lc = true;
    static ObjectiveConfig from_run_config(const RunConfig& cfg);
};

/// L = L_itc + lambda_itm * (L_GC + L_LC) + lambda_dist * L_dist, with the
/// gc/lc switches folded into the matching term. A non-finite component
/// aborts the step with a diagnostic naming the component.
torch::Tensor total_loss(LossBundle& bundle, const ObjectiveConfig& cfg);

struct TrainSchedule {
    int64_t epochs = 25;
    int64_t max_steps = 0;  // 0 = no cap
    int64_t freeze_image_encoder_epochs = 0;
    double lr_main = 1e-3;
    double lr_image_encoder = 1e-3;
    int64_t batch_size = 16;
    uint64_t seed = 0;
    double grad_clip_norm = 1.0;
    double val_fraction = 0.1;
    static TrainSchedule from_run_config(const RunConfig& cfg);
    void validate() const;
};

struct MetricsRecord {
    int64_t step = 0;
    int64_t epoch = 0;
    double total = 0, itc = 0, gc = 0, lc = 0, dist = 0;
    double lr = 0;
};

struct ValidationRecord {
    int64_t epoch = 0;
    double med_rank = 0;
    double r1 = 0, r5 = 0, r10 = 0;
};

struct TrainResult {
    int64_t steps = 0;
    bool diverged = false;
    std::string divergence_reason;
    std::vector<MetricsRecord> trace;
    std::vector<ValidationRecord> validations;
    double best_val_r1 = -1.0;
    int64_t best_val_epoch = -1;
    std::string best_checkpoint_path;  // empty when run_dir is empty
    std::string last_checkpoint_path;
};

/// Runs the optimization loop: one combined backward per batch, image
/// encoder excluded from updates during the freeze epochs, gradient clipping,
/// temperature clamp and teacher EMA after every step, per-epoch validation
/// with best-checkpoint retention. With an empty run_dir everything stays in
/// memory (no checkpoint or metrics files).
TrainResult train(MalmModel& model, const std::vector<SamplePair>& dataset,
                  const TrainSchedule& schedule, const ObjectiveConfig& objective,
                  const RunConfig& run_config, const Tokenizer& tokenizer,
                  const std::string& run_dir,
                  const std::vector<SamplePair>* explicit_val = nullptr);

}  // namespace malm
