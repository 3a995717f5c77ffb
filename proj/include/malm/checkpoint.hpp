#pragma once

#include <string>

#include "malm/model.hpp"
#include "malm/tokenizer.hpp"

namespace malm {

/// Everything needed to rebuild a model: resolved config text, vocabulary
/// and the named parameter tensors, versioned with a format id.
struct LoadedCheckpoint {
    RunConfig config;
    Tokenizer tokenizer;
    MalmModel model{nullptr};
};

void save_checkpoint(const MalmModel& model, const RunConfig& config,
                     const Tokenizer& tokenizer, const std::string& path);

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace malm
