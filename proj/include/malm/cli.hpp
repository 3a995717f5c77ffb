#pragma once

#include <string>
#include <vector>

#include "malm/config.hpp"

namespace malm {

struct ParsedArgs {
    // exit_code < 0 means "proceed"; 0/2 mean "print usage_text and exit"
    int exit_code = -1;
    std::string usage_text;
    std::string command;
    RunConfig config = RunConfig::defaults();
};

/// Commands: generate-data, train, eval, ablate, retrieve, check.
/// Every config key doubles as a `--key value` flag (underscores become
/// hyphens); `--config FILE` loads a key-value file first, flags override.
ParsedArgs parse_args(const std::vector<std::string>& args);

std::string usage();

/// Dispatches a parsed command. Returns the process exit code
/// (0 success, 1 runtime failure).
int run_command(const std::string& command, RunConfig& config);

}  // namespace malm
