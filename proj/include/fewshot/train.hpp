#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "fewshot/checkpoint.hpp"
#include "fewshot/config.hpp"

namespace fewshot {

// Optional sink for human-oriented progress lines (no trailing newline).
using StatusFn = std::function<void(const std::string&)>;

struct TrainOutcome {
  TrainRecord record;
  std::filesystem::path checkpoint_dir;
};

// Runs the configured training job and writes a checkpoint directory:
//   manifest.json, params.bin    - best model (final model when no
//                                  validation tracking applies)
//   effective_config.json        - the materialized run configuration
//   train_log.jsonl              - one JSON line per epoch
// Everything is a deterministic function of the config (including dataset
// paths), so re-running the same effective config reproduces every byte.
TrainOutcome run_training(const RunConfig& cfg, const std::filesystem::path& out_dir,
                          const StatusFn& status = nullptr);

}  // namespace fewshot
