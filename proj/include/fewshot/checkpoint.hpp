#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "fewshot/model.hpp"

namespace fewshot {

// Training summary stored next to the weights.
struct TrainRecord {
  uint32_t epochs_run = 0;
  int32_t best_epoch = -1;  // -1: no validation tracking (selfsup-only runs)
  double best_val_acc = 0.0;
  std::vector<double> val_history;
  bool selfsup_only = false;
  double alpha = 1.0;
  Similarity pn_similarity = Similarity::SqEuclidean;
  std::string config_digest;  // sha256 of the effective run configuration
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Checkpoint directory layout:
//   manifest.json  - model config, tensor table (name/shape/offset), record
//   params.bin     - raw little-endian float32, params then buffers, in
//                    registration order at the offsets the manifest lists
// Serialization is canonical (sorted keys, fixed layout): saving the same
// state twice produces identical bytes.
void save_checkpoint(const std::filesystem::path& dir, ModelBundle<float>& model,
                     const TrainRecord& record);

struct LoadedCheckpoint {
  std::unique_ptr<ModelBundle<float>> model;
  TrainRecord record;
  std::string params_sha256;  // digest of params.bin as it was read
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace fewshot
