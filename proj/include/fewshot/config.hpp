#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "fewshot/dataset.hpp"
#include "fewshot/model.hpp"

namespace fewshot {

// A full training run description. Parsed strictly: unknown keys anywhere in
// the file are errors, so typos can't silently fall back to defaults.
struct RunConfig {
  // data
  std::string dataset;            // required
  std::string unlabeled_dataset;  // "" = none

  // model
  std::array<uint32_t, 4> widths{64, 64, 64, 64};
  double gamma_init = 10.0;
  std::array<uint32_t, 2> rot_head_widths{0, 0};  // 0 = derive from widths
  uint32_t loc_head_hidden = 0;

  // train
  Method method = Method::CC;
  SslTask ssl_task = SslTask::None;
  double alpha = 1.0;
  bool patch_aux = false;
  bool rotation_augmentation = false;
  bool selfsup_only = false;
  bool semi_supervised = false;
  double labeled_fraction = 1.0;
  uint32_t batch_labeled = 64;
  uint32_t batch_unlabeled = 0;
  uint32_t episode_n_way = 5;
  uint32_t episode_k_shot = 1;
  uint32_t episode_m_query = 15;
  uint32_t epochs = 30;
  uint32_t iters_per_epoch = 100;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_decay_factor = 0.1;
  uint32_t lr_decay_every = 10;
  uint32_t val_episodes = 200;
  uint64_t seed = 1;
  Similarity pn_similarity = Similarity::SqEuclidean;
};

// Parse + validate. Relative dataset paths resolve against `base_dir`
// (the config file's directory for file-based configs).
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig run_config_from_file(const std::filesystem::path& path);
void validate_run_config(const RunConfig& cfg);

// Canonical materialized form: every field present, sorted keys. Byte-stable
// for a given config, so its digest identifies the run setup.
nlohmann::json effective_config_json(const RunConfig& cfg);
std::string run_config_digest(const RunConfig& cfg);

// Model architecture for this run on this dataset (geometry and class count
// come from the data).
ModelConfig make_model_config(const RunConfig& cfg, const DatasetContainer& ds);

}  // namespace fewshot
