#include "fewshot/config.hpp"

#include <fstream>

#include "fewshot/sha256.hpp"

namespace fewshot {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> known,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("config: unknown key '" + where + "." + it.key() + "'");
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for '" + std::string(key) + "'");
  }
}

std::string resolve_path(const std::string& p, const std::filesystem::path& base_dir) {
  if (p.empty()) return p;
  std::filesystem::path fp(p);
  if (fp.is_relative()) fp = base_dir / fp;
  return fp.lexically_normal().string();
}

}  // namespace

RunConfig parse_run_config(const json& j, const std::filesystem::path& base_dir) {
  reject_unknown(j, {"data", "model", "train"}, "<root>");
  RunConfig cfg;

  const json data = j.value("data", json::object());
  reject_unknown(data, {"dataset", "unlabeled_dataset"}, "data");
  if (!data.contains("dataset") || !data["dataset"].is_string())
    throw ConfigError("config: 'data.dataset' (string) is required");
  cfg.dataset = resolve_path(data["dataset"].get<std::string>(), base_dir);
  cfg.unlabeled_dataset =
      resolve_path(get_or<std::string>(data, "unlabeled_dataset", ""), base_dir);

  const json model = j.value("model", json::object());
  reject_unknown(model, {"widths", "gamma_init", "rot_head_widths", "loc_head_hidden"}, "model");
  if (model.contains("widths")) {
    auto w = model["widths"].get<std::vector<uint32_t>>();
    if (w.size() != 4) throw ConfigError("config: 'model.widths' must have 4 entries");
    std::copy(w.begin(), w.end(), cfg.widths.begin());
  }
  cfg.gamma_init = get_or<double>(model, "gamma_init", cfg.gamma_init);
  if (model.contains("rot_head_widths")) {
    auto w = model["rot_head_widths"].get<std::vector<uint32_t>>();
    if (w.size() != 2) throw ConfigError("config: 'model.rot_head_widths' must have 2 entries");
    cfg.rot_head_widths = {w[0], w[1]};
  }
  cfg.loc_head_hidden = get_or<uint32_t>(model, "loc_head_hidden", cfg.loc_head_hidden);

  const json train = j.value("train", json::object());
  reject_unknown(train,
                 {"method", "ssl_task", "alpha", "patch_aux", "rotation_augmentation",
                  "selfsup_only", "semi_supervised", "labeled_fraction", "batch_labeled",
                  "batch_unlabeled", "episode_n_way", "episode_k_shot", "episode_m_query",
                  "epochs", "iters_per_epoch", "lr", "momentum", "weight_decay",
                  "lr_decay_factor", "lr_decay_every", "val_episodes", "seed",
                  "pn_similarity"},
                 "train");
  cfg.method = method_from_name(get_or<std::string>(train, "method", "cc"));
  cfg.ssl_task = ssl_task_from_name(get_or<std::string>(train, "ssl_task", "none"));
  cfg.alpha = get_or<double>(train, "alpha", cfg.alpha);
  cfg.patch_aux = get_or<bool>(train, "patch_aux", cfg.patch_aux);
  cfg.rotation_augmentation =
      get_or<bool>(train, "rotation_augmentation", cfg.rotation_augmentation);
  cfg.selfsup_only = get_or<bool>(train, "selfsup_only", cfg.selfsup_only);
  cfg.semi_supervised = get_or<bool>(train, "semi_supervised", cfg.semi_supervised);
  cfg.labeled_fraction = get_or<double>(train, "labeled_fraction", cfg.labeled_fraction);
  cfg.batch_labeled = get_or<uint32_t>(train, "batch_labeled", cfg.batch_labeled);
  cfg.batch_unlabeled = get_or<uint32_t>(train, "batch_unlabeled", cfg.batch_unlabeled);
  cfg.episode_n_way = get_or<uint32_t>(train, "episode_n_way", cfg.episode_n_way);
  cfg.episode_k_shot = get_or<uint32_t>(train, "episode_k_shot", cfg.episode_k_shot);
  cfg.episode_m_query = get_or<uint32_t>(train, "episode_m_query", cfg.episode_m_query);
  cfg.epochs = get_or<uint32_t>(train, "epochs", cfg.epochs);
  cfg.iters_per_epoch = get_or<uint32_t>(train, "iters_per_epoch", cfg.iters_per_epoch);
  cfg.lr = get_or<double>(train, "lr", cfg.lr);
  cfg.momentum = get_or<double>(train, "momentum", cfg.momentum);
  cfg.weight_decay = get_or<double>(train, "weight_decay", cfg.weight_decay);
  cfg.lr_decay_factor = get_or<double>(train, "lr_decay_factor", cfg.lr_decay_factor);
  cfg.lr_decay_every = get_or<uint32_t>(train, "lr_decay_every", cfg.lr_decay_every);
  cfg.val_episodes = get_or<uint32_t>(train, "val_episodes", cfg.val_episodes);
  cfg.seed = get_or<uint64_t>(train, "seed", cfg.seed);
  cfg.pn_similarity =
      similarity_from_name(get_or<std::string>(train, "pn_similarity", "sqeuclidean"));

  validate_run_config(cfg);
  return cfg;
}

RunConfig run_config_from_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: invalid JSON in " + path.string() + ": " + e.what());
  }
  return parse_run_config(j, std::filesystem::absolute(path).parent_path());
}

void validate_run_config(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw ConfigError("config: 'data.dataset' is required");
  for (auto w : cfg.widths)
    if (w == 0) throw ConfigError("config: model widths must be positive");
  if (cfg.gamma_init <= 0) throw ConfigError("config: gamma_init must be positive");
  if (cfg.epochs < 1) throw ConfigError("config: epochs must be >= 1");
  if (cfg.iters_per_epoch < 1) throw ConfigError("config: iters_per_epoch must be >= 1");
  if (cfg.lr <= 0) throw ConfigError("config: lr must be positive");
  if (cfg.momentum < 0 || cfg.momentum >= 1) throw ConfigError("config: momentum must be in [0, 1)");
  if (cfg.weight_decay < 0) throw ConfigError("config: weight_decay must be >= 0");
  if (cfg.lr_decay_factor <= 0 || cfg.lr_decay_factor > 1)
    throw ConfigError("config: lr_decay_factor must be in (0, 1]");
  if (cfg.lr_decay_every < 1) throw ConfigError("config: lr_decay_every must be >= 1");
  if (cfg.alpha < 0) throw ConfigError("config: alpha must be >= 0");
  if (cfg.labeled_fraction <= 0 || cfg.labeled_fraction > 1)
    throw ConfigError("config: labeled_fraction must be in (0, 1]");

  if (cfg.method == Method::CC && cfg.batch_labeled < 2)
    throw ConfigError("config: cc training needs batch_labeled >= 2");
  if (cfg.method == Method::PN &&
      (cfg.episode_n_way < 2 || cfg.episode_k_shot < 1 || cfg.episode_m_query < 1))
    throw ConfigError("config: pn episodes need n_way >= 2, k_shot >= 1, m_query >= 1");

  if (cfg.ssl_task == SslTask::None) {
    if (cfg.selfsup_only)
      throw ConfigError("config: selfsup_only requires a self-supervised task");
    if (cfg.semi_supervised)
      throw ConfigError("config: semi_supervised requires a self-supervised task");
    if (cfg.rotation_augmentation)
      throw ConfigError("config: rotation_augmentation requires ssl_task 'rotation'");
    if (cfg.patch_aux) throw ConfigError("config: patch_aux requires ssl_task 'location'");
    if (cfg.batch_unlabeled > 0)
      throw ConfigError("config: batch_unlabeled requires semi_supervised");
  }
  if (cfg.rotation_augmentation &&
      (cfg.ssl_task != SslTask::Rotation || cfg.method != Method::CC))
    throw ConfigError("config: rotation_augmentation requires cc + rotation");
  if (cfg.patch_aux && (cfg.ssl_task != SslTask::Location || cfg.method != Method::CC))
    throw ConfigError("config: patch_aux requires cc + location");
  if (cfg.batch_unlabeled > 0 && !cfg.semi_supervised)
    throw ConfigError("config: batch_unlabeled requires semi_supervised");
  if (cfg.semi_supervised && cfg.batch_unlabeled > 0 && cfg.labeled_fraction >= 1.0 &&
      cfg.unlabeled_dataset.empty())
    throw ConfigError(
        "config: semi-supervised with batch_unlabeled > 0 needs an unlabeled pool "
        "(labeled_fraction < 1 or an unlabeled_dataset)");
  if (cfg.selfsup_only && cfg.semi_supervised)
    throw ConfigError("config: selfsup_only and semi_supervised are mutually exclusive");
  if (!cfg.val_episodes && !cfg.selfsup_only)
    throw ConfigError("config: val_episodes must be >= 1");
}

json effective_config_json(const RunConfig& cfg) {
  json j;
  j["data"]["dataset"] = cfg.dataset;
  if (cfg.unlabeled_dataset.empty())
    j["data"]["unlabeled_dataset"] = nullptr;
  else
    j["data"]["unlabeled_dataset"] = cfg.unlabeled_dataset;
  j["model"]["widths"] = cfg.widths;
  j["model"]["gamma_init"] = cfg.gamma_init;
  j["model"]["rot_head_widths"] = cfg.rot_head_widths;
  j["model"]["loc_head_hidden"] = cfg.loc_head_hidden;
  json& t = j["train"];
  t["method"] = method_name(cfg.method);
  t["ssl_task"] = ssl_task_name(cfg.ssl_task);
  t["alpha"] = cfg.alpha;
  t["patch_aux"] = cfg.patch_aux;
  t["rotation_augmentation"] = cfg.rotation_augmentation;
  t["selfsup_only"] = cfg.selfsup_only;
  t["semi_supervised"] = cfg.semi_supervised;
  t["labeled_fraction"] = cfg.labeled_fraction;
  t["batch_labeled"] = cfg.batch_labeled;
  t["batch_unlabeled"] = cfg.batch_unlabeled;
  t["episode_n_way"] = cfg.episode_n_way;
  t["episode_k_shot"] = cfg.episode_k_shot;
  t["episode_m_query"] = cfg.episode_m_query;
  t["epochs"] = cfg.epochs;
  t["iters_per_epoch"] = cfg.iters_per_epoch;
  t["lr"] = cfg.lr;
  t["momentum"] = cfg.momentum;
  t["weight_decay"] = cfg.weight_decay;
  t["lr_decay_factor"] = cfg.lr_decay_factor;
  t["lr_decay_every"] = cfg.lr_decay_every;
  t["val_episodes"] = cfg.val_episodes;
  t["seed"] = cfg.seed;
  t["pn_similarity"] = similarity_name(cfg.pn_similarity);
  return j;
}

std::string run_config_digest(const RunConfig& cfg) {
  return Sha256::hex(effective_config_json(cfg).dump(2) + "\n");
}

ModelConfig make_model_config(const RunConfig& cfg, const DatasetContainer& ds) {
  if (ds.height != ds.width)
    throw ConfigError("training needs square images, dataset is " + std::to_string(ds.height) +
                      "x" + std::to_string(ds.width));
  ModelConfig m;
  m.widths = cfg.widths;
  m.input_channels = uint32_t(ds.channels);
  m.input_size = uint32_t(ds.height);
  m.method = cfg.method;
  m.ssl = cfg.ssl_task;
  m.patch_aux = cfg.patch_aux;
  m.n_base_classes = uint32_t(ds.classes_of(Split::Base).size());
  m.gamma_init = cfg.gamma_init;
  m.rot_head_widths = cfg.rot_head_widths;
  m.loc_head_hidden = cfg.loc_head_hidden;
  m.validate();
  return m;
}

}  // namespace fewshot
