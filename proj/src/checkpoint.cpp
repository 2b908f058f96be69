#include "fewshot/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "fewshot/sha256.hpp"

namespace fewshot {

namespace {

using nlohmann::json;

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kParamsName = "params.bin";
constexpr int kFormatVersion = 1;

json tensor_entry(const std::string& name, const std::vector<size_t>& shape, size_t offset) {
  json e;
  e["name"] = name;
  e["shape"] = shape;
  e["offset"] = offset;
  return e;
}

// Strict field access: reject missing keys loudly instead of defaulting.
const json& need(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw FormatError("manifest: missing key '" + std::string(key) + "' in " + where);
  return *it;
}

void check_known_keys(const json& j, std::initializer_list<const char*> known,
                      const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw FormatError("manifest: unknown key '" + it.key() + "' in " + where);
  }
}

json record_to_json(const TrainRecord& r) {
  json t;
  t["epochs_run"] = r.epochs_run;
  t["best_epoch"] = r.best_epoch;
  t["best_val_acc"] = r.best_val_acc;
  t["val_history"] = r.val_history;
  t["selfsup_only"] = r.selfsup_only;
  t["alpha"] = r.alpha;
  t["pn_similarity"] = similarity_name(r.pn_similarity);
  t["config_digest"] = r.config_digest;
  return t;
}

TrainRecord record_from_json(const json& t) {
  check_known_keys(t,
                   {"epochs_run", "best_epoch", "best_val_acc", "val_history", "selfsup_only",
                    "alpha", "pn_similarity", "config_digest"},
                   "train");
  TrainRecord r;
  r.epochs_run = need(t, "epochs_run", "train").get<uint32_t>();
  r.best_epoch = need(t, "best_epoch", "train").get<int32_t>();
  r.best_val_acc = need(t, "best_val_acc", "train").get<double>();
  r.val_history = need(t, "val_history", "train").get<std::vector<double>>();
  r.selfsup_only = need(t, "selfsup_only", "train").get<bool>();
  r.alpha = need(t, "alpha", "train").get<double>();
  r.pn_similarity = similarity_from_name(need(t, "pn_similarity", "train").get<std::string>());
  r.config_digest = need(t, "config_digest", "train").get<std::string>();
  return r;
}

}  // namespace

json model_config_to_json(const ModelConfig& cfg) {
  json m;
  m["widths"] = cfg.widths;
  m["input_channels"] = cfg.input_channels;
  m["input_size"] = cfg.input_size;
  m["method"] = method_name(cfg.method);
  m["ssl_task"] = ssl_task_name(cfg.ssl);
  m["patch_aux"] = cfg.patch_aux;
  m["n_base_classes"] = cfg.n_base_classes;
  m["gamma_init"] = cfg.gamma_init;
  m["rot_head_widths"] = cfg.rot_head_widths;
  m["loc_head_hidden"] = cfg.loc_head_hidden;
  return m;
}

ModelConfig model_config_from_json(const json& m) {
  check_known_keys(m,
                   {"widths", "input_channels", "input_size", "method", "ssl_task", "patch_aux",
                    "n_base_classes", "gamma_init", "rot_head_widths", "loc_head_hidden"},
                   "model");
  ModelConfig cfg;
  auto widths = need(m, "widths", "model").get<std::vector<uint32_t>>();
  if (widths.size() != 4) throw FormatError("manifest: model.widths must have 4 entries");
  std::copy(widths.begin(), widths.end(), cfg.widths.begin());
  cfg.input_channels = need(m, "input_channels", "model").get<uint32_t>();
  cfg.input_size = need(m, "input_size", "model").get<uint32_t>();
  cfg.method = method_from_name(need(m, "method", "model").get<std::string>());
  cfg.ssl = ssl_task_from_name(need(m, "ssl_task", "model").get<std::string>());
  cfg.patch_aux = need(m, "patch_aux", "model").get<bool>();
  cfg.n_base_classes = need(m, "n_base_classes", "model").get<uint32_t>();
  cfg.gamma_init = need(m, "gamma_init", "model").get<double>();
  auto rw = need(m, "rot_head_widths", "model").get<std::vector<uint32_t>>();
  if (rw.size() != 2) throw FormatError("manifest: model.rot_head_widths must have 2 entries");
  cfg.rot_head_widths = {rw[0], rw[1]};
  cfg.loc_head_hidden = need(m, "loc_head_hidden", "model").get<uint32_t>();
  return cfg;
}

void save_checkpoint(const std::filesystem::path& dir, ModelBundle<float>& model,
                     const TrainRecord& record) {
  std::filesystem::create_directories(dir);

  json manifest;
  manifest["format"] = "fewshot-checkpoint";
  manifest["format_version"] = kFormatVersion;
  manifest["model"] = model_config_to_json(model.config());
  manifest["train"] = record_to_json(record);

  size_t offset = 0;
  json params = json::array(), buffers = json::array();
  for (auto* p : model.store().all_params()) {
    params.push_back(tensor_entry(p->name, p->value.shape(), offset));
    offset += p->value.numel();
  }
  for (auto* b : model.store().all_buffers()) {
    buffers.push_back(tensor_entry(b->name, b->value.shape(), offset));
    offset += b->value.numel();
  }
  manifest["params"] = params;
  manifest["buffers"] = buffers;
  manifest["total_scalars"] = offset;

  {
    std::ofstream f(dir / kParamsName, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / kParamsName).string());
    for (auto* p : model.store().all_params())
      f.write(reinterpret_cast<const char*>(p->value.data()),
              std::streamsize(p->value.numel() * sizeof(float)));
    for (auto* b : model.store().all_buffers())
      f.write(reinterpret_cast<const char*>(b->value.data()),
              std::streamsize(b->value.numel() * sizeof(float)));
    if (!f) throw IoError("short write to " + (dir / kParamsName).string());
  }
  {
    std::ofstream f(dir / kManifestName, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / kManifestName).string());
    f << manifest.dump(2) << "\n";
    if (!f) throw IoError("short write to " + (dir / kManifestName).string());
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestName;
  std::ifstream mf(manifest_path, std::ios::binary);
  if (!mf) throw IoError("cannot open " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::parse_error& e) {
    throw FormatError("manifest: invalid JSON in " + manifest_path.string() + ": " + e.what());
  }

  check_known_keys(manifest,
                   {"format", "format_version", "model", "train", "params", "buffers",
                    "total_scalars"},
                   "manifest root");
  if (need(manifest, "format", "root").get<std::string>() != "fewshot-checkpoint")
    throw FormatError("manifest: not a checkpoint manifest");
  if (need(manifest, "format_version", "root").get<int>() != kFormatVersion)
    throw FormatError("manifest: unsupported format_version");

  LoadedCheckpoint out;
  const ModelConfig cfg = model_config_from_json(need(manifest, "model", "root"));
  out.record = record_from_json(need(manifest, "train", "root"));
  // Seed is irrelevant: every scalar gets overwritten below.
  out.model = std::make_unique<ModelBundle<float>>(cfg, 0);

  const auto params_path = dir / kParamsName;
  std::ifstream pf(params_path, std::ios::binary);
  if (!pf) throw IoError("cannot open " + params_path.string());
  std::string blob((std::istreambuf_iterator<char>(pf)), std::istreambuf_iterator<char>());
  out.params_sha256 = Sha256::hex(blob);

  const size_t total = need(manifest, "total_scalars", "root").get<size_t>();
  if (blob.size() != total * sizeof(float))
    throw FormatError("params.bin: expected " + std::to_string(total * sizeof(float)) +
                      " bytes, found " + std::to_string(blob.size()));

  auto restore = [&](const json& table, const char* what, auto&& live) {
    size_t i = 0;
    for (const auto& entry : table) {
      check_known_keys(entry, {"name", "shape", "offset"}, what);
      if (i >= live.size())
        throw FormatError("manifest: more " + std::string(what) + " entries than the model has");
      auto& slot = *live[i];
      const std::string name = need(entry, "name", what).get<std::string>();
      if (name != slot.name)
        throw FormatError("manifest: " + std::string(what) + " #" + std::to_string(i) +
                          " is '" + name + "', model expects '" + slot.name + "'");
      const auto shape = need(entry, "shape", what).get<std::vector<size_t>>();
      if (shape != slot.value.shape())
        throw FormatError("manifest: tensor '" + name + "' shape mismatch");
      const size_t off = need(entry, "offset", what).get<size_t>();
      if (off + slot.value.numel() > total)
        throw FormatError("manifest: tensor '" + name + "' exceeds params.bin");
      std::memcpy(slot.value.data(), blob.data() + off * sizeof(float),
                  slot.value.numel() * sizeof(float));
      ++i;
    }
    if (i != live.size())
      throw FormatError("manifest: fewer " + std::string(what) + " entries than the model has");
  };
  restore(need(manifest, "params", "root"), "params", out.model->store().all_params());
  restore(need(manifest, "buffers", "root"), "buffers", out.model->store().all_buffers());
  return out;
}

}  // namespace fewshot
