#include "fewshot/train.hpp"

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>

#include "fewshot/eval.hpp"
#include "fewshot/losses.hpp"
#include "fewshot/optimizer.hpp"

namespace fewshot {

namespace {

using nlohmann::json;

// Seed-stream tags. Every random decision in a run derives from
// mix_seed({run_seed, tag, ...}), so streams never collide.
constexpr uint64_t kTagInit = 1;
constexpr uint64_t kTagLabeled = 2;   // + epoch, iter
constexpr uint64_t kTagVal = 3;       // + episode index
constexpr uint64_t kTagPatches = 4;   // + epoch, iter
constexpr uint64_t kTagUnlabeled = 5;  // + epoch, iter
constexpr uint64_t kTagSubsample = 10;

struct Snapshot {
  std::vector<Tensor<float>> params;
  std::vector<Tensor<float>> buffers;

  static Snapshot take(ModelBundle<float>& m) {
    Snapshot s;
    for (auto* p : m.store().all_params()) s.params.push_back(p->value);
    for (auto* b : m.store().all_buffers()) s.buffers.push_back(b->value);
    return s;
  }
  void restore(ModelBundle<float>& m) const {
    auto ps = m.store().all_params();
    auto bs = m.store().all_buffers();
    for (size_t i = 0; i < ps.size(); ++i) ps[i]->value = params[i];
    for (size_t i = 0; i < bs.size(); ++i) bs[i]->value = buffers[i];
  }
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed << v;
  return os.str();
}

}  // namespace

TrainOutcome run_training(const RunConfig& cfg, const std::filesystem::path& out_dir,
                          const StatusFn& status) {
  validate_run_config(cfg);
  auto say = [&](const std::string& s) {
    if (status) status(s);
  };

  DatasetContainer ds = load_fsds(cfg.dataset);
  std::optional<DatasetContainer> external;
  if (!cfg.unlabeled_dataset.empty()) {
    external = load_fsds(cfg.unlabeled_dataset);
    if (external->channels != ds.channels || external->height != ds.height ||
        external->width != ds.width)
      throw CompatibilityError("unlabeled dataset geometry (" +
                               std::to_string(external->channels) + "," +
                               std::to_string(external->height) + "," +
                               std::to_string(external->width) + ") does not match (" +
                               std::to_string(ds.channels) + "," + std::to_string(ds.height) +
                               "," + std::to_string(ds.width) + ")");
  }

  const ModelConfig model_cfg = make_model_config(cfg, ds);
  ModelBundle<float> model(model_cfg, mix_seed({cfg.seed, kTagInit}));

  // Pools. The labeled pool always exists; the unlabeled pool only when the
  // run can actually draw from it.
  ImagePool labeled_pool, unlabeled_pool;
  bool restrict_episodes = false;
  if (cfg.labeled_fraction < 1.0) {
    auto split = subsample_base(ds, cfg.labeled_fraction, mix_seed({cfg.seed, kTagSubsample}));
    labeled_pool = std::move(split.first);
    unlabeled_pool = std::move(split.second);
    restrict_episodes = true;
  } else {
    labeled_pool = full_base_pool(ds);
  }
  if (external) unlabeled_pool = all_images_pool(*external);
  const bool use_unlabeled = cfg.semi_supervised && cfg.batch_unlabeled > 0;
  if (use_unlabeled && unlabeled_pool.size() == 0)
    throw SamplingError("semi-supervised run has an empty unlabeled pool");

  std::vector<Parameter<float>*> trainable =
      cfg.selfsup_only
          ? model.store().params_with_prefix({"extractor.", "rot_head.", "loc_head."})
          : model.store().all_params();
  SgdOptimizer<float>::Config opt_cfg;
  opt_cfg.lr = float(cfg.lr);
  opt_cfg.momentum = float(cfg.momentum);
  opt_cfg.weight_decay = float(cfg.weight_decay);
  SgdOptimizer<float> opt(trainable, opt_cfg);

  StepOptions step_opt;
  step_opt.alpha = cfg.alpha;
  step_opt.rotation_augmentation = cfg.rotation_augmentation;
  step_opt.selfsup_only = cfg.selfsup_only;
  step_opt.pn_similarity = cfg.pn_similarity;

  EpisodeSpec train_episode;
  train_episode.n_way = int(cfg.episode_n_way);
  train_episode.k_shot = int(cfg.episode_k_shot);
  train_episode.m_query = int(cfg.episode_m_query);
  train_episode.split = Split::Base;

  // Fixed per-run validation protocol; the same episode seeds every epoch.
  EvalProtocol val_proto;
  val_proto.split = Split::Validation;
  val_proto.episodes = cfg.val_episodes;
  if (cfg.method == Method::PN) {
    val_proto.n_way = cfg.episode_n_way;
    val_proto.k_shot = cfg.episode_k_shot;
    val_proto.m_query = cfg.episode_m_query;
    val_proto.similarity = cfg.pn_similarity;
  } else {
    val_proto.n_way = 5;
    val_proto.k_shot = 1;
    val_proto.m_query = 15;
    val_proto.similarity = Similarity::Cosine;
  }

  TrainRecord record;
  record.selfsup_only = cfg.selfsup_only;
  record.alpha = cfg.alpha;
  record.pn_similarity = cfg.pn_similarity;
  record.config_digest = run_config_digest(cfg);

  std::optional<Snapshot> best;
  std::vector<std::string> log_lines;
  const bool track_val = !cfg.selfsup_only;

  for (uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every, epoch);
    opt.set_lr(float(lr));

    double sum_total = 0, sum_few = 0, sum_self = 0, sum_aux = 0;
    for (uint32_t iter = 0; iter < cfg.iters_per_epoch; ++iter) {
      StepBatch<float> batch;
      if (cfg.method == Method::CC) {
        Rng draw_rng(mix_seed({cfg.seed, kTagLabeled, epoch, iter}));
        const auto idxs = draw_batch(labeled_pool, cfg.batch_labeled, draw_rng);
        batch.labeled = ds.batch<float>(idxs);
        batch.labels = base_labels_for(ds, idxs);
      } else {
        const uint64_t ep_seed = mix_seed({cfg.seed, kTagLabeled, epoch, iter});
        Episode ep = restrict_episodes
                         ? sample_episode_from_pool(ds, train_episode, ep_seed, labeled_pool)
                         : sample_episode(ds, train_episode, ep_seed);
        std::vector<uint32_t> rows = ep.support;
        rows.insert(rows.end(), ep.query.begin(), ep.query.end());
        batch.labeled = ds.batch<float>(rows);
        batch.labels = ep.support_labels;
        batch.labels.insert(batch.labels.end(), ep.query_labels.begin(), ep.query_labels.end());
        batch.n_way = cfg.episode_n_way;
        batch.k_shot = cfg.episode_k_shot;
        batch.m_query = cfg.episode_m_query;
      }
      if (use_unlabeled) {
        Rng unl_rng(mix_seed({cfg.seed, kTagUnlabeled, epoch, iter}));
        const auto idxs = draw_batch(unlabeled_pool, cfg.batch_unlabeled, unl_rng);
        batch.unlabeled = unlabeled_pool.ds->batch<float>(idxs);
      }

      Graph<float> g;
      auto out = total_step_loss(g, model, batch, step_opt,
                                 mix_seed({cfg.seed, kTagPatches, epoch, iter}));
      if (!std::isfinite(out.value_total))
        throw DivergenceError("training diverged: non-finite loss at epoch " +
                              std::to_string(epoch) + " iter " + std::to_string(iter));
      model.store().zero_grad();
      g.backward(out.total);
      opt.step();

      sum_total += out.value_total;
      sum_few += out.value_few;
      sum_self += out.value_self;
      sum_aux += out.value_aux;
    }
    const double n = double(cfg.iters_per_epoch);

    json line;
    line["epoch"] = epoch;
    line["lr"] = lr;
    line["loss_total"] = sum_total / n;
    line["loss_few"] = sum_few / n;
    line["loss_self"] = sum_self / n;
    line["loss_aux"] = sum_aux / n;

    std::string status_extra;
    if (track_val) {
      double acc_sum = 0;
      for (uint32_t i = 0; i < cfg.val_episodes; ++i) {
        EpisodeSpec spec;
        spec.n_way = int(val_proto.n_way);
        spec.k_shot = int(val_proto.k_shot);
        spec.m_query = int(val_proto.m_query);
        spec.split = Split::Validation;
        Episode ep = sample_episode(ds, spec, mix_seed({cfg.seed, kTagVal, i}));
        acc_sum += episode_accuracy(model, ds, ep, val_proto.similarity);
      }
      const double val_acc = acc_sum / double(cfg.val_episodes);
      record.val_history.push_back(val_acc);
      line["val_acc"] = val_acc;
      const bool is_best = !best || val_acc > record.best_val_acc;
      line["best"] = is_best;
      if (is_best) {
        record.best_val_acc = val_acc;
        record.best_epoch = int32_t(epoch);
        best = Snapshot::take(model);
      }
      status_extra = " val " + fmt(val_acc) + (is_best ? " *" : "");
    } else {
      line["val_acc"] = nullptr;
      line["best"] = false;
    }
    log_lines.push_back(line.dump());
    say("# epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) + " lr " +
        fmt(lr) + " loss " + fmt(sum_total / n) + status_extra);
    record.epochs_run = epoch + 1;
  }

  if (best) best->restore(model);

  std::filesystem::create_directories(out_dir);
  save_checkpoint(out_dir, model, record);
  {
    std::ofstream f(out_dir / "effective_config.json", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (out_dir / "effective_config.json").string());
    f << effective_config_json(cfg).dump(2) << "\n";
  }
  {
    std::ofstream f(out_dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (out_dir / "train_log.jsonl").string());
    for (const auto& l : log_lines) f << l << "\n";
  }

  TrainOutcome outcome;
  outcome.record = record;
  outcome.checkpoint_dir = out_dir;
  return outcome;
}

}  // namespace fewshot
