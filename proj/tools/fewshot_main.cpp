#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "fewshot/checkpoint.hpp"
#include "fewshot/eval.hpp"
#include "fewshot/sha256.hpp"
#include "fewshot/synth.hpp"
#include "fewshot/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fewshot;

namespace {

// Domain failures map onto stable exit codes so scripts can tell apart
// misconfiguration (2), bad inputs/data (3), and divergence (4).
int exit_code_for(const Error& e) {
  if (dynamic_cast<const DivergenceError*>(&e)) return 4;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const CapacityError*>(&e) ||
      dynamic_cast<const CompatibilityError*>(&e) || dynamic_cast<const ContractError*>(&e))
    return 2;
  return 3;  // FormatError, IoError, SamplingError, LabelError, DimensionError
}

void status_line(const std::string& s) { std::cout << s << "\n" << std::flush; }

int cmd_make_synth(const std::string& out, const SynthSpec& spec) {
  DatasetContainer ds = make_synthetic(spec);
  save_fsds(ds, out);
  status_line("# wrote " + out + " (" + std::to_string(ds.num_images()) + " images, " +
              std::to_string(ds.class_names.size()) + " classes, " +
              std::to_string(ds.channels) + "x" + std::to_string(ds.height) + "x" +
              std::to_string(ds.width) + ")");
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& data_override, const std::string& unlabeled_override) {
  RunConfig cfg = run_config_from_file(config_path);
  if (!data_override.empty())
    cfg.dataset = fs::absolute(data_override).lexically_normal().string();
  if (!unlabeled_override.empty())
    cfg.unlabeled_dataset = fs::absolute(unlabeled_override).lexically_normal().string();
  validate_run_config(cfg);

  status_line("# training " + std::string(method_name(cfg.method)) + " ssl=" +
              ssl_task_name(cfg.ssl_task) + " -> " + out_dir);
  TrainOutcome o = run_training(cfg, out_dir, status_line);
  if (o.record.best_epoch >= 0)
    status_line("# done: best epoch " + std::to_string(o.record.best_epoch + 1) + "/" +
                std::to_string(o.record.epochs_run) + " val_acc " +
                std::to_string(o.record.best_val_acc));
  else
    status_line("# done: saved final model (no validation tracking)");
  status_line("# checkpoint " + o.checkpoint_dir.string());
  return 0;
}

int cmd_eval(const std::string& checkpoint_dir, const std::string& data_path,
             EvalProtocol proto, const std::string& similarity, const std::string& out_path) {
  LoadedCheckpoint lc = load_checkpoint(checkpoint_dir);
  DatasetContainer ds = load_fsds(data_path);
  if (ds.channels != lc.model->config().input_channels ||
      ds.height != lc.model->config().input_size || ds.height != ds.width)
    throw CompatibilityError("dataset geometry does not match the checkpoint (" +
                             std::to_string(ds.channels) + "x" + std::to_string(ds.height) +
                             "x" + std::to_string(ds.width) + " vs " +
                             std::to_string(lc.model->config().input_channels) + "x" +
                             std::to_string(lc.model->config().input_size) + ")");

  if (similarity == "auto")
    proto.similarity = lc.model->config().method == Method::PN ? lc.record.pn_similarity
                                                               : Similarity::Cosine;
  else
    proto.similarity = similarity_from_name(similarity);

  EvalResult res = evaluate(*lc.model, ds, proto);
  char line[160];
  std::snprintf(line, sizeof line, "# %u-way %u-shot %s: %.4f +/- %.4f (%u episodes)",
                proto.n_way, proto.k_shot, split_name(proto.split), res.mean_acc, res.ci95,
                proto.episodes);
  status_line(line);

  const json report = eval_report_json(proto, res, lc.params_sha256);
  std::cout << report.dump(2) << "\n";
  if (!out_path.empty()) {
    std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + out_path);
    f << report.dump(2) << "\n";
  }
  return 0;
}

int cmd_inspect(const std::string& path) {
  json out;
  if (fs::is_directory(path)) {
    LoadedCheckpoint lc = load_checkpoint(path);
    out["kind"] = "checkpoint";
    out["model"] = model_config_to_json(lc.model->config());
    out["params_sha256"] = lc.params_sha256;
    out["scalar_count"] = lc.model->store().scalar_count();
    out["epochs_run"] = lc.record.epochs_run;
    out["best_epoch"] = lc.record.best_epoch;
    out["best_val_acc"] = lc.record.best_val_acc;
    out["selfsup_only"] = lc.record.selfsup_only;
    out["config_digest"] = lc.record.config_digest;
  } else {
    DatasetContainer ds = load_fsds(path);
    out["kind"] = "dataset";
    out["num_images"] = ds.num_images();
    out["channels"] = ds.channels;
    out["height"] = ds.height;
    out["width"] = ds.width;
    out["num_classes"] = ds.class_names.size();
    out["base_classes"] = ds.classes_of(Split::Base).size();
    out["validation_classes"] = ds.classes_of(Split::Validation).size();
    out["novel_classes"] = ds.classes_of(Split::Novel).size();
    out["sha256"] = Sha256::hex_of_file(path);
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot image classification with self-supervised auxiliary tasks"};
  app.require_subcommand(1);

  // make-synth
  auto* mk = app.add_subcommand("make-synth", "Generate a procedural dataset file");
  std::string mk_out;
  SynthSpec spec;
  mk->add_option("--out", mk_out, "Output .fsds path")->required();
  mk->add_option("--base", spec.base_classes, "Base (training) classes");
  mk->add_option("--val", spec.val_classes, "Validation classes");
  mk->add_option("--novel", spec.novel_classes, "Novel (test) classes");
  mk->add_option("--per-class", spec.images_per_class, "Images per class");
  mk->add_option("--size", spec.image_size, "Image side in pixels (>= 32)");
  mk->add_option("--seed", spec.seed, "Generator seed");

  // train
  auto* tr = app.add_subcommand("train", "Train a model from a run config");
  std::string tr_config, tr_out, tr_data, tr_unlabeled;
  tr->add_option("--config", tr_config, "Run config JSON file")->required();
  tr->add_option("--out", tr_out, "Checkpoint output directory")->required();
  tr->add_option("--data", tr_data, "Override data.dataset");
  tr->add_option("--unlabeled", tr_unlabeled, "Override data.unlabeled_dataset");

  // eval
  auto* ev = app.add_subcommand("eval", "Episodic evaluation of a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "novel", ev_sim = "auto", ev_out;
  EvalProtocol proto;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint directory")->required();
  ev->add_option("--data", ev_data, "Dataset .fsds path")->required();
  ev->add_option("--split", ev_split, "Split to evaluate: base|validation|novel")
      ->check(CLI::IsMember({"base", "validation", "novel"}));
  ev->add_option("--n-way", proto.n_way, "Classes per episode");
  ev->add_option("--k-shot", proto.k_shot, "Support images per class");
  ev->add_option("--m-query", proto.m_query, "Query images per class");
  ev->add_option("--episodes", proto.episodes, "Number of episodes");
  ev->add_option("--seed", proto.base_seed, "Base seed; episode i uses seed+i");
  ev->add_option("--similarity", ev_sim, "auto|cosine|sqeuclidean")
      ->check(CLI::IsMember({"auto", "cosine", "sqeuclidean"}));
  ev->add_option("--workers", proto.workers, "Evaluation threads");
  ev->add_option("--out", ev_out, "Also write the JSON report here");

  // inspect
  auto* in = app.add_subcommand("inspect", "Describe a dataset file or checkpoint directory");
  std::string in_path;
  in->add_option("--path", in_path, "Dataset .fsds file or checkpoint directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*mk) return cmd_make_synth(mk_out, spec);
    if (*tr) return cmd_train(tr_config, tr_out, tr_data, tr_unlabeled);
    if (*ev) {
      proto.split = split_from_name(ev_split);
      return cmd_eval(ev_ckpt, ev_data, proto, ev_sim, ev_out);
    }
    if (*in) return cmd_inspect(in_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
