#include "fewshot/eval.hpp"

#include <cmath>
#include <thread>

#include "fewshot/losses.hpp"

namespace fewshot {

double episode_accuracy(ModelBundle<float>& model, const DatasetContainer& ds,
                        const Episode& ep, Similarity sim) {
  Graph<float> g;
  Var sup = g.input(ds.batch<float>(ep.support));
  Var sup_flat = model.extractor().forward_images(g, sup, BnMode::Eval).flat;
  Var qry = g.input(ds.batch<float>(ep.query));
  Var qry_flat = model.extractor().forward_images(g, qry, BnMode::Eval).flat;
  const size_t n_way = ep.class_ids.size();
  Var protos = g.class_means(sup_flat, ep.support_labels, n_way);
  Var logits = pn_similarity_logits(g, qry_flat, protos, sim);
  const std::vector<int> preds = argmax_rows(g.value(logits));
  size_t correct = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == ep.query_labels[i]) ++correct;
  return double(correct) / double(preds.size());
}

std::pair<double, double> mean_ci95(const std::vector<double>& xs) {
  const size_t n = xs.size();
  if (n == 0) throw ContractError("mean_ci95: empty sample");
  double sum = 0;
  for (double x : xs) sum += x;
  const double mean = sum / double(n);
  if (n == 1) return {mean, 0.0};
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / double(n - 1));
  return {mean, 1.96 * sd / std::sqrt(double(n))};
}

EvalResult evaluate(ModelBundle<float>& model, const DatasetContainer& ds,
                    const EvalProtocol& proto) {
  if (proto.episodes == 0) throw ConfigError("evaluation needs episodes >= 1");
  if (proto.workers == 0) throw ConfigError("evaluation needs workers >= 1");
  EpisodeSpec spec;
  spec.n_way = int(proto.n_way);
  spec.k_shot = int(proto.k_shot);
  spec.m_query = int(proto.m_query);
  spec.split = proto.split;

  EvalResult res;
  res.episode_acc.resize(proto.episodes);
  auto run_range = [&](uint32_t lo, uint32_t hi) {
    for (uint32_t i = lo; i < hi; ++i) {
      Episode ep = sample_episode(ds, spec, proto.base_seed + i);
      res.episode_acc[i] = episode_accuracy(model, ds, ep, proto.similarity);
    }
  };

  const uint32_t w = std::min(proto.workers, proto.episodes);
  if (w <= 1) {
    run_range(0, proto.episodes);
  } else {
    std::vector<std::thread> threads;
    for (uint32_t t = 0; t < w; ++t) {
      const uint32_t lo = proto.episodes * t / w;
      const uint32_t hi = proto.episodes * (t + 1) / w;
      threads.emplace_back(run_range, lo, hi);
    }
    for (auto& th : threads) th.join();
  }

  auto [mean, ci] = mean_ci95(res.episode_acc);
  res.mean_acc = mean;
  res.ci95 = ci;
  res.ci95_defined = proto.episodes > 1;
  return res;
}

nlohmann::json eval_report_json(const EvalProtocol& proto, const EvalResult& res,
                                const std::string& checkpoint_sha256) {
  nlohmann::json j;
  j["checkpoint_sha256"] = checkpoint_sha256;
  j["mean_acc"] = res.mean_acc;
  j["ci95"] = res.ci95;
  j["ci95_defined"] = res.ci95_defined;
  j["episode_acc"] = res.episode_acc;
  nlohmann::json& p = j["protocol"];
  p["n_way"] = proto.n_way;
  p["k_shot"] = proto.k_shot;
  p["m_query"] = proto.m_query;
  p["episodes"] = proto.episodes;
  p["base_seed"] = proto.base_seed;
  p["split"] = split_name(proto.split);
  p["similarity"] = similarity_name(proto.similarity);
  // Worker count is an execution detail, not part of the protocol: results
  // are invariant to it, and the report must be too.
  return j;
}

}  // namespace fewshot
