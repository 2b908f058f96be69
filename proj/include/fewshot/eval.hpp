#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "fewshot/model.hpp"
#include "fewshot/sampler.hpp"

namespace fewshot {

// Episodic evaluation protocol. Episode i is a pure function of
// (dataset, n_way/k_shot/m_query, base_seed + i), so results are
// reproducible and independent of the worker count.
struct EvalProtocol {
  uint32_t n_way = 5;
  uint32_t k_shot = 1;
  uint32_t m_query = 15;
  uint32_t episodes = 600;
  uint64_t base_seed = 12345;
  Split split = Split::Novel;
  Similarity similarity = Similarity::Cosine;
  uint32_t workers = 1;
};

struct EvalResult {
  double mean_acc = 0.0;
  double ci95 = 0.0;        // 1.96 * stddev / sqrt(episodes), Bessel-corrected
  bool ci95_defined = false;  // false when episodes == 1
  std::vector<double> episode_acc;
};

// Accuracy of one episode: class prototypes are per-class means of support
// features (batchnorm in inference mode), queries classified by similarity
// argmax. Ties resolve to the lowest class index.
double episode_accuracy(ModelBundle<float>& model, const DatasetContainer& ds,
                        const Episode& ep, Similarity sim);

EvalResult evaluate(ModelBundle<float>& model, const DatasetContainer& ds,
                    const EvalProtocol& proto);

// Mean and half-width of the 95% normal-approximation interval, exactly as
// evaluate() computes them (index-order accumulation in double).
std::pair<double, double> mean_ci95(const std::vector<double>& xs);

nlohmann::json eval_report_json(const EvalProtocol& proto, const EvalResult& res,
                                const std::string& checkpoint_sha256);

}  // namespace fewshot
