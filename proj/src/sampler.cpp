#include "fewshot/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace fewshot {

size_t round_half_up(double x) {
  if (x < 0) throw ContractError("round_half_up: negative input");
  return size_t(std::floor(x + 0.5));
}

Episode sample_episode(const DatasetContainer& ds, const EpisodeSpec& spec, uint64_t seed) {
  if (spec.n_way < 2) throw SamplingError("episode needs n_way >= 2");
  if (spec.k_shot < 1 || spec.m_query < 1)
    throw SamplingError("episode needs k_shot >= 1 and m_query >= 1");
  const auto& classes = ds.classes_of(spec.split);
  if (classes.size() < size_t(spec.n_way))
    throw SamplingError("split '" + std::string(split_name(spec.split)) + "' has " +
                        std::to_string(classes.size()) + " classes, episode needs " +
                        std::to_string(spec.n_way));

  Rng rng(seed);
  Episode ep;
  const auto class_picks = rng.sample_without_replacement(uint32_t(classes.size()),
                                                          uint32_t(spec.n_way));
  for (auto k : class_picks) ep.class_ids.push_back(classes[k]);

  const size_t per_class = size_t(spec.k_shot) + size_t(spec.m_query);
  for (int n = 0; n < spec.n_way; ++n) {
    const uint32_t cid = ep.class_ids[size_t(n)];
    const auto& imgs = ds.images_by_class[cid];
    if (imgs.size() < per_class)
      throw SamplingError("class " + std::to_string(cid) + " has " +
                          std::to_string(imgs.size()) + " images, episode needs " +
                          std::to_string(per_class));
    const auto picks = rng.sample_without_replacement(uint32_t(imgs.size()),
                                                      uint32_t(per_class));
    for (int k = 0; k < spec.k_shot; ++k) {
      ep.support.push_back(imgs[picks[size_t(k)]]);
      ep.support_labels.push_back(n);
    }
    for (int m = 0; m < spec.m_query; ++m) {
      ep.query.push_back(imgs[picks[size_t(spec.k_shot + m)]]);
      ep.query_labels.push_back(n);
    }
  }
  return ep;
}

Episode sample_episode_from_pool(const DatasetContainer& ds, const EpisodeSpec& spec,
                                 uint64_t seed, const ImagePool& pool) {
  if (pool.ds != &ds) throw ContractError("sample_episode_from_pool: pool belongs elsewhere");
  if (spec.n_way < 2) throw SamplingError("episode needs n_way >= 2");
  if (spec.k_shot < 1 || spec.m_query < 1)
    throw SamplingError("episode needs k_shot >= 1 and m_query >= 1");
  const auto& classes = ds.classes_of(spec.split);
  if (classes.size() < size_t(spec.n_way))
    throw SamplingError("split '" + std::string(split_name(spec.split)) + "' has " +
                        std::to_string(classes.size()) + " classes, episode needs " +
                        std::to_string(spec.n_way));

  const std::unordered_set<uint32_t> members(pool.indices.begin(), pool.indices.end());
  Rng rng(seed);
  Episode ep;
  const auto class_picks = rng.sample_without_replacement(uint32_t(classes.size()),
                                                          uint32_t(spec.n_way));
  for (auto k : class_picks) ep.class_ids.push_back(classes[k]);

  const size_t per_class = size_t(spec.k_shot) + size_t(spec.m_query);
  for (int n = 0; n < spec.n_way; ++n) {
    const uint32_t cid = ep.class_ids[size_t(n)];
    std::vector<uint32_t> imgs;
    for (uint32_t i : ds.images_by_class[cid])
      if (members.count(i)) imgs.push_back(i);
    if (imgs.size() < per_class)
      throw SamplingError("class " + std::to_string(cid) + " has " +
                          std::to_string(imgs.size()) + " pooled images, episode needs " +
                          std::to_string(per_class));
    const auto picks = rng.sample_without_replacement(uint32_t(imgs.size()),
                                                      uint32_t(per_class));
    for (int k = 0; k < spec.k_shot; ++k) {
      ep.support.push_back(imgs[picks[size_t(k)]]);
      ep.support_labels.push_back(n);
    }
    for (int m = 0; m < spec.m_query; ++m) {
      ep.query.push_back(imgs[picks[size_t(spec.k_shot + m)]]);
      ep.query_labels.push_back(n);
    }
  }
  return ep;
}

ImagePool full_base_pool(const DatasetContainer& ds) {
  ImagePool pool;
  pool.ds = &ds;
  for (uint32_t c : ds.classes_of(Split::Base)) {
    const auto& imgs = ds.images_by_class[c];
    pool.indices.insert(pool.indices.end(), imgs.begin(), imgs.end());
  }
  std::sort(pool.indices.begin(), pool.indices.end());
  return pool;
}

ImagePool all_images_pool(const DatasetContainer& ds) {
  ImagePool pool;
  pool.ds = &ds;
  pool.indices.resize(ds.num_images());
  for (size_t i = 0; i < ds.num_images(); ++i) pool.indices[i] = uint32_t(i);
  return pool;
}

std::pair<ImagePool, ImagePool> subsample_base(const DatasetContainer& ds, double mu,
                                               uint64_t seed) {
  if (mu <= 0.0 || mu > 1.0)
    throw ConfigError("labeled fraction mu must be in (0, 1], got " + std::to_string(mu));
  Rng rng(seed);
  ImagePool labeled, unlabeled;
  labeled.ds = &ds;
  unlabeled.ds = &ds;
  std::vector<uint32_t> base = ds.classes_of(Split::Base);
  std::sort(base.begin(), base.end());
  for (uint32_t c : base) {
    const auto& imgs = ds.images_by_class[c];
    const size_t n_lab = round_half_up(mu * double(imgs.size()));
    if (n_lab == 0)
      throw SamplingError("labeled fraction " + std::to_string(mu) + " leaves class " +
                          std::to_string(c) + " without labeled images");
    auto picks = rng.sample_without_replacement(uint32_t(imgs.size()), uint32_t(n_lab));
    std::sort(picks.begin(), picks.end());
    std::vector<bool> is_lab(imgs.size(), false);
    for (auto p : picks) is_lab[p] = true;
    for (size_t k = 0; k < imgs.size(); ++k)
      (is_lab[k] ? labeled : unlabeled).indices.push_back(imgs[k]);
  }
  return {std::move(labeled), std::move(unlabeled)};
}

std::vector<uint32_t> draw_batch(const ImagePool& pool, size_t b, Rng& rng) {
  if (b == 0) return {};
  if (pool.size() == 0) throw SamplingError("cannot draw a batch from an empty pool");
  std::vector<uint32_t> out;
  out.reserve(b);
  if (pool.size() >= b) {
    const auto picks = rng.sample_without_replacement(uint32_t(pool.size()), uint32_t(b));
    for (auto p : picks) out.push_back(pool.indices[p]);
  } else {
    for (size_t k = 0; k < b; ++k)
      out.push_back(pool.indices[size_t(rng.below(pool.size()))]);
  }
  return out;
}

std::vector<int> base_labels_for(const DatasetContainer& ds,
                                 const std::vector<uint32_t>& idxs) {
  std::vector<int> out;
  out.reserve(idxs.size());
  for (uint32_t i : idxs) {
    if (i >= ds.num_images()) throw DimensionError("image index out of range");
    const int dense = ds.base_label_of[ds.labels[i]];
    if (dense < 0)
      throw LabelError("image " + std::to_string(i) + " is not in the base split");
    out.push_back(dense);
  }
  return out;
}

}  // namespace fewshot
