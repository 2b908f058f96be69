#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fewshot/dataset.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

struct EpisodeSpec {
  int n_way = 5;
  int k_shot = 1;
  int m_query = 15;
  Split split = Split::Novel;
};

// One N-way K-shot episode. Image indices are class-major: class 0's shots,
// then class 1's, ...; episode-local labels run 0..N-1 in class draw order.
struct Episode {
  std::vector<uint32_t> class_ids;
  std::vector<uint32_t> support;
  std::vector<int> support_labels;
  std::vector<uint32_t> query;
  std::vector<int> query_labels;
};

// Deterministic function of (dataset, spec, seed). Draw order is fixed:
// first N distinct classes from the split, then K+M distinct images per
// class in episode-class order (first K support, next M query).
Episode sample_episode(const DatasetContainer& ds, const EpisodeSpec& spec, uint64_t seed);

struct ImagePool;

// Same draw protocol, but per-class image picks are restricted to pool
// members (kept in images_by_class order). With the full split as the pool
// this reproduces sample_episode exactly, draw for draw.
Episode sample_episode_from_pool(const DatasetContainer& ds, const EpisodeSpec& spec,
                                 uint64_t seed, const ImagePool& pool);

// A set of images usable for batch draws, tied to its source dataset.
struct ImagePool {
  const DatasetContainer* ds = nullptr;
  std::vector<uint32_t> indices;

  size_t size() const { return indices.size(); }
};

// All base-split images of a dataset.
ImagePool full_base_pool(const DatasetContainer& ds);

// All images of a dataset regardless of split (for external unlabeled sets).
ImagePool all_images_pool(const DatasetContainer& ds);

// Splits the base images into labeled/unlabeled pools. Per class,
// round-half-up(mu * count) images stay labeled (chosen at random without
// replacement, then index-sorted); the rest become the unlabeled pool.
// A class left without labeled images raises SamplingError.
std::pair<ImagePool, ImagePool> subsample_base(const DatasetContainer& ds, double mu,
                                               uint64_t seed);

// Draws a batch of `b` pool positions: without replacement when the pool is
// large enough, with replacement otherwise. Returns image indices.
std::vector<uint32_t> draw_batch(const ImagePool& pool, size_t b, Rng& rng);

// Dense base labels (0..N_base-1) for the given image indices.
std::vector<int> base_labels_for(const DatasetContainer& ds, const std::vector<uint32_t>& idxs);

size_t round_half_up(double x);

}  // namespace fewshot
