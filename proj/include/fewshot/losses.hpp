#pragma once

#include <cstring>
#include <vector>

#include "fewshot/model.hpp"
#include "fewshot/ssl_tasks.hpp"

namespace fewshot {

// Episode-style similarity scores against prototypes, as softmax
// probabilities over classes. sqeuclidean uses negated squared distances.
template <typename T>
Var pn_similarity_logits(Graph<T>& g, Var query_feats, Var prototypes, Similarity sim) {
  if (sim == Similarity::SqEuclidean) return g.neg(g.pairwise_sqdist(query_feats, prototypes));
  return g.pairwise_cosine(query_feats, prototypes, T(1e-8));
}

template <typename T>
Var pn_scores(Graph<T>& g, Var query_feats, Var prototypes, Similarity sim) {
  return g.softmax_rows(pn_similarity_logits(g, query_feats, prototypes, sim));
}

// One optimizer step's worth of data.
//
// cc:  `labeled` is [B_l,C,S,S] with dense base labels in `labels`.
// pn:  `labeled` holds n_way*k_shot support rows followed by n_way*m_query
//      query rows (class-major); `labels` holds the episode-local labels for
//      both spans in the same order.
// `unlabeled` ([B_u,C,S,S], possibly empty) only ever feeds the
// self-supervised term.
template <typename T>
struct StepBatch {
  Tensor<T> labeled;
  std::vector<int> labels;
  size_t n_way = 0, k_shot = 0, m_query = 0;
  Tensor<T> unlabeled;

  size_t labeled_count() const { return labeled.numel() == 0 ? 0 : labeled.dim(0); }
  size_t unlabeled_count() const { return unlabeled.numel() == 0 ? 0 : unlabeled.dim(0); }
};

struct StepOptions {
  double alpha = 1.0;               // weight of the self-supervised term
  bool rotation_augmentation = false;  // cc+rotation: classify all 4 rotations
  bool selfsup_only = false;        // drop the supervised (and aux) terms
  Similarity pn_similarity = Similarity::SqEuclidean;
};

template <typename T>
struct StepLossOutcome {
  Var total{-1};
  double value_total = 0;
  double value_few = 0, value_self = 0, value_aux = 0;
  bool has_few = false, has_self = false, has_aux = false;
};

namespace detail {

template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.numel() == 0) return a;
  if (a.numel() == 0) return b;
  if (a.rank() != b.rank()) throw DimensionError("concat_batch: rank mismatch");
  for (size_t d = 1; d < a.rank(); ++d)
    if (a.dim(d) != b.dim(d)) throw DimensionError("concat_batch: trailing shape mismatch");
  std::vector<size_t> shape = a.shape();
  shape[0] += b.dim(0);
  Tensor<T> out(shape);
  std::memcpy(out.data(), a.data(), a.numel() * sizeof(T));
  std::memcpy(out.data() + a.numel(), b.data(), b.numel() * sizeof(T));
  return out;
}

}  // namespace detail

// Cross-entropy of the cosine classifier over a labeled batch.
template <typename T>
Var loss_cc(Graph<T>& g, ModelBundle<T>& model, Var features, const std::vector<int>& labels) {
  return g.softmax_cross_entropy(model.classifier().logits(g, features), labels);
}

// Episode loss: class prototypes from support features, cross-entropy of
// query similarities against episode labels.
template <typename T>
Var loss_pn(Graph<T>& g, ModelBundle<T>& model, Var support_feats,
            const std::vector<int>& support_labels, Var query_feats,
            const std::vector<int>& query_labels, size_t n_way, Similarity sim) {
  (void)model;
  Var protos = g.class_means(support_feats, support_labels, n_way);
  Var logits = pn_similarity_logits(g, query_feats, protos, sim);
  return g.softmax_cross_entropy(logits, query_labels);
}

// Rotation-prediction loss over an already-forwarded rotation batch: the
// per-image sum over its four rotations, i.e. 4x the mean row CE.
template <typename T>
Var loss_rotation(Graph<T>& g, ModelBundle<T>& model, Var maps,
                  const std::vector<int>& rot_labels, BnMode mode) {
  Var logits = model.rot_head().logits(g, maps, mode);
  return g.scale(g.softmax_cross_entropy(logits, rot_labels), T(4));
}

// Relative-patch-location loss over patch features laid out as 9 rows per
// image (region-major). The per-image sum over its 8 (center, neighbor)
// pairs, i.e. 8x the mean pair CE.
template <typename T>
Var loss_location(Graph<T>& g, ModelBundle<T>& model, Var patch_feats, size_t n_images,
                  BnMode mode) {
  std::vector<size_t> centers, neighbors;
  std::vector<int> pair_labels;
  centers.reserve(n_images * 8);
  neighbors.reserve(n_images * 8);
  pair_labels.reserve(n_images * 8);
  for (size_t i = 0; i < n_images; ++i)
    for (int r = 0; r < int(kPatchCount); ++r) {
      if (r == int(kPatchCount) / 2) continue;
      centers.push_back(i * kPatchCount + kPatchCount / 2);
      neighbors.push_back(i * kPatchCount + size_t(r));
      pair_labels.push_back(patch_pair_label(r) - 1);
    }
  Var f0 = g.take_rows(patch_feats, centers);
  Var fp = g.take_rows(patch_feats, neighbors);
  Var logits = model.loc_head().logits(g, f0, fp, mode);
  return g.scale(g.softmax_cross_entropy(logits, pair_labels), T(8));
}

// Extracts the 9 patches of every image in `images` ([B,C,S,S]) into one
// [9B,C,24,24] tensor, region-major within each image. Patch randomness for
// image i comes from mix_seed({patch_seed, i}).
template <typename T>
Tensor<T> build_patch_batch(const Tensor<T>& images, uint64_t patch_seed) {
  const size_t b = images.dim(0), c = images.dim(1);
  Tensor<T> out({b * kPatchCount, c, kPatchSize, kPatchSize});
  const size_t per_image = c * kPatchSize * kPatchSize;
  for (size_t i = 0; i < b; ++i) {
    Tensor<T> img({c, images.dim(2), images.dim(3)});
    std::memcpy(img.data(), images.data() + i * img.numel(), img.numel() * sizeof(T));
    PatchSet<T> ps = extract_patches(img, mix_seed({patch_seed, i}));
    std::memcpy(out.data() + i * kPatchCount * per_image, ps.patches.data(),
                kPatchCount * per_image * sizeof(T));
  }
  return out;
}

// Builds the full training objective for one step on one graph, sharing
// forward passes between terms:
//   total = L_supervised + 1.0 * L_patch_aux + alpha * L_self
// accumulated in exactly that order. With rotation, one extractor pass over
// the rotated labeled+unlabeled batch feeds both terms; with location, the
// supervised image pass runs first, then the patch pass. selfsup_only keeps
// only alpha * L_self.
template <typename T>
StepLossOutcome<T> total_step_loss(Graph<T>& g, ModelBundle<T>& model, const StepBatch<T>& batch,
                                   const StepOptions& opt, uint64_t patch_seed) {
  const ModelConfig& cfg = model.config();
  const size_t b_l = batch.labeled_count();
  const size_t b_u = batch.unlabeled_count();
  if (b_l == 0) throw ContractError("total_step_loss: labeled batch is empty");
  if (cfg.method == Method::PN) {
    if (batch.n_way < 2 || batch.k_shot == 0 || batch.m_query == 0)
      throw ContractError("total_step_loss: pn batch needs n_way>=2, k_shot>=1, m_query>=1");
    if (b_l != batch.n_way * (batch.k_shot + batch.m_query))
      throw DimensionError("total_step_loss: pn batch row count mismatch");
  }
  if (opt.rotation_augmentation && (cfg.ssl != SslTask::Rotation || cfg.method != Method::CC))
    throw ConfigError("rotation_augmentation requires cc + rotation");
  if (opt.selfsup_only && cfg.ssl == SslTask::None)
    throw ConfigError("selfsup_only requires a self-supervised task");

  const size_t n_sup = cfg.method == Method::PN ? batch.n_way * batch.k_shot : 0;
  std::vector<int> support_labels, query_labels;
  if (cfg.method == Method::PN) {
    support_labels.assign(batch.labels.begin(), batch.labels.begin() + long(n_sup));
    query_labels.assign(batch.labels.begin() + long(n_sup), batch.labels.end());
  }

  StepLossOutcome<T> out;
  Var few{-1}, self_term{-1}, aux{-1};

  if (cfg.ssl == SslTask::Rotation) {
    RotationBatch<T> rot = make_rotation_batch(detail::concat_batch(batch.labeled, batch.unlabeled));
    Var x = g.input(std::move(rot.images));
    auto fw = model.extractor().forward_images(g, x, BnMode::Train);
    if (!opt.selfsup_only) {
      if (cfg.method == Method::CC) {
        std::vector<size_t> rows;
        std::vector<int> row_labels;
        if (opt.rotation_augmentation) {
          rows.resize(4 * b_l);
          row_labels.resize(4 * b_l);
          for (size_t i = 0; i < b_l; ++i)
            for (size_t r = 0; r < 4; ++r) {
              rows[4 * i + r] = 4 * i + r;
              row_labels[4 * i + r] = batch.labels[i];
            }
        } else {
          rows.resize(b_l);
          for (size_t i = 0; i < b_l; ++i) rows[i] = 4 * i;
          row_labels = batch.labels;
        }
        few = loss_cc(g, model, g.take_rows(fw.flat, rows), row_labels);
      } else {
        std::vector<size_t> sup_rows(n_sup), q_rows(b_l - n_sup);
        for (size_t i = 0; i < n_sup; ++i) sup_rows[i] = 4 * i;
        for (size_t j = 0; j < q_rows.size(); ++j) q_rows[j] = 4 * (n_sup + j);
        few = loss_pn(g, model, g.take_rows(fw.flat, sup_rows), support_labels,
                      g.take_rows(fw.flat, q_rows), query_labels, batch.n_way,
                      opt.pn_similarity);
      }
    }
    self_term = loss_rotation(g, model, fw.maps, rot.labels, BnMode::Train);
  } else if (cfg.ssl == SslTask::Location) {
    Var flat{-1};
    if (!opt.selfsup_only) {
      Var x = g.input(batch.labeled);
      flat = model.extractor().forward_images(g, x, BnMode::Train).flat;
      if (cfg.method == Method::CC) {
        few = loss_cc(g, model, flat, batch.labels);
      } else {
        std::vector<size_t> sup_rows(n_sup), q_rows(b_l - n_sup);
        for (size_t i = 0; i < n_sup; ++i) sup_rows[i] = i;
        for (size_t j = 0; j < q_rows.size(); ++j) q_rows[j] = n_sup + j;
        few = loss_pn(g, model, g.take_rows(flat, sup_rows), support_labels,
                      g.take_rows(flat, q_rows), query_labels, batch.n_way,
                      opt.pn_similarity);
      }
    }
    Tensor<T> patch_batch =
        build_patch_batch(detail::concat_batch(batch.labeled, batch.unlabeled), patch_seed);
    Var pf = model.extractor().forward_patches(g, g.input(std::move(patch_batch)), BnMode::Train);
    self_term = loss_location(g, model, pf, b_l + b_u, BnMode::Train);
    if (!opt.selfsup_only && model.has_patch_aux()) {
      std::vector<size_t> labeled_rows(b_l * kPatchCount);
      for (size_t i = 0; i < labeled_rows.size(); ++i) labeled_rows[i] = i;
      Var merged = g.mean_axis(
          g.reshape(g.take_rows(pf, labeled_rows), {b_l, kPatchCount, cfg.patch_feature_dim()}),
          1);
      aux = g.softmax_cross_entropy(model.patch_aux().logits(g, merged), batch.labels);
    }
  } else {
    Var x = g.input(batch.labeled);
    Var flat = model.extractor().forward_images(g, x, BnMode::Train).flat;
    if (cfg.method == Method::CC) {
      few = loss_cc(g, model, flat, batch.labels);
    } else {
      std::vector<size_t> sup_rows(n_sup), q_rows(b_l - n_sup);
      for (size_t i = 0; i < n_sup; ++i) sup_rows[i] = i;
      for (size_t j = 0; j < q_rows.size(); ++j) q_rows[j] = n_sup + j;
      few = loss_pn(g, model, g.take_rows(flat, sup_rows), support_labels,
                    g.take_rows(flat, q_rows), query_labels, batch.n_way, opt.pn_similarity);
    }
  }

  Var total{-1};
  if (few.valid()) {
    total = few;
    out.has_few = true;
    out.value_few = double(g.value(few)[0]);
  }
  if (aux.valid()) {
    total = total.valid() ? g.add(total, aux) : aux;
    out.has_aux = true;
    out.value_aux = double(g.value(aux)[0]);
  }
  if (self_term.valid()) {
    out.has_self = true;
    out.value_self = double(g.value(self_term)[0]);
    Var scaled = g.scale(self_term, T(opt.alpha));
    total = total.valid() ? g.add(total, scaled) : scaled;
  }
  if (!total.valid()) throw ContractError("total_step_loss: no loss terms built");
  out.total = total;
  out.value_total = double(g.value(total)[0]);
  return out;
}

}  // namespace fewshot
