#include <cmath>
#include <cstring>

#include "doctest.h"
#include "fewshot/gradcheck.hpp"
#include "fewshot/losses.hpp"
#include "test_util.hpp"

using namespace fewshot;

namespace {

ModelConfig tiny_config(Method m, SslTask ssl, bool patch_aux = false) {
  ModelConfig cfg;
  cfg.widths = {2, 2, 2, 2};
  cfg.input_channels = 1;
  cfg.input_size = 16;
  cfg.method = m;
  cfg.ssl = ssl;
  cfg.patch_aux = patch_aux;
  cfg.n_base_classes = 3;
  cfg.rot_head_widths = {2, 2};
  cfg.loc_head_hidden = 3;
  return cfg;
}

template <typename T>
StepBatch<T> cc_batch(Rng& rng, size_t b_l, size_t b_u, const ModelConfig& cfg) {
  StepBatch<T> b;
  b.labeled = testutil::randn<T>(rng, {b_l, cfg.input_channels, cfg.input_size, cfg.input_size},
                                 0.7);
  b.labels = testutil::rand_labels(rng, b_l, int(cfg.n_base_classes));
  if (b_u > 0)
    b.unlabeled =
        testutil::randn<T>(rng, {b_u, cfg.input_channels, cfg.input_size, cfg.input_size}, 0.7);
  return b;
}

template <typename T>
StepBatch<T> pn_batch(Rng& rng, size_t n_way, size_t k_shot, size_t m_query, size_t b_u,
                      const ModelConfig& cfg) {
  StepBatch<T> b;
  b.n_way = n_way;
  b.k_shot = k_shot;
  b.m_query = m_query;
  const size_t rows = n_way * (k_shot + m_query);
  b.labeled =
      testutil::randn<T>(rng, {rows, cfg.input_channels, cfg.input_size, cfg.input_size}, 0.7);
  for (size_t c = 0; c < n_way; ++c)
    for (size_t k = 0; k < k_shot; ++k) b.labels.push_back(int(c));
  for (size_t c = 0; c < n_way; ++c)
    for (size_t q = 0; q < m_query; ++q) b.labels.push_back(int(c));
  if (b_u > 0)
    b.unlabeled =
        testutil::randn<T>(rng, {b_u, cfg.input_channels, cfg.input_size, cfg.input_size}, 0.7);
  return b;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("episode loss matches a hand-rolled oracle") {
    // 2-way, 2-shot, 3 queries, 4-dim features; everything by hand in
    // doubles: prototypes, squared distances, row softmax cross-entropy.
    Rng rng(7);
    Tensor<double> sup = testutil::randn<double>(rng, {4, 4});
    Tensor<double> qry = testutil::randn<double>(rng, {3, 4});
    const std::vector<int> sup_labels = {0, 1, 0, 1};
    const std::vector<int> qry_labels = {1, 0, 1};

    double proto[2][4];
    for (int c = 0; c < 2; ++c)
      for (int d = 0; d < 4; ++d) proto[c][d] = 0;
    for (int i = 0; i < 4; ++i)
      for (int d = 0; d < 4; ++d) proto[sup_labels[size_t(i)]][d] += sup[size_t(i * 4 + d)] / 2.0;

    double expected = 0;
    for (int q = 0; q < 3; ++q) {
      double logit[2];
      for (int c = 0; c < 2; ++c) {
        double s = 0;
        for (int d = 0; d < 4; ++d) {
          const double diff = qry[size_t(q * 4 + d)] - proto[c][d];
          s += diff * diff;
        }
        logit[c] = -s;
      }
      const double m = std::max(logit[0], logit[1]);
      const double lse = m + std::log(std::exp(logit[0] - m) + std::exp(logit[1] - m));
      expected += (lse - logit[qry_labels[size_t(q)]]) / 3.0;
    }

    ModelBundle<double> model(tiny_config(Method::PN, SslTask::None), 1);
    Graph<double> g;
    Var loss = loss_pn(g, model, g.input(sup), sup_labels, g.input(qry), qry_labels, 2,
                       Similarity::SqEuclidean);
    CHECK(g.value(loss)[0] == doctest::Approx(expected).epsilon(1e-12));

    // cosine flavor: logits are plain cosine similarities against prototypes
    double cos_expected = 0;
    for (int q = 0; q < 3; ++q) {
      double logit[2];
      double qn = 0;
      for (int d = 0; d < 4; ++d) qn += qry[size_t(q * 4 + d)] * qry[size_t(q * 4 + d)];
      qn = std::sqrt(qn);
      for (int c = 0; c < 2; ++c) {
        double dot = 0, pn = 0;
        for (int d = 0; d < 4; ++d) {
          dot += qry[size_t(q * 4 + d)] * proto[c][d];
          pn += proto[c][d] * proto[c][d];
        }
        logit[c] = dot / (qn * std::sqrt(pn) + 1e-8);
      }
      const double m = std::max(logit[0], logit[1]);
      const double lse = m + std::log(std::exp(logit[0] - m) + std::exp(logit[1] - m));
      cos_expected += (lse - logit[qry_labels[size_t(q)]]) / 3.0;
    }
    Graph<double> g2;
    Var closs = loss_pn(g2, model, g2.input(sup), sup_labels, g2.input(qry), qry_labels, 2,
                        Similarity::Cosine);
    CHECK(g2.value(closs)[0] == doctest::Approx(cos_expected).epsilon(1e-10));
  }

  TEST_CASE("pn_scores are row-stochastic and rank like the logits") {
    Rng rng(8);
    Tensor<double> q = testutil::randn<double>(rng, {5, 3});
    Tensor<double> p = testutil::randn<double>(rng, {4, 3});
    Graph<double> g;
    Var scores = pn_scores(g, g.input(q), g.input(p), Similarity::SqEuclidean);
    const Tensor<double>& s = g.value(scores);
    REQUIRE(s.shape() == std::vector<size_t>{5, 4});
    for (size_t r = 0; r < 5; ++r) {
      double sum = 0;
      for (size_t c = 0; c < 4; ++c) sum += s[r * 4 + c];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    // nearest prototype gets the highest score
    for (size_t r = 0; r < 5; ++r) {
      size_t nearest = 0;
      double best = 1e300;
      for (size_t c = 0; c < 4; ++c) {
        double d2 = 0;
        for (size_t k = 0; k < 3; ++k) {
          const double diff = q[r * 3 + k] - p[c * 3 + k];
          d2 += diff * diff;
        }
        if (d2 < best) {
          best = d2;
          nearest = c;
        }
      }
      CHECK(argmax_rows(s)[r] == int(nearest));
    }
  }

  TEST_CASE("untrained rotation loss is exactly the uniform 4 ln 4") {
    ModelBundle<float> m(tiny_config(Method::CC, SslTask::Rotation), 17);
    Rng rng(18);
    StepBatch<float> batch = cc_batch<float>(rng, 3, 0, m.config());
    Graph<float> g;
    StepOptions opt;
    auto out = total_step_loss(g, m, batch, opt, 5);
    CHECK(out.has_self);
    CHECK(out.value_self == doctest::Approx(4.0 * std::log(4.0)).epsilon(1e-6));
  }

  TEST_CASE("untrained location loss is exactly the uniform 8 ln 8") {
    ModelBundle<float> m(tiny_config(Method::CC, SslTask::Location), 19);
    Rng rng(20);
    StepBatch<float> batch = cc_batch<float>(rng, 2, 1, m.config());
    Graph<float> g;
    StepOptions opt;
    auto out = total_step_loss(g, m, batch, opt, 5);
    CHECK(out.has_self);
    CHECK(out.value_self == doctest::Approx(8.0 * std::log(8.0)).epsilon(1e-6));
  }

  TEST_CASE("alpha = 0 reproduces the supervised loss bitwise") {
    ModelBundle<float> m(tiny_config(Method::CC, SslTask::Rotation), 23);
    Rng rng(24);
    StepBatch<float> batch = cc_batch<float>(rng, 3, 2, m.config());
    Graph<float> g;
    StepOptions opt;
    opt.alpha = 0.0;
    auto out = total_step_loss(g, m, batch, opt, 5);
    const float total = g.value(out.total)[0];
    const float few = float(out.value_few);
    CHECK(std::memcmp(&total, &few, sizeof(float)) == 0);
  }

  TEST_CASE("selfsup_only keeps only the scaled self-supervised term") {
    ModelBundle<float> m(tiny_config(Method::CC, SslTask::Rotation), 25);
    Rng rng(26);
    StepBatch<float> batch = cc_batch<float>(rng, 3, 1, m.config());
    Graph<float> g;
    StepOptions opt;
    opt.alpha = 0.7;
    opt.selfsup_only = true;
    auto out = total_step_loss(g, m, batch, opt, 5);
    CHECK_FALSE(out.has_few);
    CHECK_FALSE(out.has_aux);
    CHECK(out.has_self);
    const float expect = 0.7f * float(out.value_self);
    CHECK(g.value(out.total)[0] == expect);
  }

  TEST_CASE("terms accumulate as few + aux + alpha * self in that order") {
    ModelBundle<float> m(tiny_config(Method::CC, SslTask::Location, true), 27);
    Rng rng(28);
    StepBatch<float> batch = cc_batch<float>(rng, 3, 1, m.config());
    Graph<float> g;
    StepOptions opt;
    opt.alpha = 0.7;
    auto out = total_step_loss(g, m, batch, opt, 5);
    REQUIRE(out.has_few);
    REQUIRE(out.has_aux);
    REQUIRE(out.has_self);
    const float expect =
        (float(out.value_few) + float(out.value_aux)) + 0.7f * float(out.value_self);
    CHECK(g.value(out.total)[0] == expect);
  }

  TEST_CASE("patch batch layout matches per-image extraction") {
    Rng rng(29);
    Tensor<float> images = testutil::randn<float>(rng, {3, 1, 16, 16});
    const uint64_t seed = 424242;
    Tensor<float> batch = build_patch_batch(images, seed);
    REQUIRE(batch.shape() == std::vector<size_t>{27, 1, 24, 24});

    Tensor<float> img1({1, 16, 16});
    std::memcpy(img1.data(), images.data() + img1.numel(), img1.numel() * sizeof(float));
    PatchSet<float> ps = extract_patches(img1, mix_seed({seed, 1}));
    CHECK(std::memcmp(batch.data() + 9 * 24 * 24, ps.patches.data(),
                      9 * 24 * 24 * sizeof(float)) == 0);
  }

  TEST_CASE("option and batch validation") {
    ModelBundle<float> loc(tiny_config(Method::CC, SslTask::Location), 31);
    Rng rng(32);
    StepBatch<float> batch = cc_batch<float>(rng, 2, 0, loc.config());
    {
      Graph<float> g;
      StepOptions opt;
      opt.rotation_augmentation = true;  // needs the rotation task
      CHECK_THROWS_AS(total_step_loss(g, loc, batch, opt, 1), ConfigError);
    }
    ModelBundle<float> plain(tiny_config(Method::CC, SslTask::None), 31);
    {
      Graph<float> g;
      StepOptions opt;
      opt.selfsup_only = true;  // nothing to train on
      CHECK_THROWS_AS(total_step_loss(g, plain, batch, opt, 1), ConfigError);
    }
    ModelBundle<float> pn(tiny_config(Method::PN, SslTask::Rotation), 31);
    {
      Graph<float> g;
      StepBatch<float> pnb = pn_batch<float>(rng, 2, 1, 1, 0, pn.config());
      StepOptions opt;
      opt.rotation_augmentation = true;  // cc-only knob
      CHECK_THROWS_AS(total_step_loss(g, pn, pnb, opt, 1), ConfigError);
    }
    {
      Graph<float> g;
      StepBatch<float> bad = pn_batch<float>(rng, 2, 1, 1, 0, pn.config());
      bad.m_query = 2;  // row count no longer matches
      StepOptions opt;
      CHECK_THROWS_AS(total_step_loss(g, pn, bad, opt, 1), DimensionError);
    }
    {
      Graph<float> g;
      StepBatch<float> empty;
      empty.labels = {};
      StepOptions opt;
      CHECK_THROWS_AS(total_step_loss(g, plain, empty, opt, 1), ContractError);
    }
  }

  TEST_CASE("gradients: cc + rotation combined objective") {
    ModelBundle<double> m(tiny_config(Method::CC, SslTask::Rotation), 41);
    Rng rng(42);
    auto* fcw = m.store().find("rot_head.fc.weight");
    for (size_t i = 0; i < fcw->value.numel(); ++i) fcw->value[i] = rng.normal() * 0.3;
    StepBatch<double> batch = cc_batch<double>(rng, 2, 1, m.config());
    StepOptions opt;
    opt.alpha = 0.7;
    auto params = m.store().all_params();
    const double err = finite_diff_check_params<double>(
        [&](Graph<double>& g) { return total_step_loss(g, m, batch, opt, 9).total; }, params,
        1e-5);
    CHECK(err < 1e-3);
  }

  TEST_CASE("gradients: cc + rotation with rotation augmentation") {
    ModelBundle<double> m(tiny_config(Method::CC, SslTask::Rotation), 43);
    Rng rng(44);
    auto* fcw = m.store().find("rot_head.fc.weight");
    for (size_t i = 0; i < fcw->value.numel(); ++i) fcw->value[i] = rng.normal() * 0.3;
    StepBatch<double> batch = cc_batch<double>(rng, 2, 0, m.config());
    StepOptions opt;
    opt.alpha = 1.0;
    opt.rotation_augmentation = true;
    auto params = m.store().all_params();
    const double err = finite_diff_check_params<double>(
        [&](Graph<double>& g) { return total_step_loss(g, m, batch, opt, 9).total; }, params,
        1e-5);
    CHECK(err < 1e-3);
  }

  TEST_CASE("gradients: cc + location with patch aux") {
    ModelBundle<double> m(tiny_config(Method::CC, SslTask::Location, true), 45);
    Rng rng(46);
    auto* fcw = m.store().find("loc_head.fc2.weight");
    for (size_t i = 0; i < fcw->value.numel(); ++i) fcw->value[i] = rng.normal() * 0.3;
    StepBatch<double> batch = cc_batch<double>(rng, 2, 1, m.config());
    StepOptions opt;
    opt.alpha = 0.5;
    auto params = m.store().all_params();
    const double err = finite_diff_check_params<double>(
        [&](Graph<double>& g) { return total_step_loss(g, m, batch, opt, 9).total; }, params,
        1e-5);
    CHECK(err < 1e-3);
  }

  TEST_CASE("gradients: pn + rotation with cosine similarity") {
    ModelBundle<double> m(tiny_config(Method::PN, SslTask::Rotation), 47);
    Rng rng(48);
    auto* fcw = m.store().find("rot_head.fc.weight");
    for (size_t i = 0; i < fcw->value.numel(); ++i) fcw->value[i] = rng.normal() * 0.3;
    StepBatch<double> batch = pn_batch<double>(rng, 2, 1, 2, 0, m.config());
    StepOptions opt;
    opt.alpha = 0.8;
    opt.pn_similarity = Similarity::Cosine;
    auto params = m.store().all_params();
    const double err = finite_diff_check_params<double>(
        [&](Graph<double>& g) { return total_step_loss(g, m, batch, opt, 9).total; }, params,
        1e-5);
    CHECK(err < 1e-3);
  }

  TEST_CASE("gradients: plain pn episode objective") {
    ModelBundle<double> m(tiny_config(Method::PN, SslTask::None), 49);
    Rng rng(50);
    StepBatch<double> batch = pn_batch<double>(rng, 3, 2, 1, 0, m.config());
    StepOptions opt;
    auto params = m.store().all_params();
    const double err = finite_diff_check_params<double>(
        [&](Graph<double>& g) { return total_step_loss(g, m, batch, opt, 9).total; }, params,
        1e-5);
    CHECK(err < 1e-3);
  }

  TEST_CASE("gradients: selfsup-only location leaves the classifier untouched") {
    ModelBundle<double> m(tiny_config(Method::CC, SslTask::Location), 51);
    Rng rng(52);
    auto* fcw = m.store().find("loc_head.fc2.weight");
    for (size_t i = 0; i < fcw->value.numel(); ++i) fcw->value[i] = rng.normal() * 0.3;
    StepBatch<double> batch = cc_batch<double>(rng, 2, 1, m.config());
    StepOptions opt;
    opt.alpha = 1.0;
    opt.selfsup_only = true;

    auto path_params = m.store().params_with_prefix({"extractor.", "loc_head."});
    const double err = finite_diff_check_params<double>(
        [&](Graph<double>& g) { return total_step_loss(g, m, batch, opt, 9).total; },
        path_params, 1e-5);
    CHECK(err < 1e-3);

    m.store().zero_grad();
    {
      Graph<double> g;
      auto out = total_step_loss(g, m, batch, opt, 9);
      g.backward(out.total);
    }
    auto* cw = m.store().find("classifier.weight");
    for (size_t i = 0; i < cw->value.numel(); ++i) CHECK(cw->grad[i] == 0.0);
    bool any = false;
    for (auto* p : path_params)
      for (size_t i = 0; i < p->grad.numel(); ++i) any = any || p->grad[i] != 0.0;
    CHECK(any);
  }
}
