#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "fewshot/graph.hpp"
#include "fewshot/params.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

enum class Method { CC, PN };
enum class SslTask { None, Rotation, Location };
enum class Similarity { SqEuclidean, Cosine };
enum class BnMode { Train, Eval };

const char* method_name(Method m);
Method method_from_name(const std::string& s);
const char* ssl_task_name(SslTask t);
SslTask ssl_task_from_name(const std::string& s);
const char* similarity_name(Similarity s);
Similarity similarity_from_name(const std::string& s);

// Architecture + head layout. Everything needed to rebuild a parameter set
// with identical names/shapes lives here (stored in checkpoint manifests).
struct ModelConfig {
  std::array<uint32_t, 4> widths{64, 64, 64, 64};
  uint32_t input_channels = 3;
  uint32_t input_size = 32;  // square, divisible by 16
  Method method = Method::CC;
  SslTask ssl = SslTask::None;
  bool patch_aux = false;       // patch-based auxiliary classifier (CC + location)
  uint32_t n_base_classes = 0;  // required when a classifier head exists
  double gamma_init = 10.0;
  // 0 = derive from widths[3]: (128,256)/256 below 512 channels, (512,512)/1024 at 512+.
  std::array<uint32_t, 2> rot_head_widths{0, 0};
  uint32_t loc_head_hidden = 0;

  uint32_t feature_dim() const {
    const uint32_t s = input_size / 16;
    return widths[3] * s * s;
  }
  uint32_t patch_feature_dim() const { return widths[3]; }
  std::array<uint32_t, 2> effective_rot_widths() const {
    if (rot_head_widths[0] != 0) return rot_head_widths;
    return widths[3] >= 512 ? std::array<uint32_t, 2>{512, 512}
                            : std::array<uint32_t, 2>{128, 256};
  }
  uint32_t effective_loc_hidden() const {
    if (loc_head_hidden != 0) return loc_head_hidden;
    return widths[3] >= 512 ? 1024 : 256;
  }
  bool has_classifier() const { return method == Method::CC; }

  void validate() const;
};

namespace init {

// uniform(-sqrt(6/fan_in), +sqrt(6/fan_in))
template <typename T>
Tensor<T> uniform_fan_in(Rng& rng, std::vector<size_t> shape, size_t fan_in) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / double(fan_in));
  for (size_t i = 0; i < t.numel(); ++i) t[i] = T(rng.uniform(-bound, bound));
  return t;
}

}  // namespace init

template <typename T>
struct Conv2dLayer {
  Parameter<T>* w = nullptr;  // [O,C,3,3]
  Parameter<T>* b = nullptr;  // [O]

  static Conv2dLayer create(ParameterStore<T>& store, const std::string& prefix, size_t in_ch,
                            size_t out_ch, Rng& rng) {
    Conv2dLayer l;
    l.w = &store.add_param(prefix + ".weight",
                           init::uniform_fan_in<T>(rng, {out_ch, in_ch, 3, 3}, in_ch * 9));
    l.b = &store.add_param(prefix + ".bias", Tensor<T>({out_ch}));
    return l;
  }

  // Zero-initialized variant for pretext-head output layers (exact uniform
  // logits at initialization).
  static Conv2dLayer create_zero(ParameterStore<T>& store, const std::string& prefix,
                                 size_t in_ch, size_t out_ch) {
    Conv2dLayer l;
    l.w = &store.add_param(prefix + ".weight", Tensor<T>({out_ch, in_ch, 3, 3}));
    l.b = &store.add_param(prefix + ".bias", Tensor<T>({out_ch}));
    return l;
  }

  Var forward(Graph<T>& g, Var x, size_t stride = 1, size_t pad = 1) const {
    return g.conv2d(x, g.param(*w), g.param(*b), stride, pad);
  }
};

template <typename T>
struct BatchNormLayer {
  Parameter<T>* scale = nullptr;
  Parameter<T>* shift = nullptr;
  Buffer<T>* running_mean = nullptr;
  Buffer<T>* running_var = nullptr;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNormLayer create(ParameterStore<T>& store, const std::string& prefix,
                               size_t channels) {
    BatchNormLayer l;
    l.scale = &store.add_param(prefix + ".scale", Tensor<T>::full({channels}, T(1)));
    l.shift = &store.add_param(prefix + ".shift", Tensor<T>({channels}));
    l.running_mean = &store.add_buffer(prefix + ".running_mean", Tensor<T>({channels}));
    l.running_var = &store.add_buffer(prefix + ".running_var",
                                      Tensor<T>::full({channels}, T(1)));
    return l;
  }

  Var forward(Graph<T>& g, Var x, BnMode mode) const {
    return g.batch_norm2d(x, g.param(*scale), g.param(*shift), running_mean->value,
                          running_var->value, mode == BnMode::Train, momentum, eps);
  }

  // 1-D batchnorm over [B,F] via the 4-D op. Shape copied by value: pushing
  // nodes can reallocate the tape, so references into it don't survive ops.
  Var forward1d(Graph<T>& g, Var x, BnMode mode) const {
    const std::vector<size_t> s = g.shape(x);
    if (s.size() != 2) throw DimensionError("batchnorm1d: need [B,F]");
    Var r = g.reshape(x, {s[0], s[1], 1, 1});
    r = forward(g, r, mode);
    return g.reshape(r, {s[0], s[1]});
  }
};

template <typename T>
struct LinearLayer {
  Parameter<T>* w = nullptr;  // [in,out]
  Parameter<T>* b = nullptr;  // [out]

  static LinearLayer create(ParameterStore<T>& store, const std::string& prefix, size_t in,
                            size_t out, Rng& rng) {
    LinearLayer l;
    l.w = &store.add_param(prefix + ".weight", init::uniform_fan_in<T>(rng, {in, out}, in));
    l.b = &store.add_param(prefix + ".bias", Tensor<T>({out}));
    return l;
  }

  static LinearLayer create_zero(ParameterStore<T>& store, const std::string& prefix, size_t in,
                                 size_t out) {
    LinearLayer l;
    l.w = &store.add_param(prefix + ".weight", Tensor<T>({in, out}));
    l.b = &store.add_param(prefix + ".bias", Tensor<T>({out}));
    return l;
  }

  Var forward(Graph<T>& g, Var x) const { return g.add(g.matmul(x, g.param(*w)), g.param(*b)); }
};

// Four conv3x3(pad 1)+BN+ReLU blocks. Full-size images pool after every
// block (spatial /16); 24x24 patches pool after blocks 1-3 only and finish
// with global average pooling. Both paths share parameters and BN state.
template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng) : cfg_(&cfg) {
    size_t in_ch = cfg.input_channels;
    for (int b = 0; b < 4; ++b) {
      const std::string prefix = "extractor.block" + std::to_string(b + 1);
      blocks_[size_t(b)].conv =
          Conv2dLayer<T>::create(store, prefix + ".conv", in_ch, cfg.widths[size_t(b)], rng);
      blocks_[size_t(b)].bn = BatchNormLayer<T>::create(store, prefix + ".bn",
                                                        cfg.widths[size_t(b)]);
      in_ch = cfg.widths[size_t(b)];
    }
  }

  struct ImageForward {
    Var maps;  // [B, widths[3], s/16, s/16] (pre-flatten feature map)
    Var flat;  // [B, feature_dim]
  };

  ImageForward forward_images(Graph<T>& g, Var images, BnMode mode) const {
    const auto& s = g.shape(images);
    if (s.size() != 4 || s[1] != cfg_->input_channels || s[2] != cfg_->input_size ||
        s[3] != cfg_->input_size)
      throw DimensionError("extractor: expected images [B," +
                           std::to_string(cfg_->input_channels) + "," +
                           std::to_string(cfg_->input_size) + "," +
                           std::to_string(cfg_->input_size) + "], got " + shape_str(s));
    Var x = images;
    for (int b = 0; b < 4; ++b) {
      x = blocks_[size_t(b)].conv.forward(g, x);
      x = blocks_[size_t(b)].bn.forward(g, x, mode);
      x = g.relu(x);
      x = g.maxpool2x2(x);
    }
    ImageForward out;
    out.maps = x;
    const std::vector<size_t> ms = g.shape(x);
    out.flat = g.reshape(x, {ms[0], ms[1] * ms[2] * ms[3]});
    return out;
  }

  // [P,C,24,24] -> [P, widths[3]]
  Var forward_patches(Graph<T>& g, Var patches, BnMode mode) const {
    const auto& s = g.shape(patches);
    if (s.size() != 4 || s[1] != cfg_->input_channels || s[2] != 24 || s[3] != 24)
      throw DimensionError("extractor: expected patches [P," +
                           std::to_string(cfg_->input_channels) + ",24,24], got " +
                           shape_str(s));
    Var x = patches;
    for (int b = 0; b < 4; ++b) {
      x = blocks_[size_t(b)].conv.forward(g, x);
      x = blocks_[size_t(b)].bn.forward(g, x, mode);
      x = g.relu(x);
      if (b < 3) x = g.maxpool2x2(x);  // 24 -> 12 -> 6 -> 3
    }
    return g.global_avg_pool(x);
  }

 private:
  struct Block {
    Conv2dLayer<T> conv;
    BatchNormLayer<T> bn;
  };
  std::array<Block, 4> blocks_;
  const ModelConfig* cfg_;
};

// softmax-free scores: gamma * cos(features, class weights); gamma is
// learnable through log_gamma (exempt from weight decay).
template <typename T>
class CosineClassifier {
 public:
  static constexpr T kCosEps = T(1e-8);

  CosineClassifier(ParameterStore<T>& store, const std::string& prefix, size_t n_classes,
                   size_t dim, double gamma_init, Rng& rng) {
    weight_ = &store.add_param(prefix + ".weight",
                               init::uniform_fan_in<T>(rng, {n_classes, dim}, dim));
    log_gamma_ = &store.add_param(prefix + ".log_gamma",
                                  Tensor<T>::scalar(T(std::log(gamma_init))),
                                  /*weight_decay=*/false);
  }

  Var logits(Graph<T>& g, Var features) const {
    Var cos = g.pairwise_cosine(features, g.param(*weight_), kCosEps);
    return g.mul(cos, g.exp(g.param(*log_gamma_)));
  }

  Var probabilities(Graph<T>& g, Var features) const {
    return g.softmax_rows(logits(g, features));
  }

  Parameter<T>& weight() { return *weight_; }
  Parameter<T>& log_gamma() { return *log_gamma_; }

 private:
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* log_gamma_ = nullptr;
};

// Two conv3x3+BN+ReLU blocks on the pre-flatten map, then a zero-initialized
// linear layer onto the 4 rotation classes.
template <typename T>
class RotationHead {
 public:
  RotationHead(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng) {
    const auto w = cfg.effective_rot_widths();
    const size_t side = cfg.input_size / 16;
    conv1_ = Conv2dLayer<T>::create(store, "rot_head.conv1", cfg.widths[3], w[0], rng);
    bn1_ = BatchNormLayer<T>::create(store, "rot_head.bn1", w[0]);
    conv2_ = Conv2dLayer<T>::create(store, "rot_head.conv2", w[0], w[1], rng);
    bn2_ = BatchNormLayer<T>::create(store, "rot_head.bn2", w[1]);
    fc_ = LinearLayer<T>::create_zero(store, "rot_head.fc", w[1] * side * side, 4);
  }

  Var logits(Graph<T>& g, Var maps, BnMode mode) const {
    Var x = conv1_.forward(g, maps);
    x = bn1_.forward(g, x, mode);
    x = g.relu(x);
    x = conv2_.forward(g, x);
    x = bn2_.forward(g, x, mode);
    x = g.relu(x);
    const std::vector<size_t> s = g.shape(x);
    x = g.reshape(x, {s[0], s[1] * s[2] * s[3]});
    return fc_.forward(g, x);
  }

 private:
  Conv2dLayer<T> conv1_, conv2_;
  BatchNormLayer<T> bn1_, bn2_;
  LinearLayer<T> fc_;
};

// concat(center, neighbor) -> linear -> BN -> ReLU -> zero-init linear -> 8.
template <typename T>
class LocationHead {
 public:
  LocationHead(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng) {
    const size_t dp = cfg.patch_feature_dim();
    const size_t hidden = cfg.effective_loc_hidden();
    fc1_ = LinearLayer<T>::create(store, "loc_head.fc1", 2 * dp, hidden, rng);
    bn_ = BatchNormLayer<T>::create(store, "loc_head.bn", hidden);
    fc2_ = LinearLayer<T>::create_zero(store, "loc_head.fc2", hidden, 8);
  }

  Var logits(Graph<T>& g, Var center_feats, Var neighbor_feats, BnMode mode) const {
    Var x = g.concat(center_feats, neighbor_feats, 1);
    x = fc1_.forward(g, x);
    x = bn_.forward1d(g, x, mode);
    x = g.relu(x);
    return fc2_.forward(g, x);
  }

 private:
  LinearLayer<T> fc1_, fc2_;
  BatchNormLayer<T> bn_;
};

// The trainable unit: extractor plus whichever heads the configuration
// needs. Registration (= init, checkpoint, update) order is fixed:
// extractor, classifier, rotation head, location head, patch-aux classifier.
template <typename T>
class ModelBundle {
 public:
  ModelBundle(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    extractor_.emplace(store_, cfg_, rng);
    if (cfg_.has_classifier())
      classifier_.emplace(store_, "classifier", cfg_.n_base_classes, cfg_.feature_dim(),
                          cfg_.gamma_init, rng);
    if (cfg_.ssl == SslTask::Rotation) rot_head_.emplace(store_, cfg_, rng);
    if (cfg_.ssl == SslTask::Location) loc_head_.emplace(store_, cfg_, rng);
    if (cfg_.patch_aux)
      patch_aux_.emplace(store_, "patch_aux", cfg_.n_base_classes, cfg_.patch_feature_dim(),
                         cfg_.gamma_init, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& store() { return store_; }
  FeatureExtractor<T>& extractor() { return *extractor_; }

  bool has_classifier() const { return classifier_.has_value(); }
  CosineClassifier<T>& classifier() {
    if (!classifier_) throw CompatibilityError("model has no classifier head");
    return *classifier_;
  }
  bool has_rot_head() const { return rot_head_.has_value(); }
  RotationHead<T>& rot_head() {
    if (!rot_head_) throw CompatibilityError("model has no rotation head");
    return *rot_head_;
  }
  bool has_loc_head() const { return loc_head_.has_value(); }
  LocationHead<T>& loc_head() {
    if (!loc_head_) throw CompatibilityError("model has no location head");
    return *loc_head_;
  }
  bool has_patch_aux() const { return patch_aux_.has_value(); }
  CosineClassifier<T>& patch_aux() {
    if (!patch_aux_) throw CompatibilityError("model has no patch-aux classifier");
    return *patch_aux_;
  }

 private:
  ModelConfig cfg_;
  ParameterStore<T> store_;
  std::optional<FeatureExtractor<T>> extractor_;
  std::optional<CosineClassifier<T>> classifier_;
  std::optional<RotationHead<T>> rot_head_;
  std::optional<LocationHead<T>> loc_head_;
  std::optional<CosineClassifier<T>> patch_aux_;
};

}  // namespace fewshot
