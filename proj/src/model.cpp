#include "fewshot/model.hpp"

#include "fewshot/errors.hpp"

namespace fewshot {

const char* method_name(Method m) { return m == Method::CC ? "cc" : "pn"; }

Method method_from_name(const std::string& s) {
  if (s == "cc") return Method::CC;
  if (s == "pn") return Method::PN;
  throw ConfigError("unknown method '" + s + "' (expected 'cc' or 'pn')");
}

const char* ssl_task_name(SslTask t) {
  switch (t) {
    case SslTask::None: return "none";
    case SslTask::Rotation: return "rotation";
    case SslTask::Location: return "location";
  }
  return "none";
}

SslTask ssl_task_from_name(const std::string& s) {
  if (s == "none") return SslTask::None;
  if (s == "rotation") return SslTask::Rotation;
  if (s == "location") return SslTask::Location;
  throw ConfigError("unknown ssl task '" + s + "' (expected 'none', 'rotation' or 'location')");
}

const char* similarity_name(Similarity s) {
  return s == Similarity::SqEuclidean ? "sqeuclidean" : "cosine";
}

Similarity similarity_from_name(const std::string& s) {
  if (s == "sqeuclidean") return Similarity::SqEuclidean;
  if (s == "cosine") return Similarity::Cosine;
  throw ConfigError("unknown similarity '" + s + "' (expected 'sqeuclidean' or 'cosine')");
}

void ModelConfig::validate() const {
  for (int i = 0; i < 4; ++i)
    if (widths[size_t(i)] == 0)
      throw ConfigError("model: widths must be positive");
  if (input_channels == 0) throw ConfigError("model: input_channels must be positive");
  if (input_size < 16 || input_size % 16 != 0)
    throw ConfigError("model: input_size must be a positive multiple of 16, got " +
                      std::to_string(input_size));
  if (has_classifier() && n_base_classes < 2)
    throw ConfigError("model: cosine classifier needs n_base_classes >= 2, got " +
                      std::to_string(n_base_classes));
  if (patch_aux && ssl != SslTask::Location)
    throw ConfigError("model: patch_aux requires the location task");
  if (patch_aux && method != Method::CC)
    throw ConfigError("model: patch_aux requires the cc method");
  if (gamma_init <= 0) throw ConfigError("model: gamma_init must be positive");
}

}  // namespace fewshot
