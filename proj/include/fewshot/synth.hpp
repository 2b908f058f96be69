#pragma once

#include <cstdint>

#include "fewshot/dataset.hpp"

namespace fewshot {

// Procedural dataset: every class is a distinct combination of
// (shape family x stroke-mark count x fill pattern x hue band), rendered with
// per-image position/scale jitter and orientation jitter bounded at +-15
// degrees. All shape families are rotationally asymmetric and backgrounds
// carry no consistent orientation cue (their luminance gradient points in a
// random per-image direction), so rotation prediction is learnable from shape
// structure and only from it.
struct SynthSpec {
  uint32_t base_classes = 24;
  uint32_t val_classes = 8;
  uint32_t novel_classes = 8;
  uint32_t images_per_class = 200;
  uint32_t image_size = 32;  // square; must be >= 32
  uint64_t seed = 0;
};

// Attribute-grid capacity: 8 shapes * 3 stroke counts * 3 fills * 12 hue
// bands. Requests beyond it raise CapacityError.
constexpr uint32_t kSynthClassCapacity = 8 * 3 * 3 * 12;

DatasetContainer make_synthetic(const SynthSpec& spec);

}  // namespace fewshot
