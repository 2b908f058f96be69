#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/errors.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

enum class Split { Base = 0, Validation = 1, Novel = 2 };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

// In-memory dataset: uint8 CHW pixels, integer labels, and a three-way
// class-level split. Images of one class all live in exactly one split.
struct DatasetContainer {
  uint32_t channels = 0;
  uint32_t height = 0;
  uint32_t width = 0;
  std::vector<std::string> class_names;
  std::array<std::vector<uint32_t>, 3> split_classes;  // indexed by Split
  std::vector<uint32_t> labels;                        // per image
  std::vector<uint8_t> pixels;                         // image-major CHW

  // Derived on rebuild_index():
  std::vector<std::vector<uint32_t>> images_by_class;
  std::vector<int> class_split;        // Split value per class id
  std::vector<int> base_label_of;     // class id -> dense 0..N_base-1, or -1

  size_t num_images() const { return labels.size(); }
  size_t num_classes() const { return class_names.size(); }
  size_t image_numel() const { return size_t(channels) * height * width; }

  const std::vector<uint32_t>& classes_of(Split s) const {
    return split_classes[size_t(s)];
  }

  // Validates invariants (split partitions classes, labels in range, pixel
  // payload size) and rebuilds the per-class image index.
  void rebuild_index();

  // Image idx as float tensor [C,H,W] scaled to [0,1].
  template <typename T>
  Tensor<T> image(size_t idx) const {
    if (idx >= num_images()) throw DimensionError("image index out of range");
    Tensor<T> out({channels, height, width});
    const uint8_t* src = pixels.data() + idx * image_numel();
    for (size_t i = 0; i < out.numel(); ++i) out[i] = T(src[i]) / T(255);
    return out;
  }

  // Batch of images [B,C,H,W] scaled to [0,1].
  template <typename T>
  Tensor<T> batch(const std::vector<uint32_t>& idxs) const {
    Tensor<T> out({idxs.size(), channels, height, width});
    const size_t n = image_numel();
    for (size_t b = 0; b < idxs.size(); ++b) {
      if (idxs[b] >= num_images()) throw DimensionError("image index out of range");
      const uint8_t* src = pixels.data() + size_t(idxs[b]) * n;
      T* dst = out.data() + b * n;
      for (size_t i = 0; i < n; ++i) dst[i] = T(src[i]) / T(255);
    }
    return out;
  }
};

// Binary dataset file format:
//   bytes 0..7   magic "FSDS0001"
//   bytes 8..11  little-endian u32 header byte length
//   header       UTF-8 JSON (version/num_images/channels/height/width/
//                class_names/split)
//   labels       num_images little-endian u32
//   pixels       num_images * C*H*W uint8, image-major CHW
// Any structural problem raises FormatError naming the byte offset.
DatasetContainer load_fsds(const std::string& path);
void save_fsds(const DatasetContainer& ds, const std::string& path);

}  // namespace fewshot
