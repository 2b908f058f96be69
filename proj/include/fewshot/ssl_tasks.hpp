#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "fewshot/errors.hpp"
#include "fewshot/rng.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

// 90-degree counterclockwise rotation of a square [C,H,W] image:
// out[c][i][j] = in[c][j][H-1-i]. Pure permutation, hence bit-exact.
template <typename T>
Tensor<T> rotate90(const Tensor<T>& img) {
  if (img.rank() != 3) throw DimensionError("rotate90: image must be [C,H,W]");
  const size_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
  if (H != W) throw DimensionError("rotate90: image must be square");
  Tensor<T> out(img.shape());
  for (size_t c = 0; c < C; ++c) {
    const T* src = img.data() + c * H * W;
    T* dst = out.data() + c * H * W;
    for (size_t i = 0; i < H; ++i)
      for (size_t j = 0; j < W; ++j) dst[i * W + j] = src[j * W + (H - 1 - i)];
  }
  return out;
}

// r counterclockwise quarter turns, r in {0,1,2,3}.
template <typename T>
Tensor<T> rotate_image(const Tensor<T>& img, int r) {
  if (r < 0 || r > 3) throw ContractError("rotate_image: r must be in 0..3");
  Tensor<T> out = img;
  for (int k = 0; k < r; ++k) out = rotate90(out);
  return out;
}

template <typename T>
struct RotationBatch {
  Tensor<T> images;         // [4B,C,H,W], layout row 4*i + r
  std::vector<int> labels;  // rotation index 0..3 per row
};

// Expands [B,C,H,W] into all four rotations per image. Row 4*i+r holds image
// i rotated r quarter turns, so upright originals sit at rows 4*i.
template <typename T>
RotationBatch<T> make_rotation_batch(const Tensor<T>& batch) {
  if (batch.rank() != 4) throw DimensionError("make_rotation_batch: need [B,C,H,W]");
  const size_t B = batch.shape()[0];
  const size_t img_numel = batch.numel() / std::max<size_t>(B, 1);
  RotationBatch<T> out;
  out.images = Tensor<T>({B * 4, batch.shape()[1], batch.shape()[2], batch.shape()[3]});
  out.labels.resize(B * 4);
  Tensor<T> img({batch.shape()[1], batch.shape()[2], batch.shape()[3]});
  for (size_t i = 0; i < B; ++i) {
    std::copy(batch.data() + i * img_numel, batch.data() + (i + 1) * img_numel, img.data());
    Tensor<T> cur = img;
    for (int r = 0; r < 4; ++r) {
      if (r > 0) cur = rotate90(cur);
      std::copy(cur.data(), cur.data() + img_numel, out.images.data() + (4 * i + r) * img_numel);
      out.labels[4 * i + size_t(r)] = r;
    }
  }
  return out;
}

// Corner-aligned bilinear resize of [C,H,W] to [C,oh,ow].
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& img, size_t oh, size_t ow) {
  if (img.rank() != 3) throw DimensionError("resize_bilinear: image must be [C,H,W]");
  const size_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
  if (H == 0 || W == 0 || oh == 0 || ow == 0)
    throw DimensionError("resize_bilinear: empty dimensions");
  Tensor<T> out({C, oh, ow});
  const double sy = oh > 1 ? double(H - 1) / double(oh - 1) : 0.0;
  const double sx = ow > 1 ? double(W - 1) / double(ow - 1) : 0.0;
  for (size_t oy = 0; oy < oh; ++oy) {
    const double fy = double(oy) * sy;
    const size_t y0 = std::min(size_t(fy), H - 1);
    const size_t y1 = std::min(y0 + 1, H - 1);
    const T wy = T(fy - double(y0));
    for (size_t ox = 0; ox < ow; ++ox) {
      const double fx = double(ox) * sx;
      const size_t x0 = std::min(size_t(fx), W - 1);
      const size_t x1 = std::min(x0 + 1, W - 1);
      const T wx = T(fx - double(x0));
      for (size_t c = 0; c < C; ++c) {
        const T* pl = img.data() + c * H * W;
        const T a = pl[y0 * W + x0], b = pl[y0 * W + x1];
        const T d = pl[y1 * W + x0], e = pl[y1 * W + x1];
        out.data()[c * oh * ow + oy * ow + ox] =
            a * (T(1) - wy) * (T(1) - wx) + b * (T(1) - wy) * wx + d * wy * (T(1) - wx) +
            e * wy * wx;
      }
    }
  }
  return out;
}

// ITU-R BT.601 luma replicated over the 3 channels; identity for C != 3.
template <typename T>
Tensor<T> to_grayscale(const Tensor<T>& img) {
  if (img.rank() != 3) throw DimensionError("to_grayscale: image must be [C,H,W]");
  if (img.shape()[0] != 3) return img;
  const size_t plane = img.shape()[1] * img.shape()[2];
  Tensor<T> out(img.shape());
  for (size_t p = 0; p < plane; ++p) {
    const T y = T(0.299) * img[p] + T(0.587) * img[plane + p] + T(0.114) * img[2 * plane + p];
    out[p] = y;
    out[plane + p] = y;
    out[2 * plane + p] = y;
  }
  return out;
}

constexpr size_t kPatchGridSide = 3;
constexpr size_t kPatchCount = 9;      // 3x3 regions, row-major, center = 4
constexpr size_t kPatchRegion = 32;    // region side in the 96x96 canvas
constexpr size_t kPatchSize = 24;      // crop side inside a region
constexpr size_t kPatchJitter = kPatchRegion - kPatchSize + 1;  // 9 offsets per axis
constexpr double kPatchGrayProb = 0.66;

template <typename T>
struct PatchSet {
  Tensor<T> patches;  // [9,C,24,24], row-major region order
  bool grayscaled = false;
  std::array<std::pair<uint8_t, uint8_t>, kPatchCount> offsets;  // (dy,dx) per region
};

// Patch pretext preprocessing, in this fixed RNG draw order:
//   1. corner-aligned bilinear resize to 96x96
//   2. one grayscale draw (probability 0.66, BT.601 luma)
//   3. per region in row-major order: dy then dx, each uniform over 0..8
//   4. per-patch normalization to mean 0 / std 1 over all C*24*24 values,
//      population std clamped at 1e-6 (constant patches become zeros)
template <typename T>
PatchSet<T> extract_patches(const Tensor<T>& img, uint64_t seed) {
  if (img.rank() != 3) throw DimensionError("extract_patches: image must be [C,H,W]");
  const size_t C = img.shape()[0];
  Rng rng(seed);
  Tensor<T> canvas = resize_bilinear(img, kPatchRegion * kPatchGridSide,
                                     kPatchRegion * kPatchGridSide);
  PatchSet<T> out;
  out.grayscaled = rng.next_double() < kPatchGrayProb;
  if (out.grayscaled) canvas = to_grayscale(canvas);

  const size_t canvas_side = kPatchRegion * kPatchGridSide;
  out.patches = Tensor<T>({kPatchCount, C, kPatchSize, kPatchSize});
  for (size_t region = 0; region < kPatchCount; ++region) {
    const size_t ry = (region / kPatchGridSide) * kPatchRegion;
    const size_t rx = (region % kPatchGridSide) * kPatchRegion;
    const size_t dy = size_t(rng.below(kPatchJitter));
    const size_t dx = size_t(rng.below(kPatchJitter));
    out.offsets[region] = {uint8_t(dy), uint8_t(dx)};
    T* patch = out.patches.data() + region * C * kPatchSize * kPatchSize;
    for (size_t c = 0; c < C; ++c) {
      const T* src = canvas.data() + c * canvas_side * canvas_side;
      for (size_t y = 0; y < kPatchSize; ++y) {
        const T* row = src + (ry + dy + y) * canvas_side + (rx + dx);
        std::copy(row, row + kPatchSize, patch + c * kPatchSize * kPatchSize + y * kPatchSize);
      }
    }
    // normalize
    const size_t n = C * kPatchSize * kPatchSize;
    T mean = T(0);
    for (size_t i = 0; i < n; ++i) mean += patch[i];
    mean /= T(n);
    T var = T(0);
    for (size_t i = 0; i < n; ++i) {
      const T d = patch[i] - mean;
      var += d * d;
    }
    var /= T(n);
    const T std_raw = std::sqrt(var);
    if (std_raw < T(1e-6)) {
      // (near-)constant patch: the clamp would blow rounding noise up, so
      // the contract pins these to exact zeros
      std::fill(patch, patch + n, T(0));
    } else {
      for (size_t i = 0; i < n; ++i) patch[i] = (patch[i] - mean) / std_raw;
    }
  }
  return out;
}

// Label space of the relative-location task: (center, neighbor) pairs with
// labels 1..8 assigned row-major over the 3x3 grid skipping the center
// (1 = top-left neighbor). Returns 0 for the center region itself.
inline int patch_pair_label(size_t region_index) {
  if (region_index >= kPatchCount) throw ContractError("patch_pair_label: region out of range");
  if (region_index == 4) return 0;
  return region_index < 4 ? int(region_index) + 1 : int(region_index);
}

// Inverse of patch_pair_label for labels 1..8.
inline size_t region_of_pair_label(int label) {
  if (label < 1 || label > 8) throw ContractError("region_of_pair_label: label out of range");
  return label <= 4 ? size_t(label - 1) : size_t(label);
}

}  // namespace fewshot
