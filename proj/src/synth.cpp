#include "fewshot/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fewshot/rng.hpp"

namespace fewshot {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Hsv {
  double h;  // degrees [0, 360)
  double s;
  double v;
};

void hsv_to_rgb(const Hsv& in, double rgb[3]) {
  double h = std::fmod(in.h, 360.0);
  if (h < 0) h += 360.0;
  const double c = in.v * in.s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = in.v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

double fract(double x) { return x - std::floor(x); }

// Class attributes decoded from a grid index.
struct Recipe {
  int shape;    // 0..7
  int strokes;  // 1..3
  int fill;     // 0..2
  int hue_band; // 0..11
};

Recipe decode_recipe(uint32_t grid_index) {
  Recipe r;
  r.hue_band = int(grid_index % 12);
  grid_index /= 12;
  r.fill = int(grid_index % 3);
  grid_index /= 3;
  r.strokes = int(grid_index % 3) + 1;
  grid_index /= 3;
  r.shape = int(grid_index % 8);
  return r;
}

// Point-in-shape test in local coordinates (u right, v up, unit scale).
bool inside_shape(int shape, double u, double v) {
  switch (shape) {
    case 0: {  // triangle pointing up
      if (v < -0.8 || v > 0.8) return false;
      const double w = 0.78 * (0.8 - v) / 1.6;
      return std::abs(u) < w;
    }
    case 1:  // square with the top-right corner clipped (breaks C4 symmetry)
      return std::abs(u) < 0.62 && std::abs(v) < 0.62 && u + v < 0.74;
    case 2: {  // disc with a notch toward the upper right
      if (u * u + v * v >= 0.64) return false;
      const double du = u - 0.38, dv = v - 0.38;
      return du * du + dv * dv >= 0.10;
    }
    case 3:  // cross with unequal arms, vertical arm longer upward
      return (std::abs(u) < 0.2 && v > -0.55 && v < 0.85) ||
             (std::abs(v) < 0.2 && std::abs(u) < 0.55);
    case 4: {  // crescent
      if (u * u + v * v >= 0.64) return false;
      const double du = u - 0.34;
      return du * du + v * v >= 0.33;
    }
    case 5:  // T shape
      return (std::abs(v - 0.55) < 0.18 && std::abs(u) < 0.72) ||
             (std::abs(u) < 0.18 && v > -0.82 && v < 0.55);
    case 6: {  // diamond with a detached dot above
      if (std::abs(u) + std::abs(v) < 0.66) return true;
      const double dv = v - 0.88;
      return u * u + dv * dv < 0.016;
    }
    case 7: {  // ring with an angular gap
      const double r2 = u * u + v * v;
      if (r2 <= 0.35 * 0.35 || r2 >= 0.65 * 0.65) return false;
      const double a = std::atan2(v, u);
      return !(a > 1.15 && a < 2.05);
    }
    default:
      return false;
  }
}

// Fill pattern selects primary vs secondary foreground color inside a shape.
bool fill_secondary(int fill, double u, double v) {
  switch (fill) {
    case 0:
      return false;  // solid
    case 1:          // diagonal stripes
      return (long(std::floor((u + v) * 2.3 + 40.0)) % 2) == 0;
    case 2: {  // dot lattice
      const double du = fract(u * 2.1) - 0.5;
      const double dv = fract(v * 2.1) - 0.5;
      return du * du + dv * dv < 0.055;
    }
    default:
      return false;
  }
}

struct ImageParams {
  double cx, cy;          // shape center, pixels
  double scale;           // pixels
  double cosr, sinr;      // orientation jitter
  Hsv fg_primary, fg_secondary, stroke_color;
  Hsv bg;
  double grad_ux, grad_uy;  // per-image gradient direction (unit vector)
  double grad_mag;          // luminance slope along that direction
  double vignette;
  double noise[25];       // 5x5 low-frequency value noise grid
  double stroke_angles[3];
};

ImageParams draw_params(Rng& rng, const Recipe& rc, uint32_t size) {
  ImageParams p;
  const double S = double(size);
  p.cx = rng.uniform(0.38, 0.62) * S;
  p.cy = rng.uniform(0.38, 0.62) * S;
  p.scale = rng.uniform(0.20, 0.28) * S;
  const double theta = rng.uniform(-kPi / 12.0, kPi / 12.0);  // +-15 degrees
  p.cosr = std::cos(theta);
  p.sinr = std::sin(theta);

  const double hue = double(rc.hue_band) * 30.0 + rng.uniform(-12.0, 12.0);
  p.fg_primary = {hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0)};
  p.fg_secondary = {hue, p.fg_primary.s, p.fg_primary.v * 0.5};
  p.stroke_color = {hue, 0.9, 0.22};

  p.bg = {rng.uniform(0.0, 360.0), rng.uniform(0.05, 0.16), rng.uniform(0.34, 0.66)};
  // The background luminance gradient points in a random per-image direction,
  // so it gives the patch-location task within-image texture to latch onto
  // without handing the rotation task an orientation shortcut: the only cue
  // consistent across images is the shapes themselves.
  const double grad_dir = rng.uniform(0.0, 2.0 * kPi);
  p.grad_ux = std::cos(grad_dir);
  p.grad_uy = std::sin(grad_dir);
  p.grad_mag = rng.uniform(0.05, 0.13);
  p.vignette = rng.uniform(0.05, 0.10);
  for (int k = 0; k < 25; ++k) p.noise[k] = rng.uniform(-0.06, 0.06);
  const double base_angle = rng.uniform(0.0, 2.0 * kPi);
  for (int k = 0; k < 3; ++k) p.stroke_angles[k] = base_angle + double(k) * 2.4;
  return p;
}

// Bilinear sample of the 5x5 noise grid at normalized coordinates.
double noise_at(const double* grid, double nx, double ny) {
  const double gx = nx * 4.0, gy = ny * 4.0;
  const int x0 = std::min(int(gx), 3), y0 = std::min(int(gy), 3);
  const double fx = gx - x0, fy = gy - y0;
  const double a = grid[y0 * 5 + x0], b = grid[y0 * 5 + x0 + 1];
  const double c = grid[(y0 + 1) * 5 + x0], d = grid[(y0 + 1) * 5 + x0 + 1];
  return a * (1 - fx) * (1 - fy) + b * fx * (1 - fy) + c * (1 - fx) * fy + d * fx * fy;
}

// Color of one sub-pixel sample.
void sample_color(const ImageParams& p, const Recipe& rc, uint32_t size, double px, double py,
                  double rgb[3]) {
  const double S = double(size);
  // Local shape coordinates: u right, v up, unit half-extent, de-rotated.
  const double dx = (px - p.cx) / p.scale;
  const double dy = (p.cy - py) / p.scale;
  const double u = p.cosr * dx + p.sinr * dy;
  const double v = -p.sinr * dx + p.cosr * dy;

  if (inside_shape(rc.shape, u, v)) {
    hsv_to_rgb(fill_secondary(rc.fill, u, v) ? p.fg_secondary : p.fg_primary, rgb);
    return;
  }
  // Stroke marks: small discs orbiting the shape; their count is a class
  // attribute, their phase varies per image.
  for (int k = 0; k < rc.strokes; ++k) {
    const double su = 1.12 * std::cos(p.stroke_angles[k]);
    const double sv = 1.12 * std::sin(p.stroke_angles[k]);
    const double du = u - su, dv = v - sv;
    if (du * du + dv * dv < 0.09 * 0.09) {
      hsv_to_rgb(p.stroke_color, rgb);
      return;
    }
  }
  // Background with orientation cues.
  const double nx = px / S, ny = py / S;
  double val = p.bg.v;
  val += noise_at(p.noise, nx, ny);
  val += p.grad_mag * ((nx - 0.5) * p.grad_ux + (0.5 - ny) * p.grad_uy) * 2.0;
  const double rx = nx - 0.5, ry = ny - 0.5;
  val -= p.vignette * (rx * rx + ry * ry) * 4.0;  // corner vignette
  Hsv bg = p.bg;
  bg.v = std::clamp(val, 0.02, 0.98);
  hsv_to_rgb(bg, rgb);
}

uint8_t quantize(double x) {
  const long q = std::lround(std::clamp(x, 0.0, 1.0) * 255.0);
  return uint8_t(std::clamp(q, 0l, 255l));
}

}  // namespace

DatasetContainer make_synthetic(const SynthSpec& spec) {
  const uint64_t total_classes =
      uint64_t(spec.base_classes) + spec.val_classes + spec.novel_classes;
  if (total_classes > kSynthClassCapacity)
    throw CapacityError("synthetic generator supports at most " +
                        std::to_string(kSynthClassCapacity) + " distinct classes, got " +
                        std::to_string(total_classes));
  if (total_classes == 0) throw ConfigError("synthetic dataset needs at least one class");
  if (spec.base_classes == 0) throw ConfigError("synthetic dataset needs base classes");
  if (spec.images_per_class == 0)
    throw ConfigError("synthetic dataset needs images_per_class >= 1");
  if (spec.image_size < 32)
    throw ConfigError("synthetic image size must be >= 32, got " +
                      std::to_string(spec.image_size));

  // Class identities: a seed-shuffled draw without replacement from the grid,
  // so class id k is a deterministic function of (seed, k).
  std::vector<uint32_t> grid(kSynthClassCapacity);
  std::iota(grid.begin(), grid.end(), 0u);
  {
    Rng perm_rng(mix_seed({spec.seed, 77}));
    perm_rng.shuffle(grid);
  }

  DatasetContainer ds;
  ds.channels = 3;
  ds.height = spec.image_size;
  ds.width = spec.image_size;

  const size_t S = spec.image_size;
  const size_t img_numel = 3 * S * S;
  const size_t n_images = size_t(total_classes) * spec.images_per_class;
  ds.pixels.resize(n_images * img_numel);
  ds.labels.resize(n_images);

  for (uint32_t c = 0; c < total_classes; ++c) {
    const Recipe rc = decode_recipe(grid[c]);
    char name[64];
    std::snprintf(name, sizeof(name), "c%03u_sh%d_st%d_f%d_h%02d", c, rc.shape, rc.strokes,
                  rc.fill, rc.hue_band);
    ds.class_names.emplace_back(name);
    if (c < spec.base_classes)
      ds.split_classes[size_t(Split::Base)].push_back(c);
    else if (c < spec.base_classes + spec.val_classes)
      ds.split_classes[size_t(Split::Validation)].push_back(c);
    else
      ds.split_classes[size_t(Split::Novel)].push_back(c);

    for (uint32_t i = 0; i < spec.images_per_class; ++i) {
      const size_t img_idx = size_t(c) * spec.images_per_class + i;
      ds.labels[img_idx] = c;
      Rng rng(mix_seed({spec.seed, 101, c, i}));
      const ImageParams p = draw_params(rng, rc, spec.image_size);

      uint8_t* dst = ds.pixels.data() + img_idx * img_numel;
      for (size_t y = 0; y < S; ++y) {
        for (size_t x = 0; x < S; ++x) {
          // 2x2 supersampling.
          double acc[3] = {0, 0, 0};
          for (int sy = 0; sy < 2; ++sy) {
            for (int sx = 0; sx < 2; ++sx) {
              double rgb[3];
              sample_color(p, rc, spec.image_size, double(x) + 0.25 + 0.5 * sx,
                           double(y) + 0.25 + 0.5 * sy, rgb);
              acc[0] += rgb[0];
              acc[1] += rgb[1];
              acc[2] += rgb[2];
            }
          }
          for (size_t ch = 0; ch < 3; ++ch)
            dst[ch * S * S + y * S + x] = quantize(acc[ch] / 4.0);
        }
      }
    }
  }

  ds.rebuild_index();
  return ds;
}

}  // namespace fewshot
