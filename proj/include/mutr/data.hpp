#pragma once

#include "mutr/tensor.hpp"

namespace mutr::data {

struct SegmentationSample {
  Tensor image;  // [3,H,W] f32 in [0,1]
  Tensor mask;   // [H,W] f32, class indices (0/1 for binary)
  std::string id;
};

using Dataset = std::vector<SegmentationSample>;

// Diameter-controlled synthetic lesions: one ellipse-like blob per image
// with a smoothed intensity boundary, speckle noise and low contrast. The
// mask is the clean blob. Deterministic per (seed, index).
struct SynthSpec {
  int count = 200;
  int size = 256;
  double mean_diameter = 144.0;
  double diameter_spread = 0.15;  // relative
  double noise = 0.08;
  double contrast_min = 0.18;
  double contrast_max = 0.35;
  std::uint64_t seed = 0;
};

Dataset synth_generate(const SynthSpec& spec);

// Image files: PGM "P5" (grayscale, load -> [H,W]) and PPM "P6" (color,
// load -> [3,H,W]), maxval 255, bytes mapped to [0,1] by 1/255.
Tensor load_image(const std::string& path);
void save_image(const std::string& path, const Tensor& t);

// Masks store raw class-index bytes in PGM.
Tensor load_mask(const std::string& path);
void save_mask(const std::string& path, const Tensor& t);

// Directory layout: images/<id>.ppm, masks/<id>.pgm, index.txt with the ids.
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// Image via bilinear (half-pixel centers, edge clamp); mask via nearest.
SegmentationSample resize_sample(const SegmentationSample& s, int target);

// Seed-deterministic shuffle-then-cut; train gets round(ratio * n).
std::pair<Dataset, Dataset> split(const Dataset& ds, double ratio,
                                  std::uint64_t seed);

}  // namespace mutr::data
