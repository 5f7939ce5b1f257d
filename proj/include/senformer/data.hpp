#pragma once

// Synthetic segmentation scenes and the training-time augmentations.

#include <cstdint>
#include <string>
#include <vector>

#include "senformer/ops.hpp"
#include "senformer/rng.hpp"

namespace senf {

struct SegmentationSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> image;          // [3,H,W], values in [0,1]
  std::vector<std::int32_t> labels;  // [H,W], class index or kIgnoreIndex
};

struct Dataset {
  std::string id;
  std::size_t n_classes = 0;
  std::vector<SegmentationSample> samples;
};

// Textured class-0 background plus 2-5 rectangles, disks and rings of classes
// 1..n_classes-1. Shape extents range from size/8 to size/2, larger shapes
// drawn first so every shape stays visible. Sample i depends only on
// (seed, i).
std::vector<SegmentationSample> synth_generate(std::uint64_t seed, std::size_t count, std::size_t size,
                                               std::size_t n_classes);
Dataset synth_dataset(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t n_classes);
std::string synth_dataset_id(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t n_classes);

struct AugmentConfig {
  double flip_p = 0.5;
  double color_scale_lo = 0.9;
  double color_scale_hi = 1.1;
  double color_offset = 0.05;
  double resize_lo = 0.5;
  double resize_hi = 2.0;
  std::size_t crop_size = 64;
};

SegmentationSample flip_horizontal(const SegmentationSample& s);
// Per-channel x * U(lo,hi) + U(-offset,offset), clamped to [0,1].
SegmentationSample color_jitter(const SegmentationSample& s, Rng& rng, const AugmentConfig& config);
// Bilinear image, nearest-neighbour labels.
SegmentationSample resize(const SegmentationSample& s, std::size_t height, std::size_t width);
// Crops crop x crop at a random offset; short sides are padded with image 0 and
// label kIgnoreIndex.
SegmentationSample random_crop(const SegmentationSample& s, std::size_t crop, Rng& rng);

// flip -> color jitter -> random resize -> random crop
SegmentationSample augment(const SegmentationSample& s, Rng& rng, const AugmentConfig& config);

}  // namespace senf

namespace senf {

// Dataset files are bundles holding "images" (f32 [count,3,H,W]) and
// "labels" (u8 [count,H,W]); the id and class count live in the metadata.
void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

}  // namespace senf
