#include "senformer/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace senf {

namespace {

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

enum class ShapeKind { kRect, kDisk, kRing };

struct ShapeSpec {
  ShapeKind kind;
  std::int32_t cls;
  double cx, cy;
  double extent;
  double aspect;
  std::array<float, 3> color;
};

bool covers(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double r = s.extent / 2;
  switch (s.kind) {
    case ShapeKind::kRect: return std::fabs(dx) <= r && std::fabs(dy) <= r * s.aspect;
    case ShapeKind::kDisk: return dx * dx + dy * dy <= r * r;
    case ShapeKind::kRing: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
  }
  return false;
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

SegmentationSample generate_one(Rng& rng, std::size_t size, std::size_t n_classes) {
  SegmentationSample s;
  s.height = s.width = size;
  const std::size_t plane = size * size;
  s.image.assign(3 * plane, 0.0f);
  s.labels.assign(plane, 0);

  // Background: grey stripes at a random angle and frequency.
  const double base = rng.uniform(0.35, 0.6);
  const double angle = rng.uniform(0.0, M_PI);
  const double freq = rng.uniform(0.15, 0.5);
  const double phase = rng.uniform(0.0, 2 * M_PI);
  const double tint = rng.uniform(-0.05, 0.05);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double t = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
      const double v = base + 0.08 * std::sin(freq * t + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        s.image[c * plane + y * size + x] = clamp01(v + (c == 2 ? tint : 0.0) + rng.normal(0.0, 0.03));
      }
    }
  }

  const std::size_t count = 2 + rng.index(4);
  std::vector<std::int32_t> classes(n_classes - 1);
  std::iota(classes.begin(), classes.end(), 1);
  std::shuffle(classes.begin(), classes.end(), rng.engine());
  std::vector<ShapeSpec> shapes;
  for (std::size_t i = 0; i < count; ++i) {
    ShapeSpec sh;
    sh.kind = static_cast<ShapeKind>(rng.index(3));
    sh.cls = classes[i % classes.size()];
    sh.extent = static_cast<double>(size) / 8.0 * std::exp2(rng.uniform(0.0, 2.0));
    sh.aspect = rng.uniform(0.6, 1.0);
    sh.cx = rng.uniform(0.0, static_cast<double>(size));
    sh.cy = rng.uniform(0.0, static_cast<double>(size));
    const auto hue = static_cast<double>(sh.cls - 1) / static_cast<double>(n_classes - 1);
    sh.color = hsv_to_rgb(hue, 0.75, 0.9);
    for (float& c : sh.color) c = clamp01(c + rng.uniform(-0.08, 0.08));
    shapes.push_back(sh);
  }
  std::stable_sort(shapes.begin(), shapes.end(),
                   [](const ShapeSpec& a, const ShapeSpec& b) { return a.extent > b.extent; });

  for (const ShapeSpec& sh : shapes) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        if (!covers(sh, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
        s.labels[y * size + x] = sh.cls;
        for (std::size_t c = 0; c < 3; ++c) {
          s.image[c * plane + y * size + x] = clamp01(sh.color[c] + rng.normal(0.0, 0.04));
        }
      }
    }
  }
  return s;
}

}  // namespace

std::vector<SegmentationSample> synth_generate(std::uint64_t seed, std::size_t count, std::size_t size,
                                               std::size_t n_classes) {
  if (n_classes < 3) throw std::invalid_argument("synth: n_classes must be >= 3");
  if (size == 0 || size % 32) throw std::invalid_argument("synth: size must be a positive multiple of 32");
  std::vector<SegmentationSample> out(count);
  const auto n = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i)));
    out[static_cast<std::size_t>(i)] = generate_one(rng, size, n_classes);
  }
  return out;
}

std::string synth_dataset_id(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t n_classes) {
  return "synth-s" + std::to_string(seed) + "-n" + std::to_string(count) + "-" + std::to_string(size) + "px-c" +
         std::to_string(n_classes);
}

Dataset synth_dataset(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t n_classes) {
  return {synth_dataset_id(seed, count, size, n_classes), n_classes, synth_generate(seed, count, size, n_classes)};
}

SegmentationSample flip_horizontal(const SegmentationSample& s) {
  SegmentationSample out = s;
  const std::size_t h = s.height, w = s.width;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      out.labels[y * w + x] = s.labels[y * w + (w - 1 - x)];
      for (std::size_t c = 0; c < 3; ++c) {
        out.image[(c * h + y) * w + x] = s.image[(c * h + y) * w + (w - 1 - x)];
      }
    }
  }
  return out;
}

SegmentationSample color_jitter(const SegmentationSample& s, Rng& rng, const AugmentConfig& config) {
  SegmentationSample out = s;
  const std::size_t plane = s.height * s.width;
  for (std::size_t c = 0; c < 3; ++c) {
    const double k = rng.uniform(config.color_scale_lo, config.color_scale_hi);
    const double b = rng.uniform(-config.color_offset, config.color_offset);
    for (std::size_t i = 0; i < plane; ++i) {
      float& v = out.image[c * plane + i];
      v = clamp01(static_cast<double>(v) * k + b);
    }
  }
  return out;
}

SegmentationSample resize(const SegmentationSample& s, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw std::invalid_argument("resize: non-positive target size");
  if (height == s.height && width == s.width) return s;
  SegmentationSample out;
  out.height = height;
  out.width = width;
  {
    NoGradGuard no_grad;
    const auto img = Tensor<float>::from_data({3, s.height, s.width}, s.image);
    out.image = upsample_bilinear(img, height, width).to_vector();
  }
  out.labels.resize(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = std::min(s.height - 1, y * s.height / height);
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = std::min(s.width - 1, x * s.width / width);
      out.labels[y * width + x] = s.labels[sy * s.width + sx];
    }
  }
  return out;
}

SegmentationSample random_crop(const SegmentationSample& s, std::size_t crop, Rng& rng) {
  const std::size_t oy = s.height > crop ? rng.index(s.height - crop + 1) : 0;
  const std::size_t ox = s.width > crop ? rng.index(s.width - crop + 1) : 0;
  SegmentationSample out;
  out.height = out.width = crop;
  out.image.assign(3 * crop * crop, 0.0f);
  out.labels.assign(crop * crop, kIgnoreIndex);
  const std::size_t rows = std::min(crop, s.height - oy);
  const std::size_t cols = std::min(crop, s.width - ox);
  for (std::size_t y = 0; y < rows; ++y) {
    for (std::size_t x = 0; x < cols; ++x) {
      out.labels[y * crop + x] = s.labels[(oy + y) * s.width + ox + x];
      for (std::size_t c = 0; c < 3; ++c) {
        out.image[(c * crop + y) * crop + x] = s.image[(c * s.height + oy + y) * s.width + ox + x];
      }
    }
  }
  return out;
}

SegmentationSample augment(const SegmentationSample& s, Rng& rng, const AugmentConfig& config) {
  SegmentationSample out = rng.bernoulli(config.flip_p) ? flip_horizontal(s) : s;
  out = color_jitter(out, rng, config);
  const double ratio = rng.uniform(config.resize_lo, config.resize_hi);
  const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s.height) * ratio)));
  const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s.width) * ratio)));
  out = resize(out, h, w);
  return random_crop(out, config.crop_size, rng);
}

}  // namespace senf

#include "senformer/tensor_io.hpp"

namespace senf {

void save_dataset(const std::string& path, const Dataset& data) {
  if (data.samples.empty()) throw std::invalid_argument("save_dataset: empty dataset");
  const std::size_t n = data.samples.size(), h = data.samples[0].height, w = data.samples[0].width;
  std::vector<float> images;
  std::vector<std::uint8_t> labels;
  images.reserve(n * 3 * h * w);
  labels.reserve(n * h * w);
  for (const auto& s : data.samples) {
    if (s.height != h || s.width != w) throw std::invalid_argument("save_dataset: samples differ in size");
    images.insert(images.end(), s.image.begin(), s.image.end());
    for (std::int32_t l : s.labels) labels.push_back(static_cast<std::uint8_t>(l));
  }
  Bundle b;
  b.meta = {{"kind", "dataset"}, {"id", data.id}, {"n_classes", data.n_classes}};
  b.tensors.push_back({"images", host_f32({n, 3, h, w}, std::move(images))});
  b.tensors.push_back({"labels", host_u8({n, h, w}, std::move(labels))});
  write_bundle(path, b);
}

Dataset load_dataset(const std::string& path) {
  const Bundle b = read_bundle(path);
  if (b.meta.value("kind", "") != "dataset") throw std::runtime_error(path + " is not a dataset file");
  const HostTensor& images = b.get("images");
  const HostTensor& labels = b.get("labels");
  if (images.shape.size() != 4 || labels.shape.size() != 3 || images.shape[0] != labels.shape[0] ||
      images.shape[1] != 3 || images.shape[2] != labels.shape[1] || images.shape[3] != labels.shape[2]) {
    throw std::runtime_error(path + ": inconsistent image/label shapes");
  }
  Dataset d;
  d.id = b.meta.value("id", "");
  d.n_classes = b.meta.value("n_classes", std::size_t{0});
  const std::size_t n = images.shape[0], h = images.shape[2], w = images.shape[3];
  const auto& iv = images.f32();
  const auto& lv = labels.u8();
  for (std::size_t i = 0; i < n; ++i) {
    SegmentationSample s;
    s.height = h;
    s.width = w;
    s.image.assign(iv.begin() + static_cast<std::ptrdiff_t>(i * 3 * h * w),
                   iv.begin() + static_cast<std::ptrdiff_t>((i + 1) * 3 * h * w));
    for (std::size_t p = 0; p < h * w; ++p) s.labels.push_back(lv[i * h * w + p]);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace senf
