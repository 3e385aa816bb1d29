#include "dfm/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "dfm/random.hpp"

namespace dfm {

void Dataset::validate() const {
  if (classes == 0) throw DataError("dataset: class count must be positive");
  const bool seg = segmentation();
  if (seg ? masks.size() != images.size() : labels.size() != images.size()) {
    throw DataError("dataset: " + std::to_string(images.size()) + " images but " +
                    std::to_string(seg ? masks.size() : labels.size()) + " targets");
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].all_finite()) throw DataError("dataset: non-finite pixel in image " + std::to_string(i));
    if (images[i].shape() != images[0].shape()) throw DataError("dataset: image " + std::to_string(i) + " has a different shape");
    auto in_range = [&](int c) { return c >= 0 && static_cast<std::size_t>(c) < classes; };
    if (seg) {
      if (masks[i].size() != images[i].dim(1) * images[i].dim(2)) throw DataError("dataset: mask size mismatch at " + std::to_string(i));
      if (!std::all_of(masks[i].begin(), masks[i].end(), in_range)) throw DataError("dataset: mask value out of range at " + std::to_string(i));
    } else if (!in_range(labels[i])) {
      throw DataError("dataset: label out of range at " + std::to_string(i));
    }
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.classes = classes;
  out.split = split;
  for (std::size_t i : indices) {
    out.images.push_back(images.at(i));
    if (segmentation()) {
      out.masks.push_back(masks.at(i));
    } else {
      out.labels.push_back(labels.at(i));
    }
  }
  return out;
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("idx: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at, const std::filesystem::path& path) {
  if (at + 4 > b.size()) throw DataError("idx: truncated header in " + path.string());
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> bytes{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                                  static_cast<char>(v)};
  out.write(bytes.data(), 4);
}

void check_magic(std::uint32_t got, std::uint32_t want, const std::filesystem::path& path) {
  if (got != want) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "0x%08x (expected 0x%08x)", got, want);
    throw DataError("idx: bad magic " + std::string(buf) + " in " + path.string());
  }
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  check_magic(read_be32(ib, 0, images), kIdxImagesMagic, images);
  check_magic(read_be32(lb, 0, labels), kIdxLabelsMagic, labels);
  const std::size_t n = read_be32(ib, 4, images), rows = read_be32(ib, 8, images), cols = read_be32(ib, 12, images);
  const std::size_t nl = read_be32(lb, 4, labels);
  if (n != nl) {
    throw DataError("idx: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  }
  if (rows == 0 || cols == 0) throw DataError("idx: zero image dimension in " + images.string());
  if (ib.size() < 16 + n * rows * cols) throw DataError("idx: truncated pixel data in " + images.string());
  if (lb.size() < 8 + n) throw DataError("idx: truncated label data in " + labels.string());

  Dataset out;
  out.split = split;
  const std::size_t px = rows * cols;
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> data(px);
    for (std::size_t p = 0; p < px; ++p) data[p] = static_cast<double>(ib[16 + i * px + p]) / 255.0;
    out.images.emplace_back(Shape{1, rows, cols}, std::move(data));
    out.labels.push_back(lb[8 + i]);
    max_label = std::max(max_label, out.labels.back());
  }
  out.classes = static_cast<std::size_t>(max_label + 1);
  return out;
}

void write_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (data.segmentation()) throw DataError("idx: segmentation masks cannot be written as IDX labels");
  if (data.size() == 0) throw DataError("idx: empty dataset");
  const Shape shape = data.image_shape();
  if (shape.size() != 3 || shape[0] != 1) throw DataError("idx: only single-channel images, got " + shape_str(shape));
  std::ofstream io(images, std::ios::binary), lo(labels, std::ios::binary);
  if (!io || !lo) throw DataError("idx: cannot open output files");
  put_be32(io, kIdxImagesMagic);
  put_be32(io, static_cast<std::uint32_t>(data.size()));
  put_be32(io, static_cast<std::uint32_t>(shape[1]));
  put_be32(io, static_cast<std::uint32_t>(shape[2]));
  put_be32(lo, kIdxLabelsMagic);
  put_be32(lo, static_cast<std::uint32_t>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.images[i].data()) io.put(static_cast<char>(std::lround(clamp01(v) * 255.0)));
    if (data.labels[i] < 0 || data.labels[i] > 255) throw DataError("idx: label does not fit in a byte");
    lo.put(static_cast<char>(data.labels[i]));
  }
}

IdxLayout IdxLayout::in(const std::filesystem::path& dir) {
  return {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", dir / "t10k-images-idx3-ubyte",
          dir / "t10k-labels-idx1-ubyte"};
}

Dataset make_synthetic_seg(std::size_t n, std::size_t height, std::size_t width, std::size_t classes,
                           std::uint64_t seed, const SegGenOptions& options) {
  if (classes < 2) throw DataError("synthetic seg: need at least 2 classes");
  if (height < 4 || width < 4) throw DataError("synthetic seg: resolution must be at least 4x4");
  if (options.min_shapes > options.max_shapes) throw DataError("synthetic seg: min_shapes > max_shapes");
  if (!options.rectangles && !options.discs) throw DataError("synthetic seg: no shape kinds enabled");
  const double side = static_cast<double>(std::min(height, width));
  if (options.fixed_radius && (*options.fixed_radius <= 0.0 || 2.0 * *options.fixed_radius > side)) {
    throw DataError("synthetic seg: disc of radius " + std::to_string(*options.fixed_radius) + " does not fit " +
                    std::to_string(height) + "x" + std::to_string(width));
  }

  Dataset out;
  out.classes = classes;
  const std::size_t px = height * width;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, "seg-image", i);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> img(px);
    for (double& v : img) v = options.background_noise * unit(rng);
    std::vector<int> mask(px, 0);

    const std::size_t count = std::uniform_int_distribution<std::size_t>(options.min_shapes, options.max_shapes)(rng);
    for (std::size_t s = 0; s < count; ++s) {
      const int cls = std::uniform_int_distribution<int>(1, static_cast<int>(classes) - 1)(rng);
      const double intensity = 0.3 + 0.7 * static_cast<double>(cls) / static_cast<double>(classes - 1);
      const bool disc = options.fixed_radius || !options.rectangles ||
                        (options.discs && unit(rng) < 0.5);
      auto center = [&](std::size_t extent, double margin) {
        if (options.centered) return (static_cast<double>(extent) - 1.0) / 2.0;
        return margin + unit(rng) * (static_cast<double>(extent) - 1.0 - 2.0 * margin);
      };
      if (disc) {
        const double r = options.fixed_radius ? *options.fixed_radius : side / 8.0 + unit(rng) * side / 8.0;
        const double cy = center(height, r), cx = center(width, r);
        for (std::size_t y = 0; y < height; ++y) {
          for (std::size_t x = 0; x < width; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            if (dy * dy + dx * dx <= r * r) {
              mask[y * width + x] = cls;
              img[y * width + x] = intensity + options.background_noise * unit(rng);
            }
          }
        }
      } else {
        const double hh = side / 8.0 + unit(rng) * side / 4.0, hw = side / 8.0 + unit(rng) * side / 4.0;
        const double cy = center(height, hh), cx = center(width, hw);
        for (std::size_t y = 0; y < height; ++y) {
          for (std::size_t x = 0; x < width; ++x) {
            if (std::abs(static_cast<double>(y) - cy) <= hh && std::abs(static_cast<double>(x) - cx) <= hw) {
              mask[y * width + x] = cls;
              img[y * width + x] = intensity + options.background_noise * unit(rng);
            }
          }
        }
      }
    }
    for (double& v : img) v = clamp01(v);
    out.images.emplace_back(Shape{1, height, width}, std::move(img));
    out.masks.push_back(std::move(mask));
  }
  return out;
}

namespace {

struct Stroke {
  double y0, x0, y1, x1;
};

double segment_distance(double py, double px, const Stroke& s) {
  const double vy = s.y1 - s.y0, vx = s.x1 - s.x0;
  const double len2 = vy * vy + vx * vx;
  double t = len2 > 0.0 ? ((py - s.y0) * vy + (px - s.x0) * vx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dy = py - (s.y0 + t * vy), dx = px - (s.x0 + t * vx);
  return std::sqrt(dy * dy + dx * dx);
}

}  // namespace

Dataset make_synthetic_glyphs(std::size_t per_class, std::size_t size, std::size_t classes,
                              std::uint64_t prototype_seed, std::uint64_t instance_seed, Split split) {
  if (classes < 2) throw DataError("glyphs: need at least 2 classes");
  if (size < 8) throw DataError("glyphs: image size must be at least 8");
  const double extent = static_cast<double>(size);
  const double lo = 0.2 * extent, hi = 0.8 * extent;

  std::vector<std::vector<Stroke>> prototypes(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    Rng rng = make_rng(prototype_seed, "glyph-prototype", c);
    std::uniform_real_distribution<double> pos(lo, hi);
    for (int s = 0; s < 3; ++s) prototypes[c].push_back({pos(rng), pos(rng), pos(rng), pos(rng)});
  }

  Dataset out;
  out.classes = classes;
  out.split = split;
  const std::uint64_t split_tag = split == Split::kTrain ? 0 : 1;
  for (std::size_t k = 0; k < per_class * classes; ++k) {
    const std::size_t c = k % classes;
    Rng rng = make_rng(instance_seed, split_tag ? "glyph-test" : "glyph-train", k);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double shift_y = (unit(rng) - 0.5) * 0.2 * extent, shift_x = (unit(rng) - 0.5) * 0.2 * extent;
    const double thickness = 0.8 + 1.2 * unit(rng);
    const double contrast = 0.5 + 0.5 * unit(rng);
    const double jitter = 0.06 * extent;
    std::vector<Stroke> strokes = prototypes[c];
    for (auto& s : strokes) {
      s.y0 += shift_y + (unit(rng) - 0.5) * jitter;
      s.x0 += shift_x + (unit(rng) - 0.5) * jitter;
      s.y1 += shift_y + (unit(rng) - 0.5) * jitter;
      s.x1 += shift_x + (unit(rng) - 0.5) * jitter;
    }
    std::vector<double> img(size * size);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        double d = extent;
        for (const auto& s : strokes) d = std::min(d, segment_distance(static_cast<double>(y), static_cast<double>(x), s));
        const double ink = std::clamp(thickness + 0.5 - d, 0.0, 1.0);
        img[y * size + x] = clamp01(contrast * ink + 0.15 * unit(rng));
      }
    }
    out.images.emplace_back(Shape{1, size, size}, std::move(img));
    out.labels.push_back(static_cast<int>(c));
  }
  return out;
}

Tensor add_gaussian_noise(const Tensor& x, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("add_gaussian_noise: sigma must be >= 0");
  std::vector<double> data(x.data().begin(), x.data().end());
  if (sigma > 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, sigma);
    for (double& v : data) v += dist(rng);
  }
  return Tensor(x.shape(), std::move(data));
}

Dataset few_shot_sample(const Dataset& data, std::size_t per_class, std::uint64_t seed) {
  if (data.segmentation()) throw DataError("few-shot: requires a classification dataset");
  if (per_class == 0) throw DataError("few-shot: D must be >= 1");
  std::vector<std::vector<std::size_t>> by_class(data.classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class.at(static_cast<std::size_t>(data.labels[i])).push_back(i);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < data.classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < per_class) {
      throw DataError("few-shot: class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                      " instances, need " + std::to_string(per_class));
    }
    Rng rng = make_rng(seed, "few-shot", c);
    std::shuffle(idx.begin(), idx.end(), rng);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  std::sort(chosen.begin(), chosen.end());
  return data.subset(chosen);
}

namespace {

constexpr std::array<std::pair<CorruptionKind, std::string_view>, 8> kCorruptionNames{{
    {CorruptionKind::kGaussianNoise, "gaussian_noise"},
    {CorruptionKind::kSpeckleNoise, "speckle_noise"},
    {CorruptionKind::kBrightnessDown, "brightness_down"},
    {CorruptionKind::kContrastDown, "contrast_down"},
    {CorruptionKind::kPixelate, "pixelate"},
    {CorruptionKind::kDefocusBlur, "defocus_blur"},
    {CorruptionKind::kMotionBlur, "motion_blur"},
    {CorruptionKind::kJpegLikeBlock, "jpeg_like_block"},
}};

// Average of in-bounds neighbours at the given offsets, per channel.
std::vector<double> box_filter(const Tensor& x, const std::vector<std::pair<int, int>>& offsets) {
  const std::size_t channels = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        int count = 0;
        for (auto [dy, dx] : offsets) {
          const auto sy = static_cast<std::ptrdiff_t>(y) + dy, sx = static_cast<std::ptrdiff_t>(xx) + dx;
          if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx >= static_cast<std::ptrdiff_t>(w)) continue;
          acc += in[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
          ++count;
        }
        out[(c * h + y) * w + xx] = acc / count;
      }
    }
  }
  return out;
}

}  // namespace

const std::vector<CorruptionKind>& all_corruptions() {
  static const std::vector<CorruptionKind> kinds = [] {
    std::vector<CorruptionKind> k;
    for (const auto& [kind, name] : kCorruptionNames) k.push_back(kind);
    return k;
  }();
  return kinds;
}

std::string_view corruption_name(CorruptionKind kind) {
  for (const auto& [k, name] : kCorruptionNames) {
    if (k == kind) return name;
  }
  throw DataError("corruption: unknown kind");
}

CorruptionKind corruption_from_name(std::string_view name) {
  for (const auto& [k, n] : kCorruptionNames) {
    if (n == name) return k;
  }
  throw DataError("corruption: unknown kind '" + std::string(name) + "'");
}

Corruption Corruption::parse(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) throw DataError("corruption: expected kind:severity, got '" + std::string(text) + "'");
  Corruption c;
  c.kind = corruption_from_name(text.substr(0, colon));
  const std::string sev(text.substr(colon + 1));
  std::size_t used = 0;
  try {
    c.severity = std::stod(sev, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != sev.size() || sev.empty() || !(c.severity >= 0.0) || !std::isfinite(c.severity)) {
    throw DataError("corruption: invalid severity '" + sev + "'");
  }
  return c;
}

std::string Corruption::to_string() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", severity);
  return std::string(corruption_name(kind)) + ":" + buf;
}

std::size_t pixelate_factor(double severity) { return static_cast<std::size_t>(std::lround(1.0 + 3.0 * severity)); }

Tensor corrupt(const Tensor& x, const Corruption& c, std::uint64_t seed) {
  if (x.rank() != 3) throw ShapeError("corrupt: expected (C,H,W), got " + shape_str(x.shape()));
  if (!(c.severity >= 0.0) || !std::isfinite(c.severity)) throw DataError("corrupt: severity must be finite and >= 0");
  const std::size_t channels = x.dim(0), h = x.dim(1), w = x.dim(2), plane = h * w;
  const auto in = x.data();
  const double s = c.severity;
  std::vector<double> out(in.begin(), in.end());

  switch (c.kind) {
    case CorruptionKind::kGaussianNoise: {
      const Tensor noisy = add_gaussian_noise(x, s, seed);
      out.assign(noisy.data().begin(), noisy.data().end());
      break;
    }
    case CorruptionKind::kSpeckleNoise: {
      Rng rng(seed);
      std::normal_distribution<double> dist(0.0, 1.0);
      for (double& v : out) v *= 1.0 + s * dist(rng);
      break;
    }
    case CorruptionKind::kBrightnessDown:
      for (double& v : out) v -= s;
      break;
    case CorruptionKind::kContrastDown:
      for (std::size_t ch = 0; ch < channels; ++ch) {
        double mean = 0.0;
        for (std::size_t p = 0; p < plane; ++p) mean += in[ch * plane + p];
        mean /= static_cast<double>(plane);
        for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] = mean + (in[ch * plane + p] - mean) * (1.0 - s);
      }
      break;
    case CorruptionKind::kPixelate: {
      const std::size_t f = pixelate_factor(s);
      for (std::size_t ch = 0; ch < channels; ++ch) {
        for (std::size_t by = 0; by < h; by += f) {
          for (std::size_t bx = 0; bx < w; bx += f) {
            const std::size_t ey = std::min(h, by + f), ex = std::min(w, bx + f);
            double mean = 0.0;
            for (std::size_t y = by; y < ey; ++y)
              for (std::size_t xx = bx; xx < ex; ++xx) mean += in[ch * plane + y * w + xx];
            mean /= static_cast<double>((ey - by) * (ex - bx));
            for (std::size_t y = by; y < ey; ++y)
              for (std::size_t xx = bx; xx < ex; ++xx) out[ch * plane + y * w + xx] = mean;
          }
        }
      }
      break;
    }
    case CorruptionKind::kDefocusBlur: {
      const double r = 3.0 * s;
      const int ri = static_cast<int>(std::floor(r));
      std::vector<std::pair<int, int>> offsets;
      for (int dy = -ri; dy <= ri; ++dy)
        for (int dx = -ri; dx <= ri; ++dx)
          if (dy * dy + dx * dx <= r * r) offsets.emplace_back(dy, dx);
      out = box_filter(x, offsets);
      break;
    }
    case CorruptionKind::kMotionBlur: {
      const int half = static_cast<int>(std::lround(3.0 * s));
      std::vector<std::pair<int, int>> offsets;
      for (int dx = -half; dx <= half; ++dx) offsets.emplace_back(0, dx);
      out = box_filter(x, offsets);
      break;
    }
    case CorruptionKind::kJpegLikeBlock: {
      if (s == 0.0) break;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        for (std::size_t by = 0; by < h; by += 8) {
          for (std::size_t bx = 0; bx < w; bx += 8) {
            const std::size_t ey = std::min(h, by + 8), ex = std::min(w, bx + 8);
            double mean = 0.0;
            for (std::size_t y = by; y < ey; ++y)
              for (std::size_t xx = bx; xx < ex; ++xx) mean += in[ch * plane + y * w + xx];
            mean /= static_cast<double>((ey - by) * (ex - bx));
            for (std::size_t y = by; y < ey; ++y) {
              for (std::size_t xx = bx; xx < ex; ++xx) {
                const double v = in[ch * plane + y * w + xx];
                out[ch * plane + y * w + xx] = mean + std::round((v - mean) / s) * s;
              }
            }
          }
        }
      }
      break;
    }
  }
  for (double& v : out) v = clamp01(v);
  return Tensor(x.shape(), std::move(out));
}

}  // namespace dfm
