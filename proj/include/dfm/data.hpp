#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dfm/tensor.hpp"

namespace dfm {

enum class Split { kTrain, kTest };

struct Dataset {
  std::vector<Tensor> images;            // (C, H, W), values in [0, 1]
  std::vector<int> labels;               // class per image (classification)
  std::vector<std::vector<int>> masks;   // H*W classes per image (segmentation)
  std::size_t classes = 0;
  Split split = Split::kTrain;

  bool segmentation() const { return !masks.empty(); }
  std::size_t size() const { return images.size(); }
  Shape image_shape() const { return images.at(0).shape(); }
  void validate() const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Big-endian IDX: images (n, rows, cols) of u8, labels (n) of u8; pixels / 255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 Split split = Split::kTrain);
// Pixels are rounded to the nearest 1/255 step; only single-channel images.
void write_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

// MNIST-style file names inside a dataset directory.
struct IdxLayout {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  static IdxLayout in(const std::filesystem::path& dir);
};

struct SegGenOptions {
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  bool rectangles = true;
  bool discs = true;
  std::optional<double> fixed_radius;  // discs only
  bool centered = false;
  double background_noise = 0.1;
};

// Rectangles and discs on a noisy background; each class has its own
// intensity, the mask holds the topmost shape's class (0 = background).
Dataset make_synthetic_seg(std::size_t n, std::size_t height, std::size_t width, std::size_t classes,
                           std::uint64_t seed, const SegGenOptions& options = {});

// Ten-ish class glyph images: each class is a fixed set of strokes (shared by
// every split generated with the same prototype seed), drawn with random shift,
// thickness and contrast over background noise.
Dataset make_synthetic_glyphs(std::size_t per_class, std::size_t size, std::size_t classes,
                              std::uint64_t prototype_seed, std::uint64_t instance_seed, Split split);

// x + eps, eps ~ N(0, sigma^2) i.i.d.; no clamping.
Tensor add_gaussian_noise(const Tensor& x, double sigma, std::uint64_t seed);

// Exactly D instances per class, uniformly without replacement.
Dataset few_shot_sample(const Dataset& data, std::size_t per_class, std::uint64_t seed);

enum class CorruptionKind {
  kGaussianNoise,
  kSpeckleNoise,
  kBrightnessDown,
  kContrastDown,
  kPixelate,
  kDefocusBlur,
  kMotionBlur,
  kJpegLikeBlock,
};

struct Corruption {
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  double severity = 0.0;

  // "kind:severity", e.g. "pixelate:0.5".
  static Corruption parse(std::string_view text);
  std::string to_string() const;
};

const std::vector<CorruptionKind>& all_corruptions();
std::string_view corruption_name(CorruptionKind kind);
CorruptionKind corruption_from_name(std::string_view name);

std::size_t pixelate_factor(double severity);
Tensor corrupt(const Tensor& x, const Corruption& c, std::uint64_t seed);

}  // namespace dfm
