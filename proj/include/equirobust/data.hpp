#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "equirobust/tensor.hpp"

namespace equirobust {

struct Dataset {
  Tensor images;  // (N, C, H, W), values in [0, 1]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split;
  std::string provenance;  // file digest or generator description

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.size(1); }
  std::size_t height() const { return images.size(2); }
  std::size_t width() const { return images.size(3); }

  /// Rows [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const;
  /// Rows in the given order.
  Dataset select(const std::vector<std::size_t>& rows) const;
  /// Images of rows [begin, end) as one (n, C, H, W) tensor.
  Tensor batch(std::size_t begin, std::size_t end) const;
  std::vector<int> batch_labels(std::size_t begin, std::size_t end) const;
  /// SHA-256 over shape, pixels and labels.
  std::string digest() const;
  /// Throws std::invalid_argument when the invariants do not hold.
  void validate() const;
};

/// Reads CIFAR-style binary files: each record is one label byte followed by
/// channels * height * width planar pixel bytes.
Dataset load_cifar_binary(const std::vector<std::filesystem::path>& paths, std::size_t num_classes = 10,
                          std::size_t channels = 3, std::size_t height = 32, std::size_t width = 32);
/// Writes the same layout; pixels are rounded to the nearest byte.
void save_cifar_binary(const Dataset& ds, const std::filesystem::path& path);

enum class SyntheticKind { oriented_bars, scaled_blobs };
std::string to_string(SyntheticKind k);
SyntheticKind synthetic_from_string(const std::string& s);

/// Procedural datasets whose classes are orientations (bars) or sizes
/// (blobs). For oriented_bars with k divisible by 4, rotating an image of
/// class c by 90 degrees gives exactly an image of class (c + k/4) mod k.
Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::size_t image_size, std::size_t num_classes,
                       std::uint64_t seed, std::size_t channels = 3);

enum class CorruptionKind {
  gaussian_noise,
  shot_noise,
  impulse_noise,
  brightness,
  contrast,
  saturate,
  pixelate,
  defocus_blur,
};

inline constexpr std::array<CorruptionKind, 8> kAllCorruptions = {
    CorruptionKind::gaussian_noise, CorruptionKind::shot_noise, CorruptionKind::impulse_noise,
    CorruptionKind::brightness,     CorruptionKind::contrast,   CorruptionKind::saturate,
    CorruptionKind::pixelate,       CorruptionKind::defocus_blur};

std::string to_string(CorruptionKind k);
CorruptionKind corruption_from_string(const std::string& s);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;  // 1..5
  std::uint64_t seed = 0;
  /// Overrides the severity table value when set.
  std::optional<double> parameter;
};

/// Severity table (index severity - 1). Units: gaussian sigma, shot photon
/// count lambda, impulse rate p, brightness offset b, contrast factor c,
/// saturate strength s, pixelate block size d, defocus disk radius.
const std::array<double, 5>& severity_table(CorruptionKind k);
double corruption_parameter(const CorruptionSpec& spec);

/// Applies a corruption image by image (image i uses seed + i) and clips
/// the result to [0, 1].
Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec);

/// Class-balanced subset: n_per_class rows of every class drawn with the
/// seed, returned in original order.
Dataset subsample(const Dataset& ds, std::size_t n_per_class, std::uint64_t seed);

/// Deterministic shuffle of row order.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

}  // namespace equirobust
