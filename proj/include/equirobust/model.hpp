#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "equirobust/group.hpp"
#include "equirobust/layers.hpp"

namespace equirobust {

enum class Architecture {
  baseline,
  parallel_rot,
  parallel_rot_scale,
  cascaded,
  weighted_parallel,
  fully_equivariant,
  linear,  // flatten + dense; analytic fixture for certification
};

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct ModelSpec {
  Architecture arch = Architecture::baseline;
  int depth = 4;
  std::size_t num_classes = 10;
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::vector<std::size_t> channel_plan;  // empty: default plan for the depth
  ScaleSet scale_set;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on an inconsistent spec.
  void validate() const;
  /// channel_plan, or the default plan for the depth when empty.
  std::vector<std::size_t> resolved_plan() const;

  /// Lossless `key = value` text form; parse(to_text()) == *this.
  std::string to_text() const;
  static ModelSpec parse(const std::string& text);
  std::string digest() const;

  bool operator==(const ModelSpec&) const = default;
};

std::vector<std::size_t> default_channel_plan(int depth);

class Model {
 public:
  explicit Model(ModelSpec spec);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Logits (N, num_classes). Throws NumericError naming the top-level layer
  /// index when an activation is non-finite.
  Tensor forward(const Tensor& x, nn::Mode mode = nn::Mode::eval);

  const ModelSpec& spec() const { return spec_; }
  std::vector<nn::Param>& params() { return params_; }
  const std::vector<nn::Param>& params() const { return params_; }
  std::vector<nn::Buffer>& buffers() { return buffers_; }
  const std::vector<nn::Buffer>& buffers() const { return buffers_; }
  std::size_t parameter_count() const;
  std::size_t num_layers() const { return layers_.size(); }
  const nn::Layer& layer(std::size_t i) const { return *layers_.at(i); }

  /// True when any (nested) layer is a standard convolution.
  bool has_standard_conv() const;
  /// Architectures built only from P4 layers ending in group pooling.
  bool is_rotation_invariant() const { return spec_.arch == Architecture::fully_equivariant; }
  /// Learned fusion weights of the weighted parallel design, else empty.
  std::vector<double> fusion_weights() const;

  /// Checkpoint container bytes and their SHA-256.
  std::vector<std::uint8_t> serialize() const;
  std::string digest() const;
  void save(const std::filesystem::path& path) const;
  /// Restores a checkpoint. With `expected` set, a different embedded spec
  /// is rejected with a spec-hash error.
  static Model load(const std::filesystem::path& path, const std::optional<ModelSpec>& expected = std::nullopt);
  static Model deserialize(const std::vector<std::uint8_t>& bytes,
                           const std::optional<ModelSpec>& expected = std::nullopt);

  /// Values of every parameter and buffer into `other` (same spec).
  void copy_state_to(Model& other) const;

 private:
  void build();
  void initialize();

  ModelSpec spec_;
  std::vector<nn::LayerPtr> layers_;
  std::vector<nn::Param> params_;
  std::vector<nn::Buffer> buffers_;
};

/// Raised by checkpoint loading.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace equirobust
