#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace muse2he {

enum class GeneratorKind { kResnetCycleGan, kUnetDualGan, kGanilla };
enum class DiscriminatorKind { kPatchGan70, kPatchGan70Fc };

std::string to_string(GeneratorKind kind);
std::string to_string(DiscriminatorKind kind);
GeneratorKind parse_generator_kind(const std::string& text);
DiscriminatorKind parse_discriminator_kind(const std::string& text);

/// Architecture of one generator.
///
/// `depth` means residual blocks (resnet_cyclegan), encoder levels (unet_dualgan) or
/// residual stages (ganilla).
struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::kResnetCycleGan;
  std::int64_t in_channels = 3;
  std::int64_t out_channels = 3;
  std::int64_t base_width = 64;
  std::int64_t depth = 9;

  /// Lineage defaults: 9 residual blocks, 7 U-Net levels, 4 GANILLA stages.
  static GeneratorSpec defaults(GeneratorKind kind);

  /// Throws ConfigError for unusable architectures.
  void validate() const;

  /// Input height and width must be multiples of this.
  std::int64_t size_multiple() const;

  friend bool operator==(const GeneratorSpec&, const GeneratorSpec&) = default;
};

struct DiscriminatorSpec {
  DiscriminatorKind kind = DiscriminatorKind::kPatchGan70;
  std::int64_t in_channels = 3;
  std::int64_t base_width = 64;

  void validate() const;

  friend bool operator==(const DiscriminatorSpec&, const DiscriminatorSpec&) = default;
};

nlohmann::json to_json(const GeneratorSpec& spec);
nlohmann::json to_json(const DiscriminatorSpec& spec);
GeneratorSpec generator_spec_from_json(const nlohmann::json& j);
DiscriminatorSpec discriminator_spec_from_json(const nlohmann::json& j);

/// Fully convolutional image-to-image network; output has the input's spatial size and
/// values in [-1, 1].
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorSpec spec) : spec_(spec) {}

  const GeneratorSpec& spec() const { return spec_; }

  /// Throws DimensionError unless x is N x in_channels x H x W with H, W multiples of
  /// spec().size_multiple().
  torch::Tensor forward(const torch::Tensor& x);

 protected:
  virtual torch::Tensor forward_impl(const torch::Tensor& x) = 0;

 private:
  GeneratorSpec spec_;
};

using Generator = std::shared_ptr<GeneratorImpl>;

/// Kernel, stride and padding of one convolution in a discriminator stack.
struct ConvGeometry {
  std::int64_t kernel;
  std::int64_t stride;
  std::int64_t padding;
};

/// Receptive field (in input pixels) of one output cell of a convolution stack.
std::int64_t receptive_field(std::span<const ConvGeometry> layers);

/// 70x70 PatchGAN. The _fc variant replaces the one-channel logit map with a pooled
/// fully connected head producing one logit per image.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(DiscriminatorSpec spec);

  const DiscriminatorSpec& spec() const { return spec_; }
  const std::vector<ConvGeometry>& geometry() const { return geometry_; }

  /// N x 1 x h x w logits (patchgan70) or N x 1 (patchgan70_fc).
  torch::Tensor forward(const torch::Tensor& x);

 private:
  DiscriminatorSpec spec_;
  std::vector<ConvGeometry> geometry_;
  torch::nn::Sequential body_{nullptr};
  torch::nn::Linear head_{nullptr};
};

using Discriminator = std::shared_ptr<DiscriminatorImpl>;

/// Builds a generator with weights drawn from N(0, 0.02) using a private RNG seeded
/// with `seed`; equal (spec, seed) give bit-identical parameters.
Generator build_generator(const GeneratorSpec& spec, std::uint64_t seed = 0);
Discriminator build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed = 0);

/// Inference without autograd. Output has the batch's shape.
torch::Tensor translate(GeneratorImpl& generator, const torch::Tensor& batch);

std::int64_t parameter_count(const torch::nn::Module& module);

/// FNV-1a over the raw bytes of every parameter, in registration order.
std::uint64_t parameter_checksum(const torch::nn::Module& module);

/// The two generators and two discriminators of one unpaired translation experiment.
/// d_y judges realism in the target domain (outputs of g_xy); d_x the source domain.
struct TranslatorPair {
  GeneratorSpec generator_spec;
  DiscriminatorSpec discriminator_spec;
  Generator g_xy;
  Generator g_yx;
  Discriminator d_y;
  Discriminator d_x;
};

TranslatorPair make_translator_pair(const GeneratorSpec& generator_spec,
                                    const DiscriminatorSpec& discriminator_spec,
                                    std::uint64_t seed);

}  // namespace muse2he
