#include "muse2he/models.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include "muse2he/errors.hpp"
#include "muse2he/hashing.hpp"

namespace muse2he {

namespace nn = torch::nn;
using nlohmann::json;

std::string to_string(GeneratorKind kind) {
  switch (kind) {
    case GeneratorKind::kResnetCycleGan: return "resnet_cyclegan";
    case GeneratorKind::kUnetDualGan: return "unet_dualgan";
    case GeneratorKind::kGanilla: return "ganilla";
  }
  return "unknown";
}

std::string to_string(DiscriminatorKind kind) {
  return kind == DiscriminatorKind::kPatchGan70 ? "patchgan70" : "patchgan70_fc";
}

GeneratorKind parse_generator_kind(const std::string& text) {
  if (text == "resnet_cyclegan" || text == "cyclegan") return GeneratorKind::kResnetCycleGan;
  if (text == "unet_dualgan" || text == "dualgan") return GeneratorKind::kUnetDualGan;
  if (text == "ganilla") return GeneratorKind::kGanilla;
  throw ConfigError("unsupported generator kind '" + text + "'");
}

DiscriminatorKind parse_discriminator_kind(const std::string& text) {
  if (text == "patchgan70") return DiscriminatorKind::kPatchGan70;
  if (text == "patchgan70_fc") return DiscriminatorKind::kPatchGan70Fc;
  throw ConfigError("unsupported discriminator kind '" + text + "'");
}

GeneratorSpec GeneratorSpec::defaults(GeneratorKind kind) {
  GeneratorSpec spec;
  spec.kind = kind;
  switch (kind) {
    case GeneratorKind::kResnetCycleGan: spec.depth = 9; break;
    case GeneratorKind::kUnetDualGan: spec.depth = 7; break;
    case GeneratorKind::kGanilla: spec.depth = 4; break;
  }
  return spec;
}

void GeneratorSpec::validate() const {
  if (in_channels != 3 || out_channels != 3) {
    throw ConfigError("generators map 3-channel RGB to 3-channel RGB");
  }
  if (base_width < 1) {
    throw ConfigError("generator base_width must be >= 1");
  }
  switch (kind) {
    case GeneratorKind::kResnetCycleGan:
      if (depth < 0) throw ConfigError("resnet generator needs depth >= 0 residual blocks");
      break;
    case GeneratorKind::kUnetDualGan:
      if (depth < 2 || depth > 10) throw ConfigError("unet generator depth must be in [2, 10]");
      break;
    case GeneratorKind::kGanilla:
      if (depth < 1 || depth > 4) throw ConfigError("ganilla generator depth must be in [1, 4]");
      break;
    default: throw ConfigError("unsupported generator kind");
  }
}

std::int64_t GeneratorSpec::size_multiple() const {
  switch (kind) {
    case GeneratorKind::kResnetCycleGan: return 4;
    case GeneratorKind::kUnetDualGan: return std::int64_t{1} << depth;
    case GeneratorKind::kGanilla: return std::int64_t{2} << (depth - 1);
  }
  return 1;
}

void DiscriminatorSpec::validate() const {
  if (in_channels < 1 || base_width < 1) {
    throw ConfigError("discriminator channels and width must be >= 1");
  }
  if (kind != DiscriminatorKind::kPatchGan70 && kind != DiscriminatorKind::kPatchGan70Fc) {
    throw ConfigError("unsupported discriminator kind");
  }
}

json to_json(const GeneratorSpec& spec) {
  return {{"kind", to_string(spec.kind)},
          {"in_channels", spec.in_channels},
          {"out_channels", spec.out_channels},
          {"base_width", spec.base_width},
          {"depth", spec.depth}};
}

json to_json(const DiscriminatorSpec& spec) {
  return {{"kind", to_string(spec.kind)},
          {"in_channels", spec.in_channels},
          {"base_width", spec.base_width}};
}

GeneratorSpec generator_spec_from_json(const json& j) {
  GeneratorSpec spec = GeneratorSpec::defaults(parse_generator_kind(j.at("kind").get<std::string>()));
  spec.in_channels = j.value("in_channels", spec.in_channels);
  spec.out_channels = j.value("out_channels", spec.out_channels);
  spec.base_width = j.value("base_width", spec.base_width);
  spec.depth = j.value("depth", spec.depth);
  return spec;
}

DiscriminatorSpec discriminator_spec_from_json(const json& j) {
  DiscriminatorSpec spec;
  spec.kind = parse_discriminator_kind(j.at("kind").get<std::string>());
  spec.in_channels = j.value("in_channels", spec.in_channels);
  spec.base_width = j.value("base_width", spec.base_width);
  return spec;
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw DimensionError("generator expects N x " + std::to_string(spec_.in_channels) +
                         " x H x W input");
  }
  const auto m = spec_.size_multiple();
  if (x.size(2) % m != 0 || x.size(3) % m != 0) {
    throw DimensionError("generator input " + std::to_string(x.size(2)) + "x" +
                         std::to_string(x.size(3)) + " is not a multiple of " + std::to_string(m));
  }
  return forward_impl(x);
}

namespace {

nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1,
                std::int64_t pad = 0) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(pad));
}

nn::InstanceNorm2d inorm(std::int64_t c) { return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(c)); }

nn::LeakyReLU lrelu() { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); }

// ---------------------------------------------------------------------------
// ResNet generator: 7x7 stem, two stride-2 downsamplings, residual blocks,
// two transposed-conv upsamplings, 7x7 head.

struct ResidualBlockImpl : nn::Module {
  explicit ResidualBlockImpl(std::int64_t c) {
    body = register_module("body", nn::Sequential(nn::ReflectionPad2d(1), conv(c, c, 3), inorm(c),
                                                  nn::ReLU(), nn::ReflectionPad2d(1), conv(c, c, 3),
                                                  inorm(c)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return x + body->forward(x); }
  nn::Sequential body{nullptr};
};
TORCH_MODULE(ResidualBlock);

class ResnetGenerator final : public GeneratorImpl {
 public:
  explicit ResnetGenerator(const GeneratorSpec& spec) : GeneratorImpl(spec) {
    const auto w = spec.base_width;
    nn::Sequential s;
    s->push_back(nn::ReflectionPad2d(3));
    s->push_back(conv(spec.in_channels, w, 7));
    s->push_back(inorm(w));
    s->push_back(nn::ReLU());
    for (std::int64_t i = 0, m = 1; i < 2; ++i, m *= 2) {
      s->push_back(conv(w * m, w * m * 2, 3, 2, 1));
      s->push_back(inorm(w * m * 2));
      s->push_back(nn::ReLU());
    }
    for (std::int64_t i = 0; i < spec.depth; ++i) {
      s->push_back(ResidualBlock(w * 4));
    }
    for (std::int64_t m = 4; m > 1; m /= 2) {
      s->push_back(nn::ConvTranspose2d(
          nn::ConvTranspose2dOptions(w * m, w * m / 2, 3).stride(2).padding(1).output_padding(1)));
      s->push_back(inorm(w * m / 2));
      s->push_back(nn::ReLU());
    }
    s->push_back(nn::ReflectionPad2d(3));
    s->push_back(conv(w, spec.out_channels, 7));
    s->push_back(nn::Tanh());
    model_ = register_module("model", s);
  }

 protected:
  torch::Tensor forward_impl(const torch::Tensor& x) override { return model_->forward(x); }

 private:
  nn::Sequential model_{nullptr};
};

// ---------------------------------------------------------------------------
// U-Net generator: `depth` stride-2 4x4 encoder levels mirrored by transposed
// convolutions, with a skip concatenation at every level.

class UnetGenerator final : public GeneratorImpl {
 public:
  explicit UnetGenerator(const GeneratorSpec& spec) : GeneratorImpl(spec) {
    const auto w = spec.base_width;
    const auto levels = spec.depth;
    std::vector<std::int64_t> ch(static_cast<std::size_t>(levels));
    for (std::int64_t i = 0; i < levels; ++i) {
      ch[i] = w * std::min<std::int64_t>(std::int64_t{1} << i, 8);
    }
    encoders_ = register_module("encoders", nn::ModuleList());
    decoders_ = register_module("decoders", nn::ModuleList());
    for (std::int64_t i = 0; i < levels; ++i) {
      nn::Sequential e;
      if (i == 0) {
        e->push_back(conv(spec.in_channels, ch[0], 4, 2, 1));
      } else {
        e->push_back(lrelu());
        e->push_back(conv(ch[i - 1], ch[i], 4, 2, 1));
        if (i != levels - 1) e->push_back(inorm(ch[i]));
      }
      encoders_->push_back(e);
    }
    // decoders_[i] produces the level-i resolution from level i+1 features.
    for (std::int64_t i = 0; i < levels; ++i) {
      const auto in = (i == levels - 1) ? ch[i] : 2 * ch[i];
      const auto out = (i == 0) ? spec.out_channels : ch[i - 1];
      nn::Sequential d;
      d->push_back(nn::ReLU());
      d->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1)));
      if (i == 0) {
        d->push_back(nn::Tanh());
      } else {
        d->push_back(inorm(out));
      }
      decoders_->push_back(d);
    }
  }

 protected:
  torch::Tensor forward_impl(const torch::Tensor& x) override {
    std::vector<torch::Tensor> skips;
    auto h = x;
    for (const auto& e : *encoders_) {
      h = e->as<nn::Sequential>()->forward(h);
      skips.push_back(h);
    }
    const auto levels = static_cast<std::int64_t>(skips.size());
    h = decoders_[levels - 1]->as<nn::Sequential>()->forward(skips.back());
    for (std::int64_t i = levels - 2; i >= 0; --i) {
      h = decoders_[i]->as<nn::Sequential>()->forward(torch::cat({h, skips[i]}, 1));
    }
    return h;
  }

 private:
  nn::ModuleList encoders_{nullptr};
  nn::ModuleList decoders_{nullptr};
};

// ---------------------------------------------------------------------------
// GANILLA generator: residual stages whose output is concatenated with the
// (projected) stage input and fused; the decoder upsamples with nearest
// neighbour and sums lateral projections of every stage output.

struct GanillaBlockImpl : nn::Module {
  GanillaBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride) {
    main = register_module("main", nn::Sequential(conv(in, out, 3, stride, 1), inorm(out), nn::ReLU(),
                                                  conv(out, out, 3, 1, 1), inorm(out)));
    if (stride != 1 || in != out) {
      shortcut = register_module("shortcut", nn::Sequential(conv(in, out, 1, stride), inorm(out)));
    }
    fuse = register_module("fuse", nn::Sequential(conv(2 * out, out, 3, 1, 1), inorm(out), nn::ReLU()));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    const auto skip = shortcut ? shortcut->forward(x) : x;
    const auto y = torch::relu(main->forward(x) + skip);
    return fuse->forward(torch::cat({y, skip}, 1));
  }
  nn::Sequential main{nullptr};
  nn::Sequential shortcut{nullptr};
  nn::Sequential fuse{nullptr};
};
TORCH_MODULE(GanillaBlock);

class GanillaGenerator final : public GeneratorImpl {
 public:
  explicit GanillaGenerator(const GeneratorSpec& spec) : GeneratorImpl(spec) {
    const auto w = spec.base_width;
    const auto up_width = 2 * w;
    stem_ = register_module(
        "stem", nn::Sequential(nn::ReflectionPad2d(3), conv(spec.in_channels, w, 7), inorm(w),
                               nn::ReLU(),
                               nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1))));
    stages_ = register_module("stages", nn::ModuleList());
    laterals_ = register_module("laterals", nn::ModuleList());
    std::int64_t in = w;
    for (std::int64_t s = 0; s < spec.depth; ++s) {
      const auto out = w << s;
      stages_->push_back(GanillaBlock(in, out, s == 0 ? 1 : 2));
      laterals_->push_back(conv(out, up_width, 1));
      in = out;
    }
    head_ = register_module("head", nn::Sequential(nn::ReflectionPad2d(3),
                                                   conv(up_width, spec.out_channels, 7), nn::Tanh()));
  }

 protected:
  torch::Tensor forward_impl(const torch::Tensor& x) override {
    std::vector<torch::Tensor> features;
    auto h = stem_->forward(x);
    for (const auto& stage : *stages_) {
      h = stage->as<GanillaBlockImpl>()->forward(h);
      features.push_back(h);
    }
    auto up = laterals_[features.size() - 1]->as<nn::Conv2d>()->forward(features.back());
    for (auto s = static_cast<std::int64_t>(features.size()) - 2; s >= 0; --s) {
      up = upsample(up) + laterals_[s]->as<nn::Conv2d>()->forward(features[s]);
    }
    return head_->forward(upsample(up));
  }

 private:
  static torch::Tensor upsample(const torch::Tensor& t) {
    return torch::nn::functional::interpolate(
        t, torch::nn::functional::InterpolateFuncOptions()
               .scale_factor(std::vector<double>{2.0, 2.0})
               .mode(torch::kNearest));
  }

  nn::Sequential stem_{nullptr};
  nn::ModuleList stages_{nullptr};
  nn::ModuleList laterals_{nullptr};
  nn::Sequential head_{nullptr};
};

void init_weights(torch::nn::Module& module, std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto& p : module.parameters()) {
    if (p.dim() > 1) {
      p.normal_(0.0, 0.02, gen);
    } else {
      p.zero_();
    }
  }
}

}  // namespace

std::int64_t receptive_field(std::span<const ConvGeometry> layers) {
  std::int64_t field = 1;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    field = (field - 1) * it->stride + it->kernel;
  }
  return field;
}

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorSpec spec) : spec_(spec) {
  spec_.validate();
  const auto w = spec_.base_width;
  const bool fc = spec_.kind == DiscriminatorKind::kPatchGan70Fc;
  geometry_ = {{4, 2, 1}, {4, 2, 1}, {4, 2, 1}, {4, 1, 1}, {4, 1, 1}};
  const std::vector<std::int64_t> widths = {spec_.in_channels, w, 2 * w, 4 * w, 8 * w, fc ? w : 1};
  nn::Sequential body;
  for (std::size_t i = 0; i < geometry_.size(); ++i) {
    const auto& g = geometry_[i];
    body->push_back(conv(widths[i], widths[i + 1], g.kernel, g.stride, g.padding));
    const bool last = i + 1 == geometry_.size();
    if (!last) {
      if (i > 0) body->push_back(inorm(widths[i + 1]));
      body->push_back(lrelu());
    } else if (fc) {
      body->push_back(lrelu());
    }
  }
  body_ = register_module("body", body);
  if (fc) {
    head_ = register_module("head", nn::Linear(w, 1));
  }
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw DimensionError("discriminator expects N x " + std::to_string(spec_.in_channels) +
                         " x H x W input");
  }
  if (x.size(2) < 32 || x.size(3) < 32) {
    throw DimensionError("discriminator input must be at least 32x32");
  }
  auto h = body_->forward(x);
  if (head_) {
    h = head_->forward(h.mean({2, 3}));
  }
  return h;
}

Generator build_generator(const GeneratorSpec& spec, std::uint64_t seed) {
  spec.validate();
  Generator g;
  switch (spec.kind) {
    case GeneratorKind::kResnetCycleGan: g = std::make_shared<ResnetGenerator>(spec); break;
    case GeneratorKind::kUnetDualGan: g = std::make_shared<UnetGenerator>(spec); break;
    case GeneratorKind::kGanilla: g = std::make_shared<GanillaGenerator>(spec); break;
  }
  init_weights(*g, seed);
  return g;
}

Discriminator build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed) {
  auto d = std::make_shared<DiscriminatorImpl>(spec);
  init_weights(*d, seed);
  return d;
}

torch::Tensor translate(GeneratorImpl& generator, const torch::Tensor& batch) {
  torch::NoGradGuard no_grad;
  return generator.forward(batch);
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) {
    n += p.numel();
  }
  return n;
}

std::uint64_t parameter_checksum(const torch::nn::Module& module) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto& p : module.parameters()) {
    const auto c = p.detach().to(torch::kCPU).contiguous();
    hash = fnv1a(std::span(static_cast<const std::byte*>(c.data_ptr()), c.nbytes()), hash);
  }
  return hash;
}

TranslatorPair make_translator_pair(const GeneratorSpec& generator_spec,
                                    const DiscriminatorSpec& discriminator_spec,
                                    std::uint64_t seed) {
  TranslatorPair pair{generator_spec, discriminator_spec, nullptr, nullptr, nullptr, nullptr};
  pair.g_xy = build_generator(generator_spec, mix_seed(seed, 0));
  pair.g_yx = build_generator(generator_spec, mix_seed(seed, 1));
  pair.d_y = build_discriminator(discriminator_spec, mix_seed(seed, 2));
  pair.d_x = build_discriminator(discriminator_spec, mix_seed(seed, 3));
  return pair;
}

}  // namespace muse2he
