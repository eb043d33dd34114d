#include "muse2he/losses.hpp"

#include <cmath>

#include "muse2he/errors.hpp"

namespace muse2he {

void LossWeights::validate() const {
  for (double w : {lambda_adv, lambda_cycle, lambda_identity, lambda_recon}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw ConfigError("loss weights must be finite and nonnegative");
    }
  }
  if (!std::isfinite(clip_value) || clip_value <= 0.0) {
    throw ConfigError("clip_value must be positive");
  }
}

torch::Tensor l1_mean(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) {
    throw DimensionError("L1 operands differ in shape");
  }
  if (a.numel() == 0) {
    return torch::zeros({}, a.options());
  }
  return (a - b).abs().mean();
}

torch::Tensor cycle_loss_from(const torch::Tensor& reconstructed_x, const torch::Tensor& x,
                              const torch::Tensor& reconstructed_y, const torch::Tensor& y) {
  return l1_mean(reconstructed_x, x) + l1_mean(reconstructed_y, y);
}

namespace {

// Empty batches contribute nothing and are never fed to a network.
torch::Tensor round_trip_term(const ImageFn& first, const ImageFn& second, const torch::Tensor& v) {
  if (v.numel() == 0) {
    return torch::zeros({}, v.options());
  }
  return l1_mean(second(first(v)), v);
}

torch::Tensor identity_term(const ImageFn& g, const torch::Tensor& v) {
  if (v.numel() == 0) {
    return torch::zeros({}, v.options());
  }
  return l1_mean(g(v), v);
}

}  // namespace

torch::Tensor cycle_loss(const ImageFn& g_xy, const ImageFn& g_yx, const torch::Tensor& x,
                         const torch::Tensor& y) {
  return round_trip_term(g_xy, g_yx, x) + round_trip_term(g_yx, g_xy, y);
}

torch::Tensor identity_loss(const ImageFn& g_xy, const ImageFn& g_yx, const torch::Tensor& x,
                            const torch::Tensor& y) {
  return identity_term(g_xy, y) + identity_term(g_yx, x);
}

torch::Tensor reconstruction_loss(const ImageFn& g_xy, const ImageFn& g_yx, const torch::Tensor& x,
                                  const torch::Tensor& y) {
  return cycle_loss(g_xy, g_yx, x, y);
}

namespace {

void require_same_shape(const torch::Tensor& real_out, const torch::Tensor& fake_out) {
  if (real_out.sizes() != fake_out.sizes()) {
    throw DimensionError("discriminator outputs for real and fake differ in shape");
  }
}

}  // namespace

torch::Tensor lsgan_discriminator_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  require_same_shape(d_real, d_fake);
  return 0.5 * (d_real - 1.0).square().mean() + 0.5 * d_fake.square().mean();
}

torch::Tensor lsgan_generator_loss(const torch::Tensor& d_fake) {
  return (d_fake - 1.0).square().mean();
}

torch::Tensor bce_discriminator_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  require_same_shape(d_real, d_fake);
  namespace F = torch::nn::functional;
  return 0.5 * (F::binary_cross_entropy_with_logits(d_real, torch::ones_like(d_real)) +
                F::binary_cross_entropy_with_logits(d_fake, torch::zeros_like(d_fake)));
}

torch::Tensor bce_generator_loss(const torch::Tensor& d_fake) {
  return torch::nn::functional::binary_cross_entropy_with_logits(d_fake, torch::ones_like(d_fake));
}

torch::Tensor wasserstein_critic_loss(const torch::Tensor& c_real, const torch::Tensor& c_fake) {
  require_same_shape(c_real, c_fake);
  return c_fake.mean() - c_real.mean();
}

torch::Tensor wasserstein_generator_loss(const torch::Tensor& c_fake) { return -c_fake.mean(); }

torch::Tensor discriminator_loss(AdversarialMode mode, const torch::Tensor& d_real,
                                 const torch::Tensor& d_fake) {
  return mode == AdversarialMode::kLeastSquares ? lsgan_discriminator_loss(d_real, d_fake)
                                                : bce_discriminator_loss(d_real, d_fake);
}

torch::Tensor generator_adversarial_loss(AdversarialMode mode, const torch::Tensor& d_fake) {
  return mode == AdversarialMode::kLeastSquares ? lsgan_generator_loss(d_fake)
                                                : bce_generator_loss(d_fake);
}

AdversarialLosses lsgan_losses(const ImageFn& d, const torch::Tensor& real, const torch::Tensor& fake) {
  if (real.sizes() != fake.sizes()) {
    throw DimensionError("real and fake batches differ in shape");
  }
  return {lsgan_discriminator_loss(d(real), d(fake.detach())), lsgan_generator_loss(d(fake))};
}

AdversarialLosses wasserstein_losses(const ImageFn& critic, const torch::Tensor& real,
                                     const torch::Tensor& fake) {
  if (real.sizes() != fake.sizes()) {
    throw DimensionError("real and fake batches differ in shape");
  }
  return {wasserstein_critic_loss(critic(real), critic(fake.detach())),
          wasserstein_generator_loss(critic(fake))};
}

void clip_parameters(torch::nn::Module& module, double clip_value) {
  torch::NoGradGuard no_grad;
  for (auto& p : module.parameters()) {
    p.clamp_(-clip_value, clip_value);
  }
}

}  // namespace muse2he
