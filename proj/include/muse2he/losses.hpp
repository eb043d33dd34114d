#pragma once

#include <functional>

#include <torch/torch.h>

namespace muse2he {

/// Any image-to-image map over N x C x H x W batches (a generator, or a test double).
using ImageFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// Weights of the composite generator objective.
struct LossWeights {
  double lambda_adv = 1.0;
  double lambda_cycle = 10.0;
  double lambda_identity = 5.0;
  double lambda_recon = 10.0;  // DualGAN
  double clip_value = 0.01;    // Wasserstein critic weight clipping

  /// All weights finite and >= 0, clip_value > 0; throws ConfigError otherwise.
  void validate() const;
};

enum class AdversarialMode { kLeastSquares, kCrossEntropy };

/// Mean absolute error over every element; 0 when both tensors are empty.
torch::Tensor l1_mean(const torch::Tensor& a, const torch::Tensor& b);

/// E|g_yx(g_xy(x)) - x| + E|g_xy(g_yx(y)) - y|.
torch::Tensor cycle_loss(const ImageFn& g_xy, const ImageFn& g_yx, const torch::Tensor& x,
                         const torch::Tensor& y);

/// Same quantity from already-computed round trips.
torch::Tensor cycle_loss_from(const torch::Tensor& reconstructed_x, const torch::Tensor& x,
                              const torch::Tensor& reconstructed_y, const torch::Tensor& y);

/// E|g_xy(y) - y| + E|g_yx(x) - x|: each generator is fed the domain it should leave alone.
torch::Tensor identity_loss(const ImageFn& g_xy, const ImageFn& g_yx, const torch::Tensor& x,
                            const torch::Tensor& y);

/// DualGAN's reconstruction term; numerically the cycle loss.
torch::Tensor reconstruction_loss(const ImageFn& g_xy, const ImageFn& g_yx, const torch::Tensor& x,
                                  const torch::Tensor& y);

struct AdversarialLosses {
  torch::Tensor d_loss;
  torch::Tensor g_loss;
};

// Score-level objectives. `d_fake` passed to a discriminator loss is expected to be
// computed from detached fakes.
torch::Tensor lsgan_discriminator_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);
torch::Tensor lsgan_generator_loss(const torch::Tensor& d_fake);
torch::Tensor bce_discriminator_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);
torch::Tensor bce_generator_loss(const torch::Tensor& d_fake);
torch::Tensor wasserstein_critic_loss(const torch::Tensor& c_real, const torch::Tensor& c_fake);
torch::Tensor wasserstein_generator_loss(const torch::Tensor& c_fake);

torch::Tensor discriminator_loss(AdversarialMode mode, const torch::Tensor& d_real,
                                 const torch::Tensor& d_fake);
torch::Tensor generator_adversarial_loss(AdversarialMode mode, const torch::Tensor& d_fake);

/// d_loss = 1/2 E[(d(real) - 1)^2] + 1/2 E[d(fake)^2], g_loss = E[(d(fake) - 1)^2].
/// d_loss is computed on detached fakes so its gradient reaches only the discriminator.
AdversarialLosses lsgan_losses(const ImageFn& d, const torch::Tensor& real, const torch::Tensor& fake);

/// c_loss = E[critic(fake)] - E[critic(real)], g_loss = -E[critic(fake)].
AdversarialLosses wasserstein_losses(const ImageFn& critic, const torch::Tensor& real,
                                     const torch::Tensor& fake);

/// Clamps every parameter of `module` into [-clip_value, clip_value].
void clip_parameters(torch::nn::Module& module, double clip_value);

}  // namespace muse2he
