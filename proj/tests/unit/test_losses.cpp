#include "doctest_torch.hpp"

#include <cmath>

#include "muse2he/errors.hpp"
#include "muse2he/losses.hpp"
#include "muse2he/models.hpp"
#include "tiny_nets.hpp"

using namespace muse2he;

namespace {

const ImageFn kIdentity = [](const torch::Tensor& t) { return t; };

ImageFn constant(double c) {
  return [c](const torch::Tensor& t) { return torch::full_like(t, c); };
}

// Elementwise mean |a - b| with plain loops.
double mae_loop(const torch::Tensor& a, const torch::Tensor& b) {
  const auto fa = a.contiguous().to(torch::kFloat64).flatten();
  const auto fb = b.contiguous().to(torch::kFloat64).flatten();
  const auto* pa = fa.data_ptr<double>();
  const auto* pb = fb.data_ptr<double>();
  double sum = 0.0;
  for (std::int64_t i = 0; i < fa.numel(); ++i) sum += std::abs(pa[i] - pb[i]);
  return sum / static_cast<double>(fa.numel());
}

struct Fixture {
  tiny::TinyGenerator gxy, gyx;
  torch::Tensor x, y;
  explicit Fixture(std::uint64_t seed) {
    torch::manual_seed(seed);
    gxy = tiny::TinyGenerator();
    gyx = tiny::TinyGenerator();
    x = torch::rand({2, 3, 4, 4}, torch::kFloat64) * 2 - 1;
    y = torch::rand({2, 3, 4, 4}, torch::kFloat64) * 2 - 1;
  }
};

}  // namespace

TEST_CASE("loss weights") {
  LossWeights w;
  CHECK(w.lambda_cycle == 10.0);
  CHECK(w.lambda_identity == 5.0);
  CHECK(w.lambda_recon == 10.0);
  CHECK(w.clip_value == 0.01);
  w.validate();
  w.lambda_identity = -1;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = {};
  w.lambda_cycle = std::nan("");
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = {};
  w.clip_value = 0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("cycle loss examples") {
  const auto x = torch::rand({2, 3, 4, 4});
  const auto y = torch::rand({2, 3, 4, 4});
  CHECK(cycle_loss(kIdentity, kIdentity, x, y).item<double>() == 0.0);

  const auto zeros = torch::zeros({1, 3, 4, 4});
  const auto empty = torch::zeros({0, 3, 4, 4});
  CHECK(cycle_loss(constant(0.3), constant(0.3), zeros, empty).item<double>() == doctest::Approx(0.3).epsilon(1e-7));
  CHECK(cycle_loss(constant(-0.7), constant(-0.7), zeros, empty).item<double>() == doctest::Approx(0.7).epsilon(1e-7));
}

TEST_CASE("cycle, identity and reconstruction match scalar-loop oracles") {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    Fixture f(seed);
    auto gxy = tiny::as_fn(f.gxy), gyx = tiny::as_fn(f.gyx);
    torch::NoGradGuard guard;
    const double cyc = mae_loop(gyx(gxy(f.x)), f.x) + mae_loop(gxy(gyx(f.y)), f.y);
    const double idt = mae_loop(gxy(f.y), f.y) + mae_loop(gyx(f.x), f.x);
    CHECK(std::abs(cycle_loss(gxy, gyx, f.x, f.y).item<double>() - cyc) < 1e-6);
    CHECK(std::abs(identity_loss(gxy, gyx, f.x, f.y).item<double>() - idt) < 1e-6);
    CHECK(std::abs(reconstruction_loss(gxy, gyx, f.x, f.y).item<double>() - cyc) < 1e-6);
    CHECK(reconstruction_loss(gxy, gyx, f.x, f.y).item<double>() == cycle_loss(gxy, gyx, f.x, f.y).item<double>());
  }
}

TEST_CASE("identity loss examples") {
  const auto x = torch::rand({2, 3, 4, 4});
  const auto y = torch::rand({2, 3, 4, 4});
  CHECK(identity_loss(kIdentity, kIdentity, x, y).item<double>() == 0.0);
  const ImageFn plus = [](const torch::Tensor& t) { return t + 0.1; };
  CHECK(identity_loss(plus, kIdentity, x, y).item<double>() == doctest::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("cycle and identity are symmetric under role swap (property)") {
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    Fixture f(seed);
    auto gxy = tiny::as_fn(f.gxy), gyx = tiny::as_fn(f.gyx);
    torch::NoGradGuard guard;
    CHECK(cycle_loss(gxy, gyx, f.x, f.y).item<double>() ==
          doctest::Approx(cycle_loss(gyx, gxy, f.y, f.x).item<double>()).epsilon(1e-12));
    CHECK(identity_loss(gxy, gyx, f.x, f.y).item<double>() ==
          doctest::Approx(identity_loss(gyx, gxy, f.y, f.x).item<double>()).epsilon(1e-12));
    CHECK(cycle_loss(gxy, gyx, f.x, f.y).item<double>() >= 0.0);
    CHECK(identity_loss(gxy, gyx, f.x, f.y).item<double>() >= 0.0);
  }
}

TEST_CASE("shape mismatch raises") {
  const ImageFn shrink = [](const torch::Tensor& t) { return t.narrow(3, 0, 2); };
  const auto x = torch::rand({1, 3, 4, 4});
  CHECK_THROWS_AS(cycle_loss(shrink, kIdentity, x, x), DimensionError);
  CHECK_THROWS_AS(identity_loss(shrink, kIdentity, x, x), DimensionError);
  CHECK_THROWS_AS(l1_mean(torch::zeros({2, 2}), torch::zeros({2, 3})), DimensionError);
  CHECK_THROWS_AS(lsgan_discriminator_loss(torch::zeros({2, 1}), torch::zeros({3, 1})), DimensionError);
}

TEST_CASE("lsgan examples") {
  const auto ones = torch::ones({2, 1, 3, 3});
  const auto zeros = torch::zeros({2, 1, 3, 3});
  const auto half = torch::full({2, 1, 3, 3}, 0.5);
  CHECK(lsgan_discriminator_loss(ones, zeros).item<double>() == 0.0);
  CHECK(lsgan_discriminator_loss(half, half).item<double>() == doctest::Approx(0.25));
  CHECK(lsgan_generator_loss(half).item<double>() == doctest::Approx(0.25));
  CHECK(lsgan_generator_loss(ones).item<double>() == 0.0);
}

TEST_CASE("lsgan d_loss is zero only at the perfect discriminator (property)") {
  torch::manual_seed(3);
  for (int i = 0; i < 20; ++i) {
    const auto real = torch::rand({2, 1, 3, 3}) * 2 - 0.5;
    const auto fake = torch::rand({2, 1, 3, 3}) * 2 - 0.5;
    CHECK(lsgan_discriminator_loss(real, fake).item<double>() > 0.0);
    CHECK(lsgan_generator_loss(fake).item<double>() >= 0.0);
  }
}

TEST_CASE("lsgan gradient routing") {
  torch::manual_seed(0);
  auto g = tiny::TinyGenerator(torch::kFloat32);
  DiscriminatorSpec spec{};
  spec.base_width = 4;
  auto d = build_discriminator(spec, 1);
  const ImageFn dfn = [&](const torch::Tensor& t) { return d->forward(t); };
  const auto real = torch::rand({1, 3, 64, 64});
  const auto fake = g->forward(torch::rand({1, 3, 64, 64}));
  auto losses = lsgan_losses(dfn, real, fake);

  losses.d_loss.backward({}, true);
  CHECK(tiny::flat_grad(*g).abs().sum().item<double>() == 0.0);
  CHECK(tiny::flat_grad(*d).abs().sum().item<double>() > 0.0);

  g->zero_grad();
  d->zero_grad();
  // the generator's objective reaches the generator; the trainer freezes D during this step
  losses.g_loss.backward();
  CHECK(tiny::flat_grad(*g).abs().sum().item<double>() > 0.0);
}

TEST_CASE("cross-entropy variant") {
  const auto big = torch::full({4, 1}, 20.0);
  CHECK(bce_discriminator_loss(big, -big).item<double>() < 1e-6);
  CHECK(bce_generator_loss(torch::zeros({4, 1})).item<double>() == doctest::Approx(std::log(2.0)));
  CHECK(discriminator_loss(AdversarialMode::kCrossEntropy, big, -big).item<double>() ==
        bce_discriminator_loss(big, -big).item<double>());
  CHECK(generator_adversarial_loss(AdversarialMode::kLeastSquares, big).item<double>() ==
        lsgan_generator_loss(big).item<double>());
}

TEST_CASE("wasserstein examples") {
  const auto k = torch::full({3, 1}, 0.7);
  CHECK(wasserstein_critic_loss(k, k).item<double>() == 0.0);
  CHECK(wasserstein_generator_loss(k).item<double>() == doctest::Approx(-0.7));
  const auto real = torch::tensor({1.0, 3.0}).view({2, 1});
  const auto fake = torch::tensor({-2.0, 0.0}).view({2, 1});
  CHECK(wasserstein_critic_loss(real, fake).item<double>() == doctest::Approx(-3.0));
  const ImageFn critic = [](const torch::Tensor& t) { return t.mean({1, 2, 3}).unsqueeze(1); };
  const auto wl = wasserstein_losses(critic, torch::full({2, 3, 4, 4}, 2.0), torch::full({2, 3, 4, 4}, -1.0));
  CHECK(wl.d_loss.item<double>() == doctest::Approx(-3.0));
  CHECK(wl.g_loss.item<double>() == doctest::Approx(1.0));
}

TEST_CASE("weight clipping bounds every parameter") {
  DiscriminatorSpec spec{};
  spec.base_width = 8;
  auto d = build_discriminator(spec, 2);
  {
    torch::NoGradGuard guard;
    for (auto& p : d->parameters()) p.uniform_(-1, 1);
  }
  clip_parameters(*d, 0.01);
  for (const auto& p : d->parameters()) CHECK(p.abs().max().item<double>() <= 0.01);
}

TEST_CASE("cycle + identity gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto check = tiny::check_cycle_identity_gradients(seed);  // 4x4x3, h = 1e-3
    CAPTURE(seed);
    CHECK(check.parameters <= 1000);
    CHECK(check.relative_error < 1e-3);
  }
}

TEST_CASE("gradients at 8x8x3 with a step small enough to miss the L1 kinks") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CAPTURE(seed);
    CHECK(tiny::check_cycle_identity_gradients(seed, 1e-5, 8, 2).relative_error < 1e-3);
  }
}
