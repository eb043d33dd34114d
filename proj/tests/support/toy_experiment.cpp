#include "toy_experiment.hpp"

#include <chrono>

#include "muse2he/hashing.hpp"
#include "muse2he/losses.hpp"
#include "toy_domains.hpp"

namespace muse2he::toy {

namespace {

std::vector<Raster> translate_all(GeneratorImpl& g, const TileDataset& ds) {
  std::vector<Raster> out;
  out.reserve(ds.size());
  for (const auto& tile : ds.tiles) {
    const auto y = translate(g, to_tensor(normalize(tile)));
    out.push_back(denormalize(from_tensor(y, PixelDepth::kSignedFloat)).raster);
  }
  return out;
}

std::uint64_t test_seed(std::uint64_t seed, std::uint64_t stream) { return mix_seed(seed ^ 0x7e57, stream); }

}  // namespace

TrainConfig toy_config(const ToySetup& setup) {
  TrainConfig c;
  c.generator = GeneratorSpec::defaults(GeneratorKind::kResnetCycleGan);
  c.generator.base_width = setup.base_width;
  c.generator.depth = setup.residual_blocks;
  c.discriminator.base_width = setup.discriminator_width;
  c.total_epochs = setup.epochs;
  c.fixed_lr_epochs = setup.epochs / 2;
  c.base_lr = setup.base_lr;
  c.crop_size = 64;
  c.seed = setup.seed;
  c.require_inverted_x = setup.inverted;
  c.checkpoint_every = setup.epochs;
  return c;
}

ToyOutcome run_toy(const ToySetup& setup, TranslatorPair* trained) {
  const auto config = toy_config(setup);
  const auto x_train = make_x_dataset(setup.train_tiles, mix_seed(setup.seed, 11), setup.inverted);
  const auto y_train = make_y_dataset(setup.train_tiles, mix_seed(setup.seed, 12));
  const auto x_test = make_x_dataset(setup.test_tiles, test_seed(setup.seed, 13), setup.inverted);
  const auto y_test = make_y_dataset(setup.test_tiles, test_seed(setup.seed, 14));

  Trainer trainer(config, make_translator_pair(config.generator, config.discriminator, config.seed));
  const auto start = std::chrono::steady_clock::now();
  const auto result = fit(trainer, x_train, y_train);
  ToyOutcome out;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.steps = trainer.global_step();
  for (const auto& epoch : result.history) out.cycle_by_epoch.push_back(epoch.means.at("cycle"));
  out.train_cycle = out.cycle_by_epoch.back();

  auto& pair = trainer.pair();
  {
    torch::NoGradGuard guard;
    const auto gx = [&](const torch::Tensor& t) { return pair.g_xy->forward(t); };
    const auto gy = [&](const torch::Tensor& t) { return pair.g_yx->forward(t); };
    double total = 0.0;
    for (std::size_t i = 0; i < setup.test_tiles; ++i) {
      total += cycle_loss(gx, gy, to_tensor(normalize(x_test.tiles[i])), to_tensor(normalize(y_test.tiles[i])))
                   .item<double>();
    }
    out.heldout_cycle = total / static_cast<double>(setup.test_tiles);
  }
  out.fakes = translate_all(*pair.g_xy, x_test);
  out.reals = y_test.tiles;
  if (trained) {
    *trained = pair;
  }
  return out;
}

std::vector<Raster> untrained_fakes(const ToySetup& setup) {
  const auto config = toy_config(setup);
  auto pair = make_translator_pair(config.generator, config.discriminator, config.seed);
  return translate_all(*pair.g_xy, make_x_dataset(setup.test_tiles, test_seed(setup.seed, 13), setup.inverted));
}

CriticConfig toy_critic_config(std::uint64_t seed) {
  CriticConfig c;
  c.crop_size = 64;
  c.base_width = 16;
  c.seed = seed;
  return c;
}

}  // namespace muse2he::toy
