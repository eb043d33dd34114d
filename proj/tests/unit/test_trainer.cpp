#include "doctest_torch.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "muse2he/errors.hpp"
#include "muse2he/trainer.hpp"
#include "toy_domains.hpp"

using namespace muse2he;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(std::int64_t epochs = 4) {
  TrainConfig c;
  c.generator = GeneratorSpec::defaults(GeneratorKind::kResnetCycleGan);
  c.generator.base_width = 4;
  c.generator.depth = 1;
  c.discriminator.base_width = 4;
  c.total_epochs = epochs;
  c.fixed_lr_epochs = epochs / 2;
  c.crop_size = 32;
  c.seed = 21;
  c.pool_size = 3;
  c.checkpoint_every = 2;
  return c;
}

TrainConfig tiny_dualgan() {
  auto c = tiny_config();
  c.generator = GeneratorSpec::defaults(GeneratorKind::kUnetDualGan);
  c.generator.base_width = 4;
  c.generator.depth = 3;
  return c;
}

Trainer make_trainer(const TrainConfig& c) {
  return Trainer(c, make_translator_pair(c.generator, c.discriminator, c.seed));
}

torch::Tensor batch(std::uint64_t seed, std::int64_t n = 1, std::int64_t size = 32) {
  torch::manual_seed(seed);
  return torch::rand({n, 3, size, size}) * 2 - 1;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("muse2he_tr_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::uint64_t generators_checksum(const TranslatorPair& p) {
  return parameter_checksum(*p.g_xy) ^ (parameter_checksum(*p.g_yx) * 31);
}

std::uint64_t discriminators_checksum(const TranslatorPair& p) {
  return parameter_checksum(*p.d_x) ^ (parameter_checksum(*p.d_y) * 31);
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

const auto kX = toy::make_x_dataset(4, 1, true, 32);
const auto kY = toy::make_y_dataset(3, 2, 32);

}  // namespace

TEST_CASE("lr schedule examples") {
  TrainConfig c;
  CHECK(lr_at(c, 0) == 2e-4);
  CHECK(lr_at(c, 99) == 2e-4);
  CHECK(lr_at(c, 100) == 2e-4);
  CHECK(lr_at(c, 150) == 1e-4);
  CHECK(lr_at(c, 199) == 2e-6);
  CHECK(lr_at(c, 200) == 0.0);
  CHECK_THROWS_AS(lr_at(c, -1), ArgumentError);
  CHECK_THROWS_AS(lr_at(c, 201), ArgumentError);
}

TEST_CASE("lr schedule is continuous and nonincreasing (property)") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    TrainConfig c;
    c.total_epochs = std::uniform_int_distribution<std::int64_t>(1, 300)(rng);
    c.fixed_lr_epochs = std::uniform_int_distribution<std::int64_t>(0, c.total_epochs)(rng);
    c.base_lr = std::uniform_real_distribution<double>(1e-5, 1e-2)(rng);
    double prev = lr_at(c, 0);
    CHECK(prev == (c.fixed_lr_epochs > 0 ? c.base_lr : (c.total_epochs > 0 ? c.base_lr : 0.0)));
    for (std::int64_t e = 1; e <= c.total_epochs; ++e) {
      const double lr = lr_at(c, e);
      CHECK(lr <= prev);
      CHECK(lr >= 0.0);
      prev = lr;
    }
    CHECK(lr_at(c, c.total_epochs) == 0.0);
    if (c.fixed_lr_epochs < c.total_epochs) {
      CHECK(lr_at(c, c.fixed_lr_epochs) == c.base_lr);
    }
  }
}

TEST_CASE("train config validation and JSON") {
  auto c = tiny_config();
  CHECK(TrainConfig::from_json(c.to_json()).hash() == c.hash());
  auto bad = c;
  bad.fixed_lr_epochs = c.total_epochs + 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.base_lr = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  auto j = c.to_json();
  j["learning_rate"] = 1;
  CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);
  auto other = c;
  other.seed += 1;
  CHECK(other.hash() != c.hash());
}

TEST_CASE("image pool") {
  ImagePool pool(3, 8);
  SUBCASE("returns fresh images until full, never exceeds capacity") {
    for (int i = 0; i < 3; ++i) {
      const auto img = torch::full({1, 3, 2, 2}, static_cast<float>(i));
      CHECK(torch::equal(pool.query(img), img));
      CHECK(pool.size() == static_cast<std::size_t>(i + 1));
    }
    std::set<float> seen{0, 1, 2};
    int swaps = 0;
    for (int i = 3; i < 200; ++i) {
      const auto img = torch::full({1, 3, 2, 2}, static_cast<float>(i));
      const float got = pool.query(img)[0][0][0][0].item<float>();
      CHECK(pool.size() == 3);
      CHECK((seen.contains(got) || got == static_cast<float>(i)));
      if (got != static_cast<float>(i)) {
        ++swaps;
        seen.erase(got);
      }
      seen.insert(static_cast<float>(i));
    }
    // 197 fair coin flips
    CHECK(swaps > 60);
    CHECK(swaps < 137);
  }
  SUBCASE("batches are handled per image") {
    const auto imgs = batch(1, 5, 4);
    const auto out = pool.query(imgs);
    CHECK(out.sizes() == imgs.sizes());
    CHECK(pool.size() == 3);
    CHECK(torch::equal(out.narrow(0, 0, 3), imgs.narrow(0, 0, 3)));
  }
  SUBCASE("capacity zero is a passthrough") {
    ImagePool none(0);
    const auto imgs = batch(2, 2, 4);
    CHECK(torch::equal(none.query(imgs), imgs));
    CHECK(none.size() == 0);
  }
  SUBCASE("save and load") {
    const auto dir = scratch("pool");
    pool.query(batch(3, 4, 4));
    pool.save(dir / "pool.pt");
    ImagePool copy(3, 0);
    copy.load(dir / "pool.pt");
    CHECK(copy.size() == pool.size());
    const auto probe = batch(4, 6, 4);
    CHECK(torch::equal(copy.query(probe), pool.query(probe)));
  }
}

TEST_CASE("smoke run: ten finite steps at 64x64") {
  auto c = tiny_config();
  c.crop_size = 64;
  auto trainer = make_trainer(c);
  for (int i = 0; i < 10; ++i) {
    const auto m = trainer.train_step(batch(100 + i, 1, 64), batch(200 + i, 1, 64));
    for (const char* key : {"g_total", "g_adv", "cycle", "identity", "d_y", "d_x"}) {
      REQUIRE(m.contains(key));
      CHECK(std::isfinite(m.at(key)));
    }
  }
  CHECK(trainer.global_step() == 10);
  CHECK(trainer.generator_updates() == 10);
}

TEST_CASE("zero loss weights leave the generators unchanged") {
  auto c = tiny_config();
  c.loss_weights.lambda_adv = 0;
  c.loss_weights.lambda_cycle = 0;
  c.loss_weights.lambda_identity = 0;
  auto trainer = make_trainer(c);
  const auto g_before = generators_checksum(trainer.pair());
  const auto d_before = discriminators_checksum(trainer.pair());
  for (int i = 0; i < 3; ++i) trainer.train_step(batch(i), batch(10 + i));
  CHECK(generators_checksum(trainer.pair()) == g_before);
  // the discriminator step still learns, and does not touch the generators
  CHECK(discriminators_checksum(trainer.pair()) != d_before);
}

TEST_CASE("generator and discriminator optimizers own disjoint parameters") {
  auto trainer = make_trainer(tiny_config());
  const auto& pair = trainer.pair();
  const auto ids = [](const torch::optim::Adam& opt) {
    std::set<const void*> out;
    for (const auto& group : opt.param_groups())
      for (const auto& p : group.params()) out.insert(p.unsafeGetTensorImpl());
    return out;
  };
  const auto owned = [](std::initializer_list<const torch::nn::Module*> mods) {
    std::set<const void*> out;
    for (const auto* m : mods)
      for (const auto& p : m->parameters()) out.insert(p.unsafeGetTensorImpl());
    return out;
  };
  CHECK(ids(trainer.generator_optimizer()) == owned({pair.g_xy.get(), pair.g_yx.get()}));
  CHECK(ids(trainer.discriminator_optimizer()) == owned({pair.d_x.get(), pair.d_y.get()}));
}

TEST_CASE("dualgan performs n_critic critic updates per generator update") {
  auto c = tiny_dualgan();
  c.n_critic = 5;
  auto trainer = make_trainer(c);
  for (int i = 0; i < 3; ++i) {
    const auto m = trainer.train_step(batch(i), batch(50 + i));
    CHECK(m.contains("recon"));
    CHECK(std::isfinite(m.at("recon")));
  }
  CHECK(trainer.generator_updates() == 3);
  CHECK(trainer.critic_updates() == 15);
  for (const auto* d : {trainer.pair().d_x.get(), trainer.pair().d_y.get()}) {
    for (const auto& p : d->parameters()) CHECK(p.abs().max().item<double>() <= c.loss_weights.clip_value);
  }
}

TEST_CASE("non-finite losses abort with a snapshot") {
  auto trainer = make_trainer(tiny_config());
  auto x = batch(1);
  x[0][0][0][0] = std::nanf("");
  try {
    trainer.train_step(x, batch(2));
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.snapshot.contains("config"));
    CHECK(e.snapshot.contains("step"));
    CHECK(e.snapshot.contains("losses"));
  }
}

TEST_CASE("fit preconditions") {
  auto trainer = make_trainer(tiny_config());
  CHECK_THROWS_AS(fit(trainer, TileDataset{Domain::kMuse, {}, "", true}, kY), ConfigError);
  CHECK_THROWS_AS(fit(trainer, toy::make_x_dataset(2, 1, false, 32), kY), ConfigError);
  auto c = tiny_config();
  c.require_inverted_x = false;
  c.total_epochs = 1;
  c.fixed_lr_epochs = 0;
  auto ablation = make_trainer(c);
  CHECK(fit(ablation, toy::make_x_dataset(2, 1, false, 32), kY).epochs_completed == 1);
}

TEST_CASE("fit runs every epoch, checkpoints, and logs metrics") {
  const auto dir = scratch("fit");
  auto c = tiny_config(4);
  auto trainer = make_trainer(c);
  std::vector<std::int64_t> seen;
  FitOptions options{dir / "ckpt", dir / "metrics.jsonl", std::nullopt,
                     [&](const EpochRecord& r) { seen.push_back(r.epoch); }};
  const auto result = fit(trainer, kX, kY, options);
  CHECK(result.epochs_completed == c.total_epochs);
  CHECK(seen == std::vector<std::int64_t>{1, 2, 3, 4});
  REQUIRE(result.history.size() == 4);
  // one epoch is a pass over the larger set (4 tiles)
  CHECK(trainer.global_step() == 16);
  CHECK(result.final_checkpoint == dir / "ckpt" / "final");
  for (const char* sub : {"final", "best", "epoch_0002", "epoch_0004"}) {
    CHECK(fs::exists(dir / "ckpt" / sub / "manifest.json"));
  }
  CHECK_FALSE(fs::exists(dir / "ckpt" / "epoch_0001"));
  const auto lines = read_lines(dir / "metrics.jsonl");
  CHECK(lines.size() == 16 * 7);
  const auto first = nlohmann::json::parse(lines.front());
  for (const char* key : {"epoch", "step", "loss", "value"}) CHECK(first.contains(key));
  CHECK(trainer.current_lr() == lr_at(c, 3));
}

TEST_CASE("identical seeds give identical metric sequences") {
  auto a = make_trainer(tiny_config(2));
  auto b = make_trainer(tiny_config(2));
  const auto ra = fit(a, kX, kY);
  const auto rb = fit(b, kX, kY);
  REQUIRE(ra.history.size() == rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) CHECK(ra.history[i].means == rb.history[i].means);
  CHECK(generators_checksum(a.pair()) == generators_checksum(b.pair()));
}

TEST_CASE("resume reproduces the uninterrupted run") {
  const auto dir = scratch("resume");
  auto c = tiny_config(6);
  c.checkpoint_every = 6;

  auto straight = make_trainer(c);
  const auto full = fit(straight, kX, kY, FitOptions{{}, dir / "straight.jsonl", std::nullopt, {}});

  auto first = make_trainer(c);
  const auto head = fit(first, kX, kY, FitOptions{dir / "ckpt", dir / "split.jsonl", 3, {}});
  CHECK(head.epochs_completed == 3);
  CHECK(fs::exists(dir / "ckpt" / "latest" / "manifest.json"));

  auto resumed = Trainer::resume(dir / "ckpt" / "latest", c);
  CHECK(resumed.epoch() == 3);
  const auto tail = fit(resumed, kX, kY, FitOptions{dir / "ckpt", dir / "split.jsonl", std::nullopt, {}});
  CHECK(tail.epochs_completed == 6);

  REQUIRE(tail.history.size() == full.history.size());
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    CAPTURE(i);
    CHECK(tail.history[i].means == full.history[i].means);
  }
  CHECK(read_lines(dir / "split.jsonl") == read_lines(dir / "straight.jsonl"));
  CHECK(generators_checksum(resumed.pair()) == generators_checksum(straight.pair()));
  CHECK(discriminators_checksum(resumed.pair()) == discriminators_checksum(straight.pair()));

  SUBCASE("a different config is refused") {
    auto other = c;
    other.base_lr = 1e-3;
    CHECK_THROWS_AS(Trainer::resume(dir / "ckpt" / "latest", other), ConfigError);
  }
}

TEST_CASE("dualgan fit also resumes exactly") {
  const auto dir = scratch("resume_dual");
  auto c = tiny_dualgan();
  c.total_epochs = 2;
  c.fixed_lr_epochs = 1;
  auto straight = make_trainer(c);
  const auto full = fit(straight, kX, kY);
  auto first = make_trainer(c);
  fit(first, kX, kY, FitOptions{dir, {}, 1, {}});
  auto resumed = Trainer::resume(dir / "latest", c);
  const auto tail = fit(resumed, kX, kY);
  CHECK(tail.history.back().means == full.history.back().means);
  CHECK(resumed.critic_updates() == straight.critic_updates());
}
