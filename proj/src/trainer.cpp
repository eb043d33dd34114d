#include "muse2he/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "muse2he/checkpoint.hpp"
#include "muse2he/errors.hpp"
#include "muse2he/hashing.hpp"

namespace muse2he {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  generator.validate();
  discriminator.validate();
  loss_weights.validate();
  if (total_epochs < 0 || fixed_lr_epochs < 0 || fixed_lr_epochs > total_epochs) {
    throw ConfigError("need 0 <= fixed_lr_epochs <= total_epochs");
  }
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) {
    throw ConfigError("base_lr must be positive");
  }
  if (batch_size < 1 || crop_size < 1 || pool_size < 0 || n_critic < 1 || checkpoint_every < 1) {
    throw ConfigError("batch_size, crop_size, n_critic, checkpoint_every must be >= 1 and pool_size >= 0");
  }
  if (crop_size % generator.size_multiple() != 0) {
    throw ConfigError("crop_size must be a multiple of " + std::to_string(generator.size_multiple()) +
                      " for " + to_string(generator.kind));
  }
}

json TrainConfig::to_json() const {
  return {{"generator", muse2he::to_json(generator)},
          {"discriminator", muse2he::to_json(discriminator)},
          {"total_epochs", total_epochs},
          {"fixed_lr_epochs", fixed_lr_epochs},
          {"base_lr", base_lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"loss_weights",
           {{"lambda_adv", loss_weights.lambda_adv},
            {"lambda_cycle", loss_weights.lambda_cycle},
            {"lambda_identity", loss_weights.lambda_identity},
            {"lambda_recon", loss_weights.lambda_recon},
            {"clip_value", loss_weights.clip_value}}},
          {"adversarial", adversarial == AdversarialMode::kLeastSquares ? "least_squares" : "cross_entropy"},
          {"crop_size", crop_size},
          {"batch_size", batch_size},
          {"seed", seed},
          {"pool_size", pool_size},
          {"n_critic", n_critic},
          {"checkpoint_every", checkpoint_every},
          {"require_inverted_x", require_inverted_x}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
  reject_unknown(j, {"generator", "discriminator", "total_epochs", "fixed_lr_epochs", "base_lr",
                     "beta1", "beta2", "loss_weights", "adversarial", "crop_size", "batch_size",
                     "seed", "pool_size", "n_critic", "checkpoint_every", "require_inverted_x"},
                 "train config");
  TrainConfig c;
  try {
    if (j.contains("generator")) c.generator = generator_spec_from_json(j["generator"]);
    if (j.contains("discriminator")) c.discriminator = discriminator_spec_from_json(j["discriminator"]);
    c.total_epochs = j.value("total_epochs", c.total_epochs);
    c.fixed_lr_epochs = j.value("fixed_lr_epochs", c.fixed_lr_epochs);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    if (j.contains("loss_weights")) {
      const auto& w = j["loss_weights"];
      reject_unknown(w, {"lambda_adv", "lambda_cycle", "lambda_identity", "lambda_recon", "clip_value"},
                     "loss_weights");
      c.loss_weights.lambda_adv = w.value("lambda_adv", c.loss_weights.lambda_adv);
      c.loss_weights.lambda_cycle = w.value("lambda_cycle", c.loss_weights.lambda_cycle);
      c.loss_weights.lambda_identity = w.value("lambda_identity", c.loss_weights.lambda_identity);
      c.loss_weights.lambda_recon = w.value("lambda_recon", c.loss_weights.lambda_recon);
      c.loss_weights.clip_value = w.value("clip_value", c.loss_weights.clip_value);
    }
    const auto adv = j.value("adversarial", std::string("least_squares"));
    if (adv == "least_squares") {
      c.adversarial = AdversarialMode::kLeastSquares;
    } else if (adv == "cross_entropy") {
      c.adversarial = AdversarialMode::kCrossEntropy;
    } else {
      throw ConfigError("adversarial must be least_squares or cross_entropy");
    }
    c.crop_size = j.value("crop_size", c.crop_size);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.pool_size = j.value("pool_size", c.pool_size);
    c.n_critic = j.value("n_critic", c.n_critic);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.require_inverted_x = j.value("require_inverted_x", c.require_inverted_x);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::hash() const { return hex64(fnv1a(to_json().dump())); }

double lr_at(const TrainConfig& config, std::int64_t epoch) {
  if (epoch < 0 || epoch > config.total_epochs) {
    throw ArgumentError("epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(config.total_epochs) + "]");
  }
  if (epoch == config.total_epochs) {
    return 0.0;
  }
  // the decay starts at base_lr; returning it directly avoids base * n / n rounding
  if (epoch <= config.fixed_lr_epochs) {
    return config.base_lr;
  }
  const auto span = config.total_epochs - config.fixed_lr_epochs;
  return config.base_lr * static_cast<double>(config.total_epochs - epoch) / static_cast<double>(span);
}

// ---------------------------------------------------------------------------
// ImagePool

ImagePool::ImagePool(std::int64_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
  if (capacity < 0) {
    throw ArgumentError("pool capacity must be >= 0");
  }
}

torch::Tensor ImagePool::query(const torch::Tensor& images) {
  if (capacity_ == 0) {
    return images;
  }
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<std::size_t>(images.size(0)));
  for (std::int64_t i = 0; i < images.size(0); ++i) {
    auto image = images[i].detach().clone();
    if (static_cast<std::int64_t>(buffer_.size()) < capacity_) {
      buffer_.push_back(image);
      out.push_back(image);
      continue;
    }
    std::bernoulli_distribution coin(0.5);
    if (coin(rng_)) {
      std::uniform_int_distribution<std::size_t> pick(0, buffer_.size() - 1);
      const auto k = pick(rng_);
      out.push_back(buffer_[k]);
      buffer_[k] = image;
    } else {
      out.push_back(image);
    }
  }
  return torch::stack(out);
}

void ImagePool::save(const fs::path& path) const {
  // torch::save rejects an empty vector, so an empty pool is a missing file
  fs::remove(path);
  if (!buffer_.empty()) {
    torch::save(buffer_, path.string());
  }
  std::ofstream(path.string() + ".rng") << rng_;
}

void ImagePool::load(const fs::path& path) {
  buffer_.clear();
  if (fs::exists(path)) {
    torch::load(buffer_, path.string());
  }
  std::ifstream in(path.string() + ".rng");
  if (in) {
    in >> rng_;
  }
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

std::vector<torch::Tensor> concat_parameters(const torch::nn::Module& a, const torch::nn::Module& b) {
  auto params = a.parameters();
  auto more = b.parameters();
  params.insert(params.end(), more.begin(), more.end());
  return params;
}

void set_requires_grad(torch::nn::Module& module, bool flag) {
  for (auto& p : module.parameters()) {
    p.set_requires_grad(flag);
  }
}

void set_optimizer_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

json history_to_json(const std::vector<EpochRecord>& history) {
  json out = json::array();
  for (const auto& r : history) {
    out.push_back({{"epoch", r.epoch}, {"means", r.means}});
  }
  return out;
}

std::vector<EpochRecord> history_from_json(const json& j) {
  std::vector<EpochRecord> out;
  for (const auto& r : j) {
    out.push_back({r.at("epoch").get<std::int64_t>(), r.at("means").get<StepMetrics>()});
  }
  return out;
}

}  // namespace

Trainer::Trainer(TrainConfig config, TranslatorPair pair)
    : config_(std::move(config)),
      pair_(std::move(pair)),
      pool_x_(config_.pool_size, mix_seed(config_.seed, 10)),
      pool_y_(config_.pool_size, mix_seed(config_.seed, 11)) {
  config_.validate();
  if (!(pair_.generator_spec == config_.generator) || !(pair_.discriminator_spec == config_.discriminator)) {
    throw ConfigError("translator pair architecture differs from the training config");
  }
  lr_ = lr_at(config_, 0);
  const auto options = torch::optim::AdamOptions(lr_).betas({config_.beta1, config_.beta2});
  opt_g_ = std::make_unique<torch::optim::Adam>(concat_parameters(*pair_.g_xy, *pair_.g_yx), options);
  opt_d_ = std::make_unique<torch::optim::Adam>(concat_parameters(*pair_.d_y, *pair_.d_x), options);
}

void Trainer::set_epoch(std::int64_t epoch) {
  lr_ = lr_at(config_, epoch);
  set_optimizer_lr(*opt_g_, lr_);
  set_optimizer_lr(*opt_d_, lr_);
}

bool Trainer::record_epoch(EpochRecord record) {
  epoch_ = record.epoch;
  bool improved = false;
  const auto key = config_.wasserstein() ? "recon" : "cycle";
  if (auto it = record.means.find(key); it != record.means.end()) {
    if (!best_cycle_loss_ || it->second < *best_cycle_loss_) {
      best_cycle_loss_ = it->second;
      improved = true;
    }
  }
  history_.push_back(std::move(record));
  return improved;
}

void Trainer::reseed_pools(std::uint64_t seed) {
  pool_x_.reseed(mix_seed(seed, 0));
  pool_y_.reseed(mix_seed(seed, 1));
}

void Trainer::check_finite(const StepMetrics& metrics) const {
  for (const auto& [name, value] : metrics) {
    if (!std::isfinite(value)) {
      json snapshot = {{"config", config_.to_json()},
                       {"epoch", epoch_},
                       {"step", global_step_},
                       {"losses", json::object()}};
      for (const auto& [n, v] : metrics) {
        snapshot["losses"][n] = std::isfinite(v) ? json(v) : json(std::to_string(v));
      }
      throw TrainingDiverged("non-finite loss '" + name + "' at step " + std::to_string(global_step_),
                             std::move(snapshot));
    }
  }
}

StepMetrics Trainer::train_step(const torch::Tensor& x_batch, const torch::Tensor& y_batch) {
  if (x_batch.dim() != 4 || y_batch.dim() != 4) {
    throw DimensionError("train_step expects N x C x H x W batches");
  }
  auto metrics = config_.wasserstein() ? wasserstein_step(x_batch, y_batch) : cycle_step(x_batch, y_batch);
  metrics["lr"] = lr_;
  ++global_step_;
  check_finite(metrics);
  return metrics;
}

StepMetrics Trainer::cycle_step(const torch::Tensor& x, const torch::Tensor& y) {
  const auto& w = config_.loss_weights;
  auto& g_xy = *pair_.g_xy;
  auto& g_yx = *pair_.g_yx;
  auto& d_y = *pair_.d_y;
  auto& d_x = *pair_.d_x;

  // generators, with the discriminators frozen
  set_requires_grad(d_y, false);
  set_requires_grad(d_x, false);
  opt_g_->zero_grad();
  const auto fake_y = g_xy.forward(x);
  const auto fake_x = g_yx.forward(y);
  const auto cyc = cycle_loss_from(g_yx.forward(fake_y), x, g_xy.forward(fake_x), y);
  auto idt = torch::zeros({});
  if (w.lambda_identity > 0.0) {
    idt = l1_mean(g_xy.forward(y), y) + l1_mean(g_yx.forward(x), x);
  }
  const auto adv = generator_adversarial_loss(config_.adversarial, d_y.forward(fake_y)) +
                   generator_adversarial_loss(config_.adversarial, d_x.forward(fake_x));
  const auto g_total = w.lambda_adv * adv + w.lambda_cycle * cyc + w.lambda_identity * idt;
  g_total.backward();
  opt_g_->step();
  ++generator_updates_;
  set_requires_grad(d_y, true);
  set_requires_grad(d_x, true);

  // discriminators on real images and pooled fakes
  opt_d_->zero_grad();
  const auto pooled_y = pool_y_.query(fake_y.detach());
  const auto pooled_x = pool_x_.query(fake_x.detach());
  const auto loss_dy = discriminator_loss(config_.adversarial, d_y.forward(y), d_y.forward(pooled_y));
  const auto loss_dx = discriminator_loss(config_.adversarial, d_x.forward(x), d_x.forward(pooled_x));
  (loss_dy + loss_dx).backward();
  opt_d_->step();
  ++critic_updates_;

  return {{"g_total", g_total.item<double>()},
          {"g_adv", adv.item<double>()},
          {"cycle", cyc.item<double>()},
          {"identity", idt.item<double>()},
          {"d_y", loss_dy.item<double>()},
          {"d_x", loss_dx.item<double>()}};
}

StepMetrics Trainer::wasserstein_step(const torch::Tensor& x, const torch::Tensor& y) {
  const auto& w = config_.loss_weights;
  auto& g_xy = *pair_.g_xy;
  auto& g_yx = *pair_.g_yx;
  auto& c_y = *pair_.d_y;
  auto& c_x = *pair_.d_x;

  set_requires_grad(c_y, false);
  set_requires_grad(c_x, false);
  opt_g_->zero_grad();
  const auto fake_y = g_xy.forward(x);
  const auto fake_x = g_yx.forward(y);
  const auto recon = cycle_loss_from(g_yx.forward(fake_y), x, g_xy.forward(fake_x), y);
  const auto adv = wasserstein_generator_loss(c_y.forward(fake_y)) +
                   wasserstein_generator_loss(c_x.forward(fake_x));
  const auto g_total = w.lambda_adv * adv + w.lambda_recon * recon;
  g_total.backward();
  opt_g_->step();
  ++generator_updates_;
  set_requires_grad(c_y, true);
  set_requires_grad(c_x, true);

  const auto pooled_y = pool_y_.query(fake_y.detach());
  const auto pooled_x = pool_x_.query(fake_x.detach());
  double loss_cy = 0.0;
  double loss_cx = 0.0;
  for (std::int64_t k = 0; k < config_.n_critic; ++k) {
    opt_d_->zero_grad();
    const auto ly = wasserstein_critic_loss(c_y.forward(y), c_y.forward(pooled_y));
    const auto lx = wasserstein_critic_loss(c_x.forward(x), c_x.forward(pooled_x));
    (ly + lx).backward();
    opt_d_->step();
    clip_parameters(c_y, w.clip_value);
    clip_parameters(c_x, w.clip_value);
    ++critic_updates_;
    loss_cy = ly.item<double>();
    loss_cx = lx.item<double>();
  }

  return {{"g_total", g_total.item<double>()},
          {"g_adv", adv.item<double>()},
          {"recon", recon.item<double>()},
          {"d_y", loss_cy},
          {"d_x", loss_cx}};
}

void Trainer::save(const fs::path& dir) const {
  CheckpointManifest manifest;
  manifest.generator_spec = config_.generator;
  manifest.discriminator_spec = config_.discriminator;
  manifest.seed = config_.seed;
  manifest.epoch = epoch_;
  manifest.train_config_hash = config_.hash();
  manifest.extra = {{"train_config", config_.to_json()},
                    {"global_step", global_step_},
                    {"generator_updates", generator_updates_},
                    {"critic_updates", critic_updates_},
                    {"history", history_to_json(history_)}};
  if (best_cycle_loss_) {
    manifest.extra["best_cycle_loss"] = *best_cycle_loss_;
  }
  fs::create_directories(dir);
  torch::save(*opt_g_, (dir / "opt_g.pt").string());
  torch::save(*opt_d_, (dir / "opt_d.pt").string());
  pool_x_.save(dir / "pool_x.pt");
  pool_y_.save(dir / "pool_y.pt");
  save_checkpoint(pair_, manifest, dir);
}

Trainer Trainer::resume(const fs::path& dir, const TrainConfig& config) {
  const auto manifest = read_checkpoint_manifest(dir);
  if (manifest.train_config_hash != config.hash()) {
    throw ConfigError("refusing to resume: checkpoint was written with training config " +
                      manifest.train_config_hash + ", current config is " + config.hash());
  }
  auto loaded = load_checkpoint(dir, spec_hash(config.generator, config.discriminator));
  Trainer trainer(config, std::move(loaded.pair));
  torch::load(*trainer.opt_g_, (dir / "opt_g.pt").string());
  torch::load(*trainer.opt_d_, (dir / "opt_d.pt").string());
  trainer.pool_x_.load(dir / "pool_x.pt");
  trainer.pool_y_.load(dir / "pool_y.pt");
  const auto& extra = manifest.extra;
  trainer.epoch_ = manifest.epoch;
  trainer.global_step_ = extra.value("global_step", std::int64_t{0});
  trainer.generator_updates_ = extra.value("generator_updates", std::int64_t{0});
  trainer.critic_updates_ = extra.value("critic_updates", std::int64_t{0});
  trainer.history_ = history_from_json(extra.value("history", json::array()));
  if (extra.contains("best_cycle_loss")) {
    trainer.best_cycle_loss_ = extra["best_cycle_loss"].get<double>();
  }
  trainer.set_epoch(std::min(trainer.epoch_, config.total_epochs));
  return trainer;
}

// ---------------------------------------------------------------------------
// MetricsStream

MetricsStream::MetricsStream(const fs::path& path)
    : out_(std::make_shared<std::ofstream>(path, std::ios::app)) {
  if (!*out_) {
    throw ConfigError("cannot open metrics stream " + path.string());
  }
}

void MetricsStream::write(std::int64_t epoch, std::int64_t step, const StepMetrics& metrics) {
  if (!out_) {
    return;
  }
  for (const auto& [name, value] : metrics) {
    *out_ << json{{"epoch", epoch}, {"step", step}, {"loss", name}, {"value", value}}.dump() << "\n";
  }
  out_->flush();
}

// ---------------------------------------------------------------------------
// fit

namespace {

std::vector<torch::Tensor> normalized_tiles(const TileDataset& dataset) {
  std::vector<torch::Tensor> out;
  out.reserve(dataset.size());
  for (const auto& tile : dataset.tiles) {
    if (tile.depth() != PixelDepth::kUint8) {
      throw ConfigError("training tiles must be 8-bit");
    }
    out.push_back(to_tensor(tile) / 127.5 - 1.0);
  }
  return out;
}

// Concatenated shuffles of [0, n) until at least `length` entries.
std::vector<std::size_t> epoch_order(std::size_t n, std::size_t length, std::mt19937_64& rng) {
  std::vector<std::size_t> order;
  std::vector<std::size_t> perm(n);
  while (order.size() < length) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    order.insert(order.end(), perm.begin(), perm.end());
  }
  order.resize(length);
  return order;
}

torch::Tensor crop_batch(const std::vector<torch::Tensor>& tiles, const std::vector<std::size_t>& order,
                         std::size_t begin, std::size_t count, CropSampler& sampler) {
  std::vector<torch::Tensor> crops;
  crops.reserve(count);
  for (std::size_t i = begin; i < begin + count; ++i) {
    const auto& t = tiles[order[i]];
    const auto [row, col] = sampler.sample_origin(t.size(2), t.size(3));
    crops.push_back(t.narrow(2, row, sampler.crop_size()).narrow(3, col, sampler.crop_size()));
  }
  return torch::cat(crops, 0).contiguous();
}

std::string epoch_dir_name(std::int64_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%04lld", static_cast<long long>(epoch));
  return buf;
}

}  // namespace

FitResult fit(Trainer& trainer, const TileDataset& x_tiles, const TileDataset& y_tiles,
              const FitOptions& options) {
  const auto& config = trainer.config();
  if (x_tiles.empty() || y_tiles.empty()) {
    throw ConfigError("both training datasets must be nonempty");
  }
  if (config.require_inverted_x && x_tiles.domain == Domain::kMuse && !x_tiles.inverted) {
    throw ConfigError("the MUSE dataset is not inverted; invert it or disable require_inverted_x");
  }
  const auto xs = normalized_tiles(x_tiles);
  const auto ys = normalized_tiles(y_tiles);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const auto larger = std::max(xs.size(), ys.size());
  const auto steps = (larger + batch - 1) / batch;

  MetricsStream stream;
  if (!options.metrics_path.empty()) {
    stream = MetricsStream(options.metrics_path);
  }

  FitResult result;
  while (trainer.epoch() < config.total_epochs) {
    const auto epoch = trainer.epoch();
    if (options.stop_after_epoch && epoch >= *options.stop_after_epoch) {
      if (!options.checkpoint_dir.empty()) {
        trainer.save(options.checkpoint_dir / "latest");
      }
      break;
    }
    trainer.set_epoch(epoch);
    std::mt19937_64 order_rng(mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    const auto order_x = epoch_order(xs.size(), steps * batch, order_rng);
    const auto order_y = epoch_order(ys.size(), steps * batch, order_rng);
    CropSampler sampler(config.crop_size, mix_seed(config.seed, 2000 + static_cast<std::uint64_t>(epoch)));
    trainer.reseed_pools(mix_seed(config.seed, 3000 + static_cast<std::uint64_t>(epoch)));

    StepMetrics sums;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto x = crop_batch(xs, order_x, s * batch, batch, sampler);
      const auto y = crop_batch(ys, order_y, s * batch, batch, sampler);
      const auto metrics = trainer.train_step(x, y);
      stream.write(epoch + 1, trainer.global_step(), metrics);
      for (const auto& [name, value] : metrics) {
        sums[name] += value;
      }
    }
    EpochRecord record{epoch + 1, {}};
    for (const auto& [name, total] : sums) {
      record.means[name] = total / static_cast<double>(steps);
    }
    const bool improved = trainer.record_epoch(record);
    if (!options.checkpoint_dir.empty()) {
      if (improved) {
        trainer.save(options.checkpoint_dir / "best");
      }
      if (trainer.epoch() % config.checkpoint_every == 0) {
        trainer.save(options.checkpoint_dir / epoch_dir_name(trainer.epoch()));
      }
    }
    if (options.on_epoch) {
      options.on_epoch(record);
    }
  }
  if (trainer.epoch() == config.total_epochs && !options.checkpoint_dir.empty()) {
    const auto dir = options.checkpoint_dir / "final";
    trainer.save(dir);
    result.final_checkpoint = dir;
  }
  result.epochs_completed = trainer.epoch();
  result.history = trainer.history();
  return result;
}

}  // namespace muse2he
