#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "muse2he/data_pipeline.hpp"
#include "muse2he/losses.hpp"
#include "muse2he/models.hpp"

namespace muse2he {

/// Full reproducibility record of one training run.
struct TrainConfig {
  GeneratorSpec generator = GeneratorSpec::defaults(GeneratorKind::kResnetCycleGan);
  DiscriminatorSpec discriminator{};
  std::int64_t total_epochs = 200;
  std::int64_t fixed_lr_epochs = 100;
  double base_lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  LossWeights loss_weights{};
  AdversarialMode adversarial = AdversarialMode::kLeastSquares;
  std::int64_t crop_size = 256;
  std::int64_t batch_size = 1;
  std::uint64_t seed = 0;
  std::int64_t pool_size = 50;
  std::int64_t n_critic = 5;  // Wasserstein regime only
  std::int64_t checkpoint_every = 10;
  /// Refuse to train on a MUSE dataset that has not been inverted.
  bool require_inverted_x = true;

  GeneratorKind model_kind() const { return generator.kind; }
  /// unet_dualgan trains with the Wasserstein critic + reconstruction objective.
  bool wasserstein() const { return generator.kind == GeneratorKind::kUnetDualGan; }

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

/// Two-phase schedule: base_lr while epoch < fixed_lr_epochs, then linear decay to 0 at
/// total_epochs. Throws ArgumentError outside [0, total_epochs].
double lr_at(const TrainConfig& config, std::int64_t epoch);

/// History of generated images fed to the discriminators.
///
/// Until full, every query stores and returns the fresh image. Once full, each image
/// is either returned as-is or, with probability 1/2, swapped for a uniformly chosen
/// stored image, which is returned instead.
class ImagePool {
 public:
  explicit ImagePool(std::int64_t capacity, std::uint64_t seed = 0);

  /// `images` is N x C x H x W; the result has the same shape.
  torch::Tensor query(const torch::Tensor& images);

  std::int64_t capacity() const { return capacity_; }
  std::size_t size() const { return buffer_.size(); }
  void reseed(std::uint64_t seed) { rng_.seed(seed); }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  std::int64_t capacity_;
  std::vector<torch::Tensor> buffer_;
  std::mt19937_64 rng_;
};

using StepMetrics = std::map<std::string, double>;

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based count of completed epochs
  StepMetrics means;
};

/// Thrown when a loss becomes non-finite. `snapshot` holds config, step and loss values.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, nlohmann::json snapshot)
      : std::runtime_error(what), snapshot(std::move(snapshot)) {}
  nlohmann::json snapshot;
};

/// Owns the networks, optimizers and pools of one run.
class Trainer {
 public:
  Trainer(TrainConfig config, TranslatorPair pair);

  /// Restores a trainer from a checkpoint written by save(). Refuses checkpoints whose
  /// training-config hash differs from `config.hash()`.
  static Trainer resume(const std::filesystem::path& dir, const TrainConfig& config);

  /// One generator update followed by the discriminator update(s). Batches are
  /// normalized N x 3 x H x W tensors from the two domains, sampled independently.
  StepMetrics train_step(const torch::Tensor& x_batch, const torch::Tensor& y_batch);

  /// Applies lr_at(epoch) to both optimizers.
  void set_epoch(std::int64_t epoch);

  void save(const std::filesystem::path& dir) const;

  const TrainConfig& config() const { return config_; }
  TranslatorPair& pair() { return pair_; }
  const TranslatorPair& pair() const { return pair_; }

  std::int64_t epoch() const { return epoch_; }
  std::int64_t global_step() const { return global_step_; }
  std::int64_t generator_updates() const { return generator_updates_; }
  std::int64_t critic_updates() const { return critic_updates_; }
  double current_lr() const { return lr_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  std::optional<double> best_cycle_loss() const { return best_cycle_loss_; }

  /// Marks an epoch complete: appends to history and tracks the best cycle loss.
  /// Returns true when this epoch set a new best.
  /// Generators and discriminators are stepped by separate optimizers.
  const torch::optim::Adam& generator_optimizer() const { return *opt_g_; }
  const torch::optim::Adam& discriminator_optimizer() const { return *opt_d_; }

  bool record_epoch(EpochRecord record);
  void reseed_pools(std::uint64_t seed);

 private:

  StepMetrics cycle_step(const torch::Tensor& x, const torch::Tensor& y);
  StepMetrics wasserstein_step(const torch::Tensor& x, const torch::Tensor& y);
  void check_finite(const StepMetrics& metrics) const;

  TrainConfig config_;
  TranslatorPair pair_;
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  ImagePool pool_x_;
  ImagePool pool_y_;
  std::int64_t epoch_ = 0;
  std::int64_t global_step_ = 0;
  std::int64_t generator_updates_ = 0;
  std::int64_t critic_updates_ = 0;
  double lr_ = 0.0;
  std::vector<EpochRecord> history_;
  std::optional<double> best_cycle_loss_;
};

/// Append-only line-delimited metrics: {"epoch":e,"step":s,"loss":name,"value":v}.
class MetricsStream {
 public:
  MetricsStream() = default;
  explicit MetricsStream(const std::filesystem::path& path);
  void write(std::int64_t epoch, std::int64_t step, const StepMetrics& metrics);

 private:
  std::shared_ptr<std::ofstream> out_;
};

struct FitOptions {
  /// Checkpoints go to <dir>/epoch_NNNN, <dir>/best and <dir>/final; empty disables them.
  std::filesystem::path checkpoint_dir;
  std::filesystem::path metrics_path;
  /// Stop after this many completed epochs, saving <checkpoint_dir>/latest. The final
  /// checkpoint is written only when the run reaches total_epochs.
  std::optional<std::int64_t> stop_after_epoch;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  std::int64_t epochs_completed = 0;
  std::vector<EpochRecord> history;
  std::optional<std::filesystem::path> final_checkpoint;
};

/// Runs the epoch loop from trainer.epoch() to config.total_epochs.
///
/// One epoch is one pass over the larger dataset in shuffled order; the smaller one is
/// cycled with a fresh shuffle each time it is exhausted. Data order, crops and pool
/// randomness are derived from (seed, epoch), so a resumed run replays the same stream.
FitResult fit(Trainer& trainer, const TileDataset& x_tiles, const TileDataset& y_tiles,
              const FitOptions& options = {});

}  // namespace muse2he
