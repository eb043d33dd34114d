#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "muse2he/raster.hpp"

namespace muse2he {

/// Balanced real-vs-fake dataset with a stratified train/validation split.
struct CriticDataset {
  std::vector<Raster> train_fake;
  std::vector<Raster> train_real;
  std::vector<Raster> valid_fake;
  std::vector<Raster> valid_real;
  /// Indices into the input lists, for auditing membership.
  std::vector<std::size_t> train_fake_index, train_real_index, valid_fake_index, valid_real_index;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

/// Subsamples the larger class to the size of the smaller one, then splits both classes
/// with one shared permutation so that train and validation are each balanced.
CriticDataset assemble_critic_dataset(const std::vector<Raster>& fakes, const std::vector<Raster>& reals,
                                      std::uint64_t seed, double train_fraction = 0.8);

/// Cosine warmup from peak/start_div to peak over the first warmup_fraction of steps,
/// then cosine annealing to peak/final_div.
class OneCycleSchedule {
 public:
  OneCycleSchedule(std::int64_t total_steps, double peak_lr, double warmup_fraction = 0.3,
                   double start_div = 25.0, double final_div = 100.0);
  double lr_at(std::int64_t step) const;
  std::int64_t total_steps() const { return total_steps_; }
  std::int64_t warmup_steps() const { return warmup_steps_; }

 private:
  std::int64_t total_steps_;
  std::int64_t warmup_steps_;
  double peak_;
  double start_;
  double final_;
};

struct CriticConfig {
  std::int64_t epochs = 20;
  double peak_lr = 1e-3;
  double warmup_fraction = 0.3;
  std::int64_t batch_size = 16;
  std::int64_t crop_size = 256;
  std::int64_t base_width = 64;
  /// Unset: every training draws a fresh initialization seed.
  std::optional<std::uint64_t> seed;

  nlohmann::json to_json() const;
  std::string hash() const;
};

struct CriticEpoch {
  std::int64_t epoch = 0;
  double valid_accuracy = 0.0;  // percent
  double valid_bce = 0.0;
  double train_bce = 0.0;
};

/// Per-epoch validation trajectory of one critic. Lower accuracy means the generator
/// fooled the critic more often.
struct CriticReport {
  std::string model_name;
  std::vector<CriticEpoch> epochs;
  std::string config_hash;
  std::uint64_t init_seed = 0;

  std::optional<double> accuracy_at(std::int64_t epoch) const;
  nlohmann::json to_json() const;
  static CriticReport from_json(const nlohmann::json& j);
};

/// Trains a fresh patchgan70_fc critic with binary cross-entropy (real = 1) under the
/// one-cycle schedule, recording validation accuracy and loss after every epoch.
/// Single-class datasets are refused with ConfigError.
CriticReport train_critic(const CriticDataset& dataset, const CriticConfig& config,
                          const std::string& model_name = "model");

struct CriticTable {
  std::string text;
  std::string csv;
};

/// Rows are models, columns epochs 1/5/10/20, cells validation accuracy in percent.
CriticTable emit_table(const std::vector<CriticReport>& reports);

}  // namespace muse2he
