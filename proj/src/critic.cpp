#include "muse2he/critic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <torch/torch.h>

#include "muse2he/errors.hpp"
#include "muse2he/hashing.hpp"
#include "muse2he/models.hpp"

namespace muse2he {

using nlohmann::json;

CriticDataset assemble_critic_dataset(const std::vector<Raster>& fakes, const std::vector<Raster>& reals,
                                      std::uint64_t seed, double train_fraction) {
  if (fakes.empty() || reals.empty()) {
    throw ConfigError("critic dataset needs at least one fake and one real image");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  std::mt19937_64 rng(seed);
  const auto n = std::min(fakes.size(), reals.size());
  auto subsample = [&](std::size_t size) {
    std::vector<std::size_t> idx(size);
    std::iota(idx.begin(), idx.end(), 0);
    if (size > n) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(n);
      std::sort(idx.begin(), idx.end());
    }
    return idx;
  };
  const auto fake_idx = subsample(fakes.size());
  const auto real_idx = subsample(reals.size());

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));

  CriticDataset ds;
  ds.train_fraction = train_fraction;
  ds.seed = seed;
  for (std::size_t k = 0; k < n; ++k) {
    const bool train = k < n_train;
    const auto f = fake_idx[perm[k]];
    const auto r = real_idx[perm[k]];
    (train ? ds.train_fake : ds.valid_fake).push_back(fakes[f]);
    (train ? ds.train_fake_index : ds.valid_fake_index).push_back(f);
    (train ? ds.train_real : ds.valid_real).push_back(reals[r]);
    (train ? ds.train_real_index : ds.valid_real_index).push_back(r);
  }
  return ds;
}

OneCycleSchedule::OneCycleSchedule(std::int64_t total_steps, double peak_lr, double warmup_fraction,
                                   double start_div, double final_div)
    : total_steps_(total_steps),
      warmup_steps_(static_cast<std::int64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)))),
      peak_(peak_lr),
      start_(peak_lr / start_div),
      final_(peak_lr / final_div) {
  if (total_steps < 1 || !(peak_lr > 0.0)) {
    throw ArgumentError("one-cycle schedule needs total_steps >= 1 and peak_lr > 0");
  }
}

double OneCycleSchedule::lr_at(std::int64_t step) const {
  constexpr double kPi = 3.14159265358979323846;
  auto cosine = [](double from, double to, double t) { return to + (from - to) * (1.0 + std::cos(kPi * t)) / 2.0; };
  step = std::clamp<std::int64_t>(step, 0, total_steps_ - 1);
  if (step < warmup_steps_) {
    return cosine(start_, peak_, static_cast<double>(step) / static_cast<double>(warmup_steps_));
  }
  const auto span = std::max<std::int64_t>(1, total_steps_ - 1 - warmup_steps_);
  return cosine(peak_, final_, static_cast<double>(step - warmup_steps_) / static_cast<double>(span));
}

json CriticConfig::to_json() const {
  json j = {{"epochs", epochs},          {"peak_lr", peak_lr},     {"warmup_fraction", warmup_fraction},
            {"batch_size", batch_size},  {"crop_size", crop_size}, {"base_width", base_width},
            {"discriminator", "patchgan70_fc"}};
  if (seed) j["seed"] = *seed;
  return j;
}

std::string CriticConfig::hash() const { return hex64(fnv1a(to_json().dump())); }

std::optional<double> CriticReport::accuracy_at(std::int64_t epoch) const {
  for (const auto& e : epochs) {
    if (e.epoch == epoch) return e.valid_accuracy;
  }
  return std::nullopt;
}

json CriticReport::to_json() const {
  json rows = json::array();
  for (const auto& e : epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"valid_accuracy", e.valid_accuracy},
                    {"valid_bce", e.valid_bce},
                    {"train_bce", e.train_bce}});
  }
  return {{"model_name", model_name}, {"config_hash", config_hash}, {"init_seed", init_seed}, {"epochs", rows}};
}

CriticReport CriticReport::from_json(const json& j) {
  CriticReport r;
  r.model_name = j.at("model_name").get<std::string>();
  r.config_hash = j.value("config_hash", std::string());
  r.init_seed = j.value("init_seed", std::uint64_t{0});
  for (const auto& e : j.at("epochs")) {
    r.epochs.push_back({e.at("epoch").get<std::int64_t>(), e.at("valid_accuracy").get<double>(),
                        e.value("valid_bce", 0.0), e.value("train_bce", 0.0)});
  }
  return r;
}

namespace {

struct Sample {
  torch::Tensor image;  // 1 x 3 x H x W, normalized
  float label;          // 1 real, 0 fake
};

torch::Tensor normalized(const Raster& r) {
  auto t = to_tensor(r);
  return r.depth() == PixelDepth::kUint8 ? t / 127.5 - 1.0 : t;
}

std::vector<Sample> labelled(const std::vector<Raster>& fakes, const std::vector<Raster>& reals) {
  std::vector<Sample> out;
  for (const auto& f : fakes) out.push_back({normalized(f), 0.0f});
  for (const auto& r : reals) out.push_back({normalized(r), 1.0f});
  return out;
}

torch::Tensor crop(const torch::Tensor& image, std::int64_t size, std::mt19937_64* rng) {
  const auto h = image.size(2);
  const auto w = image.size(3);
  if (h < size || w < size) {
    throw DimensionError("critic crop " + std::to_string(size) + " exceeds image " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  std::int64_t r = (h - size) / 2;
  std::int64_t c = (w - size) / 2;
  if (rng) {
    r = std::uniform_int_distribution<std::int64_t>(0, h - size)(*rng);
    c = std::uniform_int_distribution<std::int64_t>(0, w - size)(*rng);
  }
  return image.narrow(2, r, size).narrow(3, c, size);
}

}  // namespace

CriticReport train_critic(const CriticDataset& dataset, const CriticConfig& config, const std::string& model_name) {
  if (dataset.train_fake.empty() || dataset.train_real.empty() || dataset.valid_fake.empty() ||
      dataset.valid_real.empty()) {
    throw ConfigError("critic training needs both classes in both splits");
  }
  if (config.epochs < 1 || config.batch_size < 1) {
    throw ConfigError("critic epochs and batch_size must be >= 1");
  }
  const std::uint64_t init_seed = config.seed ? *config.seed : std::random_device{}();
  namespace F = torch::nn::functional;

  auto train = labelled(dataset.train_fake, dataset.train_real);
  const auto valid = labelled(dataset.valid_fake, dataset.valid_real);
  const auto crop_size = std::min({config.crop_size, train.front().image.size(2), train.front().image.size(3)});

  DiscriminatorSpec spec{DiscriminatorKind::kPatchGan70Fc, 3, config.base_width};
  auto critic = build_discriminator(spec, init_seed);
  torch::optim::Adam opt(critic->parameters(), torch::optim::AdamOptions(config.peak_lr).betas({0.9, 0.999}));

  const auto batch = static_cast<std::size_t>(config.batch_size);
  const auto steps_per_epoch = static_cast<std::int64_t>((train.size() + batch - 1) / batch);
  const OneCycleSchedule schedule(steps_per_epoch * config.epochs, config.peak_lr, config.warmup_fraction);
  std::mt19937_64 rng(mix_seed(init_seed, 7));

  // validation inputs are fixed centre crops
  std::vector<torch::Tensor> valid_images;
  std::vector<float> valid_labels;
  for (const auto& s : valid) {
    valid_images.push_back(crop(s.image, crop_size, nullptr));
    valid_labels.push_back(s.label);
  }
  const auto valid_x = torch::cat(valid_images, 0);
  const auto valid_y = torch::tensor(valid_labels).unsqueeze(1);

  CriticReport report;
  report.model_name = model_name;
  report.config_hash = config.hash();
  report.init_seed = init_seed;
  std::int64_t step = 0;
  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double train_loss = 0.0;
    for (std::size_t i = 0; i < train.size(); i += batch) {
      const auto count = std::min(batch, train.size() - i);
      std::vector<torch::Tensor> xs;
      std::vector<float> ys;
      for (std::size_t k = i; k < i + count; ++k) {
        xs.push_back(crop(train[k].image, crop_size, &rng));
        ys.push_back(train[k].label);
      }
      for (auto& group : opt.param_groups()) {
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(schedule.lr_at(step));
      }
      opt.zero_grad();
      const auto loss = F::binary_cross_entropy_with_logits(critic->forward(torch::cat(xs, 0)),
                                                            torch::tensor(ys).unsqueeze(1));
      loss.backward();
      opt.step();
      train_loss += loss.item<double>() * static_cast<double>(count);
      ++step;
    }

    torch::NoGradGuard no_grad;
    const auto logits = critic->forward(valid_x);
    const auto bce = F::binary_cross_entropy_with_logits(logits, valid_y).item<double>();
    const auto predicted_real = (torch::sigmoid(logits) >= 0.5).to(torch::kFloat32);
    const auto accuracy = (predicted_real == valid_y).to(torch::kFloat64).mean().item<double>() * 100.0;
    report.epochs.push_back({epoch, accuracy, bce, train_loss / static_cast<double>(train.size())});
  }
  return report;
}

namespace {

std::string format_accuracy(double v) {
  char buf[32];
  if (v == std::round(v)) {
    std::snprintf(buf, sizeof(buf), "%.0f", v);
  } else {
    std::snprintf(buf, sizeof(buf), "%.1f", v);
  }
  return buf;
}

}  // namespace

CriticTable emit_table(const std::vector<CriticReport>& reports) {
  static constexpr std::int64_t kColumns[] = {1, 5, 10, 20};
  std::size_t name_width = 9;
  for (const auto& r : reports) name_width = std::max(name_width, r.model_name.size());

  std::ostringstream text;
  std::ostringstream csv;
  text << "Negative Critic Accuracy (%)\n";
  text << std::string(name_width, ' ');
  csv << "model";
  for (auto e : kColumns) {
    std::string head = std::to_string(e);
    text << "  " << std::string(6 - head.size(), ' ') << head;
    csv << ",epoch_" << e;
  }
  text << "\n";
  csv << "\n";
  for (const auto& r : reports) {
    text << r.model_name << std::string(name_width - r.model_name.size(), ' ');
    csv << r.model_name;
    for (auto e : kColumns) {
      const auto acc = r.accuracy_at(e);
      const std::string cell = acc ? format_accuracy(*acc) : "-";
      text << "  " << std::string(cell.size() < 6 ? 6 - cell.size() : 0, ' ') << cell;
      csv << "," << (acc ? cell : "");
    }
    text << "\n";
    csv << "\n";
  }
  return {text.str(), csv.str()};
}

}  // namespace muse2he
