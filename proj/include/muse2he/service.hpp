#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "muse2he/app.hpp"

namespace httplib {
class Server;
}

namespace muse2he {

struct ServiceOptions {
  std::filesystem::path checkpoint_dir;
  std::filesystem::path slide_dir;
  std::string device = "cpu";
  /// ROIs with more pixels than max_roi_side^2 need allow_large.
  std::int64_t max_roi_side = 2048;
  BlendParams blend{};

  /// MUSE2HE_CHECKPOINT_DIR, MUSE2HE_SLIDE_DIR and MUSE2HE_DEVICE.
  static ServiceOptions from_env();
};

struct RoiRequest {
  std::string slide_id;
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::int64_t stride = 256;
  std::string checkpoint_id;
  bool allow_large = false;

  static RoiRequest from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct HttpReply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::map<std::string, std::string> headers;
};

class InferenceService {
 public:
  /// Requires at least one slide and one valid checkpoint.
  explicit InferenceService(ServiceOptions options);

  HttpReply list_slides() const;
  HttpReply list_checkpoints() const;
  HttpReply slide_tile(const std::string& slide_id, const std::map<std::string, std::string>& query) const;
  HttpReply convert(const std::string& body) const;

  /// Registers all routes.
  void mount(httplib::Server& server) const;

  const ServiceOptions& options() const { return options_; }

 private:
  struct Slide {
    std::string id;
    std::filesystem::path path;
    std::int64_t height, width;
  };

  const Raster& slide_pixels(const Slide& slide) const;
  const InferenceModel& model(const CheckpointEntry& entry) const;
  std::optional<HttpReply> check_roi(const Slide& slide, std::int64_t x, std::int64_t y, std::int64_t w,
                                     std::int64_t h, bool allow_large) const;

  ServiceOptions options_;
  torch::Device device_;
  CheckpointRegistry registry_;
  std::map<std::string, Slide> slides_;
  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, std::shared_ptr<const Raster>> slide_cache_;
  mutable std::map<std::string, std::shared_ptr<const InferenceModel>> model_cache_;
  mutable std::mutex device_mutex_;
};

/// Blocks serving on host:port until the process is stopped.
void serve(const ServiceOptions& options, const std::string& host, int port);

}  // namespace muse2he
