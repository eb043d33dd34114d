#include "muse2he/service.hpp"

#include <chrono>
#include <cstdlib>
#include <set>

#include <httplib.h>

#include "muse2he/errors.hpp"

namespace muse2he {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

HttpReply json_reply(int status, const json& body) { return {status, "application/json", body.dump(), {}}; }

HttpReply error_reply(int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  return json_reply(status, extra);
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

}  // namespace

ServiceOptions ServiceOptions::from_env() {
  ServiceOptions o;
  o.checkpoint_dir = env_or("MUSE2HE_CHECKPOINT_DIR", "");
  o.slide_dir = env_or("MUSE2HE_SLIDE_DIR", "");
  o.device = env_or("MUSE2HE_DEVICE", "cpu");
  return o;
}

RoiRequest RoiRequest::from_json(const json& j) {
  if (!j.is_object()) {
    throw ArgumentError("ROI request must be a JSON object");
  }
  for (const auto& [key, _] : j.items()) {
    static const std::set<std::string> allowed{"slide_id", "x", "y", "width", "height",
                                               "stride", "checkpoint_id", "allow_large"};
    if (!allowed.contains(key)) {
      throw ArgumentError("unknown key '" + key + "' in ROI request");
    }
  }
  RoiRequest r;
  try {
    r.slide_id = j.at("slide_id").get<std::string>();
    r.x = j.at("x").get<std::int64_t>();
    r.y = j.at("y").get<std::int64_t>();
    r.width = j.at("width").get<std::int64_t>();
    r.height = j.at("height").get<std::int64_t>();
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    r.stride = j.value("stride", r.stride);
    r.allow_large = j.value("allow_large", r.allow_large);
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("ROI request: ") + e.what());
  }
  if (r.stride < 1) {
    throw ArgumentError("stride must be >= 1");
  }
  return r;
}

json RoiRequest::to_json() const {
  return {{"slide_id", slide_id}, {"x", x},           {"y", y},
          {"width", width},       {"height", height}, {"stride", stride},
          {"checkpoint_id", checkpoint_id},           {"allow_large", allow_large}};
}

InferenceService::InferenceService(ServiceOptions options)
    : options_(std::move(options)), device_(parse_device(options_.device)) {
  options_.blend.validate();
  if (options_.checkpoint_dir.empty() || options_.slide_dir.empty()) {
    throw ConfigError("service needs a checkpoint directory and a slide directory");
  }
  registry_ = CheckpointRegistry(options_.checkpoint_dir);
  if (registry_.entries().empty()) {
    throw ConfigError("no valid checkpoints under " + options_.checkpoint_dir.string());
  }
  for (const auto& path : list_images(options_.slide_dir)) {
    const auto pixels = std::make_shared<const Raster>(read_image(path));
    const auto id = path.stem().string();
    slides_[id] = {id, path, pixels->height(), pixels->width()};
    slide_cache_[id] = pixels;
  }
  if (slides_.empty()) {
    throw ConfigError("no slides under " + options_.slide_dir.string());
  }
}

const Raster& InferenceService::slide_pixels(const Slide& slide) const {
  std::lock_guard lock(cache_mutex_);
  auto& cached = slide_cache_[slide.id];
  if (!cached) {
    cached = std::make_shared<const Raster>(read_image(slide.path));
  }
  return *cached;
}

const InferenceModel& InferenceService::model(const CheckpointEntry& entry) const {
  std::lock_guard lock(cache_mutex_);
  auto& cached = model_cache_[entry.id];
  if (!cached) {
    cached = std::make_shared<const InferenceModel>(load_inference_model(entry.path, device_));
  }
  return *cached;
}

std::optional<HttpReply> InferenceService::check_roi(const Slide& slide, std::int64_t x, std::int64_t y,
                                                     std::int64_t w, std::int64_t h, bool allow_large) const {
  if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > slide.width || y + h > slide.height) {
    return error_reply(422, "region outside slide bounds",
                       {{"bounds", {{"width", slide.width}, {"height", slide.height}}},
                        {"region", {{"x", x}, {"y", y}, {"width", w}, {"height", h}}}});
  }
  const auto budget = options_.max_roi_side * options_.max_roi_side;
  if (!allow_large && w * h > budget) {
    return error_reply(413, "region exceeds the interactive budget; set allow_large",
                       {{"budget_pixels", budget}, {"requested_pixels", w * h}});
  }
  return std::nullopt;
}

HttpReply InferenceService::list_slides() const {
  json list = json::array();
  for (const auto& [id, s] : slides_) {
    list.push_back({{"id", id}, {"width", s.width}, {"height", s.height}});
  }
  return json_reply(200, {{"slides", list}});
}

HttpReply InferenceService::list_checkpoints() const {
  json list = json::array();
  for (const auto& e : registry_.entries()) {
    list.push_back({{"id", e.id},
                    {"generator", to_json(e.manifest.generator_spec)},
                    {"epoch", e.manifest.epoch},
                    {"seed", e.manifest.seed},
                    {"train_config_hash", e.manifest.train_config_hash}});
  }
  return json_reply(200, {{"checkpoints", list}});
}

HttpReply InferenceService::slide_tile(const std::string& slide_id,
                                       const std::map<std::string, std::string>& query) const {
  const auto it = slides_.find(slide_id);
  if (it == slides_.end()) {
    return error_reply(404, "unknown slide '" + slide_id + "'");
  }
  std::int64_t v[4];
  const char* names[4] = {"x", "y", "w", "h"};
  for (int i = 0; i < 4; ++i) {
    const auto q = query.find(names[i]);
    if (q == query.end()) {
      return error_reply(400, std::string("missing query parameter '") + names[i] + "'");
    }
    try {
      std::size_t used = 0;
      v[i] = std::stoll(q->second, &used);
      if (used != q->second.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      return error_reply(400, std::string("query parameter '") + names[i] + "' must be an integer");
    }
  }
  if (auto bad = check_roi(it->second, v[0], v[1], v[2], v[3], true)) {
    return *bad;
  }
  const auto region = slide_pixels(it->second).crop(v[1], v[0], v[3], v[2]);
  const auto png = encode_png(region);
  return {200, "image/png", std::string(png.begin(), png.end()), {}};
}

HttpReply InferenceService::convert(const std::string& body) const {
  RoiRequest req;
  try {
    req = RoiRequest::from_json(json::parse(body));
  } catch (const json::parse_error& e) {
    return error_reply(400, std::string("malformed JSON: ") + e.what());
  } catch (const ArgumentError& e) {
    return error_reply(400, e.what());
  }
  const auto slide = slides_.find(req.slide_id);
  if (slide == slides_.end()) {
    return error_reply(404, "unknown slide '" + req.slide_id + "'");
  }
  const auto* entry = registry_.find(req.checkpoint_id);
  if (!entry) {
    return error_reply(404, "unknown checkpoint '" + req.checkpoint_id + "'");
  }
  if (auto bad = check_roi(slide->second, req.x, req.y, req.width, req.height, req.allow_large)) {
    return *bad;
  }
  const auto start = std::chrono::steady_clock::now();
  BlendParams params = options_.blend;
  params.stride = req.stride;
  const auto roi = slide_pixels(slide->second).crop(req.y, req.x, req.height, req.width);
  BlendResult result;
  try {
    result = infer_image(model(*entry), roi, params, &device_mutex_, device_);
  } catch (const std::exception& e) {
    return error_reply(500, e.what());
  }
  const auto png = encode_png(result.montage);
  const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  HttpReply reply{200, "image/png", std::string(png.begin(), png.end()), {}};
  reply.headers["X-Timing-Ms"] = std::to_string(ms);
  reply.headers["X-Tiles"] = std::to_string(result.stats.tiles);
  reply.headers["X-Generator-Calls"] = std::to_string(result.stats.generator_calls);
  return reply;
}

void InferenceService::mount(httplib::Server& server) const {
  const auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    for (const auto& [k, v] : reply.headers) {
      res.set_header(k, v);
    }
    res.set_content(reply.body, reply.content_type);
  };
  server.Get("/slides", [this, send](const httplib::Request&, httplib::Response& res) { send(res, list_slides()); });
  server.Get("/checkpoints",
             [this, send](const httplib::Request&, httplib::Response& res) { send(res, list_checkpoints()); });
  server.Get(R"(/slides/([^/]+)/tile)", [this, send](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) {
      query.emplace(k, v);
    }
    send(res, slide_tile(req.matches[1], query));
  });
  server.Post("/convert",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, convert(req.body)); });
  server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send(res, error_reply(500, what));
  });
}

void serve(const ServiceOptions& options, const std::string& host, int port) {
  InferenceService service(options);
  httplib::Server server;
  service.mount(server);
  if (!server.listen(host, port)) {
    throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
  }
}

}  // namespace muse2he
