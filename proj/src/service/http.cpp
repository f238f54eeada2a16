#include <thread>

#include "cvloc/service/engine.hpp"
#include "httplib.h"
#include "json.hpp"

namespace cvloc::service {

using nlohmann::json;

struct HttpServer::Impl {
  Engine& engine;
  httplib::Server server;
  std::thread thread;

  explicit Impl(Engine& e) : engine(e) { routes(); }

  static void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    res.status = status;
    res.set_content(error_json(status, code, message), "application/json");
  }

  // Runs `fn`, mapping every failure onto a structured JSON error.
  template <typename Fn>
  static void guarded(httplib::Response& res, Fn&& fn) {
    try {
      fn();
    } catch (const ServiceError& e) {
      send_error(res, e.status(), e.code(), e.what());
    } catch (const ContractError& e) {
      send_error(res, 400, "bad_request", e.what());
    } catch (const ParameterError& e) {
      send_error(res, 400, "bad_request", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  }

  static json body_object(const httplib::Request& req) {
    json j;
    try {
      j = json::parse(req.body);
    } catch (const json::exception& e) {
      throw ServiceError(400, "bad_request", std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ServiceError(400, "bad_request", "request body must be a JSON object");
    return j;
  }

  static std::string session_of(const json& j) {
    if (!j.contains("session_id") || !j["session_id"].is_string()) {
      throw ServiceError(400, "bad_request", "missing string field 'session_id'");
    }
    return j["session_id"].get<std::string>();
  }

  void routes() {
    server.Post("/localize", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        res.set_content(engine.localize(LocalizeRequest::from_json(req.body)).to_json(), "application/json");
      });
    });
    server.Post("/refine", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const json j = body_object(req);
        std::string extra;
        if (j.contains("text")) {
          if (!j["text"].is_string()) throw ServiceError(400, "bad_request", "field 'text' must be a string");
          extra = j["text"].get<std::string>();
        }
        res.set_content(engine.refine(session_of(j), extra).to_json(), "application/json");
      });
    });
    server.Post("/rerank", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { res.set_content(engine.rerank(session_of(body_object(req))).to_json(), "application/json"); });
    });
    server.Get(R"(/tiles/([A-Za-z0-9_\-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const Raster r = engine.tile(req.matches[1]);
        if (req.has_param("format") && req.get_param_value("format") == "ppm") {
          res.set_content(encode_ppm(r), "image/x-portable-pixmap");
        } else {
          res.set_content(encode_png(r), "image/png");
        }
      });
    });
    server.Get(R"(/heatmaps/([A-Za-z0-9_\-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto png = engine.heatmap_png(req.matches[1]);
        if (!png) throw ServiceError(404, "unknown_heatmap", "no heatmap '" + std::string(req.matches[1]) + "'");
        res.set_content(*png, "image/png");
      });
    });
    server.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { res.set_content(engine.health_json(), "application/json"); });
    });
    // Unmatched routes get the same error shape as everything else.
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) {
        send_error(res, res.status, res.status == 404 ? "not_found" : "http_error", "no such endpoint");
      }
    });
  }
};

HttpServer::HttpServer(Engine& engine) : impl_(std::make_unique<Impl>(engine)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

void HttpServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace cvloc::service
