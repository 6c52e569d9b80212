#pragma once

#include <httplib.h>

#include <cstdlib>
#include <functional>
#include <limits>
#include <string>

#include "gsa/gateway/png.hpp"
#include "gsa/gateway/session.hpp"

namespace gsa::gateway {

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kConflict: return 409;
    case ErrorCode::kUnprocessable: return 422;
    case ErrorCode::kInvalidArgument: return 400;
    default: return 500;
  }
}

inline void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, const Error& e) {
  send_json(res, {{"error", std::string(gsa::to_string(e.code()))}, {"message", e.what()}},
            http_status(e.code()));
}

inline SampleId path_id(const httplib::Request& req) {
  const std::string& s = req.matches[1];
  try {
    const unsigned long long v = std::stoull(s);
    if (v > std::numeric_limits<SampleId>::max()) throw std::out_of_range(s);
    return static_cast<SampleId>(v);
  } catch (const std::exception&) {
    throw Error(ErrorCode::kNotFound, "no sample '" + s + "'");
  }
}

/// Wraps a handler so library errors become structured responses.
template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, e);
    } catch (const std::exception& e) {
      send_json(res, {{"error", "internal"}, {"message", e.what()}}, 500);
    }
  };
}

/// Registers the session API on `srv`. `on_abort` runs after an abort request completes.
inline void install_routes(httplib::Server& srv, Session& s,
                           std::function<void()> on_abort = {}) {
  srv.Get("/api/session", guarded([&s](const auto&, auto& res) { send_json(res, s.session_json()); }));
  srv.Get("/api/suggestions",
          guarded([&s](const auto&, auto& res) { send_json(res, s.suggestions_json()); }));
  srv.Get(R"(/api/sample/(\d+)/image)", guarded([&s](const auto& req, auto& res) {
            const ImageSample& x = s.train_sample(path_id(req));
            const DatasetSpec& spec = s.dataset().spec;
            res.set_content(png::encode_gray8(spec.width, spec.height, png::display_bytes(x.pixels)),
                            "image/png");
          }));
  srv.Get(R"(/api/sample/(\d+)/annotation)", guarded([&s](const auto& req, auto& res) {
            send_json(res, mask_json(s.annotation(path_id(req))));
          }));
  srv.Post(R"(/api/sample/(\d+)/annotation)", guarded([&s](const auto& req, auto& res) {
             const SampleId id = path_id(req);
             json body;
             try {
               body = json::parse(req.body);
             } catch (const json::exception& e) {
               // Resolve 404/409 before reporting the payload itself.
               s.check_submittable(id);
               throw Error(ErrorCode::kUnprocessable, std::string("malformed JSON: ") + e.what());
             }
             send_json(res, s.submit(id, body));
           }));
  srv.Get("/api/metrics", guarded([&s](const auto&, auto& res) { send_json(res, s.metrics_json()); }));
  srv.Post("/api/control/abort", guarded([&s, on_abort](const auto&, auto& res) {
             send_json(res, s.abort());
             if (on_abort) on_abort();
           }));
}

/// Port from GS_PORT, else `fallback`.
inline int env_port(int fallback = 8080) {
  if (const char* p = std::getenv("GS_PORT"); p && *p) {
    try {
      const int v = std::stoi(p);
      if (v > 0 && v < 65536) return v;
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::kInvalidArgument, std::string("GS_PORT is not a valid port: ") + p);
  }
  return fallback;
}

}  // namespace gsa::gateway
