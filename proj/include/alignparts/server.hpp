#pragma once

// HTTP binding of the annotation service.

// Eigen must precede httplib: <resolv.h> defines a `_res` macro.
#include "alignparts/annotation.hpp"

#include <httplib.h>

namespace alignparts {

inline int http_status(ErrorKind k) {
  switch (k) {
    case ErrorKind::schema:
    case ErrorKind::invalid_argument: return 400;
    case ErrorKind::not_found: return 404;
    case ErrorKind::conflict:
    case ErrorKind::stale: return 409;
    default: return 500;
  }
}

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::schema: return "schema";
    case ErrorKind::conflict: return "conflict";
    case ErrorKind::environment: return "environment";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::stale: return "stale";
  }
  return "error";
}

namespace detail {

inline void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, std::string("request body: ") + e.what());
  }
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const UnknownLabelError& e) {
      reply(res, 422, {{"error", "unknown_label"}, {"message", e.what()}, {"suggestions", e.suggestions()}});
    } catch (const Error& e) {
      reply(res, http_status(e.kind()), {{"error", error_kind_name(e.kind())}, {"message", e.what()}});
    } catch (const std::exception& e) {
      reply(res, 500, {{"error", "internal"}, {"message", e.what()}});
    }
  };
}

}  // namespace detail

inline void register_routes(httplib::Server& server, AnnotationService& svc) {
  using detail::guarded;
  using detail::reply;
  server.Post("/shapes", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                const json body = detail::parse_body(req);
                if (body.is_object() && body.contains("format")) {
                  reply(res, 201, {{"ingested", svc.ingest_export(body)}});
                  return;
                }
                reply(res, 201, item_to_json(svc.ingest(prediction_from_json(body, "request body"))));
              }));
  server.Get("/queue/next", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
               const std::string reviewer = req.get_param_value("reviewer");
               if (reviewer.empty()) fail(ErrorKind::schema, "missing reviewer parameter");
               const auto item = svc.lease_next(reviewer);
               if (!item) {
                 res.status = 204;
                 return;
               }
               reply(res, 200, item_to_json(*item));
             }));
  server.Post("/items/:id/decision", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                const Ack ack = svc.submit_decision(decision_from_json(detail::parse_body(req), req.path_params.at("id")));
                reply(res, 200, {{"item", ack.item_id}, {"revision", ack.revision}, {"duplicate", ack.duplicate}});
              }));
  server.Get("/items/:id", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
               const auto item = svc.item(req.path_params.at("id"));
               if (!item) fail(ErrorKind::not_found, "unknown item '" + req.path_params.at("id") + "'");
               reply(res, 200, item_to_json(*item));
             }));
  server.Get("/export", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
               reply(res, 200, svc.export_dataset(parse_status_filter(req.get_param_value("status"))));
             }));
  server.Get("/stats", guarded([&svc](const httplib::Request&, httplib::Response& res) { reply(res, 200, svc.stats()); }));
  server.Get("/vocab", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
               reply(res, 200, svc.vocab_for(req.get_param_value("class")));
             }));
}

}  // namespace alignparts
