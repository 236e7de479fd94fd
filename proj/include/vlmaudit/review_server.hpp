#pragma once

#include <filesystem>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "vlmaudit/filter.hpp"

namespace vlmaudit {

namespace detail {
inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, const Error& e) {
  int status = 400;
  if (e.kind() == ErrorKind::UnknownItem) status = 404;
  if (e.kind() == ErrorKind::WrongStatus) status = 409;
  send_json(res, status, {{"error", std::string(to_string(e.kind()))}, {"detail", e.detail()}});
}

/// Serves a file under `root` for a relative ref; refuses anything escaping it.
inline void serve_file(httplib::Response& res, const fs::path& root, const std::string& ref) {
  if (!image_ref_is_contained(ref) || !fs::is_regular_file(root / ref)) {
    res.status = 404;
    return;
  }
  auto bytes = read_file(root / ref);
  res.set_content(bytes, image_mime(bytes));
}
}  // namespace detail

/// Mounts the review API:
///   GET  /api/review/next?reviewer=      -> card | 204
///   POST /api/review/{item_id}/decision  {verdict, reviewer}
///   GET  /api/review/progress            -> {total, decided, kept, rejected}
///   GET  /assets/original/{ref}, /assets/perturbed/{ref}
/// plus optional static UI assets under /review/.
inline void mount_review_api(httplib::Server& server, ReviewQueue& queue, const fs::path& image_root,
                             const fs::path& run_dir, const fs::path& ui_dir = {}) {
  server.Get("/api/review/next", [&queue](const httplib::Request& req, httplib::Response& res) {
    std::string reviewer = req.has_param("reviewer") ? req.get_param_value("reviewer") : "anonymous";
    auto card = queue.next(reviewer);
    if (!card) {
      res.status = 204;
      return;
    }
    detail::send_json(res, 200, *card);
  });

  server.Post(R"(/api/review/(.+)/decision)", [&queue](const httplib::Request& req, httplib::Response& res) {
    std::string item_id = req.matches[1];
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      detail::send_json(res, 400, {{"error", "InvalidArgument"}, {"detail", "body must be JSON"}});
      return;
    }
    try {
      auto verdict = parse_verdict_word(body.value("verdict", std::string{}));
      auto rec = queue.decide(item_id, verdict, body.value("reviewer", std::string("anonymous")));
      detail::send_json(res, 200, {{"item_id", rec.item_id}, {"status", to_string(rec.status)}});
    } catch (const Error& e) {
      detail::send_error(res, e);
    }
  });

  server.Get("/api/review/progress", [&queue](const httplib::Request&, httplib::Response& res) {
    detail::send_json(res, 200, queue.progress());
  });

  server.Get(R"(/assets/original/(.+))", [image_root](const httplib::Request& req, httplib::Response& res) {
    detail::serve_file(res, image_root, req.matches[1]);
  });
  server.Get(R"(/assets/perturbed/(.+))", [run_dir](const httplib::Request& req, httplib::Response& res) {
    detail::serve_file(res, run_dir, req.matches[1]);
  });

  if (!ui_dir.empty() && fs::is_directory(ui_dir)) server.set_mount_point("/review", ui_dir.string());
}

}  // namespace vlmaudit
