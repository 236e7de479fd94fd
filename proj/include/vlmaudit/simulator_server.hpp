#pragma once

#include <string>

#include <httplib.h>

#include "vlmaudit/simulator.hpp"

namespace vlmaudit {

/// Routes POST /v1/chat/completions into the simulator.
inline void mount_simulator(httplib::Server& server, const Simulator& sim) {
  server.Post("/v1/chat/completions", [&sim](const httplib::Request& req, httplib::Response& res) {
    auto r = sim.handle("/v1/chat/completions", req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
}

/// Blocks serving on host:port until the server is stopped.
inline bool serve_simulator(const Simulator& sim, const std::string& host, int port) {
  httplib::Server server;
  mount_simulator(server, sim);
  return server.listen(host, port);
}

}  // namespace vlmaudit
