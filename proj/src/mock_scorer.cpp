#include "tcrlm/mock_scorer.hpp"

#include <chrono>
#include <cstdio>

#include "httplib.h"
#include "json.hpp"

#include "tcrlm/error.hpp"
#include "tcrlm/rl.hpp"

namespace tcrlm::mock {

struct MockScorer::Impl {
  httplib::Server server;
};

namespace {

// %.17g so a score survives the JSON round trip bit-exactly.
nlohmann::json score_json(const std::vector<double>& scores) {
  nlohmann::json j;
  j["scores"] = scores;
  return j;
}

}  // namespace

MockScorer::MockScorer(MockScorerConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.mode != "constant" && cfg_.mode != "motif")
    fail("InvalidConfig", "mock scorer mode '" + cfg_.mode + "'");
  if (!cfg_.fault.empty() && cfg_.fault != "shape" && cfg_.fault != "range" &&
      cfg_.fault != "http500" && cfg_.fault != "slow")
    fail("InvalidConfig", "mock scorer fault '" + cfg_.fault + "'");
  if (cfg_.fault_every <= 0)
    fail("InvalidConfig", "fault_every must be positive");

  impl_ = std::make_unique<Impl>();
  impl_->server.Post("/score", [this](const httplib::Request& req,
                                      httplib::Response& res) {
    const int n = requests_.fetch_add(1) + 1;
    const bool faulted = !cfg_.fault.empty() && n % cfg_.fault_every == 0;

    const nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.contains("peptide") ||
        !body.contains("tcrs") || !body["tcrs"].is_array()) {
      res.status = 400;
      res.set_content("{\"error\":\"bad request\"}", "application/json");
      return;
    }
    const std::string peptide = body["peptide"].get<std::string>();
    std::vector<std::string> tcrs;
    tcrs.reserve(body["tcrs"].size());
    for (const auto& t : body["tcrs"]) tcrs.push_back(t.get<std::string>());

    if (faulted && cfg_.fault == "slow") {
      std::this_thread::sleep_for(std::chrono::duration<double>(cfg_.slow_s));
    }
    if (faulted && cfg_.fault == "http500") {
      res.status = 500;
      return;
    }

    std::vector<double> scores;
    scores.reserve(tcrs.size());
    if (cfg_.mode == "constant") {
      scores.assign(tcrs.size(), cfg_.constant);
    } else {
      const std::string motif = rl::peptide_motif(peptide, cfg_.motif_k);
      for (const auto& t : tcrs) scores.push_back(rl::motif_score(motif, t));
    }

    if (faulted && cfg_.fault == "shape" && !scores.empty()) scores.pop_back();
    if (faulted && cfg_.fault == "range" && !scores.empty()) scores[0] = 1.3;

    res.set_content(score_json(scores).dump(), "application/json");
  });
}

MockScorer::~MockScorer() { stop(); }

void MockScorer::start() {
  auto& srv = impl_->server;
  if (cfg_.port == 0) {
    port_ = srv.bind_to_any_port(cfg_.host);
    if (port_ <= 0) fail("Io", "cannot bind mock scorer on " + cfg_.host);
  } else {
    if (!srv.bind_to_port(cfg_.host, cfg_.port))
      fail("Io", "cannot bind mock scorer on " + cfg_.host + ":" +
                     std::to_string(cfg_.port));
    port_ = cfg_.port;
  }
  server_thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  const auto deadline =
      std::chrono::steady_clock::now() + std::chrono::seconds(5);
  while (!impl_->server.is_running()) {
    if (std::chrono::steady_clock::now() > deadline)
      fail("Io", "mock scorer failed to start");
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
}

void MockScorer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
  if (server_thread_.joinable()) server_thread_.join();
}

void MockScorer::run_blocking() {
  start();
  std::printf("mock scorer listening on %s:%d\n", cfg_.host.c_str(), port_);
  std::fflush(stdout);
  server_thread_.join();
}

}  // namespace tcrlm::mock
