#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <thread>

namespace tcrlm::mock {

// In-process HTTP scorer implementing the /score wire protocol. Modes:
//   constant — every TCR gets `constant`
//   motif    — motif_score against the middle-k motif of the peptide
// Fault injection (for client robustness tests): on every `fault_every`-th
// request (1 = all), respond per `fault`:
//   shape   — drop the last score
//   range   — first score 1.3
//   http500 — status 500, empty body
//   slow    — sleep `slow_s` before answering (client read-timeout trigger)
struct MockScorerConfig {
  std::string mode = "motif";
  double constant = 0.7;
  int motif_k = 3;
  std::string fault;      // "", "shape", "range", "http500", "slow"
  int fault_every = 1;
  double slow_s = 2.0;
  std::string host = "127.0.0.1";
  int port = 0;           // 0: pick a free port
};

class MockScorer {
 public:
  explicit MockScorer(MockScorerConfig cfg);
  ~MockScorer();

  MockScorer(const MockScorer&) = delete;
  MockScorer& operator=(const MockScorer&) = delete;

  // Binds and serves on a background thread; returns once the socket is
  // accepting. Throws Io if the port cannot be bound.
  void start();
  void stop();

  int port() const { return port_; }
  const std::string& host() const { return cfg_.host; }
  // Total /score requests seen (fault responses included).
  int request_count() const { return requests_.load(); }

  // Serve on the calling thread until SIGINT/stop (CLI entry point).
  void run_blocking();

 private:
  struct Impl;
  MockScorerConfig cfg_;
  int port_ = 0;
  std::atomic<int> requests_{0};
  std::unique_ptr<Impl> impl_;
  std::thread server_thread_;
};

}  // namespace tcrlm::mock
