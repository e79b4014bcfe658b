#include "tcrlm/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

#include "tcrlm/error.hpp"

namespace tcrlm::num {

namespace {

int g_max_threads = 0;  // 0 = hardware concurrency

int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : int(n);
}

// Minimal persistent pool: one task at a time, chunks pulled off a shared
// counter, caller participates. Chunk boundaries are deterministic; which
// thread runs a chunk is not, so fn must keep per-index work independent
// (all kernels in this library write disjoint output ranges per index).
class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(std::int64_t n_chunks, std::int64_t chunk, std::int64_t n,
           const std::function<void(std::int64_t, std::int64_t)>& fn) {
    std::unique_lock<std::mutex> lk(mu_);
    // Wait out stragglers from the previous task before re-arming counters.
    done_cv_.wait(lk, [this] { return active_.load() == 0; });
    fn_ = &fn;
    chunk_ = chunk;
    total_ = n;
    next_chunk_.store(0, std::memory_order_relaxed);
    pending_.store(n_chunks, std::memory_order_relaxed);
    generation_++;
    lk.unlock();
    cv_.notify_all();
    drain();
    lk.lock();
    done_cv_.wait(lk, [this] {
      return pending_.load() == 0 && active_.load() == 0;
    });
    fn_ = nullptr;
  }

  int size() const { return int(threads_.size()); }

 private:
  void drain() {
    while (true) {
      std::int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      std::int64_t begin = c * chunk_;
      if (begin >= total_) break;
      std::int64_t end = std::min(begin + chunk_, total_);
      (*fn_)(begin, end);
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> lk(mu_);
        done_cv_.notify_all();
      }
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    while (true) {
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        active_.fetch_add(1, std::memory_order_relaxed);
      }
      drain();
      {
        std::lock_guard<std::mutex> lk(mu_);
        active_.fetch_sub(1, std::memory_order_relaxed);
        done_cv_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(std::int64_t, std::int64_t)>* fn_ = nullptr;
  std::int64_t chunk_ = 0;
  std::int64_t total_ = 0;
  std::atomic<std::int64_t> next_chunk_{0};
  std::atomic<std::int64_t> pending_{0};
  std::atomic<int> active_{0};
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

Pool& pool() {
  static Pool p(std::max(0, hardware_threads() - 1));
  return p;
}

// Guards against nested/concurrent parallel_for: whoever loses the flag
// simply runs inline, which is always a correct (serial) execution.
std::atomic<bool> g_pool_busy{false};

}  // namespace

void set_max_threads(int n) {
  if (n < 0) fail("InvalidConfig", "thread count must be >= 0");
  g_max_threads = n;
}

int max_threads() {
  return g_max_threads == 0 ? hardware_threads() : g_max_threads;
}

void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  int workers = max_threads();
  if (workers <= 1 || n <= grain || pool().size() == 0) {
    fn(0, n);
    return;
  }
  bool expected = false;
  if (!g_pool_busy.compare_exchange_strong(expected, true)) {
    fn(0, n);
    return;
  }
  std::int64_t n_chunks =
      std::min<std::int64_t>(workers, (n + grain - 1) / grain);
  std::int64_t chunk = (n + n_chunks - 1) / n_chunks;
  n_chunks = (n + chunk - 1) / chunk;
  pool().run(n_chunks, chunk, n, fn);
  g_pool_busy.store(false);
}

}  // namespace tcrlm::num
