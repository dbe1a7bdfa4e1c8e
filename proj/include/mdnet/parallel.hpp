#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mdnet {

// Persistent worker pool driving parallel_for. Work is split into one
// contiguous chunk per worker, so every output element is written by exactly
// one thread and results are bitwise independent of the thread count.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int size() const { return int(workers_.size()) + 1; }  // workers + caller

  // body(begin, end): half-open index ranges.
  void run_chunks(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    const int nthreads = size();
    if (nthreads == 1 || n == 1) {
      body(0, n);
      return;
    }
    std::unique_lock<std::mutex> guard(submit_mutex_, std::try_to_lock);
    if (!guard.owns_lock()) {
      // nested parallel_for: run inline rather than deadlock
      body(0, n);
      return;
    }
    const int64_t chunk = (n + nthreads - 1) / nthreads;
    {
      std::lock_guard<std::mutex> lk(m_);
      job_ = &body;
      job_n_ = n;
      job_chunk_ = chunk;
      job_next_ = 0;
      pending_ = 0;
      for (int t = 1; t < nthreads; ++t) {
        int64_t b = int64_t(t) * chunk;
        if (b < n) ++pending_;
      }
      ++generation_;
    }
    cv_.notify_all();
    body(0, std::min<int64_t>(chunk, n));  // caller takes the first chunk
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

 private:
  ThreadPool() {
    int n = int(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MDNET_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) n = v;
    }
    if (n < 1) n = 1;
    for (int t = 1; t < n; ++t)
      workers_.emplace_back([this, t] { worker_loop(t); });
  }

  void worker_loop(int index) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* job = nullptr;
      int64_t b = 0, e = 0;
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        seen = generation_;
        if (stop_) return;
        if (!job_) continue;
        b = int64_t(index) * job_chunk_;
        if (b >= job_n_) continue;
        e = std::min(b + job_chunk_, job_n_);
        job = job_;
      }
      (*job)(b, e);
      {
        std::lock_guard<std::mutex> lk(m_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex m_, submit_mutex_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int64_t, int64_t)>* job_ = nullptr;
  int64_t job_n_ = 0, job_chunk_ = 0, job_next_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

// Parallel loop over [0, n). `grain` is the minimum per-item work hint: loops
// with fewer than `serial_below` items run inline.
template <class F>
void parallel_for(int64_t n, F&& f, int64_t serial_below = 2) {
  if (n < serial_below || ThreadPool::instance().size() == 1) {
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::function<void(int64_t, int64_t)> body = [&f](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) f(i);
  };
  ThreadPool::instance().run_chunks(n, body);
}

}  // namespace mdnet
