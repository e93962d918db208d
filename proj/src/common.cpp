#include "qrecon/common.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

namespace qrecon {

Vec Event::coords() const {
  Vec p(x.size() + 1);
  p(0) = t;
  p.tail(x.size()) = x;
  return p;
}

Event Event::from_coords(const Vec& p) { return Event(p(0), p.tail(p.size() - 1)); }

bool Domain::contains(const Vec& p, double slack) const {
  if (p(0) < -slack || p(0) > T + slack) return false;
  for (int k = 0; k < spatial_dim(); ++k) {
    if (p(k + 1) < lower(k) - slack || p(k + 1) > upper(k) + slack) return false;
  }
  return true;
}

int default_jobs() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mutex;
  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  for (std::size_t k = 0; k < nthreads; ++k) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::vector<double> trapezoid_weights(int n, double h) {
  std::vector<double> w(static_cast<std::size_t>(n) + 1, h);
  w.front() *= 0.5;
  w.back() *= 0.5;
  return w;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace qrecon
