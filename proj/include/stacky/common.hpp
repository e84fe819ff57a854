#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <queue>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace stacky {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Base for all computation errors. `kind()` is the stable error name
/// surfaced by the CLI (exit code 1 plus the name on stderr).
class Error : public std::runtime_error {
public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

private:
  std::string kind_;
};

#define STACKY_ERROR(Name)                                          \
  class Name : public Error {                                       \
  public:                                                           \
    explicit Name(const std::string& what) : Error(#Name, what) {}  \
  }

STACKY_ERROR(OutOfDomain);
STACKY_ERROR(DegenerateMetric);
STACKY_ERROR(DomainExit);
STACKY_ERROR(StepTooLarge);
STACKY_ERROR(Disconnected);
STACKY_ERROR(SourceMismatch);
STACKY_ERROR(LiftExit);
STACKY_ERROR(OverlapDisagreement);
STACKY_ERROR(QuadratureFailure);
STACKY_ERROR(InvalidChain);
STACKY_ERROR(BudgetExceeded);
STACKY_ERROR(NormalityLoss);
STACKY_ERROR(IncompatibleJet);
STACKY_ERROR(NotRealized);
STACKY_ERROR(EstimationFailed);
STACKY_ERROR(ParseError);

#undef STACKY_ERROR

/// Deterministic 64-bit generator (splitmix64). Identical streams on every
/// platform for a given seed, unlike the unspecified std distributions.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0x9e3779b97f4a7c15ull) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Standard normal via Box-Muller (two uniforms per call, no caching).
  double normal() {
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = next_double();
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  Vec unit_vector(int dim) {
    Vec v(dim);
    double n = 0.0;
    while (n < 1e-12) {
      for (int i = 0; i < dim; ++i) v[i] = normal();
      n = v.norm();
    }
    return v / n;
  }

private:
  std::uint64_t state_;
};

inline int thread_budget() {
  if (const char* env = std::getenv("STACKY_GEO_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw);
}

/// Index-sharded parallel loop. Work items must be independent; results
/// keyed by index stay deterministic for any thread count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  int threads = thread_budget();
  if (threads <= 1 || n < 32) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::size_t chunk = (n + std::size_t(threads) - 1) / std::size_t(threads);
  for (int t = 0; t < threads; ++t) {
    std::size_t lo = std::size_t(t) * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (std::size_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double length() const { return hi - lo; }
  bool contains(double t, double slack = 0.0) const {
    return t >= lo - slack && t <= hi + slack;
  }
  Interval intersect(const Interval& other) const {
    return {std::max(lo, other.lo), std::min(hi, other.hi)};
  }
  bool empty() const { return hi <= lo; }
};

/// Adaptive Simpson with absolute tolerance. Subdivision budget shared
/// across the whole call; exceeding it raises QuadratureFailure.
namespace detail {
inline double simpson(const std::function<double(double)>& f, double a, double m,
                      double b, double fa, double fm, double fb) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

inline double adaptive_simpson_rec(const std::function<double(double)>& f, double a,
                                   double m, double b, double fa, double fm, double fb,
                                   double whole, double tol, long& budget) {
  if (--budget < 0) throw QuadratureFailure("subdivision budget exhausted");
  double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  double flm = f(lm), frm = f(rm);
  double left = simpson(f, a, lm, m, fa, flm, fm);
  double right = simpson(f, m, rm, b, fm, frm, fb);
  if (std::abs(left + right - whole) <= 15.0 * tol || (b - a) < 1e-14)
    return left + right + (left + right - whole) / 15.0;
  return adaptive_simpson_rec(f, a, lm, m, fa, flm, fm, left, tol / 2.0, budget) +
         adaptive_simpson_rec(f, m, rm, b, fm, frm, fb, right, tol / 2.0, budget);
}
}  // namespace detail

inline double integrate(const std::function<double(double)>& f, double a, double b,
                        double abs_tol = 1e-6, long max_subdivisions = 1 << 16) {
  if (a == b) return 0.0;
  double m = 0.5 * (a + b);
  double fa = f(a), fm = f(m), fb = f(b);
  double whole = detail::simpson(f, a, m, b, fa, fm, fb);
  long budget = max_subdivisions;
  return detail::adaptive_simpson_rec(f, a, m, b, fa, fm, fb, whole, abs_tol, budget);
}

/// Integrate a function with known non-smooth points: split there and sum.
inline double integrate_piecewise(const std::function<double(double)>& f, double a,
                                  double b, const std::vector<double>& breaks,
                                  double abs_tol = 1e-6) {
  std::vector<double> cuts{a};
  for (double c : breaks)
    if (c > a + 1e-14 && c < b - 1e-14) cuts.push_back(c);
  cuts.push_back(b);
  std::sort(cuts.begin(), cuts.end());
  double total = 0.0;
  int pieces = int(cuts.size()) - 1;
  for (int i = 0; i < pieces; ++i)
    total += integrate(f, cuts[i], cuts[i + 1], abs_tol / double(pieces));
  return total;
}

inline double sq(double x) { return x * x; }

/// Dijkstra over an adjacency list. Returns (distance, parent) arrays;
/// unreachable nodes keep distance = infinity, parent = -1.
inline std::pair<std::vector<double>, std::vector<int>> dijkstra(
    const std::vector<std::vector<std::pair<int, double>>>& adj, int source) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(adj.size(), inf);
  std::vector<int> parent(adj.size(), -1);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> queue;
  dist[std::size_t(source)] = 0.0;
  queue.push({0.0, source});
  while (!queue.empty()) {
    auto [d, u] = queue.top();
    queue.pop();
    if (d > dist[std::size_t(u)]) continue;
    for (auto [v, w] : adj[std::size_t(u)]) {
      double nd = d + w;
      if (nd < dist[std::size_t(v)] - 1e-15) {
        dist[std::size_t(v)] = nd;
        parent[std::size_t(v)] = u;
        queue.push({nd, v});
      }
    }
  }
  return {std::move(dist), std::move(parent)};
}

}  // namespace stacky
