#pragma once

#include "stacky/common.hpp"
#include "stacky/expression.hpp"

#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace stacky {

/// Axis-aligned box intersected with an optional open region {predicate > 0}.
struct Domain {
  Vec lo;
  Vec hi;
  std::function<double(const Vec&)> predicate;  // in iff > 0; may be empty

  bool contains(const Vec& x) const {
    for (int i = 0; i < x.size(); ++i)
      if (x[i] < lo[i] || x[i] > hi[i]) return false;
    return !predicate || predicate(x) > 0.0;
  }

  double diameter() const { return (hi - lo).norm(); }

  static Domain box(const Vec& lo, const Vec& hi) { return {lo, hi, nullptr}; }
};

/// A single chart with a smooth Riemannian metric field. All local
/// differential geometry happens here; quotient structure lives on top.
struct ManifoldPatch {
  int dim = 0;
  Domain domain;
  std::function<Mat(const Vec&)> metric;
  // Optional analytic Christoffel symbols, gamma[k](i,j). When absent they
  // come from central differences of the metric.
  std::function<std::vector<Mat>(const Vec&)> christoffel;
  double fd_step = 0.0;  // 0 = derive from domain diameter
  std::string name;

  double christoffel_step() const {
    return fd_step > 0.0 ? fd_step : 1e-4 * domain.diameter();
  }
};

inline Mat metric_raw(const ManifoldPatch& patch, const Vec& x) {
  Mat g = patch.metric(x);
  return 0.5 * (g + g.transpose());
}

/// Checked metric evaluation: symmetric within 1e-12 and positive-definite
/// (smallest eigenvalue > 1e-12).
inline Mat metric_at(const ManifoldPatch& patch, const Vec& x) {
  if (!patch.domain.contains(x)) throw OutOfDomain("metric_at: point outside patch domain");
  Mat g = patch.metric(x);
  double asym = (g - g.transpose()).cwiseAbs().maxCoeff();
  double scale = std::max(1.0, g.cwiseAbs().maxCoeff());
  if (asym > 1e-12 * scale) throw DegenerateMetric("metric not symmetric at sample point");
  g = 0.5 * (g + g.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> eig(g);
  if (eig.eigenvalues().minCoeff() <= 1e-12)
    throw DegenerateMetric("metric eigenvalue below 1e-12");
  return g;
}

inline double metric_norm(const ManifoldPatch& patch, const Vec& x, const Vec& v) {
  Mat g = metric_raw(patch, x);
  return std::sqrt(std::max(0.0, v.dot(g * v)));
}

inline double metric_inner(const ManifoldPatch& patch, const Vec& x, const Vec& u,
                           const Vec& v) {
  return u.dot(metric_raw(patch, x) * v);
}

/// Christoffel symbols of the second kind, gamma[k](i,j), symmetric in (i,j).
/// FD probes may sample the metric just outside the domain; metric fields are
/// expected to extend smoothly across the boundary.
inline std::vector<Mat> christoffel_at(const ManifoldPatch& patch, const Vec& x) {
  if (!patch.domain.contains(x))
    throw OutOfDomain("christoffel_at: point outside patch domain");
  if (patch.christoffel) return patch.christoffel(x);

  const int n = patch.dim;
  const double h = patch.christoffel_step();
  std::vector<Mat> dg(n);  // dg[l] = d g / d x_l
  for (int l = 0; l < n; ++l) {
    Vec xp = x, xm = x;
    xp[l] += h;
    xm[l] -= h;
    dg[l] = (metric_raw(patch, xp) - metric_raw(patch, xm)) / (2.0 * h);
  }
  Mat ginv = metric_raw(patch, x).inverse();
  std::vector<Mat> gamma(n, Mat::Zero(n, n));
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) {
        double s = 0.0;
        for (int l = 0; l < n; ++l)
          s += ginv(k, l) * (dg[i](j, l) + dg[j](i, l) -
                             dg[l](i, j));
        gamma[k](i, j) = 0.5 * s;
        gamma[k](j, i) = 0.5 * s;
      }
  return gamma;
}

struct GeodesicState {
  Vec position;
  Vec velocity;
  double time = 0.0;
};

struct GeodesicTrajectory {
  std::vector<GeodesicState> states;
  bool domain_exit = false;
  double exit_time = 0.0;
  double max_speed_drift = 0.0;

  const GeodesicState& back() const { return states.back(); }

  /// Cubic Hermite interpolation between stored states.
  GeodesicState at(double t) const {
    if (states.empty()) throw DomainExit("empty trajectory");
    double t0 = states.front().time, t1 = states.back().time;
    bool fwd = t1 >= t0;
    double lo = fwd ? t0 : t1, hi = fwd ? t1 : t0;
    if (t < lo - 1e-9 || t > hi + 1e-9)
      throw DomainExit("trajectory not defined at requested time");
    t = std::min(std::max(t, lo), hi);
    // locate segment (states stored in integration order, uniform-ish steps)
    std::size_t a = 0, b = states.size() - 1;
    while (b - a > 1) {
      std::size_t m = (a + b) / 2;
      bool left = fwd ? (states[m].time <= t) : (states[m].time >= t);
      if (left) a = m;
      else b = m;
    }
    const GeodesicState& s0 = states[a];
    const GeodesicState& s1 = states[b];
    double dt = s1.time - s0.time;
    if (std::abs(dt) < 1e-15) return s0;
    double u = (t - s0.time) / dt;
    double h00 = (1 + 2 * u) * sq(1 - u), h10 = u * sq(1 - u);
    double h01 = sq(u) * (3 - 2 * u), h11 = sq(u) * (u - 1);
    GeodesicState out;
    out.time = t;
    out.position = h00 * s0.position + h10 * dt * s0.velocity + h01 * s1.position +
                   h11 * dt * s1.velocity;
    double g00 = 6 * u * (u - 1), g10 = (1 - u) * (1 - 3 * u);
    double g01 = -g00, g11 = u * (3 * u - 2);
    out.velocity = (g00 * s0.position / dt + g10 * s0.velocity + g01 * s1.position / dt +
                    g11 * s1.velocity);
    return out;
  }
};

namespace detail {
inline void geodesic_rhs(const ManifoldPatch& patch, const Vec& x, const Vec& v,
                         Vec& dx, Vec& dv) {
  dx = v;
  std::vector<Mat> gamma = christoffel_at(patch, x);
  dv = Vec::Zero(x.size());
  for (int k = 0; k < x.size(); ++k) dv[k] = -v.dot(gamma[k] * v);
}

inline bool rk4_step(const ManifoldPatch& patch, GeodesicState& s, double h) {
  Vec k1x, k1v, k2x, k2v, k3x, k3v, k4x, k4v;
  if (!patch.domain.contains(s.position)) return false;
  geodesic_rhs(patch, s.position, s.velocity, k1x, k1v);
  Vec x2 = s.position + 0.5 * h * k1x;
  if (!patch.domain.contains(x2)) return false;
  geodesic_rhs(patch, x2, s.velocity + 0.5 * h * k1v, k2x, k2v);
  Vec x3 = s.position + 0.5 * h * k2x;
  if (!patch.domain.contains(x3)) return false;
  geodesic_rhs(patch, x3, s.velocity + 0.5 * h * k2v, k3x, k3v);
  Vec x4 = s.position + h * k3x;
  if (!patch.domain.contains(x4)) return false;
  geodesic_rhs(patch, x4, s.velocity + h * k3v, k4x, k4v);
  s.position += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
  s.velocity += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
  s.time += h;
  return patch.domain.contains(s.position);
}
}  // namespace detail

/// Classical RK4 integration of the geodesic equation x'' + Gamma(x)(x',x') = 0.
/// The trajectory is truncated (domain_exit set) if it leaves the patch;
/// metric speed drift beyond 1e-3 raises StepTooLarge.
inline GeodesicTrajectory geodesic_flow(const ManifoldPatch& patch,
                                        const GeodesicState& state0, Interval t_span,
                                        double step = 1e-3) {
  if (step <= 0.0) throw StepTooLarge("step must be positive");
  if (!patch.domain.contains(state0.position))
    throw OutOfDomain("geodesic_flow: start outside patch domain");

  GeodesicTrajectory traj;
  GeodesicState s = state0;
  s.time = t_span.lo;
  traj.states.push_back(s);

  const double speed0 = metric_norm(patch, s.position, s.velocity);
  const double dir = t_span.hi >= t_span.lo ? 1.0 : -1.0;
  const double total = std::abs(t_span.hi - t_span.lo);
  const long nsteps = std::max(1L, long(std::ceil(total / step)));
  const double h = dir * total / double(nsteps);

  for (long i = 0; i < nsteps; ++i) {
    GeodesicState prev = s;
    if (!detail::rk4_step(patch, s, h)) {
      // bisect the exit time inside the failed step
      double lo = 0.0, hi = 1.0;
      for (int it = 0; it < 40; ++it) {
        double mid = 0.5 * (lo + hi);
        GeodesicState probe = prev;
        if (detail::rk4_step(patch, probe, h * mid)) lo = mid;
        else hi = mid;
      }
      if (lo > 0.0) {
        GeodesicState last = prev;
        if (detail::rk4_step(patch, last, h * lo)) traj.states.push_back(last);
      }
      traj.domain_exit = true;
      traj.exit_time = prev.time + h * lo;
      return traj;
    }
    if (std::abs(s.position.norm()) > 1e6)
      throw DomainExit("geodesic_flow: position blow-up beyond 1e6");
    double drift = std::abs(metric_norm(patch, s.position, s.velocity) - speed0);
    traj.max_speed_drift = std::max(traj.max_speed_drift, drift);
    if (drift > 1e-3 * std::max(1.0, speed0))
      throw StepTooLarge("geodesic speed drift exceeded 1e-3");
    traj.states.push_back(s);
  }
  return traj;
}

/// Endpoint of the unit-time geodesic from (x, v).
inline Vec exp_point(const ManifoldPatch& patch, const Vec& x, const Vec& v,
                     double step = 1e-3) {
  if (v.norm() == 0.0) {
    if (!patch.domain.contains(x)) throw OutOfDomain("exp_point: base outside domain");
    return x;
  }
  GeodesicTrajectory traj = geodesic_flow(patch, {x, v, 0.0}, {0.0, 1.0}, step);
  if (traj.domain_exit)
    throw DomainExit("exp_point: geodesic left the patch before t=1");
  return traj.back().position;
}

/// Metric length of the straight coordinate chord x -> y (composite
/// Gauss-Legendre). An upper bound on d(x, y) whenever the chord is valid.
inline double chord_length(const ManifoldPatch& patch, const Vec& x, const Vec& y,
                           int min_segments = 1) {
  static const double gl_nodes[4] = {0.069431844202973712, 0.33000947820757187,
                                     0.66999052179242813, 0.93056815579702629};
  static const double gl_weights[4] = {0.17392742256872693, 0.32607257743127307,
                                       0.32607257743127307, 0.17392742256872693};
  Vec d = y - x;
  double coord_len = d.norm();
  if (coord_len == 0.0) return 0.0;
  int nseg = std::max(min_segments, std::min(200, int(coord_len / 0.05) + 1));
  double total = 0.0;
  for (int s = 0; s < nseg; ++s) {
    double a = double(s) / nseg, b = double(s + 1) / nseg;
    for (int q = 0; q < 4; ++q) {
      double u = a + (b - a) * gl_nodes[q];
      total += (b - a) * gl_weights[q] * metric_norm(patch, x + u * d, d);
    }
  }
  return total;
}

inline bool chord_in_domain(const ManifoldPatch& patch, const Vec& x, const Vec& y,
                            int samples = 9) {
  for (int i = 0; i <= samples; ++i) {
    double u = double(i) / samples;
    if (!patch.domain.contains(x + u * (y - x))) return false;
  }
  return true;
}

namespace detail {

struct PatchGrid {
  std::vector<Vec> nodes;
  std::vector<std::vector<std::pair<int, double>>> adjacency;
};

/// Uniform grid over the domain box filtered by the domain, with chord-weight
/// edges between near neighbors.
inline PatchGrid build_patch_grid(const ManifoldPatch& patch, double spacing,
                                  const std::vector<Vec>& extra) {
  PatchGrid grid;
  const int n = patch.dim;
  std::vector<int> counts(n);
  std::vector<double> steps(n);
  long total = 1;
  for (int i = 0; i < n; ++i) {
    double extent = patch.domain.hi[i] - patch.domain.lo[i];
    counts[i] = std::max(2, int(std::floor(extent / spacing)) + 1);
    steps[i] = extent / (counts[i] - 1);
    total *= counts[i];
  }
  if (total > 4'000'000)
    throw BudgetExceeded("patch grid would exceed 4e6 nodes; raise the resolution");
  for (long idx = 0; idx < total; ++idx) {
    long rem = idx;
    Vec x(n);
    for (int i = 0; i < n; ++i) {
      int c = int(rem % counts[i]);
      rem /= counts[i];
      x[i] = patch.domain.lo[i] + c * steps[i];
    }
    if (patch.domain.contains(x)) grid.nodes.push_back(x);
  }
  for (const Vec& x : extra)
    if (patch.domain.contains(x)) grid.nodes.push_back(x);

  // spatial hash for neighbor lookup
  double cell = spacing * 1.01;
  auto key_of = [&](const Vec& x) {
    long k = 0;
    for (int i = 0; i < n; ++i)
      k = k * 73856093 + long(std::floor((x[i] - patch.domain.lo[i]) / cell));
    return k;
  };
  std::unordered_map<long, std::vector<int>> cells;
  for (int i = 0; i < int(grid.nodes.size()); ++i)
    cells[key_of(grid.nodes[i])].push_back(i);

  double radius = 1.6 * spacing;
  grid.adjacency.assign(grid.nodes.size(), {});
  std::vector<std::vector<std::pair<int, double>>>& adj = grid.adjacency;
  parallel_for(grid.nodes.size(), [&](std::size_t i) {
    const Vec& xi = grid.nodes[i];
    std::vector<long> probe;
    // enumerate neighboring cells (3^n stencil)
    int stencil = 1;
    long combos = 1;
    for (int d = 0; d < n; ++d) combos *= (2 * stencil + 1);
    for (long c = 0; c < combos; ++c) {
      long rem = c;
      Vec shifted = xi;
      for (int d = 0; d < n; ++d) {
        int off = int(rem % (2 * stencil + 1)) - stencil;
        rem /= (2 * stencil + 1);
        shifted[d] += off * cell;
      }
      probe.push_back(key_of(shifted));
    }
    for (long k : probe) {
      auto it = cells.find(k);
      if (it == cells.end()) continue;
      for (int j : it->second) {
        if (j <= int(i)) continue;
        const Vec& xj = grid.nodes[j];
        if ((xj - xi).norm() > radius) continue;
        if (!chord_in_domain(patch, xi, xj, 4)) continue;
        double w = chord_length(patch, xi, xj);
        adj[i].push_back({j, w});
      }
    }
  });
  // mirror edges (built upper-triangular above)
  for (int i = 0; i < int(adj.size()); ++i)
    for (auto [j, w] : std::vector<std::pair<int, double>>(adj[i]))
      adj[j].push_back({i, w});
  return grid;
}

/// Drop interior polyline nodes whenever the direct chord is valid and
/// shorter. Converges to taut polylines on convex pieces.
inline std::vector<Vec> shortcut_path(const ManifoldPatch& patch, std::vector<Vec> path) {
  bool changed = true;
  int passes = 0;
  while (changed && passes++ < 60) {
    changed = false;
    for (std::size_t i = 1; i + 1 < path.size();) {
      double through = chord_length(patch, path[i - 1], path[i]) +
                       chord_length(patch, path[i], path[i + 1]);
      if (chord_in_domain(patch, path[i - 1], path[i + 1]) &&
          chord_length(patch, path[i - 1], path[i + 1]) < through - 1e-14) {
        path.erase(path.begin() + long(i));
        changed = true;
      } else {
        ++i;
      }
    }
  }
  return path;
}

inline double polyline_length(const ManifoldPatch& patch, const std::vector<Vec>& path) {
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < path.size(); ++i)
    total += chord_length(patch, path[i], path[i + 1], 4);
  return total;
}

}  // namespace detail

/// Upper bound on the Riemannian distance d(x, y): shortest path on a grid
/// graph with chord weights, straightened by shortcutting; converges to d as
/// resolution -> 0.
inline double riemannian_distance(const ManifoldPatch& patch, const Vec& x_in,
                                  const Vec& y_in, double resolution) {
  if (!patch.domain.contains(x_in) || !patch.domain.contains(y_in))
    throw OutOfDomain("riemannian_distance: endpoint outside domain");
  if ((x_in - y_in).norm() == 0.0) return 0.0;
  // canonical endpoint order keeps the result exactly symmetric
  bool swap = false;
  for (int i = 0; i < x_in.size(); ++i) {
    if (x_in[i] != y_in[i]) {
      swap = x_in[i] > y_in[i];
      break;
    }
  }
  const Vec& x = swap ? y_in : x_in;
  const Vec& y = swap ? x_in : y_in;

  double direct = std::numeric_limits<double>::infinity();
  if (chord_in_domain(patch, x, y, 64)) direct = chord_length(patch, x, y, 8);

  detail::PatchGrid grid = detail::build_patch_grid(patch, resolution, {x, y});
  int src = -1, dst = -1;
  for (int i = 0; i < int(grid.nodes.size()); ++i) {
    if ((grid.nodes[i] - x).norm() == 0.0) src = i;
    if ((grid.nodes[i] - y).norm() == 0.0) dst = i;
  }
  if (src < 0 || dst < 0) {
    if (!std::isinf(direct)) return direct;
    throw Disconnected("riemannian_distance: endpoint not representable in grid");
  }
  auto [dist, parent] = dijkstra(grid.adjacency, src);
  if (std::isinf(dist[dst])) {
    if (!std::isinf(direct)) return direct;
    throw Disconnected("riemannian_distance: no graph path between endpoints");
  }
  std::vector<Vec> path;
  for (int v = dst; v >= 0; v = parent[v])
    path.push_back(grid.nodes[v]);
  std::reverse(path.begin(), path.end());
  double smoothed = detail::polyline_length(patch, detail::shortcut_path(patch, path));
  return std::min(direct, smoothed);
}

// ---------------------------------------------------------------------------
// Stock metric fields

inline ManifoldPatch make_euclidean_patch(const Vec& lo, const Vec& hi) {
  ManifoldPatch p;
  p.dim = int(lo.size());
  p.domain = Domain::box(lo, hi);
  int n = p.dim;
  p.metric = [n](const Vec&) { return Mat::Identity(n, n); };
  p.christoffel = [n](const Vec&) { return std::vector<Mat>(n, Mat::Zero(n, n)); };
  p.name = "euclidean";
  return p;
}

/// Polar coordinates (r, phi) with g = diag(1, r^2); r must stay positive.
inline ManifoldPatch make_polar_patch(const Vec& lo, const Vec& hi) {
  ManifoldPatch p;
  p.dim = 2;
  p.domain = Domain::box(lo, hi);
  p.metric = [](const Vec& x) {
    Mat g = Mat::Identity(2, 2);
    g(1, 1) = sq(x[0]);
    return g;
  };
  p.christoffel = [](const Vec& x) {
    std::vector<Mat> gamma(2, Mat::Zero(2, 2));
    gamma[0](1, 1) = -x[0];
    gamma[1](0, 1) = gamma[1](1, 0) = 1.0 / x[0];
    return gamma;
  };
  p.name = "polar";
  return p;
}

namespace detail {
/// Conformal metric e^{2u} I with analytic Christoffels from grad u.
inline ManifoldPatch make_conformal(int dim, const Vec& lo, const Vec& hi,
                                    std::function<double(const Vec&)> u,
                                    std::function<Vec(const Vec&)> grad_u,
                                    std::string name) {
  ManifoldPatch p;
  p.dim = dim;
  p.domain = Domain::box(lo, hi);
  p.metric = [u, dim](const Vec& x) {
    return std::exp(2.0 * u(x)) * Mat::Identity(dim, dim);
  };
  if (grad_u) {
    p.christoffel = [grad_u, dim](const Vec& x) {
      Vec du = grad_u(x);
      std::vector<Mat> gamma(dim, Mat::Zero(dim, dim));
      for (int k = 0; k < dim; ++k)
        for (int i = 0; i < dim; ++i)
          for (int j = 0; j < dim; ++j) {
            double v = 0.0;
            if (k == i) v += du[j];
            if (k == j) v += du[i];
            if (i == j) v -= du[k];
            gamma[k](i, j) = v;
          }
      return gamma;
    };
  }
  p.name = std::move(name);
  return p;
}
}  // namespace detail

/// Round sphere of radius R in a stereographic chart: g = 4R^4/(R^2+|x|^2)^2 I.
inline ManifoldPatch make_sphere_stereographic_patch(const Vec& lo, const Vec& hi,
                                                     double radius = 1.0) {
  int dim = int(lo.size());
  double R2 = sq(radius);
  auto u = [R2](const Vec& x) {
    return std::log(2.0 * R2 / (R2 + x.squaredNorm()));
  };
  auto grad_u = [R2](const Vec& x) {
    return Vec(-2.0 * x / (R2 + x.squaredNorm()));
  };
  return detail::make_conformal(dim, lo, hi, u, grad_u, "sphere-stereographic");
}

/// Conformal metric e^{2u} I with u given as an expression over x1..xn.
inline ManifoldPatch make_conformal_patch(const Vec& lo, const Vec& hi,
                                          const Expression& u_expr) {
  int dim = int(lo.size());
  auto u = [u_expr](const Vec& x) { return u_expr.eval(x); };
  auto grad_u = [u_expr, dim](const Vec& x) {
    Vec g(dim);
    double h = 1e-6;
    for (int i = 0; i < dim; ++i) {
      Vec xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      g[i] = (u_expr.eval(xp) - u_expr.eval(xm)) / (2.0 * h);
    }
    return g;
  };
  return detail::make_conformal(dim, lo, hi, u, grad_u, "conformal");
}

/// Metric given entrywise as expressions over x1..xn; Christoffels by FD.
inline ManifoldPatch make_expression_patch(const Vec& lo, const Vec& hi,
                                           std::vector<std::vector<Expression>> entries) {
  ManifoldPatch p;
  p.dim = int(lo.size());
  p.domain = Domain::box(lo, hi);
  int n = p.dim;
  p.metric = [entries, n](const Vec& x) {
    Mat g(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        g(i, j) = entries[i][j].eval(x);
    return g;
  };
  p.name = "expression";
  return p;
}

}  // namespace stacky
