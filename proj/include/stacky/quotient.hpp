#pragma once

#include "stacky/curves.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace stacky {

/// Chain (x_0,...,x_{2n+1}): even pairs (x_{2i}, x_{2i+1}) share an orbit,
/// the cost sums the Riemannian distances over the odd pairs (x_{2i-1}, x_{2i}).
struct Chain {
  std::vector<Vec> points;
};

inline double chain_length(const GroupoidModel& model, const Chain& chain,
                           double resolution = 0.05, double orbit_tol = 1e-6) {
  const std::vector<Vec>& p = chain.points;
  if (p.size() < 2 || p.size() % 2 != 0)
    throw InvalidChain("chain needs an even number of points, at least two");
  for (std::size_t i = 0; i + 1 < p.size(); i += 2)
    if (!same_orbit(model, p[i], p[i + 1], orbit_tol))
      throw InvalidChain("chain points " + std::to_string(i) + "," +
                         std::to_string(i + 1) + " are not in one orbit");
  double total = 0.0;
  for (std::size_t i = 1; i + 1 < p.size(); i += 2)
    total += riemannian_distance(model.patch, p[i], p[i + 1], resolution);
  return total;
}

// ---------------------------------------------------------------------------
// Orbit graph: sampled nodes, chord-weight metric edges, zero-cost orbit edges

struct OrbitGraphParams {
  double delta = 0.0;  // node spacing; 0 = domain diameter / 200
  int k_neighbors = 8;
  std::uint64_t seed = 1;
  bool jitter = false;  // quasi-random perturbation of the grid nodes
  Vec box_lo, box_hi;   // optional window; empty = patch box
};

struct OrbitGraph {
  std::shared_ptr<const GroupoidModel> model;
  OrbitGraphParams params;
  double delta = 0.0;
  std::vector<Vec> nodes;
  std::vector<std::vector<std::pair<int, double>>> adjacency;
  std::vector<int> bucket_of;             // orbit bucket per node
  std::vector<std::vector<int>> buckets;  // bucket id -> member nodes
  std::vector<OrbitKey> bucket_keys;      // key of the bucket hub
  bool connected = false;
};

namespace detail {

inline std::string bucket_cell(const OrbitKey& key, double cell) {
  std::ostringstream out;
  out << key.component;
  for (int i = 0; i < key.value.size(); ++i)
    out << ':' << long(std::floor(key.value[i] / cell));
  return out.str();
}

struct BucketIndex {
  std::map<std::string, int> by_cell;
  double cell = 0.0;
};

}  // namespace detail

/// Build the d_N approximator: grid nodes, k-nearest metric edges weighted by
/// chord length, zero-weight star edges inside orbit buckets (key quantized at
/// delta/4), buckets merged across chart transitions.
inline OrbitGraph make_orbit_graph(std::shared_ptr<const GroupoidModel> model,
                                   OrbitGraphParams params = {}) {
  OrbitGraph graph;
  graph.model = model;
  const ManifoldPatch& patch = model->patch;
  const int dim = patch.dim;

  Vec lo = params.box_lo.size() == dim ? params.box_lo : patch.domain.lo;
  Vec hi = params.box_hi.size() == dim ? params.box_hi : patch.domain.hi;
  double delta = params.delta > 0.0 ? params.delta : (hi - lo).norm() / 200.0;
  graph.delta = delta;
  graph.params = params;
  graph.params.delta = delta;

  // nodes on a grid, optionally jittered (quasi-random sampling)
  std::vector<int> counts(dim);
  std::vector<double> steps(dim);
  long total = 1;
  for (int i = 0; i < dim; ++i) {
    counts[i] = std::max(2, int(std::floor((hi[i] - lo[i]) / delta)) + 1);
    steps[i] = (hi[i] - lo[i]) / (counts[i] - 1);
    total *= counts[i];
  }
  if (total > 2'000'000)
    throw BudgetExceeded("orbit graph would exceed 2e6 nodes; raise delta");
  Rng rng(params.seed);
  for (long idx = 0; idx < total; ++idx) {
    long rem = idx;
    Vec x(dim);
    for (int i = 0; i < dim; ++i) {
      int c = int(rem % counts[i]);
      rem /= counts[i];
      x[i] = lo[i] + c * steps[i];
    }
    if (params.jitter)
      for (int i = 0; i < dim; ++i) x[i] += rng.uniform(-0.25, 0.25) * steps[i];
    if (patch.domain.contains(x)) graph.nodes.push_back(x);
  }
  const int n = int(graph.nodes.size());
  if (n == 0) throw OutOfDomain("orbit graph: no nodes inside the domain");

  // spatial hash for k-nearest search
  double cell = delta * 1.01;
  auto cell_key = [&](const Vec& x) {
    long k = 0;
    for (int i = 0; i < dim; ++i)
      k = k * 73856093 + long(std::floor((x[i] - lo[i]) / cell));
    return k;
  };
  std::unordered_map<long, std::vector<int>> cells;
  for (int i = 0; i < n; ++i) cells[cell_key(graph.nodes[i])].push_back(i);

  auto neighbors_of = [&](const Vec& x, int k_want, int exclude) {
    std::vector<std::pair<double, int>> found;
    for (int ring = 1; ring <= 4 && int(found.size()) < k_want; ++ring) {
      found.clear();
      long combos = 1;
      for (int d = 0; d < dim; ++d) combos *= (2 * ring + 1);
      for (long c = 0; c < combos; ++c) {
        long rem = c;
        Vec shifted = x;
        for (int d = 0; d < dim; ++d) {
          int off = int(rem % (2 * ring + 1)) - ring;
          rem /= (2 * ring + 1);
          shifted[d] += off * cell;
        }
        auto it = cells.find(cell_key(shifted));
        if (it == cells.end()) continue;
        for (int j : it->second) {
          if (j == exclude) continue;
          double dist = (graph.nodes[j] - x).norm();
          if (dist <= ring * cell * 1.5) found.push_back({dist, j});
        }
      }
    }
    std::sort(found.begin(), found.end(),
              [](const auto& a, const auto& b) {
                return a.first != b.first ? a.first < b.first : a.second < b.second;
              });
    if (int(found.size()) > k_want) found.resize(std::size_t(k_want));
    return found;
  };

  graph.adjacency.assign(std::size_t(n), {});
  parallel_for(std::size_t(n), [&](std::size_t i) {
    for (auto [dist, j] : neighbors_of(graph.nodes[i], params.k_neighbors, int(i))) {
      (void)dist;
      if (!chord_in_domain(patch, graph.nodes[i], graph.nodes[std::size_t(j)], 4))
        continue;
      double w = chord_length(patch, graph.nodes[i], graph.nodes[std::size_t(j)]);
      graph.adjacency[i].push_back({j, w});
    }
  });
  // symmetrize (k-nearest is not symmetric)
  for (int i = 0; i < n; ++i)
    for (auto [j, w] : std::vector<std::pair<int, double>>(graph.adjacency[std::size_t(i)])) {
      bool present = false;
      for (auto [jj, ww] : graph.adjacency[std::size_t(j)])
        if (jj == i) present = true;
      if (!present) graph.adjacency[std::size_t(j)].push_back({i, w});
    }

  // orbit buckets at delta/4 quantization
  double bucket_cell_width = delta / 4.0;
  detail::BucketIndex index;
  index.cell = bucket_cell_width;
  graph.bucket_of.assign(std::size_t(n), -1);
  std::vector<OrbitKey> keys;
  keys.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) keys.push_back(orbit_key(*model, graph.nodes[std::size_t(i)]));
  for (int i = 0; i < n; ++i) {
    std::string cell_id = detail::bucket_cell(keys[std::size_t(i)], bucket_cell_width);
    auto [it, inserted] = index.by_cell.insert({cell_id, int(graph.buckets.size())});
    if (inserted) {
      graph.buckets.push_back({});
      graph.bucket_keys.push_back(keys[std::size_t(i)]);
    }
    graph.bucket_of[std::size_t(i)] = it->second;
    graph.buckets[std::size_t(it->second)].push_back(i);
  }
  // zero-weight star inside each bucket
  for (const std::vector<int>& bucket : graph.buckets) {
    for (std::size_t m = 1; m < bucket.size(); ++m) {
      graph.adjacency[std::size_t(bucket[0])].push_back({bucket[m], 0.0});
      graph.adjacency[std::size_t(bucket[m])].push_back({bucket[0], 0.0});
    }
  }
  // merge buckets across chart transitions (leaf/chart-chain identification)
  for (const KeyTransition& tr : key_transitions(*model)) {
    for (const auto& [cell_id, bid] : index.by_cell) {
      const std::vector<int>& bucket = graph.buckets[std::size_t(bid)];
      if (bucket.empty()) continue;
      const OrbitKey& key = keys[std::size_t(bucket[0])];
      if (key.component != tr.from_component) continue;
      if (!detail::in_window(key.value, tr.valid_lo, tr.valid_hi, 1e-12)) continue;
      OrbitKey mapped{tr.to_component, tr.map.apply(key.value)};
      auto it = index.by_cell.find(detail::bucket_cell(mapped, bucket_cell_width));
      if (it == index.by_cell.end()) continue;
      int other = it->second;
      if (other == bid || graph.buckets[std::size_t(other)].empty()) continue;
      int hub_a = bucket[0], hub_b = graph.buckets[std::size_t(other)][0];
      graph.adjacency[std::size_t(hub_a)].push_back({hub_b, 0.0});
      graph.adjacency[std::size_t(hub_b)].push_back({hub_a, 0.0});
    }
  }

  // connectivity at this resolution
  std::vector<char> seen(std::size_t(n), 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  int reached = 1;
  while (!stack.empty()) {
    int u = stack.back();
    stack.pop_back();
    for (auto [v, w] : graph.adjacency[std::size_t(u)])
      if (!seen[std::size_t(v)]) {
        seen[std::size_t(v)] = 1;
        ++reached;
        stack.push_back(v);
      }
  }
  graph.connected = reached == n;
  return graph;
}

// ---------------------------------------------------------------------------
// d_N queries

/// d_N reported as an interval: `value` is the graph upper bound, `lower` a
/// crude value - 2*delta*hops floor.
struct DistanceResult {
  double value = 0.0;
  double lower = 0.0;
  int hops = 0;
  double delta = 0.0;
  std::vector<Vec> path;          // node positions including the query points
  std::vector<bool> edge_is_zero;  // per path edge
};

namespace detail {

inline std::vector<std::pair<int, double>> query_links(const OrbitGraph& graph,
                                                       const Vec& x) {
  const ManifoldPatch& patch = graph.model->patch;
  std::vector<std::pair<double, int>> cand;
  for (int i = 0; i < int(graph.nodes.size()); ++i)
    cand.push_back({(graph.nodes[std::size_t(i)] - x).norm(), i});
  std::sort(cand.begin(), cand.end());
  std::vector<std::pair<int, double>> links;
  int taken = 0;
  for (auto [dist, i] : cand) {
    if (taken >= graph.params.k_neighbors && dist > 2.0 * graph.delta) break;
    if (!chord_in_domain(patch, x, graph.nodes[std::size_t(i)], 4)) continue;
    links.push_back({i, chord_length(patch, x, graph.nodes[std::size_t(i)])});
    ++taken;
    if (taken >= 2 * graph.params.k_neighbors) break;
  }
  // zero links into the orbit buckets matching x's key
  OrbitKey key = orbit_key(*graph.model, x);
  for (std::size_t b = 0; b < graph.buckets.size(); ++b) {
    if (graph.buckets[b].empty()) continue;
    const OrbitKey& hub_key = graph.bucket_keys[b];
    if (hub_key.component != key.component) continue;
    if ((hub_key.value - key.value).norm() <= graph.delta / 4.0)
      links.push_back({graph.buckets[b][0], 0.0});
  }
  return links;
}

}  // namespace detail

inline DistanceResult d_N(const OrbitGraph& graph, const Vec& x, const Vec& y) {
  const GroupoidModel& model = *graph.model;
  const ManifoldPatch& patch = model.patch;
  if (!patch.domain.contains(x) || !patch.domain.contains(y))
    throw OutOfDomain("d_N: query point outside domain");

  DistanceResult out;
  out.delta = graph.delta;
  if (same_orbit(model, x, y, graph.delta / 4.0)) {
    out.path = {x, y};
    out.edge_is_zero = {true};
    return out;  // zero by definition at graph resolution
  }

  const int n = int(graph.nodes.size());
  std::vector<std::vector<std::pair<int, double>>> adj = graph.adjacency;
  adj.resize(std::size_t(n) + 2);
  int xi = n, yi = n + 1;
  for (auto [j, w] : detail::query_links(graph, x)) {
    adj[std::size_t(xi)].push_back({j, w});
    adj[std::size_t(j)].push_back({xi, w});
  }
  for (auto [j, w] : detail::query_links(graph, y)) {
    adj[std::size_t(yi)].push_back({j, w});
    adj[std::size_t(j)].push_back({yi, w});
  }
  if (chord_in_domain(patch, x, y, 16)) {
    double w = chord_length(patch, x, y, 4);
    adj[std::size_t(xi)].push_back({yi, w});
    adj[std::size_t(yi)].push_back({xi, w});
  }

  auto [dist, parent] = dijkstra(adj, xi);
  if (std::isinf(dist[std::size_t(yi)]))
    throw Disconnected("d_N: no graph path between the query orbits");

  // reconstruct, then straighten every metric run between zero edges
  std::vector<int> path_ids;
  for (int v = yi; v >= 0; v = parent[std::size_t(v)]) path_ids.push_back(v);
  std::reverse(path_ids.begin(), path_ids.end());
  auto node_pos = [&](int id) -> const Vec& {
    if (id == xi) return x;
    if (id == yi) return y;
    return graph.nodes[std::size_t(id)];
  };
  auto edge_weight = [&](int a, int b) {
    double best = std::numeric_limits<double>::infinity();
    for (auto [j, w] : adj[std::size_t(a)])
      if (j == b) best = std::min(best, w);
    return best;
  };

  double total = 0.0;
  std::vector<Vec> run{node_pos(path_ids[0])};
  out.path.push_back(node_pos(path_ids[0]));
  for (std::size_t i = 0; i + 1 < path_ids.size(); ++i) {
    double w = edge_weight(path_ids[i], path_ids[i + 1]);
    bool zero = w == 0.0;
    out.hops += 1;
    if (zero) {
      if (run.size() > 1) {
        std::vector<Vec> smooth = detail::shortcut_path(patch, run);
        total += detail::polyline_length(patch, smooth);
        for (std::size_t s = 1; s < smooth.size(); ++s) {
          out.path.push_back(smooth[s]);
          out.edge_is_zero.push_back(false);
        }
      }
      out.path.push_back(node_pos(path_ids[i + 1]));
      out.edge_is_zero.push_back(true);
      run = {node_pos(path_ids[i + 1])};
    } else {
      run.push_back(node_pos(path_ids[i + 1]));
    }
  }
  if (run.size() > 1) {
    std::vector<Vec> smooth = detail::shortcut_path(patch, run);
    total += detail::polyline_length(patch, smooth);
    for (std::size_t s = 1; s < smooth.size(); ++s) {
      out.path.push_back(smooth[s]);
      out.edge_is_zero.push_back(false);
    }
  }
  out.value = total;
  out.lower = std::max(0.0, total - 2.0 * graph.delta * out.hops);
  return out;
}

// ---------------------------------------------------------------------------
// d_N through stacky curves (the distance-length theorem, numerically)

/// Build a stacky curve from a d_N path: metric runs become polyline
/// segments, zero edges become cocycle transitions through witness arrows
/// (constant tails keep the transition term at zero), then measure with the
/// length functional.
inline StackyCurve path_to_curve(std::shared_ptr<const GroupoidModel> model,
                                 const DistanceResult& query) {
  const GroupoidModel& m = *model;
  const ManifoldPatch& patch = m.patch;
  if (query.path.size() < 2) {
    // same-orbit query: a constant curve
    ParamCurve constant;
    constant.span = {0.0, 1.0};
    Vec p = query.path.empty() ? Vec() : query.path.front();
    constant.pos = [p](double) { return p; };
    constant.vel = [dim = p.size()](double) { return Vec::Zero(dim); };
    return single_segment_curve(model, constant);
  }

  const double pause = 0.25;  // parameter width of each orbit jump
  struct Leg {
    std::vector<double> times;
    std::vector<Vec> points;
  };
  std::vector<Leg> legs;
  std::vector<Arrow> jumps;
  Leg current;
  double clock = 0.0;
  current.times.push_back(clock);
  current.points.push_back(query.path.front());
  for (std::size_t e = 0; e + 1 < query.path.size(); ++e) {
    const Vec& a = query.path[e];
    const Vec& b = query.path[e + 1];
    if (query.edge_is_zero[e]) {
      std::optional<Arrow> arrow = find_arrow(m, a, b, 1e-5);
      if (!arrow)
        throw InvalidChain("path_to_curve: zero edge without a witness arrow");
      jumps.push_back(*arrow);
      legs.push_back(std::move(current));
      current = Leg{};
      clock += pause;
      current.times.push_back(clock);
      current.points.push_back(b);
    } else {
      clock += std::max((b - a).norm(), 1e-9);
      current.times.push_back(clock);
      current.points.push_back(b);
    }
  }
  legs.push_back(std::move(current));

  StackyCurve curve;
  curve.model = model;
  const double half = 0.6 * pause;  // lead/tail past the jump so covers overlap
  for (std::size_t i = 0; i < legs.size(); ++i) {
    Leg leg = legs[i];
    double lead = i > 0 ? half : 0.0;
    double tail = i + 1 < legs.size() ? half : 0.0;
    std::vector<double> times = leg.times;
    std::vector<Vec> pts = leg.points;
    if (leg.times.size() == 1) {
      times = {leg.times[0] - 1e-6, leg.times[0] + 1e-6};
      pts = {leg.points[0], leg.points[0]};
    }
    if (lead > 0.0) {
      times.insert(times.begin(), times.front() - lead);
      pts.insert(pts.begin(), pts.front());
    }
    if (tail > 0.0) {
      times.push_back(times.back() + tail);
      pts.push_back(pts.back());
    }
    ParamCurve seg = polyline_curve(times, pts);
    curve.cocycle.cover.push_back({times.front(), times.back()});
    curve.cocycle.segments.push_back(std::move(seg));
    if (i > 0) {
      const Arrow jump = jumps[i - 1];
      CocycleTransition tr;
      tr.overlap = {curve.cocycle.cover.back().lo,
                    curve.cocycle.cover[curve.cocycle.cover.size() - 2].hi};
      tr.arrow = [jump](double) { return jump; };
      curve.cocycle.transitions.push_back(std::move(tr));
    }
  }
  curve.interval = {curve.cocycle.cover.front().lo, curve.cocycle.cover.back().hi};
  return curve;
}

struct CurveDistanceResult {
  double value = 0.0;
  DistanceResult graph_query;
  StackyCurve curve;
};

inline CurveDistanceResult d_N_via_curves(const OrbitGraph& graph, const Vec& x,
                                          const Vec& y, long budget = 200000) {
  DistanceResult q = d_N(graph, x, y);
  if (long(q.path.size()) > budget)
    throw BudgetExceeded("d_N_via_curves: path too long for the budget");
  CurveDistanceResult out;
  out.graph_query = q;
  out.curve = path_to_curve(graph.model, q);
  validate_cocycle(out.curve, 8, 1e-4);
  out.value = length(out.curve, 1e-8);
  return out;
}

// ---------------------------------------------------------------------------
// Metric axioms report

struct MetricAxiomsReport {
  double worst_symmetry = 0.0;
  double worst_triangle = 0.0;   // max of d(x,z) - d(x,y) - d(y,z)
  double worst_upper = 0.0;      // max of d_N - (d + 2 delta)
  double min_positive = std::numeric_limits<double>::infinity();
  int pairs_checked = 0;
  bool positivity_applicable = true;
  bool pass(double slack) const {
    return worst_symmetry <= slack && worst_triangle <= slack && worst_upper <= slack &&
           (!positivity_applicable || min_positive > 0.0);
  }
};

inline MetricAxiomsReport metric_axioms_report(const OrbitGraph& graph,
                                               const std::vector<Vec>& sample_points,
                                               bool proper_model = true) {
  MetricAxiomsReport report;
  report.positivity_applicable = proper_model;
  const GroupoidModel& model = *graph.model;
  std::size_t n = sample_points.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      d[i][j] = d_N(graph, sample_points[i], sample_points[j]).value;
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      ++report.pairs_checked;
      report.worst_symmetry =
          std::max(report.worst_symmetry, std::abs(d[i][j] - d[j][i]));
      double ambient =
          riemannian_distance(model.patch, sample_points[i], sample_points[j],
                              graph.delta);
      report.worst_upper = std::max(
          report.worst_upper, d[i][j] - (ambient + 2.0 * graph.delta));
      if (proper_model && !same_orbit(model, sample_points[i], sample_points[j],
                                      graph.delta / 4.0))
        report.min_positive = std::min(report.min_positive, d[i][j]);
      for (std::size_t k = 0; k < n; ++k) {
        if (k == i || k == j) continue;
        report.worst_triangle =
            std::max(report.worst_triangle, d[i][j] - d[i][k] - d[k][j]);
      }
    }
  return report;
}

}  // namespace stacky
