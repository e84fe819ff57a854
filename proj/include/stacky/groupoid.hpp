#pragma once

#include "stacky/expression.hpp"
#include "stacky/geometry.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <deque>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

namespace stacky {

struct AffineIsometry {
  Mat matrix;
  Vec translation;

  Vec apply(const Vec& x) const { return matrix * x + translation; }
  Vec apply_linear(const Vec& v) const { return matrix * v; }
  AffineIsometry inverse() const {
    Mat inv = matrix.inverse();
    return {inv, -(inv * translation)};
  }
  AffineIsometry compose(const AffineIsometry& inner) const {
    return {matrix * inner.matrix, matrix * inner.translation + translation};
  }
  bool approx(const AffineIsometry& other, double tol = 1e-9) const {
    return (matrix - other.matrix).cwiseAbs().maxCoeff() < tol &&
           (translation - other.translation).cwiseAbs().maxCoeff() < tol;
  }
  static AffineIsometry identity(int dim) {
    return {Mat::Identity(dim, dim), Vec::Zero(dim)};
  }
  bool is_identity(double tol = 1e-12) const {
    return approx(identity(int(translation.size())), tol);
  }
  bool is_translation(double tol = 1e-12) const {
    return (matrix - Mat::Identity(matrix.rows(), matrix.cols())).cwiseAbs().maxCoeff() <
           tol;
  }
};

/// Isometric action data: a finite group given by generators, one-parameter
/// rotation subgroups given by skew linear fields, or a translation lattice.
/// Finite parts and rotations may be combined; lattices stay alone.
struct ActionPayload {
  std::vector<AffineIsometry> finite_isometries;  // generators
  std::vector<Mat> rotation_generators;           // Killing fields x -> A x
  std::vector<Vec> lattice_translations;          // lattice basis vectors

  // derived on construction
  std::vector<AffineIsometry> finite_closure;  // generated group, identity first
  Mat lattice_basis;                           // columns = lattice vectors
};

struct SubmersionPayload {
  std::vector<Expression> projection;  // p : M -> R^q, full rank
};

struct FoliationChart {
  Domain region;                       // V_i subset of M
  std::vector<Expression> submersion;  // f_i : V_i -> W_i
  Vec w_lo, w_hi;                      // W_i box
  std::function<Mat(const Vec&)> transverse_metric;  // on W_i; empty = euclidean
};

struct FoliationTransition {
  int from_chart = 0;  // i
  int to_chart = 0;    // j, gamma_ji : W_i -> W_j
  AffineIsometry map;
  Vec valid_lo, valid_hi;  // applicability window in W_i coordinates
};

struct FoliationAtlasPayload {
  std::vector<FoliationChart> charts;
  std::vector<FoliationTransition> transitions;
};

struct OrbifoldChart {
  Domain region;
  std::vector<AffineIsometry> group;  // full finite group incl. identity
};

struct OrbifoldEmbedding {
  int from_chart = 0;
  int to_chart = 0;
  AffineIsometry map;
  Domain valid;  // subset of the source chart
};

struct OrbifoldChartsPayload {
  std::vector<OrbifoldChart> charts;
  std::vector<OrbifoldEmbedding> embeddings;
};

enum class GroupoidVariant { Action, Submersion, FoliationAtlas, OrbifoldCharts };

struct GroupoidModel {
  ManifoldPatch patch;
  GroupoidVariant variant = GroupoidVariant::Action;
  ActionPayload action;
  SubmersionPayload submersion;
  FoliationAtlasPayload foliation;
  OrbifoldChartsPayload orbifold;
  std::string name;
};

// ---------------------------------------------------------------------------
// Arrows

struct ActionArrow {
  int finite_index = 0;        // into finite_closure (0 = identity)
  std::vector<double> angles;  // one per rotation generator
  Vec lattice_coeffs;          // integer coefficients (stored as doubles)
  Vec source;
};

struct SubmersionArrow {
  Vec source, target;
};

struct FoliationArrow {
  int start_chart = 0;     // chart certifying the source plaque
  std::vector<int> chain;  // transition indices applied in order (may be empty)
  Vec source, target;
};

struct OrbifoldStep {
  int group_index = -1;      // group element of the current chart, -1 = none
  int embedding_index = -1;  // embedding applied afterwards, -1 = none
};

struct OrbifoldArrow {
  int start_chart = 0;
  std::vector<OrbifoldStep> chain;
  Vec source, target;
};

struct Arrow {
  std::variant<ActionArrow, SubmersionArrow, FoliationArrow, OrbifoldArrow> data;

  const Vec& source() const {
    return std::visit([](const auto& a) -> const Vec& { return a.source; }, data);
  }
};

// ---------------------------------------------------------------------------
// Payload helpers

namespace detail {

inline Mat expr_jacobian(const std::vector<Expression>& f, const Vec& x,
                         double h = 1e-6) {
  Mat jac(long(f.size()), x.size());
  for (int j = 0; j < x.size(); ++j) {
    Vec xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    for (std::size_t i = 0; i < f.size(); ++i)
      jac(long(i), j) = (f[i].eval(xp) - f[i].eval(xm)) / (2.0 * h);
  }
  return jac;
}

inline Vec expr_map(const std::vector<Expression>& f, const Vec& x) {
  Vec y(long(f.size()));
  for (std::size_t i = 0; i < f.size(); ++i) y[long(i)] = f[i].eval(x);
  return y;
}

inline std::vector<Vec> kernel_basis(const Mat& jac) {
  Eigen::FullPivLU<Mat> lu(jac);
  lu.setThreshold(1e-9);
  std::vector<Vec> basis;
  if (lu.dimensionOfKernel() == 0) return basis;
  Mat K = lu.kernel();
  for (int c = 0; c < K.cols(); ++c) basis.push_back(K.col(c));
  return basis;
}

/// eta-orthonormal horizontal lift: the unique vector at y orthogonal to
/// ker(jac) with jac * lift = w.
inline Vec horizontal_lift(const Mat& jac, const Mat& metric, const Vec& w) {
  Mat ginv = metric.inverse();
  Mat jgj = jac * ginv * jac.transpose();
  return ginv * jac.transpose() * jgj.ldlt().solve(w);
}

inline Mat rotation_exp(const Mat& skew, double angle) {
  if (skew.rows() == 2) {
    double a = skew(1, 0) * angle;
    Mat r(2, 2);
    r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    return r;
  }
  return Mat((skew * angle).exp());
}

/// Angle of the one-parameter subgroup exp(theta*A) best mapping x near y.
/// Closed form in the plane, coarse-grid + golden-section refinement otherwise.
inline std::optional<double> solve_rotation_angle(const Mat& skew, const Vec& x,
                                                  const Vec& y, double tol) {
  if (x.norm() < tol && y.norm() < tol) return 0.0;  // fixed point
  if (skew.rows() == 2) {
    double rate = skew(1, 0);
    if (std::abs(rate) < 1e-15) return std::nullopt;
    if (std::abs(x.norm() - y.norm()) > tol) return std::nullopt;
    double theta = (std::atan2(y[1], y[0]) - std::atan2(x[1], x[0])) / rate;
    if ((rotation_exp(skew, theta) * x - y).norm() <= tol) return theta;
    return std::nullopt;
  }
  double period = 2.0 * M_PI;  // heuristic window for the generic fallback
  auto miss = [&](double th) { return (rotation_exp(skew, th) * x - y).norm(); };
  double best = 0.0, best_val = miss(0.0);
  for (int i = 1; i < 720; ++i) {
    double th = period * double(i) / 720.0;
    double v = miss(th);
    if (v < best_val) {
      best_val = v;
      best = th;
    }
  }
  double lo = best - period / 720.0, hi = best + period / 720.0;
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int it = 0; it < 60; ++it) {
    double m1 = hi - gr * (hi - lo), m2 = lo + gr * (hi - lo);
    if (miss(m1) < miss(m2)) hi = m2;
    else lo = m1;
  }
  double th = 0.5 * (lo + hi);
  if (miss(th) <= tol) return th;
  return std::nullopt;
}

inline void close_finite_group(std::vector<AffineIsometry>& closure, int cap = 64) {
  bool grew = true;
  while (grew) {
    grew = false;
    for (std::size_t a = 0; a < closure.size(); ++a)
      for (std::size_t b = 0; b < closure.size(); ++b) {
        AffineIsometry c = closure[a].compose(closure[b]);
        bool found = false;
        for (const AffineIsometry& e : closure)
          if (e.approx(c)) {
            found = true;
            break;
          }
        if (!found) {
          if (int(closure.size()) >= cap)
            throw ParseError("finite isometry closure exceeds cap (group not finite?)");
          closure.push_back(c);
          grew = true;
        }
      }
  }
}

}  // namespace detail

inline GroupoidModel make_action_model(ManifoldPatch patch,
                                       std::vector<AffineIsometry> finite,
                                       std::vector<Mat> rotations,
                                       std::vector<Vec> lattice = {}) {
  GroupoidModel m;
  m.patch = std::move(patch);
  m.variant = GroupoidVariant::Action;
  m.action.finite_isometries = std::move(finite);
  m.action.rotation_generators = std::move(rotations);
  m.action.lattice_translations = std::move(lattice);
  if (!m.action.lattice_translations.empty() &&
      (!m.action.finite_isometries.empty() || !m.action.rotation_generators.empty()))
    throw ParseError("lattice translations cannot be combined with other action parts");
  m.action.finite_closure.push_back(AffineIsometry::identity(m.patch.dim));
  for (const AffineIsometry& g : m.action.finite_isometries) {
    m.action.finite_closure.push_back(g);
    m.action.finite_closure.push_back(g.inverse());
  }
  detail::close_finite_group(m.action.finite_closure);
  if (!m.action.lattice_translations.empty()) {
    m.action.lattice_basis =
        Mat(m.patch.dim, long(m.action.lattice_translations.size()));
    for (std::size_t i = 0; i < m.action.lattice_translations.size(); ++i)
      m.action.lattice_basis.col(long(i)) = m.action.lattice_translations[i];
  }
  return m;
}

inline GroupoidModel make_trivial_model(ManifoldPatch patch) {
  return make_action_model(std::move(patch), {}, {});
}

inline GroupoidModel make_submersion_model(ManifoldPatch patch,
                                           std::vector<Expression> projection) {
  GroupoidModel m;
  m.patch = std::move(patch);
  m.variant = GroupoidVariant::Submersion;
  m.submersion.projection = std::move(projection);
  return m;
}

inline GroupoidModel make_foliation_model(ManifoldPatch patch,
                                          FoliationAtlasPayload payload) {
  GroupoidModel m;
  m.patch = std::move(patch);
  m.variant = GroupoidVariant::FoliationAtlas;
  m.foliation = std::move(payload);
  return m;
}

inline GroupoidModel make_orbifold_model(ManifoldPatch patch,
                                         OrbifoldChartsPayload payload) {
  GroupoidModel m;
  m.patch = std::move(patch);
  m.variant = GroupoidVariant::OrbifoldCharts;
  for (OrbifoldChart& chart : payload.charts) {
    bool has_id = false;
    for (const AffineIsometry& g : chart.group) has_id = has_id || g.is_identity();
    if (!has_id) chart.group.insert(chart.group.begin(),
                                    AffineIsometry::identity(m.patch.dim));
    detail::close_finite_group(chart.group);
  }
  m.orbifold = std::move(payload);
  return m;
}

// ---------------------------------------------------------------------------
// Orbit geometry

inline int foliation_chart_of(const GroupoidModel& model, const Vec& x) {
  for (std::size_t i = 0; i < model.foliation.charts.size(); ++i)
    if (model.foliation.charts[i].region.contains(x)) return int(i);
  return -1;
}

inline int orbifold_chart_of(const GroupoidModel& model, const Vec& x) {
  for (std::size_t i = 0; i < model.orbifold.charts.size(); ++i)
    if (model.orbifold.charts[i].region.contains(x)) return int(i);
  return -1;
}

/// Spanning set of the orbit tangent space T_x O (possibly empty).
inline std::vector<Vec> orbit_tangent_basis(const GroupoidModel& model, const Vec& x) {
  if (!model.patch.domain.contains(x))
    throw OutOfDomain("orbit_tangent_basis: point outside domain");
  std::vector<Vec> basis;
  switch (model.variant) {
    case GroupoidVariant::Action: {
      double scale = 1e-12 * (1.0 + x.norm());
      for (const Mat& gen : model.action.rotation_generators) {
        Vec v = gen * x;
        if (v.norm() > scale) basis.push_back(v);
      }
      break;  // finite parts and lattices have discrete orbits
    }
    case GroupoidVariant::Submersion:
      basis = detail::kernel_basis(detail::expr_jacobian(model.submersion.projection, x));
      break;
    case GroupoidVariant::FoliationAtlas: {
      int i = foliation_chart_of(model, x);
      if (i < 0) throw OutOfDomain("orbit_tangent_basis: no foliation chart covers point");
      basis = detail::kernel_basis(
          detail::expr_jacobian(model.foliation.charts[std::size_t(i)].submersion, x));
      break;
    }
    case GroupoidVariant::OrbifoldCharts:
      break;  // etale: 0-dimensional orbits
  }
  return basis;
}

/// eta-orthogonal projection of v onto the complement of T_x O. Idempotent.
inline Vec normal_project(const GroupoidModel& model, const Vec& x, const Vec& v) {
  std::vector<Vec> basis = orbit_tangent_basis(model, x);
  if (basis.empty()) return v;
  Mat g = metric_raw(model.patch, x);
  Mat T(x.size(), long(basis.size()));
  for (std::size_t i = 0; i < basis.size(); ++i) T.col(long(i)) = basis[i];
  Mat gram = T.transpose() * g * T;
  Vec rhs = T.transpose() * g * v;
  return v - T * gram.ldlt().solve(rhs);
}

inline double normal_norm(const GroupoidModel& model, const Vec& x, const Vec& v) {
  return metric_norm(model.patch, x, normal_project(model, x, v));
}

// ---------------------------------------------------------------------------
// Orbit membership with witness arrows

namespace detail {

inline std::optional<Arrow> find_action_arrow(const GroupoidModel& model, const Vec& x,
                                              const Vec& y, double tol) {
  const ActionPayload& act = model.action;
  for (std::size_t fi = 0; fi < act.finite_closure.size(); ++fi) {
    Vec target_pre = act.finite_closure[fi].inverse().apply(y);
    if (!act.lattice_translations.empty()) {
      Mat b = act.lattice_basis;
      Vec coeff = (b.transpose() * b).ldlt().solve(b.transpose() * (target_pre - x));
      Vec rounded = coeff.array().round();
      if ((x + b * rounded - target_pre).norm() <= tol) {
        ActionArrow a;
        a.finite_index = int(fi);
        a.lattice_coeffs = rounded;
        a.source = x;
        return Arrow{a};
      }
      continue;
    }
    if (act.rotation_generators.empty()) {
      if ((x - target_pre).norm() <= tol) {
        ActionArrow a;
        a.finite_index = int(fi);
        a.source = x;
        return Arrow{a};
      }
      continue;
    }
    if (act.rotation_generators.size() == 1) {
      std::optional<double> theta =
          solve_rotation_angle(act.rotation_generators[0], x, target_pre, tol);
      if (theta) {
        ActionArrow a;
        a.finite_index = int(fi);
        a.angles = {*theta};
        a.source = x;
        return Arrow{a};
      }
    }
    // several rotation generators: not solvable in closed form here
  }
  return std::nullopt;
}

struct FoliationSearchState {
  int start_chart;
  int chart;
  Vec w;
  std::vector<int> chain;
};

inline bool in_window(const Vec& w, const Vec& lo, const Vec& hi, double slack) {
  for (int i = 0; i < w.size(); ++i)
    if (w[i] < lo[i] - slack || w[i] > hi[i] + slack) return false;
  return true;
}

/// Breadth-first search over chart chains (cap 64 hops). Returns the chain of
/// transition indices matching x's transverse coordinate onto y's, if any.
inline std::optional<FoliationArrow> foliation_chain(const GroupoidModel& model,
                                                     const Vec& x, const Vec& y,
                                                     double tol) {
  const FoliationAtlasPayload& fol = model.foliation;
  std::vector<std::pair<int, Vec>> targets;  // y may sit in several charts
  for (std::size_t j = 0; j < fol.charts.size(); ++j)
    if (fol.charts[j].region.contains(y))
      targets.push_back({int(j), expr_map(fol.charts[j].submersion, y)});
  if (targets.empty()) return std::nullopt;

  auto quantize = [tol](int chart, const Vec& w) {
    std::ostringstream key;
    key << chart;
    for (int i = 0; i < w.size(); ++i)
      key << ':' << long(std::floor(w[i] / std::max(tol * 0.25, 1e-12)));
    return key.str();
  };

  std::deque<FoliationSearchState> frontier;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < fol.charts.size(); ++i)
    if (fol.charts[i].region.contains(x)) {
      FoliationSearchState s{int(i), int(i), expr_map(fol.charts[i].submersion, x), {}};
      seen.insert(quantize(s.chart, s.w));
      frontier.push_back(std::move(s));
    }
  if (frontier.empty()) return std::nullopt;

  while (!frontier.empty()) {
    FoliationSearchState s = frontier.front();
    frontier.pop_front();
    for (const auto& [j, wj] : targets)
      if (j == s.chart && (wj - s.w).norm() <= tol)
        return FoliationArrow{s.start_chart, s.chain, x, y};
    if (int(s.chain.size()) >= 64) continue;
    for (std::size_t ti = 0; ti < fol.transitions.size(); ++ti) {
      const FoliationTransition& tr = fol.transitions[ti];
      if (tr.from_chart != s.chart) continue;
      // strict windows: leaf connectivity must not leak across missing points
      if (!in_window(s.w, tr.valid_lo, tr.valid_hi, 1e-12)) continue;
      FoliationSearchState next{s.start_chart, tr.to_chart, tr.map.apply(s.w), s.chain};
      next.chain.push_back(int(ti));
      std::string key = quantize(next.chart, next.w);
      if (seen.insert(key).second) frontier.push_back(std::move(next));
    }
  }
  return std::nullopt;
}

struct OrbifoldSearchState {
  int chart;
  Vec z;
  std::vector<OrbifoldStep> chain;
};

inline std::optional<OrbifoldArrow> orbifold_chain(const GroupoidModel& model,
                                                   const Vec& x, const Vec& y,
                                                   double tol) {
  const OrbifoldChartsPayload& orb = model.orbifold;
  int cx = orbifold_chart_of(model, x);
  if (cx < 0) return std::nullopt;

  auto quantize = [tol](int chart, const Vec& z) {
    std::ostringstream key;
    key << chart;
    for (int i = 0; i < z.size(); ++i)
      key << ':' << long(std::floor(z[i] / std::max(tol * 0.25, 1e-12)));
    return key.str();
  };

  std::deque<OrbifoldSearchState> frontier{{cx, x, {}}};
  std::unordered_set<std::string> seen{quantize(cx, x)};
  while (!frontier.empty()) {
    OrbifoldSearchState s = frontier.front();
    frontier.pop_front();
    if ((s.z - y).norm() <= tol) {
      OrbifoldArrow arrow;
      arrow.start_chart = cx;
      arrow.chain = s.chain;
      arrow.source = x;
      arrow.target = s.z;
      return arrow;
    }
    if (int(s.chain.size()) >= 64) continue;
    const OrbifoldChart& chart = orb.charts[std::size_t(s.chart)];
    for (std::size_t gi = 0; gi < chart.group.size(); ++gi) {
      Vec z = chart.group[gi].apply(s.z);
      if (!chart.region.contains(z)) continue;
      // optionally follow an embedding afterwards
      OrbifoldSearchState moved{s.chart, z, s.chain};
      moved.chain.push_back({int(gi), -1});
      std::string key = quantize(moved.chart, moved.z);
      if (seen.insert(key).second) frontier.push_back(moved);
      for (std::size_t ei = 0; ei < orb.embeddings.size(); ++ei) {
        const OrbifoldEmbedding& em = orb.embeddings[ei];
        if (em.from_chart != s.chart || !em.valid.contains(z)) continue;
        Vec z2 = em.map.apply(z);
        if (!orb.charts[std::size_t(em.to_chart)].region.contains(z2)) continue;
        OrbifoldSearchState next{em.to_chart, z2, s.chain};
        next.chain.push_back({int(gi), int(ei)});
        std::string key2 = quantize(next.chart, next.z);
        if (seen.insert(key2).second) frontier.push_back(std::move(next));
      }
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Witness search: an arrow from x to y if they lie in the same orbit.
inline std::optional<Arrow> find_arrow(const GroupoidModel& model, const Vec& x,
                                       const Vec& y, double tol) {
  switch (model.variant) {
    case GroupoidVariant::Action:
      return detail::find_action_arrow(model, x, y, tol);
    case GroupoidVariant::Submersion: {
      Vec px = detail::expr_map(model.submersion.projection, x);
      Vec py = detail::expr_map(model.submersion.projection, y);
      if ((px - py).norm() <= tol) return Arrow{SubmersionArrow{x, y}};
      return std::nullopt;
    }
    case GroupoidVariant::FoliationAtlas: {
      std::optional<FoliationArrow> arrow = detail::foliation_chain(model, x, y, tol);
      if (arrow) return Arrow{*arrow};
      return std::nullopt;
    }
    case GroupoidVariant::OrbifoldCharts: {
      std::optional<OrbifoldArrow> arrow = detail::orbifold_chain(model, x, y, tol);
      if (arrow) {
        arrow->target = y;
        return Arrow{*arrow};
      }
      return std::nullopt;
    }
  }
  return std::nullopt;
}

inline bool same_orbit(const GroupoidModel& model, const Vec& x, const Vec& y,
                       double tol) {
  if (!model.patch.domain.contains(x) || !model.patch.domain.contains(y)) return false;
  return find_arrow(model, x, y, tol).has_value();
}

// ---------------------------------------------------------------------------
// Arrow application and transport

inline Vec apply_arrow(const GroupoidModel& model, const Arrow& arrow, const Vec& x,
                       double tol = 1e-6) {
  if ((x - arrow.source()).norm() > tol)
    throw SourceMismatch("apply_arrow: point is not the arrow source");
  if (const auto* a = std::get_if<ActionArrow>(&arrow.data)) {
    Vec z = x;
    if (a->lattice_coeffs.size() > 0) z += model.action.lattice_basis * a->lattice_coeffs;
    for (std::size_t g = 0; g < a->angles.size(); ++g)
      z = detail::rotation_exp(model.action.rotation_generators[g], a->angles[g]) * z;
    return model.action.finite_closure[std::size_t(a->finite_index)].apply(z);
  }
  if (const auto* a = std::get_if<SubmersionArrow>(&arrow.data)) return a->target;
  if (const auto* a = std::get_if<FoliationArrow>(&arrow.data)) return a->target;
  const auto& a = std::get<OrbifoldArrow>(arrow.data);
  Vec z = x;
  int chart = a.start_chart;
  for (const OrbifoldStep& step : a.chain) {
    if (step.group_index >= 0)
      z = model.orbifold.charts[std::size_t(chart)]
              .group[std::size_t(step.group_index)]
              .apply(z);
    if (step.embedding_index >= 0) {
      const OrbifoldEmbedding& em =
          model.orbifold.embeddings[std::size_t(step.embedding_index)];
      z = em.map.apply(z);
      chart = em.to_chart;
    }
  }
  return z;
}

/// Pushforward of a tangent vector through an arrow. Isometric on normal
/// vectors whenever the model satisfies the Riemannian-groupoid checks.
inline Vec apply_arrow_differential(const GroupoidModel& model, const Arrow& arrow,
                                    const Vec& x, const Vec& v, double tol = 1e-6) {
  if ((x - arrow.source()).norm() > tol)
    throw SourceMismatch("apply_arrow_differential: point is not the arrow source");
  if (const auto* a = std::get_if<ActionArrow>(&arrow.data)) {
    Vec w = v;
    for (std::size_t g = 0; g < a->angles.size(); ++g)
      w = detail::rotation_exp(model.action.rotation_generators[g], a->angles[g]) * w;
    return model.action.finite_closure[std::size_t(a->finite_index)].apply_linear(w);
  }
  if (const auto* a = std::get_if<SubmersionArrow>(&arrow.data)) {
    Mat jx = detail::expr_jacobian(model.submersion.projection, x);
    Vec w = jx * v;
    Mat jy = detail::expr_jacobian(model.submersion.projection, a->target);
    return detail::horizontal_lift(jy, metric_raw(model.patch, a->target), w);
  }
  if (const auto* a = std::get_if<FoliationArrow>(&arrow.data)) {
    int ci = a->start_chart;
    if (ci < 0) throw SourceMismatch("foliation arrow source not covered by a chart");
    Mat jx = detail::expr_jacobian(model.foliation.charts[std::size_t(ci)].submersion, x);
    Vec w = jx * v;
    int cj = ci;
    for (int ti : a->chain) {
      const FoliationTransition& tr = model.foliation.transitions[std::size_t(ti)];
      w = tr.map.apply_linear(w);
      cj = tr.to_chart;
    }
    if (!model.foliation.charts[std::size_t(cj)].region.contains(a->target)) {
      cj = foliation_chart_of(model, a->target);
      if (cj < 0) throw SourceMismatch("foliation arrow target not covered by a chart");
    }
    Mat jy =
        detail::expr_jacobian(model.foliation.charts[std::size_t(cj)].submersion, a->target);
    return detail::horizontal_lift(jy, metric_raw(model.patch, a->target), w);
  }
  const auto& a = std::get<OrbifoldArrow>(arrow.data);
  Vec w = v;
  int chart = a.start_chart;
  for (const OrbifoldStep& step : a.chain) {
    if (step.group_index >= 0)
      w = model.orbifold.charts[std::size_t(chart)]
              .group[std::size_t(step.group_index)]
              .apply_linear(w);
    if (step.embedding_index >= 0) {
      const OrbifoldEmbedding& em =
          model.orbifold.embeddings[std::size_t(step.embedding_index)];
      w = em.map.apply_linear(w);
      chart = em.to_chart;
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Source lift: promote an arrow along a curve of sources

struct ArrowCurve {
  Interval valid;
  std::function<Arrow(double)> at;
};

/// Lift a base curve through arrow0 via the source map: arrow(t) has source
/// base(t) and arrow(t0) = arrow0, maximal in t within [t_lo, t_hi].
/// For actions the group element stays constant; for the other variants the
/// target curve is integrated by horizontal transport.
inline ArrowCurve source_lift(const GroupoidModel& model, const Arrow& arrow0,
                              const std::function<Vec(double)>& base_pos,
                              const std::function<Vec(double)>& base_vel, double t0,
                              double t_lo, double t_hi, double step = 1e-3) {
  if ((base_pos(t0) - arrow0.source()).norm() > 1e-6)
    throw SourceMismatch("source_lift: base curve does not pass through arrow source");

  if (const auto* a0 = std::get_if<ActionArrow>(&arrow0.data)) {
    ActionArrow proto = *a0;
    ArrowCurve out;
    out.valid = {t_lo, t_hi};
    out.at = [proto, base_pos](double t) {
      ActionArrow a = proto;
      a.source = base_pos(t);
      return Arrow{a};
    };
    return out;
  }

  // Transport the target along the base curve by integrating the horizontal
  // lift of the transverse velocity. Shared by submersion and foliation.
  auto integrate_target = [&](const std::function<Vec(double, const Vec&)>& target_rhs,
                              const Vec& target0,
                              const std::function<bool(double, const Vec&)>& ok)
      -> std::pair<std::vector<double>, std::vector<Vec>> {
    std::vector<double> times{t0};
    std::vector<Vec> targets{target0};
    for (double dir : {+1.0, -1.0}) {
      Vec y = target0;
      double t = t0;
      double limit = dir > 0 ? t_hi : t_lo;
      while (dir * (limit - t) > 1e-12) {
        double h = dir * std::min(step, dir * (limit - t));
        Vec k1 = target_rhs(t, y);
        Vec k2 = target_rhs(t + 0.5 * h, y + 0.5 * h * k1);
        Vec k3 = target_rhs(t + 0.5 * h, y + 0.5 * h * k2);
        Vec k4 = target_rhs(t + h, y + h * k3);
        Vec ynext = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!ok(t + h, ynext)) break;
        y = ynext;
        t += h;
        if (dir > 0) {
          times.push_back(t);
          targets.push_back(y);
        } else {
          times.insert(times.begin(), t);
          targets.insert(targets.begin(), y);
        }
      }
    }
    return {times, targets};
  };

  auto tabulate = [](std::vector<double> times, std::vector<Vec> targets) {
    return [times = std::move(times), targets = std::move(targets)](double t) -> Vec {
      if (t <= times.front()) return targets.front();
      if (t >= times.back()) return targets.back();
      std::size_t a = 0, b = times.size() - 1;
      while (b - a > 1) {
        std::size_t m = (a + b) / 2;
        (times[m] <= t ? a : b) = m;
      }
      double u = (t - times[a]) / (times[b] - times[a]);
      return (1.0 - u) * targets[a] + u * targets[b];
    };
  };

  if (const auto* a0 = std::get_if<SubmersionArrow>(&arrow0.data)) {
    auto rhs = [&model, &base_pos, &base_vel](double t, const Vec& y) {
      Mat jb = detail::expr_jacobian(model.submersion.projection, base_pos(t));
      Vec w = jb * base_vel(t);
      Mat jy = detail::expr_jacobian(model.submersion.projection, y);
      return detail::horizontal_lift(jy, metric_raw(model.patch, y), w);
    };
    auto ok = [&model](double, const Vec& y) { return model.patch.domain.contains(y); };
    auto [times, targets] = integrate_target(rhs, a0->target, ok);
    if (times.size() < 2 && (t_hi - t_lo) > step)
      throw LiftExit("source_lift: submersion lift exits immediately");
    auto table = tabulate(times, targets);
    ArrowCurve out;
    out.valid = {times.front(), times.back()};
    out.at = [base_pos, table](double t) {
      return Arrow{SubmersionArrow{base_pos(t), table(t)}};
    };
    return out;
  }

  if (const auto* a0 = std::get_if<FoliationArrow>(&arrow0.data)) {
    std::vector<int> chain = a0->chain;
    int ci = a0->start_chart;
    int cj = chain.empty() ? a0->start_chart
                           : model.foliation.transitions[std::size_t(chain.back())]
                                 .to_chart;
    if (ci < 0 || cj < 0) throw LiftExit("source_lift: foliation charts not resolved");
    const FoliationChart& chart_i = model.foliation.charts[std::size_t(ci)];
    const FoliationChart& chart_j = model.foliation.charts[std::size_t(cj)];
    auto rhs = [&](double t, const Vec& y) {
      Mat jb = detail::expr_jacobian(chart_i.submersion, base_pos(t));
      Vec w = jb * base_vel(t);
      for (int ti : chain)
        w = model.foliation.transitions[std::size_t(ti)].map.apply_linear(w);
      Mat jy = detail::expr_jacobian(chart_j.submersion, y);
      return detail::horizontal_lift(jy, metric_raw(model.patch, y), w);
    };
    auto ok = [&](double t, const Vec& y) {
      if (!chart_j.region.contains(y)) return false;
      Vec xb = base_pos(t);
      if (!chart_i.region.contains(xb)) return false;
      Vec w = detail::expr_map(chart_i.submersion, xb);
      for (int ti : chain) {
        const FoliationTransition& tr = model.foliation.transitions[std::size_t(ti)];
        if (!detail::in_window(w, tr.valid_lo, tr.valid_hi, 1e-9)) return false;
        w = tr.map.apply(w);
      }
      // target must track the holonomy image of the base transverse coordinate
      return (detail::expr_map(chart_j.submersion, y) - w).norm() < 1e-4;
    };
    auto [times, targets] = integrate_target(rhs, a0->target, ok);
    auto table = tabulate(times, targets);
    ArrowCurve out;
    out.valid = {times.front(), times.back()};
    int start_chart = a0->start_chart;
    out.at = [base_pos, table, chain, start_chart](double t) {
      return Arrow{FoliationArrow{start_chart, chain, base_pos(t), table(t)}};
    };
    return out;
  }

  const auto& a0 = std::get<OrbifoldArrow>(arrow0.data);
  OrbifoldArrow proto = a0;
  ArrowCurve out;
  out.valid = {t_lo, t_hi};
  GroupoidModel const* model_ptr = &model;
  out.at = [proto, base_pos, model_ptr](double t) {
    OrbifoldArrow a = proto;
    a.source = base_pos(t);
    Arrow tmp{a};
    a.target = apply_arrow(*model_ptr, tmp, a.source);
    return Arrow{a};
  };
  return out;
}

// ---------------------------------------------------------------------------
// Orbit invariants for graph bucketing, isotropy, injectivity estimates

/// Closed-form orbit invariant: nodes with equal keys (within tolerance) and
/// equal components lie in the same orbit. Components needing chart-chain
/// merging are reconciled by the orbit-graph builder.
struct OrbitKey {
  int component = -1;  // chart id for atlas variants, -1 = global
  Vec value;
};

inline OrbitKey orbit_key(const GroupoidModel& model, const Vec& x) {
  switch (model.variant) {
    case GroupoidVariant::Action: {
      const ActionPayload& act = model.action;
      if (!act.lattice_translations.empty()) {
        Mat b = act.lattice_basis;
        Vec frac = (b.transpose() * b).ldlt().solve(b.transpose() * x);
        for (int i = 0; i < frac.size(); ++i) frac[i] -= std::floor(frac[i]);
        return {-1, frac};
      }
      if (!act.rotation_generators.empty()) {
        Vec key(1);
        key[0] = x.norm();  // conserved radius of the rotation subgroup
        return {-1, key};
      }
      // finite group: lexicographically smallest image
      Vec best = x;
      for (const AffineIsometry& g : act.finite_closure) {
        Vec z = g.apply(x);
        for (int i = 0; i < z.size(); ++i) {
          if (z[i] < best[i] - 1e-12) {
            best = z;
            break;
          }
          if (z[i] > best[i] + 1e-12) break;
        }
      }
      return {-1, best};
    }
    case GroupoidVariant::Submersion:
      return {-1, detail::expr_map(model.submersion.projection, x)};
    case GroupoidVariant::FoliationAtlas: {
      int i = foliation_chart_of(model, x);
      if (i < 0) throw OutOfDomain("orbit_key: no foliation chart covers point");
      return {i, detail::expr_map(model.foliation.charts[std::size_t(i)].submersion, x)};
    }
    case GroupoidVariant::OrbifoldCharts: {
      int i = orbifold_chart_of(model, x);
      if (i < 0) throw OutOfDomain("orbit_key: no orbifold chart covers point");
      Vec best = x;
      for (const AffineIsometry& g : model.orbifold.charts[std::size_t(i)].group) {
        Vec z = g.apply(x);
        for (int c = 0; c < z.size(); ++c) {
          if (z[c] < best[c] - 1e-12) {
            best = z;
            break;
          }
          if (z[c] > best[c] + 1e-12) break;
        }
      }
      return {i, best};
    }
  }
  return {-1, x};
}

/// Key-space transitions used to merge bucket components across charts.
struct KeyTransition {
  int from_component = 0;
  int to_component = 0;
  AffineIsometry map;
  Vec valid_lo, valid_hi;
};

inline std::vector<KeyTransition> key_transitions(const GroupoidModel& model) {
  std::vector<KeyTransition> out;
  if (model.variant == GroupoidVariant::FoliationAtlas) {
    for (const FoliationTransition& tr : model.foliation.transitions)
      out.push_back({tr.from_chart, tr.to_chart, tr.map, tr.valid_lo, tr.valid_hi});
  } else if (model.variant == GroupoidVariant::OrbifoldCharts) {
    for (const OrbifoldEmbedding& em : model.orbifold.embeddings)
      out.push_back({em.from_chart, em.to_chart, em.map, em.valid.lo, em.valid.hi});
  }
  return out;
}

/// Isotropy label: which discrete elements fix x plus the dimension drop of
/// the continuous part. Equal labels = same stratum (desk-scale test).
inline std::string isotropy_label(const GroupoidModel& model, const Vec& x,
                                  double tol = 1e-9) {
  std::ostringstream label;
  switch (model.variant) {
    case GroupoidVariant::Action: {
      double scale = tol * (1.0 + x.norm());
      for (std::size_t i = 0; i < model.action.finite_closure.size(); ++i)
        if ((model.action.finite_closure[i].apply(x) - x).norm() <= scale)
          label << 'F' << i << '|';
      int vanishing = 0;
      for (const Mat& gen : model.action.rotation_generators)
        if ((gen * x).norm() <= scale) ++vanishing;
      label << 'v' << vanishing;
      return label.str();
    }
    case GroupoidVariant::OrbifoldCharts: {
      int ci = orbifold_chart_of(model, x);
      if (ci < 0) return "out";
      double scale = tol * (1.0 + x.norm());
      int count = 0;
      for (std::size_t i = 0; i < model.orbifold.charts[std::size_t(ci)].group.size(); ++i)
        if ((model.orbifold.charts[std::size_t(ci)].group[i].apply(x) - x).norm() <= scale)
          ++count;
      label << "iso" << count;
      return label.str();
    }
    default:
      return "trivial";
  }
}

namespace detail {
inline double distance_to_fixed_set(const AffineIsometry& g, const Vec& x) {
  int n = int(x.size());
  Mat a = g.matrix - Mat::Identity(n, n);
  // fixed set: a z = -translation
  Eigen::FullPivLU<Mat> lu(a);
  lu.setThreshold(1e-10);
  Vec rhs = -g.translation;
  Vec z0 = lu.solve(rhs);
  if ((a * z0 - rhs).norm() > 1e-8) return std::numeric_limits<double>::infinity();
  if (lu.dimensionOfKernel() == 0) return (x - z0).norm();
  Mat k = lu.kernel();
  // project (x - z0) onto the kernel and measure the residual
  Vec d = x - z0;
  Vec coeff = (k.transpose() * k).ldlt().solve(k.transpose() * d);
  return (d - k * coeff).norm();
}
}  // namespace detail

/// Lower estimate of the scale below which the Gauss picture is clean at x:
/// distance to more-singular loci, to lattice identifications, and to the
/// domain boundary.
inline double injectivity_estimate(const GroupoidModel& model, const Vec& x) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < x.size(); ++i) {
    best = std::min(best, x[i] - model.patch.domain.lo[i]);
    best = std::min(best, model.patch.domain.hi[i] - x[i]);
  }
  if (model.patch.domain.predicate) {
    // probe a few directions for the predicate boundary
    for (int d = 0; d < 16; ++d) {
      double ang = 2.0 * M_PI * d / 16.0;
      Vec dir = Vec::Zero(x.size());
      dir[0] = std::cos(ang);
      if (x.size() > 1) dir[1] = std::sin(ang);
      double lo = 0.0, hi = best;
      if (model.patch.domain.contains(x + hi * dir)) continue;
      for (int it = 0; it < 30; ++it) {
        double mid = 0.5 * (lo + hi);
        (model.patch.domain.contains(x + mid * dir) ? lo : hi) = mid;
      }
      best = std::min(best, lo);
    }
  }
  if (model.variant == GroupoidVariant::Action) {
    for (const AffineIsometry& g : model.action.finite_closure) {
      if (g.is_identity()) continue;
      best = std::min(best, detail::distance_to_fixed_set(g, x));
    }
    for (const Mat& gen : model.action.rotation_generators) {
      std::vector<Vec> zero_dirs = detail::kernel_basis(gen);
      if (zero_dirs.empty()) {
        best = std::min(best, x.norm());  // isolated fixed point at the origin
      } else {
        Mat k(x.size(), long(zero_dirs.size()));
        for (std::size_t c = 0; c < zero_dirs.size(); ++c) k.col(long(c)) = zero_dirs[c];
        Vec coeff = (k.transpose() * k).ldlt().solve(k.transpose() * x);
        best = std::min(best, (x - k * coeff).norm());
      }
    }
    for (const Vec& lv : model.action.lattice_translations)
      best = std::min(best, 0.5 * lv.norm());
  }
  if (model.variant == GroupoidVariant::OrbifoldCharts) {
    int ci = orbifold_chart_of(model, x);
    if (ci >= 0)
      for (const AffineIsometry& g : model.orbifold.charts[std::size_t(ci)].group) {
        if (g.is_identity()) continue;
        best = std::min(best, detail::distance_to_fixed_set(g, x));
      }
  }
  return std::max(best, 0.0);
}

/// Equivalent-metric construction: add a pure orbit-direction term
/// weight(x) * (eta t)(eta t)^T / <t,t>_eta per orbit tangent vector t. Normal
/// spaces and normal inner products are unchanged, so d_N and stacky geodesic
/// traces must be invariant. weight must be orbit-constant and > -1.
inline GroupoidModel with_tangential_perturbation(
    const GroupoidModel& model, std::function<double(const Vec&)> weight) {
  auto base = std::make_shared<GroupoidModel>(model);
  GroupoidModel out = model;
  out.patch.metric = [base, weight](const Vec& x) {
    Mat g = metric_raw(base->patch, x);
    if (!base->patch.domain.contains(x)) return g;  // FD probes near the edge
    for (const Vec& tvec : orbit_tangent_basis(*base, x)) {
      Vec gt = g * tvec;
      double denom = tvec.dot(gt);
      if (denom > 1e-18) g += (weight(x) / denom) * gt * gt.transpose();
    }
    return g;
  };
  out.patch.christoffel = nullptr;  // finite differences pick up the new term
  out.name = model.name + "+tangential";
  return out;
}

// ---------------------------------------------------------------------------
// Model-level numeric checks (isometric action, Killing fields, cocycles)

struct ModelCheckReport {
  double worst_isometry_defect = 0.0;
  double worst_killing_defect = 0.0;
  double worst_cocycle_defect = 0.0;
  bool ok(double tol = 1e-8) const {
    return worst_isometry_defect < tol && worst_killing_defect < 1e-5 &&
           worst_cocycle_defect < 1e-10;
  }
};

inline ModelCheckReport check_model(const GroupoidModel& model, int samples = 20,
                                    std::uint64_t seed = 1) {
  ModelCheckReport report;
  Rng rng(seed);
  auto sample_point = [&]() {
    Vec x(model.patch.dim);
    for (int i = 0; i < model.patch.dim; ++i) {
      double margin = 0.1 * (model.patch.domain.hi[i] - model.patch.domain.lo[i]);
      x[i] = rng.uniform(model.patch.domain.lo[i] + margin,
                         model.patch.domain.hi[i] - margin);
    }
    return x;
  };
  if (model.variant == GroupoidVariant::Action) {
    for (int s = 0; s < samples; ++s) {
      Vec x = sample_point();
      if (!model.patch.domain.contains(x)) continue;
      Vec u = rng.unit_vector(model.patch.dim);
      Vec v = rng.unit_vector(model.patch.dim);
      for (const AffineIsometry& g : model.action.finite_closure) {
        Vec gx = g.apply(x);
        if (!model.patch.domain.contains(gx)) continue;
        double lhs = metric_inner(model.patch, gx, g.apply_linear(u), g.apply_linear(v));
        double rhs = metric_inner(model.patch, x, u, v);
        report.worst_isometry_defect =
            std::max(report.worst_isometry_defect, std::abs(lhs - rhs));
      }
      for (const Mat& gen : model.action.rotation_generators) {
        double eps = 1e-4;
        Mat flow = detail::rotation_exp(gen, eps);
        Vec fx = flow * x;
        if (!model.patch.domain.contains(fx)) continue;
        double lhs = metric_inner(model.patch, fx, flow * u, flow * v);
        double rhs = metric_inner(model.patch, x, u, v);
        report.worst_killing_defect =
            std::max(report.worst_killing_defect, std::abs(lhs - rhs) / eps);
      }
    }
  }
  if (model.variant == GroupoidVariant::FoliationAtlas) {
    // transition isometry + cocycle coherence on composable pairs
    const auto& fol = model.foliation;
    for (const FoliationTransition& t1 : fol.transitions) {
      Mat m = t1.map.matrix;
      report.worst_isometry_defect = std::max(
          report.worst_isometry_defect,
          (m.transpose() * m - Mat::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff());
      for (const FoliationTransition& t2 : fol.transitions) {
        if (t2.from_chart != t1.to_chart) continue;
        AffineIsometry comp = t2.map.compose(t1.map);
        for (const FoliationTransition& t3 : fol.transitions) {
          if (t3.from_chart != t1.from_chart || t3.to_chart != t2.to_chart) continue;
          for (int s = 0; s < 5; ++s) {
            Vec w(t1.valid_lo.size());
            for (int i = 0; i < w.size(); ++i)
              w[i] = rng.uniform(t1.valid_lo[i], t1.valid_hi[i]);
            if (!detail::in_window(t1.map.apply(w), t2.valid_lo, t2.valid_hi, 0.0))
              continue;
            if (!detail::in_window(w, t3.valid_lo, t3.valid_hi, 0.0)) continue;
            report.worst_cocycle_defect =
                std::max(report.worst_cocycle_defect,
                         (comp.apply(w) - t3.map.apply(w)).norm());
          }
        }
      }
    }
  }
  return report;
}

}  // namespace stacky
