#pragma once

#include "stacky/groupoid.hpp"

#include <memory>
#include <utility>
#include <vector>

namespace stacky {

/// Parametrized curve into M. Positions come from a closed form, a sample
/// table, or an integrator output; velocities analytic when available, else
/// 5-point stencils that respect known kinks.
struct ParamCurve {
  std::function<Vec(double)> pos;
  std::function<Vec(double)> vel;   // optional
  std::vector<double> breakpoints;  // non-smooth parameter values
  Interval span{0.0, 0.0};

  Vec at(double t) const { return pos(t); }

  Vec velocity(double t) const {
    if (vel) return vel(t);
    double h = 1e-4;
    double lo = span.lo, hi = span.hi;
    for (double b : breakpoints) {
      if (b <= t && b > lo) lo = b;
      if (b > t && b < hi) hi = b;
    }
    bool room_left = t - lo >= 2.0 * h;
    bool room_right = hi - t >= 2.0 * h;
    if (room_left && room_right) {
      return (-pos(t + 2 * h) + 8.0 * pos(t + h) - 8.0 * pos(t - h) + pos(t - 2 * h)) /
             (12.0 * h);
    }
    double dir = room_right || (hi - t) > (t - lo) ? 1.0 : -1.0;
    double room = dir > 0 ? hi - t : t - lo;
    double hh = dir * std::min(h, room / 4.001);
    // one-sided 5-point stencil, O(h^4)
    return (-25.0 * pos(t) + 48.0 * pos(t + hh) - 36.0 * pos(t + 2 * hh) +
            16.0 * pos(t + 3 * hh) - 3.0 * pos(t + 4 * hh)) /
           (12.0 * hh);
  }
};

inline ParamCurve expression_curve(std::vector<Expression> components, Interval span) {
  ParamCurve c;
  c.span = span;
  c.pos = [components](double t) {
    Vec x(long(components.size()));
    for (std::size_t i = 0; i < components.size(); ++i) x[long(i)] = components[i].eval_t(t);
    return x;
  };
  return c;
}

inline ParamCurve polyline_curve(std::vector<double> times, std::vector<Vec> points) {
  if (times.size() != points.size() || times.size() < 2)
    throw ParseError("polyline needs matching times/points, at least two");
  ParamCurve c;
  c.span = {times.front(), times.back()};
  c.breakpoints.assign(times.begin() + 1, times.end() - 1);
  auto locate = [times](double t) {
    std::size_t a = 0, b = times.size() - 1;
    if (t <= times.front()) return std::size_t(0);
    if (t >= times.back()) return times.size() - 2;
    while (b - a > 1) {
      std::size_t m = (a + b) / 2;
      (times[m] <= t ? a : b) = m;
    }
    return a;
  };
  c.pos = [times, points, locate](double t) -> Vec {
    std::size_t k = locate(t);
    double u = (t - times[k]) / (times[k + 1] - times[k]);
    u = std::min(std::max(u, 0.0), 1.0);
    return (1.0 - u) * points[k] + u * points[k + 1];
  };
  c.vel = [times, points, locate](double t) -> Vec {
    std::size_t k = locate(t);
    return (points[k + 1] - points[k]) / (times[k + 1] - times[k]);
  };
  return c;
}

/// Cubic-interpolated sample table (Catmull-Rom tangents).
inline ParamCurve sampled_curve(std::vector<double> times, std::vector<Vec> points) {
  if (times.size() != points.size() || times.size() < 2)
    throw ParseError("sample table needs matching times/points, at least two");
  ParamCurve c;
  c.span = {times.front(), times.back()};
  auto tangent = [times, points](std::size_t k) -> Vec {
    std::size_t prev = k == 0 ? 0 : k - 1;
    std::size_t next = k + 1 >= times.size() ? times.size() - 1 : k + 1;
    return (points[next] - points[prev]) / (times[next] - times[prev]);
  };
  auto eval = [times, points, tangent](double t, bool deriv) -> Vec {
    std::size_t a = 0, b = times.size() - 1;
    if (t <= times.front()) a = 0, b = 1;
    else if (t >= times.back()) a = times.size() - 2, b = times.size() - 1;
    else {
      while (b - a > 1) {
        std::size_t m = (a + b) / 2;
        (times[m] <= t ? a : b) = m;
      }
    }
    double dt = times[b] - times[a];
    double u = (t - times[a]) / dt;
    Vec m0 = tangent(a), m1 = tangent(b);
    if (!deriv) {
      double h00 = (1 + 2 * u) * sq(1 - u), h10 = u * sq(1 - u);
      double h01 = sq(u) * (3 - 2 * u), h11 = sq(u) * (u - 1);
      return h00 * points[a] + h10 * dt * m0 + h01 * points[b] + h11 * dt * m1;
    }
    double g00 = 6 * u * (u - 1), g10 = (1 - u) * (1 - 3 * u);
    double g01 = -g00, g11 = u * (3 * u - 2);
    return g00 * points[a] / dt + g10 * m0 + g01 * points[b] / dt + g11 * m1;
  };
  c.pos = [eval](double t) { return eval(t, false); };
  c.vel = [eval](double t) { return eval(t, true); };
  return c;
}

inline ParamCurve trajectory_curve(GeodesicTrajectory traj) {
  auto shared = std::make_shared<GeodesicTrajectory>(std::move(traj));
  ParamCurve c;
  double t0 = shared->states.front().time, t1 = shared->states.back().time;
  c.span = {std::min(t0, t1), std::max(t0, t1)};
  c.pos = [shared](double t) { return shared->at(t).position; };
  c.vel = [shared](double t) { return shared->at(t).velocity; };
  return c;
}

// ---------------------------------------------------------------------------

struct CocycleTransition {
  Interval overlap;                    // U_{i+1,i}
  std::function<Arrow(double)> arrow;  // source a_i(t), target a_{i+1}(t)
};

/// Good cocycle: segments over a dimension-1 cover with consecutive overlaps
/// carrying arrow curves.
struct GoodCocycle {
  std::vector<Interval> cover;
  std::vector<ParamCurve> segments;
  std::vector<CocycleTransition> transitions;  // one per consecutive pair
};

struct StackyCurve {
  std::shared_ptr<const GroupoidModel> model;
  GoodCocycle cocycle;
  Interval interval{0.0, 0.0};

  int segment_index(double t) const {
    for (std::size_t i = 0; i < cocycle.cover.size(); ++i)
      if (cocycle.cover[i].contains(t, 1e-12)) return int(i);
    return -1;
  }

  Vec at(double t) const {
    int k = segment_index(t);
    if (k < 0) throw OutOfDomain("curve not defined at requested parameter");
    return cocycle.segments[std::size_t(k)].at(t);
  }
};

struct VelocityClass {
  Vec base;    // orbit representative
  Vec normal;  // normal component of the segment velocity at base
  double norm = 0.0;
};

inline StackyCurve single_segment_curve(std::shared_ptr<const GroupoidModel> model,
                                        ParamCurve segment) {
  StackyCurve c;
  c.model = std::move(model);
  c.interval = segment.span;
  c.cocycle.cover = {segment.span};
  c.cocycle.segments = {std::move(segment)};
  return c;
}

/// Structural checks for a good cocycle: consecutive-only overlaps, no triple
/// intersections, and source/target compatibility of the transition arrows.
inline void validate_cocycle(const StackyCurve& curve, int samples_per_overlap = 16,
                             double tol = 1e-8) {
  const GoodCocycle& c = curve.cocycle;
  if (c.segments.size() != c.cover.size())
    throw ParseError("cocycle: one segment per cover interval required");
  if (!c.cover.empty() && c.transitions.size() + 1 != c.cover.size())
    throw ParseError("cocycle: one transition per consecutive pair required");
  for (std::size_t i = 0; i + 1 < c.cover.size(); ++i) {
    if (c.cover[i].lo >= c.cover[i + 1].lo || c.cover[i].hi >= c.cover[i + 1].hi)
      throw ParseError("cocycle: cover must be increasing");
    if (c.cover[i + 1].lo >= c.cover[i].hi)
      throw ParseError("cocycle: consecutive intervals must overlap");
    if (i + 2 < c.cover.size() && c.cover[i + 2].lo < c.cover[i].hi)
      throw ParseError("cocycle: dimension-1 cover admits no triple intersections");
  }
  for (std::size_t i = 0; i + 1 < c.segments.size(); ++i) {
    Interval overlap{c.cover[i + 1].lo, c.cover[i].hi};
    for (int s = 0; s < samples_per_overlap; ++s) {
      double t = overlap.lo + (overlap.hi - overlap.lo) * (s + 0.5) / samples_per_overlap;
      Arrow arrow = c.transitions[i].arrow(t);
      Vec src = c.segments[i].at(t);
      Vec dst = c.segments[i + 1].at(t);
      if ((arrow.source() - src).norm() > tol)
        throw ParseError("cocycle: transition arrow source mismatch");
      if ((apply_arrow(*curve.model, arrow, src, 1e-5) - dst).norm() > tol)
        throw ParseError("cocycle: transition arrow target mismatch");
    }
  }
}

// ---------------------------------------------------------------------------
// Speed, velocity class, length

inline double normal_speed(const StackyCurve& curve, double t) {
  const GoodCocycle& c = curve.cocycle;
  double value = 0.0;
  bool have = false;
  for (std::size_t k = 0; k < c.segments.size(); ++k) {
    if (!c.cover[k].contains(t, 1e-12)) continue;
    Vec x = c.segments[k].at(t);
    Vec v = c.segments[k].velocity(t);
    double s = normal_norm(*curve.model, x, v);
    if (have && std::abs(s - value) > 1e-6)
      throw OverlapDisagreement("normal speed differs between overlapping segments");
    if (!have) value = s;
    have = true;
  }
  if (!have) throw OutOfDomain("normal_speed: parameter outside the cover");
  return value;
}

inline VelocityClass velocity(const StackyCurve& curve, double t) {
  int k = curve.segment_index(t);
  if (k < 0) throw OutOfDomain("velocity: parameter outside the cover");
  const ParamCurve& seg = curve.cocycle.segments[std::size_t(k)];
  VelocityClass out;
  out.base = seg.at(t);
  out.normal = normal_project(*curve.model, out.base, seg.velocity(t));
  out.norm = metric_norm(curve.model->patch, out.base, out.normal);
  // overlap agreement check rides along
  normal_speed(curve, t);
  return out;
}

/// Length of the stacky curve by the overlap-corrected cocycle formula. The
/// transition term is evaluated through the source segment (source and target
/// are isometries on normals).
inline double length(const StackyCurve& curve, double quad_tol = 1e-9) {
  const GoodCocycle& c = curve.cocycle;
  double total = 0.0;
  for (std::size_t i = 0; i < c.segments.size(); ++i) {
    const ParamCurve& seg = c.segments[i];
    auto speed = [&](double t) {
      return normal_norm(*curve.model, seg.at(t), seg.velocity(t));
    };
    std::vector<double> breaks = seg.breakpoints;
    // split at overlap boundaries so the correction cancels exactly
    if (i > 0) breaks.push_back(c.cover[i - 1].hi);
    if (i + 1 < c.segments.size()) breaks.push_back(c.cover[i + 1].lo);
    total += integrate_piecewise(speed, c.cover[i].lo, c.cover[i].hi, breaks, quad_tol);
    if (i + 1 < c.segments.size()) {
      Interval overlap{c.cover[i + 1].lo, c.cover[i].hi};
      total -= integrate_piecewise(speed, overlap.lo, overlap.hi, seg.breakpoints,
                                   quad_tol);
    }
  }
  return total;
}

inline StackyCurve restrict_curve(const StackyCurve& curve, Interval window) {
  StackyCurve out;
  out.model = curve.model;
  out.interval = window;
  const GoodCocycle& c = curve.cocycle;
  for (std::size_t i = 0; i < c.segments.size(); ++i) {
    Interval clipped = c.cover[i].intersect(window);
    if (clipped.empty()) continue;
    out.cocycle.cover.push_back(clipped);
    out.cocycle.segments.push_back(c.segments[i]);
    if (!out.cocycle.segments.empty() && out.cocycle.cover.size() >= 2)
      out.cocycle.transitions.push_back(c.transitions[i - 1]);
  }
  // merge rule: consecutive clipped intervals must still overlap
  for (std::size_t i = 0; i + 1 < out.cocycle.cover.size(); ++i)
    if (out.cocycle.cover[i + 1].lo >= out.cocycle.cover[i].hi)
      throw OutOfDomain("restrict_curve: window breaks the cover overlap structure");
  return out;
}

/// Re-present a curve with `pieces` overlapping segments joined by unit (or
/// supplied) arrows; used to exercise the overlap correction.
inline StackyCurve re_present(const StackyCurve& curve, int pieces,
                              double overlap_fraction = 0.2) {
  if (curve.cocycle.segments.size() != 1)
    throw ParseError("re_present expects a single-segment curve");
  const ParamCurve& seg = curve.cocycle.segments[0];
  Interval I = curve.interval;
  double width = I.length() / pieces;
  double half_overlap = 0.5 * overlap_fraction * width;
  StackyCurve out;
  out.model = curve.model;
  out.interval = I;
  const GroupoidModel* model = curve.model.get();
  for (int p = 0; p < pieces; ++p) {
    Interval u{I.lo + p * width - (p > 0 ? half_overlap : 0.0),
               I.lo + (p + 1) * width + (p + 1 < pieces ? half_overlap : 0.0)};
    out.cocycle.cover.push_back(u);
    out.cocycle.segments.push_back(seg);
    if (p > 0) {
      Interval overlap{u.lo, I.lo + p * width + half_overlap};
      CocycleTransition tr;
      tr.overlap = overlap;
      tr.arrow = [model, segcopy = seg](double t) -> Arrow {
        Vec x = segcopy.at(t);
        std::optional<Arrow> unit = find_arrow(*model, x, x, 1e-9);
        if (!unit) throw SourceMismatch("re_present: unit arrow not found");
        return *unit;
      };
      out.cocycle.transitions.push_back(std::move(tr));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Continuity profile

struct SpeedProfile {
  std::vector<std::pair<double, double>> samples;  // (t, normal speed)
  double max_jump = 0.0;
};

inline SpeedProfile speed_continuity_profile(const StackyCurve& curve,
                                             const std::vector<double>& grid) {
  SpeedProfile profile;
  for (double t : grid) profile.samples.push_back({t, normal_speed(curve, t)});
  for (std::size_t i = 0; i + 1 < profile.samples.size(); ++i)
    profile.max_jump = std::max(
        profile.max_jump,
        std::abs(profile.samples[i + 1].second - profile.samples[i].second));
  return profile;
}

// ---------------------------------------------------------------------------
// Curve isomorphism: pointwise matchability with certificate continuity

namespace detail {

/// A matching certificate between two curves at one parameter. The discrete
/// data (finite part, lattice, chart chain) must continue across samples; the
/// continuous data (rotation angle) may drift slowly.
struct MatchCertificate {
  Arrow arrow;
  bool valid = false;
};

inline bool action_match_with(const GroupoidModel& model, const ActionArrow& proto,
                              const Vec& x, const Vec& y, double tol, double* angle_out) {
  const ActionPayload& act = model.action;
  Vec target_pre =
      act.finite_closure[std::size_t(proto.finite_index)].inverse().apply(y);
  Vec z = x;
  if (proto.lattice_coeffs.size() > 0) z = x + act.lattice_basis * proto.lattice_coeffs;
  if (act.rotation_generators.empty()) {
    if (angle_out) *angle_out = 0.0;
    return (z - target_pre).norm() <= tol;
  }
  if (act.rotation_generators.size() == 1) {
    std::optional<double> theta =
        solve_rotation_angle(act.rotation_generators[0], z, target_pre, tol);
    if (!theta) return false;
    if (angle_out) *angle_out = *theta;
    return true;
  }
  return false;
}

inline bool foliation_chain_matches(const GroupoidModel& model, int start_chart,
                                    const std::vector<int>& chain, const Vec& x,
                                    const Vec& y, double tol) {
  int ci = start_chart;
  if (ci < 0 || !model.foliation.charts[std::size_t(ci)].region.contains(x)) return false;
  Vec w = expr_map(model.foliation.charts[std::size_t(ci)].submersion, x);
  int cj = ci;
  for (int ti : chain) {
    const FoliationTransition& tr = model.foliation.transitions[std::size_t(ti)];
    if (tr.from_chart != cj) return false;
    if (!in_window(w, tr.valid_lo, tr.valid_hi, 1e-12)) return false;
    w = tr.map.apply(w);
    cj = tr.to_chart;
  }
  if (!model.foliation.charts[std::size_t(cj)].region.contains(y)) return false;
  return (expr_map(model.foliation.charts[std::size_t(cj)].submersion, y) - w).norm() <=
         tol;
}

inline bool orbifold_chain_matches(const GroupoidModel& model, const OrbifoldArrow& proto,
                                   const Vec& x, const Vec& y, double tol) {
  if (!model.orbifold.charts[std::size_t(proto.start_chart)].region.contains(x))
    return false;
  Vec z = x;
  int chart = proto.start_chart;
  for (const OrbifoldStep& step : proto.chain) {
    if (step.group_index >= 0) {
      z = model.orbifold.charts[std::size_t(chart)]
              .group[std::size_t(step.group_index)]
              .apply(z);
      if (!model.orbifold.charts[std::size_t(chart)].region.contains(z)) return false;
    }
    if (step.embedding_index >= 0) {
      const OrbifoldEmbedding& em =
          model.orbifold.embeddings[std::size_t(step.embedding_index)];
      if (em.from_chart != chart || !em.valid.contains(z)) return false;
      z = em.map.apply(z);
      chart = em.to_chart;
    }
  }
  return (z - y).norm() <= tol;
}

}  // namespace detail

/// Do two curves over the same interval present the same stacky curve?
/// Sampled matchability with a continuity requirement on the matching
/// arrows. The discrete certificate data (finite element, lattice shift,
/// chart chain) is locked along the interval: it may change only across the
/// curves' own cocycle transitions, or -- for chart-chain certificates --
/// when old and new chains are both valid near the switch. Rotation angles
/// may drift continuously. Sound at the sampling resolution.
inline bool curves_isomorphic(const StackyCurve& c1, const StackyCurve& c2,
                              int samples = 256, double tol = 1e-6) {
  if (c1.model.get() != c2.model.get()) return false;
  if (std::abs(c1.interval.lo - c2.interval.lo) > 1e-12 ||
      std::abs(c1.interval.hi - c2.interval.hi) > 1e-12)
    return false;
  const GroupoidModel& model = *c1.model;
  const double max_angle_jump = 0.5;

  auto matches = [&](const Arrow& proto, const Vec& x, const Vec& y,
                     double* angle_out) -> bool {
    if (const auto* a = std::get_if<ActionArrow>(&proto.data))
      return detail::action_match_with(model, *a, x, y, tol, angle_out);
    if (std::holds_alternative<SubmersionArrow>(proto.data)) {
      Vec px = detail::expr_map(model.submersion.projection, x);
      Vec py = detail::expr_map(model.submersion.projection, y);
      return (px - py).norm() <= tol;
    }
    if (const auto* a = std::get_if<FoliationArrow>(&proto.data))
      return detail::foliation_chain_matches(model, a->start_chart, a->chain, x, y, tol);
    const auto& a = std::get<OrbifoldArrow>(proto.data);
    return detail::orbifold_chain_matches(model, a, x, y, tol);
  };

  std::optional<Arrow> certificate;
  double prev_angle = 0.0;
  Vec prev_x, prev_y;
  int prev_k1 = -1, prev_k2 = -1;
  for (int s = 0; s <= samples; ++s) {
    double t = c1.interval.lo + c1.interval.length() * double(s) / double(samples);
    int k1 = c1.segment_index(t);
    int k2 = c2.segment_index(t);
    if (k1 < 0 || k2 < 0) return false;
    Vec x = c1.cocycle.segments[std::size_t(k1)].at(t);
    Vec y = c2.cocycle.segments[std::size_t(k2)].at(t);
    bool representative_jump = certificate && (k1 != prev_k1 || k2 != prev_k2);
    if (!certificate || representative_jump) {
      // (re)anchor: across a cocycle transition the representative changes by
      // a validated arrow, so a fresh certificate is legitimate
      certificate = find_arrow(model, x, y, tol);
      if (!certificate) return false;
      if (const auto* a = std::get_if<ActionArrow>(&certificate->data))
        prev_angle = a->angles.empty() ? 0.0 : a->angles[0];
      prev_x = x;
      prev_y = y;
      prev_k1 = k1;
      prev_k2 = k2;
      continue;
    }
    double angle = prev_angle;
    if (matches(*certificate, x, y, &angle)) {
      bool angle_ok = true;
      if (std::holds_alternative<ActionArrow>(certificate->data) &&
          !model.action.rotation_generators.empty()) {
        // near a rotation fixed point the angle is unidentifiable
        bool identifiable = x.norm() > 10.0 * tol && prev_x.size() > 0 &&
                            prev_x.norm() > 10.0 * tol;
        if (identifiable) {
          double diff = std::remainder(angle - prev_angle, 2.0 * M_PI);
          angle_ok = std::abs(diff) <= max_angle_jump;
        }
      }
      if (angle_ok) {
        prev_angle = angle;
        prev_x = x;
        prev_y = y;
        prev_k1 = k1;
        prev_k2 = k2;
        continue;
      }
    }
    // Discrete certificates are locked for actions (a continuous arrow curve
    // cannot change its component). Chart-chain certificates may relabel when
    // old and new chains are both valid around the switch.
    bool relabel_allowed = std::holds_alternative<FoliationArrow>(certificate->data) ||
                           std::holds_alternative<OrbifoldArrow>(certificate->data);
    if (!relabel_allowed) return false;
    std::optional<Arrow> fresh = find_arrow(model, x, y, tol);
    if (!fresh) return false;
    double scratch = 0.0;
    if (!matches(*fresh, prev_x, prev_y, &scratch)) return false;
    certificate = fresh;
    prev_x = x;
    prev_y = y;
    prev_k1 = k1;
    prev_k2 = k2;
  }
  return true;
}

}  // namespace stacky
