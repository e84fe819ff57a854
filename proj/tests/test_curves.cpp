#include <catch2/catch_amalgamated.hpp>

#include "stacky/curves.hpp"

using namespace stacky;

namespace {

Vec v2(double a, double b) {
  Vec x(2);
  x << a, b;
  return x;
}

Mat rot_gen() {
  Mat j(2, 2);
  j << 0, -1, 1, 0;
  return j;
}

AffineIsometry x_axis_reflection() {
  Mat m(2, 2);
  m << 1, 0, 0, -1;
  return {m, Vec::Zero(2)};
}

std::shared_ptr<GroupoidModel> rotation_model() {
  return std::make_shared<GroupoidModel>(
      make_action_model(make_euclidean_patch(v2(-4, -4), v2(4, 4)), {}, {rot_gen()}));
}

std::shared_ptr<GroupoidModel> reflection_model() {
  return std::make_shared<GroupoidModel>(make_action_model(
      make_euclidean_patch(v2(-4, -4), v2(4, 4)), {x_axis_reflection()}, {}));
}

std::shared_ptr<GroupoidModel> trivial_model() {
  return std::make_shared<GroupoidModel>(
      make_trivial_model(make_euclidean_patch(v2(-4, -4), v2(4, 4))));
}

std::shared_ptr<GroupoidModel> punctured_vertical_foliation() {
  ManifoldPatch patch = make_euclidean_patch(v2(-3, -3), v2(3, 3));
  patch.domain.predicate = [](const Vec& x) { return x.squaredNorm() - 1e-18; };
  auto band = [&](double xlo, double xhi, double ylo, double yhi,
                  std::function<double(const Vec&)> pred) {
    FoliationChart c;
    c.region = Domain::box(v2(xlo, ylo), v2(xhi, yhi));
    c.region.predicate = std::move(pred);
    c.submersion = {Expression::parse("x1")};
    c.w_lo = Vec::Constant(1, xlo);
    c.w_hi = Vec::Constant(1, xhi);
    return c;
  };
  FoliationAtlasPayload fol;
  fol.charts.push_back(band(-3, 3, 0, 3, [](const Vec& x) { return x[1]; }));
  fol.charts.push_back(band(-3, 3, -3, 0, [](const Vec& x) { return -x[1]; }));
  fol.charts.push_back(band(0, 3, -3, 3, [](const Vec& x) { return x[0]; }));
  fol.charts.push_back(band(-3, 0, -3, 3, [](const Vec& x) { return -x[0]; }));
  const double edge = 1e-6;
  auto link = [&](int i, int j, double wlo, double whi) {
    FoliationTransition t;
    t.from_chart = i;
    t.to_chart = j;
    t.map = AffineIsometry::identity(1);
    t.valid_lo = Vec::Constant(1, wlo);
    t.valid_hi = Vec::Constant(1, whi);
    fol.transitions.push_back(t);
  };
  for (int upper : {0, 1})
    for (int side : {2, 3}) {
      double wlo = side == 2 ? edge : -3;
      double whi = side == 2 ? 3 : -edge;
      link(upper, side, wlo, whi);
      link(side, upper, wlo, whi);
    }
  return std::make_shared<GroupoidModel>(
      make_foliation_model(std::move(patch), std::move(fol)));
}

StackyCurve parabola_curve(std::shared_ptr<GroupoidModel> model, double lo = -1.5,
                           double hi = 1.5) {
  ParamCurve seg =
      expression_curve({Expression::parse("t"), Expression::parse("t^2")}, {lo, hi});
  return single_segment_curve(std::move(model), std::move(seg));
}

// closed form from the rotation/parabola example
double theta_closed_form(double t) {
  return std::acos(std::abs(t + 2 * t * t * t) /
                   (std::sqrt(1 + 4 * t * t) * std::sqrt(t * t + sq(t) * sq(t))));
}

}  // namespace

TEST_CASE("normal speed of the parabola under rotation") {
  StackyCurve curve = parabola_curve(rotation_model());
  CHECK_THAT(normal_speed(curve, 1.0),
             Catch::Matchers::WithinAbs(std::sqrt(4.5), 1e-9));
  CHECK_THAT(normal_speed(curve, 0.0), Catch::Matchers::WithinAbs(1.0, 1e-9));

  // cross-check against the closed-form angle profile on (0, 1]
  for (int i = 1; i <= 20; ++i) {
    double t = 0.05 * i;
    double ambient = std::sqrt(1.0 + 4.0 * t * t);
    double expected = std::cos(theta_closed_form(t)) * ambient;
    CHECK_THAT(normal_speed(curve, t), Catch::Matchers::WithinAbs(expected, 1e-8));
  }
}

TEST_CASE("radial curve is fully normal") {
  auto model = rotation_model();
  ParamCurve seg = expression_curve(
      {Expression::parse("1 + t"), Expression::parse("0")}, {0.0, 1.0});
  StackyCurve curve = single_segment_curve(model, seg);
  for (double t : {0.0, 0.3, 0.9})
    CHECK_THAT(normal_speed(curve, t), Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("velocity class values") {
  auto model = rotation_model();
  StackyCurve parabola = parabola_curve(model);
  VelocityClass vc = velocity(parabola, 1.0);
  CHECK_THAT(vc.norm, Catch::Matchers::WithinAbs(std::sqrt(4.5), 1e-9));

  // orbit-tangent circle: zero class
  ParamCurve circle = expression_curve(
      {Expression::parse("cos(t)"), Expression::parse("sin(t)")}, {0.0, 3.0});
  StackyCurve tangential = single_segment_curve(model, circle);
  CHECK(velocity(tangential, 1.0).norm < 1e-9);
}

TEST_CASE("length of straight line in trivial groupoid") {
  auto model = trivial_model();
  ParamCurve seg = expression_curve(
      {Expression::parse("t"), Expression::parse("2*t")}, {0.0, 1.0});
  StackyCurve curve = single_segment_curve(model, seg);
  CHECK_THAT(length(curve), Catch::Matchers::WithinAbs(std::sqrt(5.0), 1e-9));
}

TEST_CASE("overlap correction is exact under re-presentation") {
  auto model = trivial_model();
  ParamCurve seg = expression_curve(
      {Expression::parse("t"), Expression::parse("sin(t)")}, {0.0, 2.0});
  StackyCurve curve = single_segment_curve(model, seg);
  double base = length(curve);
  for (int pieces : {2, 3, 4}) {
    StackyCurve re = re_present(curve, pieces);
    validate_cocycle(re);
    CHECK_THAT(length(re), Catch::Matchers::WithinAbs(base, 1e-8));
  }
}

TEST_CASE("vertical segment under reflection has full length") {
  auto model = reflection_model();
  ParamCurve seg = expression_curve(
      {Expression::parse("0"), Expression::parse("t")}, {-1.0, 1.0});
  StackyCurve curve = single_segment_curve(model, seg);
  CHECK_THAT(length(curve), Catch::Matchers::WithinAbs(2.0, 1e-9));
  // while its endpoints' orbits are joined by a zero-length competitor:
  CHECK(same_orbit(*model, v2(0, -1), v2(0, 1), 1e-9));
}

TEST_CASE("length additivity and reparametrization invariance") {
  auto model = rotation_model();
  StackyCurve curve = parabola_curve(model, -1.0, 1.0);
  double whole = length(curve);
  double left = length(restrict_curve(curve, {-1.0, 0.25}));
  double right = length(restrict_curve(curve, {0.25, 1.0}));
  CHECK_THAT(left + right, Catch::Matchers::WithinAbs(whole, 1e-8));

  // phi(t) = t^3 scaled to [-1,1], monotone
  ParamCurve re = expression_curve(
      {Expression::parse("t^3"), Expression::parse("t^6")}, {-1.0, 1.0});
  StackyCurve reparam = single_segment_curve(model, re);
  CHECK_THAT(length(reparam), Catch::Matchers::WithinAbs(whole, 1e-6));
}

TEST_CASE("normal speed bounded by ambient speed") {
  auto model = rotation_model();
  StackyCurve curve = parabola_curve(model);
  for (int i = 0; i <= 50; ++i) {
    double t = -1.4 + 2.8 * i / 50.0;
    double ns = normal_speed(curve, t);
    double ambient =
        metric_norm(model->patch, curve.at(t),
                    curve.cocycle.segments[0].velocity(t));
    CHECK(ns >= -1e-12);
    CHECK(ns <= ambient + 1e-9);
  }
}

TEST_CASE("speed continuity profile across the fixed point") {
  StackyCurve curve = parabola_curve(rotation_model());
  std::vector<double> grid;
  for (int i = -200; i <= 200; ++i) grid.push_back(i * 1e-3);
  SpeedProfile profile = speed_continuity_profile(curve, grid);
  CHECK(profile.max_jump < 2e-3);  // continuous at the fixed point
  // value 1.0 at t = 0
  CHECK_THAT(profile.samples[200].second, Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("broken cocycle raises OverlapDisagreement") {
  auto model = trivial_model();
  StackyCurve bad;
  bad.model = model;
  bad.interval = {0.0, 1.0};
  bad.cocycle.cover = {{0.0, 0.6}, {0.4, 1.0}};
  bad.cocycle.segments = {
      expression_curve({Expression::parse("t"), Expression::parse("0")}, {0.0, 0.6}),
      expression_curve({Expression::parse("2*t"), Expression::parse("0")}, {0.4, 1.0})};
  bad.cocycle.transitions.resize(1);
  CHECK_THROWS_AS(normal_speed(bad, 0.5), OverlapDisagreement);
}

TEST_CASE("curve vs itself with refined cover is isomorphic") {
  auto model = rotation_model();
  StackyCurve curve = parabola_curve(model, -1.0, 1.0);
  StackyCurve refined = re_present(curve, 3);
  CHECK(curves_isomorphic(curve, refined, 256, 1e-6));
}

TEST_CASE("reflected curve is isomorphic under the reflection certificate") {
  auto model = reflection_model();
  ParamCurve a = expression_curve(
      {Expression::parse("t"), Expression::parse("1 + 0.2*sin(t)")}, {0.0, 2.0});
  ParamCurve b = expression_curve(
      {Expression::parse("t"), Expression::parse("-(1 + 0.2*sin(t))")}, {0.0, 2.0});
  StackyCurve ca = single_segment_curve(model, a);
  StackyCurve cb = single_segment_curve(model, b);
  CHECK(curves_isomorphic(ca, cb, 256, 1e-6));
}

TEST_CASE("flat-branch curves are different stacky curves") {
  // alpha_+(t) = (t, e^{1/t}) for t<0, (t, e^{-1/t}) for t>0;
  // alpha_- mirrors the right branch. Tangent to all orders at 0 yet not
  // related by a single group element on any neighborhood of 0.
  auto model = reflection_model();
  auto flat = [](double t, double sign_right) -> Vec {
    Vec x(2);
    x[0] = t;
    if (std::abs(t) < 1e-12) x[1] = 0.0;
    else if (t < 0) x[1] = std::exp(1.0 / t);
    else x[1] = sign_right * std::exp(-1.0 / t);
    return x;
  };
  auto flat_vel = [](double t, double sign_right) -> Vec {
    Vec v(2);
    v[0] = 1.0;
    if (std::abs(t) < 1e-3) v[1] = 0.0;
    else if (t < 0) v[1] = -std::exp(1.0 / t) / (t * t);
    else v[1] = sign_right * std::exp(-1.0 / t) / (t * t);
    return v;
  };
  ParamCurve plus, minus;
  plus.span = minus.span = {-1.0, 1.0};
  plus.pos = [flat](double t) { return flat(t, +1.0); };
  plus.vel = [flat_vel](double t) { return flat_vel(t, +1.0); };
  minus.pos = [flat](double t) { return flat(t, -1.0); };
  minus.vel = [flat_vel](double t) { return flat_vel(t, -1.0); };
  StackyCurve cp = single_segment_curve(model, plus);
  StackyCurve cm = single_segment_curve(model, minus);
  CHECK(!curves_isomorphic(cp, cm, 256, 1e-6));
  CHECK(curves_isomorphic(cp, cp, 256, 1e-6));
}

TEST_CASE("two-origins horizontal lines are different stacky curves") {
  auto model = punctured_vertical_foliation();
  ParamCurve a = expression_curve(
      {Expression::parse("t - 1"), Expression::parse("1")}, {0.0, 2.0});
  ParamCurve b = expression_curve(
      {Expression::parse("t - 1"), Expression::parse("-1")}, {0.0, 2.0});
  StackyCurve ca = single_segment_curve(model, a);
  StackyCurve cb = single_segment_curve(model, b);
  CHECK(!curves_isomorphic(ca, cb, 256, 1e-6));
  // restricted away from the missing origin they do agree
  StackyCurve ca_left = restrict_curve(ca, {0.0, 0.5});
  StackyCurve cb_left = restrict_curve(cb, {0.0, 0.5});
  ca_left.interval = cb_left.interval = {0.0, 0.5};
  CHECK(curves_isomorphic(ca_left, cb_left, 128, 1e-6));
}

TEST_CASE("polyline and sampled curves expose derivatives") {
  std::vector<double> times{0.0, 1.0, 2.0};
  std::vector<Vec> pts{v2(0, 0), v2(1, 0), v2(1, 1)};
  ParamCurve poly = polyline_curve(times, pts);
  CHECK((poly.velocity(0.5) - v2(1, 0)).norm() < 1e-12);
  CHECK((poly.velocity(1.5) - v2(0, 1)).norm() < 1e-12);

  std::vector<double> st;
  std::vector<Vec> sp;
  for (int i = 0; i <= 40; ++i) {
    double t = i * 0.05;
    st.push_back(t);
    sp.push_back(v2(std::cos(t), std::sin(t)));
  }
  ParamCurve smooth = sampled_curve(st, sp);
  CHECK((smooth.at(1.0) - v2(std::cos(1.0), std::sin(1.0))).norm() < 1e-4);
  CHECK((smooth.velocity(1.0) - v2(-std::sin(1.0), std::cos(1.0))).norm() < 1e-3);
}
