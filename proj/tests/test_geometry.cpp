#include <catch2/catch_amalgamated.hpp>

#include "stacky/geometry.hpp"

using namespace stacky;

namespace {

Vec v2(double a, double b) {
  Vec x(2);
  x << a, b;
  return x;
}

ManifoldPatch euclid_box(double half = 5.0) {
  return make_euclidean_patch(v2(-half, -half), v2(half, half));
}

ManifoldPatch polar_box() { return make_polar_patch(v2(0.1, -3.2), v2(5.0, 3.2)); }

// Independent oracle for the polar metric: pull the flat metric back through
// (r, phi) -> (r cos phi, r sin phi) with an FD Jacobian.
Mat polar_pullback_oracle(const Vec& x) {
  auto embed = [](const Vec& p) {
    return v2(p[0] * std::cos(p[1]), p[0] * std::sin(p[1]));
  };
  double h = 1e-6;
  Mat jac(2, 2);
  for (int j = 0; j < 2; ++j) {
    Vec xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    jac.col(j) = (embed(xp) - embed(xm)) / (2.0 * h);
  }
  return jac.transpose() * jac;
}

}  // namespace

TEST_CASE("metric_at stock values") {
  ManifoldPatch euclid = euclid_box();
  CHECK(metric_at(euclid, v2(3, 4)).isApprox(Mat::Identity(2, 2)));

  // constant conformal factor 4 = e^{2u}, u = log(2)
  ManifoldPatch conf = make_conformal_patch(v2(-5, -5), v2(5, 5),
                                            Expression::parse("0.69314718055994531"));
  CHECK(metric_at(conf, v2(1.3, -0.2)).isApprox(4.0 * Mat::Identity(2, 2), 1e-12));

  ManifoldPatch polar = polar_box();
  Mat g = metric_at(polar, v2(2, 0));
  Mat expected = polar_pullback_oracle(v2(2, 0));
  CHECK((g - expected).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(g(0, 0) == 1.0);
  CHECK(g(1, 1) == 4.0);
}

TEST_CASE("metric_at errors") {
  ManifoldPatch euclid = euclid_box();
  CHECK_THROWS_AS(metric_at(euclid, v2(6, 0)), OutOfDomain);

  ManifoldPatch bad = euclid_box();
  bad.metric = [](const Vec&) {
    Mat g(2, 2);
    g << 1, 0, 0, 0;
    return g;
  };
  CHECK_THROWS_AS(metric_at(bad, v2(0, 0)), DegenerateMetric);
}

TEST_CASE("christoffel closed forms") {
  ManifoldPatch euclid = euclid_box();
  for (const Mat& gk : christoffel_at(euclid, v2(0.7, -1.1)))
    CHECK(gk.cwiseAbs().maxCoeff() == 0.0);

  ManifoldPatch polar = polar_box();
  std::vector<Mat> gamma = christoffel_at(polar, v2(2, 0));
  CHECK_THAT(gamma[0](1, 1), Catch::Matchers::WithinAbs(-2.0, 1e-12));
  CHECK_THAT(gamma[1](0, 1), Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK_THAT(gamma[1](1, 0), Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK(std::abs(gamma[0](0, 0)) < 1e-12);
  CHECK(std::abs(gamma[0](0, 1)) < 1e-12);
  CHECK(std::abs(gamma[1](1, 1)) < 1e-12);
}

TEST_CASE("conformal christoffel vs finite differences") {
  // u linear: closed-form conformal symbols, compared against the FD path
  // through an expression-entry patch with the same metric.
  Expression u = Expression::parse("0.3*x1 + 0.1*x2");
  ManifoldPatch conf = make_conformal_patch(v2(-2, -2), v2(2, 2), u);

  std::vector<std::vector<Expression>> entries(2, std::vector<Expression>(2));
  entries[0][0] = Expression::parse("exp(2*(0.3*x1 + 0.1*x2))");
  entries[0][1] = Expression::parse("0");
  entries[1][0] = Expression::parse("0");
  entries[1][1] = Expression::parse("exp(2*(0.3*x1 + 0.1*x2))");
  ManifoldPatch fd = make_expression_patch(v2(-2, -2), v2(2, 2), entries);

  Rng rng(11);
  for (int s = 0; s < 20; ++s) {
    Vec x = v2(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    std::vector<Mat> ga = christoffel_at(conf, x);
    std::vector<Mat> gb = christoffel_at(fd, x);
    for (int k = 0; k < 2; ++k)
      CHECK((ga[std::size_t(k)] - gb[std::size_t(k)]).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("christoffel symmetry and FD agreement on stock patches") {
  std::vector<ManifoldPatch> patches{
      euclid_box(), polar_box(),
      make_sphere_stereographic_patch(v2(-4, -4), v2(4, 4))};
  Rng rng(5);
  for (const ManifoldPatch& patch : patches) {
    ManifoldPatch fd = patch;
    fd.christoffel = nullptr;
    for (int s = 0; s < 100; ++s) {
      Vec x(2);
      for (int i = 0; i < 2; ++i) {
        double margin = 0.05 * (patch.domain.hi[i] - patch.domain.lo[i]);
        x[i] = rng.uniform(patch.domain.lo[i] + margin, patch.domain.hi[i] - margin);
      }
      std::vector<Mat> ga = christoffel_at(patch, x);
      std::vector<Mat> gn = christoffel_at(fd, x);
      for (int k = 0; k < 2; ++k) {
        CHECK((ga[std::size_t(k)] - ga[std::size_t(k)].transpose()).cwiseAbs().maxCoeff() ==
              0.0);
        CHECK((ga[std::size_t(k)] - gn[std::size_t(k)]).cwiseAbs().maxCoeff() < 1e-5);
      }
    }
  }
}

TEST_CASE("geodesic flow straight line") {
  ManifoldPatch euclid = euclid_box();
  GeodesicTrajectory traj = geodesic_flow(euclid, {v2(0, 0), v2(1, 0), 0.0}, {0.0, 1.0});
  CHECK(!traj.domain_exit);
  CHECK((traj.back().position - v2(1, 0)).norm() < 1e-10);
  CHECK((traj.back().velocity - v2(1, 0)).norm() < 1e-10);
}

TEST_CASE("geodesic flow polar radial line") {
  ManifoldPatch polar = polar_box();
  GeodesicTrajectory traj = geodesic_flow(polar, {v2(1, 0), v2(1, 0), 0.0}, {0.0, 1.0});
  CHECK(!traj.domain_exit);
  CHECK((traj.back().position - v2(2, 0)).norm() < 1e-8);
}

TEST_CASE("geodesic flow great circle period") {
  ManifoldPatch sphere = make_sphere_stereographic_patch(v2(-4, -4), v2(4, 4));
  // equator r=1 traversed at unit metric speed returns after 2*pi
  GeodesicTrajectory traj =
      geodesic_flow(sphere, {v2(1, 0), v2(0, 1), 0.0}, {0.0, 2.0 * M_PI});
  CHECK(!traj.domain_exit);
  CHECK((traj.back().position - v2(1, 0)).norm() < 1e-4);
  CHECK((traj.back().velocity - v2(0, 1)).norm() < 1e-4);
}

TEST_CASE("speed conservation along geodesics") {
  std::vector<ManifoldPatch> patches{
      polar_box(), make_sphere_stereographic_patch(v2(-4, -4), v2(4, 4))};
  Rng rng(17);
  for (const ManifoldPatch& patch : patches) {
    for (int s = 0; s < 5; ++s) {
      Vec x = v2(rng.uniform(1.0, 2.0), rng.uniform(-0.5, 0.5));
      Vec v = rng.unit_vector(2);
      GeodesicTrajectory traj = geodesic_flow(patch, {x, v, 0.0}, {0.0, 1.0});
      CHECK(traj.max_speed_drift <= 1e-6 * 2.0);
    }
  }
}

TEST_CASE("domain exit truncates with exit time") {
  ManifoldPatch euclid = euclid_box(1.0);
  GeodesicTrajectory traj = geodesic_flow(euclid, {v2(0, 0), v2(1, 0), 0.0}, {0.0, 3.0});
  CHECK(traj.domain_exit);
  CHECK_THAT(traj.exit_time, Catch::Matchers::WithinAbs(1.0, 1e-3));
  CHECK(traj.back().position[0] <= 1.0);
}

TEST_CASE("exp_point basics") {
  ManifoldPatch euclid = euclid_box();
  CHECK((exp_point(euclid, v2(0, 0), v2(0.3, 0.4)) - v2(0.3, 0.4)).norm() < 1e-10);
  CHECK((exp_point(euclid, v2(0.5, -0.25), Vec::Zero(2)) - v2(0.5, -0.25)).norm() == 0.0);

  ManifoldPatch polar = polar_box();
  CHECK((exp_point(polar, v2(1, 0), v2(0.5, 0)) - v2(1.5, 0)).norm() < 1e-8);
}

TEST_CASE("exp_point scaling matches flow reparametrization") {
  ManifoldPatch sphere = make_sphere_stereographic_patch(v2(-4, -4), v2(4, 4));
  Vec x = v2(0.8, 0.1);
  Vec v = v2(0.4, 0.3);
  GeodesicTrajectory traj = geodesic_flow(sphere, {x, v, 0.0}, {0.0, 1.0});
  for (double s : {0.25, 0.5, 0.75, 1.0}) {
    Vec via_exp = exp_point(sphere, x, s * v);
    CHECK((via_exp - traj.at(s).position).norm() < 1e-8);
  }
}

TEST_CASE("riemannian distance euclidean") {
  ManifoldPatch euclid = euclid_box();
  double d = riemannian_distance(euclid, v2(0, 0), v2(3, 4), 0.25);
  CHECK_THAT(d, Catch::Matchers::WithinRel(5.0, 0.01));
}

TEST_CASE("riemannian distance polar radial") {
  ManifoldPatch polar = polar_box();
  double d = riemannian_distance(polar, v2(1, 0), v2(2, 0), 0.1);
  CHECK_THAT(d, Catch::Matchers::WithinRel(1.0, 0.01));
}

TEST_CASE("riemannian distance half plane") {
  ManifoldPatch half = make_euclidean_patch(v2(-5, 0), v2(5, 5));
  double d = riemannian_distance(half, v2(1, 1), v2(2, 0), 0.2);
  CHECK_THAT(d, Catch::Matchers::WithinRel(std::sqrt(2.0), 0.01));
}

TEST_CASE("riemannian distance symmetry and triangle inequality") {
  ManifoldPatch sphere = make_sphere_stereographic_patch(v2(-2, -2), v2(2, 2));
  Rng rng(23);
  std::vector<Vec> pts;
  for (int i = 0; i < 4; ++i) pts.push_back(v2(rng.uniform(-1, 1), rng.uniform(-1, 1)));
  auto d = [&](const Vec& a, const Vec& b) {
    return riemannian_distance(sphere, a, b, 0.2);
  };
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      double dij = d(pts[i], pts[j]);
      CHECK_THAT(d(pts[j], pts[i]), Catch::Matchers::WithinAbs(dij, 1e-9));
      for (std::size_t k = 0; k < pts.size(); ++k) {
        if (k == i || k == j) continue;
        CHECK(dij <= d(pts[i], pts[k]) + d(pts[k], pts[j]) + 0.02);
      }
    }
}

TEST_CASE("disconnected domain flagged") {
  ManifoldPatch split = euclid_box(2.0);
  split.domain.predicate = [](const Vec& x) { return std::abs(x[0]) - 0.2; };
  CHECK_THROWS_AS(riemannian_distance(split, v2(-1, 0), v2(1, 0), 0.1), Disconnected);
}
