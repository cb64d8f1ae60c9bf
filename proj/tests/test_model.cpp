#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "example_models.hpp"
#include "mbmapq/model.hpp"

using namespace mbmapq;

TEST_CASE("geometric batch pmf") {
  PhBatch b = testmodels::geometric_batch(2.0);  // p = 0.5
  CHECK(b.pmf(1) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(b.pmf(3) == doctest::Approx(0.125).epsilon(1e-14));
  CHECK(b.residual(3) == doctest::Approx(0.125).epsilon(1e-14));
}

TEST_CASE("deterministic batch of size 1") {
  PhBatch b = testmodels::geometric_batch(1.0);  // P = 0
  CHECK(b.pmf(1) == doctest::Approx(1.0));
  CHECK(b.pmf(2) == doctest::Approx(0.0));
  CHECK(b.mean() == doctest::Approx(1.0));
  CHECK(b.factorial2() == doctest::Approx(0.0));
}

TEST_CASE("two-phase batch pmf by path enumeration") {
  PhBatch b;
  b.alpha = RowVec{{0.5, 0.5}};
  b.P = Mat{{0.0, 0.5}, {0.0, 0.0}};
  CHECK(b.pmf(1) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(b.pmf(2) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(b.pmf(3) == doctest::Approx(0.0));
}

TEST_CASE("pmf prefix sums are exact against residual") {
  PhBatch b = testmodels::geometric_batch(1.0 / 0.3);  // p = 0.7
  std::vector<double> g;
  double resid = 0;
  b.pmf_prefix(20, g, resid);
  double cum = 0;
  for (int n = 1; n <= 20; ++n) {
    cum += g[n - 1];
    CHECK(g[n - 1] == doctest::Approx(0.3 * std::pow(0.7, n - 1)).epsilon(1e-13));
  }
  CHECK(cum + resid == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(resid == doctest::Approx(std::pow(0.7, 20)).epsilon(1e-12));
}

TEST_CASE("batch moments, geometric mean 3") {
  PhBatch b = testmodels::geometric_batch(3.0);  // p = 2/3
  CHECK(b.mean() == doctest::Approx(3.0).epsilon(1e-13));
  CHECK(b.factorial2() == doctest::Approx(12.0).epsilon(1e-13));
}

TEST_CASE("batch pgf closed form and tail identity") {
  PhBatch b = testmodels::geometric_batch(2.0);
  CHECK(b.pgf(0.5) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  PhBatch c;
  c.alpha = RowVec{{0.5, 0.5}};
  c.P = Mat{{0.0, 0.5}, {0.0, 0.0}};
  for (double z : {0.3, 0.9}) {
    // (1 - G(z)) / (1 - z) = alpha (I - zP)^{-1} 1
    Mat ImzP = Mat::Identity(2, 2) - z * c.P;
    double rhs = c.alpha * ImzP.partialPivLu().solve(Vec::Ones(2));
    CHECK((1.0 - c.pgf(z)) / (1.0 - z) == doctest::Approx(rhs).epsilon(1e-13));
  }
}

TEST_CASE("service law moments and transforms") {
  auto det = ServiceLaw::deterministic(1.0);
  CHECK(det.mean() == doctest::Approx(1.0));
  CHECK(det.moment2() == doctest::Approx(1.0));
  CHECK(det.lst(1.0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));

  auto ex = ServiceLaw::exponential(2.0);
  CHECK(ex.mean() == doctest::Approx(0.5));
  CHECK(ex.moment2() == doctest::Approx(0.5));
  CHECK(ex.lst(2.0) == doctest::Approx(0.5));

  auto er = ServiceLaw::erlang(2, 3.0);
  CHECK(er.mean() == doctest::Approx(2.0 / 3.0));
  CHECK(er.moment2() == doctest::Approx(6.0 / 9.0));
  CHECK(er.lst(3.0) == doctest::Approx(0.25));

  auto hy = ServiceLaw::hyper_exponential({0.3, 0.7}, {1.0, 2.0});
  CHECK(hy.mean() == doctest::Approx(0.3 + 0.35));
  CHECK(hy.moment2() == doctest::Approx(0.3 * 2.0 + 0.7 * 0.5));
  CHECK(hy.lst(1.0) == doctest::Approx(0.3 * 0.5 + 0.7 * 2.0 / 3.0).epsilon(1e-15));

  auto mx = ServiceLaw::point_mixture({1.0, 4.0}, {0.5, 0.5});
  CHECK(mx.mean() == doctest::Approx(2.5));
  CHECK(mx.moment2() == doctest::Approx(8.5));
  CHECK(mx.lst(0.5) == doctest::Approx(0.5 * std::exp(-0.5) + 0.5 * std::exp(-2.0)).epsilon(1e-15));
}

TEST_CASE("stationary vector closed form and power iteration") {
  Mat Q{{-0.1, 0.1}, {0.2, -0.2}};
  RowVec pi = stationary(Q);
  CHECK(pi(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(pi(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  Model m = testmodels::example1('P', true, 1.0);
  Mat gen = m.C + m.D_total();
  RowVec p1 = stationary(gen);
  double th = 0;
  for (int i = 0; i < m.M; ++i) th = std::max(th, -gen(i, i));
  Mat step = Mat::Identity(m.M, m.M) + gen / (th * 1.001);
  RowVec p2 = RowVec::Constant(m.M, 1.0 / m.M);
  for (int it = 0; it < 20000; ++it) p2 = p2 * step;
  for (int i = 0; i < m.M; ++i) CHECK(p1(i) == doctest::Approx(p2(i)).epsilon(1e-10));
}

TEST_CASE("validate accepts the bundled examples") {
  for (char c : {'P', 'I', 'N'})
    for (bool gd : {true, false})
      for (double g : {1.0, 3.0}) CHECK_NOTHROW(validate(testmodels::two_class_example(c, gd, g, 0.15, 0.15)));
}

TEST_CASE("validate catches structural failures") {
  Model m = testmodels::example1('P', true, 1.0);
  m.C(0, 0) += 1e-6;
  CHECK_THROWS_WITH_AS(validate(m), doctest::Contains("row 0"), Error);
  try {
    validate(m);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::GeneratorRowSum);
    CHECK(e.exit_code() == 2);
  }

  m = testmodels::example1('P', true, 1.0);
  m.C(0, 1) = -0.1;
  CHECK_THROWS_AS(validate(m), Error);
  try {
    validate(m);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NegativeRate);
  }

  // two non-communicating environment states
  Model r;
  r.M = 2;
  r.C = Mat{{-1.0, 0.0}, {0.0, -1.0}};
  r.classes.resize(1);
  r.classes[0].D = Mat{{1.0, 0.0}, {0.0, 1.0}};
  r.classes[0].batch = testmodels::geometric_batch(1.0);
  r.classes[0].service = ServiceLaw::deterministic(1.0);
  try {
    validate(r);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ReducibleChain);
  }

  // batch phase that can never absorb
  m = testmodels::example1('P', true, 1.0);
  m.classes[0].batch.P(0, 0) = 1.0;
  try {
    validate(m);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SubstochasticViolation);
  }

  // no arrivals at all in one class
  m = testmodels::example1('P', true, 1.0);
  m.classes[0].D.setZero();
  m.C(0, 0) += 0.3;  // keep row sums conservative
  CHECK_THROWS_AS(validate(m), Error);
}

TEST_CASE("stationary summary on the shared-environment example") {
  Model m = testmodels::example1('P', true, 1.0);
  auto s = stationary_summary(m);
  CHECK(s.pi(0) == doctest::Approx(0.5).epsilon(1e-13));
  CHECK(s.pi(1) == doctest::Approx(0.5).epsilon(1e-13));
  CHECK(s.rho_k[0] == doctest::Approx(0.15).epsilon(1e-13));
  CHECK(s.rho_k[1] == doctest::Approx(0.6).epsilon(1e-13));
  CHECK(s.rho == doctest::Approx(0.75).epsilon(1e-13));
  CHECK(s.theta == doctest::Approx(0.7).epsilon(1e-13));
  CHECK(s.lambda[0] == doctest::Approx(0.15).epsilon(1e-13));
  CHECK(s.lambdaB[0] == doctest::Approx(0.15).epsilon(1e-13));

  Model m3 = testmodels::example1('P', true, 3.0);
  auto s3 = stationary_summary(m3);
  CHECK(s3.lambdaB[0] == doctest::Approx(0.05).epsilon(1e-13));
  CHECK(s3.EG[0] == doctest::Approx(3.0).epsilon(1e-13));
  CHECK(s3.lambda[0] == doctest::Approx(0.15).epsilon(1e-13));
  CHECK(s3.rho == doctest::Approx(0.75).epsilon(1e-13));
}

TEST_CASE("customer rate equals mean batch size times batch rate") {
  Model m = testmodels::example1('I', false, 3.0);
  auto s = stationary_summary(m);
  for (int k = 0; k < m.K(); ++k) {
    const auto& b = m.classes[k].batch;
    double direct = 0, resid = 1;
    RowVec a = b.alpha;
    for (int n = 1; resid > 1e-14; ++n) {
      RowVec next = a * b.P;
      direct += n * (a.sum() - next.sum()) * s.lambdaB[k];
      resid = next.sum();
      a = next;
    }
    CHECK(direct == doctest::Approx(s.lambda[k]).epsilon(1e-10));
  }
}

TEST_CASE("unstable model is rejected") {
  Model m = testmodels::two_class_example('P', true, 1.0, 0.3, 0.3);  // rho = 1.5
  try {
    stationary_summary(m);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Unstable);
    CHECK(e.exit_code() == 3);
  }
}

TEST_CASE("model json round trip") {
  const char* path = "test_model_tmp.json";
  {
    std::ofstream out(path);
    out << R"({
      "env_dim": 2,
      "C": [[-0.7, 0.1], [0.1, -0.1]],
      "classes": [
        {"D": [[0.3, 0], [0, 0]],
         "batch": {"alpha": [1.0], "P": [[0.0]]},
         "service": {"kind": "Deterministic", "params": {"point": 1.0}}},
        {"D": [[0.3, 0], [0, 0]],
         "batch": {"alpha": [1.0], "P": [[0.0]]},
         "service": {"kind": "Deterministic", "params": {"point": 4.0}}}
      ]
    })";
  }
  Model m = load_model(path);
  std::remove(path);
  CHECK_NOTHROW(validate(m));
  Model ref = testmodels::example1('P', true, 1.0);
  CHECK((m.C - ref.C).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK((m.classes[0].D - ref.classes[0].D).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK(m.classes[1].service.mean() == doctest::Approx(4.0));
}

TEST_CASE("raw pmf batch is canonicalized") {
  const char* path = "test_model_pmf_tmp.json";
  {
    std::ofstream out(path);
    out << R"({
      "env_dim": 1,
      "C": [[-1.0]],
      "classes": [
        {"D": [[1.0]],
         "batch": {"pmf": [0.25, 0.25, 0.5]},
         "service": {"kind": "Exponential", "params": {"rate": 4.0}}}
      ]
    })";
  }
  Model m = load_model(path);
  std::remove(path);
  CHECK_NOTHROW(validate(m));
  CHECK(m.any_raw_pmf());
  const auto& b = m.classes[0].batch;
  CHECK(b.pmf(1) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(b.pmf(2) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(b.pmf(3) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(b.pmf(4) == doctest::Approx(0.0));
  CHECK(b.mean() == doctest::Approx(2.25).epsilon(1e-14));
}

TEST_CASE("broken model files are rejected") {
  CHECK_THROWS_AS(load_model("no_such_file.json"), Error);
  const char* path = "test_model_bad_tmp.json";
  {
    std::ofstream out(path);
    out << R"({"C": [[-1.0]]})";
  }
  try {
    load_model(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::BadInput);
    CHECK(e.exit_code() == 2);
  }
  std::remove(path);
}
