#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <vector>

#include "example_models.hpp"
#include "mbmapq/joint_engine.hpp"

using namespace mbmapq;

namespace {

Model poisson_unit_model(ServiceLaw law, double lam) {
  Model m;
  m.M = 1;
  m.C = Mat::Constant(1, 1, -lam);
  m.classes.resize(1);
  m.classes[0].D = Mat::Constant(1, 1, lam);
  m.classes[0].batch = testmodels::geometric_batch(1.0);
  m.classes[0].service = std::move(law);
  return m;
}

PhBatch bounded_batch(double extend) {
  // support {1, 2}: pmf(1) = 1 - extend, pmf(2) = extend, P nilpotent
  PhBatch b;
  b.alpha = RowVec::Zero(2);
  b.alpha(0) = 1.0;
  b.P = Mat::Zero(2, 2);
  b.P(0, 1) = extend;
  return b;
}

// two correlated streams with batches of size at most two
Model small_two_class() {
  Model m;
  m.M = 2;
  m.C = Mat(2, 2);
  m.C << -3.0, 1.0, 0.5, -2.5;
  m.classes.resize(2);
  m.classes[0].D = Mat(2, 2);
  m.classes[0].D << 1.0, 0.5, 0.0, 0.25;
  m.classes[0].batch = bounded_batch(0.4);
  m.classes[0].service = ServiceLaw::exponential(20.0);
  m.classes[1].D = Mat(2, 2);
  m.classes[1].D << 0.25, 0.25, 0.75, 1.0;
  m.classes[1].batch = bounded_batch(0.35);
  m.classes[1].service = ServiceLaw::erlang(2, 50.0);
  return m;
}

using SlotMap = std::map<std::pair<int, int>, Mat>;

// reference uniformization sweep with no truncation at all
SlotMap naive_sweep(const Model& m, const SlotMap& prev, double theta) {
  Mat IC = Mat::Identity(m.M, m.M) + m.C / theta;
  SlotMap out;
  auto add = [&](std::pair<int, int> key, const Mat& val) {
    auto it = out.find(key);
    if (it == out.end())
      out.emplace(key, val);
    else
      it->second += val;
  };
  for (const auto& [n, F] : prev) {
    add(n, F * IC);
    for (int k = 0; k < m.K(); ++k) {
      for (int l = 1; l <= 2; ++l) {
        double g = m.classes[k].batch.pmf(l);
        if (g == 0) continue;
        auto nn = n;
        (k == 0 ? nn.first : nn.second) += l;
        add(nn, F * (g / theta) * m.classes[k].D);
      }
    }
  }
  return out;
}

struct Captured {
  std::vector<int> n_F;
  std::vector<std::vector<Mat>> fields;  // per m, per global slot
};

}  // namespace

TEST_CASE("index space ranks and enumeration agree") {
  for (int K : {1, 2, 3, 4}) {
    IndexSpace sp(K, 9);
    std::vector<int> n(K), back(K);
    for (int L = 0; L <= 9; ++L) {
      std::fill(n.begin(), n.end(), 0);
      n[K - 1] = L;
      int64_t count = 0;
      do {
        CHECK(sp.rank(n.data(), L) == count);
        sp.unrank(L, count, back.data());
        CHECK(std::equal(n.begin(), n.end(), back.begin()));
        ++count;
      } while (IndexSpace::next_composition(n.data(), K));
      CHECK(count == sp.slots(L));
    }
    CHECK(sp.cum_slots(-1) == 0);
    int64_t acc = 0;
    for (int L = 0; L <= 9; ++L) {
      acc += sp.slots(L);
      CHECK(sp.cum_slots(L) == acc);
    }
  }
  IndexSpace sp2(2, 300);
  CHECK(sp2.slots(300) == 301);
  CHECK(sp2.cum_slots(300) == 301 * 302 / 2);
}

TEST_CASE("streamed arrival sweep matches the untruncated expansion") {
  Model m = small_two_class();
  StationarySummary s = stationary_summary(m);

  EngineOptions opt;
  opt.eps = 1e-6;
  opt.N_p = 40;
  opt.eps_F_override = 1e-15;  // mass test unreachable: keep every computed level
  opt.m_max_override = 6;
  opt.threads = 1;

  Captured cap;
  opt.f_observer = [&](const EngineOptions::FSweepView& v) {
    cap.n_F.push_back(v.n_F);
    std::vector<Mat> snap;
    int64_t nslots = v.space->cum_slots(v.n_F);
    for (int64_t g = 0; g < nslots; ++g) {
      Mat f(m.M, m.M);
      for (int i = 0; i < m.M; ++i)
        for (int j = 0; j < m.M; ++j) f(i, j) = v.field->at(g)[i * m.M + j];
      snap.push_back(f);
    }
    cap.fields.push_back(std::move(snap));
  };
  try {
    analyze(m, opt);  // forced sweep count voids the mass guarantees downstream
  } catch (const Error&) {
  }

  REQUIRE(cap.fields.size() == 7);
  CHECK(cap.n_F[0] == 0);
  CHECK(cap.n_F[1] == 2);  // batch cut is exact for nilpotent batches
  for (int mm = 2; mm <= 6; ++mm) CHECK(cap.n_F[mm] == 2 * mm);

  SlotMap ref;
  ref[{0, 0}] = Mat::Identity(2, 2);
  IndexSpace sp(2, 40);
  for (int mm = 1; mm <= 6; ++mm) {
    ref = naive_sweep(m, ref, s.theta);
    for (const auto& [n, F] : ref) {
      int L = n.first + n.second;
      REQUIRE(L <= cap.n_F[mm]);
      int nn[2] = {n.first, n.second};
      const Mat& got = cap.fields[mm][sp.level_offset(L) + sp.rank(nn, L)];
      CHECK((got - F).cwiseAbs().maxCoeff() <= 1e-13);
    }
    // engine slots not present in the reference map must be zero
    for (int L = 0; L <= cap.n_F[mm]; ++L)
      for (int64_t r = 0; r < sp.slots(L); ++r) {
        int nn[2];
        sp.unrank(L, r, nn);
        if (!ref.count({nn[0], nn[1]}))
          CHECK(cap.fields[mm][sp.level_offset(L) + r].cwiseAbs().maxCoeff() == 0.0);
      }
  }

  // first sweep in closed form
  Mat IC = Mat::Identity(2, 2) + m.C / s.theta;
  CHECK((cap.fields[1][0] - IC).cwiseAbs().maxCoeff() <= 1e-15);
  for (int k = 0; k < 2; ++k)
    for (int l = 1; l <= 2; ++l) {
      int nn[2] = {k == 0 ? l : 0, k == 0 ? 0 : l};
      const Mat& got = cap.fields[1][sp.level_offset(l) + sp.rank(nn, l)];
      Mat want = m.classes[k].batch.pmf(l) / s.theta * m.classes[k].D;
      CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-15);
    }

  // support never grows faster than one batch cut per sweep
  for (size_t mm = 1; mm < cap.n_F.size(); ++mm) CHECK(cap.n_F[mm] <= cap.n_F[mm - 1] + 2);
}

TEST_CASE("row sums of the accumulated fields stay stochastic-bounded") {
  Model m = small_two_class();
  EngineOptions opt;
  opt.eps = 1e-8;
  opt.N_p = 60;
  opt.threads = 1;
  EngineArtifacts art;
  JointResult res = analyze(m, opt, &art);
  StationarySummary s = stationary_summary(m);

  for (int k = 0; k < 2; ++k) {
    CHECK(res.ledger.A_mass[k] > 1.0 - 1e-8);
    CHECK(res.ledger.A_mass[k] <= 1.0 + 1e-12);
    CHECK(res.ledger.v_mass[k] > (1.0 - 1e-8) * s.lambdaB[k]);
    CHECK(res.ledger.v_mass[k] <= s.lambdaB[k] + 1e-12);
    CHECK(res.ledger.q_deficit[k] < 5 * opt.eps * (1.0 + m.classes[k].batch.mean()));
    CHECK(res.ledger.q_deficit[k] > -1e-9);
  }
  CHECK(res.ledger.f_slots_computed > 0);
  CHECK(res.ledger.f_slots_stored_peak > 0);
  int max_ng = std::max(res.ledger.n_g[0], res.ledger.n_g[1]);
  for (size_t mm = 1; mm < res.ledger.n_F.size(); ++mm)
    CHECK(res.ledger.n_F[mm] <= res.ledger.n_F[mm - 1] + max_ng);
}

TEST_CASE("single service phase queue matches the embedded point recursion") {
  // Poisson arrivals, deterministic unit service, utilisation one half
  double lam = 0.5, h = 1.0;
  Model m = poisson_unit_model(ServiceLaw::deterministic(h), lam);
  EngineOptions opt;
  opt.eps = 1e-12;
  opt.N_p = 100;
  opt.threads = 1;
  JointResult res = analyze(m, opt);

  // pi_{j+1} a_0 = pi_j - pi_0 a_j - sum_{i=1}^{j} pi_i a_{j-i+1}
  double rho = lam * h;
  std::vector<double> a(40), pi(30);
  a[0] = std::exp(-lam * h);
  for (size_t j = 1; j < a.size(); ++j) a[j] = a[j - 1] * lam * h / static_cast<double>(j);
  pi[0] = 1.0 - rho;
  for (size_t j = 0; j + 1 < pi.size(); ++j) {
    double rhs = pi[j] - pi[0] * a[j];
    for (size_t i = 1; i <= j; ++i) rhs -= pi[i] * a[j - i + 1];
    pi[j + 1] = rhs / a[0];
  }

  for (int j = 0; j < 25; ++j) {
    CHECK(std::abs(res.p.at(j)[0] - pi[j]) <= 1e-10);
    // arrivals see time averages here, so the departure view must agree too
    CHECK(std::abs(res.q[0].at(j)[0] - pi[j]) <= 1e-10);
  }
  CHECK(res.P0 == doctest::Approx(1.0 - rho).epsilon(1e-10));
}

TEST_CASE("unit batches collapse the resolvent stage") {
  Model m = testmodels::example1('P', true, 1.0);
  EngineOptions opt;
  opt.eps = 1e-6;
  opt.N_p = 160;
  opt.threads = 1;
  EngineArtifacts art;
  JointResult res = analyze(m, opt, &art);
  StationarySummary s = stationary_summary(m);
  IndexSpace sp(2, opt.N_p);

  for (int k = 0; k < 2; ++k) {
    CHECK(res.ledger.n_Gamma[k] == 0);
    // Γ(0) = I when the batch has a single member
    for (int i = 0; i < m.M; ++i)
      for (int j = 0; j < m.M; ++j)
        CHECK(std::abs(art.Gamma[k].at(0)[i * m.M + j] - (i == j ? 1.0 : 0.0)) <= 1e-14);
    // q reduces to the plain convolution of the workload and arrival fields
    double lamk = s.lambda[k];
    for (int L = 0; L <= 10; ++L)
      for (int64_t r = 0; r < sp.slots(L); ++r) {
        int n[2];
        sp.unrank(L, r, n);
        RowVec conv = RowVec::Zero(m.M);
        for (int a1 = 0; a1 <= n[0]; ++a1)
          for (int b1 = 0; b1 <= n[1]; ++b1) {
            int l1 = a1 + b1;
            int n1[2] = {a1, b1};
            int n2[2] = {n[0] - a1, n[1] - b1};
            const double* vv = art.vfield[k].at(sp.level_offset(l1) + sp.rank(n1, l1));
            const double* aa = art.A[k].at(sp.level_offset(L - l1) + sp.rank(n2, L - l1));
            for (int j = 0; j < m.M; ++j)
              for (int i = 0; i < m.M; ++i) conv(j) += vv[i] * aa[i * m.M + j];
          }
        const double* got = res.q[k].at(sp.level_offset(L) + r);
        for (int j = 0; j < m.M; ++j) CHECK(std::abs(got[j] - conv(j) / lamk) <= 1e-12);
      }
  }
}

TEST_CASE("geometric batch resolvent clears its mass bound") {
  Model m = testmodels::example1('P', true, 2.0);
  EngineOptions opt;
  opt.eps = 1e-6;
  opt.N_p = 260;
  opt.threads = 1;
  EngineArtifacts art;
  JointResult res = analyze(m, opt, &art);
  IndexSpace sp(2, opt.N_p);

  for (int k = 0; k < 2; ++k) {
    double p = m.classes[k].batch.P(0, 0);
    double target = 1.0 / (1.0 - p) - opt.eps * p / ((1.0 - p) * (1.0 - p));
    Vec acc = Vec::Zero(m.M);
    for (int64_t g = 0; g < sp.cum_slots(res.ledger.n_Gamma[k]); ++g)
      for (int i = 0; i < m.M; ++i)
        for (int j = 0; j < m.M; ++j) acc(i) += art.Gamma[k].at(g)[i * m.M + j];
    CHECK(acc.minCoeff() >= target);
    // Γ(0) = (I - p A(0))^{-1} for a single batch phase
    Mat A0(m.M, m.M), G0(m.M, m.M);
    for (int i = 0; i < m.M; ++i)
      for (int j = 0; j < m.M; ++j) {
        A0(i, j) = art.A[k].at(0)[i * m.M + j];
        G0(i, j) = art.Gamma[k].at(0)[i * m.M + j];
      }
    Mat want = (Mat::Identity(m.M, m.M) - p * A0).partialPivLu().solve(Mat::Identity(m.M, m.M));
    CHECK((G0 - want).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("correlated example keeps the published joint masses") {
  Model m = testmodels::example1('P', true, 1.0);
  EngineOptions opt;
  opt.eps = 1e-6;
  opt.N_p = 300;
  JointResult res = analyze(m, opt);
  IndexSpace sp(2, opt.N_p);

  auto pmass = [&](int a, int b) {
    int n[2] = {a, b};
    const double* c = res.p.at(sp.level_offset(a + b) + sp.rank(n, a + b));
    double s = 0;
    for (int j = 0; j < m.M; ++j) s += c[j];
    return s;
  };
  CHECK(std::abs(pmass(0, 0) - 2.500e-1) / 2.500e-1 <= 5e-4);
  CHECK(std::abs(pmass(1, 1) - 4.108e-2) / 4.108e-2 <= 5e-4);
  CHECK(std::abs(pmass(0, 4) - 6.630e-3) / 6.630e-3 <= 5e-4);
  CHECK(res.P0 == doctest::Approx(0.25).epsilon(2e-6));
  CHECK(res.ledger.p_deficit < 1e-3);
  CHECK(res.EN == doctest::Approx(5.8760).epsilon(1e-3));
  CHECK(res.EN_k[0] + res.EN_k[1] == doctest::Approx(res.EN).epsilon(1e-12));
}

TEST_CASE("joint aggregation equals the scalar total recursion") {
  for (char c : {'P', 'N'}) {
    Model m = testmodels::example1(c, c == 'P', 2.0);
    EngineOptions opt;
    opt.eps = 1e-6;
    opt.N_p = 260;
    opt.threads = 1;
    JointResult joint = analyze(m, opt);
    EngineOptions topt = opt;
    topt.total_mode = true;
    JointResult total = analyze(m, topt);

    IndexSpace sp(2, opt.N_p);
    for (int L = 0; L <= opt.N_p; ++L) {
      RowVec agg = RowVec::Zero(m.M);
      for (int64_t r = 0; r < sp.slots(L); ++r) {
        const double* cell = joint.p.at(sp.level_offset(L) + r);
        for (int j = 0; j < m.M; ++j) agg(j) += cell[j];
      }
      const double* tot = total.p.at(L);
      for (int j = 0; j < m.M; ++j) CHECK(std::abs(agg(j) - tot[j]) <= 1e-10);
      CHECK(std::abs(joint.level_mass[L] - total.level_mass[L]) <= 1e-10);
    }
    CHECK(std::abs(joint.EN - total.EN) <= 1e-8 * (1.0 + std::abs(joint.EN)));
  }
}

TEST_CASE("thread count never changes a single bit of the output") {
  Model m = testmodels::example1('N', false, 2.0);
  EngineOptions opt;
  opt.eps = 1e-6;
  opt.N_p = 100;
  opt.threads = 1;
  JointResult one = analyze(m, opt);
  opt.threads = 3;
  JointResult three = analyze(m, opt);

  REQUIRE(one.p.data.size() == three.p.data.size());
  CHECK(std::memcmp(one.p.data.data(), three.p.data.data(), one.p.data.size() * sizeof(double)) == 0);
  for (int k = 0; k < 2; ++k) {
    REQUIRE(one.q[k].data.size() == three.q[k].data.size());
    CHECK(std::memcmp(one.q[k].data.data(), three.q[k].data.data(),
                      one.q[k].data.size() * sizeof(double)) == 0);
  }
  CHECK(one.EN == three.EN);
}

TEST_CASE("cutoff search reproduces a direct scan") {
  Model m = poisson_unit_model(ServiceLaw::deterministic(1.0), 0.5);
  EngineOptions opt;
  opt.eps = 1e-6;
  opt.N_p = 60;
  opt.threads = 1;
  JointResult res = analyze(m, opt);

  double theta = 0.5;
  double eps_F = res.ledger.eps_F;
  CHECK(eps_F > 0);
  CHECK(eps_F <= 0.5 * opt.eps / (theta * 1.0));
  // independent minimal-m scan for the discounted service masses
  double acc = 0, w = 1, term = std::exp(-theta * 1.0);
  int mg = 0;
  for (;; ++mg) {
    acc += term * w;
    if (acc > 1.0 - opt.eps) break;
    w *= 1.0 - eps_F;
    term = term * (theta * 1.0) / (mg + 1);
  }
  CHECK(res.ledger.m_gamma[0] == mg);
  CHECK(res.ledger.m_max >= mg);
}

TEST_CASE("engine rejects what it cannot answer exactly") {
  Model m = poisson_unit_model(ServiceLaw::deterministic(1.0), 0.5);
  m.classes[0].batch.from_raw_pmf = true;
  EngineOptions opt;
  try {
    analyze(m, opt);
    FAIL("raw pmf batch must be rejected");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::BadInput);
    CHECK(e.exit_code() == 2);
  }

  Model ok = poisson_unit_model(ServiceLaw::deterministic(1.0), 0.5);
  EngineOptions bad;
  bad.N_p = 0;
  CHECK_THROWS_AS(analyze(ok, bad), Error);
  EngineOptions bad2;
  bad2.eps = 0.7;
  CHECK_THROWS_AS(analyze(ok, bad2), Error);

  Model unstable = poisson_unit_model(ServiceLaw::deterministic(3.0), 0.5);
  try {
    analyze(unstable, EngineOptions{});
    FAIL("unstable load must be rejected");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Unstable);
    CHECK(e.exit_code() == 3);
  }
}

TEST_CASE("tight budget trips the storage guard") {
  Model m = testmodels::example1('P', true, 1.0);
  EngineOptions opt;
  opt.N_p = 300;
  opt.max_cells = 1000;
  try {
    analyze(m, opt);
    FAIL("budget guard must fire");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::BudgetExceeded);
    CHECK(e.exit_code() == 4);
  }
}
