#include "mbmapq/workload.hpp"

#include <cmath>
#include <cstdio>

namespace mbmapq {

namespace {

// Extend the per-class composite series until the untracked tail of
// sum_m D^(m)(theta) X^m (any substochastic X) is below tol entrywise.
int composite_cut(const Model& m, CoefficientSet& coeff, double tol) {
  std::vector<double> dmax(static_cast<size_t>(m.K()));
  for (int k = 0; k < m.K(); ++k)
    dmax[static_cast<size_t>(k)] =
        (m.classes[static_cast<size_t>(k)].D * Vec::Ones(m.M)).maxCoeff();
  int M_B = 0;
  for (;; ++M_B) {
    double tail = 0;
    for (int k = 0; k < m.K(); ++k)
      tail += coeff.d[static_cast<size_t>(k)].residual_after(M_B) * dmax[static_cast<size_t>(k)];
    if (tail < tol) break;
    if (M_B > 2000000)
      throw Error(ErrorKind::NoConvergence, "composite mass series does not close");
  }
  return M_B;
}

}  // namespace

QKappa compute_Q_kappa(const Model& m, const StationarySummary& s, CoefficientSet& coeff) {
  const double theta = s.theta;
  int M_B = composite_cut(m, coeff, 1e-15 * theta);
  std::vector<Mat> D(static_cast<size_t>(M_B) + 1);
  for (int i = 0; i <= M_B; ++i) D[static_cast<size_t>(i)] = coeff.D_matrix(m, i);

  Mat Q = m.C;
  const int cap = 100000;
  int it = 0;
  for (; it < cap; ++it) {
    Mat X = Mat::Identity(m.M, m.M) + Q / theta;
    Mat acc = D[static_cast<size_t>(M_B)];
    for (int i = M_B - 1; i >= 0; --i) acc = D[static_cast<size_t>(i)] + acc * X;
    Mat Qn = m.C + acc;
    double delta = (Qn - Q).cwiseAbs().maxCoeff();
    Q = Qn;
    if (delta < 1e-13) break;
  }
  if (it == cap) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "Q fixed point: no convergence after %d sweeps", cap);
    throw Error(ErrorKind::NoConvergence, buf);
  }

  QKappa out;
  out.Q = Q;
  out.kappa = stationary(Q);
  out.v0 = (1.0 - s.rho) * out.kappa;
  return out;
}

Mg1Chain::Mg1Chain(const Model& m, const StationarySummary& s, CoefficientSet& coeff,
                   const RowVec& kappa)
    : M_(m.M) {
  const double theta = s.theta;
  int M_B = composite_cut(m, coeff, 1e-14 * theta);
  if (M_B < 1) M_B = 1;
  B_.resize(static_cast<size_t>(M_B) + 1);
  B_[0] = Mat::Identity(M_, M_) + (m.C + coeff.D_matrix(m, 0)) / theta;
  for (int i = 1; i <= M_B; ++i) B_[static_cast<size_t>(i)] = coeff.D_matrix(m, i) / theta;

  // minimal nonnegative solution of G = sum_m B_m G^m, from below
  G_ = Mat::Zero(M_, M_);
  const int cap = 100000;
  int it = 0;
  for (; it < cap; ++it) {
    Mat acc = B_[static_cast<size_t>(M_B)];
    for (int i = M_B - 1; i >= 0; --i) acc = B_[static_cast<size_t>(i)] + acc * G_;
    double delta = (acc - G_).cwiseAbs().maxCoeff();
    G_ = acc;
    if (delta < 1e-14) break;
  }
  if (it == cap)
    throw Error(ErrorKind::NoConvergence, "first-passage matrix iteration did not converge");
  double grs = G_.rowwise().sum().minCoeff();
  if (grs < 1.0 - 1e-10)
    throw Error(ErrorKind::NoConvergence, "first-passage matrix is substochastic beyond tolerance");

  S_.resize(static_cast<size_t>(M_B) + 1);
  S_[static_cast<size_t>(M_B)] = B_[static_cast<size_t>(M_B)];
  for (int i = M_B - 1; i >= 1; --i)
    S_[static_cast<size_t>(i)] = B_[static_cast<size_t>(i)] + S_[static_cast<size_t>(i + 1)] * G_;
  ImS1T_ = Eigen::PartialPivLU<Mat>((Mat::Identity(M_, M_) - S_[1]).transpose());

  RowVec rhs = (1.0 - s.rho) * kappa;
  Vec x0t = B_[0].transpose().partialPivLu().solve(rhs.transpose());
  RowVec x0 = x0t.transpose();

  // censored-chain stationarity at level 0 must agree with the transform solve
  RowVec resid = x0 * (B_[0] + S_[1]) - x0;
  if (resid.cwiseAbs().maxCoeff() > 1e-9)
    throw Error(ErrorKind::NoConvergence, "level-0 workload vector fails the censored fixed point");

  x_.push_back(x0);
  cum_ = x0;
}

void Mg1Chain::extend_to(int m) {
  int M_B = blocks();
  while (static_cast<int>(x_.size()) <= m) {
    int i = static_cast<int>(x_.size());
    RowVec bracket = RowVec::Zero(M_);
    int ltop = std::min(i + 1, M_B);
    for (int l = 2; l <= ltop; ++l) bracket += x_[static_cast<size_t>(i + 1 - l)] * S_[static_cast<size_t>(l)];
    Vec xt = ImS1T_.solve(bracket.transpose());
    x_.push_back(xt.transpose());
    cum_ += x_.back();
  }
}

const RowVec& Mg1Chain::v(int m) {
  extend_to(m);
  return x_[static_cast<size_t>(m)];
}

RowVec solve_v_lst(const Model& m, const StationarySummary& s, const RowVec& kappa, double sval) {
  if (!(sval > 0)) throw Error(ErrorKind::SingularSystem, "transform argument must be positive");
  Mat A = sval * Mat::Identity(m.M, m.M) + m.C;
  for (int k = 0; k < m.K(); ++k) {
    const auto& c = m.classes[static_cast<size_t>(k)];
    A += c.batch.pgf(c.service.lst(sval)) * c.D;
  }
  RowVec rhs = sval * (1.0 - s.rho) * kappa;
  Vec x = A.transpose().partialPivLu().solve(rhs.transpose());
  return x.transpose();
}

RowVec mean_workload(const Model& m, const StationarySummary& s, CoefficientSet& /*coeff*/,
                     const RowVec& kappa) {
  // v1bar (C + D) = pi (I - sum_k h_k E[G_k] D_k) - (1-rho) kappa, closed by
  // v1bar·(1 - sum_k h_k E[G_k] D_k 1) = sum_k lambdaB_k (E[Gk(Gk-1)] h_k^2 + E[G_k] h_k2) / 2
  RowVec pi = s.pi;
  Mat A = m.C + m.D_total();
  Mat W = Mat::Identity(m.M, m.M);
  double sstar = 0;
  for (int k = 0; k < m.K(); ++k) {
    size_t sk = static_cast<size_t>(k);
    W -= s.h[sk] * s.EG[sk] * m.classes[sk].D;
    sstar += 0.5 * s.lambdaB[sk] * (s.EG2f[sk] * s.h[sk] * s.h[sk] + s.EG[sk] * s.h2[sk]);
  }
  RowVec rhs = pi * W - (1.0 - s.rho) * kappa;
  Vec cvec = W * Vec::Ones(m.M);
  A.col(m.M - 1) = cvec;
  RowVec rhs2 = rhs;
  rhs2(m.M - 1) = sstar;
  Eigen::FullPivLU<Mat> lu(A.transpose());
  if (!lu.isInvertible())
    throw Error(ErrorKind::SingularSystem, "mean workload system is singular");
  Vec xt = lu.solve(rhs2.transpose());
  RowVec v1bar = xt.transpose();

  // cross-check E[V] against Richardson-extrapolated differences of v*(s)·1
  auto f = [&](double sv) { return (1.0 - solve_v_lst(m, s, kappa, sv).sum()) / sv; };
  double f1 = f(1e-2), f2 = f(5e-3), f3 = f(2.5e-3);
  double g1 = 2 * f2 - f1, g2 = 2 * f3 - f2;
  double extrap = (4 * g2 - g1) / 3;
  double ev = v1bar.sum();
  if (std::abs(extrap - ev) > 0.02 * std::max(std::abs(ev), 1e-9)) {
    char buf[128];
    std::snprintf(buf, sizeof(buf),
                  "mean workload %.6g disagrees with transform differences %.6g", ev, extrap);
    throw Error(ErrorKind::SingularSystem, buf);
  }
  return v1bar;
}

RowVec waiting_lst(const Model& m, const StationarySummary& s, const RowVec& kappa, int k,
                   double sval) {
  if (!(sval > 0)) throw Error(ErrorKind::SingularSystem, "transform argument must be positive");
  const auto& c = m.classes[static_cast<size_t>(k)];
  double Hs = c.service.lst(sval);
  if (1.0 - Hs < 1e-15)
    throw Error(ErrorKind::DegenerateService, "service transform is 1; use the mean instead");
  RowVec vs = solve_v_lst(m, s, kappa, sval);
  double factor = (1.0 - c.batch.pgf(Hs)) / (s.lambda[static_cast<size_t>(k)] * (1.0 - Hs));
  return factor * (vs * c.D);
}

double mean_waiting(const Model& m, const StationarySummary& s, const RowVec& v1bar, int k) {
  size_t sk = static_cast<size_t>(k);
  double vD = (v1bar * m.classes[sk].D).sum();
  return (vD * s.EG[sk] + s.lambdaB[sk] * s.h[sk] * s.EG2f[sk] * 0.5) / s.lambda[sk];
}

}  // namespace mbmapq
