#pragma once

#include <vector>

#include "mbmapq/coefficients.hpp"
#include "mbmapq/model.hpp"

namespace mbmapq {

struct QKappa {
  Mat Q;         // busy-period-excised generator
  RowVec kappa;  // kappa Q = 0, kappa·1 = 1
  RowVec v0;     // (1 - rho) kappa = workload mass at zero
};

// Fixed point Q = C + sum_m D^(m)(theta) (I + Q/theta)^m started at Q = C.
QKappa compute_Q_kappa(const Model& m, const StationarySummary& s, CoefficientSet& coeff);

// Skip-free-to-the-left block chain whose stationary block vectors are the
// Poisson-mixed workload masses v^(m)(theta). Blocks B_0 = I + (C + D^(0))/theta,
// B_m = D^(m)/theta, truncated once the partial row sums exceed 1 - 1e-14.
// The level-0 vector solves x_0 B_0 = (1-rho) kappa (the z^0 coefficient of the
// transform identity); the censored-chain fixed point x_0 (B_0 + S_1) = x_0 is
// asserted as a cross-check, and higher levels follow the usual first-passage
// recursion with S_i = B_i + S_{i+1} G.
class Mg1Chain {
 public:
  Mg1Chain(const Model& m, const StationarySummary& s, CoefficientSet& coeff, const RowVec& kappa);
  Mg1Chain(const Mg1Chain&) = delete;
  Mg1Chain& operator=(const Mg1Chain&) = delete;

  const RowVec& v(int m);      // v^(m)(theta), grown on demand
  RowVec cumulative() const { return cum_; }  // sum over materialized terms
  int materialized() const { return static_cast<int>(x_.size()); }
  int blocks() const { return static_cast<int>(B_.size()) - 1; }  // M_B
  const Mat& B(int m) const { return B_[static_cast<size_t>(m)]; }
  const Mat& G() const { return G_; }

 private:
  void extend_to(int m);
  int M_;
  Mat G_;
  std::vector<Mat> B_;  // B_0 .. B_{M_B}
  std::vector<Mat> S_;  // S_1 .. S_{M_B} at indices 1..M_B (index 0 unused)
  Eigen::PartialPivLU<Mat> ImS1T_;  // (I - S_1)^T
  std::vector<RowVec> x_;
  RowVec cum_;
};

// Mean workload vector -dv*/ds|_0 from the differentiated transform relation,
// closed by the scalar second-derivative identity; cross-checked against
// Richardson-extrapolated finite differences of v*(s).
RowVec mean_workload(const Model& m, const StationarySummary& s, CoefficientSet& coeff,
                     const RowVec& kappa);

// v*(s) [sI + C + D*(s)] = s (1-rho) kappa  with D*(s) = sum_k Gk(Hk*(s)) D_k.
RowVec solve_v_lst(const Model& m, const StationarySummary& s, const RowVec& kappa, double sval);

// w_k*(s) = v*(s) (D_k - Gk(Hk*(s)) D_k) / (lambda_k (1 - Hk*(s))).
RowVec waiting_lst(const Model& m, const StationarySummary& s, const RowVec& kappa, int k,
                   double sval);

// E[W_k] = (v1bar D_k 1 E[G_k] + lambdaB_k h_k E[G_k(G_k-1)]/2) / lambda_k.
double mean_waiting(const Model& m, const StationarySummary& s, const RowVec& v1bar, int k);

}  // namespace mbmapq
