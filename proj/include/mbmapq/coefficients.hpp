#pragma once

#include <vector>

#include "mbmapq/model.hpp"

namespace mbmapq {

// Poisson-mixed service masses gamma^(m) = int e^{-theta y} (theta y)^m / m! dH(y),
// evaluated per distribution kind by multiplicative recurrence and grown on
// demand. residual_after(m) = 1 - sum_{l<=m} gamma(l) is maintained by the same
// subtraction the truncation analysis uses, never re-derived from the sum.
class GammaSeries {
 public:
  GammaSeries(const ServiceLaw& law, double theta);

  double gamma(int m);
  double residual_after(int m);
  int materialized() const { return static_cast<int>(vals_.size()); }

 private:
  struct Branch {
    double w;         // mixture weight
    double cur;       // pmf value at the last materialized index
    double ratio;     // per-step geometric factor (exponential/erlang kinds)
    double ty;        // theta*y for point kinds
    int erlang_shape = 0;
    bool log_form = false;  // evaluate Poisson terms in log space (theta*y > 700)
  };
  void extend_to(int m);
  std::vector<Branch> branches_;
  std::vector<double> vals_;
  std::vector<double> resid_;
};

// Composite batch/service masses d^(m): 1 x Mk rows satisfying
//   sum_m z^m d^(m) = gh(z) alpha (I-P) [I - gh(z) P]^{-1},  gh(z) = sum gamma^(m) z^m.
// d^(m)·1 sums the n-fold service convolutions against the batch pmf, so
// sum_m d^(m)·1 = 1; the running deficit is tracked for block truncation.
class DSeries {
 public:
  DSeries(const PhBatch& batch, GammaSeries& gamma);

  const RowVec& d(int m);
  double dsum(int m);            // d(m)·1
  double residual_after(int m);  // 1 - sum_{l<=m} dsum(l)

 private:
  void extend_to(int m);
  const PhBatch& batch_;
  GammaSeries& gamma_;
  Mat phi_;       // [I - gamma^(0) P]^{-1}
  RowVec aIPphi_; // alpha (I-P) phi
  Mat Pphi_;      // P phi
  std::vector<RowVec> d_;
  std::vector<double> dsum_;
  std::vector<double> resid_;
};

// All-classes composite: D^(m)(theta) = sum_k (d_k^(m)·1) D_k.
// Holds references into the model's batches; the model must outlive it.
struct CoefficientSet {
  double theta = 0;
  std::vector<GammaSeries> gamma;  // per class
  std::vector<DSeries> d;          // per class

  CoefficientSet(const Model& m, double theta);
  CoefficientSet(const CoefficientSet&) = delete;
  CoefficientSet& operator=(const CoefficientSet&) = delete;

  Mat D_matrix(const Model& m, int order);  // D^(order)(theta)
};

}  // namespace mbmapq
