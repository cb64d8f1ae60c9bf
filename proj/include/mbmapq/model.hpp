#pragma once

#include <string>
#include <vector>

#include "mbmapq/errors.hpp"
#include "mbmapq/types.hpp"

namespace mbmapq {

// Discrete phase-type batch size: P(G = n) = alpha P^{n-1} (I - P) 1, n >= 1.
struct PhBatch {
  RowVec alpha;  // 1 x Mk, alpha·1 = 1
  Mat P;         // Mk x Mk substochastic, spectral radius < 1
  bool from_raw_pmf = false;

  int dim() const { return static_cast<int>(P.rows()); }
  double pmf(int n) const;
  double residual(int n) const;  // P(G > n) = alpha P^n 1
  // g(1..n) in one sweep plus the exact leftover alpha P^n 1.
  void pmf_prefix(int n, std::vector<double>& g, double& resid) const;
  double mean() const;        // alpha (I-P)^{-1} 1
  double factorial2() const;  // E[G(G-1)] = 2 alpha (I-P)^{-2} P 1
  double pgf(double z) const; // z alpha (I - zP)^{-1} (I-P) 1
};

enum class ServiceKind {
  Deterministic,
  Exponential,
  Erlang,
  HyperExponential,
  DiscretePointMixture,
};

struct ServiceLaw {
  ServiceKind kind = ServiceKind::Deterministic;
  int shape = 1;          // Erlang only
  std::vector<double> a;  // Deterministic: {y}; Exponential/Erlang: {rate};
                          // HyperExponential: rates; DiscretePointMixture: points
  std::vector<double> w;  // branch weights for the two mixture kinds

  double mean() const;
  double moment2() const;
  double lst(double s) const;  // E[exp(-sY)]

  static ServiceLaw deterministic(double y);
  static ServiceLaw exponential(double rate);
  static ServiceLaw erlang(int shape, double rate);
  static ServiceLaw hyper_exponential(std::vector<double> weights, std::vector<double> rates);
  static ServiceLaw point_mixture(std::vector<double> points, std::vector<double> weights);
};

struct ClassSpec {
  Mat D;  // M x M, nonnegative, at least one positive entry
  PhBatch batch;
  ServiceLaw service;
};

struct Model {
  int M = 0;
  Mat C;  // M x M: negative diagonal, nonnegative off-diagonal
  std::vector<ClassSpec> classes;

  int K() const { return static_cast<int>(classes.size()); }
  Mat D_total() const;  // sum_k E-row version: sum_k D_k
  bool any_raw_pmf() const;
};

struct StationarySummary {
  RowVec pi;                    // pi (C+D) = 0, pi·1 = 1
  std::vector<double> lambdaB;  // batch rates pi D_k 1
  std::vector<double> EG;       // E[G_k]
  std::vector<double> EG2f;     // E[G_k (G_k - 1)]
  std::vector<double> lambda;   // customer rates E[G_k]·lambdaB_k
  std::vector<double> h;        // service means
  std::vector<double> h2;       // service second moments
  std::vector<double> rho_k;
  double rho = 0.0;
  double theta = 0.0;  // max_i |C_ii|
};

// Throws Error with kind GeneratorRowSum / NegativeRate / ReducibleChain /
// SubstochasticViolation / BadInput, naming the offending index.
void validate(const Model& m);

// Left stationary vector of an irreducible conservative generator.
RowVec stationary(const Mat& generator);

// Throws Error(Unstable) when rho >= 1 - 1e-12. Model must be validated.
StationarySummary stationary_summary(const Model& m);

Model load_model(const std::string& path);

}  // namespace mbmapq
