#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mbmapq/coefficients.hpp"
#include "mbmapq/model.hpp"
#include "mbmapq/workload.hpp"

namespace mbmapq {

// Enumeration of K-part multi-indices n grouped by level |n| = sum n_k, each
// level ordered lexicographically (n_1 major, ascending). Ranks are computed
// with a binomial table; total mode is the K = 1 instance. Slot ids are global:
// gid = cum_slots(level-1) + rank.
class IndexSpace {
 public:
  IndexSpace(int K, int max_level);

  int K() const { return K_; }
  int max_level() const { return max_level_; }
  int64_t slots(int level) const;      // indices at the level
  int64_t cum_slots(int level) const;  // indices at levels 0..level (inclusive)
  int64_t level_offset(int level) const { return level ? cum_slots(level - 1) : 0; }

  int64_t rank(const int* n, int level) const;  // position within its level
  void unrank(int level, int64_t r, int* n) const;
  // lexicographic successor within a level; returns false after the last one
  static bool next_composition(int* n, int K);

 private:
  int K_;
  int max_level_;
  std::vector<std::vector<int64_t>> binom_;  // binom_[r][c], c <= K_
  std::vector<int64_t> cum_;
};

// One flat buffer per field; cell doubles per slot (M*M matrices, rows, etc).
struct Field {
  int cell = 0;
  std::vector<double> data;

  void init(int64_t nslots, int cell_size) {
    cell = cell_size;
    data.assign(static_cast<size_t>(nslots) * cell_size, 0.0);
  }
  double* at(int64_t gid) { return data.data() + gid * cell; }
  const double* at(int64_t gid) const { return data.data() + gid * cell; }
};

struct TruncationLedger {
  double eps = 0, eps_F = 0, eps_g = 0;
  std::vector<int> m_gamma, m_v;  // per-class fold cutoffs
  int m_max = 0;
  std::vector<int> n_g;      // per-class batch cuts
  std::vector<int> n_F;      // support radius per sweep, index m = 0..m_max
  std::vector<int> n_A, n_v, n_Gamma;
  int N_p = 300;
  uint64_t f_slots_computed = 0;
  uint64_t f_slots_stored_peak = 0;
  // realized error-bound masses, asserted against the guarantees
  std::vector<double> A_mass;      // min_i (sum_n A_k(n) 1)_i  > 1 - eps
  std::vector<double> v_mass;      // sum_n v_k(n) 1            > (1-eps) lambdaB_k
  std::vector<double> q_deficit;   // 1 - sum_n q_k(n) 1
  double p_deficit = 0;            // 1 - sum_n p(n) 1
  int64_t p_clamped = 0;           // tiny negative round-off zeroed in q and p
  int p_support = 0;               // last level of p reached by q mass; zeros beyond
};

struct EngineOptions {
  double eps = 1e-6;
  int N_p = 300;
  bool total_mode = false;
  int threads = 0;  // 0 = all hardware threads
  uint64_t max_cells = 400000000;  // budget on allocated field doubles
  double eps_F_override = 0;  // diagnostics / experiments only
  double eps_g_override = 0;
  int m_max_override = -1;

  // observer for each completed F sweep (diagnostics and oracle tests)
  struct FSweepView {
    int m;
    int n_F;
    const IndexSpace* space;
    const Field* field;  // M x M row-major cells, valid during the callback
  };
  std::function<void(const FSweepView&)> f_observer;
};

// Optional capture of intermediate fields for diagnosis and tests.
struct EngineArtifacts {
  std::vector<Field> A;      // per class, M*M cells over levels <= n_A(k)
  std::vector<Field> vfield; // per class, M cells over levels <= n_v(k)
  std::vector<Field> Gamma;  // per class, (M*Mk)^2 cells over levels <= n_Gamma(k)
};

struct JointResult {
  int K = 0, M = 0;
  bool total_mode = false;
  int N_p = 0;
  std::vector<Field> q;  // per class, M cells per slot, levels 0..N_p
  Field p;               // M cells per slot, levels 0..N_p
  std::vector<double> level_mass;  // sum_{|n|=L} p(n)·1
  std::vector<double> EN_k;        // includes the tail correction split
  std::vector<double> EN_k_partial;
  double EN = 0;
  double tail_correction = 0;
  double tail_ratio = 0;
  bool tail_unbounded = false;
  double P0 = 0;  // p(0)·1
  TruncationLedger ledger;
};

// Runs the full pipeline: cutoffs, streamed F accumulation into A/v, the
// Kronecker resolvent field, departure-epoch vectors q_k, time-stationary p,
// and means with a fitted geometric tail. Joint and total modes share every
// recursion; total mode sums class movements onto a scalar level index.
JointResult analyze(const Model& model, const EngineOptions& opt,
                    EngineArtifacts* capture = nullptr);

}  // namespace mbmapq
