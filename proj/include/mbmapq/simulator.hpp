#pragma once

#include <cstdint>
#include <vector>

#include "mbmapq/model.hpp"

namespace mbmapq {

struct SimConfig {
  double horizon = 1e6;  // total simulated time per replication
  double warmup = -1.0;  // discarded leading stretch; < 0 means horizon / 10
  int replications = 20;
  uint64_t seed = 1;
  int hist_cap = 50;  // joint histogram covers n_k in 0..hist_cap per class
  int threads = 0;    // 0 = all hardware threads

  double effective_warmup() const { return warmup < 0.0 ? 0.1 * horizon : warmup; }
};

// Point estimates are means over replications; standard errors come from the
// spread of the replication means, never from within-path statistics.
struct SimEstimate {
  int K = 0;
  int hist_cap = 0;
  std::vector<double> p, p_se;  // (cap+1)^K cells, lexicographic in (n_1..n_K)
  double hist_mass = 0;         // total mass landing inside the cap
  std::vector<double> EN_k, EN_k_se;
  double EN = 0, EN_se = 0;
  double EV = 0, EV_se = 0;  // time-average workload
  double P0 = 0, P0_se = 0;
  std::vector<double> rate_k, rate_k_se;  // measured customer arrival rates

  int64_t cells() const { return static_cast<int64_t>(p.size()); }
};

// Event-driven path of the arrival CTMC with a FIFO unit-rate server.
// Replications use independently seeded deterministic generators and merge in
// replication order, so identical (model, config) gives bitwise identical
// estimates for any thread count.
SimEstimate simulate(const Model& m, const SimConfig& cfg);

}  // namespace mbmapq
