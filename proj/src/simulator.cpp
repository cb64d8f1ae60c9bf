#include "mbmapq/simulator.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <deque>
#include <random>
#include <thread>

#include "mbmapq/errors.hpp"

namespace mbmapq {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

uint64_t splitmix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// One generator per replication; draws use the top 53 bits so the stream is
// identical on every platform that ships a conforming mt19937_64.
struct Rng {
  std::mt19937_64 eng;
  explicit Rng(uint64_t s) : eng(s) {}
  double u01() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }  // [0, 1)
  double expo(double rate) { return -std::log1p(-u01()) / rate; }
};

// Embedded-jump tables of the arrival chain: in state i events fire at rate
// mu_i = -C_ii and split into silent moves (C off-diagonal) and class-k batch
// arrivals (D_k entries, self-loops allowed).
struct JumpTable {
  struct Ev {
    double cum;  // cumulative rate
    int cls;     // -1 silent
    int to;
  };
  std::vector<double> mu;
  std::vector<std::vector<Ev>> ev;

  explicit JumpTable(const Model& m) {
    int M = m.M, K = m.K();
    mu.resize(static_cast<size_t>(M));
    ev.resize(static_cast<size_t>(M));
    for (int i = 0; i < M; ++i) {
      if (!(m.C(i, i) < 0.0))
        throw Error(ErrorKind::BadInput, "state " + std::to_string(i) + " has no exit rate");
      double cum = 0.0;
      auto& row = ev[static_cast<size_t>(i)];
      for (int j = 0; j < M; ++j)
        if (j != i && m.C(i, j) > 0.0) row.push_back({cum += m.C(i, j), -1, j});
      for (int k = 0; k < K; ++k) {
        const Mat& D = m.classes[static_cast<size_t>(k)].D;
        for (int j = 0; j < M; ++j)
          if (D(i, j) > 0.0) row.push_back({cum += D(i, j), k, j});
      }
      mu[static_cast<size_t>(i)] = cum;  // equals -C_ii up to row-sum tolerance
    }
  }

  const Ev& pick(int state, double u) const {
    const auto& row = ev[static_cast<size_t>(state)];
    double target = u * row.back().cum;
    for (const Ev& e : row)
      if (target < e.cum) return e;
    return row.back();
  }
};

// Discrete phase-type walk: start in a phase under alpha, each step either
// absorbs (one more customer ends the batch) or moves phase and counts one.
struct BatchSampler {
  std::vector<double> alpha_cum;
  std::vector<double> exit;      // absorption probability per phase
  std::vector<double> row_cum;   // Mk x Mk cumulative continuation rows
  int Mk = 0;

  explicit BatchSampler(const PhBatch& b) {
    Mk = b.dim();
    alpha_cum.resize(static_cast<size_t>(Mk));
    exit.resize(static_cast<size_t>(Mk));
    row_cum.resize(static_cast<size_t>(Mk) * Mk);
    double c = 0.0;
    for (int i = 0; i < Mk; ++i) alpha_cum[static_cast<size_t>(i)] = (c += b.alpha(i));
    for (int i = 0; i < Mk; ++i) {
      double r = 0.0;
      for (int j = 0; j < Mk; ++j) row_cum[static_cast<size_t>(i) * Mk + j] = (r += b.P(i, j));
      exit[static_cast<size_t>(i)] = 1.0 - r;
    }
  }

  int draw(Rng& rng) const {
    double u = rng.u01() * alpha_cum.back();
    int ph = 0;
    while (ph + 1 < Mk && u >= alpha_cum[static_cast<size_t>(ph)]) ++ph;
    int n = 1;
    for (;;) {
      double v = rng.u01();
      if (v < exit[static_cast<size_t>(ph)]) return n;
      double target = v - exit[static_cast<size_t>(ph)];
      const double* row = &row_cum[static_cast<size_t>(ph) * Mk];
      int nx = 0;
      while (nx + 1 < Mk && target >= row[nx]) ++nx;
      ph = nx;
      ++n;
    }
  }
};

double draw_service(const ServiceLaw& s, Rng& rng) {
  switch (s.kind) {
    case ServiceKind::Deterministic:
      return s.a[0];
    case ServiceKind::Exponential:
      return rng.expo(s.a[0]);
    case ServiceKind::Erlang: {
      double x = 0.0;
      for (int i = 0; i < s.shape; ++i) x += rng.expo(s.a[0]);
      return x;
    }
    case ServiceKind::HyperExponential:
    case ServiceKind::DiscretePointMixture: {
      double u = rng.u01();
      double c = 0.0;
      size_t b = 0;
      for (; b + 1 < s.w.size(); ++b) {
        c += s.w[b];
        if (u < c) break;
      }
      return s.kind == ServiceKind::HyperExponential ? rng.expo(s.a[b]) : s.a[b];
    }
  }
  return 0.0;
}

struct RepStats {
  std::vector<double> hist;  // time-average occupancy of each capped cell
  std::vector<double> EN_k, rate_k;
  double EN = 0, EV = 0, P0 = 0, hist_mass = 0;
};

struct Job {
  double svc;
  int cls;
};

RepStats run_rep(const Model& m, const SimConfig& cfg, const JumpTable& jt,
                 const std::vector<BatchSampler>& bs, uint64_t rep_seed) {
  const int K = m.K();
  const int cap = cfg.hist_cap;
  const double T = cfg.horizon;
  const double W = cfg.effective_warmup();
  const double span = T - W;

  int64_t cells = 1;
  for (int k = 0; k < K; ++k) cells *= cap + 1;

  Rng rng(rep_seed);
  RepStats st;
  st.hist.assign(static_cast<size_t>(cells), 0.0);
  st.EN_k.assign(static_cast<size_t>(K), 0.0);
  st.rate_k.assign(static_cast<size_t>(K), 0.0);

  int env = 0;
  std::deque<Job> fifo;
  std::vector<int> ncls(static_cast<size_t>(K), 0);
  std::vector<int64_t> arrivals(static_cast<size_t>(K), 0);
  double V = 0.0;  // workload, drains at unit rate while the queue is busy
  double t = 0.0;
  double t_env = rng.expo(jt.mu[static_cast<size_t>(env)]);
  double t_dep = kInf;

  // capped-cell index of the current class counts, or -1 if any exceeds cap
  auto cell_of = [&]() -> int64_t {
    int64_t c = 0;
    for (int k = 0; k < K; ++k) {
      if (ncls[static_cast<size_t>(k)] > cap) return -1;
      c = c * (cap + 1) + ncls[static_cast<size_t>(k)];
    }
    return c;
  };

  int total = 0;
  int64_t cell = 0;  // cell_of() of the empty system

  while (t < T) {
    double t_next = std::min(t_env, t_dep);
    bool departure = t_dep <= t_env;
    double b = std::min(t_next, T);
    double a = std::max(t, W);
    if (b > a) {
      double dt = b - a;
      if (cell >= 0) {
        st.hist[static_cast<size_t>(cell)] += dt;
        st.hist_mass += dt;
      }
      st.EN += total * dt;
      for (int k = 0; k < K; ++k) st.EN_k[static_cast<size_t>(k)] += ncls[static_cast<size_t>(k)] * dt;
      if (total == 0) st.P0 += dt;
      if (total > 0) {
        double Va = V - (a - t);
        st.EV += Va * dt - 0.5 * dt * dt;
      }
    }
    if (t_next >= T) break;

    if (total > 0) V -= t_next - t;
    t = t_next;

    if (departure) {
      int k = fifo.front().cls;
      fifo.pop_front();
      --ncls[static_cast<size_t>(k)];
      --total;
      if (total == 0) {
        V = 0.0;  // kill round-off drift at every idle point
        t_dep = kInf;
      } else {
        t_dep = t + fifo.front().svc;
      }
    } else {
      const JumpTable::Ev& e = jt.pick(env, rng.u01());
      if (e.cls >= 0) {
        int k = e.cls;
        int n = bs[static_cast<size_t>(k)].draw(rng);
        const ServiceLaw& law = m.classes[static_cast<size_t>(k)].service;
        bool was_empty = total == 0;
        for (int i = 0; i < n; ++i) {
          double svc = draw_service(law, rng);
          fifo.push_back({svc, k});
          V += svc;
        }
        ncls[static_cast<size_t>(k)] += n;
        total += n;
        if (t > W) arrivals[static_cast<size_t>(k)] += n;
        if (was_empty) t_dep = t + fifo.front().svc;
      }
      env = e.to;
      t_env = t + rng.expo(jt.mu[static_cast<size_t>(env)]);
    }
    cell = cell_of();
  }

  for (double& x : st.hist) x /= span;
  st.hist_mass /= span;
  st.EN /= span;
  for (double& x : st.EN_k) x /= span;
  st.EV /= span;
  st.P0 /= span;
  for (int k = 0; k < K; ++k)
    st.rate_k[static_cast<size_t>(k)] = static_cast<double>(arrivals[static_cast<size_t>(k)]) / span;
  return st;
}

// mean and replication-spread standard error, in replication order
void merge(const std::vector<double>& xs, double& mean, double& se) {
  size_t R = xs.size();
  double s = 0.0;
  for (double x : xs) s += x;
  mean = s / static_cast<double>(R);
  if (R < 2) {
    se = 0.0;
    return;
  }
  double q = 0.0;
  for (double x : xs) q += (x - mean) * (x - mean);
  se = std::sqrt(q / (static_cast<double>(R) * static_cast<double>(R - 1)));
}

}  // namespace

SimEstimate simulate(const Model& m, const SimConfig& cfg) {
  if (cfg.replications < 1)
    throw Error(ErrorKind::BadInput, "replications must be >= 1");
  if (!(cfg.horizon > 0.0) || !std::isfinite(cfg.horizon))
    throw Error(ErrorKind::BadInput, "horizon must be positive and finite");
  double W = cfg.effective_warmup();
  if (W < 0.0 || !(cfg.horizon > W))
    throw Error(ErrorKind::BadInput, "horizon must exceed warmup >= 0");
  if (cfg.hist_cap < 0) throw Error(ErrorKind::BadInput, "histogram cap must be >= 0");

  const int K = m.K();
  int64_t cells = 1;
  for (int k = 0; k < K; ++k) {
    cells *= cfg.hist_cap + 1;
    if (cells > (int64_t{1} << 22))
      throw Error(ErrorKind::BadInput, "histogram grid too large; lower the per-class cap");
  }

  // stability advisory only; the path runs either way
  try {
    stationary_summary(m);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Unstable) throw;
    std::fprintf(stderr, "warning: %s; simulation proceeds but has no steady state\n", e.what());
  }

  JumpTable jt(m);
  std::vector<BatchSampler> bs;
  bs.reserve(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) bs.emplace_back(m.classes[static_cast<size_t>(k)].batch);

  const int R = cfg.replications;
  std::vector<RepStats> reps(static_cast<size_t>(R));
  std::vector<uint64_t> seeds(static_cast<size_t>(R));
  for (int r = 0; r < R; ++r)
    seeds[static_cast<size_t>(r)] =
        splitmix64(splitmix64(cfg.seed) ^ (0x9E3779B97F4A7C15ull * static_cast<uint64_t>(r + 1)));

  int hw = static_cast<int>(std::thread::hardware_concurrency());
  int nt = cfg.threads > 0 ? cfg.threads : (hw > 0 ? hw : 1);
  nt = std::min(nt, R);
  if (nt <= 1) {
    for (int r = 0; r < R; ++r)
      reps[static_cast<size_t>(r)] = run_rep(m, cfg, jt, bs, seeds[static_cast<size_t>(r)]);
  } else {
    std::atomic<int> next{0};
    auto worker = [&]() {
      for (;;) {
        int r = next.fetch_add(1);
        if (r >= R) return;
        reps[static_cast<size_t>(r)] = run_rep(m, cfg, jt, bs, seeds[static_cast<size_t>(r)]);
      }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(nt));
    for (int i = 0; i < nt; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  SimEstimate est;
  est.K = K;
  est.hist_cap = cfg.hist_cap;
  est.p.resize(static_cast<size_t>(cells));
  est.p_se.resize(static_cast<size_t>(cells));
  est.EN_k.resize(static_cast<size_t>(K));
  est.EN_k_se.resize(static_cast<size_t>(K));
  est.rate_k.resize(static_cast<size_t>(K));
  est.rate_k_se.resize(static_cast<size_t>(K));

  std::vector<double> buf(static_cast<size_t>(R));
  auto gather = [&](auto&& get, double& mean, double& se) {
    for (int r = 0; r < R; ++r) buf[static_cast<size_t>(r)] = get(reps[static_cast<size_t>(r)]);
    merge(buf, mean, se);
  };

  for (int64_t c = 0; c < cells; ++c)
    gather([&](const RepStats& s) { return s.hist[static_cast<size_t>(c)]; },
           est.p[static_cast<size_t>(c)], est.p_se[static_cast<size_t>(c)]);
  double dummy;
  gather([](const RepStats& s) { return s.hist_mass; }, est.hist_mass, dummy);
  gather([](const RepStats& s) { return s.EN; }, est.EN, est.EN_se);
  gather([](const RepStats& s) { return s.EV; }, est.EV, est.EV_se);
  gather([](const RepStats& s) { return s.P0; }, est.P0, est.P0_se);
  for (int k = 0; k < K; ++k) {
    gather([&](const RepStats& s) { return s.EN_k[static_cast<size_t>(k)]; },
           est.EN_k[static_cast<size_t>(k)], est.EN_k_se[static_cast<size_t>(k)]);
    gather([&](const RepStats& s) { return s.rate_k[static_cast<size_t>(k)]; },
           est.rate_k[static_cast<size_t>(k)], est.rate_k_se[static_cast<size_t>(k)]);
  }
  return est;
}

}  // namespace mbmapq
