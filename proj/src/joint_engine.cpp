#include "mbmapq/joint_engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <sstream>
#include <thread>

#include <Eigen/Dense>

#include "mbmapq/errors.hpp"

namespace mbmapq {

// ===== IndexSpace =====

IndexSpace::IndexSpace(int K, int max_level) : K_(K), max_level_(max_level) {
  int rows = max_level + K + 2;
  binom_.assign(static_cast<size_t>(rows), std::vector<int64_t>(static_cast<size_t>(K) + 1, 0));
  for (int r = 0; r < rows; ++r) {
    binom_[r][0] = 1;
    int cmax = std::min(K_, r);
    for (int c = 1; c <= cmax; ++c) binom_[r][c] = binom_[r - 1][c - 1] + binom_[r - 1][c];
  }
  cum_.resize(static_cast<size_t>(max_level) + 1);
  int64_t acc = 0;
  for (int L = 0; L <= max_level; ++L) {
    acc += binom_[L + K_ - 1][K_ - 1];
    cum_[L] = acc;
  }
}

int64_t IndexSpace::slots(int level) const { return binom_[level + K_ - 1][K_ - 1]; }

int64_t IndexSpace::cum_slots(int level) const { return level < 0 ? 0 : cum_[level]; }

int64_t IndexSpace::rank(const int* n, int level) const {
  if (K_ == 1) return 0;
  if (K_ == 2) return n[0];
  int64_t r = 0;
  int R = level;
  for (int i = 0; i < K_ - 1; ++i) {
    int parts = K_ - 1 - i;  // components after i
    r += binom_[R + parts][parts] - binom_[R - n[i] + parts][parts];
    R -= n[i];
  }
  return r;
}

void IndexSpace::unrank(int level, int64_t r, int* n) const {
  int R = level;
  for (int i = 0; i < K_ - 1; ++i) {
    int parts = K_ - 1 - i;
    int v = 0;
    while (true) {
      int64_t block = binom_[R - v + parts - 1][parts - 1];
      if (r < block) break;
      r -= block;
      ++v;
    }
    n[i] = v;
    R -= v;
  }
  n[K_ - 1] = R;
}

bool IndexSpace::next_composition(int* n, int K) {
  if (K <= 1) return false;
  int suffix = 0;
  for (int j = K - 2; j >= 0; --j) {
    suffix += n[j + 1];
    if (suffix > 0) {
      n[j] += 1;
      for (int t = j + 1; t < K - 1; ++t) n[t] = 0;
      n[K - 1] = suffix - 1;
      return true;
    }
  }
  return false;
}

namespace {

using std::vector;

void parallel_for(int threads, int64_t begin, int64_t end,
                  const std::function<void(int64_t, int64_t)>& body) {
  int64_t len = end - begin;
  if (len <= 0) return;
  int T = threads;
  if (T < 1) T = 1;
  // only fan out when there is enough work to amortize thread spawns
  if (T > 1 && len < 4096) T = 1;
  if (static_cast<int64_t>(T) > len) T = static_cast<int>(len);
  if (T == 1) {
    body(begin, end);
    return;
  }
  int64_t step = (len + T - 1) / T;
  vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(T) - 1);
  for (int t = 1; t < T; ++t) {
    int64_t b = begin + t * step;
    int64_t e = std::min(end, b + step);
    if (b < e) pool.emplace_back(body, b, e);
  }
  body(begin, std::min(end, begin + step));
  for (auto& th : pool) th.join();
}

struct Trip {
  int i, j;
  double v;
};

// out = A*B for row-major M x M buffers; out must not alias the inputs
inline void mul_mm(const double* A, const double* B, double* out, int M) {
  for (int i = 0; i < M; ++i) {
    double* oi = out + i * M;
    for (int j = 0; j < M; ++j) oi[j] = 0.0;
    const double* Ai = A + i * M;
    for (int k = 0; k < M; ++k) {
      double a = Ai[k];
      if (a == 0.0) continue;
      const double* Bk = B + k * M;
      for (int j = 0; j < M; ++j) oi[j] += a * Bk[j];
    }
  }
}

// out += c * A*B, same layout
inline void mul_mm_acc(double c, const double* A, const double* B, double* out, int M) {
  for (int i = 0; i < M; ++i) {
    double* oi = out + i * M;
    const double* Ai = A + i * M;
    for (int k = 0; k < M; ++k) {
      double a = c * Ai[k];
      if (a == 0.0) continue;
      const double* Bk = B + k * M;
      for (int j = 0; j < M; ++j) oi[j] += a * Bk[j];
    }
  }
}

// Discrete truncation choices made by a run.  The class-count aggregate run
// decides them once; the joint run is pinned to the same choices so both
// modes truncate identical mass and their outputs agree to rounding error.
struct DecisionTrace {
  vector<int> n_F;              // streamed support per sweep
  vector<int> n_Gamma;          // resolvent stop level per class
  int p_support = 0;            // last level of p fed by q mass
  vector<double> A_mass, v_mass;  // certified truncation coverage
};

class Engine {
 public:
  Engine(const Model& model, const EngineOptions& opt, EngineArtifacts* capture,
         const DecisionTrace* pin = nullptr, DecisionTrace* record = nullptr)
      : model_(model),
        opt_(opt),
        capture_(capture),
        pin_(pin),
        record_(record),
        sum_(stationary_summary(model)),
        coeff_(model, sum_.theta),
        K_(model.K()),
        M_(model.M),
        space_(opt.total_mode ? 1 : model.K(), opt.N_p) {}

  JointResult run();

 private:
  void prepare();
  void choose_cutoffs();
  void choose_batch_cuts();
  void run_F_accumulation();
  void build_gamma_fields();
  void assemble_q();
  void assemble_p();
  void finalize_means();

  int dim_of_class(int k) const { return opt_.total_mode ? 0 : k; }
  void reserve_cells(uint64_t n) {
    cells_allocated_ += n;
    if (cells_allocated_ > opt_.max_cells) {
      std::ostringstream os;
      os << "field storage needs " << cells_allocated_ << " doubles, budget is " << opt_.max_cells;
      throw Error(ErrorKind::BudgetExceeded, os.str());
    }
  }
  // clamp tiny negative round-off in a probability cell, reject real negatives
  void scrub_cell(double* cell, int len, const char* what) {
    for (int j = 0; j < len; ++j) {
      if (cell[j] < 0.0) {
        if (cell[j] < -1e-8) {
          std::ostringstream os;
          os << what << " entry " << cell[j] << " below -1e-8";
          throw Error(ErrorKind::NegativeMass, os.str());
        }
        cell[j] = 0.0;
        ++ledger_.p_clamped;
      }
    }
  }

  const Model& model_;
  const EngineOptions& opt_;
  EngineArtifacts* capture_;
  const DecisionTrace* pin_;
  DecisionTrace* record_;
  StationarySummary sum_;
  CoefficientSet coeff_;
  int K_, M_;
  IndexSpace space_;

  int threads_ = 1;
  uint64_t cells_allocated_ = 0;
  TruncationLedger ledger_;

  std::unique_ptr<Mg1Chain> chain_;
  QKappa qk_;
  RowVec v1bar_;

  vector<double> ic_;             // I + C/theta, row-major
  vector<vector<Trip>> dk_;       // sparse D_k
  vector<Vec> dk_one_;            // D_k 1
  vector<vector<double>> g_tab_;  // g_k(1..N_p) exact pmf
  int max_ng_ = 0;

  vector<Field> A_;  // accumulated arrival operators, M*M cells
  vector<Field> v_;  // accumulated workload rows, M cells
  vector<Field> gamma_;  // resolvent fields, (M*Mk)^2 cells
  vector<Field> q_;
  Field p_;

  JointResult out_;
};

void Engine::prepare() {
  if (model_.any_raw_pmf())
    throw Error(ErrorKind::BadInput,
                "raw-pmf batch sizes carry no usable phase structure here; "
                "queue-length output needs a proper phase-type batch");
  threads_ = opt_.threads;
  if (threads_ <= 0) {
    unsigned hw = std::thread::hardware_concurrency();
    threads_ = hw ? static_cast<int>(hw) : 1;
  }
  qk_ = compute_Q_kappa(model_, sum_, coeff_);
  chain_ = std::make_unique<Mg1Chain>(model_, sum_, coeff_, qk_.kappa);
  v1bar_ = mean_workload(model_, sum_, coeff_, qk_.kappa);

  ic_.assign(static_cast<size_t>(M_) * M_, 0.0);
  for (int i = 0; i < M_; ++i)
    for (int j = 0; j < M_; ++j)
      ic_[i * M_ + j] = (i == j ? 1.0 : 0.0) + model_.C(i, j) / sum_.theta;

  dk_.resize(K_);
  dk_one_.resize(K_);
  for (int k = 0; k < K_; ++k) {
    const Mat& D = model_.classes[k].D;
    for (int i = 0; i < M_; ++i)
      for (int j = 0; j < M_; ++j)
        if (D(i, j) != 0.0) dk_[k].push_back({i, j, D(i, j)});
    dk_one_[k] = D * Vec::Ones(M_);
  }
}

void Engine::choose_cutoffs() {
  double eps = opt_.eps;
  ledger_.eps = eps;

  double eps_F = opt_.eps_F_override;
  if (eps_F <= 0) {
    eps_F = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K_; ++k) {
      double byh = 1.0 / (sum_.theta * sum_.h[k]);
      double vD = (v1bar_ * dk_one_[k]).value();
      double byv = sum_.lambdaB[k] / (sum_.theta * 2.0 * std::max(vD, 1e-300));
      eps_F = std::min(eps_F, std::min(byh, byv));
    }
    eps_F *= 0.5 * eps;
  }
  ledger_.eps_F = eps_F;
  double eps_g = opt_.eps_g_override > 0 ? opt_.eps_g_override : eps_F / 10.0;
  ledger_.eps_g = eps_g;

  ledger_.m_gamma.assign(K_, 0);
  ledger_.m_v.assign(K_, 0);
  constexpr int kSearchCap = 2000000;
  for (int k = 0; k < K_; ++k) {
    double acc = 0.0, w = 1.0;
    int m = 0;
    for (;; ++m) {
      if (m > kSearchCap)
        throw Error(ErrorKind::MassDeficit, "discounted service-mass sum stalls below 1 - eps");
      acc += coeff_.gamma[k].gamma(m) * w;
      if (acc > 1.0 - eps) break;
      w *= 1.0 - eps_F;
    }
    ledger_.m_gamma[k] = m;

    acc = 0.0;
    w = 1.0;
    double target = (1.0 - eps) * sum_.lambdaB[k];
    for (m = 0;; ++m) {
      if (m > kSearchCap)
        throw Error(ErrorKind::MassDeficit, "discounted workload-mass sum stalls below target");
      acc += (chain_->v(m) * dk_one_[k]).value() * w;
      if (acc > target) break;
      w *= 1.0 - eps_F;
    }
    ledger_.m_v[k] = m;
  }
  int m_max = 0;
  for (int k = 0; k < K_; ++k) m_max = std::max({m_max, ledger_.m_gamma[k], ledger_.m_v[k]});
  if (opt_.m_max_override >= 0) {
    m_max = opt_.m_max_override;
    for (int k = 0; k < K_; ++k) {
      ledger_.m_gamma[k] = std::min(ledger_.m_gamma[k], m_max);
      ledger_.m_v[k] = std::min(ledger_.m_v[k], m_max);
    }
  }
  ledger_.m_max = m_max;
}

void Engine::choose_batch_cuts() {
  ledger_.n_g.assign(K_, 0);
  g_tab_.assign(K_, {});
  for (int k = 0; k < K_; ++k) {
    double dmax = dk_one_[k].maxCoeff();
    double bound = sum_.theta * ledger_.eps_g / (K_ * dmax);
    const PhBatch& b = model_.classes[k].batch;
    int n = 1;
    while (n < opt_.N_p && b.residual(n) >= bound) ++n;
    ledger_.n_g[k] = n;
    double resid;
    b.pmf_prefix(opt_.N_p, g_tab_[k], resid);  // exact masses, used again by the p recursion
    max_ng_ = std::max(max_ng_, n);
  }
}

void Engine::run_F_accumulation() {
  const int Np = opt_.N_p;
  const int cellM = M_ * M_;
  const int64_t all = space_.cum_slots(Np);

  reserve_cells(static_cast<uint64_t>(all) * cellM * (2 + K_) + static_cast<uint64_t>(all) * M_ * K_);
  Field fa, fb;
  fa.init(all, cellM);
  fb.init(all, cellM);
  Field* prev = &fa;
  Field* cur = &fb;

  A_.resize(K_);
  v_.resize(K_);
  for (int k = 0; k < K_; ++k) {
    A_[k].init(all, cellM);
    v_[k].init(all, M_);
  }

  // sweep 0: identity at the origin
  for (int i = 0; i < M_; ++i) prev->at(0)[i * M_ + i] = 1.0;
  ledger_.n_F.assign(static_cast<size_t>(ledger_.m_max) + 1, 0);
  vector<RowVec> vrow(K_);  // v^(m) D_k for the current sweep
  for (int k = 0; k < K_; ++k) {
    double g0 = coeff_.gamma[k].gamma(0);
    for (int i = 0; i < M_; ++i) A_[k].at(0)[i * M_ + i] = g0;
    vrow[k] = chain_->v(0) * model_.classes[k].D;
    for (int j = 0; j < M_; ++j) v_[k].at(0)[j] = vrow[k](j);
  }
  if (opt_.f_observer) opt_.f_observer({0, 0, &space_, prev});

  vector<int> ng = ledger_.n_g;
  double decay = 1.0;
  for (int m = 1; m <= ledger_.m_max; ++m) {
    decay *= 1.0 - ledger_.eps_F;
    int prev_nf = ledger_.n_F[m - 1];
    int cap = std::min(prev_nf + max_ng_, Np);
    Vec mass = Vec::Zero(M_);
    int stop = pin_ ? std::min(cap, pin_->n_F[m]) : cap;
    for (int L = 0; L <= (pin_ ? stop : cap); ++L) {
      int64_t base = space_.level_offset(L);
      int64_t nslots = space_.slots(L);
      Field* pf = prev;
      Field* cf = cur;
      auto body = [&, L, base](int64_t s0, int64_t s1) {
        vector<int> idx(static_cast<size_t>(space_.K()));
        vector<int> src(static_cast<size_t>(space_.K()));
        space_.unrank(L, s0, idx.data());
        for (int64_t s = s0; s < s1; ++s) {
          double* out = cf->at(base + s);
          if (L <= prev_nf)
            mul_mm(pf->at(base + s), ic_.data(), out, M_);
          else
            std::memset(out, 0, sizeof(double) * cellM);
          for (int k = 0; k < K_; ++k) {
            int dk = dim_of_class(k);
            int lmax = std::min(idx[dk], ng[k]);
            for (int l = 1; l <= lmax; ++l) {
              int sl = L - l;
              if (sl > prev_nf) continue;
              int64_t sr;
              if (space_.K() <= 2) {
                sr = (space_.K() == 1) ? 0 : (dk == 0 ? static_cast<int64_t>(idx[0]) - l : idx[0]);
              } else {
                std::copy(idx.begin(), idx.end(), src.begin());
                src[dk] -= l;
                sr = space_.rank(src.data(), sl);
              }
              const double* from = pf->at(space_.level_offset(sl) + sr);
              double c = g_tab_[k][l - 1] / sum_.theta;
              for (const Trip& t : dk_[k]) {
                double cv = c * t.v;
                for (int r = 0; r < M_; ++r) out[r * M_ + t.j] += cv * from[r * M_ + t.i];
              }
            }
          }
          IndexSpace::next_composition(idx.data(), space_.K());
        }
      };
      parallel_for(threads_, 0, nslots, body);
      if (pin_) continue;
      // deterministic serial mass scan
      for (int64_t s = 0; s < nslots; ++s) {
        const double* c = cur->at(base + s);
        for (int i = 0; i < M_; ++i) {
          double rs = 0;
          for (int j = 0; j < M_; ++j) rs += c[i * M_ + j];
          mass(i) += rs;
        }
      }
      if (m > 1 && (mass.array() > decay).all()) {
        stop = L;
        break;
      }
    }
    ledger_.n_F[m] = stop;
    ledger_.f_slots_computed += static_cast<uint64_t>(space_.cum_slots(std::min(stop, cap)));
    uint64_t stored = static_cast<uint64_t>(space_.cum_slots(prev_nf)) +
                      static_cast<uint64_t>(space_.cum_slots(stop));
    ledger_.f_slots_stored_peak = std::max(ledger_.f_slots_stored_peak, stored);

    // fold this sweep into the per-class accumulators
    for (int k = 0; k < K_; ++k)
      if (m <= ledger_.m_v[k]) vrow[k] = chain_->v(m) * model_.classes[k].D;
    int64_t fold_slots = space_.cum_slots(stop);
    auto fold = [&](int64_t s0, int64_t s1) {
      for (int k = 0; k < K_; ++k) {
        bool foldA = m <= ledger_.m_gamma[k];
        bool foldV = m <= ledger_.m_v[k];
        if (!foldA && !foldV) continue;
        double gk = foldA ? coeff_.gamma[k].gamma(m) : 0.0;
        const double* vr = vrow[k].data();
        for (int64_t s = s0; s < s1; ++s) {
          const double* f = cur->at(s);
          if (foldA) {
            double* a = A_[k].at(s);
            for (int c = 0; c < cellM; ++c) a[c] += gk * f[c];
          }
          if (foldV) {
            double* vv = v_[k].at(s);
            for (int j = 0; j < M_; ++j) {
              double acc = 0;
              for (int i = 0; i < M_; ++i) acc += vr[i] * f[i * M_ + j];
              vv[j] += acc;
            }
          }
        }
      }
    };
    parallel_for(threads_, 0, fold_slots, fold);

    if (opt_.f_observer) opt_.f_observer({m, stop, &space_, cur});
    std::swap(prev, cur);
  }

  ledger_.n_A.assign(K_, 0);
  ledger_.n_v.assign(K_, 0);
  for (int k = 0; k < K_; ++k) {
    for (int m = 0; m <= ledger_.m_gamma[k]; ++m) ledger_.n_A[k] = std::max(ledger_.n_A[k], ledger_.n_F[m]);
    for (int m = 0; m <= ledger_.m_v[k]; ++m) ledger_.n_v[k] = std::max(ledger_.n_v[k], ledger_.n_F[m]);
  }

  // realized truncation masses must clear the guarantees they were sized for;
  // a pinned run inherits the certificate from the aggregate pass it mirrors
  if (pin_) {
    ledger_.A_mass = pin_->A_mass;
    ledger_.v_mass = pin_->v_mass;
    if (record_) record_->n_F = ledger_.n_F;
    return;
  }
  ledger_.A_mass.assign(K_, 0.0);
  ledger_.v_mass.assign(K_, 0.0);
  for (int k = 0; k < K_; ++k) {
    Vec rows = Vec::Zero(M_);
    double vm = 0;
    int64_t nA = space_.cum_slots(ledger_.n_A[k]);
    for (int64_t s = 0; s < nA; ++s) {
      const double* a = A_[k].at(s);
      for (int i = 0; i < M_; ++i)
        for (int j = 0; j < M_; ++j) rows(i) += a[i * M_ + j];
    }
    int64_t nV = space_.cum_slots(ledger_.n_v[k]);
    for (int64_t s = 0; s < nV; ++s) {
      const double* vv = v_[k].at(s);
      for (int j = 0; j < M_; ++j) vm += vv[j];
    }
    ledger_.A_mass[k] = rows.minCoeff();
    ledger_.v_mass[k] = vm;
    if (opt_.m_max_override >= 0) continue;  // forced sweep counts void the guarantees
    if (!(ledger_.A_mass[k] > 1.0 - ledger_.eps)) {
      std::ostringstream os;
      os << "class " << k << " arrival-operator mass " << ledger_.A_mass[k]
         << " misses 1 - eps = " << 1.0 - ledger_.eps;
      throw Error(ErrorKind::NoConvergence, os.str());
    }
    double vtarget = (1.0 - ledger_.eps) * sum_.lambdaB[k];
    if (!(ledger_.v_mass[k] > vtarget)) {
      std::ostringstream os;
      os << "class " << k << " workload-operator mass " << ledger_.v_mass[k] << " misses "
         << vtarget;
      throw Error(ErrorKind::NoConvergence, os.str());
    }
  }
  if (record_) {
    record_->n_F = ledger_.n_F;
    record_->A_mass = ledger_.A_mass;
    record_->v_mass = ledger_.v_mass;
  }
}

void Engine::build_gamma_fields() {
  const int Np = opt_.N_p;
  gamma_.resize(K_);
  ledger_.n_Gamma.assign(K_, 0);
  for (int k = 0; k < K_; ++k) {
    const PhBatch& b = model_.classes[k].batch;
    int Mk = b.dim();
    int MM = M_ * Mk;
    int cell = MM * MM;
    int nA = ledger_.n_A[k];
    int64_t acache = space_.cum_slots(nA);
    reserve_cells(static_cast<uint64_t>(acache) * cell +
                  static_cast<uint64_t>(space_.cum_slots(Np)) * cell);

    // cache W(l) = P ⊗ A_k(l); row (b,i), col (c,j) = P(b,c) A(i,j)
    Field W;
    W.init(acache, cell);
    for (int64_t s = 0; s < acache; ++s) {
      const double* a = A_[k].at(s);
      double* w = W.at(s);
      for (int bb = 0; bb < Mk; ++bb)
        for (int cc = 0; cc < Mk; ++cc) {
          double pv = b.P(bb, cc);
          if (pv == 0.0) continue;
          for (int i = 0; i < M_; ++i)
            for (int j = 0; j < M_; ++j) w[(bb * M_ + i) * MM + (cc * M_ + j)] = pv * a[i * M_ + j];
        }
    }

    Mat G0;
    {
      Mat w0 = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          W.at(0), MM, MM);
      G0 = (Mat::Identity(MM, MM) - w0).partialPivLu().solve(Mat::Identity(MM, MM));
    }
    vector<double> g0flat(static_cast<size_t>(cell));
    for (int i = 0; i < MM; ++i)
      for (int j = 0; j < MM; ++j) g0flat[i * MM + j] = G0(i, j);

    Field& G = gamma_[k];
    G.init(space_.cum_slots(Np), cell);
    std::memcpy(G.at(0), g0flat.data(), sizeof(double) * cell);

    // stop once the accumulated mass clears the guaranteed lower bound
    Mat ImP = Mat::Identity(Mk, Mk) - b.P;
    Eigen::PartialPivLU<Mat> lu(ImP);
    Vec ones1 = Vec::Ones(Mk);
    Vec t1v = lu.solve(ones1);
    Vec t2v = lu.solve(lu.solve(b.P * ones1));
    Vec target(MM), acc = Vec::Zero(MM);
    for (int bb = 0; bb < Mk; ++bb)
      for (int i = 0; i < M_; ++i) target(bb * M_ + i) = t1v(bb) - ledger_.eps * t2v(bb);
    for (int i = 0; i < MM; ++i) {
      double rs = 0;
      for (int j = 0; j < MM; ++j) rs += g0flat[i * MM + j];
      acc(i) += rs;
    }
    int stop = -1;
    if (pin_)
      stop = pin_->n_Gamma[k];
    else if ((acc.array() >= target.array()).all())
      stop = 0;
    int Lmax = pin_ ? stop : Np;
    for (int L = 1; L <= Lmax && (pin_ || stop < 0); ++L) {
      int64_t base = space_.level_offset(L);
      int64_t nslots = space_.slots(L);
      auto body = [&, L, base](int64_t s0, int64_t s1) {
        vector<int> idx(static_cast<size_t>(space_.K()));
        vector<int> box(static_cast<size_t>(space_.K()));
        vector<int> l(static_cast<size_t>(space_.K()));
        vector<int> rem(static_cast<size_t>(space_.K()));
        vector<double> sacc(static_cast<size_t>(cell));
        space_.unrank(L, s0, idx.data());
        for (int64_t s = s0; s < s1; ++s) {
          std::fill(sacc.begin(), sacc.end(), 0.0);
          // iterate l <= min(idx, nA) componentwise, l != 0, |l| <= nA
          for (int t = 0; t < space_.K(); ++t) box[t] = std::min(idx[t], nA);
          std::fill(l.begin(), l.end(), 0);
          while (true) {
            // advance to next l in the box
            int d = space_.K() - 1;
            while (d >= 0 && l[d] == box[d]) {
              l[d] = 0;
              --d;
            }
            if (d < 0) break;
            ++l[d];
            int lsum = 0;
            for (int t = 0; t < space_.K(); ++t) lsum += l[t];
            if (lsum > nA) continue;
            for (int t = 0; t < space_.K(); ++t) rem[t] = idx[t] - l[t];
            int64_t gsrc = space_.level_offset(L - lsum) + space_.rank(rem.data(), L - lsum);
            int64_t wsrc = space_.level_offset(lsum) + space_.rank(l.data(), lsum);
            mul_mm_acc(1.0, G.at(gsrc), W.at(wsrc), sacc.data(), MM);
          }
          mul_mm(sacc.data(), g0flat.data(), G.at(base + s), MM);
          IndexSpace::next_composition(idx.data(), space_.K());
        }
      };
      parallel_for(threads_, 0, nslots, body);
      if (pin_) continue;
      for (int64_t s = 0; s < nslots; ++s) {
        const double* g = G.at(base + s);
        for (int i = 0; i < MM; ++i) {
          double rs = 0;
          for (int j = 0; j < MM; ++j) rs += g[i * MM + j];
          acc(i) += rs;
        }
      }
      if ((acc.array() >= target.array()).all()) stop = L;
    }
    if (stop < 0) {
      std::ostringstream os;
      os << "class " << k << " resolvent mass still below its bound at level " << Np;
      throw Error(ErrorKind::NoConvergence, os.str());
    }
    ledger_.n_Gamma[k] = stop;
    cells_allocated_ -= static_cast<uint64_t>(acache) * cell;  // W released here
  }
  if (record_) record_->n_Gamma = ledger_.n_Gamma;
}

void Engine::assemble_q() {
  const int Np = opt_.N_p;
  const int64_t all = space_.cum_slots(Np);
  q_.resize(K_);
  ledger_.q_deficit.assign(K_, 0.0);
  for (int k = 0; k < K_; ++k) {
    const PhBatch& b = model_.classes[k].batch;
    int Mk = b.dim();
    int MM = M_ * Mk;
    reserve_cells(static_cast<uint64_t>(all) * MM * 2 + static_cast<uint64_t>(all) * M_);

    const double* alpha = b.alpha.data();
    int nv = ledger_.n_v[k], nA = ledger_.n_A[k], nG = ledger_.n_Gamma[k];

    // T1(n) = sum_{n1+n2=n} v(n1) [alpha ⊗ A(n2)]
    Field T1;
    T1.init(all, MM);
    auto t1body = [&](int64_t g0, int64_t g1) {
      vector<int> idx(static_cast<size_t>(space_.K()));
      vector<int> box(static_cast<size_t>(space_.K()));
      vector<int> n1(static_cast<size_t>(space_.K()));
      vector<int> n2(static_cast<size_t>(space_.K()));
      vector<double> u(static_cast<size_t>(M_));
      int L = 0;
      while (space_.cum_slots(L) <= g0) ++L;
      space_.unrank(L, g0 - space_.level_offset(L), idx.data());
      for (int64_t g = g0; g < g1; ++g) {
        double* out = T1.at(g);
        for (int t = 0; t < space_.K(); ++t) box[t] = std::min(idx[t], nv);
        std::fill(n1.begin(), n1.end(), 0);
        bool more = true;
        while (more) {
          int l1 = 0;
          for (int t = 0; t < space_.K(); ++t) l1 += n1[t];
          if (l1 <= nv && L - l1 <= nA) {
            for (int t = 0; t < space_.K(); ++t) n2[t] = idx[t] - n1[t];
            const double* vv = v_[k].at(space_.level_offset(l1) + space_.rank(n1.data(), l1));
            const double* a = A_[k].at(space_.level_offset(L - l1) + space_.rank(n2.data(), L - l1));
            for (int j = 0; j < M_; ++j) {
              double s = 0;
              for (int i = 0; i < M_; ++i) s += vv[i] * a[i * M_ + j];
              u[j] = s;
            }
            for (int bb = 0; bb < Mk; ++bb) {
              double ab = alpha[bb];
              if (ab == 0.0) continue;
              for (int j = 0; j < M_; ++j) out[bb * M_ + j] += ab * u[j];
            }
          }
          // next n1 in the box [0, min(idx, nv)]
          int d = space_.K() - 1;
          while (d >= 0 && n1[d] == box[d]) {
            n1[d] = 0;
            --d;
          }
          if (d < 0)
            more = false;
          else
            ++n1[d];
        }
        if (!IndexSpace::next_composition(idx.data(), space_.K())) {
          ++L;
          if (g + 1 < g1) space_.unrank(L, 0, idx.data());
        }
      }
    };
    parallel_for(threads_, 0, all, t1body);

    // T2(n) = sum_{n3<=n, |n3|<=nG} T1(n-n3) Γ(n3)
    Field T2;
    T2.init(all, MM);
    auto t2body = [&](int64_t g0, int64_t g1) {
      vector<int> idx(static_cast<size_t>(space_.K()));
      vector<int> box(static_cast<size_t>(space_.K()));
      vector<int> n3(static_cast<size_t>(space_.K()));
      vector<int> rem(static_cast<size_t>(space_.K()));
      int L = 0;
      while (space_.cum_slots(L) <= g0) ++L;
      space_.unrank(L, g0 - space_.level_offset(L), idx.data());
      for (int64_t g = g0; g < g1; ++g) {
        double* out = T2.at(g);
        for (int t = 0; t < space_.K(); ++t) box[t] = std::min(idx[t], nG);
        std::fill(n3.begin(), n3.end(), 0);
        bool more = true;
        while (more) {
          int l3 = 0;
          for (int t = 0; t < space_.K(); ++t) l3 += n3[t];
          if (l3 <= nG) {
            for (int t = 0; t < space_.K(); ++t) rem[t] = idx[t] - n3[t];
            const double* t1 = T1.at(space_.level_offset(L - l3) + space_.rank(rem.data(), L - l3));
            const double* gm = gamma_[k].at(space_.level_offset(l3) + space_.rank(n3.data(), l3));
            for (int i = 0; i < MM; ++i) {
              double ti = t1[i];
              if (ti == 0.0) continue;
              const double* gi = gm + i * MM;
              for (int j = 0; j < MM; ++j) out[j] += ti * gi[j];
            }
          }
          int d = space_.K() - 1;
          while (d >= 0 && n3[d] == box[d]) {
            n3[d] = 0;
            --d;
          }
          if (d < 0)
            more = false;
          else
            ++n3[d];
        }
        if (!IndexSpace::next_composition(idx.data(), space_.K())) {
          ++L;
          if (g + 1 < g1) space_.unrank(L, 0, idx.data());
        }
      }
    };
    parallel_for(threads_, 0, all, t2body);

    // w_m = P^m (I-P) 1: probability the tagged member has m same-batch
    // followers still to arrive
    vector<Vec> wm(static_cast<size_t>(Np) + 1);
    wm[0] = (Mat::Identity(Mk, Mk) - b.P) * Vec::Ones(Mk);
    for (int m = 1; m <= Np; ++m) wm[m] = b.P * wm[m - 1];

    Field& q = q_[k];
    q.init(all, M_);
    int dk = dim_of_class(k);
    double lam = sum_.lambda[k];
    auto qbody = [&](int64_t g0, int64_t g1) {
      vector<int> idx(static_cast<size_t>(space_.K()));
      vector<int> src(static_cast<size_t>(space_.K()));
      int L = 0;
      while (space_.cum_slots(L) <= g0) ++L;
      space_.unrank(L, g0 - space_.level_offset(L), idx.data());
      for (int64_t g = g0; g < g1; ++g) {
        double* out = q.at(g);
        std::copy(idx.begin(), idx.end(), src.begin());
        for (int m = 0; m <= idx[dk]; ++m) {
          src[dk] = idx[dk] - m;
          int sl = L - m;
          const double* t2 = T2.at(space_.level_offset(sl) + space_.rank(src.data(), sl));
          const double* w = wm[m].data();
          for (int bb = 0; bb < Mk; ++bb) {
            double wb = w[bb];
            if (wb == 0.0) continue;
            for (int j = 0; j < M_; ++j) out[j] += wb * t2[bb * M_ + j];
          }
        }
        for (int j = 0; j < M_; ++j) out[j] /= lam;
        if (!IndexSpace::next_composition(idx.data(), space_.K())) {
          ++L;
          if (g + 1 < g1) space_.unrank(L, 0, idx.data());
        }
      }
    };
    parallel_for(threads_, 0, all, qbody);

    double qsum = 0;
    for (int64_t s = 0; s < all; ++s) {
      double* c = q.at(s);
      scrub_cell(c, M_, "q");
      for (int j = 0; j < M_; ++j) qsum += c[j];
    }
    ledger_.q_deficit[k] = 1.0 - qsum;
    cells_allocated_ -= static_cast<uint64_t>(all) * MM * 2;  // T1, T2 released
  }
}

void Engine::assemble_p() {
  const int Np = opt_.N_p;
  const int64_t all = space_.cum_slots(Np);
  reserve_cells(static_cast<uint64_t>(all) * M_);
  p_.init(all, M_);

  Mat Cinv = (-model_.C).partialPivLu().solve(Mat::Identity(M_, M_));
  vector<double> cinv(static_cast<size_t>(M_) * M_);
  for (int i = 0; i < M_; ++i)
    for (int j = 0; j < M_; ++j) cinv[i * M_ + j] = Cinv(i, j);

  // The homogeneous part of the recursion conserves mass (the flow operator
  // is stochastic), so past the last level still fed by q it would recycle
  // truncation residue as a flat artificial tail instead of decaying.  Cap
  // the sweep one level past the q support and leave zeros beyond.
  int L_stop = 0;
  if (pin_) {
    L_stop = pin_->p_support;
  } else {
    vector<double> qlm(static_cast<size_t>(Np) + 1, 0.0);
    for (int k = 0; k < K_; ++k) {
      for (int L = 0; L <= Np; ++L) {
        int64_t base = space_.level_offset(L);
        int64_t nslots = space_.slots(L);
        double s = 0;
        for (int64_t i = 0; i < nslots; ++i) {
          const double* c = q_[k].at(base + i);
          for (int j = 0; j < M_; ++j) s += c[j];
        }
        qlm[L] = std::max(qlm[L], s);
      }
    }
    const double q_floor = 0.01 * opt_.eps / (Np + 1);
    for (int L = 0; L <= Np; ++L)
      if (qlm[L] >= q_floor) L_stop = std::min(Np, L + 1);
    if (record_) record_->p_support = L_stop;
  }
  ledger_.p_support = L_stop;

  for (int L = 0; L <= L_stop; ++L) {
    int64_t base = space_.level_offset(L);
    int64_t nslots = space_.slots(L);
    auto body = [&, L, base](int64_t s0, int64_t s1) {
      vector<int> idx(space_.K());
      vector<int> src(space_.K());
      vector<double> acc(static_cast<size_t>(M_));
      space_.unrank(L, s0, idx.data());
      for (int64_t s = s0; s < s1; ++s) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int k = 0; k < K_; ++k) {
          int dk = dim_of_class(k);
          double lam = sum_.lambda[k];
          const double* qn = q_[k].at(base + s);
          for (int j = 0; j < M_; ++j) acc[j] += lam * qn[j];
          if (idx[dk] >= 1) {
            std::copy(idx.begin(), idx.end(), src.begin());
            src[dk] -= 1;
            const double* qp = q_[k].at(space_.level_offset(L - 1) + space_.rank(src.data(), L - 1));
            for (int j = 0; j < M_; ++j) acc[j] -= lam * qp[j];
          }
          // fresh batch arrivals overtaking the level from below
          std::copy(idx.begin(), idx.end(), src.begin());
          for (int mk = 1; mk <= idx[dk]; ++mk) {
            src[dk] = idx[dk] - mk;
            int sl = L - mk;
            const double* pp = p_.at(space_.level_offset(sl) + space_.rank(src.data(), sl));
            double gv = g_tab_[k][mk - 1];
            for (const Trip& t : dk_[k]) {
              acc[t.j] += gv * t.v * pp[t.i];
            }
          }
        }
        double* out = p_.at(base + s);
        for (int j = 0; j < M_; ++j) {
          double sum = 0;
          for (int i = 0; i < M_; ++i) sum += acc[i] * cinv[i * M_ + j];
          out[j] = sum;
        }
        IndexSpace::next_composition(idx.data(), space_.K());
      }
    };
    parallel_for(threads_, 0, nslots, body);
  }

  // Slot noise in deep levels is sign-symmetric and cancels only in the level
  // aggregate, so zeroing negatives alone would inflate the level mass (and
  // the conserving flow has already propagated the raw values).  Zero them,
  // then rescale the level back onto its raw sum: exact aggregates, clean
  // slots.  Levels whose raw sum is not positive are pure noise and drop.
  for (int L = 0; L <= L_stop; ++L) {
    int64_t base = space_.level_offset(L);
    int64_t nslots = space_.slots(L);
    double raw = 0;
    bool negs = false;
    for (int64_t s = 0; s < nslots; ++s) {
      double* c = p_.at(base + s);
      for (int j = 0; j < M_; ++j) {
        if (c[j] < -1e-8) {
          std::ostringstream os;
          os << "p entry " << c[j] << " below -1e-8";
          throw Error(ErrorKind::NegativeMass, os.str());
        }
        raw += c[j];
        if (c[j] < 0.0) negs = true;
      }
    }
    if (!negs) continue;
    if (raw <= 0.0) {
      for (int64_t s = 0; s < nslots; ++s) std::memset(p_.at(base + s), 0, sizeof(double) * M_);
      continue;
    }
    double kept = 0;
    for (int64_t s = 0; s < nslots; ++s) {
      double* c = p_.at(base + s);
      for (int j = 0; j < M_; ++j) {
        if (c[j] < 0.0) {
          c[j] = 0.0;
          ++ledger_.p_clamped;
        } else {
          kept += c[j];
        }
      }
    }
    double f = raw / kept;
    for (int64_t s = 0; s < nslots; ++s) {
      double* c = p_.at(base + s);
      for (int j = 0; j < M_; ++j) c[j] *= f;
    }
  }

  out_.level_mass.assign(static_cast<size_t>(Np) + 1, 0.0);
  double total = 0;
  for (int L = 0; L <= Np; ++L) {
    int64_t base = space_.level_offset(L);
    int64_t nslots = space_.slots(L);
    double sL = 0;
    for (int64_t s = 0; s < nslots; ++s) {
      const double* c = p_.at(base + s);
      for (int j = 0; j < M_; ++j) sL += c[j];
    }
    out_.level_mass[L] = sL;
    total += sL;
    if (total > 1.0 + 1e-9) {
      std::ostringstream os;
      os << "probability mass " << total << " through level " << L << " exceeds 1 + 1e-9";
      throw Error(ErrorKind::NoConvergence, os.str());
    }
  }
  ledger_.p_deficit = 1.0 - total;
}

void Engine::finalize_means() {
  const int Np = opt_.N_p;
  int Kd = space_.K();
  out_.EN_k_partial.assign(K_, 0.0);
  vector<double> last_level_nk(K_, 0.0);

  vector<int> idx(static_cast<size_t>(Kd));
  for (int L = 0; L <= Np; ++L) {
    int64_t base = space_.level_offset(L);
    int64_t nslots = space_.slots(L);
    std::fill(idx.begin(), idx.end(), 0);
    idx[Kd - 1] = L;
    for (int64_t s = 0; s < nslots; ++s) {
      const double* c = p_.at(base + s);
      double mass = 0;
      for (int j = 0; j < M_; ++j) mass += c[j];
      if (!opt_.total_mode) {
        for (int k = 0; k < K_; ++k) {
          out_.EN_k_partial[k] += idx[k] * mass;
          if (L == Np) last_level_nk[k] += idx[k] * mass;
        }
      }
      IndexSpace::next_composition(idx.data(), Kd);
    }
  }
  double en_partial = 0;
  for (int L = 0; L <= Np; ++L) en_partial += static_cast<double>(L) * out_.level_mass[L];

  // geometric tail fitted to the last 10 positive level masses
  vector<std::pair<int, double>> pts;
  for (int L = 0; L <= Np; ++L)
    if (out_.level_mass[L] > 0) pts.push_back({L, std::log(out_.level_mass[L])});
  double corr = 0, ratio = 0;
  bool unbounded = false;
  if (pts.size() >= 3) {
    size_t first = pts.size() > 10 ? pts.size() - 10 : 0;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    double n = 0;
    for (size_t i = first; i < pts.size(); ++i) {
      double x = pts[i].first, y = pts[i].second;
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
      n += 1;
    }
    double denom = n * sxx - sx * sx;
    if (denom > 0) {
      double slope = (n * sxy - sx * sy) / denom;
      ratio = std::exp(slope);
      if (ratio >= 0.999) {
        unbounded = true;
      } else if (ratio > 0) {
        double sNp = out_.level_mass[Np];
        double r1 = ratio / (1.0 - ratio);
        corr = sNp * (Np * r1 + r1 / (1.0 - ratio));
      }
    }
  }
  out_.tail_correction = corr;
  out_.tail_ratio = ratio;
  out_.tail_unbounded = unbounded;

  out_.EN = en_partial + corr;
  out_.EN_k.assign(K_, 0.0);
  if (!opt_.total_mode) {
    double sNp = out_.level_mass[Np];
    for (int k = 0; k < K_; ++k) {
      double ck = (sNp > 0 && Np > 0) ? last_level_nk[k] / (Np * sNp) : (k == 0 ? 1.0 : 0.0);
      out_.EN_k[k] = out_.EN_k_partial[k] + ck * corr;
    }
  }
  out_.P0 = out_.level_mass[0];
}

JointResult Engine::run() {
  prepare();
  choose_cutoffs();
  choose_batch_cuts();
  run_F_accumulation();
  build_gamma_fields();
  assemble_q();
  assemble_p();
  finalize_means();

  out_.K = K_;
  out_.M = M_;
  out_.total_mode = opt_.total_mode;
  out_.N_p = opt_.N_p;
  ledger_.N_p = opt_.N_p;
  out_.ledger = ledger_;
  out_.q = std::move(q_);
  out_.p = std::move(p_);
  if (capture_) {
    capture_->A = std::move(A_);
    capture_->vfield = std::move(v_);
    capture_->Gamma = std::move(gamma_);
  }
  return std::move(out_);
}

}  // namespace

JointResult analyze(const Model& model, const EngineOptions& opt, EngineArtifacts* capture) {
  validate(model);
  if (opt.N_p < 1) throw Error(ErrorKind::BadInput, "N_p must be at least 1");
  if (!(opt.eps > 0) || opt.eps >= 0.5)
    throw Error(ErrorKind::BadInput, "eps must lie in (0, 0.5)");
  if (!opt.total_mode && model.K() > 1) {
    // decide every truncation on the cheap class-count aggregate first, then
    // pin the joint run to the same choices so the two modes stay consistent
    EngineOptions shadow_opt = opt;
    shadow_opt.total_mode = true;
    shadow_opt.f_observer = nullptr;
    DecisionTrace trace;
    {
      Engine shadow(model, shadow_opt, nullptr, nullptr, &trace);
      shadow.run();
    }
    Engine e(model, opt, capture, &trace);
    return e.run();
  }
  Engine e(model, opt, capture);
  return e.run();
}

}  // namespace mbmapq
