// Command-line front end: analyze / simulate / compare / validate.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "mbmapq/coefficients.hpp"
#include "mbmapq/errors.hpp"
#include "mbmapq/io.hpp"
#include "mbmapq/joint_engine.hpp"
#include "mbmapq/model.hpp"
#include "mbmapq/simulator.hpp"
#include "mbmapq/version.hpp"
#include "mbmapq/workload.hpp"

namespace fs = std::filesystem;
using namespace mbmapq;

namespace {

int env_threads() {
  const char* s = std::getenv("MBMAPQ_THREADS");
  if (!s || !*s) return 0;
  char* end = nullptr;
  long v = std::strtol(s, &end, 10);
  if (*end != '\0' || v < 0 || v > 4096)
    throw Error(ErrorKind::BadInput, "MBMAPQ_THREADS must be a nonnegative integer (0 = auto)");
  return static_cast<int>(v);
}

fs::path prep_out_dir(const std::string& out) {
  if (out.empty()) throw Error(ErrorKind::BadInput, "--out directory is required");
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::BadInput, "cannot create output directory " + out + ": " + ec.message());
  return dir;
}

struct Csv {
  std::string buf;
  void raw(const std::string& s) { buf += s; }
  void num(double x) {
    buf += g17(x);
    buf += ',';
  }
  void num(int64_t x) {
    buf += std::to_string(x);
    buf += ',';
  }
  void end_row() {
    if (!buf.empty() && buf.back() == ',') buf.back() = '\n';
    else buf += '\n';
  }
  void write(const fs::path& p) { write_text_file(p.string(), buf); }
};

std::string csv_header(const std::string& idx_cols, const std::string& val_prefix, int M,
                       const std::string& extra) {
  std::string h = idx_cols;
  for (int j = 1; j <= M; ++j) h += "," + val_prefix + "_" + std::to_string(j);
  h += ",mass" + extra + "\n";
  return h;
}

std::string index_header(int K) {
  std::string h;
  for (int k = 1; k <= K; ++k) h += (k > 1 ? "," : "") + std::string("n_") + std::to_string(k);
  return h;
}

// per-state row block over the level-indexed field layout shared by p and q
void write_field_csv(const fs::path& path, const JointResult& res, const Field& f,
                     const char* val_prefix, bool with_ccdf) {
  Csv csv;
  int M = res.M;
  if (res.total_mode) {
    csv.raw(csv_header("n", val_prefix, M, with_ccdf ? ",ccdf" : ""));
    double cum = 0.0;
    for (int L = 0; L <= res.N_p; ++L) {
      const double* cell = f.at(L);
      double mass = 0.0;
      for (int j = 0; j < M; ++j) mass += cell[j];
      csv.num(static_cast<int64_t>(L));
      for (int j = 0; j < M; ++j) csv.num(cell[j]);
      csv.num(mass);
      if (with_ccdf) {
        cum += mass;
        csv.num(1.0 - cum);
      }
      csv.end_row();
    }
  } else {
    csv.raw(csv_header(index_header(res.K), val_prefix, M, ""));
    IndexSpace sp(res.K, res.N_p);
    std::vector<int> n(static_cast<size_t>(res.K));
    for (int L = 0; L <= res.N_p; ++L) {
      for (int64_t r = 0; r < sp.slots(L); ++r) {
        sp.unrank(L, r, n.data());
        const double* cell = f.at(sp.level_offset(L) + r);
        double mass = 0.0;
        for (int j = 0; j < M; ++j) mass += cell[j];
        for (int k = 0; k < res.K; ++k) csv.num(static_cast<int64_t>(n[static_cast<size_t>(k)]));
        for (int j = 0; j < M; ++j) csv.num(cell[j]);
        csv.num(mass);
        csv.end_row();
      }
    }
  }
  csv.write(path);
}

// joint p aggregated onto the total-level axis, with the complementary cdf
void write_total_csv(const fs::path& path, const JointResult& res) {
  Csv csv;
  int M = res.M;
  csv.raw(csv_header("n", "p", M, ",ccdf"));
  IndexSpace sp(res.K, res.N_p);
  double cum = 0.0;
  for (int L = 0; L <= res.N_p; ++L) {
    std::vector<double> agg(static_cast<size_t>(M), 0.0);
    for (int64_t r = 0; r < sp.slots(L); ++r) {
      const double* cell = res.p.at(sp.level_offset(L) + r);
      for (int j = 0; j < M; ++j) agg[static_cast<size_t>(j)] += cell[j];
    }
    double mass = 0.0;
    for (int j = 0; j < M; ++j) mass += agg[static_cast<size_t>(j)];
    cum += mass;
    csv.num(static_cast<int64_t>(L));
    for (int j = 0; j < M; ++j) csv.num(agg[static_cast<size_t>(j)]);
    csv.num(mass);
    csv.num(1.0 - cum);
    csv.end_row();
  }
  csv.write(path);
}

void write_ledger(JsonWriter& w, const TruncationLedger& lg) {
  w.key("ledger").begin_object();
  w.kv("eps", lg.eps).kv("eps_F", lg.eps_F).kv("eps_g", lg.eps_g);
  w.kv("m_max", lg.m_max);
  w.kv_array("m_gamma", lg.m_gamma).kv_array("m_v", lg.m_v);
  w.kv_array("n_g", lg.n_g).kv_array("n_F", lg.n_F);
  w.kv_array("n_A", lg.n_A).kv_array("n_v", lg.n_v).kv_array("n_Gamma", lg.n_Gamma);
  w.kv("N_p", lg.N_p);
  w.kv("f_slots_computed", static_cast<unsigned long long>(lg.f_slots_computed));
  w.kv("f_slots_stored_peak", static_cast<unsigned long long>(lg.f_slots_stored_peak));
  w.kv_array("A_mass", lg.A_mass).kv_array("v_mass", lg.v_mass);
  w.kv_array("q_deficit", lg.q_deficit);
  w.kv("p_deficit", lg.p_deficit);
  w.kv("p_clamped", static_cast<long long>(lg.p_clamped));
  w.kv("p_support", lg.p_support);
  w.end_object();
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const std::vector<std::pair<std::string, std::string>>& str_fields,
                    const std::vector<std::pair<std::string, double>>& num_fields,
                    double wall_seconds) {
  JsonWriter w;
  w.begin_object();
  w.kv("command", command);
  for (const auto& [k, v] : str_fields) w.kv(k, v);
  for (const auto& [k, v] : num_fields) w.kv(k, v);
  w.kv("wall_clock_seconds", wall_seconds);
  w.kv("version", kVersion);
  w.end_object();
  w.write((dir / "manifest.json").string());
}

struct AnalyzeFlags {
  std::string model, mode = "joint", out;
  double eps = 1e-6;
  int np = 300;
};

int cmd_analyze(const AnalyzeFlags& fl) {
  auto t0 = std::chrono::steady_clock::now();
  if (fl.mode != "joint" && fl.mode != "total")
    throw Error(ErrorKind::BadInput, "--mode must be joint or total");
  if (fl.np < 1) throw Error(ErrorKind::BadInput, "--np must be >= 1");
  if (!(fl.eps > 0.0) || fl.eps >= 1.0)
    throw Error(ErrorKind::BadInput, "--eps must lie in (0, 1)");
  fs::path dir = prep_out_dir(fl.out);

  Model m = load_model(fl.model);
  StationarySummary s = stationary_summary(m);
  CoefficientSet coeff(m, s.theta);
  QKappa qk = compute_Q_kappa(m, s, coeff);
  RowVec v1bar = mean_workload(m, s, coeff, qk.kappa);

  EngineOptions opt;
  opt.eps = fl.eps;
  opt.N_p = fl.np;
  opt.total_mode = fl.mode == "total";
  opt.threads = env_threads();
  JointResult res = analyze(m, opt);

  if (!res.total_mode) {
    write_field_csv(dir / "p_joint.csv", res, res.p, "p", false);
    write_total_csv(dir / "p_total.csv", res);
  } else {
    write_field_csv(dir / "p_total.csv", res, res.p, "p", true);
  }
  for (int k = 0; k < res.K; ++k)
    write_field_csv(dir / ("q_class_" + std::to_string(k + 1) + ".csv"), res,
                    res.q[static_cast<size_t>(k)], "q", false);

  JsonWriter w;
  w.begin_object();
  w.kv("version", kVersion);
  w.kv("model", fl.model);
  w.kv("mode", fl.mode);
  w.kv("eps", fl.eps);
  w.kv("N_p", fl.np);
  w.kv("M", m.M).kv("K", m.K());
  w.kv("rho", s.rho).kv("theta", s.theta);
  w.kv_array("lambdaB", s.lambdaB).kv_array("lambda", s.lambda);
  w.kv_array("EG", s.EG).kv_array("h", s.h);
  w.kv("P0", res.P0);
  w.kv("EN", res.EN);
  w.kv_array("EN_k", res.EN_k);
  w.kv_array("EN_k_partial", res.EN_k_partial);
  w.kv("tail_correction", res.tail_correction);
  w.kv("tail_ratio", res.tail_ratio);
  w.kv("tail_unbounded", res.tail_unbounded);
  w.kv("EV", v1bar.sum());
  std::vector<double> EW(static_cast<size_t>(m.K()));
  for (int k = 0; k < m.K(); ++k) EW[static_cast<size_t>(k)] = mean_waiting(m, s, v1bar, k);
  w.kv_array("EW_k", EW);
  write_ledger(w, res.ledger);
  w.end_object();
  w.write((dir / "summary.json").string());

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(dir, "analyze", {{"model", fl.model}, {"mode", fl.mode}, {"out", fl.out}},
                 {{"eps", fl.eps}, {"np", static_cast<double>(fl.np)}, {"seed", 0.0}}, wall);
  std::printf("analyze %s: rho=%s EN=%s P0=%s\n", fl.model.c_str(), g17(s.rho).c_str(),
              g17(res.EN).c_str(), g17(res.P0).c_str());
  return 0;
}

struct SimulateFlags {
  std::string model, out;
  double horizon = 1e6, warmup = -1.0;
  int reps = 20, cap = 50;
  uint64_t seed = 1;
};

int cmd_simulate(const SimulateFlags& fl) {
  auto t0 = std::chrono::steady_clock::now();
  fs::path dir = prep_out_dir(fl.out);
  Model m = load_model(fl.model);

  SimConfig cfg;
  cfg.horizon = fl.horizon;
  cfg.warmup = fl.warmup;
  cfg.replications = fl.reps;
  cfg.seed = fl.seed;
  cfg.hist_cap = fl.cap;
  cfg.threads = env_threads();
  SimEstimate est = simulate(m, cfg);

  Csv csv;
  csv.raw(index_header(est.K) + ",p,se\n");
  std::vector<int> n(static_cast<size_t>(est.K), 0);
  for (int64_t c = 0; c < est.cells(); ++c) {
    int64_t rem = c;
    for (int k = est.K - 1; k >= 0; --k) {
      n[static_cast<size_t>(k)] = static_cast<int>(rem % (est.hist_cap + 1));
      rem /= est.hist_cap + 1;
    }
    for (int k = 0; k < est.K; ++k) csv.num(static_cast<int64_t>(n[static_cast<size_t>(k)]));
    csv.num(est.p[static_cast<size_t>(c)]);
    csv.num(est.p_se[static_cast<size_t>(c)]);
    csv.end_row();
  }
  csv.write(dir / "sim_hist.csv");

  JsonWriter w;
  w.begin_object();
  w.kv("version", kVersion);
  w.kv("model", fl.model);
  w.kv("horizon", fl.horizon);
  w.kv("warmup", cfg.effective_warmup());
  w.kv("replications", fl.reps);
  w.kv("seed", static_cast<unsigned long long>(fl.seed));
  w.kv("hist_cap", fl.cap);
  w.kv("K", est.K);
  w.kv("EN", est.EN).kv("EN_se", est.EN_se);
  w.kv_array("EN_k", est.EN_k).kv_array("EN_k_se", est.EN_k_se);
  w.kv("EV", est.EV).kv("EV_se", est.EV_se);
  w.kv("P0", est.P0).kv("P0_se", est.P0_se);
  w.kv_array("rate_k", est.rate_k).kv_array("rate_k_se", est.rate_k_se);
  w.kv("hist_mass", est.hist_mass);
  w.end_object();
  w.write((dir / "sim_summary.json").string());

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(dir, "simulate", {{"model", fl.model}, {"out", fl.out}},
                 {{"horizon", fl.horizon},
                  {"warmup", fl.warmup},
                  {"reps", static_cast<double>(fl.reps)},
                  {"cap", static_cast<double>(fl.cap)},
                  {"seed", static_cast<double>(fl.seed)}},
                 wall);
  std::printf("simulate %s: EN=%s +- %s\n", fl.model.c_str(), g17(est.EN).c_str(),
              g17(est.EN_se).c_str());
  return 0;
}

nlohmann::json load_json(const fs::path& p) {
  if (!fs::exists(p)) throw Error(ErrorKind::BadInput, "missing file: " + p.string());
  try {
    return nlohmann::json::parse(read_text_file(p.string()));
  } catch (const std::exception& e) {
    throw Error(ErrorKind::BadInput, p.string() + ": " + e.what());
  }
}

struct CompareFlags {
  std::string analysis, sim, out;
  double threshold = 4.0;
};

int cmd_compare(const CompareFlags& fl) {
  auto t0 = std::chrono::steady_clock::now();
  fs::path dir = prep_out_dir(fl.out);
  nlohmann::json a = load_json(fs::path(fl.analysis) / "summary.json");
  nlohmann::json s = load_json(fs::path(fl.sim) / "sim_summary.json");

  int K = a.at("K").get<int>();
  if (s.at("K").get<int>() != K)
    throw Error(ErrorKind::BadInput, "analysis and simulation describe different class counts");

  struct Stat {
    std::string name;
    double an, sm, se;
  };
  std::vector<Stat> stats;
  stats.push_back({"EN", a.at("EN").get<double>(), s.at("EN").get<double>(),
                   s.at("EN_se").get<double>()});
  for (int k = 0; k < K; ++k)
    stats.push_back({"EN_" + std::to_string(k + 1),
                     a.at("EN_k")[static_cast<size_t>(k)].get<double>(),
                     s.at("EN_k")[static_cast<size_t>(k)].get<double>(),
                     s.at("EN_k_se")[static_cast<size_t>(k)].get<double>()});
  stats.push_back({"P0", a.at("P0").get<double>(), s.at("P0").get<double>(),
                   s.at("P0_se").get<double>()});
  stats.push_back({"EV", a.at("EV").get<double>(), s.at("EV").get<double>(),
                   s.at("EV_se").get<double>()});
  for (int k = 0; k < K; ++k)
    stats.push_back({"rate_" + std::to_string(k + 1),
                     a.at("lambda")[static_cast<size_t>(k)].get<double>(),
                     s.at("rate_k")[static_cast<size_t>(k)].get<double>(),
                     s.at("rate_k_se")[static_cast<size_t>(k)].get<double>()});

  bool all_pass = true;
  JsonWriter w;
  w.begin_object();
  w.kv("version", kVersion);
  w.kv("analysis", fl.analysis);
  w.kv("sim", fl.sim);
  w.kv("threshold", fl.threshold);
  w.key("stats").begin_array();
  for (const Stat& st : stats) {
    double z = (st.an - st.sm) / std::max(st.se, 1e-12);
    bool pass = std::fabs(z) <= fl.threshold;
    if (!pass) {
      all_pass = false;
      std::fprintf(stderr, "disagreement: %s analysis=%s sim=%s se=%s z=%s\n", st.name.c_str(),
                   g17(st.an).c_str(), g17(st.sm).c_str(), g17(st.se).c_str(), g17(z).c_str());
    }
    w.begin_object();
    w.kv("name", st.name);
    w.kv("analysis", st.an).kv("sim", st.sm).kv("se", st.se).kv("z", z);
    w.kv("pass", pass);
    w.end_object();
  }
  w.end_array();
  w.kv("pass", all_pass);
  w.end_object();
  w.write((dir / "compare.json").string());

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(dir, "compare",
                 {{"analysis", fl.analysis}, {"sim", fl.sim}, {"out", fl.out}},
                 {{"threshold", fl.threshold}}, wall);
  std::printf("compare: %s\n", all_pass ? "agree" : "DISAGREE");
  return all_pass ? 0 : 5;
}

int cmd_validate(const std::string& model) {
  Model m = load_model(model);
  StationarySummary s = stationary_summary(m);
  JsonWriter w;
  w.begin_object();
  w.kv("model", model);
  w.kv("valid", true);
  w.kv("M", m.M).kv("K", m.K());
  w.kv("rho", s.rho).kv("theta", s.theta);
  w.kv_array("lambdaB", s.lambdaB).kv_array("lambda", s.lambda);
  w.kv_array("EG", s.EG).kv_array("h", s.h);
  w.kv("raw_pmf_batches", m.any_raw_pmf());
  w.end_object();
  std::printf("%s\n", w.str().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"exact and simulated analysis of a FIFO queue fed by correlated batch Markovian streams"};
  app.require_subcommand(1);

  AnalyzeFlags afl;
  auto* A = app.add_subcommand("analyze", "exact stationary analysis; writes CSV/JSON artifacts");
  A->add_option("--model", afl.model, "model file (JSON)")->required();
  A->add_option("--eps", afl.eps, "error budget for the truncation design");
  A->add_option("--np", afl.np, "per-class queue-length cap of the reported distribution");
  A->add_option("--mode", afl.mode, "joint | total");
  A->add_option("--out", afl.out, "output directory")->required();

  SimulateFlags sfl;
  auto* S = app.add_subcommand("simulate", "event-driven estimation with replication error bars");
  S->add_option("--model", sfl.model, "model file (JSON)")->required();
  S->add_option("--horizon", sfl.horizon, "simulated time per replication");
  S->add_option("--warmup", sfl.warmup, "discarded leading time (default horizon/10)");
  S->add_option("--reps", sfl.reps, "independent replications");
  S->add_option("--seed", sfl.seed, "base seed");
  S->add_option("--cap", sfl.cap, "histogram cap per class");
  S->add_option("--out", sfl.out, "output directory")->required();

  CompareFlags cfl;
  auto* C = app.add_subcommand("compare", "z-scores of analysis vs simulation summaries");
  C->add_option("--analysis", cfl.analysis, "directory written by analyze")->required();
  C->add_option("--sim", cfl.sim, "directory written by simulate")->required();
  C->add_option("--out", cfl.out, "output directory")->required();
  C->add_option("--threshold", cfl.threshold, "|z| limit for agreement");

  std::string vmodel;
  auto* V = app.add_subcommand("validate", "load a model file and report its invariants");
  V->add_option("--model", vmodel, "model file (JSON)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (A->parsed()) return cmd_analyze(afl);
    if (S->parsed()) return cmd_simulate(sfl);
    if (C->parsed()) return cmd_compare(cfl);
    if (V->parsed()) return cmd_validate(vmodel);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
