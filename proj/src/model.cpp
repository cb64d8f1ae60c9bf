#include "mbmapq/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mbmapq {

namespace {

std::string idx2(int i, int j) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "(%d,%d)", i, j);
  return buf;
}

constexpr double kTol = 1e-12;

}  // namespace

double PhBatch::pmf(int n) const {
  RowVec a = alpha;
  for (int i = 1; i < n; ++i) a = a * P;
  return a.sum() - (a * P).sum();
}

double PhBatch::residual(int n) const {
  RowVec a = alpha;
  for (int i = 0; i < n; ++i) a = a * P;
  return a.sum();
}

void PhBatch::pmf_prefix(int n, std::vector<double>& g, double& resid) const {
  g.assign(static_cast<size_t>(n), 0.0);
  RowVec a = alpha;
  for (int i = 0; i < n; ++i) {
    RowVec next = a * P;
    g[static_cast<size_t>(i)] = a.sum() - next.sum();
    a = next;
  }
  resid = a.sum();
}

double PhBatch::mean() const {
  Mat ImP = Mat::Identity(dim(), dim()) - P;
  Vec x = ImP.partialPivLu().solve(Vec::Ones(dim()));
  return alpha * x;
}

double PhBatch::factorial2() const {
  Mat ImP = Mat::Identity(dim(), dim()) - P;
  auto lu = ImP.partialPivLu();
  Vec y = lu.solve(Vec::Ones(dim()));
  Vec z = lu.solve(P * y);
  return 2.0 * (alpha * z).value();
}

double PhBatch::pgf(double z) const {
  Mat ImzP = Mat::Identity(dim(), dim()) - z * P;
  Vec rhs = (Mat::Identity(dim(), dim()) - P) * Vec::Ones(dim());
  Vec x = ImzP.partialPivLu().solve(rhs);
  return z * (alpha * x).value();
}

double ServiceLaw::mean() const {
  switch (kind) {
    case ServiceKind::Deterministic: return a[0];
    case ServiceKind::Exponential:   return 1.0 / a[0];
    case ServiceKind::Erlang:        return shape / a[0];
    case ServiceKind::HyperExponential: {
      double s = 0;
      for (size_t i = 0; i < a.size(); ++i) s += w[i] / a[i];
      return s;
    }
    case ServiceKind::DiscretePointMixture: {
      double s = 0;
      for (size_t i = 0; i < a.size(); ++i) s += w[i] * a[i];
      return s;
    }
  }
  return 0;
}

double ServiceLaw::moment2() const {
  switch (kind) {
    case ServiceKind::Deterministic: return a[0] * a[0];
    case ServiceKind::Exponential:   return 2.0 / (a[0] * a[0]);
    case ServiceKind::Erlang:        return shape * (shape + 1.0) / (a[0] * a[0]);
    case ServiceKind::HyperExponential: {
      double s = 0;
      for (size_t i = 0; i < a.size(); ++i) s += w[i] * 2.0 / (a[i] * a[i]);
      return s;
    }
    case ServiceKind::DiscretePointMixture: {
      double s = 0;
      for (size_t i = 0; i < a.size(); ++i) s += w[i] * a[i] * a[i];
      return s;
    }
  }
  return 0;
}

double ServiceLaw::lst(double s) const {
  switch (kind) {
    case ServiceKind::Deterministic: return std::exp(-s * a[0]);
    case ServiceKind::Exponential:   return a[0] / (a[0] + s);
    case ServiceKind::Erlang:        return std::pow(a[0] / (a[0] + s), shape);
    case ServiceKind::HyperExponential: {
      double v = 0;
      for (size_t i = 0; i < a.size(); ++i) v += w[i] * a[i] / (a[i] + s);
      return v;
    }
    case ServiceKind::DiscretePointMixture: {
      double v = 0;
      for (size_t i = 0; i < a.size(); ++i) v += w[i] * std::exp(-s * a[i]);
      return v;
    }
  }
  return 0;
}

ServiceLaw ServiceLaw::deterministic(double y) {
  ServiceLaw s;
  s.kind = ServiceKind::Deterministic;
  s.a = {y};
  return s;
}

ServiceLaw ServiceLaw::exponential(double rate) {
  ServiceLaw s;
  s.kind = ServiceKind::Exponential;
  s.a = {rate};
  return s;
}

ServiceLaw ServiceLaw::erlang(int shape, double rate) {
  ServiceLaw s;
  s.kind = ServiceKind::Erlang;
  s.shape = shape;
  s.a = {rate};
  return s;
}

ServiceLaw ServiceLaw::hyper_exponential(std::vector<double> weights, std::vector<double> rates) {
  ServiceLaw s;
  s.kind = ServiceKind::HyperExponential;
  s.w = std::move(weights);
  s.a = std::move(rates);
  return s;
}

ServiceLaw ServiceLaw::point_mixture(std::vector<double> points, std::vector<double> weights) {
  ServiceLaw s;
  s.kind = ServiceKind::DiscretePointMixture;
  s.a = std::move(points);
  s.w = std::move(weights);
  return s;
}

Mat Model::D_total() const {
  Mat D = Mat::Zero(M, M);
  for (const auto& c : classes) D += c.D;
  return D;
}

bool Model::any_raw_pmf() const {
  for (const auto& c : classes)
    if (c.batch.from_raw_pmf) return true;
  return false;
}

namespace {

void validate_service(const ServiceLaw& s, int k) {
  auto fail = [k](const std::string& msg) {
    throw Error(ErrorKind::BadInput, "class " + std::to_string(k) + " service: " + msg);
  };
  switch (s.kind) {
    case ServiceKind::Deterministic:
      if (s.a.size() != 1 || s.a[0] <= 0) fail("point must be positive");
      break;
    case ServiceKind::Exponential:
      if (s.a.size() != 1 || s.a[0] <= 0) fail("rate must be positive");
      break;
    case ServiceKind::Erlang:
      if (s.shape < 1) fail("shape must be >= 1");
      if (s.a.size() != 1 || s.a[0] <= 0) fail("rate must be positive");
      break;
    case ServiceKind::HyperExponential:
    case ServiceKind::DiscretePointMixture: {
      if (s.a.empty() || s.a.size() != s.w.size()) fail("weights/values size mismatch");
      double wsum = 0;
      for (size_t i = 0; i < s.a.size(); ++i) {
        if (s.a[i] <= 0) fail("values must be positive");
        if (s.w[i] < 0) fail("weights must be nonnegative");
        wsum += s.w[i];
      }
      if (std::abs(wsum - 1.0) > kTol) fail("weights must sum to 1");
      break;
    }
  }
}

void validate_batch(const PhBatch& b, int k) {
  int Mk = b.dim();
  auto fail = [k](ErrorKind kind, const std::string& msg) {
    throw Error(kind, "class " + std::to_string(k) + " batch: " + msg);
  };
  if (Mk < 1 || b.alpha.size() != Mk) fail(ErrorKind::BadInput, "alpha/P dimension mismatch");
  double asum = 0;
  for (int i = 0; i < Mk; ++i) {
    if (b.alpha(i) < 0) fail(ErrorKind::BadInput, "alpha has a negative entry at " + std::to_string(i));
    asum += b.alpha(i);
  }
  if (std::abs(asum - 1.0) > kTol) fail(ErrorKind::BadInput, "alpha must sum to 1");
  std::vector<char> exits(static_cast<size_t>(Mk), 0);
  for (int i = 0; i < Mk; ++i) {
    double rs = 0;
    for (int j = 0; j < Mk; ++j) {
      if (b.P(i, j) < 0) fail(ErrorKind::BadInput, "P has a negative entry at " + idx2(i, j));
      rs += b.P(i, j);
    }
    if (rs > 1.0 + kTol)
      fail(ErrorKind::SubstochasticViolation, "row " + std::to_string(i) + " of P sums to more than 1");
    if (rs < 1.0 - kTol) exits[static_cast<size_t>(i)] = 1;
  }
  // every phase must be able to reach absorption, otherwise (I-P)^{-1} blows up
  bool grew = true;
  while (grew) {
    grew = false;
    for (int i = 0; i < Mk; ++i) {
      if (exits[static_cast<size_t>(i)]) continue;
      for (int j = 0; j < Mk; ++j) {
        if (b.P(i, j) > 0 && exits[static_cast<size_t>(j)]) {
          exits[static_cast<size_t>(i)] = 1;
          grew = true;
          break;
        }
      }
    }
  }
  for (int i = 0; i < Mk; ++i)
    if (!exits[static_cast<size_t>(i)])
      fail(ErrorKind::SubstochasticViolation,
           "phase " + std::to_string(i) + " cannot reach absorption (spectral radius 1)");
}

void check_strongly_connected(const Mat& A, int M) {
  auto reach = [&](bool transpose) {
    std::vector<char> seen(static_cast<size_t>(M), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
      int i = stack.back();
      stack.pop_back();
      for (int j = 0; j < M; ++j) {
        double x = transpose ? A(j, i) : A(i, j);
        if (i != j && x > 0 && !seen[static_cast<size_t>(j)]) {
          seen[static_cast<size_t>(j)] = 1;
          stack.push_back(j);
        }
      }
    }
    for (int i = 0; i < M; ++i)
      if (!seen[static_cast<size_t>(i)])
        throw Error(ErrorKind::ReducibleChain,
                    "environment chain is not irreducible; state " + std::to_string(i) +
                        (transpose ? " cannot reach state 0" : " is unreachable from state 0"));
  };
  reach(false);
  reach(true);
}

}  // namespace

void validate(const Model& m) {
  if (m.M < 1) throw Error(ErrorKind::BadInput, "env_dim must be >= 1");
  if (m.C.rows() != m.M || m.C.cols() != m.M)
    throw Error(ErrorKind::BadInput, "C must be env_dim x env_dim");
  if (m.classes.empty()) throw Error(ErrorKind::BadInput, "at least one class required");

  for (int i = 0; i < m.M; ++i) {
    for (int j = 0; j < m.M; ++j) {
      if (i == j && m.C(i, i) > 0)
        throw Error(ErrorKind::NegativeRate, "C" + idx2(i, i) + " must be nonpositive");
      if (i != j && m.C(i, j) < 0)
        throw Error(ErrorKind::NegativeRate, "C" + idx2(i, j) + " must be nonnegative");
    }
  }
  for (int k = 0; k < m.K(); ++k) {
    const Mat& D = m.classes[static_cast<size_t>(k)].D;
    if (D.rows() != m.M || D.cols() != m.M)
      throw Error(ErrorKind::BadInput, "class " + std::to_string(k) + ": D must be env_dim x env_dim");
    bool any_pos = false;
    for (int i = 0; i < m.M; ++i)
      for (int j = 0; j < m.M; ++j) {
        if (D(i, j) < 0)
          throw Error(ErrorKind::NegativeRate,
                      "class " + std::to_string(k) + ": D" + idx2(i, j) + " must be nonnegative");
        if (D(i, j) > 0) any_pos = true;
      }
    if (!any_pos)
      throw Error(ErrorKind::BadInput,
                  "class " + std::to_string(k) + ": D must have at least one positive element");
  }

  Mat gen = m.C + m.D_total();
  for (int i = 0; i < m.M; ++i) {
    double rs = gen.row(i).sum();
    if (std::abs(rs) > kTol)
      throw Error(ErrorKind::GeneratorRowSum,
                  "row " + std::to_string(i) + " of C + sum_k D_k sums to " + std::to_string(rs));
  }

  double theta = 0;
  for (int i = 0; i < m.M; ++i) theta = std::max(theta, -m.C(i, i));
  if (theta <= 0) throw Error(ErrorKind::BadInput, "C has an all-zero diagonal");

  for (int k = 0; k < m.K(); ++k) {
    validate_batch(m.classes[static_cast<size_t>(k)].batch, k);
    validate_service(m.classes[static_cast<size_t>(k)].service, k);
  }

  if (m.M > 1) check_strongly_connected(gen, m.M);
}

RowVec stationary(const Mat& generator) {
  int M = static_cast<int>(generator.rows());
  Mat A = generator.transpose();
  A.row(M - 1).setOnes();
  Vec b = Vec::Zero(M);
  b(M - 1) = 1.0;
  Eigen::FullPivLU<Mat> lu(A);
  if (!lu.isInvertible())
    throw Error(ErrorKind::SingularSystem, "stationary system is singular (reducible generator?)");
  Vec x = lu.solve(b);
  return x.transpose();
}

StationarySummary stationary_summary(const Model& m) {
  StationarySummary s;
  s.pi = stationary(m.C + m.D_total());
  int K = m.K();
  s.lambdaB.resize(static_cast<size_t>(K));
  s.EG.resize(static_cast<size_t>(K));
  s.EG2f.resize(static_cast<size_t>(K));
  s.lambda.resize(static_cast<size_t>(K));
  s.h.resize(static_cast<size_t>(K));
  s.h2.resize(static_cast<size_t>(K));
  s.rho_k.resize(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    const auto& c = m.classes[static_cast<size_t>(k)];
    size_t sk = static_cast<size_t>(k);
    s.lambdaB[sk] = (s.pi * c.D).sum();
    s.EG[sk] = c.batch.mean();
    s.EG2f[sk] = c.batch.factorial2();
    s.lambda[sk] = s.EG[sk] * s.lambdaB[sk];
    s.h[sk] = c.service.mean();
    s.h2[sk] = c.service.moment2();
    s.rho_k[sk] = s.lambda[sk] * s.h[sk];
    s.rho += s.rho_k[sk];
  }
  for (int i = 0; i < m.M; ++i) s.theta = std::max(s.theta, std::abs(m.C(i, i)));
  if (s.rho >= 1.0 - 1e-12) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "rho = %.6g >= 1", s.rho);
    throw Error(ErrorKind::Unstable, buf);
  }
  return s;
}

namespace {

using nlohmann::json;

Mat parse_matrix(const json& j, int rows, int cols, const std::string& name) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows)
    throw Error(ErrorKind::BadInput, name + ": expected " + std::to_string(rows) + " rows");
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<size_t>(i)];
    if (!row.is_array() || static_cast<int>(row.size()) != cols)
      throw Error(ErrorKind::BadInput, name + ": row " + std::to_string(i) + " must have " +
                                           std::to_string(cols) + " entries");
    for (int c = 0; c < cols; ++c) m(i, c) = row[static_cast<size_t>(c)].get<double>();
  }
  return m;
}

std::vector<double> parse_vector(const json& j, const std::string& name) {
  if (!j.is_array() || j.empty()) throw Error(ErrorKind::BadInput, name + ": expected a nonempty array");
  std::vector<double> v;
  v.reserve(j.size());
  for (const auto& x : j) v.push_back(x.get<double>());
  return v;
}

PhBatch parse_batch(const json& j, const std::string& where) {
  PhBatch b;
  if (j.contains("pmf")) {
    // finite pmf canonicalized as a nilpotent chain counting down to absorption
    std::vector<double> g = parse_vector(j["pmf"], where + ".pmf");
    int N = static_cast<int>(g.size());
    b.alpha = RowVec::Zero(N);
    b.P = Mat::Zero(N, N);
    for (int n = 0; n < N; ++n) {
      b.alpha(n) = g[static_cast<size_t>(n)];
      if (n >= 1) b.P(n, n - 1) = 1.0;
    }
    b.from_raw_pmf = true;
    return b;
  }
  if (!j.contains("alpha") || !j.contains("P"))
    throw Error(ErrorKind::BadInput, where + ": batch needs either {alpha, P} or {pmf}");
  std::vector<double> av = parse_vector(j["alpha"], where + ".alpha");
  int Mk = static_cast<int>(av.size());
  b.alpha = RowVec(Mk);
  for (int i = 0; i < Mk; ++i) b.alpha(i) = av[static_cast<size_t>(i)];
  b.P = parse_matrix(j["P"], Mk, Mk, where + ".P");
  return b;
}

ServiceLaw parse_service(const json& j, const std::string& where) {
  if (!j.contains("kind") || !j.contains("params"))
    throw Error(ErrorKind::BadInput, where + ": service needs {kind, params}");
  std::string kind = j["kind"].get<std::string>();
  const json& p = j["params"];
  if (kind == "Deterministic") return ServiceLaw::deterministic(p.at("point").get<double>());
  if (kind == "Exponential") return ServiceLaw::exponential(p.at("rate").get<double>());
  if (kind == "Erlang") return ServiceLaw::erlang(p.at("shape").get<int>(), p.at("rate").get<double>());
  if (kind == "HyperExponential")
    return ServiceLaw::hyper_exponential(parse_vector(p.at("weights"), where + ".weights"),
                                         parse_vector(p.at("rates"), where + ".rates"));
  if (kind == "DiscretePointMixture")
    return ServiceLaw::point_mixture(parse_vector(p.at("points"), where + ".points"),
                                     parse_vector(p.at("weights"), where + ".weights"));
  throw Error(ErrorKind::BadInput, where + ": unknown service kind '" + kind + "'");
}

}  // namespace

Model load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::BadInput, "cannot open model file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    throw Error(ErrorKind::BadInput, path + ": " + e.what());
  }
  try {
    Model m;
    m.M = j.at("env_dim").get<int>();
    if (m.M < 1) throw Error(ErrorKind::BadInput, "env_dim must be >= 1");
    m.C = parse_matrix(j.at("C"), m.M, m.M, "C");
    if (!j.contains("classes") || !j["classes"].is_array() || j["classes"].empty())
      throw Error(ErrorKind::BadInput, "classes must be a nonempty array");
    int k = 0;
    for (const auto& cj : j["classes"]) {
      std::string where = "classes[" + std::to_string(k) + "]";
      ClassSpec c;
      c.D = parse_matrix(cj.at("D"), m.M, m.M, where + ".D");
      c.batch = parse_batch(cj.at("batch"), where);
      c.service = parse_service(cj.at("service"), where);
      m.classes.push_back(std::move(c));
      ++k;
    }
    return m;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::BadInput, path + ": " + e.what());
  }
}

}  // namespace mbmapq
