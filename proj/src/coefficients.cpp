#include "mbmapq/coefficients.hpp"

#include <cmath>

namespace mbmapq {

namespace {

double log_poisson(double ty, int m) {
  double lg = -ty + m * std::log(ty) - std::lgamma(m + 1.0);
  return lg > -745.0 ? std::exp(lg) : 0.0;
}

}  // namespace

GammaSeries::GammaSeries(const ServiceLaw& law, double theta) {
  auto point_branch = [&](double w, double y) {
    Branch b;
    b.w = w;
    b.ty = theta * y;
    b.log_form = b.ty > 700.0;
    b.cur = b.log_form ? log_poisson(b.ty, 0) : std::exp(-b.ty);
    b.ratio = 0;
    return b;
  };
  auto exp_branch = [&](double w, double mu, int shape) {
    Branch b;
    b.w = w;
    b.ratio = theta / (theta + mu);
    b.cur = std::pow(mu / (mu + theta), shape);
    b.ty = 0;
    b.erlang_shape = shape;
    return b;
  };
  switch (law.kind) {
    case ServiceKind::Deterministic:
      branches_.push_back(point_branch(1.0, law.a[0]));
      break;
    case ServiceKind::Exponential:
      branches_.push_back(exp_branch(1.0, law.a[0], 1));
      break;
    case ServiceKind::Erlang:
      branches_.push_back(exp_branch(1.0, law.a[0], law.shape));
      break;
    case ServiceKind::HyperExponential:
      for (size_t i = 0; i < law.a.size(); ++i) branches_.push_back(exp_branch(law.w[i], law.a[i], 1));
      break;
    case ServiceKind::DiscretePointMixture:
      for (size_t i = 0; i < law.a.size(); ++i) branches_.push_back(point_branch(law.w[i], law.a[i]));
      break;
  }
  double v0 = 0;
  for (const auto& b : branches_) v0 += b.w * b.cur;
  vals_.push_back(v0);
  resid_.push_back(1.0 - v0);
}

void GammaSeries::extend_to(int m) {
  while (static_cast<int>(vals_.size()) <= m) {
    int idx = static_cast<int>(vals_.size());
    double v = 0;
    for (auto& b : branches_) {
      if (b.erlang_shape > 0) {
        b.cur *= b.ratio * (idx - 1 + b.erlang_shape) / idx;
      } else if (b.log_form) {
        b.cur = log_poisson(b.ty, idx);
      } else {
        b.cur *= b.ty / idx;
      }
      v += b.w * b.cur;
    }
    vals_.push_back(v);
    resid_.push_back(resid_.back() - v);
  }
}

double GammaSeries::gamma(int m) {
  extend_to(m);
  return vals_[static_cast<size_t>(m)];
}

double GammaSeries::residual_after(int m) {
  extend_to(m);
  return resid_[static_cast<size_t>(m)];
}

DSeries::DSeries(const PhBatch& batch, GammaSeries& gamma) : batch_(batch), gamma_(gamma) {
  int Mk = batch.dim();
  Mat I = Mat::Identity(Mk, Mk);
  double g0 = gamma_.gamma(0);
  phi_ = (I - g0 * batch.P).partialPivLu().inverse();
  aIPphi_ = batch.alpha * (I - batch.P) * phi_;
  Pphi_ = batch.P * phi_;
  RowVec d0 = g0 * aIPphi_;
  d_.push_back(d0);
  dsum_.push_back(d0.sum());
  resid_.push_back(1.0 - dsum_[0]);
}

void DSeries::extend_to(int m) {
  while (static_cast<int>(d_.size()) <= m) {
    int idx = static_cast<int>(d_.size());
    RowVec conv = RowVec::Zero(batch_.dim());
    for (int l = 1; l <= idx; ++l) conv += gamma_.gamma(l) * d_[static_cast<size_t>(idx - l)];
    RowVec dm = gamma_.gamma(idx) * aIPphi_ + conv * Pphi_;
    d_.push_back(dm);
    dsum_.push_back(dm.sum());
    resid_.push_back(resid_.back() - dsum_.back());
  }
}

const RowVec& DSeries::d(int m) {
  extend_to(m);
  return d_[static_cast<size_t>(m)];
}

double DSeries::dsum(int m) {
  extend_to(m);
  return dsum_[static_cast<size_t>(m)];
}

double DSeries::residual_after(int m) {
  extend_to(m);
  return resid_[static_cast<size_t>(m)];
}

CoefficientSet::CoefficientSet(const Model& m, double th) : theta(th) {
  int K = m.K();
  gamma.reserve(static_cast<size_t>(K));
  d.reserve(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) gamma.emplace_back(m.classes[static_cast<size_t>(k)].service, th);
  for (int k = 0; k < K; ++k)
    d.emplace_back(m.classes[static_cast<size_t>(k)].batch, gamma[static_cast<size_t>(k)]);
}

Mat CoefficientSet::D_matrix(const Model& m, int order) {
  Mat out = Mat::Zero(m.M, m.M);
  for (int k = 0; k < m.K(); ++k)
    out += d[static_cast<size_t>(k)].dsum(order) * m.classes[static_cast<size_t>(k)].D;
  return out;
}

}  // namespace mbmapq
