#include "vbks/local_elbo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace vbks {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

double median_pairwise_distance(const Eigen::MatrixXd& X) {
  // A strided subsample keeps this quadratic step cheap on large inputs.
  const Eigen::Index n = X.rows();
  const Eigen::Index stride = std::max<Eigen::Index>(1, n / 256);
  std::vector<double> d;
  for (Eigen::Index i = 0; i < n; i += stride)
    for (Eigen::Index j = i + stride; j < n; j += stride) d.push_back((X.row(i) - X.row(j)).norm());
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid > 0.0 ? *mid : 1.0;
}

struct HeuristicScales {
  double lengthscale;
  double mean_sq_norm;
};

// Walks the tree in leaf order. Each node gets a target prior amplitude; sums
// split it additively, products multiplicatively, by leaf share.
void fill_heuristic(const KernelExpr& e, double target, const HeuristicScales& s,
                    Eigen::VectorXd& theta, Eigen::Index& offset) {
  if (e.is_leaf()) {
    const double ls = std::log(s.lengthscale);
    const double amp = std::log(target);
    switch (e.base_kind()) {
      case BaseKernel::SE:
        theta[offset] = amp;
        theta[offset + 1] = ls;
        break;
      case BaseKernel::PER:
        // The sin^2 form's lengthscale is unitless; the period takes the distance.
        theta[offset] = amp;
        theta[offset + 1] = 0.0;
        theta[offset + 2] = ls;
        break;
      case BaseKernel::LIN:
        // x.x'/l^2 has typical size mean|x|^2 / l^2.
        theta[offset] = 0.5 * (std::log(std::max(s.mean_sq_norm, 1e-12)) - amp);
        break;
      case BaseKernel::RQ:
        theta[offset] = amp;
        theta[offset + 1] = ls;
        theta[offset + 2] = 0.0;
        break;
    }
    offset += static_cast<Eigen::Index>(base_param_count(e.base_kind()));
    return;
  }
  const double total = static_cast<double>(e.num_leaves());
  const double wl = static_cast<double>(e.lhs().num_leaves()) / total;
  const double wr = 1.0 - wl;
  if (e.op() == KernelExpr::Op::Sum) {
    fill_heuristic(e.lhs(), target * wl, s, theta, offset);
    fill_heuristic(e.rhs(), target * wr, s, theta, offset);
  } else {
    fill_heuristic(e.lhs(), std::pow(target, wl), s, theta, offset);
    fill_heuristic(e.rhs(), std::pow(target, wr), s, theta, offset);
  }
}

void lower_outer_add(Eigen::MatrixXd& dC, const Eigen::VectorXd& g, const Eigen::VectorXd& eta) {
  for (Eigen::Index i = 0; i < dC.rows(); ++i)
    for (Eigen::Index j = 0; j <= i; ++j) dC(i, j) += g[i] * eta[j];
}

struct BatchView {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
};

BatchView gather(const MiniBatch& batch, const Dataset& data) {
  if (batch.indices.empty()) throw DataError("mini-batch is empty");
  for (Eigen::Index i : batch.indices) {
    if (i < 0 || i >= data.size()) throw DataError("mini-batch index out of range");
  }
  return {data.X(batch.indices, Eigen::all), data.y(batch.indices)};
}

// With C non-null the value is averaged over u ~ N(u, C C^T) in closed form.
TermGradient loglik_impl(const KernelExpr& expr, const Eigen::VectorXd& theta,
                         const Eigen::VectorXd& u, const Eigen::MatrixXd* C,
                         const InducingSet& inducing, const BatchView& b, bool want_grad,
                         Eigen::MatrixXd* d_C = nullptr) {
  if (u.size() != inducing.size()) throw DataError("inducing value length must equal |U|");
  const KernelEvaluator k(expr, theta);
  const auto noise_slot = static_cast<Eigen::Index>(expr.noise_index());
  const double sigma2 = std::exp(theta[noise_slot]);
  const Eigen::Index B = b.X.rows();
  const Eigen::Index M = inducing.size();

  // Derivatives are only needed on the gradient path; evaluate them alongside the values.
  GramGrad uu, bu;
  if (want_grad) {
    uu = gram_with_grad(k, inducing.Z, inducing.Z);
    bu = gram_with_grad(k, b.X, inducing.Z);
  } else {
    uu.K = gram_matrix(k, inducing.Z, inducing.Z);
    bu.K = gram_matrix(k, b.X, inducing.Z);
  }
  const CholeskyFactor chol = chol_jitter(uu.K);
  const Eigen::MatrixXd& Kbu = bu.K;
  const Eigen::VectorXd kdiag = gram_diagonal(k, b.X);
  // Values go through half solves L^-1, which keeps roundoff near sqrt(cond) rather than cond.
  const auto Lt = chol.L.triangularView<Eigen::Lower>().transpose();
  const Eigen::MatrixXd Vt = chol.solve_lower(Eigen::MatrixXd(Kbu.transpose()));  // L^-1 K_Ub
  const Eigen::VectorXd Liu = chol.solve_lower(Eigen::MatrixXd(u));
  const Eigen::MatrixXd Wt = Lt.solve(Vt);  // A^-1 K_Ub
  const Eigen::VectorXd v = Lt.solve(Liu);
  const Eigen::VectorXd e = b.y - Vt.transpose() * Liu;
  const double trace = kdiag.sum() - Vt.squaredNorm();
  // A = K_bU K_UU^-1 = Wt^T; the spread of u adds tr(A S A^T) = |A C|^2.
  Eigen::MatrixXd AC;
  if (C) AC = Vt.transpose() * chol.solve_lower(Eigen::MatrixXd(C->triangularView<Eigen::Lower>()));
  const double f = e.squaredNorm() + trace + (C ? AC.squaredNorm() : 0.0);

  TermGradient out;
  out.value = -0.5 * static_cast<double>(B) * (kLog2Pi + std::log(sigma2)) - f / (2.0 * sigma2);
  if (!want_grad) return out;

  out.d_u = Wt * e / sigma2;
  // f depends on theta through K_bU, K_UU and diag K_bb.
  Eigen::MatrixXd G_bu = -2.0 * e * v.transpose() - 2.0 * Wt.transpose();
  const Eigen::VectorXd We = Wt * e;
  Eigen::MatrixXd G_a = 2.0 * We * v.transpose() + Wt * Wt.transpose();
  if (C) {
    if (d_C) *d_C = -(Wt * AC) / sigma2;
    // d|AC|^2 = 2 tr(P dK_bU) - 2 tr(P A dK_UU) with P = K_UU^-1 S A^T.
    const Eigen::MatrixXd Pt = chol.solve(Eigen::MatrixXd(C->triangularView<Eigen::Lower>() * AC.transpose()))
                                   .transpose();
    G_bu += 2.0 * Pt;
    G_a -= 2.0 * Wt * Pt;
  }
  const std::size_t P = expr.num_hyper();
  const Eigen::VectorXd ones_b = Eigen::VectorXd::Ones(B);
  Eigen::VectorXd df =
      bu.contract(G_bu, P) + uu.contract(G_a, P) + diag_grad_contract(k, P, b.X, ones_b);
  if (chol.relative_jitter > 0.0) {
    // The jitter scales with mean(diag K_UU), so it carries theta dependence too.
    const Eigen::VectorXd ones_m = Eigen::VectorXd::Ones(M);
    df += chol.relative_jitter / static_cast<double>(M) * G_a.trace() *
          diag_grad_contract(k, P, inducing.Z, ones_m);
  }
  out.d_theta = -df / (2.0 * sigma2);
  out.d_theta[noise_slot] = -0.5 * static_cast<double>(B) + f / (2.0 * sigma2);
  return out;
}

TermGradient log_prior_impl(const KernelExpr& expr, const Eigen::VectorXd& theta,
                            const InducingSet& inducing, const Eigen::VectorXd& u,
                            const Eigen::MatrixXd* C, bool want_grad,
                            Eigen::MatrixXd* d_C = nullptr) {
  if (u.size() != inducing.size()) throw DataError("inducing value length must equal |U|");
  const KernelEvaluator k(expr, theta);
  const Eigen::Index M = inducing.size();
  GramGrad uu;
  if (want_grad) {
    uu = gram_with_grad(k, inducing.Z, inducing.Z);
  } else {
    uu.K = gram_matrix(k, inducing.Z, inducing.Z);
  }
  const CholeskyFactor chol = chol_jitter(uu.K);
  const Eigen::VectorXd v = chol.solve(u);

  // K_UU^-1 C; the spread of u adds -tr(K_UU^-1 S) / 2.
  Eigen::MatrixXd KiC;
  double spread = 0.0;
  if (C) {
    const Eigen::MatrixXd Cl = C->triangularView<Eigen::Lower>();
    spread = chol.solve_lower(Cl).squaredNorm();
    if (want_grad) KiC = chol.solve(Cl);
  }

  TermGradient out;
  out.value = -0.5 * static_cast<double>(M) * kLog2Pi - 0.5 * chol.log_det() - 0.5 * u.dot(v) - 0.5 * spread;
  if (!want_grad) return out;

  out.d_u = -v;
  const Eigen::MatrixXd Ainv = chol.solve(Eigen::MatrixXd(Eigen::MatrixXd::Identity(M, M)));
  Eigen::MatrixXd G_a = -0.5 * Ainv + 0.5 * v * v.transpose();
  if (C) {
    if (d_C) *d_C = -KiC;
    G_a += 0.5 * KiC * KiC.transpose();
  }
  const std::size_t P = expr.num_hyper();
  out.d_theta = uu.contract(G_a, P);
  if (chol.relative_jitter > 0.0) {
    const Eigen::VectorXd ones_m = Eigen::VectorXd::Ones(M);
    out.d_theta += chol.relative_jitter / static_cast<double>(M) * G_a.trace() *
                   diag_grad_contract(k, P, inducing.Z, ones_m);
  }
  return out;
}

struct BasisMap {
  Eigen::MatrixXd L;
  double chol_rung = 0.0;
  Eigen::VectorXd m_v;
  Eigen::MatrixXd C_v;  // empty for a point-estimate q(u)
};

BasisMap basis_map(const SgprState& s) {
  if (s.q_u.dim() != s.inducing.size()) throw DataError("q(u) dimension must equal |U|");
  const CholeskyFactor chol =
      chol_jitter(gram_matrix(s.kernel, s.q_theta.mean(), s.inducing.Z, s.inducing.Z));
  BasisMap b;
  const auto L = chol.L.triangularView<Eigen::Lower>();
  b.L = chol.L;
  b.chol_rung = chol.relative_jitter;
  b.m_v = L.solve(s.q_u.mean());
  if (s.q_u.is_full()) b.C_v = L.solve(s.q_u.scale());
  return b;
}

// Gradient with respect to theta of a function of L = chol(K_UU(theta) + jitter),
// given its gradient L_bar with respect to the lower triangle of L.
Eigen::VectorXd basis_theta_grad(const SgprState& s, const Eigen::MatrixXd& L, double rung,
                                 const Eigen::MatrixXd& L_bar) {
  const auto Ll = L.triangularView<Eigen::Lower>();
  // dL = L Phi(L^-1 dK L^-T), Phi = lower triangle with the diagonal halved.
  Eigen::MatrixXd A = (L.transpose() * Eigen::MatrixXd(L_bar.triangularView<Eigen::Lower>()))
                          .triangularView<Eigen::Lower>();
  A.diagonal() *= 0.5;
  const Eigen::MatrixXd B = 0.5 * (A + A.transpose());
  const Eigen::MatrixXd Y = Ll.transpose().solve(B);                          // L^-T B
  const Eigen::MatrixXd G = Ll.transpose().solve(Eigen::MatrixXd(Y.transpose())).transpose();  // L^-T B L^-1
  const KernelEvaluator k(s.kernel, s.q_theta.mean());
  const std::size_t P = s.kernel.num_hyper();
  const GramGrad uu = gram_with_grad(k, s.inducing.Z, s.inducing.Z);
  Eigen::VectorXd out = uu.contract(G, P);
  if (rung > 0.0) {
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(s.inducing.size());
    out += rung / static_cast<double>(s.inducing.size()) * G.trace() *
           diag_grad_contract(k, P, s.inducing.Z, ones);
  }
  return out;
}

void check_draws(const SgprState& s, const EtaDraws& d) {
  if (d.lik_theta.empty() || d.ce_theta.empty()) {
    throw std::invalid_argument("need at least one likelihood draw and one cross-entropy draw");
  }
  auto dims_ok = [](const std::vector<Eigen::VectorXd>& v, Eigen::Index n) {
    return std::all_of(v.begin(), v.end(), [n](const Eigen::VectorXd& x) { return x.size() == n; });
  };
  if (!dims_ok(d.lik_theta, s.q_theta.dim()) || !dims_ok(d.ce_theta, s.q_theta.dim())) {
    throw std::invalid_argument("eta draw dimension mismatch");
  }
}

ElboGradient assemble(const SgprState& s, const MiniBatch& batch, const Dataset& data,
                      const EtaDraws& draws, bool want_grad) {
  check_draws(s, draws);
  const BatchView b = gather(batch, data);
  const Eigen::Index nu = s.q_u.dim();
  const Eigen::Index nt = s.q_theta.dim();
  Eigen::MatrixXd dCu = Eigen::MatrixXd::Zero(nu, nu), dCt = Eigen::MatrixXd::Zero(nt, nt);
  Eigen::VectorXd dmu = Eigen::VectorXd::Zero(nu), dmt = Eigen::VectorXd::Zero(nt);
  double value = 0.0;

  auto draw = [&](const Eigen::VectorXd& eta) {
    Eigen::VectorXd x = s.q_theta.sample(eta);
    if (!x.allFinite()) throw NumericalError("non-finite variational sample");
    return x;
  };
  // Both terms are quadratic in u, so the average over q(u) is exact; only
  // theta is sampled.
  const Eigen::MatrixXd* C = s.q_u.is_full() ? &s.q_u.scale() : nullptr;
  Eigen::MatrixXd dC_term;
  auto accumulate = [&](const TermGradient& t, double w, const Eigen::VectorXd& et) {
    value += w * t.value;
    if (!want_grad) return;
    const Eigen::VectorXd gt = w * t.d_theta;
    dmu += w * t.d_u;
    dmt += gt;
    if (C) dCu += w * dC_term;
    if (s.q_theta.is_full()) lower_outer_add(dCt, gt, et);
  };

  const double wl = batch.scale / static_cast<double>(draws.lik_theta.size());
  for (const Eigen::VectorXd& eta : draws.lik_theta) {
    const Eigen::VectorXd th = draw(eta);
    accumulate(loglik_impl(s.kernel, th, s.q_u.mean(), C, s.inducing, b, want_grad, &dC_term), wl, eta);
  }
  const double wc = 1.0 / static_cast<double>(draws.ce_theta.size());
  for (const Eigen::VectorXd& eta : draws.ce_theta) {
    const Eigen::VectorXd th = draw(eta);
    accumulate(log_prior_impl(s.kernel, th, s.inducing, s.q_u.mean(), C, want_grad, &dC_term), wc, eta);
  }

  // q(u) in point mode is a MAP estimate of u; there is no entropy to add.
  if (s.q_u.is_full()) {
    value += entropy(s.q_u);
    if (want_grad) dCu += entropy_grad(s.q_u);
  }
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(nt);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(nt, nt);
  if (s.q_theta.is_full()) {
    value -= kl_gaussian(s.q_theta, zero, eye);
    if (want_grad) {
      const ScaleMeanGradient kg = kl_gaussian_grad(s.q_theta, zero, eye);
      dCt -= kg.dC;
      dmt -= kg.dm;
    }
  } else {
    const Eigen::VectorXd& m = s.q_theta.mean();
    value += -0.5 * static_cast<double>(nt) * kLog2Pi - 0.5 * m.squaredNorm();
    if (want_grad) dmt -= m;
  }

  ElboGradient out;
  out.value = value;
  if (want_grad) {
    out.gradient.resize(s.num_params());
    // q(u) is optimized as m_u = L m_v, C_u = L C_v with L = chol(K_UU(m_theta)),
    // so m_theta also moves q(u) through L.
    const Eigen::MatrixXd dCl = dCu.triangularView<Eigen::Lower>();
    const BasisMap basis = basis_map(s);
    const Eigen::MatrixXd Lt = basis.L.transpose();
    const Eigen::MatrixXd dCv = Lt * dCl;
    Eigen::MatrixXd L_bar = dmu * basis.m_v.transpose();
    if (s.q_u.is_full()) L_bar += dCl * basis.C_v.transpose();
    dmt += basis_theta_grad(s, basis.L, basis.chol_rung, L_bar);
    const GaussianVariational qv = s.q_u.is_full() ? GaussianVariational::full(basis.m_v, basis.C_v)
                                                    : GaussianVariational::point(basis.m_v);
    out.gradient << qv.pack_gradient(dCv, Lt * dmu), s.q_theta.pack_gradient(dCt, dmt);
  }
  return out;
}

}  // namespace

Eigen::MatrixXd SgprState::u_basis() const {
  return chol_jitter(gram_matrix(kernel, q_theta.mean(), inducing.Z, inducing.Z)).L;
}

Eigen::VectorXd SgprState::params() const {
  const BasisMap basis = basis_map(*this);
  const GaussianVariational qv = q_u.is_full() ? GaussianVariational::full(basis.m_v, basis.C_v)
                                               : GaussianVariational::point(basis.m_v);
  Eigen::VectorXd phi(num_params());
  phi << qv.params(), q_theta.params();
  return phi;
}

void SgprState::set_params(const Eigen::VectorXd& phi) {
  if (phi.size() != num_params()) throw std::invalid_argument("SgprState: parameter length mismatch");
  GaussianVariational qt = q_theta;
  qt.set_params(phi.tail(q_theta.num_params()));
  // The basis follows the new hyperparameter mean.
  const Eigen::MatrixXd L = chol_jitter(gram_matrix(kernel, qt.mean(), inducing.Z, inducing.Z)).L;
  GaussianVariational qv = q_u.is_full() ? GaussianVariational::full(q_u.mean(), q_u.scale())
                                         : GaussianVariational::point(q_u.mean());
  qv.set_params(phi.head(q_u.num_params()));
  const auto Ll = L.triangularView<Eigen::Lower>();
  Eigen::VectorXd m = Ll * qv.mean();
  GaussianVariational qu = q_u.is_full() ? GaussianVariational::full(std::move(m), Ll * qv.scale())
                                         : GaussianVariational::point(std::move(m));
  if (!qu.mean().allFinite() || !qu.scale().allFinite()) throw NumericalError("non-finite q(u) after update");
  q_u = std::move(qu);
  q_theta = std::move(qt);
}

MiniBatch sample_batch(Eigen::Index n_data, Eigen::Index batch_size, std::mt19937_64& rng) {
  if (n_data < 1) throw DataError("cannot sample a batch from an empty dataset");
  if (batch_size < 1) throw DataError("batch size must be positive");
  std::uniform_int_distribution<Eigen::Index> pick(0, n_data - 1);
  MiniBatch b;
  b.indices.resize(static_cast<std::size_t>(batch_size));
  for (auto& i : b.indices) i = pick(rng);
  b.scale = static_cast<double>(n_data) / static_cast<double>(batch_size);
  return b;
}

MiniBatch full_batch(Eigen::Index n_data) {
  if (n_data < 1) throw DataError("cannot build a batch from an empty dataset");
  MiniBatch b;
  b.indices.resize(static_cast<std::size_t>(n_data));
  for (Eigen::Index i = 0; i < n_data; ++i) b.indices[static_cast<std::size_t>(i)] = i;
  b.scale = 1.0;
  return b;
}

Eigen::VectorXd heuristic_theta(const KernelExpr& kernel, const Dataset& data) {
  data.validate();
  const double mean = data.y.mean();
  const double var = std::max((data.y.array() - mean).square().mean(), 1e-12);
  HeuristicScales s{median_pairwise_distance(data.X), data.X.rowwise().squaredNorm().mean()};
  Eigen::VectorXd theta(static_cast<Eigen::Index>(kernel.num_hyper()));
  Eigen::Index offset = 0;
  fill_heuristic(kernel, var, s, theta, offset);
  theta[static_cast<Eigen::Index>(kernel.noise_index())] = std::log(0.1 * var);
  return theta;
}

SgprState init_state(const KernelExpr& kernel, const Dataset& data, InducingSet inducing,
                     ThetaMode mode, std::uint64_t seed) {
  if (inducing.size() < 1) throw DataError("inducing set is empty");
  if (inducing.Z.cols() != data.dim()) throw DataError("inducing inputs have the wrong dimension");
  SgprState s;
  s.kernel = kernel;
  const Eigen::Index m = inducing.size();
  s.inducing = std::move(inducing);
  Eigen::VectorXd theta = heuristic_theta(kernel, data);
  const Eigen::Index p = theta.size();
  s.q_theta = mode == ThetaMode::Full
                  ? GaussianVariational::full(std::move(theta), 0.1 * Eigen::MatrixXd::Identity(p, p))
                  : GaussianVariational::point(std::move(theta));
  try {
    s.q_u = GaussianVariational::full(Eigen::VectorXd::Zero(m), 0.1 * s.u_basis());
  } catch (const std::exception&) {
    // Non-finite heuristics or an unfactorizable K_UU. Training will abort on
    // this kernel with a proper reason.
    s.q_u = GaussianVariational::full(Eigen::VectorXd::Zero(m), 0.1 * Eigen::MatrixXd::Identity(m, m));
  }
  s.moments.reset(s.num_params());
  s.seed = seed;
  return s;
}

EtaDraws draw_etas(const SgprState& state, int lik_draws, int ce_draws, std::mt19937_64& rng) {
  if (lik_draws < 1 || ce_draws < 1) throw std::invalid_argument("draw counts must be positive");
  EtaDraws d;
  for (int i = 0; i < lik_draws; ++i) d.lik_theta.push_back(standard_normal(state.q_theta.dim(), rng));
  for (int i = 0; i < ce_draws; ++i) d.ce_theta.push_back(standard_normal(state.q_theta.dim(), rng));
  return d;
}

double expected_loglik(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                       const Eigen::VectorXd& u, const InducingSet& inducing,
                       const MiniBatch& batch, const Dataset& data) {
  return loglik_impl(expr, raw_theta, u, nullptr, inducing, gather(batch, data), false).value;
}

TermGradient expected_loglik_grad(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                                  const Eigen::VectorXd& u, const InducingSet& inducing,
                                  const MiniBatch& batch, const Dataset& data) {
  return loglik_impl(expr, raw_theta, u, nullptr, inducing, gather(batch, data), true);
}

TermGradient log_prior_u_grad(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                              const InducingSet& inducing, const Eigen::VectorXd& u) {
  return log_prior_impl(expr, raw_theta, inducing, u, nullptr, true);
}

namespace {

const Eigen::MatrixXd* scale_of(const GaussianVariational& q_u, const InducingSet& inducing) {
  if (q_u.dim() != inducing.size()) throw DataError("q(u) dimension must equal |U|");
  return q_u.is_full() ? &q_u.scale() : nullptr;
}

QuTermGradient with_scale(TermGradient t, Eigen::MatrixXd dC, const GaussianVariational& q_u) {
  QuTermGradient out;
  out.value = t.value;
  out.d_m = std::move(t.d_u);
  out.d_theta = std::move(t.d_theta);
  out.d_C = q_u.is_full() ? Eigen::MatrixXd(dC.triangularView<Eigen::Lower>())
                          : Eigen::MatrixXd::Zero(q_u.dim(), q_u.dim());
  return out;
}

}  // namespace

QuTermGradient expected_loglik_over_q(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                                      const GaussianVariational& q_u, const InducingSet& inducing,
                                      const MiniBatch& batch, const Dataset& data) {
  const Eigen::MatrixXd* C = scale_of(q_u, inducing);
  Eigen::MatrixXd dC;
  TermGradient t = loglik_impl(expr, raw_theta, q_u.mean(), C, inducing, gather(batch, data), true, &dC);
  return with_scale(std::move(t), std::move(dC), q_u);
}

QuTermGradient log_prior_over_q(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                                const GaussianVariational& q_u, const InducingSet& inducing) {
  const Eigen::MatrixXd* C = scale_of(q_u, inducing);
  Eigen::MatrixXd dC;
  TermGradient t = log_prior_impl(expr, raw_theta, inducing, q_u.mean(), C, true, &dC);
  return with_scale(std::move(t), std::move(dC), q_u);
}

double local_elbo_estimate(const SgprState& state, const MiniBatch& batch, const Dataset& data,
                           const EtaDraws& draws) {
  return assemble(state, batch, data, draws, false).value;
}

ElboGradient local_gradient(const SgprState& state, const MiniBatch& batch, const Dataset& data,
                            const EtaDraws& draws) {
  return assemble(state, batch, data, draws, true);
}

std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

SgprState optimize_local(SgprState state, const Dataset& data, const LocalConfig& config,
                         const std::function<void(const TraceRow&)>& on_eval) {
  data.validate();
  if (!config.full_batch && config.batch_size < 1) throw DataError("batch size must be positive");
  if (config.smoothing < 0.0 || config.smoothing >= 1.0) {
    throw std::invalid_argument("smoothing must be in [0, 1)");
  }
  const Eigen::Index n = data.size();
  const Eigen::Index eval_size = config.eval_batch_size > 0 ? config.eval_batch_size : config.batch_size;
  if (!(config.final_lr_ratio > 0.0)) throw std::invalid_argument("final_lr_ratio must be positive");
  const std::uint64_t stop =
      config.pause_at > 0 ? std::min(config.pause_at, config.steps) : config.steps;
  AdamOptions adam = config.adam;

  while (state.step < stop) {
    std::mt19937_64 rng = step_rng(state.seed, state.step, 0);
    const MiniBatch batch = config.full_batch ? full_batch(n) : sample_batch(n, config.batch_size, rng);
    const EtaDraws draws = draw_etas(state, config.lik_draws, config.ce_draws, rng);
    if (config.final_lr_ratio != 1.0) {
      const double progress = static_cast<double>(state.step) / static_cast<double>(config.steps);
      adam.learning_rate = config.adam.learning_rate * std::pow(config.final_lr_ratio, progress);
    }
    ElboGradient g;
    bool ok = true;
    const AdamMoments saved = state.moments;
    try {
      g = local_gradient(state, batch, data, draws);
      ok = std::isfinite(g.value) && g.gradient.allFinite();
      if (ok) {
        // Rebuilt from the state every step so a resumed run replays bit for bit.
        Eigen::VectorXd phi = state.params();
        adam_ascend(phi, g.gradient, state.moments, adam);
        state.set_params(phi);
      }
    } catch (const NumericalError&) {
      ok = false;
    } catch (const KernelError&) {
      ok = false;  // hyperparameters ran off to infinity
    }
    ++state.step;
    if (!ok) {
      state.moments = saved;
      if (++state.rejected_in_row >= 3) {
        std::ostringstream os;
        os << "training of " << state.kernel.name() << " aborted at step " << state.step
           << ": three consecutive non-finite or unfactorizable steps";
        throw TrainingAborted(os.str());
      }
      continue;
    }
    state.rejected_in_row = 0;

    if (config.eval_every > 0 && state.step % static_cast<std::uint64_t>(config.eval_every) == 0) {
      std::mt19937_64 erng = step_rng(state.seed, state.step, 1);
      const MiniBatch eb = config.full_batch ? full_batch(n) : sample_batch(n, eval_size, erng);
      const EtaDraws ed = draw_etas(state, config.lik_draws, config.ce_draws, erng);
      double value = std::numeric_limits<double>::quiet_NaN();
      try {
        value = local_elbo_estimate(state, eb, data, ed);
      } catch (const NumericalError&) {
      }
      if (std::isfinite(value)) {
        ++state.n_evals;
        state.elbo_ema = config.smoothing * state.elbo_ema + (1.0 - config.smoothing) * value;
        state.elbo_star =
            state.elbo_ema / (1.0 - std::pow(config.smoothing, static_cast<double>(state.n_evals)));
      }
      if (on_eval) on_eval({state.step, value, state.elbo_star, g.gradient.norm()});
    }
  }
  return state;
}

}  // namespace vbks
