#ifndef VBKS_TEST_ORACLES_HPP
#define VBKS_TEST_ORACLES_HPP

// Reference implementations used only by tests. They trade speed for
// obviousness: explicit inverses, direct sampling, brute-force enumeration.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <vbks/gp_core.hpp>
#include <vbks/kernel.hpp>

namespace oracle {

struct RunningStats {
  long n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
  double std_error() const { return std::sqrt(variance() / static_cast<double>(n)); }
};

inline Eigen::VectorXd randn(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = nd(rng);
  return v;
}

inline Eigen::MatrixXd uniform_points(Eigen::Index n, Eigen::Index d, double lo, double hi,
                                      std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::MatrixXd X(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) X(i, j) = u(rng);
  return X;
}

/// Random lower-triangular matrix with diagonal in [0.3, 1.3].
inline Eigen::MatrixXd random_lower(Eigen::Index n, std::mt19937_64& rng, double off = 0.3) {
  std::uniform_real_distribution<double> u(-off, off), d(0.3, 1.3);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) L(i, j) = u(rng);
    L(i, i) = d(rng);
  }
  return L;
}

/// Central differences of a scalar function.
inline Eigen::VectorXd finite_diff(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h = 1e-4) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

/// Fourth-order central differences. Truncation error is O(h^4), so h can be
/// large enough that roundoff in f stays negligible.
inline Eigen::VectorXd finite_diff4(const std::function<double(const Eigen::VectorXd&)>& f,
                                    const Eigen::VectorXd& x, double h = 1e-3) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    auto at = [&](double t) {
      Eigen::VectorXd y = x;
      y[i] += t;
      return f(y);
    };
    g[i] = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
  }
  return g;
}

/// |a - b| <= rel * max(|a|, |b|) + abs_floor, elementwise.
inline bool close_rel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double rel, double abs_floor,
                      std::string* why = nullptr) {
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double tol = rel * std::max(std::abs(a[i]), std::abs(b[i])) + abs_floor;
    if (!(std::abs(a[i] - b[i]) <= tol)) {
      if (why) *why = "coord " + std::to_string(i) + ": " + std::to_string(a[i]) + " vs " + std::to_string(b[i]);
      return false;
    }
  }
  return true;
}

/// Dense kernel matrix by direct loops over eval_kernel.
inline Eigen::MatrixXd gram(const vbks::KernelExpr& e, const Eigen::VectorXd& theta, const Eigen::MatrixXd& A,
                            const Eigen::MatrixXd& B) {
  Eigen::MatrixXd K(A.rows(), B.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < B.rows(); ++j) K(i, j) = vbks::eval_kernel(e, theta, A.row(i), B.row(j));
  return K;
}

/// K plus the first diagonal jitter in {0, 1e-8, 1e-6, 1e-4} * mean(diag K) that
/// makes it Cholesky-factorizable. Rank-deficient kernels (LIN in one
/// dimension) always need some.
inline Eigen::MatrixXd jittered(const Eigen::MatrixXd& K) {
  const double scale = K.diagonal().mean();
  for (double r : {0.0, 1e-8, 1e-6, 1e-4}) {
    Eigen::MatrixXd J = K;
    J.diagonal().array() += r * scale;
    if (Eigen::LLT<Eigen::MatrixXd>(J).info() == Eigen::Success) return J;
  }
  return K;
}

inline double noise_var(const vbks::KernelExpr& e, const Eigen::VectorXd& theta) {
  return std::exp(theta[static_cast<Eigen::Index>(e.noise_index())]);
}

/// Full GP posterior via an explicit inverse of K + s2 I.
inline vbks::BatchMoments gp_posterior_inverse(const vbks::KernelExpr& e, const Eigen::VectorXd& theta,
                                               const vbks::Dataset& d, const Eigen::MatrixXd& Xs) {
  Eigen::MatrixXd K = gram(e, theta, d.X, d.X);
  K.diagonal().array() += noise_var(e, theta);
  const Eigen::MatrixXd Kinv = K.fullPivLu().inverse();
  const Eigen::MatrixXd Ksx = gram(e, theta, Xs, d.X);
  vbks::BatchMoments out;
  out.mean = Ksx * Kinv * d.y;
  out.variance.resize(Xs.rows());
  for (Eigen::Index i = 0; i < Xs.rows(); ++i) {
    out.variance[i] = vbks::eval_kernel(e, theta, Xs.row(i), Xs.row(i)) -
                      (Ksx.row(i) * Kinv * Ksx.row(i).transpose())(0, 0);
  }
  return out;
}

/// Conditional of f_X given u from the joint prior over (f_X, u), dense.
inline vbks::GaussianConditional joint_condition(const vbks::KernelExpr& e, const Eigen::VectorXd& theta,
                                                 const Eigen::MatrixXd& Z, const Eigen::VectorXd& u,
                                                 const Eigen::MatrixXd& X) {
  const Eigen::MatrixXd Kuu = gram(e, theta, Z, Z);
  const Eigen::MatrixXd Kxu = gram(e, theta, X, Z);
  const Eigen::MatrixXd Kxx = gram(e, theta, X, X);
  const Eigen::MatrixXd Kinv = Kuu.fullPivLu().inverse();
  return {Kxu * Kinv * u, Kxx - Kxu * Kinv * Kxu.transpose()};
}

/// E_{f ~ N(mu, diag v)}[sum log N(y | f, s2)], term by term.
inline double gaussian_expected_loglik(const Eigen::VectorXd& y, const Eigen::VectorXd& mu,
                                       const Eigen::VectorXd& var, double s2) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    s += -0.5 * std::log(2.0 * std::numbers::pi * s2) - ((y[i] - mu[i]) * (y[i] - mu[i]) + var[i]) / (2.0 * s2);
  }
  return s;
}

inline double log_mvn(const Eigen::VectorXd& x, const Eigen::VectorXd& m, const Eigen::MatrixXd& S) {
  const Eigen::Index n = x.size();
  const Eigen::VectorXd r = x - m;
  return -0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi) + std::log(S.determinant()) +
                 r.dot(S.fullPivLu().solve(r)));
}

// --- grammar brute force -------------------------------------------------

/// Canonical form built from scratch: flatten same-op chains, sort the
/// operand strings, join. Independent of the library's canonicalizer.
struct Tree {
  char op = 0;  // 0 leaf, '+' sum, '*' product
  std::string leaf;
  std::vector<Tree> kids;
};

inline std::string canon(const Tree& t) {
  if (t.op == 0) return t.leaf;
  std::vector<std::string> parts;
  std::function<void(const Tree&)> collect = [&](const Tree& n) {
    if (n.op == t.op) {
      for (const auto& k : n.kids) collect(k);
    } else {
      std::string s = canon(n);
      parts.push_back(n.op == '+' && t.op == '*' ? "(" + s + ")" : s);
    }
  };
  collect(t);
  std::sort(parts.begin(), parts.end());
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? std::string(1, t.op) : "") + parts[i];
  return out;
}

/// Every binary tree with 1..max_leaves leaves over the bases and both
/// operators, as a set of canonical strings.
inline std::set<std::string> brute_force_kernels(const std::vector<std::string>& bases, int max_leaves) {
  std::vector<std::vector<Tree>> by_size(static_cast<std::size_t>(max_leaves) + 1);
  for (const auto& b : bases) by_size[1].push_back({0, b, {}});
  for (int n = 2; n <= max_leaves; ++n) {
    for (int l = 1; l < n; ++l) {
      for (const auto& a : by_size[static_cast<std::size_t>(l)])
        for (const auto& b : by_size[static_cast<std::size_t>(n - l)])
          for (char op : {'+', '*'}) by_size[static_cast<std::size_t>(n)].push_back({op, "", {a, b}});
    }
  }
  std::set<std::string> out;
  for (const auto& level : by_size)
    for (const auto& t : level) out.insert(canon(t));
  return out;
}

// --- optimization and sparse-GP bounds ----------------------------------

/// Plain Nelder-Mead maximizer with restarts from the best vertex.
inline Eigen::VectorXd nelder_mead_max(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x,
                                       int iterations = 2000, double step = 0.5, int restarts = 4) {
  const Eigen::Index n = x.size();
  auto neg = [&](const Eigen::VectorXd& v) {
    const double r = f(v);
    return std::isfinite(r) ? -r : 1e300;
  };
  for (int rep = 0; rep < restarts; ++rep) {
    std::vector<Eigen::VectorXd> s(static_cast<std::size_t>(n + 1), x);
    std::vector<double> fv(static_cast<std::size_t>(n + 1));
    for (Eigen::Index i = 0; i < n; ++i) s[static_cast<std::size_t>(i + 1)][i] += step;
    for (std::size_t i = 0; i < s.size(); ++i) fv[i] = neg(s[i]);
    for (int it = 0; it < iterations; ++it) {
      std::vector<std::size_t> o(s.size());
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = i;
      std::sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
      std::vector<Eigen::VectorXd> s2;
      std::vector<double> f2;
      for (std::size_t i : o) {
        s2.push_back(s[i]);
        f2.push_back(fv[i]);
      }
      s.swap(s2);
      fv.swap(f2);
      const std::size_t w = s.size() - 1;
      Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
      for (std::size_t i = 0; i < w; ++i) c += s[i];
      c /= static_cast<double>(n);
      const Eigen::VectorXd xr = 2.0 * c - s[w];
      const double fr = neg(xr);
      if (fr < fv[0]) {
        const Eigen::VectorXd xe = 3.0 * c - 2.0 * s[w];
        const double fe = neg(xe);
        if (fe < fr) {
          s[w] = xe;
          fv[w] = fe;
        } else {
          s[w] = xr;
          fv[w] = fr;
        }
      } else if (fr < fv[w - 1]) {
        s[w] = xr;
        fv[w] = fr;
      } else {
        const Eigen::VectorXd xc = c + 0.5 * (s[w] - c);
        const double fc = neg(xc);
        if (fc < fv[w]) {
          s[w] = xc;
          fv[w] = fc;
        } else {
          for (std::size_t i = 1; i < s.size(); ++i) {
            s[i] = s[0] + 0.5 * (s[i] - s[0]);
            fv[i] = neg(s[i]);
          }
        }
      }
    }
    x = s[static_cast<std::size_t>(std::min_element(fv.begin(), fv.end()) - fv.begin())];
    step *= 0.3;
  }
  return x;
}

/// Collapsed sparse bound log N(y; 0, Q + s2 I) - tr(K - Q) / (2 s2), with
/// Q = K_XU K_UU^-1 K_UX, by dense linear algebra.
inline double collapsed_bound(const vbks::KernelExpr& e, const Eigen::VectorXd& theta, const Eigen::MatrixXd& Z,
                              const vbks::Dataset& d) {
  const double s2 = noise_var(e, theta);
  const Eigen::MatrixXd Kuu = gram(e, theta, Z, Z);
  const Eigen::MatrixXd Kxu = gram(e, theta, d.X, Z);
  const Eigen::MatrixXd Q = Kxu * Kuu.fullPivLu().inverse() * Kxu.transpose();
  Eigen::MatrixXd C = Q;
  C.diagonal().array() += s2;
  double tr = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) tr += vbks::eval_kernel(e, theta, d.X.row(i), d.X.row(i)) - Q(i, i);
  return log_mvn(d.y, Eigen::VectorXd::Zero(d.size()), C) - tr / (2.0 * s2);
}

/// The q(u) that maximizes the sparse bound at fixed theta.
inline void optimal_qu(const vbks::KernelExpr& e, const Eigen::VectorXd& theta, const Eigen::MatrixXd& Z,
                       const vbks::Dataset& d, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) {
  const double s2 = noise_var(e, theta);
  const Eigen::MatrixXd Kuu = gram(e, theta, Z, Z);
  const Eigen::MatrixXd Ainv = Kuu.fullPivLu().inverse();
  const Eigen::MatrixXd P = Ainv * gram(e, theta, Z, d.X);  // A^-1 K_UX
  const Eigen::MatrixXd prec = Ainv + P * P.transpose() / s2;
  cov = prec.fullPivLu().inverse();
  cov = 0.5 * (cov + cov.transpose());
  mean = cov * P * d.y / s2;
}

/// Local ELBO with a point theta and Gaussian q(u) = N(m, S), in closed form:
/// E_q[log p(y | u)] + E_q[log p(u | theta)] + H[q(u)] + log N(theta; 0, I).
inline double dense_point_elbo(const vbks::KernelExpr& e, const Eigen::VectorXd& theta, const Eigen::MatrixXd& Z,
                               const Eigen::VectorXd& m, const Eigen::MatrixXd& S, const vbks::Dataset& d) {
  const double two_pi = 2.0 * std::numbers::pi;
  const double s2 = noise_var(e, theta);
  const Eigen::Index M = Z.rows();
  const Eigen::MatrixXd Kuu = gram(e, theta, Z, Z);
  const Eigen::MatrixXd Ainv = Kuu.fullPivLu().inverse();
  double lik = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const Eigen::VectorXd k = gram(e, theta, Z, d.X.row(i));
    const Eigen::VectorXd a = Ainv * k;
    const double mu = a.dot(m);
    const double var = vbks::eval_kernel(e, theta, d.X.row(i), d.X.row(i)) - k.dot(a) + a.dot(S * a);
    lik += -0.5 * std::log(two_pi * s2) - ((d.y[i] - mu) * (d.y[i] - mu) + var) / (2.0 * s2);
  }
  const double prior_u = -0.5 * (static_cast<double>(M) * std::log(two_pi) + std::log(Kuu.determinant()) +
                                 m.dot(Ainv * m) + (Ainv * S).trace());
  const double ent = 0.5 * static_cast<double>(M) * std::log(two_pi * std::numbers::e) + 0.5 * std::log(S.determinant());
  const double prior_theta =
      -0.5 * static_cast<double>(theta.size()) * std::log(two_pi) - 0.5 * theta.squaredNorm();
  return lik + prior_u + ent + prior_theta;
}

// --- one- and two-dimensional Gauss-Hermite quadrature --------------------

/// Nodes and weights for integrals against N(0, 1) (probabilists' form),
/// from the Golub-Welsch eigenproblem.
inline void gauss_hermite(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  nodes = es.eigenvalues();
  weights = es.eigenvectors().row(0).array().square().transpose();
}

}  // namespace oracle

#endif  // VBKS_TEST_ORACLES_HPP
