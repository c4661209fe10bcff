#ifndef VBKS_KERNEL_HPP
#define VBKS_KERNEL_HPP

#include <Eigen/Dense>

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vbks {

/// Base covariance functions. Parameters are listed in hyper-vector order.
///   SE : sf2 * exp(-r^2 / (2 l^2))                      [sf2, l]
///   PER: sf2 * exp(-2 sin^2(pi r / p) / l^2)            [sf2, l, p]
///   LIN: <x, x'> / l^2                                  [l]
///   RQ : sf2 * (1 + r^2 / (2 alpha l^2))^(-alpha)       [sf2, l, alpha]
enum class BaseKernel { SE, PER, LIN, RQ };

std::string_view base_name(BaseKernel kind);
std::size_t base_param_count(BaseKernel kind);
std::vector<std::string> base_param_names(BaseKernel kind);

class KernelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Immutable expression tree over base kernels joined by sum and product.
/// Copies share the underlying nodes.
class KernelExpr {
 public:
  enum class Op { Leaf, Sum, Product };

  static KernelExpr base(BaseKernel kind);
  static KernelExpr sum(KernelExpr lhs, KernelExpr rhs);
  static KernelExpr product(KernelExpr lhs, KernelExpr rhs);

  Op op() const;
  bool is_leaf() const { return op() == Op::Leaf; }
  BaseKernel base_kind() const;  // leaf only
  const KernelExpr& lhs() const;  // composite only
  const KernelExpr& rhs() const;

  /// Textual form of this exact tree; parse_kernel(name()) == *this.
  std::string name() const;

  std::size_t num_leaves() const;
  /// Parameters of all leaves, excluding the trailing noise slot.
  std::size_t num_kernel_params() const;
  /// Full hyper-vector length: leaf parameters plus one noise variance.
  std::size_t num_hyper() const { return num_kernel_params() + 1; }
  std::size_t noise_index() const { return num_kernel_params(); }

  /// Leaves in left-to-right order; leaf i owns a contiguous slice of theta.
  std::vector<BaseKernel> leaves() const;
  /// Human-readable label for every hyper-vector slot, e.g. "PER[1].period".
  std::vector<std::string> param_names() const;

  friend bool operator==(const KernelExpr& a, const KernelExpr& b);

 private:
  struct Node;
  explicit KernelExpr(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;
};

/// Flattens same-operator chains, sorts operands by canonical name and
/// re-nests them to the left. Sum and product are treated as commutative and
/// associative; distributivity is not applied.
KernelExpr canonicalize(const KernelExpr& expr);
std::string canonical_name(const KernelExpr& expr);

/// Grammar: expr := term ('+' term)*, term := factor ('*' factor)*,
/// factor := SE | PER | LIN | RQ | '(' expr ')'. Both operators nest left.
KernelExpr parse_kernel(std::string_view text);

/// Level 1 is the base set; level n adds sum and product of every level n-1
/// expression with every base kernel, deduplicated by canonical name.
std::vector<KernelExpr> expand_grammar(std::span<const BaseKernel> bases, int level);

/// Line-delimited kernel names; blank lines and '#' comments are skipped.
std::vector<KernelExpr> parse_kernel_list(std::string_view text);

/// Raw (log-scale) hyper-vector from constrained values; all must be > 0.
Eigen::VectorXd raw_from_constrained(const Eigen::VectorXd& constrained);

/// Evaluates a kernel at fixed raw hyperparameters. Construction validates
/// the hyper-vector length and precomputes the constrained values.
class KernelEvaluator {
 public:
  KernelEvaluator(const KernelExpr& expr, const Eigen::VectorXd& raw_theta);

  std::size_t dim_params() const { return n_kernel_params_; }

  double operator()(const Eigen::Ref<const Eigen::RowVectorXd>& x,
                    const Eigen::Ref<const Eigen::RowVectorXd>& x2) const;

  /// Value at squared distance r2 and inner product dot.
  double value(double r2, double dot) const;
  /// Writes d k / d raw_theta for the kernel slots into grad (size dim_params()).
  double value_and_grad(double r2, double dot, double* grad) const;

 private:
  struct Node {
    KernelExpr::Op op;
    BaseKernel kind;
    int lhs = -1;
    int rhs = -1;
    int offset = 0;
    int count = 0;
  };
  int build(const KernelExpr& e, int& offset);
  double eval(int node, double r2, double dot) const;
  double eval_grad(int node, double r2, double dot, double* grad) const;

  std::vector<Node> nodes_;
  std::vector<double> params_;  // constrained
  std::size_t n_kernel_params_ = 0;
  int root_ = -1;
};

/// Checks theta length and finiteness against expr; throws KernelError.
void check_hyper(const KernelExpr& expr, const Eigen::VectorXd& raw_theta);

double eval_kernel(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                   const Eigen::Ref<const Eigen::RowVectorXd>& x,
                   const Eigen::Ref<const Eigen::RowVectorXd>& x2);

/// K(i, j) = k(X.row(i), X2.row(j)).
Eigen::MatrixXd gram_matrix(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                            const Eigen::MatrixXd& X, const Eigen::MatrixXd& X2);
Eigen::MatrixXd gram_matrix(const KernelEvaluator& k, const Eigen::MatrixXd& X,
                            const Eigen::MatrixXd& X2);
Eigen::VectorXd gram_diagonal(const KernelEvaluator& k, const Eigen::MatrixXd& X);

/// sum_ij W(i,j) * d K(i,j) / d raw_theta, with K = gram(X, X2). The returned
/// vector has num_hyper() entries; the noise slot is always zero.
Eigen::VectorXd gram_grad_contract(const KernelEvaluator& k, std::size_t num_hyper,
                                   const Eigen::MatrixXd& X, const Eigen::MatrixXd& X2,
                                   const Eigen::MatrixXd& W);
/// Gram matrix together with its derivatives: column i + j * rows of dK holds
/// d K(i, j) / d raw_theta over the kernel slots.
struct GramGrad {
  Eigen::MatrixXd K;
  Eigen::MatrixXd dK;

  /// Same result as gram_grad_contract for this (X, X2).
  Eigen::VectorXd contract(const Eigen::MatrixXd& W, std::size_t num_hyper) const;
};

GramGrad gram_with_grad(const KernelEvaluator& k, const Eigen::MatrixXd& X,
                        const Eigen::MatrixXd& X2);

/// sum_i w(i) * d k(X_i, X_i) / d raw_theta.
Eigen::VectorXd diag_grad_contract(const KernelEvaluator& k, std::size_t num_hyper,
                                   const Eigen::MatrixXd& X, const Eigen::VectorXd& w);

}  // namespace vbks

#endif  // VBKS_KERNEL_HPP
