#include "vbks/kernel.hpp"

#include <cctype>
#include <cmath>
#include <numbers>
#include <sstream>

namespace vbks {

std::string_view base_name(BaseKernel kind) {
  switch (kind) {
    case BaseKernel::SE: return "SE";
    case BaseKernel::PER: return "PER";
    case BaseKernel::LIN: return "LIN";
    case BaseKernel::RQ: return "RQ";
  }
  return "?";
}

std::size_t base_param_count(BaseKernel kind) {
  switch (kind) {
    case BaseKernel::SE: return 2;
    case BaseKernel::PER: return 3;
    case BaseKernel::LIN: return 1;
    case BaseKernel::RQ: return 3;
  }
  return 0;
}

std::vector<std::string> base_param_names(BaseKernel kind) {
  switch (kind) {
    case BaseKernel::SE: return {"variance", "lengthscale"};
    case BaseKernel::PER: return {"variance", "lengthscale", "period"};
    case BaseKernel::LIN: return {"lengthscale"};
    case BaseKernel::RQ: return {"variance", "lengthscale", "alpha"};
  }
  return {};
}

// ---------------------------------------------------------------------------
// KernelExpr

struct KernelExpr::Node {
  Op op = Op::Leaf;
  BaseKernel kind = BaseKernel::SE;
  std::unique_ptr<KernelExpr> lhs;
  std::unique_ptr<KernelExpr> rhs;
  std::size_t n_leaves = 1;
  std::size_t n_params = 0;
};

KernelExpr KernelExpr::base(BaseKernel kind) {
  auto n = std::make_shared<Node>();
  n->op = Op::Leaf;
  n->kind = kind;
  n->n_leaves = 1;
  n->n_params = base_param_count(kind);
  return KernelExpr(std::move(n));
}

KernelExpr KernelExpr::sum(KernelExpr lhs, KernelExpr rhs) {
  auto n = std::make_shared<Node>();
  n->op = Op::Sum;
  n->n_leaves = lhs.num_leaves() + rhs.num_leaves();
  n->n_params = lhs.num_kernel_params() + rhs.num_kernel_params();
  n->lhs = std::make_unique<KernelExpr>(std::move(lhs));
  n->rhs = std::make_unique<KernelExpr>(std::move(rhs));
  return KernelExpr(std::move(n));
}

KernelExpr KernelExpr::product(KernelExpr lhs, KernelExpr rhs) {
  auto n = std::make_shared<Node>();
  n->op = Op::Product;
  n->n_leaves = lhs.num_leaves() + rhs.num_leaves();
  n->n_params = lhs.num_kernel_params() + rhs.num_kernel_params();
  n->lhs = std::make_unique<KernelExpr>(std::move(lhs));
  n->rhs = std::make_unique<KernelExpr>(std::move(rhs));
  return KernelExpr(std::move(n));
}

KernelExpr::Op KernelExpr::op() const { return node_->op; }

BaseKernel KernelExpr::base_kind() const {
  if (node_->op != Op::Leaf) throw KernelError("base_kind() on a composite kernel");
  return node_->kind;
}

const KernelExpr& KernelExpr::lhs() const {
  if (node_->op == Op::Leaf) throw KernelError("lhs() on a base kernel");
  return *node_->lhs;
}

const KernelExpr& KernelExpr::rhs() const {
  if (node_->op == Op::Leaf) throw KernelError("rhs() on a base kernel");
  return *node_->rhs;
}

std::size_t KernelExpr::num_leaves() const { return node_->n_leaves; }
std::size_t KernelExpr::num_kernel_params() const { return node_->n_params; }

std::string KernelExpr::name() const {
  switch (op()) {
    case Op::Leaf:
      return std::string(base_name(base_kind()));
    case Op::Sum: {
      std::string r = rhs().name();
      if (rhs().op() == Op::Sum) r = "(" + r + ")";
      return lhs().name() + "+" + r;
    }
    case Op::Product: {
      std::string l = lhs().name();
      std::string r = rhs().name();
      if (lhs().op() == Op::Sum) l = "(" + l + ")";
      if (!rhs().is_leaf()) r = "(" + r + ")";
      return l + "*" + r;
    }
  }
  return {};
}

std::vector<BaseKernel> KernelExpr::leaves() const {
  std::vector<BaseKernel> out;
  std::vector<const KernelExpr*> stack{this};
  while (!stack.empty()) {
    const KernelExpr* e = stack.back();
    stack.pop_back();
    if (e->is_leaf()) {
      out.push_back(e->base_kind());
    } else {
      stack.push_back(&e->rhs());
      stack.push_back(&e->lhs());
    }
  }
  return out;
}

std::vector<std::string> KernelExpr::param_names() const {
  std::vector<std::string> names;
  std::size_t i = 0;
  for (BaseKernel kind : leaves()) {
    for (const auto& p : base_param_names(kind)) {
      names.push_back(std::string(base_name(kind)) + "[" + std::to_string(i) + "]." + p);
    }
    ++i;
  }
  names.emplace_back("noise_variance");
  return names;
}

bool operator==(const KernelExpr& a, const KernelExpr& b) {
  if (a.node_ == b.node_) return true;
  if (a.op() != b.op()) return false;
  if (a.is_leaf()) return a.base_kind() == b.base_kind();
  return a.lhs() == b.lhs() && a.rhs() == b.rhs();
}

// ---------------------------------------------------------------------------
// Parser

namespace {

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  KernelExpr parse() {
    KernelExpr e = expr();
    skip_ws();
    if (pos_ != text_.size()) fail("unexpected trailing input");
    return e;
  }

 private:
  KernelExpr expr() {
    KernelExpr e = term();
    while (peek() == '+') {
      ++pos_;
      e = KernelExpr::sum(std::move(e), term());
    }
    return e;
  }

  KernelExpr term() {
    KernelExpr e = factor();
    while (peek() == '*') {
      ++pos_;
      e = KernelExpr::product(std::move(e), factor());
    }
    return e;
  }

  KernelExpr factor() {
    char c = peek();
    if (c == '(') {
      ++pos_;
      KernelExpr e = expr();
      if (peek() != ')') fail("expected ')'");
      ++pos_;
      return e;
    }
    std::size_t start = pos_;
    while (pos_ < text_.size() && std::isalpha(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    std::string_view word = text_.substr(start, pos_ - start);
    if (word.empty()) fail("expected a base kernel name");
    for (BaseKernel k : {BaseKernel::SE, BaseKernel::PER, BaseKernel::LIN, BaseKernel::RQ}) {
      if (word == base_name(k)) return KernelExpr::base(k);
    }
    pos_ = start;
    fail("unknown base kernel '" + std::string(word) + "'");
  }

  char peek() {
    skip_ws();
    return pos_ < text_.size() ? text_[pos_] : '\0';
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  [[noreturn]] void fail(const std::string& what) const {
    std::ostringstream os;
    os << "cannot parse kernel \"" << text_ << "\" at offset " << pos_ << ": " << what;
    throw KernelError(os.str());
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

KernelExpr parse_kernel(std::string_view text) { return Parser(text).parse(); }

std::vector<KernelExpr> parse_kernel_list(std::string_view text) {
  std::vector<KernelExpr> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_kernel(line));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

Eigen::VectorXd raw_from_constrained(const Eigen::VectorXd& constrained) {
  if ((constrained.array() <= 0.0).any() || !constrained.allFinite()) {
    throw KernelError("constrained hyperparameters must be finite and positive");
  }
  return constrained.array().log().matrix();
}

void check_hyper(const KernelExpr& expr, const Eigen::VectorXd& raw_theta) {
  if (static_cast<std::size_t>(raw_theta.size()) != expr.num_hyper()) {
    std::ostringstream os;
    os << "kernel " << expr.name() << " expects " << expr.num_hyper()
       << " hyperparameters, got " << raw_theta.size();
    throw KernelError(os.str());
  }
  if (!raw_theta.allFinite()) throw KernelError("non-finite hyperparameter for " + expr.name());
}

KernelEvaluator::KernelEvaluator(const KernelExpr& expr, const Eigen::VectorXd& raw_theta) {
  check_hyper(expr, raw_theta);
  n_kernel_params_ = expr.num_kernel_params();
  params_.resize(n_kernel_params_);
  for (std::size_t i = 0; i < n_kernel_params_; ++i) params_[i] = std::exp(raw_theta[static_cast<Eigen::Index>(i)]);
  nodes_.reserve(2 * expr.num_leaves());
  int offset = 0;
  root_ = build(expr, offset);
}

int KernelEvaluator::build(const KernelExpr& e, int& offset) {
  Node n;
  n.op = e.op();
  n.offset = offset;
  if (e.is_leaf()) {
    n.kind = e.base_kind();
    n.count = static_cast<int>(base_param_count(n.kind));
    offset += n.count;
  } else {
    n.lhs = build(e.lhs(), offset);
    n.rhs = build(e.rhs(), offset);
    n.count = offset - n.offset;
  }
  nodes_.push_back(n);
  return static_cast<int>(nodes_.size()) - 1;
}

namespace {

constexpr double kPi = std::numbers::pi;

double leaf_value(BaseKernel kind, const double* p, double r2, double dot) {
  switch (kind) {
    case BaseKernel::SE:
      return p[0] * std::exp(-0.5 * r2 / (p[1] * p[1]));
    case BaseKernel::PER: {
      const double s = std::sin(kPi * std::sqrt(r2) / p[2]);
      return p[0] * std::exp(-2.0 * s * s / (p[1] * p[1]));
    }
    case BaseKernel::LIN:
      return dot / (p[0] * p[0]);
    case BaseKernel::RQ: {
      const double z = 0.5 * r2 / (p[2] * p[1] * p[1]);
      return p[0] * std::exp(-p[2] * std::log1p(z));
    }
  }
  return 0.0;
}

// Gradient with respect to the log of each parameter.
double leaf_value_grad(BaseKernel kind, const double* p, double r2, double dot, double* g) {
  switch (kind) {
    case BaseKernel::SE: {
      const double l2 = p[1] * p[1];
      const double k = p[0] * std::exp(-0.5 * r2 / l2);
      g[0] = k;
      g[1] = k * r2 / l2;
      return k;
    }
    case BaseKernel::PER: {
      const double l2 = p[1] * p[1];
      const double a = kPi * std::sqrt(r2) / p[2];
      const double s = std::sin(a);
      const double c = std::cos(a);
      const double k = p[0] * std::exp(-2.0 * s * s / l2);
      g[0] = k;
      g[1] = k * 4.0 * s * s / l2;
      g[2] = k * 4.0 * a * s * c / l2;
      return k;
    }
    case BaseKernel::LIN: {
      const double k = dot / (p[0] * p[0]);
      g[0] = -2.0 * k;
      return k;
    }
    case BaseKernel::RQ: {
      const double alpha = p[2];
      const double z = 0.5 * r2 / (alpha * p[1] * p[1]);
      const double b = 1.0 + z;
      const double lb = std::log1p(z);
      const double k = p[0] * std::exp(-alpha * lb);
      g[0] = k;
      g[1] = k * 2.0 * alpha * z / b;
      g[2] = k * alpha * (z / b - lb);
      return k;
    }
  }
  return 0.0;
}

}  // namespace

double KernelEvaluator::eval(int idx, double r2, double dot) const {
  const Node& n = nodes_[static_cast<std::size_t>(idx)];
  switch (n.op) {
    case KernelExpr::Op::Leaf:
      return leaf_value(n.kind, params_.data() + n.offset, r2, dot);
    case KernelExpr::Op::Sum:
      return eval(n.lhs, r2, dot) + eval(n.rhs, r2, dot);
    case KernelExpr::Op::Product:
      return eval(n.lhs, r2, dot) * eval(n.rhs, r2, dot);
  }
  return 0.0;
}

double KernelEvaluator::eval_grad(int idx, double r2, double dot, double* grad) const {
  const Node& n = nodes_[static_cast<std::size_t>(idx)];
  switch (n.op) {
    case KernelExpr::Op::Leaf:
      return leaf_value_grad(n.kind, params_.data() + n.offset, r2, dot, grad + n.offset);
    case KernelExpr::Op::Sum:
      return eval_grad(n.lhs, r2, dot, grad) + eval_grad(n.rhs, r2, dot, grad);
    case KernelExpr::Op::Product: {
      const double a = eval_grad(n.lhs, r2, dot, grad);
      const double b = eval_grad(n.rhs, r2, dot, grad);
      const Node& l = nodes_[static_cast<std::size_t>(n.lhs)];
      const Node& r = nodes_[static_cast<std::size_t>(n.rhs)];
      for (int i = l.offset; i < l.offset + l.count; ++i) grad[i] *= b;
      for (int i = r.offset; i < r.offset + r.count; ++i) grad[i] *= a;
      return a * b;
    }
  }
  return 0.0;
}

double KernelEvaluator::value(double r2, double dot) const { return eval(root_, r2, dot); }

double KernelEvaluator::value_and_grad(double r2, double dot, double* grad) const {
  return eval_grad(root_, r2, dot, grad);
}

double KernelEvaluator::operator()(const Eigen::Ref<const Eigen::RowVectorXd>& x,
                                   const Eigen::Ref<const Eigen::RowVectorXd>& x2) const {
  return value((x - x2).squaredNorm(), x.dot(x2));
}

namespace {

void check_inputs(const Eigen::MatrixXd& X, const Eigen::MatrixXd& X2) {
  if (X.rows() == 0 || X2.rows() == 0) throw KernelError("empty input set");
  if (X.cols() != X2.cols()) throw KernelError("input dimension mismatch");
  if (!X.allFinite() || !X2.allFinite()) throw KernelError("non-finite kernel input");
}

}  // namespace

double eval_kernel(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                   const Eigen::Ref<const Eigen::RowVectorXd>& x,
                   const Eigen::Ref<const Eigen::RowVectorXd>& x2) {
  if (x.size() != x2.size()) throw KernelError("input dimension mismatch");
  if (!x.allFinite() || !x2.allFinite()) throw KernelError("non-finite kernel input");
  return KernelEvaluator(expr, raw_theta)(x, x2);
}

Eigen::MatrixXd gram_matrix(const KernelEvaluator& k, const Eigen::MatrixXd& X,
                            const Eigen::MatrixXd& X2) {
  check_inputs(X, X2);
  Eigen::MatrixXd K(X.rows(), X2.rows());
  const bool same = &X == &X2;
  for (Eigen::Index j = 0; j < X2.rows(); ++j) {
    for (Eigen::Index i = same ? j : 0; i < X.rows(); ++i) {
      const double v = k.value((X.row(i) - X2.row(j)).squaredNorm(), X.row(i).dot(X2.row(j)));
      K(i, j) = v;
      if (same) K(j, i) = v;
    }
  }
  return K;
}

Eigen::MatrixXd gram_matrix(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                            const Eigen::MatrixXd& X, const Eigen::MatrixXd& X2) {
  return gram_matrix(KernelEvaluator(expr, raw_theta), X, X2);
}

Eigen::VectorXd gram_diagonal(const KernelEvaluator& k, const Eigen::MatrixXd& X) {
  Eigen::VectorXd d(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) d[i] = k.value(0.0, X.row(i).squaredNorm());
  return d;
}

Eigen::VectorXd gram_grad_contract(const KernelEvaluator& k, std::size_t num_hyper,
                                   const Eigen::MatrixXd& X, const Eigen::MatrixXd& X2,
                                   const Eigen::MatrixXd& W) {
  check_inputs(X, X2);
  const auto p = static_cast<Eigen::Index>(k.dim_params());
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_hyper));
  Eigen::VectorXd g(p);
  if (&X == &X2) {
    // dK is symmetric: fold W onto the lower triangle.
    for (Eigen::Index j = 0; j < X.rows(); ++j) {
      for (Eigen::Index i = j; i < X.rows(); ++i) {
        const double w = i == j ? W(i, i) : W(i, j) + W(j, i);
        if (w == 0.0) continue;
        k.value_and_grad((X.row(i) - X.row(j)).squaredNorm(), X.row(i).dot(X.row(j)), g.data());
        out.head(p) += w * g;
      }
    }
    return out;
  }
  for (Eigen::Index j = 0; j < X2.rows(); ++j) {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double w = W(i, j);
      if (w == 0.0) continue;
      k.value_and_grad((X.row(i) - X2.row(j)).squaredNorm(), X.row(i).dot(X2.row(j)), g.data());
      out.head(p) += w * g;
    }
  }
  return out;
}

Eigen::VectorXd diag_grad_contract(const KernelEvaluator& k, std::size_t num_hyper,
                                   const Eigen::MatrixXd& X, const Eigen::VectorXd& w) {
  const auto p = static_cast<Eigen::Index>(k.dim_params());
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_hyper));
  Eigen::VectorXd g(p);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    if (w[i] == 0.0) continue;
    k.value_and_grad(0.0, X.row(i).squaredNorm(), g.data());
    out.head(p) += w[i] * g;
  }
  return out;
}

GramGrad gram_with_grad(const KernelEvaluator& k, const Eigen::MatrixXd& X,
                        const Eigen::MatrixXd& X2) {
  check_inputs(X, X2);
  const auto p = static_cast<Eigen::Index>(k.dim_params());
  const Eigen::Index n = X.rows();
  const Eigen::Index m = X2.rows();
  GramGrad out{Eigen::MatrixXd(n, m), Eigen::MatrixXd(p, n * m)};
  const bool same = &X == &X2;
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index i = same ? j : 0; i < n; ++i) {
      double* g = out.dK.col(i + j * n).data();
      const double v =
          k.value_and_grad((X.row(i) - X2.row(j)).squaredNorm(), X.row(i).dot(X2.row(j)), g);
      out.K(i, j) = v;
      if (same && i != j) {
        out.K(j, i) = v;
        out.dK.col(j + i * n) = out.dK.col(i + j * n);
      }
    }
  }
  return out;
}

Eigen::VectorXd GramGrad::contract(const Eigen::MatrixXd& W, std::size_t num_hyper) const {
  if (W.rows() != K.rows() || W.cols() != K.cols()) throw KernelError("weight matrix shape mismatch");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_hyper));
  out.head(dK.rows()) = dK * W.reshaped();
  return out;
}

}  // namespace vbks
