#include "vbks/kernel.hpp"

#include <algorithm>
#include <unordered_set>

namespace vbks {

namespace {

void collect_chain(const KernelExpr& e, KernelExpr::Op op, std::vector<KernelExpr>& out) {
  if (e.op() == op) {
    collect_chain(e.lhs(), op, out);
    collect_chain(e.rhs(), op, out);
  } else {
    out.push_back(canonicalize(e));
  }
}

}  // namespace

KernelExpr canonicalize(const KernelExpr& expr) {
  if (expr.is_leaf()) return expr;
  const KernelExpr::Op op = expr.op();
  std::vector<KernelExpr> operands;
  collect_chain(expr, op, operands);

  std::vector<std::pair<std::string, KernelExpr>> keyed;
  keyed.reserve(operands.size());
  for (auto& o : operands) keyed.emplace_back(o.name(), std::move(o));
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  KernelExpr acc = keyed.front().second;
  for (std::size_t i = 1; i < keyed.size(); ++i) {
    acc = op == KernelExpr::Op::Sum ? KernelExpr::sum(std::move(acc), keyed[i].second)
                                    : KernelExpr::product(std::move(acc), keyed[i].second);
  }
  return acc;
}

std::string canonical_name(const KernelExpr& expr) { return canonicalize(expr).name(); }

std::vector<KernelExpr> expand_grammar(std::span<const BaseKernel> bases, int level) {
  if (bases.empty()) throw KernelError("expand_grammar: empty base kernel set");
  if (level < 1) throw KernelError("expand_grammar: level must be >= 1");

  std::vector<KernelExpr> all;
  std::unordered_set<std::string> seen;
  auto add = [&](const KernelExpr& e) {
    KernelExpr c = canonicalize(e);
    if (seen.insert(c.name()).second) all.push_back(std::move(c));
  };

  for (BaseKernel b : bases) add(KernelExpr::base(b));
  for (int l = 2; l <= level; ++l) {
    const std::vector<KernelExpr> previous = all;
    for (const auto& e : previous) {
      for (BaseKernel b : bases) {
        add(KernelExpr::sum(e, KernelExpr::base(b)));
        add(KernelExpr::product(e, KernelExpr::base(b)));
      }
    }
  }
  return all;
}

}  // namespace vbks
