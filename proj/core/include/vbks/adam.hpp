#ifndef VBKS_ADAM_HPP
#define VBKS_ADAM_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>

namespace vbks {

struct AdamOptions {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment buffers; kept with the state so training can resume.
struct AdamMoments {
  Eigen::VectorXd first;
  Eigen::VectorXd second;
  std::uint64_t updates = 0;

  void reset(Eigen::Index n) {
    first = Eigen::VectorXd::Zero(n);
    second = Eigen::VectorXd::Zero(n);
    updates = 0;
  }
};

/// One Adam step in the ascent direction.
inline void adam_ascend(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamMoments& m,
                        const AdamOptions& opt) {
  if (m.first.size() != params.size()) m.reset(params.size());
  ++m.updates;
  m.first = opt.beta1 * m.first + (1.0 - opt.beta1) * grad;
  m.second = opt.beta2 * m.second + (1.0 - opt.beta2) * grad.cwiseAbs2();
  const double t = static_cast<double>(m.updates);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  params.array() += opt.learning_rate * (m.first.array() / c1) /
                    ((m.second.array() / c2).sqrt() + opt.epsilon);
}

}  // namespace vbks

#endif  // VBKS_ADAM_HPP
