#include "uats/adam.hpp"

#include <cmath>

#include "uats/errors.hpp"

namespace uats {

AdamState::AdamState(const std::vector<ParamRef>& params, double lr,
                     double beta1, double beta2, double eps)
    : lr(lr), beta1(beta1), beta2(beta2), eps(eps) {
  if (lr <= 0.0) throw ConfigError("adam: lr must be positive");
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& p : params) {
    m.push_back(Eigen::ArrayXd::Zero(p.value->size()));
    v.push_back(Eigen::ArrayXd::Zero(p.value->size()));
  }
}

void AdamState::step(const std::vector<ParamRef>& params) {
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Eigen::ArrayXd& g = *params[i].grad;
    if (!g.isFinite().all())
      throw TrainingError("adam: non-finite gradient for parameter " +
                          params[i].name);
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g.square();
    *params[i].value -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
  }
}

}  // namespace uats
