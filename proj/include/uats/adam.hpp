#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "uats/nn.hpp"

namespace uats {

// Bias-corrected Adam over a flat parameter list. Moment grids are kept
// per parameter, aligned with the order the refs were registered in.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const std::vector<ParamRef>& params, double lr,
            double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-7);

  // One update over all registered parameters; throws TrainingError naming
  // the parameter on a non-finite gradient.
  void step(const std::vector<ParamRef>& params);

  std::uint64_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
  std::vector<Eigen::ArrayXd> m;  // first moments
  std::vector<Eigen::ArrayXd> v;  // second moments, entrywise nonnegative
};

}  // namespace uats
