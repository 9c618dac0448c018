#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "uats/grid4.hpp"

namespace uats {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::int64_t worst_coord = -1;
};

// Central finite difference (f(x+h)-f(x-h))/2h against an analytic gradient,
// coordinate by coordinate. The op under test must be deterministic (seeded
// dropout, batch norm in eval mode or a fixed batch).
inline GradCheckResult check_gradients(
    const std::function<double(const Grid4&)>& f, const Grid4& x,
    const Grid4& analytic_grad, double h = 1e-5) {
  GradCheckResult res;
  Grid4 xp = x;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    const double an = analytic_grad[i];
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
    const double rel = std::abs(fd - an) / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_coord = i;
    }
  }
  return res;
}

}  // namespace uats
