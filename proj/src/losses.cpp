#include "uats/losses.hpp"

#include <cmath>
#include <set>

#include "uats/errors.hpp"

namespace uats {

void ClassSet::validate() const {
  if (size() < 2) throw ConfigError("class set needs at least 2 classes");
  std::set<std::string> uniq(names.begin(), names.end());
  if (static_cast<int>(uniq.size()) != size())
    throw ConfigError("class identifiers must be unique");
}

ClassSet ClassSet::synthetic5() {
  return ClassSet{{"background", "tz", "pz", "dpu", "afs"}};
}

namespace {

struct CdcSums {
  double p = 0.0;   // sum m*y*yhat
  double ty = 0.0;  // sum m*y
  double th = 0.0;  // sum m*yhat
  double q = 0.0;   // sum m*y*[yhat>0]
};

void check_unit_range(const Eigen::ArrayXd& a, const char* what) {
  if ((a < -1e-12).any() || (a > 1.0 + 1e-12).any())
    throw DomainError(std::string("continuous_dice: ") + what +
                      " has entries outside [0,1]");
}

double cdc_from_sums(const CdcSums& s, double* c_out, double* d_out) {
  const double c = s.q > 0.0 ? s.p / s.q : 1.0;
  const double d = c * s.ty + s.th;
  if (c_out) *c_out = c;
  if (d_out) *d_out = d;
  if (d == 0.0) return 1.0;  // both masked fields identically zero
  return 2.0 * s.p / d;
}

}  // namespace

double continuous_dice(const Eigen::ArrayXd& y, const Eigen::ArrayXd& y_hat,
                       const Eigen::ArrayXd& mask) {
  return continuous_dice_grad(y, y_hat, mask, nullptr, nullptr);
}

double continuous_dice_grad(const Eigen::ArrayXd& y,
                            const Eigen::ArrayXd& y_hat,
                            const Eigen::ArrayXd& mask, Eigen::ArrayXd* dy,
                            Eigen::ArrayXd* dy_hat) {
  if (y.size() != y_hat.size() || y.size() != mask.size())
    throw ShapeError("continuous_dice: field/mask sizes differ");
  check_unit_range(y, "y");
  check_unit_range(y_hat, "y_hat");

  CdcSums s;
  s.p = (mask * y * y_hat).sum();
  s.ty = (mask * y).sum();
  s.th = (mask * y_hat).sum();
  const Eigen::ArrayXd sign_hat = (y_hat > 0.0).cast<double>();
  s.q = (mask * y * sign_hat).sum();

  double c = 1.0, d = 0.0;
  const double value = cdc_from_sums(s, &c, &d);
  if (value < -1e-9 || value > 1.0 + 1e-9)
    throw DomainError("continuous_dice: value " + std::to_string(value) +
                      " outside [0,1]");

  if (d == 0.0) {  // constant region, no gradient
    if (dy) dy->setZero(y.size());
    if (dy_hat) dy_hat->setZero(y.size());
    return value;
  }
  const double inv_d = 1.0 / d;
  const double p_over_d2 = s.p * inv_d * inv_d;
  if (dy_hat) {
    // dc/dyhat = m*y/q (a.e., sign term piecewise constant)
    Eigen::ArrayXd dD = mask;  // d(th)/dyhat
    if (s.q > 0.0) dD += (s.ty / s.q) * (mask * y);
    *dy_hat = 2.0 * (mask * y) * inv_d - 2.0 * p_over_d2 * dD;
  }
  if (dy) {
    Eigen::ArrayXd dD = c * mask;  // c * d(ty)/dy
    if (s.q > 0.0) {
      const Eigen::ArrayXd dc =
          (mask * y_hat * s.q - s.p * (mask * sign_hat)) / (s.q * s.q);
      dD += s.ty * dc;
    }
    *dy = 2.0 * (mask * y_hat) * inv_d - 2.0 * p_over_d2 * dD;
  }
  return value;
}

double task_loss(const Grid4& targets, const Grid4& probs, const Grid4& mask,
                 const ClassSet& classes, std::vector<double>* per_class_cdc,
                 Grid4* dprobs) {
  require_same_shape(targets, probs, "task_loss");
  require_same_shape(mask, probs, "task_loss(mask)");
  const Shape4 sh = probs.shape();
  if (sh.c != classes.size())
    throw ShapeError("task_loss: channel extent " + std::to_string(sh.c) +
                     " != |S| = " + std::to_string(classes.size()));
  if ((mask.array() > 0.0).count() == 0)
    throw TrainingError("task_loss: confidence mask empty for every class");

  if (per_class_cdc) per_class_cdc->assign(classes.size(), 0.0);
  const std::int64_t hw = static_cast<std::int64_t>(sh.h) * sh.w;
  const std::int64_t per_class_n = static_cast<std::int64_t>(sh.b) * hw;

  double loss = 0.0;
  Eigen::ArrayXd y(per_class_n), yh(per_class_n), m(per_class_n);
  for (int s = 0; s < classes.size(); ++s) {
    for (int b = 0; b < sh.b; ++b) {
      y.segment(b * hw, hw) = targets.plane(b, s);
      yh.segment(b * hw, hw) = probs.plane(b, s);
      m.segment(b * hw, hw) = mask.plane(b, s);
    }
    Eigen::ArrayXd dyh;
    double cdc;
    if (dprobs) {
      dyh.resize(per_class_n);
      cdc = continuous_dice_grad(y, yh, m, nullptr, &dyh);
      for (int b = 0; b < sh.b; ++b)
        dprobs->plane(b, s) -= dyh.segment(b * hw, hw);
    } else {
      cdc = continuous_dice(y, yh, m);
    }
    if (per_class_cdc) (*per_class_cdc)[s] = cdc;
    loss -= cdc;
  }
  return loss;
}

double consistency_loss(const Grid4& probs, const Grid4& ensemble,
                        const ClassSet& classes, Grid4* dprobs) {
  require_same_shape(probs, ensemble, "consistency_loss");
  const Shape4 sh = probs.shape();
  const std::int64_t hw = static_cast<std::int64_t>(sh.h) * sh.w;
  const std::int64_t per_class_n = static_cast<std::int64_t>(sh.b) * hw;
  const Eigen::ArrayXd full = Eigen::ArrayXd::Ones(per_class_n);
  const double inv_s = 1.0 / classes.size();

  double mean_cdc = 0.0;
  Eigen::ArrayXd y(per_class_n), yh(per_class_n);
  for (int s = 0; s < classes.size(); ++s) {
    for (int b = 0; b < sh.b; ++b) {
      y.segment(b * hw, hw) = probs.plane(b, s);
      yh.segment(b * hw, hw) = ensemble.plane(b, s);
    }
    if (dprobs) {
      Eigen::ArrayXd dy(per_class_n);
      mean_cdc += inv_s * continuous_dice_grad(y, yh, full, &dy, nullptr);
      for (int b = 0; b < sh.b; ++b)
        dprobs->plane(b, s) -= inv_s * dy.segment(b * hw, hw);
    } else {
      mean_cdc += inv_s * continuous_dice(y, yh, full);
    }
  }
  return 1.0 - mean_cdc;
}

LossReport combined_loss(double task, double cons, double lambda,
                         double prev_epoch_task, double prev_epoch_cons) {
  if (lambda < 0.0) throw ConfigError("combined_loss: lambda must be >= 0");
  LossReport r;
  r.task_loss = task;
  r.consistency_loss = cons;
  r.lambda_effective =
      lambda * prev_epoch_cons > std::abs(prev_epoch_task) ? 0.0 : lambda;
  r.total = r.task_loss + r.lambda_effective * r.consistency_loss;
  return r;
}

}  // namespace uats
