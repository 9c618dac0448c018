#pragma once

#include <string>
#include <vector>

#include "uats/grid4.hpp"

namespace uats {

// Ordered class identifiers; index 0 is background.
struct ClassSet {
  std::vector<std::string> names;

  int size() const { return static_cast<int>(names.size()); }
  void validate() const;
  static ClassSet synthetic5();  // background, tz, pz, dpu, afs
};

struct LossReport {
  std::vector<double> per_class_cdc;
  double task_loss = 0.0;
  double consistency_loss = 0.0;
  double lambda_effective = 0.0;
  double total = 0.0;  // task_loss + lambda_effective * consistency_loss
};

// Continuous Dice coefficient over one class field restricted to `mask`:
//   cDC = 2*sum(m*y*yhat) / (c*sum(m*y) + sum(m*yhat))
// with c = sum(m*y*yhat) / sum(m*y*[yhat>0]), c := 1 when the support sum
// vanishes. Both masked fields identically zero gives 1; exactly one gives 0.
// Reduces to the classical Dice coefficient on binary inputs.
double continuous_dice(const Eigen::ArrayXd& y, const Eigen::ArrayXd& y_hat,
                       const Eigen::ArrayXd& mask);

// Same value; optionally fills d(cDC)/dy and/or d(cDC)/dy_hat.
double continuous_dice_grad(const Eigen::ArrayXd& y,
                            const Eigen::ArrayXd& y_hat,
                            const Eigen::ArrayXd& mask, Eigen::ArrayXd* dy,
                            Eigen::ArrayXd* dy_hat);

// Masked multi-class task loss: -sum_s cDC_s, range [-|S|, 0]. `mask` is a
// per-voxel per-class 0/1 grid shaped like `probs`. Throws when the mask is
// empty for every class. Optionally accumulates -d(cDC)/d(probs) into dprobs.
double task_loss(const Grid4& targets, const Grid4& probs, const Grid4& mask,
                 const ClassSet& classes,
                 std::vector<double>* per_class_cdc = nullptr,
                 Grid4* dprobs = nullptr);

// Dissimilarity to the ensemble target, 0 at perfect agreement:
//   1 - (1/|S|) * sum_s cDC_s(probs_s, ensemble_s, full mask)
double consistency_loss(const Grid4& probs, const Grid4& ensemble,
                        const ClassSet& classes, Grid4* dprobs = nullptr);

// Epoch-wise lambda gate: consistency is switched off for this epoch when it
// dominated the task loss in the previous one.
LossReport combined_loss(double task, double cons, double lambda,
                         double prev_epoch_task, double prev_epoch_cons);

}  // namespace uats
