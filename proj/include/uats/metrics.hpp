#pragma once

#include <optional>
#include <string>
#include <vector>

#include "uats/data.hpp"

namespace uats {

struct EvalRecord {
  std::string variant;
  int sample_id = 0;
  int cls = 0;
  double dc = 0.0;
  std::optional<double> abd;  // absent when the class is empty in either map
};

// Classical Dice over binary masks: 2|A.B|/(|A|+|B|). Both empty gives 1,
// exactly one empty gives 0.
double dice_binary(const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>& pred,
                   const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>& truth);

// Symmetric mean distance between boundaries (4-connectivity, exact nearest
// neighbour by brute force). Empty masks are undefined.
std::optional<double> average_boundary_distance(
    const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>& pred,
    const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>& truth, int h, int w,
    double spacing_y = 1.0, double spacing_x = 1.0);

struct WilcoxonResult {
  double p = 1.0;
  double statistic = 0.0;  // W+ (sum of ranks of positive differences)
  int n = 0;               // pairs after dropping zero differences
  bool exact = false;
  bool all_zero = false;
};

// Two-sided signed-rank test; zero differences dropped, ties get average
// ranks. Exact null distribution (conditioned on the observed ranks) up to
// n = 25, normal approximation with continuity correction above.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                    const std::vector<double>& b);

struct AggregateRow {
  std::string variant;
  int cls = 0;
  std::string metric;  // "dc" or "abd"
  double mean = 0.0;
  double sd = 0.0;  // population sd
  int n = 0;
  int n_undefined = 0;
};

std::vector<AggregateRow> aggregate(const std::vector<EvalRecord>& records);

// Per-class DC/ABD records for one predicted/reference label pair.
std::vector<EvalRecord> evaluate_labels(const std::string& variant,
                                        int sample_id, const LabelMap& pred,
                                        const LabelMap& truth,
                                        int num_classes);

}  // namespace uats
