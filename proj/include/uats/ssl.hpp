#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "uats/data.hpp"
#include "uats/grid4.hpp"
#include "uats/unet.hpp"

namespace uats {

enum class ConfidenceMeasure { softmax, mc_entropy };

struct ConfidenceConfig {
  ConfidenceMeasure measure = ConfidenceMeasure::softmax;
  std::vector<double> fractions;  // per class, in (0,1]
  int mc_passes = 10;

  void validate(int num_classes) const;
};

// Per-sample historical ensemble of probability maps plus the class-wise
// validation gate state. Initialized from the pre-trained model, never from
// zero, so no startup-bias correction is needed.
struct EnsembleBuffer {
  double alpha = 0.6;
  std::map<int, Grid4> e_hat;                // sample id -> (1,C,H,W)
  std::vector<double> best_val_loss;         // per class, lower is better
  std::vector<std::uint8_t> update_enabled;  // per class, current epoch
};

EnsembleBuffer init_ensemble(const Model& model,
                             const std::vector<const Sample*>& samples,
                             const std::vector<double>& stage1_val_loss,
                             double alpha);

// Classes whose current validation loss strictly improves the recorded best;
// records move to the new best for exactly those classes.
std::vector<int> gate_classes(EnsembleBuffer& buffer,
                              const std::vector<double>& current_val_loss);

// E_s := alpha*E_s + (1-alpha)*Y_s for improved classes only, then per-voxel
// renormalization wherever the channel sum drifted beyond 1e-6.
void update_ensemble(EnsembleBuffer& buffer,
                     const std::map<int, Grid4>& predictions,
                     const std::vector<int>& improved);

// Hard argmax pseudo labels; ties go to the lower class index.
std::map<int, LabelMap> extract_pseudo_labels(
    const std::map<int, Grid4>& source, const std::vector<int>& ids);

// Probability of the committed pseudo class, per voxel: (1,1,H,W).
Grid4 softmax_confidence(const Grid4& prob_map, const LabelMap& pseudo);

// Entropy of the mean over `passes` stochastic forward passes (0*log0 := 0).
Grid4 entropy_map(const Grid4& mean_probs);
Grid4 mc_entropy(const Model& model, const Grid4& image, int passes,
                 std::uint64_t base_seed);
// Confidence as negated MC entropy: lower entropy, more confident.
Grid4 mc_entropy_confidence(const Model& model, const Grid4& image, int passes,
                            std::uint64_t base_seed);

struct MaskBuild {
  std::map<int, Grid4> masks;                      // id -> (1,C,H,W) of 0/1
  std::vector<std::int64_t> selected_per_class;    // unlabeled voxels chosen
  std::vector<std::int64_t> candidates_per_class;  // pseudo-voxel counts
};

// Labeled samples get an all-ones mask. On unlabeled samples, per class s,
// the floor(n_s * |pseudo == s|) most confident voxels are selected, ranked
// globally across samples; ties at the cut break by (sample id, voxel index).
MaskBuild build_confidence_mask(const std::map<int, Grid4>& confidence,
                                const std::map<int, LabelMap>& pseudo,
                                const std::vector<int>& labeled_ids,
                                int num_classes, int h, int w,
                                const ConfidenceConfig& config);

}  // namespace uats
