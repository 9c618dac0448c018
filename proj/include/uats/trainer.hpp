#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uats/adam.hpp"
#include "uats/data.hpp"
#include "uats/losses.hpp"
#include "uats/metrics.hpp"
#include "uats/ssl.hpp"
#include "uats/unet.hpp"

namespace uats {

enum class UpdateRule { never, every_epoch, every_k_epochs, on_val_improve, class_gated };

// Declarative description of one training variant: which mechanisms are on.
struct VariantSpec {
  char id = 'B';
  bool use_unlabeled_task = false;  // pseudo-label task term on unlabeled data
  bool use_consistency = false;
  bool use_confidence = false;      // top-n voxel selection per class
  bool use_ensemble_pl = false;     // pseudo labels from the temporal ensemble
  UpdateRule update_rule = UpdateRule::never;
  ConfidenceMeasure confidence_measure = ConfidenceMeasure::softmax;

  bool needs_ensemble() const { return use_consistency || use_ensemble_pl; }
  bool runs_stage2() const { return id != 'B'; }

  static VariantSpec registry(char id);
  static const std::string& valid_ids();
};

struct TrainConfig {
  double lr = 1e-3;       // synthetic default; 5e-5 is the paper-scale preset
  int batch_size = 4;
  int max_epochs = 300;
  int patience = 30;
  double alpha = 0.6;     // ensemble momentum
  double lambda = 1.0;    // consistency weight
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-7;
  int pl_refresh_interval = 50;  // rule every_k_epochs
  bool augment = true;
  std::uint64_t seed = 1;
  ConfidenceConfig confidence;
  UNetConfig model;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  std::string stage;  // "I" or "II"
  double train_task = 0.0;
  double train_cons = 0.0;
  double lambda_effective = 0.0;
  double val_loss = 0.0;
  std::vector<double> val_per_class;  // -cDC_s on the validation set
  std::vector<int> gated_classes;
  bool pl_refreshed = false;
  double unl_selected_frac = 0.0;  // selected/candidate unlabeled voxels
  double wall_seconds = 0.0;
};

struct RunResult {
  Model model;  // lowest-validation-loss checkpoint
  std::vector<EpochLog> logs;
  double best_val = 0.0;
  std::vector<double> best_val_per_class;
  int best_epoch = 0;
};

ClassSet default_class_set(int num_classes);

// Per-class task loss terms (-cDC_s) of deterministic predictions pooled
// over the given labeled samples.
std::vector<double> validation_loss(const Model& model, const Dataset& ds,
                                    const std::vector<int>& ids,
                                    const ClassSet& classes, int batch_size);

std::vector<EvalRecord> evaluate_on_test(const Model& model, const Dataset& ds,
                                         const std::vector<int>& test_ids,
                                         const std::string& variant_name);

// One training session (Stage I or Stage II of one variant). Can run to
// completion, stop at an epoch bound, be checkpointed, and be resumed
// bit-exactly from a checkpoint.
class TrainSession {
 public:
  // Fresh Stage I.
  TrainSession(const TrainConfig& cfg, const Dataset& ds,
               const DatasetSplit& split);
  // Fresh Stage II of `variant` on top of a converged Stage-I model.
  TrainSession(const VariantSpec& variant, const TrainConfig& cfg,
               const Dataset& ds, const DatasetSplit& split,
               const Model& pretrained,
               const std::vector<double>& pretrained_val_per_class);
  ~TrainSession();
  TrainSession(TrainSession&&) noexcept;

  // Runs until early stop or max_epochs; with epoch_limit >= 0 pauses once
  // that many epochs of this stage have completed. Returns true once the
  // stage has finished.
  bool run(int epoch_limit = -1);

  bool finished() const;
  int completed_epochs() const;
  const std::vector<EpochLog>& logs() const;

  // Best checkpoint so far plus the logs recorded by this session object.
  RunResult result() const;

  void save(const std::string& path) const;
  // Recreates a session from a checkpoint; dataset and split must be the
  // ones the checkpointed run was using.
  static TrainSession load(const std::string& path, const TrainConfig& cfg,
                           const Dataset& ds, const DatasetSplit& split);

 private:
  struct Impl;
  explicit TrainSession(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

// Convenience wrappers running a whole stage.
RunResult train_supervised(const TrainConfig& cfg, const Dataset& ds,
                           const DatasetSplit& split);
RunResult train_uats(const VariantSpec& variant, const TrainConfig& cfg,
                     const Dataset& ds, const DatasetSplit& split,
                     const Model& pretrained,
                     const std::vector<double>& pretrained_val_per_class);

// Full pipeline for one variant id: Stage I (or the supplied result), then
// Stage II when the variant calls for it. Logs of both stages concatenated.
RunResult run_variant(const VariantSpec& variant, const TrainConfig& cfg,
                      const Dataset& ds, const DatasetSplit& split,
                      const RunResult* stage1 = nullptr);

// Model-only checkpoint IO (used for finished models; TrainSession::save
// writes the same container with the trainer section attached).
void save_model_checkpoint(const std::string& path, Model& model);
Model load_model_checkpoint(const std::string& path);

std::string epoch_log_csv_header(const ClassSet& classes);
std::string epoch_log_csv_row(const EpochLog& log);

}  // namespace uats
