#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uats/adam.hpp"
#include "uats/nn.hpp"

namespace uats {

struct UNetConfig {
  int depth = 3;          // resolution levels
  int base_channels = 8;  // width at the finest level, doubled per level
  int in_channels = 1;
  int num_classes = 5;    // includes background
  double dropout_rate = 0.5;
  std::uint64_t seed = 1;

  void validate() const;
};

// conv -> BN -> ReLU, twice
struct DoubleConv {
  DoubleConv() = default;
  DoubleConv(const std::string& name, int in_c, int out_c, Rng& init_rng);

  Grid4 forward(const Grid4& x, Mode mode);
  Grid4 backward(const Grid4& dy);
  void collect_params(std::vector<ParamRef>& out);
  void collect_buffers(std::vector<BufferRef>& out);

  Conv2d conv1, conv2;
  BatchNorm2d bn1, bn2;
  ReluLayer relu1, relu2;
};

// Small 2D U-Net: encoder with max-pooling, symmetric decoder with nearest
// upsampling and skip concatenation, dropout once per decoder level, 1x1
// head with channelwise softmax.
class Model {
 public:
  Model() = default;
  explicit Model(const UNetConfig& cfg);

  // BN uses batch statistics and updates running stats; dropout active.
  // One seed per decoder level.
  Grid4 forward_train(const Grid4& batch,
                      const std::vector<std::uint64_t>& dropout_seeds);
  // Backprop from d(loss)/d(probabilities); accumulates parameter grads and
  // returns the input gradient.
  Grid4 backward(const Grid4& dprobs);

  // Deterministic inference: BN running stats, dropout off.
  Grid4 predict(const Grid4& batch) const;
  // Dropout active with masks derived from `seed`; BN running stats.
  Grid4 predict_stochastic(const Grid4& batch, std::uint64_t seed) const;
  // F stochastic passes, seeds derived from base_seed. F = 0 is an error.
  std::vector<Grid4> mc_forward(const Grid4& batch, int passes,
                                std::uint64_t base_seed) const;

  std::vector<ParamRef> params();
  std::vector<BufferRef> buffers();
  std::int64_t parameter_count();
  void zero_grads();

  // Snapshot/restore of all trainable values and buffers, declared order.
  std::vector<Eigen::ArrayXd> state_snapshot();
  void restore_state(const std::vector<Eigen::ArrayXd>& snap);

  const UNetConfig& config() const { return cfg_; }
  int dropout_sites() const { return static_cast<int>(dec_.size()); }

 private:
  Grid4 run(const Grid4& batch, Mode bn_mode, bool dropout_active,
            const std::vector<std::uint64_t>& dropout_seeds);
  void check_input(const Grid4& batch) const;

  UNetConfig cfg_;
  std::vector<DoubleConv> enc_;   // levels 0..depth-1 (last = bottom)
  std::vector<MaxPool2d> pools_;  // depth-1
  std::vector<DoubleConv> dec_;   // index = level, finest first
  std::vector<Dropout> drops_;    // aligned with dec_
  Conv2d head_;
  SoftmaxLayer softmax_;
  std::vector<int> up_channels_;  // channels entering concat from below
};

// Free-function forms matching the rest of the tensor API.
Grid4 predict(const Model& model, const Grid4& batch, bool stochastic,
              std::uint64_t seed = 0);

}  // namespace uats
