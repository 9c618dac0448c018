#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "uats/errors.hpp"
#include "uats/grid4.hpp"
#include "uats/rng.hpp"

namespace uats {

enum class Mode { train, eval };

// Named view onto a flat parameter (or gradient) array owned by a layer.
struct ParamRef {
  std::string name;
  Eigen::ArrayXd* value;
  Eigen::ArrayXd* grad;
};

// Non-trainable state that still belongs in checkpoints (BN running stats).
struct BufferRef {
  std::string name;
  Eigen::ArrayXd* value;
};

// ---------------------------------------------------------------------------
// Raw differentiable ops. Each forward returns the output and fills a context
// holding exactly what the matching backward needs. A layer object owns its
// parameters, gradients and the saved context of the last forward.
// ---------------------------------------------------------------------------

Grid4 softmax_channelwise(const Grid4& logits);
Grid4 softmax_backward(const Grid4& probs, const Grid4& dprobs);

Grid4 relu(const Grid4& x);

Grid4 upsample2d_nearest(const Grid4& x);            // factor 2
Grid4 upsample2d_backward(const Grid4& dy);          // 2x2 block sums

Grid4 concat_channels(const Grid4& a, const Grid4& b);
void split_channels(const Grid4& d, int c_first, Grid4* da, Grid4* db);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

class Conv2d {
 public:
  Conv2d() = default;
  // Odd square kernels, same padding. He-scaled seeded init.
  Conv2d(std::string name, int in_c, int out_c, int ksize, Rng& init_rng);

  Grid4 forward(const Grid4& x);
  Grid4 backward(const Grid4& dy);  // accumulates weight/bias grads
  Grid4 infer(const Grid4& x) const;  // no saved context

  void collect_params(std::vector<ParamRef>& out);
  int in_channels() const { return in_c_; }
  int out_channels() const { return out_c_; }
  int ksize() const { return k_; }

  Eigen::ArrayXd weight;  // (out_c, in_c, k, k) row-major flat
  Eigen::ArrayXd bias;    // (out_c)
  Eigen::ArrayXd wgrad;
  Eigen::ArrayXd bgrad;

 private:
  std::string name_;
  int in_c_ = 0, out_c_ = 0, k_ = 0;
  Grid4 saved_input_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels, double momentum = 0.1,
              double eps = 1e-5);

  Grid4 forward(const Grid4& x, Mode mode);
  Grid4 backward(const Grid4& dy);
  Grid4 infer(const Grid4& x) const;  // running stats, no saved context

  void collect_params(std::vector<ParamRef>& out);
  void collect_buffers(std::vector<BufferRef>& out);

  Eigen::ArrayXd gamma, beta, ggrad, bgrad;
  Eigen::ArrayXd running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

 private:
  std::string name_;
  int channels_ = 0;
  Mode saved_mode_ = Mode::train;
  Grid4 saved_xhat_;
  Eigen::ArrayXd saved_inv_std_;
};

class ReluLayer {
 public:
  Grid4 forward(const Grid4& x);
  Grid4 backward(const Grid4& dy) const;

 private:
  Grid4 saved_input_;
};

class MaxPool2d {
 public:
  // 2x2 window, stride 2; ties resolve to the first position in row-major
  // window order.
  Grid4 forward(const Grid4& x);
  Grid4 backward(const Grid4& dy) const;
  static Grid4 infer(const Grid4& x);

 private:
  Shape4 in_shape_;
  std::vector<std::int64_t> argmax_;
};

class Dropout {
 public:
  explicit Dropout(double rate = 0.5);

  // Inverted dropout: train zeroes with probability `rate` and scales
  // survivors by 1/(1-rate); eval is the identity. Same seed, same mask.
  Grid4 forward(const Grid4& x, Mode mode, std::uint64_t seed);
  Grid4 backward(const Grid4& dy) const;
  static Grid4 infer(const Grid4& x, double rate, std::uint64_t seed);

  double rate() const { return rate_; }

 private:
  double rate_;
  bool identity_ = true;
  Eigen::ArrayXd saved_mask_;  // 0 or 1/(1-rate)
};

class SoftmaxLayer {
 public:
  Grid4 forward(const Grid4& logits);
  Grid4 backward(const Grid4& dprobs) const;

 private:
  Grid4 saved_probs_;
};

}  // namespace uats
