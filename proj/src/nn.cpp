#include "uats/nn.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace uats {

namespace {

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unfold (B,C,H,W) into a (C*k*k) x (B*H*W) patch matrix, same padding.
Eigen::MatrixXd im2col(const Grid4& x, int k) {
  const Shape4 s = x.shape();
  const int pad = (k - 1) / 2;
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  Eigen::MatrixXd col = Eigen::MatrixXd::Zero(
      static_cast<std::int64_t>(s.c) * k * k, static_cast<std::int64_t>(s.b) * hw);
  for (int b = 0; b < s.b; ++b) {
    for (int ci = 0; ci < s.c; ++ci) {
      const double* plane = x.data() + x.index(b, ci, 0, 0);
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const std::int64_t row = (static_cast<std::int64_t>(ci) * k + ky) * k + kx;
          for (int y = 0; y < s.h; ++y) {
            const int iy = y + ky - pad;
            if (iy < 0 || iy >= s.h) continue;
            const std::int64_t col_base = static_cast<std::int64_t>(b) * hw + static_cast<std::int64_t>(y) * s.w;
            for (int xx = 0; xx < s.w; ++xx) {
              const int ix = xx + kx - pad;
              if (ix < 0 || ix >= s.w) continue;
              col(row, col_base + xx) = plane[static_cast<std::int64_t>(iy) * s.w + ix];
            }
          }
        }
      }
    }
  }
  return col;
}

// Scatter-add the transpose operation of im2col.
void col2im_add(const Eigen::MatrixXd& dcol, int k, Grid4& dx) {
  const Shape4 s = dx.shape();
  const int pad = (k - 1) / 2;
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  for (int b = 0; b < s.b; ++b) {
    for (int ci = 0; ci < s.c; ++ci) {
      double* plane = dx.data() + dx.index(b, ci, 0, 0);
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const std::int64_t row = (static_cast<std::int64_t>(ci) * k + ky) * k + kx;
          for (int y = 0; y < s.h; ++y) {
            const int iy = y + ky - pad;
            if (iy < 0 || iy >= s.h) continue;
            const std::int64_t col_base = static_cast<std::int64_t>(b) * hw + static_cast<std::int64_t>(y) * s.w;
            for (int xx = 0; xx < s.w; ++xx) {
              const int ix = xx + kx - pad;
              if (ix < 0 || ix >= s.w) continue;
              plane[static_cast<std::int64_t>(iy) * s.w + ix] += dcol(row, col_base + xx);
            }
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d::Conv2d(std::string name, int in_c, int out_c, int ksize, Rng& init_rng)
    : name_(std::move(name)), in_c_(in_c), out_c_(out_c), k_(ksize) {
  if (ksize % 2 == 0)
    throw ConfigError(name_ + ": kernel size must be odd, got " +
                      std::to_string(ksize));
  const std::int64_t n = static_cast<std::int64_t>(out_c) * in_c * ksize * ksize;
  weight.resize(n);
  const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c) * ksize * ksize));
  for (std::int64_t i = 0; i < n; ++i) weight[i] = init_rng.normal(0.0, stddev);
  bias = Eigen::ArrayXd::Zero(out_c);
  wgrad = Eigen::ArrayXd::Zero(n);
  bgrad = Eigen::ArrayXd::Zero(out_c);
}

Grid4 Conv2d::forward(const Grid4& x) {
  const Shape4 s = x.shape();
  if (s.c != in_c_)
    throw ConfigError(name_ + ": input channel extent " + s.str() +
                      " does not match kernel [" + std::to_string(out_c_) + "x" +
                      std::to_string(in_c_) + "x" + std::to_string(k_) + "x" +
                      std::to_string(k_) + "]");
  saved_input_ = x;

  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  const Eigen::MatrixXd col = im2col(x, k_);
  Eigen::Map<const MatrixRM> wmat(weight.data(), out_c_,
                                  static_cast<std::int64_t>(in_c_) * k_ * k_);
  Eigen::MatrixXd y = wmat * col;  // (out_c) x (B*H*W)
  y.colwise() += bias.matrix();

  Grid4 out(s.b, out_c_, s.h, s.w);
  for (int b = 0; b < s.b; ++b)
    for (int oc = 0; oc < out_c_; ++oc)
      out.plane(b, oc) = y.row(oc).segment(static_cast<std::int64_t>(b) * hw, hw).array();
  return out;
}

Grid4 Conv2d::backward(const Grid4& dy) {
  const Shape4 s = saved_input_.shape();
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;

  Eigen::MatrixXd dymat(out_c_, static_cast<std::int64_t>(s.b) * hw);
  for (int b = 0; b < s.b; ++b)
    for (int oc = 0; oc < out_c_; ++oc)
      dymat.row(oc).segment(static_cast<std::int64_t>(b) * hw, hw) =
          dy.plane(b, oc).matrix();

  bgrad += dymat.rowwise().sum().array();

  const Eigen::MatrixXd col = im2col(saved_input_, k_);
  const Eigen::MatrixXd dw = dymat * col.transpose();
  Eigen::Map<MatrixRM> wg(wgrad.data(), out_c_,
                          static_cast<std::int64_t>(in_c_) * k_ * k_);
  wg += dw;

  Eigen::Map<const MatrixRM> wmat(weight.data(), out_c_,
                                  static_cast<std::int64_t>(in_c_) * k_ * k_);
  const Eigen::MatrixXd dcol = wmat.transpose() * dymat;
  Grid4 dx(s);
  col2im_add(dcol, k_, dx);
  return dx;
}

Grid4 Conv2d::infer(const Grid4& x) const {
  const Shape4 s = x.shape();
  if (s.c != in_c_)
    throw ConfigError(name_ + ": input channel extent " + s.str() +
                      " does not match kernel [" + std::to_string(out_c_) + "x" +
                      std::to_string(in_c_) + "x" + std::to_string(k_) + "x" +
                      std::to_string(k_) + "]");
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  const Eigen::MatrixXd col = im2col(x, k_);
  Eigen::Map<const MatrixRM> wmat(weight.data(), out_c_,
                                  static_cast<std::int64_t>(in_c_) * k_ * k_);
  Eigen::MatrixXd y = wmat * col;
  y.colwise() += bias.matrix();
  Grid4 out(s.b, out_c_, s.h, s.w);
  for (int b = 0; b < s.b; ++b)
    for (int oc = 0; oc < out_c_; ++oc)
      out.plane(b, oc) = y.row(oc).segment(static_cast<std::int64_t>(b) * hw, hw).array();
  return out;
}

void Conv2d::collect_params(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".weight", &weight, &wgrad});
  out.push_back({name_ + ".bias", &bias, &bgrad});
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

BatchNorm2d::BatchNorm2d(std::string name, int channels, double momentum,
                         double eps)
    : momentum(momentum), eps(eps), name_(std::move(name)), channels_(channels) {
  gamma = Eigen::ArrayXd::Ones(channels);
  beta = Eigen::ArrayXd::Zero(channels);
  ggrad = Eigen::ArrayXd::Zero(channels);
  bgrad = Eigen::ArrayXd::Zero(channels);
  running_mean = Eigen::ArrayXd::Zero(channels);
  running_var = Eigen::ArrayXd::Ones(channels);
}

Grid4 BatchNorm2d::forward(const Grid4& x, Mode mode) {
  const Shape4 s = x.shape();
  if (s.c != channels_)
    throw ConfigError(name_ + ": channel extent " + std::to_string(s.c) +
                      " does not match " + std::to_string(channels_));
  if (s.b == 0) throw ConfigError(name_ + ": zero batch");
  const std::int64_t n = static_cast<std::int64_t>(s.b) * s.h * s.w;

  saved_mode_ = mode;
  saved_xhat_ = Grid4(s);
  saved_inv_std_.resize(channels_);
  Grid4 out(s);

  for (int c = 0; c < channels_; ++c) {
    double mean, inv_std;
    if (mode == Mode::train) {
      double sum = 0.0, sumsq = 0.0;
      for (int b = 0; b < s.b; ++b) {
        sum += x.plane(b, c).sum();
        sumsq += x.plane(b, c).square().sum();
      }
      mean = sum / static_cast<double>(n);
      const double var = std::max(0.0, sumsq / static_cast<double>(n) - mean * mean);
      inv_std = 1.0 / std::sqrt(var + eps);
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean;
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var;
    } else {
      mean = running_mean[c];
      inv_std = 1.0 / std::sqrt(running_var[c] + eps);
    }
    saved_inv_std_[c] = inv_std;
    for (int b = 0; b < s.b; ++b) {
      saved_xhat_.plane(b, c) = (x.plane(b, c) - mean) * inv_std;
      out.plane(b, c) = gamma[c] * saved_xhat_.plane(b, c) + beta[c];
    }
  }
  return out;
}

Grid4 BatchNorm2d::backward(const Grid4& dy) {
  const Shape4 s = saved_xhat_.shape();
  const std::int64_t n = static_cast<std::int64_t>(s.b) * s.h * s.w;
  Grid4 dx(s);

  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int b = 0; b < s.b; ++b) {
      sum_dy += dy.plane(b, c).sum();
      sum_dy_xhat += (dy.plane(b, c) * saved_xhat_.plane(b, c)).sum();
    }
    ggrad[c] += sum_dy_xhat;
    bgrad[c] += sum_dy;
    const double scale = gamma[c] * saved_inv_std_[c];
    if (saved_mode_ == Mode::train) {
      const double mean_dy = sum_dy / static_cast<double>(n);
      const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(n);
      for (int b = 0; b < s.b; ++b)
        dx.plane(b, c) = scale * (dy.plane(b, c) - mean_dy -
                                  saved_xhat_.plane(b, c) * mean_dy_xhat);
    } else {
      for (int b = 0; b < s.b; ++b) dx.plane(b, c) = scale * dy.plane(b, c);
    }
  }
  return dx;
}

Grid4 BatchNorm2d::infer(const Grid4& x) const {
  const Shape4 s = x.shape();
  Grid4 out(s);
  for (int c = 0; c < channels_; ++c) {
    const double inv_std = 1.0 / std::sqrt(running_var[c] + eps);
    for (int b = 0; b < s.b; ++b)
      out.plane(b, c) = gamma[c] * (x.plane(b, c) - running_mean[c]) * inv_std + beta[c];
  }
  return out;
}

void BatchNorm2d::collect_params(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".gamma", &gamma, &ggrad});
  out.push_back({name_ + ".beta", &beta, &bgrad});
}

void BatchNorm2d::collect_buffers(std::vector<BufferRef>& out) {
  out.push_back({name_ + ".running_mean", &running_mean});
  out.push_back({name_ + ".running_var", &running_var});
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

Grid4 relu(const Grid4& x) {
  Grid4 y = x;
  y.array() = y.array().max(0.0);
  return y;
}

Grid4 ReluLayer::forward(const Grid4& x) {
  saved_input_ = x;
  return relu(x);
}

Grid4 ReluLayer::backward(const Grid4& dy) const {
  Grid4 dx = dy;
  dx.array() *= (saved_input_.array() > 0.0).cast<double>();
  return dx;
}

// ---------------------------------------------------------------------------
// MaxPool2d
// ---------------------------------------------------------------------------

Grid4 MaxPool2d::forward(const Grid4& x) {
  const Shape4 s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0)
    throw ConfigError("max_pool2d: spatial extents must be even, got " + s.str());
  in_shape_ = s;
  Grid4 out(s.b, s.c, s.h / 2, s.w / 2);
  argmax_.assign(out.size(), 0);
  std::int64_t o = 0;
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; y += 2)
        for (int xx = 0; xx < s.w; xx += 2) {
          std::int64_t best_idx = x.index(b, c, y, xx);
          double best = x[best_idx];
          // row-major window order; strictly-greater keeps the first max
          const int dys[3][2] = {{0, 1}, {1, 0}, {1, 1}};
          for (const auto& d : dys) {
            const std::int64_t idx = x.index(b, c, y + d[0], xx + d[1]);
            if (x[idx] > best) {
              best = x[idx];
              best_idx = idx;
            }
          }
          out[o] = best;
          argmax_[o] = best_idx;
          ++o;
        }
  return out;
}

Grid4 MaxPool2d::backward(const Grid4& dy) const {
  Grid4 dx(in_shape_);
  for (std::int64_t o = 0; o < dy.size(); ++o) dx[argmax_[o]] += dy[o];
  return dx;
}

Grid4 MaxPool2d::infer(const Grid4& x) {
  const Shape4 s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0)
    throw ConfigError("max_pool2d: spatial extents must be even, got " + s.str());
  Grid4 out(s.b, s.c, s.h / 2, s.w / 2);
  std::int64_t o = 0;
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; y += 2)
        for (int xx = 0; xx < s.w; xx += 2)
          out[o++] = std::max({x.at(b, c, y, xx), x.at(b, c, y, xx + 1),
                               x.at(b, c, y + 1, xx), x.at(b, c, y + 1, xx + 1)});
  return out;
}

// ---------------------------------------------------------------------------
// Upsample (nearest, factor 2)
// ---------------------------------------------------------------------------

Grid4 upsample2d_nearest(const Grid4& x) {
  const Shape4 s = x.shape();
  Grid4 out(s.b, s.c, s.h * 2, s.w * 2);
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) {
          const double v = x.at(b, c, y, xx);
          out.at(b, c, 2 * y, 2 * xx) = v;
          out.at(b, c, 2 * y, 2 * xx + 1) = v;
          out.at(b, c, 2 * y + 1, 2 * xx) = v;
          out.at(b, c, 2 * y + 1, 2 * xx + 1) = v;
        }
  return out;
}

Grid4 upsample2d_backward(const Grid4& dy) {
  const Shape4 s = dy.shape();
  Grid4 dx(s.b, s.c, s.h / 2, s.w / 2);
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx)
          dx.at(b, c, y / 2, xx / 2) += dy.at(b, c, y, xx);
  return dx;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

Dropout::Dropout(double rate) : rate_(rate) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
}

Grid4 Dropout::forward(const Grid4& x, Mode mode, std::uint64_t seed) {
  if (mode == Mode::eval || rate_ == 0.0) {
    identity_ = true;
    return x;
  }
  identity_ = false;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate_);
  saved_mask_.resize(x.size());
  for (std::int64_t i = 0; i < x.size(); ++i)
    saved_mask_[i] = rng.uniform() < rate_ ? 0.0 : keep_scale;
  Grid4 y = x;
  y.array() *= saved_mask_;
  return y;
}

Grid4 Dropout::backward(const Grid4& dy) const {
  if (identity_) return dy;
  Grid4 dx = dy;
  dx.array() *= saved_mask_;
  return dx;
}

Grid4 Dropout::infer(const Grid4& x, double rate, std::uint64_t seed) {
  if (rate == 0.0) return x;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  Grid4 y = x;
  for (std::int64_t i = 0; i < y.size(); ++i)
    y[i] = rng.uniform() < rate ? 0.0 : y[i] * keep_scale;
  return y;
}

// ---------------------------------------------------------------------------
// Softmax over channels, per voxel
// ---------------------------------------------------------------------------

Grid4 softmax_channelwise(const Grid4& logits) {
  const Shape4 s = logits.shape();
  Grid4 out(s);
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  for (int b = 0; b < s.b; ++b) {
    const std::int64_t base = logits.index(b, 0, 0, 0);
    for (std::int64_t p = 0; p < hw; ++p) {
      double mx = logits[base + p];
      for (int c = 1; c < s.c; ++c)
        mx = std::max(mx, logits[base + c * hw + p]);
      double denom = 0.0;
      for (int c = 0; c < s.c; ++c) {
        const double e = std::exp(logits[base + c * hw + p] - mx);
        out[base + c * hw + p] = e;
        denom += e;
      }
      for (int c = 0; c < s.c; ++c) out[base + c * hw + p] /= denom;
    }
  }
  return out;
}

Grid4 softmax_backward(const Grid4& probs, const Grid4& dprobs) {
  const Shape4 s = probs.shape();
  Grid4 dz(s);
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  for (int b = 0; b < s.b; ++b) {
    const std::int64_t base = probs.index(b, 0, 0, 0);
    for (std::int64_t p = 0; p < hw; ++p) {
      double dot = 0.0;
      for (int c = 0; c < s.c; ++c)
        dot += probs[base + c * hw + p] * dprobs[base + c * hw + p];
      for (int c = 0; c < s.c; ++c)
        dz[base + c * hw + p] =
            probs[base + c * hw + p] * (dprobs[base + c * hw + p] - dot);
    }
  }
  return dz;
}

Grid4 SoftmaxLayer::forward(const Grid4& logits) {
  saved_probs_ = softmax_channelwise(logits);
  return saved_probs_;
}

Grid4 SoftmaxLayer::backward(const Grid4& dprobs) const {
  return softmax_backward(saved_probs_, dprobs);
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

Grid4 concat_channels(const Grid4& a, const Grid4& b) {
  const Shape4 sa = a.shape(), sb = b.shape();
  if (sa.b != sb.b || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: incompatible shapes " + sa.str() +
                     " vs " + sb.str());
  Grid4 out(sa.b, sa.c + sb.c, sa.h, sa.w);
  for (int bi = 0; bi < sa.b; ++bi) {
    for (int c = 0; c < sa.c; ++c) out.plane(bi, c) = a.plane(bi, c);
    for (int c = 0; c < sb.c; ++c) out.plane(bi, sa.c + c) = b.plane(bi, c);
  }
  return out;
}

void split_channels(const Grid4& d, int c_first, Grid4* da, Grid4* db) {
  const Shape4 s = d.shape();
  *da = Grid4(s.b, c_first, s.h, s.w);
  *db = Grid4(s.b, s.c - c_first, s.h, s.w);
  for (int bi = 0; bi < s.b; ++bi) {
    for (int c = 0; c < c_first; ++c) da->plane(bi, c) = d.plane(bi, c);
    for (int c = c_first; c < s.c; ++c) db->plane(bi, c - c_first) = d.plane(bi, c);
  }
}

}  // namespace uats
