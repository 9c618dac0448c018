#include "uats/unet.hpp"

#include <algorithm>

#include "uats/errors.hpp"

namespace uats {

void UNetConfig::validate() const {
  if (depth < 1) throw ConfigError("unet: depth must be >= 1");
  if (base_channels < 1) throw ConfigError("unet: base_channels must be >= 1");
  if (in_channels < 1) throw ConfigError("unet: in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("unet: num_classes must be >= 2");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("unet: dropout_rate must be in [0,1)");
}

DoubleConv::DoubleConv(const std::string& name, int in_c, int out_c,
                       Rng& init_rng)
    : conv1(name + ".conv1", in_c, out_c, 3, init_rng),
      conv2(name + ".conv2", out_c, out_c, 3, init_rng),
      bn1(name + ".bn1", out_c),
      bn2(name + ".bn2", out_c) {}

Grid4 DoubleConv::forward(const Grid4& x, Mode mode) {
  Grid4 h = relu1.forward(bn1.forward(conv1.forward(x), mode));
  return relu2.forward(bn2.forward(conv2.forward(h), mode));
}

Grid4 DoubleConv::backward(const Grid4& dy) {
  Grid4 d = conv2.backward(bn2.backward(relu2.backward(dy)));
  return conv1.backward(bn1.backward(relu1.backward(d)));
}

static Grid4 double_conv_infer(const DoubleConv& b, const Grid4& x) {
  Grid4 h = relu(b.bn1.infer(b.conv1.infer(x)));
  return relu(b.bn2.infer(b.conv2.infer(h)));
}

void DoubleConv::collect_params(std::vector<ParamRef>& out) {
  conv1.collect_params(out);
  bn1.collect_params(out);
  conv2.collect_params(out);
  bn2.collect_params(out);
}

void DoubleConv::collect_buffers(std::vector<BufferRef>& out) {
  bn1.collect_buffers(out);
  bn2.collect_buffers(out);
}

Model::Model(const UNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng init(cfg_.seed);
  const int d = cfg_.depth;
  auto width = [&](int level) { return cfg_.base_channels << level; };

  for (int i = 0; i < d; ++i) {
    const int in_c = i == 0 ? cfg_.in_channels : width(i - 1);
    enc_.emplace_back("enc" + std::to_string(i), in_c, width(i), init);
  }
  pools_.resize(d - 1);
  up_channels_.assign(std::max(0, d - 1), 0);
  // decoder stored finest-first (dec_[j] is level j) but constructed in
  // forward coarse-to-fine order so seeded init follows the graph
  dec_.resize(std::max(0, d - 1));
  for (int j = d - 2; j >= 0; --j) {
    up_channels_[j] = width(j + 1);
    dec_[j] = DoubleConv("dec" + std::to_string(j), width(j + 1) + width(j),
                         width(j), init);
  }
  drops_.assign(std::max(0, d - 1), Dropout(cfg_.dropout_rate));
  head_ = Conv2d("head", width(0), cfg_.num_classes, 1, init);
}

void Model::check_input(const Grid4& batch) const {
  const Shape4 s = batch.shape();
  if (s.c != cfg_.in_channels)
    throw ShapeError("unet: expected " + std::to_string(cfg_.in_channels) +
                     " input channels, got " + s.str());
  const int div = 1 << (cfg_.depth - 1);
  if (s.h % div != 0 || s.w % div != 0)
    throw ShapeError("unet: spatial extents of " + s.str() +
                     " must be divisible by " + std::to_string(div));
  if (s.b < 1) throw ShapeError("unet: empty batch");
}

Grid4 Model::run(const Grid4& batch, Mode bn_mode, bool dropout_active,
                 const std::vector<std::uint64_t>& dropout_seeds) {
  check_input(batch);
  const int d = cfg_.depth;
  std::vector<Grid4> skips(std::max(0, d - 1));
  Grid4 x = batch;
  for (int i = 0; i < d - 1; ++i) {
    skips[i] = enc_[i].forward(x, bn_mode);
    x = pools_[i].forward(skips[i]);
  }
  x = enc_[d - 1].forward(x, bn_mode);
  for (int j = d - 2; j >= 0; --j) {
    x = upsample2d_nearest(x);
    x = concat_channels(x, skips[j]);
    x = dec_[j].forward(x, bn_mode);
    const Mode drop_mode = dropout_active ? Mode::train : Mode::eval;
    const std::uint64_t seed = j < static_cast<int>(dropout_seeds.size())
                                   ? dropout_seeds[j]
                                   : 0;
    x = drops_[j].forward(x, drop_mode, seed);
  }
  return softmax_.forward(head_.forward(x));
}

Grid4 Model::forward_train(const Grid4& batch,
                           const std::vector<std::uint64_t>& dropout_seeds) {
  return run(batch, Mode::train, true, dropout_seeds);
}

Grid4 Model::backward(const Grid4& dprobs) {
  const int d = cfg_.depth;
  Grid4 dx = head_.backward(softmax_.backward(dprobs));
  std::vector<Grid4> dskips(std::max(0, d - 1));
  for (int j = 0; j <= d - 2; ++j) {
    dx = dec_[j].backward(drops_[j].backward(dx));
    Grid4 dup, dskip;
    split_channels(dx, up_channels_[j], &dup, &dskip);
    dskips[j] = std::move(dskip);
    dx = upsample2d_backward(dup);
  }
  dx = enc_[d - 1].backward(dx);
  for (int i = d - 2; i >= 0; --i) {
    Grid4 de = pools_[i].backward(dx);
    de.array() += dskips[i].array();
    dx = enc_[i].backward(de);
  }
  return dx;
}

Grid4 Model::predict(const Grid4& batch) const {
  check_input(batch);
  const int d = cfg_.depth;
  std::vector<Grid4> skips(std::max(0, d - 1));
  Grid4 x = batch;
  for (int i = 0; i < d - 1; ++i) {
    skips[i] = double_conv_infer(enc_[i], x);
    x = MaxPool2d::infer(skips[i]);
  }
  x = double_conv_infer(enc_[d - 1], x);
  for (int j = d - 2; j >= 0; --j) {
    x = upsample2d_nearest(x);
    x = concat_channels(x, skips[j]);
    x = double_conv_infer(dec_[j], x);
  }
  return softmax_channelwise(head_.infer(x));
}

Grid4 Model::predict_stochastic(const Grid4& batch, std::uint64_t seed) const {
  check_input(batch);
  const int d = cfg_.depth;
  std::vector<Grid4> skips(std::max(0, d - 1));
  Grid4 x = batch;
  for (int i = 0; i < d - 1; ++i) {
    skips[i] = double_conv_infer(enc_[i], x);
    x = MaxPool2d::infer(skips[i]);
  }
  x = double_conv_infer(enc_[d - 1], x);
  for (int j = d - 2; j >= 0; --j) {
    x = upsample2d_nearest(x);
    x = concat_channels(x, skips[j]);
    x = double_conv_infer(dec_[j], x);
    x = Dropout::infer(x, cfg_.dropout_rate, mix_seed(seed, static_cast<std::uint64_t>(j)));
  }
  return softmax_channelwise(head_.infer(x));
}

std::vector<Grid4> Model::mc_forward(const Grid4& batch, int passes,
                                     std::uint64_t base_seed) const {
  if (passes < 1)
    throw ConfigError("mc_forward: pass count must be >= 1, got " +
                      std::to_string(passes));
  std::vector<Grid4> out;
  out.reserve(passes);
  for (int f = 0; f < passes; ++f)
    out.push_back(predict_stochastic(batch, mix_seed(base_seed, 1000 + f)));
  return out;
}

std::vector<ParamRef> Model::params() {
  std::vector<ParamRef> out;
  for (auto& e : enc_) e.collect_params(out);
  for (int j = cfg_.depth - 2; j >= 0; --j) dec_[j].collect_params(out);
  head_.collect_params(out);
  return out;
}

std::vector<BufferRef> Model::buffers() {
  std::vector<BufferRef> out;
  for (auto& e : enc_) e.collect_buffers(out);
  for (int j = cfg_.depth - 2; j >= 0; --j) dec_[j].collect_buffers(out);
  return out;
}

std::int64_t Model::parameter_count() {
  std::int64_t n = 0;
  for (const auto& p : params()) n += p.value->size();
  return n;
}

void Model::zero_grads() {
  for (auto& p : params()) p.grad->setZero();
}

std::vector<Eigen::ArrayXd> Model::state_snapshot() {
  std::vector<Eigen::ArrayXd> snap;
  for (const auto& p : params()) snap.push_back(*p.value);
  for (const auto& b : buffers()) snap.push_back(*b.value);
  return snap;
}

void Model::restore_state(const std::vector<Eigen::ArrayXd>& snap) {
  std::size_t i = 0;
  for (auto& p : params()) *p.value = snap.at(i++);
  for (auto& b : buffers()) *b.value = snap.at(i++);
}

Grid4 predict(const Model& model, const Grid4& batch, bool stochastic,
              std::uint64_t seed) {
  return stochastic ? model.predict_stochastic(batch, seed)
                    : model.predict(batch);
}

}  // namespace uats
