#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "uats/adam.hpp"
#include "uats/errors.hpp"
#include "uats/data.hpp"
#include "uats/losses.hpp"
#include "uats/unet.hpp"

using namespace uats;

namespace {

UNetConfig tiny_cfg() {
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 4;
  c.in_channels = 1;
  c.num_classes = 3;
  c.dropout_rate = 0.5;
  c.seed = 42;
  return c;
}

Grid4 random_image(int h, int w, Rng& rng) {
  Grid4 g(1, 1, h, w);
  for (std::int64_t i = 0; i < g.size(); ++i) g[i] = rng.uniform();
  return g;
}

// closed-form parameter count: two 3x3 convs + BN per level, skip concat in
// the decoder, 1x1 head
std::int64_t expected_param_count(const UNetConfig& c) {
  auto conv = [](int in, int out, int k) {
    return static_cast<std::int64_t>(out) * in * k * k + out;
  };
  auto bn = [](int ch) { return static_cast<std::int64_t>(2) * ch; };
  std::int64_t total = 0;
  for (int i = 0; i < c.depth; ++i) {
    const int w = c.base_channels << i;
    const int in = i == 0 ? c.in_channels : (c.base_channels << (i - 1));
    total += conv(in, w, 3) + bn(w) + conv(w, w, 3) + bn(w);
  }
  for (int j = c.depth - 2; j >= 0; --j) {
    const int w = c.base_channels << j;
    const int below = c.base_channels << (j + 1);
    total += conv(below + w, w, 3) + bn(w) + conv(w, w, 3) + bn(w);
  }
  total += conv(c.base_channels, c.num_classes, 1);
  return total;
}

}  // namespace

TEST_CASE("build: depth 1 degenerates to convs plus head") {
  UNetConfig c = tiny_cfg();
  c.depth = 1;
  Model m(c);
  Rng rng(1);
  Grid4 x = random_image(8, 8, rng);
  Grid4 p = m.predict(x);
  CHECK(p.shape().c == c.num_classes);
  CHECK(p.shape().h == 8);
  CHECK(p.shape().w == 8);
}

TEST_CASE("build: parameter count matches the closed form") {
  UNetConfig c;
  c.depth = 3;
  c.base_channels = 8;
  c.in_channels = 1;
  c.num_classes = 5;
  Model m(c);
  CHECK(m.parameter_count() == expected_param_count(c));
  // worked value for this exact configuration
  CHECK(m.parameter_count() == 29973);

  UNetConfig c2 = tiny_cfg();
  Model m2(c2);
  CHECK(m2.parameter_count() == expected_param_count(c2));
}

TEST_CASE("build: seeded init is reproducible") {
  UNetConfig c = tiny_cfg();
  Model a(c), b(c);
  auto pa = a.params(), pb = b.params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK((pa[i].value->array() == pb[i].value->array()).all());
  }
  c.seed = 43;
  Model d(c);
  bool same = true;
  auto pd = d.params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    same = same && (pa[i].value->array() == pd[i].value->array()).all();
  CHECK(!same);
}

TEST_CASE("build: invalid configs rejected") {
  UNetConfig c = tiny_cfg();
  c.num_classes = 1;
  CHECK_THROWS_AS(Model{c}, ConfigError);
  c = tiny_cfg();
  c.depth = 0;
  CHECK_THROWS_AS(Model{c}, ConfigError);
  c = tiny_cfg();
  c.dropout_rate = 1.0;
  CHECK_THROWS_AS(Model{c}, ConfigError);
}

TEST_CASE("predict: deterministic and a valid probability map") {
  Model m(tiny_cfg());
  Rng rng(2);
  Grid4 x = random_image(16, 16, rng);
  Grid4 p1 = m.predict(x);
  Grid4 p2 = m.predict(x);
  CHECK((p1.array() == p2.array()).all());
  for (int y = 0; y < 16; ++y)
    for (int xx = 0; xx < 16; ++xx) {
      double sum = 0;
      for (int c = 0; c < 3; ++c) {
        CHECK(p1.at(0, c, y, xx) >= 0.0);
        sum += p1.at(0, c, y, xx);
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("predict: shape validation") {
  Model m(tiny_cfg());
  Grid4 bad_channels(1, 2, 16, 16);
  CHECK_THROWS_AS(m.predict(bad_channels), ShapeError);
  Grid4 bad_extent(1, 1, 15, 16);  // not divisible by 2^(depth-1)
  CHECK_THROWS_AS(m.predict(bad_extent), ShapeError);
}

TEST_CASE("predict: stochastic seeds differ and reproduce") {
  Model m(tiny_cfg());
  Rng rng(3);
  Grid4 x = random_image(16, 16, rng);
  Grid4 a = m.predict_stochastic(x, 100);
  Grid4 b = m.predict_stochastic(x, 101);
  CHECK(!(a.array() == b.array()).all());
  Grid4 a2 = m.predict_stochastic(x, 100);
  CHECK((a.array() == a2.array()).all());
  // free-function form
  Grid4 c = predict(m, x, true, 100);
  CHECK((a.array() == c.array()).all());
  Grid4 d = predict(m, x, false);
  CHECK((d.array() == m.predict(x).array()).all());
}

TEST_CASE("mc_forward: seeded list of valid probability maps") {
  Model m(tiny_cfg());
  Rng rng(4);
  Grid4 x = random_image(16, 16, rng);

  CHECK_THROWS_AS(m.mc_forward(x, 0, 7), ConfigError);
  CHECK(m.mc_forward(x, 1, 7).size() == 1);

  auto runs = m.mc_forward(x, 10, 7);
  CHECK(runs.size() == 10);
  for (const auto& p : runs) {
    CHECK(p.shape().c == 3);
    for (int y = 0; y < 16; ++y)
      for (int xx = 0; xx < 16; ++xx) {
        double sum = 0;
        for (int c = 0; c < 3; ++c) sum += p.at(0, c, y, xx);
        CHECK(std::abs(sum - 1.0) < 1e-9);
      }
  }
  auto rerun = m.mc_forward(x, 10, 7);
  for (int f = 0; f < 10; ++f)
    CHECK((runs[f].array() == rerun[f].array()).all());
}

TEST_CASE("train forward/backward overfits a single synthetic image") {
  // end-to-end differentiability: 200 Adam steps on one labeled image push
  // the majority-class training cDC above 0.95
  SyntheticSpec spec;
  spec.size = 32;
  spec.seed = 5;
  auto samples = generate_dataset(spec, 1);
  const Sample& s = samples[0];

  UNetConfig mc;
  mc.depth = 3;
  mc.base_channels = 8;
  mc.num_classes = 5;
  mc.seed = 11;
  Model model(mc);
  AdamState adam(model.params(), 1e-3);
  const ClassSet classes = ClassSet::synthetic5();

  Grid4 target = one_hot(*s.label, 5);
  const Grid4 ones = Grid4::constant(target.shape(), 1.0);
  Rng drop_rng(17);

  std::vector<double> cdc;
  for (int step = 0; step < 200; ++step) {
    std::vector<std::uint64_t> seeds(model.dropout_sites());
    for (auto& sd : seeds) sd = drop_rng.raw();
    Grid4 probs = model.forward_train(s.image, seeds);
    Grid4 dprobs(probs.shape());
    task_loss(target, probs, ones, classes, &cdc, &dprobs);
    model.backward(dprobs);
    adam.step(model.params());
    model.zero_grads();
  }
  Grid4 probs = model.forward_train(s.image, std::vector<std::uint64_t>(
                                                 model.dropout_sites(), 1));
  task_loss(target, probs, ones, classes, &cdc, nullptr);
  CHECK(cdc[0] > 0.95);  // background is the majority class
}
