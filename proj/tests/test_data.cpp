#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "uats/data.hpp"
#include "uats/errors.hpp"

using namespace uats;
namespace fs = std::filesystem;

TEST_CASE("generate_dataset is reproducible and class-structured") {
  SyntheticSpec spec;
  spec.seed = 7;

  SUBCASE("same spec and seed give identical datasets") {
    auto a = generate_dataset(spec, 5);
    auto b = generate_dataset(spec, 5);
    for (int i = 0; i < 5; ++i) {
      CHECK((a[i].image.array() == b[i].image.array()).all());
      CHECK((a[i].label->idx == b[i].label->idx).all());
    }
  }

  SUBCASE("class frequencies follow the intended imbalance") {
    auto samples = generate_dataset(spec, 100);
    std::vector<std::int64_t> counts(5, 0);
    int with_all_classes = 0;
    for (const auto& s : samples) {
      std::set<int> present;
      for (std::int64_t i = 0; i < s.label->idx.size(); ++i) {
        ++counts[s.label->idx[i]];
        present.insert(s.label->idx[i]);
      }
      if (present.size() == 5) ++with_all_classes;
    }
    // background > blob > band > tube ~ crescent
    CHECK(counts[0] > counts[1]);
    CHECK(counts[1] > counts[2]);
    CHECK(counts[2] > counts[3]);
    CHECK(counts[2] > counts[4]);
    // tube and crescent comparable
    const double ratio =
        static_cast<double>(counts[3]) / static_cast<double>(counts[4]);
    CHECK(ratio > 0.4);
    CHECK(ratio < 2.5);
    // minority share below 3% of foreground
    const double fg = static_cast<double>(counts[1] + counts[2] + counts[3] +
                                          counts[4]);
    CHECK(static_cast<double>(counts[4]) / fg < 0.03);
    // all five classes in at least 95% of samples
    CHECK(with_all_classes >= 95);
  }

  SUBCASE("images live in [0,1]") {
    auto samples = generate_dataset(spec, 3);
    for (const auto& s : samples) {
      CHECK(s.image.array().minCoeff() >= 0.0);
      CHECK(s.image.array().maxCoeff() <= 1.0);
    }
  }

  SUBCASE("n must be positive") {
    CHECK_THROWS_AS(generate_dataset(spec, 0), ConfigError);
  }
}

TEST_CASE("normalize_intensity") {
  SUBCASE("output spans [0,1] for non-constant input") {
    Rng rng(41);
    Grid4 img(1, 1, 10, 10);
    for (std::int64_t i = 0; i < img.size(); ++i) img[i] = rng.uniform(3, 9);
    Grid4 out = normalize_intensity(img);
    CHECK(out.array().minCoeff() == doctest::Approx(0.0));
    CHECK(out.array().maxCoeff() == doctest::Approx(1.0));
  }

  SUBCASE("an extreme outlier is clipped to the 99th percentile") {
    Grid4 img(1, 1, 10, 10);
    for (std::int64_t i = 0; i < img.size(); ++i)
      img[i] = static_cast<double>(i) / 99.0;
    img[50] = 1e6;
    Grid4 out = normalize_intensity(img);
    // without clipping everything except the outlier would collapse to ~0
    std::int64_t above_half = (out.array() > 0.5).count();
    CHECK(above_half > 10);
  }

  SUBCASE("a uniform ramp stays a ramp away from the clipped tails") {
    Grid4 img(1, 1, 1, 100);
    for (int i = 0; i < 100; ++i) img[i] = i / 99.0;
    Grid4 out = normalize_intensity(img);
    for (int i = 5; i < 94; ++i) CHECK(out[i + 1] > out[i]);
  }

  SUBCASE("constant image maps to zeros") {
    Grid4 img = Grid4::constant({1, 1, 4, 4}, 3.3);
    Grid4 out = normalize_intensity(img);
    CHECK((out.array() == 0.0).all());
  }
}

TEST_CASE("augment") {
  SyntheticSpec spec;
  spec.seed = 9;
  auto samples = generate_dataset(spec, 2);
  const Sample& s = samples[0];

  SUBCASE("seed fixing makes the transform deterministic") {
    Sample a = augment(s, 123);
    Sample b = augment(s, 123);
    CHECK((a.image.array() == b.image.array()).all());
    CHECK((a.label->idx == b.label->idx).all());
    Sample c = augment(s, 124);
    CHECK(!(a.image.array() == c.image.array()).all());
  }

  SUBCASE("flips are involutions") {
    AugmentParams flip;
    flip.flip_h = true;
    Sample once = apply_augment(s, flip);
    Sample twice = apply_augment(once, flip);
    CHECK((twice.image.array() == s.image.array()).all());
    CHECK((twice.label->idx == s.label->idx).all());

    AugmentParams vflip;
    vflip.flip_v = true;
    Sample v2 = apply_augment(apply_augment(s, vflip), vflip);
    CHECK((v2.image.array() == s.image.array()).all());
  }

  SUBCASE("no new class indices appear under any transform") {
    Rng rng(42);
    for (int t = 0; t < 10; ++t) {
      Sample a = augment(s, 1000 + t);
      std::set<int> before, after;
      for (std::int64_t i = 0; i < s.label->idx.size(); ++i)
        before.insert(s.label->idx[i]);
      for (std::int64_t i = 0; i < a.label->idx.size(); ++i)
        after.insert(a.label->idx[i]);
      for (int c : after) CHECK(before.count(c) == 1);
    }
  }

  SUBCASE("spatial extents never change") {
    Sample a = augment(s, 5);
    CHECK(a.image.shape() == s.image.shape());
    CHECK(a.label->h == s.label->h);
    CHECK(a.label->w == s.label->w);
  }
}

TEST_CASE("make_split") {
  SyntheticSpec spec;
  spec.seed = 13;
  // labeled pool 75 with 15 test => 60 eligible
  Dataset ds = build_dataset(spec, 150, 0.5, 0.2);
  REQUIRE(ds.labeled_pool.size() == 75);
  REQUIRE(ds.test_ids.size() == 15);
  REQUIRE(ds.unlabeled_pool.size() == 75);

  SUBCASE("ratio 10% of a 60-sample pool: 6 labeled = 5 train + 1 validation") {
    DatasetSplit sp = make_split(ds, 10, 0, 99);
    CHECK(sp.labeled_train.size() == 5);
    CHECK(sp.validation.size() == 1);
    CHECK(sp.unlabeled_train.size() == 75);
    CHECK(sp.test.size() == 15);
  }

  SUBCASE("ratio 100% uses the whole eligible pool minus validation") {
    DatasetSplit sp = make_split(ds, 100, 0, 99);
    CHECK(sp.labeled_train.size() + sp.validation.size() == 60);
    CHECK(sp.validation.size() == 15);  // 25% of the chosen set
  }

  SUBCASE("partitions are disjoint and cover the dataset") {
    DatasetSplit sp = make_split(ds, 25, 1, 99);
    std::set<int> seen;
    auto add_all = [&](const std::vector<int>& v) {
      for (int id : v) {
        CHECK(seen.count(id) == 0);
        seen.insert(id);
      }
    };
    add_all(sp.labeled_train);
    add_all(sp.validation);
    add_all(sp.unlabeled_train);
    add_all(sp.test);
    // unsampled eligible ids are the only ones missing
    CHECK(seen.size() == sp.labeled_train.size() + sp.validation.size() +
                             sp.unlabeled_train.size() + sp.test.size());
    for (int id : seen) CHECK(id >= 0);
    const std::size_t k = sp.labeled_train.size() + sp.validation.size();
    CHECK(seen.size() == 75 + 15 + k);
  }

  SUBCASE("repeats draw different labeled subsets, identical test set") {
    DatasetSplit a = make_split(ds, 10, 0, 99);
    DatasetSplit b = make_split(ds, 10, 1, 99);
    DatasetSplit c = make_split(ds, 10, 2, 99);
    CHECK(a.test == b.test);
    CHECK(b.test == c.test);
    CHECK((a.labeled_train != b.labeled_train ||
           a.validation != b.validation));
    CHECK((b.labeled_train != c.labeled_train ||
           b.validation != c.validation));
    // same repeat is reproducible
    DatasetSplit a2 = make_split(ds, 10, 0, 99);
    CHECK(a.labeled_train == a2.labeled_train);
    CHECK(a.validation == a2.validation);
  }

  SUBCASE("too-small labeled sets are rejected with the minimum named") {
    SyntheticSpec small_spec;
    small_spec.seed = 1;
    small_spec.size = 32;
    Dataset small = build_dataset(small_spec, 20, 0.5, 0.2);
    try {
      make_split(small, 5, 0, 1);  // floor(0.05 * 8) = 0
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("minimum of 2") != std::string::npos);
    }
  }
}

TEST_CASE("add_gaussian_noise") {
  Rng rng(43);
  Grid4 img(1, 1, 32, 32);
  for (std::int64_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  img = normalize_intensity(img);

  SUBCASE("sigma must be positive") {
    CHECK_THROWS_AS(add_gaussian_noise(img, 0.0, 1), DataError);
    CHECK_THROWS_AS(add_gaussian_noise(img, -0.1, 1), DataError);
  }

  SUBCASE("vanishing sigma approaches the identity") {
    NoisyImage out = add_gaussian_noise(img, 1e-9, 1);
    CHECK((out.image.array() - img.array()).abs().maxCoeff() < 1e-6);
  }

  SUBCASE("output bounds stay in [0,1]") {
    for (double sigma : {0.01, 0.05, 0.2}) {
      NoisyImage out = add_gaussian_noise(img, sigma, 2);
      CHECK(out.image.array().minCoeff() >= 0.0);
      CHECK(out.image.array().maxCoeff() <= 1.0);
    }
  }

  SUBCASE("SNR is mean/sigma and decreases with sigma") {
    double prev = 1e18;
    for (double sigma : {0.01, 0.025, 0.05, 0.1, 0.2}) {
      NoisyImage out = add_gaussian_noise(img, sigma, 3);
      CHECK(out.snr == doctest::Approx(img.array().mean() / sigma));
      CHECK(out.snr < prev);
      prev = out.snr;
    }
  }

  SUBCASE("a 0.27-mean image at sigma 0.05 lands near SNR 5.4") {
    Grid4 flat = Grid4::constant({1, 1, 16, 16}, 0.27);
    // keep one dark and one bright pixel so normalization is anchored
    flat[0] = 0.0;
    flat[1] = 1.0;
    NoisyImage out = add_gaussian_noise(flat, 0.05, 4);
    CHECK(out.snr == doctest::Approx(flat.array().mean() / 0.05).epsilon(1e-12));
    CHECK(out.snr > 5.0);
    CHECK(out.snr < 5.8);
  }
}

TEST_CASE("dataset disk round trip") {
  SyntheticSpec spec;
  spec.seed = 21;
  spec.size = 32;
  Dataset ds = build_dataset(spec, 10, 0.6, 0.2);
  const std::string dir = (fs::temp_directory_path() / "uats_test_ds").string();
  fs::remove_all(dir);
  save_dataset(ds, dir);

  SUBCASE("loads back bit-exact") {
    Dataset got = load_dataset(dir);
    CHECK(got.samples.size() == ds.samples.size());
    CHECK(got.labeled_pool == ds.labeled_pool);
    CHECK(got.unlabeled_pool == ds.unlabeled_pool);
    CHECK(got.test_ids == ds.test_ids);
    for (const auto& s : ds.samples) {
      const Sample& g = got.by_id(s.id);
      CHECK((g.image.array() == s.image.array()).all());
      CHECK(g.label.has_value() == s.label.has_value());
      if (s.label) CHECK((g.label->idx == s.label->idx).all());
    }
  }

  SUBCASE("unlabeled pool has no label files or labels") {
    Dataset got = load_dataset(dir);
    for (int id : got.unlabeled_pool) {
      CHECK(!got.by_id(id).label.has_value());
      CHECK(!fs::exists(fs::path(dir) / ("lbl_" + std::to_string(id) + ".bin")));
    }
  }

  SUBCASE("rewriting produces identical bytes") {
    const std::string dir2 =
        (fs::temp_directory_path() / "uats_test_ds2").string();
    fs::remove_all(dir2);
    save_dataset(ds, dir2);
    for (const auto& entry : fs::directory_iterator(dir)) {
      const auto other = fs::path(dir2) / entry.path().filename();
      std::ifstream a(entry.path(), std::ios::binary);
      std::ifstream b(other, std::ios::binary);
      std::ostringstream sa, sb;
      sa << a.rdbuf();
      sb << b.rdbuf();
      CHECK(sa.str() == sb.str());
    }
    CHECK(manifest_hash(dir) == manifest_hash(dir2));
    fs::remove_all(dir2);
  }

  fs::remove_all(dir);
}
