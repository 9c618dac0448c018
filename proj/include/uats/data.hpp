#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uats/grid4.hpp"
#include "uats/rng.hpp"

namespace uats {

struct LabelMap {
  int h = 0, w = 0;
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> idx;

  LabelMap() = default;
  LabelMap(int h_, int w_) : h(h_), w(w_), idx(h_ * static_cast<std::int64_t>(w_)) {
    idx.setZero();
  }
  std::uint8_t at(int y, int x) const { return idx[static_cast<std::int64_t>(y) * w + x]; }
  std::uint8_t& at(int y, int x) { return idx[static_cast<std::int64_t>(y) * w + x]; }
};

Grid4 one_hot(const LabelMap& label, int num_classes);
LabelMap argmax_label(const Grid4& probs, int batch_index = 0);

struct Sample {
  int id = 0;
  Grid4 image;  // (1,1,h,w), values in [0,1]
  std::optional<LabelMap> label;
  std::uint64_t seed = 0;
};

// Synthetic multi-class benchmark: background, a large central blob, a
// surrounding band, a thin tube and a small crescent, with class frequencies
// background > blob > band > tube ~ crescent.
struct SyntheticSpec {
  int size = 64;
  int num_classes = 5;
  double texture_noise = 0.05;
  double bias_amplitude = 0.08;
  double shape_jitter = 1.0;
  std::uint64_t seed = 7;
};

std::vector<Sample> generate_dataset(const SyntheticSpec& spec, int n);

// Clip at the 1st/99th intensity percentile, then min-max scale to [0,1].
// A constant image maps to all zeros.
Grid4 normalize_intensity(const Grid4& image);

struct AugmentParams {
  bool flip_h = false;
  bool flip_v = false;
  double angle_deg = 0.0;
  double scale = 1.0;
};

AugmentParams draw_augment_params(Rng& rng);
Grid4 transform_image(const Grid4& image, const AugmentParams& p);   // bilinear
LabelMap transform_label(const LabelMap& label, const AugmentParams& p);  // nearest
// Identical spatial transform on image (bilinear) and label (nearest).
Sample apply_augment(const Sample& s, const AugmentParams& p);
Sample augment(const Sample& s, std::uint64_t seed);

struct NoisyImage {
  Grid4 image;  // re-normalized to [0,1]
  double snr;   // mean(image)/sigma, before renormalization
};

NoisyImage add_gaussian_noise(const Grid4& image, double sigma,
                              std::uint64_t seed);

struct Dataset {
  SyntheticSpec spec;
  std::vector<Sample> samples;
  std::vector<int> labeled_pool;    // ids, includes test
  std::vector<int> unlabeled_pool;  // ids, labels absent
  std::vector<int> test_ids;        // fixed subset of the labeled pool

  const Sample& by_id(int id) const;
  Sample& by_id(int id);
};

Dataset build_dataset(const SyntheticSpec& spec, int n, double labeled_frac,
                      double test_frac);

struct DatasetSplit {
  std::vector<int> labeled_train;
  std::vector<int> unlabeled_train;
  std::vector<int> validation;  // labeled
  std::vector<int> test;
  int ratio_percent = 100;
  int repeat = 0;
};

// Samples a ratio of the non-test labeled pool (seeded by repeat), holds out
// 25% of the chosen set for validation (at least one sample), keeps the test
// set fixed.
DatasetSplit make_split(const Dataset& ds, int ratio_percent, int repeat,
                        std::uint64_t seed);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);
std::uint64_t manifest_hash(const std::string& dir);

}  // namespace uats
