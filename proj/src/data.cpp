#include "uats/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "uats/errors.hpp"

namespace fs = std::filesystem;

namespace uats {

Grid4 one_hot(const LabelMap& label, int num_classes) {
  Grid4 out(1, num_classes, label.h, label.w);
  for (int y = 0; y < label.h; ++y)
    for (int x = 0; x < label.w; ++x)
      out.at(0, label.at(y, x), y, x) = 1.0;
  return out;
}

LabelMap argmax_label(const Grid4& probs, int batch_index) {
  const Shape4 s = probs.shape();
  LabelMap out(s.h, s.w);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      int best = 0;
      double best_v = probs.at(batch_index, 0, y, x);
      for (int c = 1; c < s.c; ++c) {
        const double v = probs.at(batch_index, c, y, x);
        if (v > best_v) {  // ties keep the lower class index
          best_v = v;
          best = c;
        }
      }
      out.at(y, x) = static_cast<std::uint8_t>(best);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

namespace {

struct Geometry {
  double cx, cy;        // gland center
  double ga, gb;        // gland semi-axes
  double theta;         // gland rotation (radians)
  double tz_cx, tz_cy;  // blob center (shifted anterior)
  double tz_a, tz_b;
  double tube_x;        // tube column
  double tube_half_w;
  double tube_y0, tube_y1;
  double tube_amp, tube_wave, tube_phase;  // lateral wiggle of the tube
  double cres_et_max;                      // crescent radial extent
  double cres_dx_max;                      // crescent angular extent
};

Geometry draw_geometry(Rng& rng, const SyntheticSpec& spec) {
  const double n = spec.size;
  const double j = spec.shape_jitter;
  Geometry g;
  g.cx = n * 0.5 + rng.uniform(-0.03, 0.03) * n * j;
  g.cy = n * 0.5 + rng.uniform(-0.03, 0.03) * n * j;
  g.ga = n * (0.33 + rng.uniform(-0.025, 0.025) * j);
  g.gb = n * (0.27 + rng.uniform(-0.025, 0.025) * j);
  g.theta = rng.uniform(-0.25, 0.25) * j;
  const double tz_scale = 0.72 + rng.uniform(-0.03, 0.03) * j;
  g.tz_a = g.ga * tz_scale;
  g.tz_b = g.gb * tz_scale;
  g.tz_cx = g.cx + rng.uniform(-0.01, 0.01) * n * j;
  g.tz_cy = g.cy - 0.03 * n + rng.uniform(-0.01, 0.01) * n * j;
  g.tube_x = g.tz_cx + rng.uniform(-0.015, 0.015) * n * j;
  g.tube_half_w = 1.3;
  g.tube_y0 = g.tz_cy - 0.05 * n;
  g.tube_y1 = g.cy + g.gb * 0.85;
  // per-sample course of the tube: gentle lateral wiggle
  g.tube_amp = rng.uniform(0.5, 2.2);
  g.tube_wave = n * rng.uniform(0.35, 0.6);
  g.tube_phase = rng.uniform(0.0, 2.0 * M_PI);
  // per-sample crescent extent
  g.cres_et_max = rng.uniform(1.35, 1.6);
  g.cres_dx_max = rng.uniform(0.30, 0.45);
  return g;
}

// squared elliptical radius in the rotated frame
double erad2(double x, double y, double cx, double cy, double a, double b,
             double theta) {
  const double dx = x - cx, dy = y - cy;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double u = ct * dx + st * dy;
  const double v = -st * dx + ct * dy;
  return (u / a) * (u / a) + (v / b) * (v / b);
}

LabelMap rasterize(const Geometry& g, int n) {
  LabelMap lbl(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double eg = erad2(x, y, g.cx, g.cy, g.ga, g.gb, g.theta);
      if (eg > 1.0) continue;  // background
      const double et =
          erad2(x, y, g.tz_cx, g.tz_cy, g.tz_a, g.tz_b, g.theta);
      std::uint8_t cls = 2;            // band
      if (et <= 1.0) cls = 1;          // blob
      // crescent: a thin anterior cap hugging the blob boundary
      const double dxr = x - g.tz_cx, dyr = y - g.tz_cy;
      if (et > 1.0 && et <= g.cres_et_max && dyr < 0.0 &&
          std::abs(dxr) <= g.cres_dx_max * g.tz_a)
        cls = 4;
      // tube overrides everything inside the gland; it wanders laterally
      const double tube_center =
          g.tube_x +
          g.tube_amp * std::sin(2.0 * M_PI * (y - g.tube_y0) / g.tube_wave +
                                g.tube_phase);
      if (std::abs(x - tube_center) <= g.tube_half_w && y >= g.tube_y0 &&
          y <= g.tube_y1 && et <= 1.0)
        cls = 3;
      lbl.at(y, x) = cls;
    }
  }
  return lbl;
}

constexpr double kBaseIntensity[5] = {0.15, 0.55, 0.78, 0.33, 0.27};

}  // namespace

std::vector<Sample> generate_dataset(const SyntheticSpec& spec, int n) {
  if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");
  std::vector<Sample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t sample_seed = mix_seed(spec.seed, static_cast<std::uint64_t>(i));
    Rng rng(sample_seed);
    const Geometry g = draw_geometry(rng, spec);
    LabelMap lbl = rasterize(g, spec.size);

    Grid4 img(1, 1, spec.size, spec.size);
    const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    for (int y = 0; y < spec.size; ++y)
      for (int x = 0; x < spec.size; ++x) {
        double v = kBaseIntensity[lbl.at(y, x)];
        v += rng.normal(0.0, spec.texture_noise);
        const double fx = static_cast<double>(x) / spec.size;
        const double fy = static_cast<double>(y) / spec.size;
        v += spec.bias_amplitude *
             (0.6 * (gx * (fx - 0.5) + gy * (fy - 0.5)) +
              0.4 * std::sin(2.0 * M_PI * fx + phase));
        img.at(0, 0, y, x) = std::clamp(v, 0.0, 1.0);
      }

    Sample s;
    s.id = i;
    s.image = normalize_intensity(img);
    s.label = std::move(lbl);
    s.seed = sample_seed;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing and augmentation
// ---------------------------------------------------------------------------

namespace {

// nearest-rank order statistic; keeps extreme outliers out of the clip bounds
double quantile(std::vector<double>& sorted, double p) {
  const auto idx = static_cast<std::size_t>(
      std::lround(p * (static_cast<double>(sorted.size()) - 1.0)));
  return sorted[std::min(idx, sorted.size() - 1)];
}

}  // namespace

Grid4 normalize_intensity(const Grid4& image) {
  if (!image.all_finite())
    throw DataError("normalize_intensity: non-finite input");
  std::vector<double> v(image.data(), image.data() + image.size());
  std::sort(v.begin(), v.end());
  const double p1 = quantile(v, 0.01);
  const double p99 = quantile(v, 0.99);
  Grid4 out = image;
  out.array() = out.array().max(p1).min(p99);
  const double lo = out.array().minCoeff();
  const double hi = out.array().maxCoeff();
  if (hi - lo <= 0.0) {
    out.set_zero();
    return out;
  }
  out.array() = (out.array() - lo) / (hi - lo);
  return out;
}

AugmentParams draw_augment_params(Rng& rng) {
  AugmentParams p;
  p.flip_h = rng.bernoulli(0.5);
  p.flip_v = rng.bernoulli(0.5);
  p.angle_deg = rng.uniform(-15.0, 15.0);
  p.scale = rng.uniform(0.9, 1.1);
  return p;
}

namespace {

// inverse augmentation map: output pixel -> source coordinates
// (forward transform order: flips, then rotation, then scaling, about center)
struct InverseMap {
  double cx, cy, ct, st, fx, fy, inv_s;

  InverseMap(int h, int w, const AugmentParams& p)
      : cx((w - 1) * 0.5),
        cy((h - 1) * 0.5),
        ct(std::cos(p.angle_deg * M_PI / 180.0)),
        st(std::sin(p.angle_deg * M_PI / 180.0)),
        fx(p.flip_h ? -1.0 : 1.0),
        fy(p.flip_v ? -1.0 : 1.0),
        inv_s(1.0 / p.scale) {}

  void operator()(int x, int y, double* qx, double* qy) const {
    const double px = (x - cx) * inv_s, py = (y - cy) * inv_s;
    const double rx = ct * px + st * py, ry = -st * px + ct * py;
    *qx = fx * rx + cx;
    *qy = fy * ry + cy;
  }
};

}  // namespace

Grid4 transform_image(const Grid4& image, const AugmentParams& p) {
  const Shape4 sh = image.shape();
  const InverseMap inv(sh.h, sh.w, p);
  Grid4 out(sh);
  for (int y = 0; y < sh.h; ++y)
    for (int x = 0; x < sh.w; ++x) {
      double qx, qy;
      inv(x, y, &qx, &qy);
      const int x0 = static_cast<int>(std::floor(qx));
      const int y0 = static_cast<int>(std::floor(qy));
      const double ax = qx - x0, ay = qy - y0;
      for (int c = 0; c < sh.c; ++c) {
        double acc = 0.0;  // zero padding outside the frame
        for (int dy = 0; dy <= 1; ++dy)
          for (int dx = 0; dx <= 1; ++dx) {
            const int yy = y0 + dy, xx = x0 + dx;
            if (yy < 0 || yy >= sh.h || xx < 0 || xx >= sh.w) continue;
            const double wgt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
            acc += wgt * image.at(0, c, yy, xx);
          }
        out.at(0, c, y, x) = acc;
      }
    }
  return out;
}

LabelMap transform_label(const LabelMap& label, const AugmentParams& p) {
  const InverseMap inv(label.h, label.w, p);
  LabelMap out(label.h, label.w);
  for (int y = 0; y < label.h; ++y)
    for (int x = 0; x < label.w; ++x) {
      double qx, qy;
      inv(x, y, &qx, &qy);
      const int nx = static_cast<int>(std::lround(qx));
      const int ny = static_cast<int>(std::lround(qy));
      out.at(y, x) = (nx >= 0 && nx < label.w && ny >= 0 && ny < label.h)
                         ? label.at(ny, nx)
                         : 0;
    }
  return out;
}

Sample apply_augment(const Sample& s, const AugmentParams& p) {
  Sample out;
  out.id = s.id;
  out.seed = s.seed;
  out.image = transform_image(s.image, p);
  if (s.label) out.label = transform_label(*s.label, p);
  return out;
}

Sample augment(const Sample& s, std::uint64_t seed) {
  Rng rng(seed);
  return apply_augment(s, draw_augment_params(rng));
}

NoisyImage add_gaussian_noise(const Grid4& image, double sigma,
                              std::uint64_t seed) {
  if (sigma <= 0.0)
    throw DataError("add_gaussian_noise: sigma must be positive");
  Rng rng(seed);
  Grid4 noisy = image;
  for (std::int64_t i = 0; i < noisy.size(); ++i)
    noisy[i] += rng.normal(0.0, sigma);
  const double snr = image.array().mean() / sigma;
  const double lo = noisy.array().minCoeff();
  const double hi = noisy.array().maxCoeff();
  if (hi - lo > 0.0)
    noisy.array() = (noisy.array() - lo) / (hi - lo);
  return {std::move(noisy), snr};
}

// ---------------------------------------------------------------------------
// Dataset assembly, splitting and disk format
// ---------------------------------------------------------------------------

const Sample& Dataset::by_id(int id) const {
  for (const auto& s : samples)
    if (s.id == id) return s;
  throw DataError("dataset: unknown sample id " + std::to_string(id));
}

Sample& Dataset::by_id(int id) {
  return const_cast<Sample&>(static_cast<const Dataset*>(this)->by_id(id));
}

Dataset build_dataset(const SyntheticSpec& spec, int n, double labeled_frac,
                      double test_frac) {
  Dataset ds;
  ds.spec = spec;
  ds.samples = generate_dataset(spec, n);

  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i;
  Rng rng(mix_seed(spec.seed, 0xD5ULL));
  rng.shuffle(ids);

  const int n_labeled = static_cast<int>(std::lround(labeled_frac * n));
  const int n_test = static_cast<int>(std::floor(test_frac * n_labeled));
  for (int i = 0; i < n; ++i) {
    if (i < n_labeled) {
      ds.labeled_pool.push_back(ids[i]);
      if (i < n_test) ds.test_ids.push_back(ids[i]);
    } else {
      ds.unlabeled_pool.push_back(ids[i]);
      ds.by_id(ids[i]).label.reset();
    }
  }
  std::sort(ds.labeled_pool.begin(), ds.labeled_pool.end());
  std::sort(ds.unlabeled_pool.begin(), ds.unlabeled_pool.end());
  std::sort(ds.test_ids.begin(), ds.test_ids.end());
  return ds;
}

DatasetSplit make_split(const Dataset& ds, int ratio_percent, int repeat,
                        std::uint64_t seed) {
  std::vector<int> eligible;
  for (int id : ds.labeled_pool)
    if (!std::binary_search(ds.test_ids.begin(), ds.test_ids.end(), id))
      eligible.push_back(id);

  const int k = static_cast<int>(std::floor(
      ratio_percent / 100.0 * static_cast<double>(eligible.size())));
  if (k < 2)
    throw DataError(
        "make_split: ratio " + std::to_string(ratio_percent) + "% of pool " +
        std::to_string(eligible.size()) +
        " yields fewer than the minimum of 2 labeled samples");

  Rng rng(mix_seed(seed, 0x5117ULL + static_cast<std::uint64_t>(repeat)));
  rng.shuffle(eligible);

  DatasetSplit split;
  split.ratio_percent = ratio_percent;
  split.repeat = repeat;
  const int n_val = std::max(1, k / 4);
  for (int i = 0; i < k - n_val; ++i) split.labeled_train.push_back(eligible[i]);
  for (int i = k - n_val; i < k; ++i) split.validation.push_back(eligible[i]);
  split.unlabeled_train = ds.unlabeled_pool;
  split.test = ds.test_ids;
  std::sort(split.labeled_train.begin(), split.labeled_train.end());
  std::sort(split.validation.begin(), split.validation.end());
  return split;
}

namespace {

void write_u32(std::ofstream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_image_file(const fs::path& p, const Grid4& img) {
  std::ofstream os(p, std::ios::binary);
  os.write("UATSIMG1", 8);
  const Shape4 s = img.shape();
  write_u32(os, static_cast<std::uint32_t>(s.h));
  write_u32(os, static_cast<std::uint32_t>(s.w));
  os.write(reinterpret_cast<const char*>(img.data()),
           static_cast<std::streamsize>(img.size() * sizeof(double)));
}

Grid4 read_image_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "UATSIMG1")
    throw DataError("bad image file " + p.string());
  const int h = static_cast<int>(read_u32(is));
  const int w = static_cast<int>(read_u32(is));
  Grid4 img(1, 1, h, w);
  is.read(reinterpret_cast<char*>(img.data()),
          static_cast<std::streamsize>(img.size() * sizeof(double)));
  if (!is) throw DataError("truncated image file " + p.string());
  return img;
}

void write_label_file(const fs::path& p, const LabelMap& lbl, int classes) {
  std::ofstream os(p, std::ios::binary);
  os.write("UATSLBL1", 8);
  write_u32(os, static_cast<std::uint32_t>(lbl.h));
  write_u32(os, static_cast<std::uint32_t>(lbl.w));
  write_u32(os, static_cast<std::uint32_t>(classes));
  os.write(reinterpret_cast<const char*>(lbl.idx.data()),
           static_cast<std::streamsize>(lbl.idx.size()));
}

LabelMap read_label_file(const fs::path& p, int expect_classes) {
  std::ifstream is(p, std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "UATSLBL1")
    throw DataError("bad label file " + p.string());
  const int h = static_cast<int>(read_u32(is));
  const int w = static_cast<int>(read_u32(is));
  const int classes = static_cast<int>(read_u32(is));
  if (classes != expect_classes)
    throw DataError("label file " + p.string() + " has " +
                    std::to_string(classes) + " classes, expected " +
                    std::to_string(expect_classes));
  LabelMap lbl(h, w);
  is.read(reinterpret_cast<char*>(lbl.idx.data()),
          static_cast<std::streamsize>(lbl.idx.size()));
  if (!is) throw DataError("truncated label file " + p.string());
  return lbl;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  std::ostringstream man;
  man << "# uats dataset manifest\n";
  man << "version 1\n";
  man << "seed " << ds.spec.seed << "\n";
  man << "size " << ds.spec.size << "\n";
  man << "classes " << ds.spec.num_classes << "\n";
  man << "texture_noise " << ds.spec.texture_noise << "\n";
  man << "bias_amplitude " << ds.spec.bias_amplitude << "\n";
  man << "shape_jitter " << ds.spec.shape_jitter << "\n";
  man << "count " << ds.samples.size() << "\n";
  for (const auto& s : ds.samples) {
    const bool labeled = std::binary_search(ds.labeled_pool.begin(),
                                            ds.labeled_pool.end(), s.id);
    const bool test =
        std::binary_search(ds.test_ids.begin(), ds.test_ids.end(), s.id);
    man << "sample " << s.id << " " << (labeled ? "labeled" : "unlabeled")
        << " " << (test ? "test" : "train") << " " << s.seed << "\n";
  }
  std::ofstream os(fs::path(dir) / "manifest.txt", std::ios::binary);
  os << man.str();
  os.close();

  for (const auto& s : ds.samples) {
    write_image_file(fs::path(dir) / ("img_" + std::to_string(s.id) + ".bin"),
                     s.image);
    if (s.label)
      write_label_file(fs::path(dir) / ("lbl_" + std::to_string(s.id) + ".bin"),
                       *s.label, ds.spec.num_classes);
  }
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.txt");
  if (!is) throw DataError("no manifest in " + dir);
  Dataset ds;
  std::string line;
  int count = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "version") {
      int v;
      ls >> v;
      if (v != 1)
        throw DataError("manifest version " + std::to_string(v) +
                        " unsupported (expected 1)");
    } else if (key == "seed") {
      ls >> ds.spec.seed;
    } else if (key == "size") {
      ls >> ds.spec.size;
    } else if (key == "classes") {
      ls >> ds.spec.num_classes;
    } else if (key == "texture_noise") {
      ls >> ds.spec.texture_noise;
    } else if (key == "bias_amplitude") {
      ls >> ds.spec.bias_amplitude;
    } else if (key == "shape_jitter") {
      ls >> ds.spec.shape_jitter;
    } else if (key == "count") {
      ls >> count;
    } else if (key == "sample") {
      int id;
      std::string pool, role;
      std::uint64_t seed;
      ls >> id >> pool >> role >> seed;
      Sample s;
      s.id = id;
      s.seed = seed;
      s.image =
          read_image_file(fs::path(dir) / ("img_" + std::to_string(id) + ".bin"));
      if (pool == "labeled") {
        s.label = read_label_file(
            fs::path(dir) / ("lbl_" + std::to_string(id) + ".bin"),
            ds.spec.num_classes);
        ds.labeled_pool.push_back(id);
        if (role == "test") ds.test_ids.push_back(id);
      } else {
        ds.unlabeled_pool.push_back(id);
      }
      ds.samples.push_back(std::move(s));
    }
  }
  if (static_cast<int>(ds.samples.size()) != count)
    throw DataError("manifest count " + std::to_string(count) +
                    " does not match " + std::to_string(ds.samples.size()) +
                    " samples");
  std::sort(ds.labeled_pool.begin(), ds.labeled_pool.end());
  std::sort(ds.unlabeled_pool.begin(), ds.unlabeled_pool.end());
  std::sort(ds.test_ids.begin(), ds.test_ids.end());
  return ds;
}

std::uint64_t manifest_hash(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.txt", std::ios::binary);
  if (!is) throw DataError("no manifest in " + dir);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char ch;
  while (is.get(ch)) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace uats
