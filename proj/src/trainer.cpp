#include "uats/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "uats/errors.hpp"

namespace uats {

// ---------------------------------------------------------------------------
// Variant registry
// ---------------------------------------------------------------------------

const std::string& VariantSpec::valid_ids() {
  static const std::string ids = "B, C, D, E, F, G, H, I, J";
  return ids;
}

VariantSpec VariantSpec::registry(char id) {
  VariantSpec v;
  v.id = id;
  switch (id) {
    case 'B':  // supervised only
      break;
    case 'C':  // temporal ensembling: consistency everywhere, no pseudo task
      v.use_consistency = true;
      v.use_ensemble_pl = true;
      v.update_rule = UpdateRule::every_epoch;
      break;
    case 'D':  // self-learning, unconditional refresh every k epochs
      v.use_unlabeled_task = true;
      v.update_rule = UpdateRule::every_k_epochs;
      break;
    case 'E':  // self-learning, refresh only on validation improvement
      v.use_unlabeled_task = true;
      v.update_rule = UpdateRule::on_val_improve;
      break;
    case 'F':  // full UATS, MC-dropout entropy confidence
      v.use_unlabeled_task = true;
      v.use_consistency = true;
      v.use_confidence = true;
      v.use_ensemble_pl = true;
      v.update_rule = UpdateRule::class_gated;
      v.confidence_measure = ConfidenceMeasure::mc_entropy;
      break;
    case 'G':  // full UATS, softmax confidence
      v.use_unlabeled_task = true;
      v.use_consistency = true;
      v.use_confidence = true;
      v.use_ensemble_pl = true;
      v.update_rule = UpdateRule::class_gated;
      break;
    case 'H':  // UATS without the consistency loss
      v.use_unlabeled_task = true;
      v.use_confidence = true;
      v.use_ensemble_pl = true;
      v.update_rule = UpdateRule::class_gated;
      break;
    case 'I':  // UATS without confidence selection (n = 100%)
      v.use_unlabeled_task = true;
      v.use_consistency = true;
      v.use_ensemble_pl = true;
      v.update_rule = UpdateRule::class_gated;
      break;
    case 'J':  // UATS with current predictions as pseudo labels
      v.use_unlabeled_task = true;
      v.use_consistency = true;
      v.use_confidence = true;
      v.update_rule = UpdateRule::class_gated;
      break;
    default:
      throw ConfigError(std::string("unknown variant '") + id +
                        "'; valid ids: " + valid_ids());
  }
  return v;
}

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("train config: lr must be positive");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (patience >= max_epochs)
    throw ConfigError("train config: patience must be < max_epochs");
  if (alpha <= 0.0 || alpha >= 1.0)
    throw ConfigError("train config: alpha must be in (0,1)");
  if (lambda < 0.0) throw ConfigError("train config: lambda must be >= 0");
  if (pl_refresh_interval < 1)
    throw ConfigError("train config: pl_refresh_interval must be >= 1");
  model.validate();
}

ClassSet default_class_set(int num_classes) {
  if (num_classes == 5) return ClassSet::synthetic5();
  ClassSet cs;
  for (int i = 0; i < num_classes; ++i) cs.names.push_back("c" + std::to_string(i));
  return cs;
}

// ---------------------------------------------------------------------------
// Shared evaluation helpers
// ---------------------------------------------------------------------------

namespace {

std::map<int, Grid4> predict_ids(const Model& model, const Dataset& ds,
                                 const std::vector<int>& ids, int batch_size) {
  std::map<int, Grid4> out;
  for (std::size_t i = 0; i < ids.size(); i += batch_size) {
    const std::size_t n = std::min<std::size_t>(batch_size, ids.size() - i);
    const Grid4& first = ds.by_id(ids[i]).image;
    Grid4 batch(static_cast<int>(n), 1, first.shape().h, first.shape().w);
    for (std::size_t k = 0; k < n; ++k)
      batch.plane(static_cast<int>(k), 0) = ds.by_id(ids[i + k]).image.plane(0, 0);
    const Grid4 probs = model.predict(batch);
    const Shape4 ps = probs.shape();
    for (std::size_t k = 0; k < n; ++k) {
      Grid4 one(1, ps.c, ps.h, ps.w);
      for (int c = 0; c < ps.c; ++c)
        one.plane(0, c) = probs.plane(static_cast<int>(k), c);
      out.emplace(ids[i + k], std::move(one));
    }
  }
  return out;
}

}  // namespace

std::vector<double> validation_loss(const Model& model, const Dataset& ds,
                                    const std::vector<int>& ids,
                                    const ClassSet& classes, int batch_size) {
  if (ids.empty()) throw DataError("validation_loss: empty sample list");
  const Grid4& first = ds.by_id(ids[0]).image;
  const int h = first.shape().h, w = first.shape().w;
  const int n = static_cast<int>(ids.size());
  Grid4 probs(n, classes.size(), h, w);
  Grid4 targets(n, classes.size(), h, w);

  const auto preds = predict_ids(model, ds, ids, batch_size);
  for (int k = 0; k < n; ++k) {
    const Sample& s = ds.by_id(ids[k]);
    if (!s.label)
      throw DataError("validation_loss: sample " + std::to_string(s.id) +
                      " has no label");
    const Grid4 oh = one_hot(*s.label, classes.size());
    const Grid4& p = preds.at(ids[k]);
    for (int c = 0; c < classes.size(); ++c) {
      probs.plane(k, c) = p.plane(0, c);
      targets.plane(k, c) = oh.plane(0, c);
    }
  }
  const Grid4 ones = Grid4::constant(probs.shape(), 1.0);
  std::vector<double> per_class_cdc;
  task_loss(targets, probs, ones, classes, &per_class_cdc, nullptr);
  std::vector<double> out(classes.size());
  for (int s = 0; s < classes.size(); ++s) out[s] = -per_class_cdc[s];
  return out;
}

std::vector<EvalRecord> evaluate_on_test(const Model& model, const Dataset& ds,
                                         const std::vector<int>& test_ids,
                                         const std::string& variant_name) {
  std::vector<EvalRecord> out;
  const auto preds = predict_ids(model, ds, test_ids, 4);
  for (int id : test_ids) {
    const Sample& s = ds.by_id(id);
    if (!s.label)
      throw DataError("evaluate_on_test: sample " + std::to_string(id) +
                      " has no label");
    const LabelMap pred = argmax_label(preds.at(id));
    auto recs = evaluate_labels(variant_name, id, pred, *s.label,
                                model.config().num_classes);
    out.insert(out.end(), recs.begin(), recs.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'U', 'A', 'T', 'S', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kFormatVersion = 1;

struct BinWriter {
  std::ostringstream os;

  void u8(std::uint8_t v) { os.write(reinterpret_cast<const char*>(&v), 1); }
  void i32(std::int32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
  void u32(std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
  void u64(std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
  void f64(double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void arr(const Eigen::ArrayXd& a) {
    u64(static_cast<std::uint64_t>(a.size()));
    os.write(reinterpret_cast<const char*>(a.data()),
             static_cast<std::streamsize>(a.size() * sizeof(double)));
  }
  void grid(const Grid4& g) {
    const Shape4 s = g.shape();
    i32(s.b);
    i32(s.c);
    i32(s.h);
    i32(s.w);
    os.write(reinterpret_cast<const char*>(g.data()),
             static_cast<std::streamsize>(g.size() * sizeof(double)));
  }
  void f64vec(const std::vector<double>& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (double x : v) f64(x);
  }
};

struct BinReader {
  std::string buf;
  std::size_t pos = 0;

  explicit BinReader(std::string b) : buf(std::move(b)) {}

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw DataError("checkpoint: truncated or corrupt file");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::int32_t i32() {
    need(4);
    std::int32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  double f64() {
    need(8);
    double v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  Eigen::ArrayXd arr() {
    const std::uint64_t n = u64();
    need(n * sizeof(double));
    Eigen::ArrayXd a(static_cast<std::int64_t>(n));
    std::memcpy(a.data(), buf.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    return a;
  }
  Grid4 grid() {
    const int b = i32(), c = i32(), h = i32(), w = i32();
    Grid4 g(b, c, h, w);
    need(g.size() * sizeof(double));
    std::memcpy(g.data(), buf.data() + pos, g.size() * sizeof(double));
    pos += g.size() * sizeof(double);
    return g;
  }
  std::vector<double> f64vec() {
    const std::uint32_t n = u32();
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
};

void write_model(BinWriter& w, Model& model) {
  const UNetConfig& c = model.config();
  w.i32(c.depth);
  w.i32(c.base_channels);
  w.i32(c.in_channels);
  w.i32(c.num_classes);
  w.f64(c.dropout_rate);
  w.u64(c.seed);
  auto params = model.params();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.str(p.name);
    w.arr(*p.value);
  }
  auto bufs = model.buffers();
  w.u32(static_cast<std::uint32_t>(bufs.size()));
  for (const auto& b : bufs) {
    w.str(b.name);
    w.arr(*b.value);
  }
}

Model read_model(BinReader& r) {
  UNetConfig c;
  c.depth = r.i32();
  c.base_channels = r.i32();
  c.in_channels = r.i32();
  c.num_classes = r.i32();
  c.dropout_rate = r.f64();
  c.seed = r.u64();
  Model model(c);
  const std::uint32_t np = r.u32();
  auto params = model.params();
  if (np != params.size())
    throw DataError("checkpoint: parameter count mismatch");
  for (auto& p : params) {
    const std::string name = r.str();
    if (name != p.name)
      throw DataError("checkpoint: expected parameter " + p.name + ", found " +
                      name);
    Eigen::ArrayXd a = r.arr();
    if (a.size() != p.value->size())
      throw DataError("checkpoint: size mismatch for " + name);
    *p.value = a;
  }
  const std::uint32_t nb = r.u32();
  auto bufs = model.buffers();
  if (nb != bufs.size()) throw DataError("checkpoint: buffer count mismatch");
  for (auto& b : bufs) {
    const std::string name = r.str();
    if (name != b.name)
      throw DataError("checkpoint: expected buffer " + b.name + ", found " +
                      name);
    Eigen::ArrayXd a = r.arr();
    if (a.size() != b.value->size())
      throw DataError("checkpoint: size mismatch for " + name);
    *b.value = a;
  }
  return model;
}

void write_adam(BinWriter& w, const AdamState& adam) {
  w.f64(adam.lr);
  w.f64(adam.beta1);
  w.f64(adam.beta2);
  w.f64(adam.eps);
  w.u64(adam.t);
  w.u32(static_cast<std::uint32_t>(adam.m.size()));
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    w.arr(adam.m[i]);
    w.arr(adam.v[i]);
  }
}

AdamState read_adam(BinReader& r) {
  AdamState adam;
  adam.lr = r.f64();
  adam.beta1 = r.f64();
  adam.beta2 = r.f64();
  adam.eps = r.f64();
  adam.t = r.u64();
  const std::uint32_t n = r.u32();
  adam.m.resize(n);
  adam.v.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    adam.m[i] = r.arr();
    adam.v[i] = r.arr();
  }
  return adam;
}

void write_grid_map(BinWriter& w, const std::map<int, Grid4>& m) {
  w.u32(static_cast<std::uint32_t>(m.size()));
  for (const auto& [id, g] : m) {
    w.i32(id);
    w.grid(g);
  }
}

std::map<int, Grid4> read_grid_map(BinReader& r) {
  std::map<int, Grid4> m;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const int id = r.i32();
    m.emplace(id, r.grid());
  }
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Training session
// ---------------------------------------------------------------------------

struct TrainSession::Impl {
  TrainConfig cfg;
  VariantSpec variant;  // id 'B' means plain Stage I
  const Dataset* ds = nullptr;
  const DatasetSplit* split = nullptr;
  ClassSet classes;
  bool stage2 = false;

  Model model;
  AdamState adam;
  Rng aug_rng, shuffle_rng, dropout_rng;
  int epoch = 0;
  bool done = false;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int since_best = 0;
  std::vector<double> best_val_per_class;
  std::vector<Eigen::ArrayXd> best_snapshot;
  double prev_task = 0.0, prev_cons = 0.0;
  int last_refresh_epoch = 0;
  std::vector<double> last_val_pc;  // validation at the end of last epoch
  bool last_improved = false;
  EnsembleBuffer ensemble;
  std::map<int, Grid4> pl_source;
  std::vector<EpochLog> logs;

  void init_rngs() {
    const std::uint64_t base =
        stage2 ? mix_seed(cfg.seed, 0x5EC0 + static_cast<unsigned char>(variant.id))
               : cfg.seed;
    aug_rng = Rng(mix_seed(base, 11));
    shuffle_rng = Rng(mix_seed(base, 12));
    dropout_rng = Rng(mix_seed(base, 13));
  }

  std::vector<std::uint64_t> draw_dropout_seeds() {
    std::vector<std::uint64_t> seeds(model.dropout_sites());
    for (auto& s : seeds) s = dropout_rng.raw();
    return seeds;
  }

  void snapshot_best(double val, const std::vector<double>& val_pc) {
    best_val = val;
    best_epoch = epoch;
    best_val_per_class = val_pc;
    best_snapshot = model.state_snapshot();
    since_best = 0;
  }

  void track_validation(double val, const std::vector<double>& val_pc) {
    const bool improved = val < best_val;
    if (improved)
      snapshot_best(val, val_pc);
    else
      ++since_best;
    last_improved = improved;
    last_val_pc = val_pc;
  }

  void run_stage1_epoch();
  void run_stage2_epoch();

  void step_batches(const std::vector<int>& ids, bool with_unlabeled,
                    const std::map<int, LabelMap>* pseudo,
                    const std::map<int, Grid4>* masks, double lambda_eff,
                    bool compute_cons, double* mean_task, double* mean_cons);
};

namespace {

// nearest-neighbour resample of a multi-channel grid under the inverse
// augmentation map; out-of-frame voxels take pad[c]
Grid4 transform_grid_nearest(const Grid4& g, const AugmentParams& p,
                             const std::vector<double>& pad) {
  const Shape4 s = g.shape();
  const double cx = (s.w - 1) * 0.5, cy = (s.h - 1) * 0.5;
  const double theta = p.angle_deg * M_PI / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double fx = p.flip_h ? -1.0 : 1.0;
  const double fy = p.flip_v ? -1.0 : 1.0;
  const double inv_s = 1.0 / p.scale;
  Grid4 out(s);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const double px = (x - cx) * inv_s, py = (y - cy) * inv_s;
      const double rx = ct * px + st * py, ry = -st * px + ct * py;
      const int nx = static_cast<int>(std::lround(fx * rx + cx));
      const int ny = static_cast<int>(std::lround(fy * ry + cy));
      const bool in = nx >= 0 && nx < s.w && ny >= 0 && ny < s.h;
      for (int c = 0; c < s.c; ++c)
        out.at(0, c, y, x) = in ? g.at(0, c, ny, nx) : pad[c];
    }
  return out;
}

std::vector<double> onehot_background_pad(int classes) {
  std::vector<double> pad(classes, 0.0);
  pad[0] = 1.0;
  return pad;
}

}  // namespace

void TrainSession::Impl::step_batches(const std::vector<int>& ids,
                                      bool with_unlabeled,
                                      const std::map<int, LabelMap>* pseudo,
                                      const std::map<int, Grid4>* masks,
                                      double lambda_eff, bool compute_cons,
                                      double* mean_task, double* mean_cons) {
  const Shape4 img_shape = ds->by_id(ids[0]).image.shape();
  const int h = img_shape.h, w = img_shape.w;
  const int C = classes.size();

  double task_sum = 0.0, cons_sum = 0.0;
  int task_batches = 0, cons_batches = 0;

  std::vector<int> order = ids;
  shuffle_rng.shuffle(order);

  for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
    const int n = static_cast<int>(
        std::min<std::size_t>(cfg.batch_size, order.size() - i));
    Grid4 batch(n, 1, h, w);
    Grid4 targets(n, C, h, w);
    Grid4 mask(n, C, h, w);
    Grid4 ens;
    if (compute_cons) ens = Grid4(n, C, h, w);

    for (int k = 0; k < n; ++k) {
      const int id = order[i + k];
      const Sample& s = ds->by_id(id);
      const bool labeled = s.label.has_value();

      AugmentParams ap;  // identity unless augmenting
      if (cfg.augment) ap = draw_augment_params(aug_rng);

      const Grid4 img = cfg.augment ? transform_image(s.image, ap) : s.image;
      batch.plane(k, 0) = img.plane(0, 0);

      LabelMap target_label;
      Grid4 sample_mask;
      if (labeled) {
        target_label = cfg.augment ? transform_label(*s.label, ap) : *s.label;
        sample_mask = Grid4::constant({1, C, h, w}, 1.0);
      } else if (with_unlabeled && pseudo) {
        const LabelMap& pl = pseudo->at(id);
        target_label = cfg.augment ? transform_label(pl, ap) : pl;
        // the loss mask is scalar per voxel: a voxel selected for its pseudo
        // class enters every class's cDC term (negative evidence included)
        const Grid4& m = masks->at(id);
        Grid4 scalar_union(1, C, h, w);
        const std::int64_t hw = static_cast<std::int64_t>(h) * w;
        for (std::int64_t v = 0; v < hw; ++v) {
          double on = 0.0;
          for (int c = 0; c < C; ++c) on = std::max(on, m[c * hw + v]);
          for (int c = 0; c < C; ++c) scalar_union[c * hw + v] = on;
        }
        sample_mask = cfg.augment
                          ? transform_grid_nearest(scalar_union, ap,
                                                   std::vector<double>(C, 0.0))
                          : scalar_union;
      } else {
        target_label = LabelMap(h, w);  // background; masked out entirely
        sample_mask = Grid4(1, C, h, w);
      }
      const Grid4 oh = one_hot(target_label, C);
      for (int c = 0; c < C; ++c) {
        targets.plane(k, c) = oh.plane(0, c);
        mask.plane(k, c) = sample_mask.plane(0, c);
      }
      if (compute_cons) {
        const Grid4& e = ensemble.e_hat.at(id);
        const Grid4 et = cfg.augment
                             ? transform_grid_nearest(e, ap, onehot_background_pad(C))
                             : e;
        for (int c = 0; c < C; ++c) ens.plane(k, c) = et.plane(0, c);
      }
    }

    const Grid4 probs = model.forward_train(batch, draw_dropout_seeds());
    Grid4 dprobs(probs.shape());
    double task = 0.0;
    const bool has_task = (mask.array() > 0.0).any();
    if (has_task) {
      task = task_loss(targets, probs, mask, classes, nullptr, &dprobs);
      task_sum += task;
      ++task_batches;
    }
    double cons = 0.0;
    if (compute_cons) {
      if (lambda_eff > 0.0) {
        Grid4 dcons(probs.shape());
        cons = consistency_loss(probs, ens, classes, &dcons);
        dprobs.array() += lambda_eff * dcons.array();
      } else {
        cons = consistency_loss(probs, ens, classes, nullptr);
      }
      cons_sum += cons;
      ++cons_batches;
    }
    const double total = task + lambda_eff * cons;
    if (!std::isfinite(total))
      throw TrainingError("training diverged (non-finite loss) at epoch " +
                          std::to_string(epoch + 1));
    if (has_task || lambda_eff > 0.0) {
      model.backward(dprobs);
      adam.step(model.params());
      model.zero_grads();
    }
  }
  *mean_task = task_batches ? task_sum / task_batches : 0.0;
  *mean_cons = cons_batches ? cons_sum / cons_batches : 0.0;
}

void TrainSession::Impl::run_stage1_epoch() {
  const auto t0 = std::chrono::steady_clock::now();
  double mean_task = 0.0, mean_cons = 0.0;
  step_batches(split->labeled_train, false, nullptr, nullptr, 0.0, false,
               &mean_task, &mean_cons);

  const std::vector<double> val_pc =
      validation_loss(model, *ds, split->validation, classes, cfg.batch_size);
  const double val = std::accumulate(val_pc.begin(), val_pc.end(), 0.0);

  ++epoch;
  track_validation(val, val_pc);

  EpochLog log;
  log.epoch = epoch;
  log.stage = "I";
  log.train_task = mean_task;
  log.val_loss = val;
  log.val_per_class = val_pc;
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  logs.push_back(std::move(log));

  prev_task = mean_task;
  if (since_best >= cfg.patience || epoch >= cfg.max_epochs) done = true;
}

void TrainSession::Impl::run_stage2_epoch() {
  const auto t0 = std::chrono::steady_clock::now();
  const int e = epoch + 1;
  const int C = classes.size();
  const Grid4& first = ds->by_id(split->labeled_train[0]).image;
  const int h = first.shape().h, w = first.shape().w;

  // (1)-(2): gate on the validation losses from the end of the previous
  // epoch (the pretrained model's, for the first epoch)
  std::vector<int> gated;
  if (variant.update_rule == UpdateRule::class_gated)
    gated = gate_classes(ensemble, last_val_pc);

  // (3): ensemble / pseudo-label-source refresh with the current model's
  // deterministic predictions
  bool refresh = false;
  switch (variant.update_rule) {
    case UpdateRule::every_k_epochs:
      refresh = (e % cfg.pl_refresh_interval) == 0;
      break;
    case UpdateRule::on_val_improve:
      refresh = last_improved;
      break;
    case UpdateRule::class_gated:
      refresh = !variant.use_ensemble_pl;  // current-prediction pseudo labels
      break;
    default:
      break;
  }
  const bool update_all = variant.update_rule == UpdateRule::every_epoch;
  const bool update_ens =
      variant.needs_ensemble() && (update_all || !gated.empty());

  std::vector<int> all_ids = split->labeled_train;
  all_ids.insert(all_ids.end(), split->unlabeled_train.begin(),
                 split->unlabeled_train.end());

  if (update_ens || refresh) {
    const std::vector<int>& pred_ids = update_ens ? all_ids : split->unlabeled_train;
    const std::map<int, Grid4> preds =
        predict_ids(model, *ds, pred_ids, cfg.batch_size);
    if (update_ens) {
      std::vector<int> improved = gated;
      if (update_all) {
        improved.resize(C);
        std::iota(improved.begin(), improved.end(), 0);
      }
      update_ensemble(ensemble, preds, improved);
    }
    if (refresh) {
      for (int id : split->unlabeled_train) pl_source[id] = preds.at(id);
      last_refresh_epoch = e;
    }
  }

  // (4)-(5): pseudo labels, confidence, masks
  std::map<int, LabelMap> pls;
  std::map<int, Grid4> masks;
  double selected_frac = 0.0;
  if (variant.use_unlabeled_task && !split->unlabeled_train.empty()) {
    const std::map<int, Grid4>& source =
        variant.use_ensemble_pl ? ensemble.e_hat : pl_source;
    pls = extract_pseudo_labels(source, split->unlabeled_train);

    std::map<int, Grid4> conf;
    if (variant.use_confidence &&
        variant.confidence_measure == ConfidenceMeasure::mc_entropy) {
      for (int id : split->unlabeled_train)
        conf.emplace(id, mc_entropy_confidence(
                             model, ds->by_id(id).image, cfg.confidence.mc_passes,
                             mix_seed(mix_seed(cfg.seed, 0xE000 + e),
                                      static_cast<std::uint64_t>(id))));
    } else {
      for (int id : split->unlabeled_train)
        conf.emplace(id, softmax_confidence(source.at(id), pls.at(id)));
    }

    ConfidenceConfig mask_cfg = cfg.confidence;
    mask_cfg.measure = variant.confidence_measure;
    if (!variant.use_confidence)
      mask_cfg.fractions.assign(C, 1.0);  // n = 100%
    MaskBuild mb = build_confidence_mask(conf, pls, split->labeled_train, C, h,
                                         w, mask_cfg);
    masks = std::move(mb.masks);
    const double cand = static_cast<double>(std::accumulate(
        mb.candidates_per_class.begin(), mb.candidates_per_class.end(),
        std::int64_t{0}));
    const double sel = static_cast<double>(std::accumulate(
        mb.selected_per_class.begin(), mb.selected_per_class.end(),
        std::int64_t{0}));
    selected_frac = cand > 0.0 ? sel / cand : 0.0;
  }

  const double lambda_base = variant.use_consistency ? cfg.lambda : 0.0;
  const double lambda_eff =
      e == 1 ? lambda_base
             : combined_loss(0.0, 0.0, lambda_base, prev_task, prev_cons)
                   .lambda_effective;

  // (6): one training epoch over labeled and unlabeled samples
  double mean_task = 0.0, mean_cons = 0.0;
  step_batches(all_ids, variant.use_unlabeled_task, &pls, &masks, lambda_eff,
               variant.use_consistency, &mean_task, &mean_cons);

  const std::vector<double> val_pc =
      validation_loss(model, *ds, split->validation, classes, cfg.batch_size);
  const double val = std::accumulate(val_pc.begin(), val_pc.end(), 0.0);

  ++epoch;
  track_validation(val, val_pc);

  EpochLog log;
  log.epoch = epoch;
  log.stage = "II";
  log.train_task = mean_task;
  log.train_cons = mean_cons;
  log.lambda_effective = lambda_eff;
  log.val_loss = val;
  log.val_per_class = val_pc;
  log.gated_classes = gated;
  log.pl_refreshed = refresh;
  log.unl_selected_frac = selected_frac;
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  logs.push_back(std::move(log));

  prev_task = mean_task;
  prev_cons = mean_cons;
  if (since_best >= cfg.patience || epoch >= cfg.max_epochs) done = true;
}

// ---------------------------------------------------------------------------
// TrainSession facade
// ---------------------------------------------------------------------------

TrainSession::TrainSession(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
TrainSession::~TrainSession() = default;
TrainSession::TrainSession(TrainSession&&) noexcept = default;

TrainSession::TrainSession(const TrainConfig& cfg, const Dataset& ds,
                           const DatasetSplit& split)
    : impl_(std::make_unique<Impl>()) {
  cfg.validate();
  if (split.labeled_train.empty() || split.validation.empty())
    throw DataError("stage I needs labeled training and validation samples");
  impl_->cfg = cfg;
  impl_->variant = VariantSpec::registry('B');
  impl_->ds = &ds;
  impl_->split = &split;
  impl_->classes = default_class_set(cfg.model.num_classes);
  impl_->stage2 = false;
  impl_->model = Model(cfg.model);
  impl_->adam = AdamState(impl_->model.params(), cfg.lr, cfg.beta1, cfg.beta2,
                          cfg.adam_eps);
  impl_->init_rngs();
}

TrainSession::TrainSession(const VariantSpec& variant, const TrainConfig& cfg,
                           const Dataset& ds, const DatasetSplit& split,
                           const Model& pretrained,
                           const std::vector<double>& pretrained_val_per_class)
    : impl_(std::make_unique<Impl>()) {
  cfg.validate();
  if (!variant.runs_stage2())
    throw ConfigError("variant B has no stage II");
  impl_->cfg = cfg;
  impl_->variant = variant;
  impl_->ds = &ds;
  impl_->split = &split;
  impl_->classes = default_class_set(cfg.model.num_classes);
  impl_->stage2 = true;
  impl_->model = pretrained;
  impl_->adam = AdamState(impl_->model.params(), cfg.lr, cfg.beta1, cfg.beta2,
                          cfg.adam_eps);
  impl_->init_rngs();

  std::vector<const Sample*> all;
  for (int id : split.labeled_train) all.push_back(&ds.by_id(id));
  for (int id : split.unlabeled_train) all.push_back(&ds.by_id(id));

  if (variant.needs_ensemble())
    impl_->ensemble = init_ensemble(impl_->model, all, pretrained_val_per_class,
                                    cfg.alpha);
  else {
    impl_->ensemble.alpha = cfg.alpha;
    impl_->ensemble.best_val_loss = pretrained_val_per_class;
    impl_->ensemble.update_enabled.assign(pretrained_val_per_class.size(), 0);
  }
  if (!variant.use_ensemble_pl && variant.use_unlabeled_task) {
    for (int id : split.unlabeled_train) {
      if (variant.needs_ensemble())
        impl_->pl_source[id] = impl_->ensemble.e_hat.at(id);
      else
        impl_->pl_source.emplace(id, impl_->model.predict(ds.by_id(id).image));
    }
  }

  // the pretrained model is the baseline best; stage II must improve on it
  impl_->last_val_pc = pretrained_val_per_class;
  impl_->best_val = std::accumulate(pretrained_val_per_class.begin(),
                                    pretrained_val_per_class.end(), 0.0);
  impl_->best_epoch = 0;
  impl_->best_val_per_class = pretrained_val_per_class;
  impl_->best_snapshot = impl_->model.state_snapshot();
}

bool TrainSession::run(int epoch_limit) {
  while (!impl_->done &&
         (epoch_limit < 0 || impl_->epoch < epoch_limit)) {
    if (impl_->stage2)
      impl_->run_stage2_epoch();
    else
      impl_->run_stage1_epoch();
  }
  return impl_->done;
}

bool TrainSession::finished() const { return impl_->done; }
int TrainSession::completed_epochs() const { return impl_->epoch; }
const std::vector<EpochLog>& TrainSession::logs() const { return impl_->logs; }

RunResult TrainSession::result() const {
  RunResult r;
  r.model = impl_->model;
  if (!impl_->best_snapshot.empty()) r.model.restore_state(impl_->best_snapshot);
  r.logs = impl_->logs;
  r.best_val = impl_->best_val;
  r.best_val_per_class = impl_->best_val_per_class;
  r.best_epoch = impl_->best_epoch;
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

void TrainSession::save(const std::string& path) const {
  BinWriter w;
  w.os.write(kMagic, 8);
  w.u32(kFormatVersion);
  w.u8(1);  // model present
  write_model(w, impl_->model);
  w.u8(1);  // adam present
  write_adam(w, impl_->adam);
  w.u8(1);  // trainer state present
  w.u8(static_cast<std::uint8_t>(impl_->variant.id));
  w.str(impl_->stage2 ? "II" : "I");
  w.i32(impl_->epoch);
  w.u8(impl_->done ? 1 : 0);
  w.f64(impl_->best_val);
  w.i32(impl_->best_epoch);
  w.i32(impl_->since_best);
  w.f64vec(impl_->best_val_per_class);
  w.u32(static_cast<std::uint32_t>(impl_->best_snapshot.size()));
  for (const auto& a : impl_->best_snapshot) w.arr(a);
  w.f64(impl_->prev_task);
  w.f64(impl_->prev_cons);
  w.i32(impl_->last_refresh_epoch);
  w.u8(impl_->last_improved ? 1 : 0);
  w.f64vec(impl_->last_val_pc);
  w.str(impl_->aug_rng.serialize());
  w.str(impl_->shuffle_rng.serialize());
  w.str(impl_->dropout_rng.serialize());
  w.f64(impl_->ensemble.alpha);
  w.f64vec(impl_->ensemble.best_val_loss);
  write_grid_map(w, impl_->ensemble.e_hat);
  write_grid_map(w, impl_->pl_source);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path);
  const std::string blob = w.os.str();
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

namespace {

BinReader open_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  BinReader r(ss.str());
  r.need(12);
  if (std::memcmp(r.buf.data(), kMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path);
  r.pos = 8;
  const std::uint32_t ver = r.u32();
  if (ver != kFormatVersion)
    throw DataError("checkpoint format version " + std::to_string(ver) +
                    " not supported (this build reads version " +
                    std::to_string(kFormatVersion) + ")");
  return r;
}

}  // namespace

TrainSession TrainSession::load(const std::string& path, const TrainConfig& cfg,
                                const Dataset& ds, const DatasetSplit& split) {
  BinReader r = open_checkpoint(path);
  if (r.u8() != 1) throw DataError("checkpoint has no model section");
  auto impl = std::make_unique<Impl>();
  impl->model = read_model(r);
  if (r.u8() != 1) throw DataError("checkpoint has no optimizer section");
  impl->adam = read_adam(r);
  if (r.u8() != 1) throw DataError("checkpoint has no trainer section");
  const char variant_id = static_cast<char>(r.u8());
  const std::string stage = r.str();
  impl->cfg = cfg;
  impl->variant = VariantSpec::registry(variant_id);
  impl->ds = &ds;
  impl->split = &split;
  impl->classes = default_class_set(cfg.model.num_classes);
  impl->stage2 = stage == "II";
  impl->epoch = r.i32();
  impl->done = r.u8() != 0;
  impl->best_val = r.f64();
  impl->best_epoch = r.i32();
  impl->since_best = r.i32();
  impl->best_val_per_class = r.f64vec();
  const std::uint32_t nsnap = r.u32();
  impl->best_snapshot.resize(nsnap);
  for (auto& a : impl->best_snapshot) a = r.arr();
  impl->prev_task = r.f64();
  impl->prev_cons = r.f64();
  impl->last_refresh_epoch = r.i32();
  impl->last_improved = r.u8() != 0;
  impl->last_val_pc = r.f64vec();
  impl->aug_rng.deserialize(r.str());
  impl->shuffle_rng.deserialize(r.str());
  impl->dropout_rng.deserialize(r.str());
  impl->ensemble.alpha = r.f64();
  impl->ensemble.best_val_loss = r.f64vec();
  impl->ensemble.update_enabled.assign(impl->ensemble.best_val_loss.size(), 0);
  impl->ensemble.e_hat = read_grid_map(r);
  impl->pl_source = read_grid_map(r);
  return TrainSession(std::move(impl));
}

void save_model_checkpoint(const std::string& path, Model& model) {
  BinWriter w;
  w.os.write(kMagic, 8);
  w.u32(kFormatVersion);
  w.u8(1);
  write_model(w, model);
  w.u8(0);  // no adam
  w.u8(0);  // no trainer state
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path);
  const std::string blob = w.os.str();
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

Model load_model_checkpoint(const std::string& path) {
  BinReader r = open_checkpoint(path);
  if (r.u8() != 1) throw DataError("checkpoint has no model section");
  return read_model(r);
}

// ---------------------------------------------------------------------------
// Whole-stage wrappers
// ---------------------------------------------------------------------------

RunResult train_supervised(const TrainConfig& cfg, const Dataset& ds,
                           const DatasetSplit& split) {
  TrainSession session(cfg, ds, split);
  session.run();
  return session.result();
}

RunResult train_uats(const VariantSpec& variant, const TrainConfig& cfg,
                     const Dataset& ds, const DatasetSplit& split,
                     const Model& pretrained,
                     const std::vector<double>& pretrained_val_per_class) {
  TrainSession session(variant, cfg, ds, split, pretrained,
                       pretrained_val_per_class);
  session.run();
  return session.result();
}

RunResult run_variant(const VariantSpec& variant, const TrainConfig& cfg,
                      const Dataset& ds, const DatasetSplit& split,
                      const RunResult* stage1) {
  RunResult base;
  if (stage1 == nullptr) {
    base = train_supervised(cfg, ds, split);
    stage1 = &base;
  }
  if (!variant.runs_stage2()) return *stage1;

  RunResult r = train_uats(variant, cfg, ds, split, stage1->model,
                           stage1->best_val_per_class);
  std::vector<EpochLog> logs = stage1->logs;
  logs.insert(logs.end(), r.logs.begin(), r.logs.end());
  r.logs = std::move(logs);
  return r;
}

// ---------------------------------------------------------------------------
// Log CSV
// ---------------------------------------------------------------------------

std::string epoch_log_csv_header(const ClassSet& classes) {
  std::string h =
      "epoch,stage,train_task,train_cons,lambda_effective,val_loss";
  for (const auto& n : classes.names) h += ",val_" + n;
  h += ",gated,pl_refreshed,unl_selected_frac,wall_seconds";
  return h;
}

std::string epoch_log_csv_row(const EpochLog& log) {
  std::ostringstream os;
  os.precision(12);
  os << log.epoch << "," << log.stage << "," << log.train_task << ","
     << log.train_cons << "," << log.lambda_effective << "," << log.val_loss;
  for (double v : log.val_per_class) os << "," << v;
  os << ",";
  if (log.gated_classes.empty()) {
    os << "-";
  } else {
    for (std::size_t i = 0; i < log.gated_classes.size(); ++i) {
      if (i) os << "|";
      os << log.gated_classes[i];
    }
  }
  os << "," << (log.pl_refreshed ? 1 : 0) << "," << log.unl_selected_frac
     << "," << log.wall_seconds;
  return os.str();
}

}  // namespace uats
