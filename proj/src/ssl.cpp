#include "uats/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "uats/errors.hpp"

namespace uats {

void ConfidenceConfig::validate(int num_classes) const {
  if (static_cast<int>(fractions.size()) != num_classes)
    throw ConfigError("confidence config: need one fraction per class");
  for (double f : fractions)
    if (f <= 0.0 || f > 1.0)
      throw ConfigError("confidence fractions must be in (0,1]");
  if (measure == ConfidenceMeasure::mc_entropy && mc_passes < 2)
    throw ConfigError("mc_entropy confidence needs at least 2 passes");
}

EnsembleBuffer init_ensemble(const Model& model,
                             const std::vector<const Sample*>& samples,
                             const std::vector<double>& stage1_val_loss,
                             double alpha) {
  EnsembleBuffer buf;
  buf.alpha = alpha;
  buf.best_val_loss = stage1_val_loss;
  buf.update_enabled.assign(stage1_val_loss.size(), 0);
  for (const Sample* s : samples)
    buf.e_hat.emplace(s->id, model.predict(s->image));
  return buf;
}

std::vector<int> gate_classes(EnsembleBuffer& buffer,
                              const std::vector<double>& current_val_loss) {
  if (current_val_loss.size() != buffer.best_val_loss.size())
    throw ConfigError("gate_classes: expected one validation loss per class");
  std::vector<int> improved;
  std::fill(buffer.update_enabled.begin(), buffer.update_enabled.end(), 0);
  for (std::size_t s = 0; s < current_val_loss.size(); ++s) {
    if (current_val_loss[s] < buffer.best_val_loss[s]) {  // strict
      buffer.best_val_loss[s] = current_val_loss[s];
      buffer.update_enabled[s] = 1;
      improved.push_back(static_cast<int>(s));
    }
  }
  return improved;
}

void update_ensemble(EnsembleBuffer& buffer,
                     const std::map<int, Grid4>& predictions,
                     const std::vector<int>& improved) {
  if (improved.empty()) return;
  const double a = buffer.alpha;
  for (auto& [id, e] : buffer.e_hat) {
    const auto it = predictions.find(id);
    if (it == predictions.end())
      throw DataError("update_ensemble: no prediction for sample " +
                      std::to_string(id));
    const Grid4& y = it->second;
    require_same_shape(e, y, "update_ensemble");
    for (int s : improved)
      e.plane(0, s) = a * e.plane(0, s) + (1.0 - a) * y.plane(0, s);

    const Shape4 sh = e.shape();
    const std::int64_t hw = static_cast<std::int64_t>(sh.h) * sh.w;
    for (std::int64_t v = 0; v < hw; ++v) {
      double sum = 0.0;
      for (int c = 0; c < sh.c; ++c) sum += e[c * hw + v];
      if (std::abs(sum - 1.0) > 1e-6 && sum > 0.0)
        for (int c = 0; c < sh.c; ++c) e[c * hw + v] /= sum;
    }
  }
}

std::map<int, LabelMap> extract_pseudo_labels(
    const std::map<int, Grid4>& source, const std::vector<int>& ids) {
  std::map<int, LabelMap> out;
  for (int id : ids) {
    const auto it = source.find(id);
    if (it == source.end())
      throw DataError("extract_pseudo_labels: no map for sample " +
                      std::to_string(id));
    out.emplace(id, argmax_label(it->second));
  }
  return out;
}

Grid4 softmax_confidence(const Grid4& prob_map, const LabelMap& pseudo) {
  const Shape4 s = prob_map.shape();
  Grid4 conf(1, 1, s.h, s.w);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      conf.at(0, 0, y, x) = prob_map.at(0, pseudo.at(y, x), y, x);
  return conf;
}

Grid4 entropy_map(const Grid4& mean_probs) {
  const Shape4 s = mean_probs.shape();
  Grid4 ent(s.b, 1, s.h, s.w);
  for (int b = 0; b < s.b; ++b)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        double e = 0.0;
        for (int c = 0; c < s.c; ++c) {
          const double p = mean_probs.at(b, c, y, x);
          if (p > 0.0) e -= p * std::log(p);
        }
        ent.at(b, 0, y, x) = std::max(0.0, e);
      }
  return ent;
}

Grid4 mc_entropy(const Model& model, const Grid4& image, int passes,
                 std::uint64_t base_seed) {
  if (passes < 2)
    throw ConfigError("mc_entropy: need at least 2 passes, got " +
                      std::to_string(passes));
  const std::vector<Grid4> runs = model.mc_forward(image, passes, base_seed);
  Grid4 mean = runs[0];
  for (int f = 1; f < passes; ++f) mean.array() += runs[f].array();
  mean.array() /= static_cast<double>(passes);
  return entropy_map(mean);
}

Grid4 mc_entropy_confidence(const Model& model, const Grid4& image, int passes,
                            std::uint64_t base_seed) {
  Grid4 conf = mc_entropy(model, image, passes, base_seed);
  conf.array() = -conf.array();
  return conf;
}

MaskBuild build_confidence_mask(const std::map<int, Grid4>& confidence,
                                const std::map<int, LabelMap>& pseudo,
                                const std::vector<int>& labeled_ids,
                                int num_classes, int h, int w,
                                const ConfidenceConfig& config) {
  config.validate(num_classes);
  MaskBuild out;
  out.selected_per_class.assign(num_classes, 0);
  out.candidates_per_class.assign(num_classes, 0);

  // candidates per class over all unlabeled samples, globally ranked
  using Cand = std::tuple<double, int, std::int64_t>;  // conf, id, voxel
  std::vector<std::vector<Cand>> cands(num_classes);
  for (const auto& [id, pl] : pseudo) {
    const auto conf_it = confidence.find(id);
    if (conf_it == confidence.end())
      throw DataError("build_confidence_mask: no confidence for sample " +
                      std::to_string(id));
    const Grid4& conf = conf_it->second;
    const std::int64_t n = static_cast<std::int64_t>(pl.h) * pl.w;
    for (std::int64_t v = 0; v < n; ++v)
      cands[pl.idx[v]].emplace_back(conf[v], id, v);
    out.masks.emplace(id, Grid4(1, num_classes, pl.h, pl.w));
  }

  for (int s = 0; s < num_classes; ++s) {
    auto& cs = cands[s];
    out.candidates_per_class[s] = static_cast<std::int64_t>(cs.size());
    const std::int64_t take = static_cast<std::int64_t>(
        std::floor(config.fractions[s] * static_cast<double>(cs.size())));
    out.selected_per_class[s] = take;
    if (take == 0) continue;
    std::sort(cs.begin(), cs.end(), [](const Cand& a, const Cand& b) {
      if (std::get<0>(a) != std::get<0>(b))
        return std::get<0>(a) > std::get<0>(b);  // high confidence first
      if (std::get<1>(a) != std::get<1>(b))
        return std::get<1>(a) < std::get<1>(b);
      return std::get<2>(a) < std::get<2>(b);
    });
    for (std::int64_t i = 0; i < take; ++i) {
      const auto& [c, id, v] = cs[i];
      Grid4& m = out.masks.at(id);
      const std::int64_t hw =
          static_cast<std::int64_t>(m.shape().h) * m.shape().w;
      m[s * hw + v] = 1.0;
    }
  }

  for (int id : labeled_ids)
    out.masks.insert_or_assign(id,
                               Grid4::constant({1, num_classes, h, w}, 1.0));
  return out;
}

}  // namespace uats
