#include "uats/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "uats/errors.hpp"

namespace uats {

using BoolField = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>;

double dice_binary(const BoolField& pred, const BoolField& truth) {
  if (pred.size() != truth.size())
    throw ShapeError("dice_binary: field sizes differ");
  std::int64_t na = 0, nb = 0, ni = 0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = truth[i] != 0;
    na += a;
    nb += b;
    ni += a && b;
  }
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

namespace {

// boundary pixel: set, with at least one unset (or out-of-image) 4-neighbor
std::vector<std::pair<int, int>> boundary_pixels(const BoolField& m, int h,
                                                 int w) {
  std::vector<std::pair<int, int>> out;
  auto at = [&](int y, int x) -> bool {
    if (y < 0 || y >= h || x < 0 || x >= w) return false;
    return m[static_cast<std::int64_t>(y) * w + x] != 0;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (at(y, x) && (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) ||
                       !at(y, x + 1)))
        out.emplace_back(y, x);
  return out;
}

double directed_mean(const std::vector<std::pair<int, int>>& from,
                     const std::vector<std::pair<int, int>>& to, double sy,
                     double sx) {
  double total = 0.0;
  for (const auto& [fy, fx] : from) {
    double best = std::numeric_limits<double>::max();
    for (const auto& [ty, tx] : to) {
      const double dy = (fy - ty) * sy, dx = (fx - tx) * sx;
      best = std::min(best, dy * dy + dx * dx);
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(from.size());
}

}  // namespace

std::optional<double> average_boundary_distance(const BoolField& pred,
                                                const BoolField& truth, int h,
                                                int w, double spacing_y,
                                                double spacing_x) {
  if ((pred != 0).count() == 0 || (truth != 0).count() == 0)
    return std::nullopt;
  const auto bp = boundary_pixels(pred, h, w);
  const auto bt = boundary_pixels(truth, h, w);
  return 0.5 * (directed_mean(bp, bt, spacing_y, spacing_x) +
                directed_mean(bt, bp, spacing_y, spacing_x));
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                    const std::vector<double>& b) {
  if (a.size() != b.size())
    throw DataError("wilcoxon: paired vectors must have equal length");

  struct Diff {
    double abs;
    bool positive;
  };
  std::vector<Diff> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back({std::abs(d), d > 0.0});
  }

  WilcoxonResult res;
  if (diffs.empty()) {
    res.all_zero = true;
    res.p = 1.0;
    return res;
  }
  const int n = static_cast<int>(diffs.size());
  res.n = n;
  if (n < 5)
    throw DataError("wilcoxon: need at least 5 nonzero differences, got " +
                    std::to_string(n));

  std::sort(diffs.begin(), diffs.end(),
            [](const Diff& x, const Diff& y) { return x.abs < y.abs; });

  // average ranks, doubled so tied ranks stay integral
  std::vector<int> rank2(n);
  std::vector<int> tie_sizes;
  for (int i = 0; i < n;) {
    int j = i;
    while (j < n && diffs[j].abs == diffs[i].abs) ++j;
    const int r2 = (i + 1) + j;  // 2 * average of ranks i+1 .. j
    for (int k = i; k < j; ++k) rank2[k] = r2;
    tie_sizes.push_back(j - i);
    i = j;
  }

  std::int64_t w2 = 0;  // 2 * W+
  for (int i = 0; i < n; ++i)
    if (diffs[i].positive) w2 += rank2[i];
  res.statistic = static_cast<double>(w2) / 2.0;

  if (n <= 25) {
    res.exact = true;
    // null distribution of 2*W+ conditioned on the observed ranks
    std::int64_t max2 = 0;
    for (int r : rank2) max2 += r;
    std::vector<double> count(max2 + 1, 0.0);
    count[0] = 1.0;
    for (int r : rank2)
      for (std::int64_t s = max2; s >= r; --s) count[s] += count[s - r];
    const double total = std::pow(2.0, n);
    double lower = 0.0, upper = 0.0;
    for (std::int64_t s = 0; s <= max2; ++s) {
      if (s <= w2) lower += count[s];
      if (s >= w2) upper += count[s];
    }
    res.p = std::min(1.0, 2.0 * std::min(lower, upper) / total);
  } else {
    const double nn = n;
    const double mean = nn * (nn + 1.0) / 4.0;
    double tie_corr = 0.0;
    for (int t : tie_sizes)
      tie_corr += (static_cast<double>(t) * t * t - t);
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_corr / 48.0;
    const double wplus = res.statistic;
    double z;
    if (wplus > mean)
      z = (wplus - mean - 0.5) / std::sqrt(var);
    else if (wplus < mean)
      z = (wplus - mean + 0.5) / std::sqrt(var);
    else
      z = 0.0;
    res.p = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
  }
  return res;
}

std::vector<AggregateRow> aggregate(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw DataError("aggregate: no records");
  std::map<std::pair<std::string, int>, std::vector<const EvalRecord*>> groups;
  for (const auto& r : records) groups[{r.variant, r.cls}].push_back(&r);

  auto mean_sd = [](const std::vector<double>& v) {
    const double mean =
        std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double sq = 0.0;
    for (double x : v) sq += (x - mean) * (x - mean);
    return std::pair<double, double>(mean,
                                     std::sqrt(sq / static_cast<double>(v.size())));
  };

  std::vector<AggregateRow> out;
  for (const auto& [key, rs] : groups) {
    std::vector<double> dcs, abds;
    int undefined = 0;
    for (const auto* r : rs) {
      dcs.push_back(r->dc);
      if (r->abd)
        abds.push_back(*r->abd);
      else
        ++undefined;
    }
    AggregateRow dc_row{key.first, key.second, "dc", 0, 0,
                        static_cast<int>(dcs.size()), 0};
    std::tie(dc_row.mean, dc_row.sd) = mean_sd(dcs);
    out.push_back(dc_row);
    AggregateRow abd_row{key.first, key.second, "abd", 0, 0,
                         static_cast<int>(abds.size()), undefined};
    if (!abds.empty()) std::tie(abd_row.mean, abd_row.sd) = mean_sd(abds);
    out.push_back(abd_row);
  }
  return out;
}

std::vector<EvalRecord> evaluate_labels(const std::string& variant,
                                        int sample_id, const LabelMap& pred,
                                        const LabelMap& truth,
                                        int num_classes) {
  if (pred.h != truth.h || pred.w != truth.w)
    throw ShapeError("evaluate_labels: label shapes differ");
  std::vector<EvalRecord> out;
  for (int c = 0; c < num_classes; ++c) {
    BoolField pm = (pred.idx == static_cast<std::uint8_t>(c)).cast<std::uint8_t>();
    BoolField tm = (truth.idx == static_cast<std::uint8_t>(c)).cast<std::uint8_t>();
    EvalRecord r;
    r.variant = variant;
    r.sample_id = sample_id;
    r.cls = c;
    r.dc = dice_binary(pm, tm);
    r.abd = average_boundary_distance(pm, tm, pred.h, pred.w);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace uats
