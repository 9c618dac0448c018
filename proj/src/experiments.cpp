#include "uats/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "uats/errors.hpp"

namespace fs = std::filesystem;

namespace uats {

std::string resolve_data_path(const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  if (const char* root = std::getenv("UATS_DATA_ROOT"))
    return (fs::path(root) / path).string();
  return path;
}

std::string provenance_line(const FileConfig& cfg) {
  std::ostringstream os;
  os << "# config_hash=" << std::hex << config_hash(cfg) << std::dec
     << " seed=" << cfg.train.seed << " tool=uats " << kToolVersion;
  return os.str();
}

std::string star_coding(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

void cmd_generate(const GenerateArgs& args, std::ostream& log) {
  const std::string out = resolve_data_path(args.out);
  if (fs::exists(fs::path(out) / "manifest.txt") && !args.force)
    throw DataError("dataset already exists at " + out +
                    " (use --force to overwrite)");
  Dataset ds = build_dataset(args.spec, args.n, args.labeled_frac,
                             args.test_frac);
  save_dataset(ds, out);

  std::vector<std::int64_t> class_pixels(args.spec.num_classes, 0);
  std::int64_t total = 0;
  for (const auto& s : ds.samples) {
    if (!s.label) continue;
    for (std::int64_t i = 0; i < s.label->idx.size(); ++i)
      ++class_pixels[s.label->idx[i]];
    total += s.label->idx.size();
  }
  log << "wrote " << ds.samples.size() << " samples to " << out << "\n";
  log << "labeled pool " << ds.labeled_pool.size() << " (test "
      << ds.test_ids.size() << "), unlabeled pool " << ds.unlabeled_pool.size()
      << "\n";
  log << "class pixel frequencies over labeled pool:";
  for (int c = 0; c < args.spec.num_classes; ++c)
    log << " c" << c << "="
        << static_cast<double>(class_pixels[c]) / static_cast<double>(total);
  log << "\n";
}

// ---------------------------------------------------------------------------
// eval.csv
// ---------------------------------------------------------------------------

void write_eval_csv(const std::string& path,
                    const std::vector<EvalRecord>& records,
                    const std::string& provenance) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os << provenance << "\n";
  os << "variant,sample_id,class,dc,abd\n";
  os.precision(12);
  for (const auto& r : records) {
    os << r.variant << "," << r.sample_id << "," << r.cls << "," << r.dc << ",";
    if (r.abd) os << *r.abd;
    os << "\n";
  }
}

std::vector<EvalRecord> read_eval_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path);
  std::vector<EvalRecord> out;
  std::string line;
  bool header_seen = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;  // column header
      continue;
    }
    std::stringstream ss(line);
    std::string field;
    EvalRecord r;
    std::getline(ss, r.variant, ',');
    std::getline(ss, field, ',');
    r.sample_id = std::stoi(field);
    std::getline(ss, field, ',');
    r.cls = std::stoi(field);
    std::getline(ss, field, ',');
    r.dc = std::stod(field);
    if (std::getline(ss, field, ',') && !field.empty())
      r.abd = std::stod(field);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// train / evaluate
// ---------------------------------------------------------------------------

namespace {

void write_epoch_csv(const std::string& path, const std::vector<EpochLog>& logs,
                     const ClassSet& classes, const std::string& provenance) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os << provenance << "\n" << epoch_log_csv_header(classes) << "\n";
  for (const auto& l : logs) os << epoch_log_csv_row(l) << "\n";
}

}  // namespace

std::vector<EvalRecord> cmd_train(const TrainArgs& args, std::ostream& log) {
  const Dataset ds = load_dataset(resolve_data_path(args.data_dir));
  const DatasetSplit split =
      make_split(ds, args.ratio, args.repeat, args.config.train.seed);
  const VariantSpec variant = VariantSpec::registry(args.config.variant);
  const ClassSet classes = default_class_set(args.config.train.model.num_classes);

  RunResult result;
  if (!variant.runs_stage2()) {
    result = train_supervised(args.config.train, ds, split);
  } else {
    if (args.from_checkpoint.empty())
      throw ConfigError(
          std::string("variant ") + variant.id +
          " is a stage-II run and needs --from <stage-I checkpoint> "
          "(train variant B first)");
    Model pretrained = load_model_checkpoint(args.from_checkpoint);
    const std::vector<double> val_pc = validation_loss(
        pretrained, ds, split.validation, classes, args.config.train.batch_size);
    result = train_uats(variant, args.config.train, ds, split, pretrained,
                        val_pc);
  }

  const fs::path out(args.out_dir);
  fs::create_directories(out);
  save_model_checkpoint((out / "ckpt").string(), result.model);
  const std::string prov = provenance_line(args.config);
  write_epoch_csv((out / "epochs.csv").string(), result.logs, classes, prov);
  auto records = evaluate_on_test(result.model, ds, ds.test_ids,
                                  std::string(1, variant.id));
  write_eval_csv((out / "eval.csv").string(), records, prov);

  log << "variant " << variant.id << ": " << result.logs.size()
      << " epochs, best validation loss " << result.best_val << " at epoch "
      << result.best_epoch << "\n";
  for (const auto& row : aggregate(records))
    if (row.metric == "dc")
      log << "  test dc class " << row.cls << ": " << row.mean << " +- "
          << row.sd << "\n";
  return records;
}

void cmd_evaluate(const std::string& checkpoint, const std::string& data_dir,
                  const std::string& out_csv, const std::string& variant_name,
                  std::ostream& log) {
  const Dataset ds = load_dataset(resolve_data_path(data_dir));
  Model model = load_model_checkpoint(checkpoint);
  auto records = evaluate_on_test(model, ds, ds.test_ids, variant_name);
  FileConfig fc;  // provenance carries the model seed
  fc.train.seed = model.config().seed;
  write_eval_csv(out_csv, records, provenance_line(fc));
  for (const auto& row : aggregate(records))
    if (row.metric == "dc")
      log << "test dc class " << row.cls << ": " << row.mean << " +- " << row.sd
          << "\n";
}

// ---------------------------------------------------------------------------
// noise sweep
// ---------------------------------------------------------------------------

std::vector<NoiseRow> cmd_noise_sweep(const NoiseSweepArgs& args,
                                      std::ostream& log) {
  const Dataset ds = load_dataset(resolve_data_path(args.data_dir));
  Model model = load_model_checkpoint(args.checkpoint);
  const int C = model.config().num_classes;

  std::vector<double> sigmas = args.sigmas;
  std::sort(sigmas.begin(), sigmas.end());
  std::vector<NoiseRow> rows;

  std::vector<double> all_sigmas;
  all_sigmas.push_back(0.0);  // clean baseline row
  all_sigmas.insert(all_sigmas.end(), sigmas.begin(), sigmas.end());

  for (std::size_t si = 0; si < all_sigmas.size(); ++si) {
    const double sigma = all_sigmas[si];
    std::vector<EvalRecord> records;
    double snr_sum = 0.0;
    for (int id : ds.test_ids) {
      const Sample& s = ds.by_id(id);
      Grid4 img = s.image;
      if (sigma > 0.0) {
        NoisyImage noisy = add_gaussian_noise(
            img, sigma,
            mix_seed(args.noise_seed, si * 1000003ULL + static_cast<std::uint64_t>(id)));
        img = std::move(noisy.image);
        snr_sum += noisy.snr;
      }
      const LabelMap pred = argmax_label(model.predict(img));
      auto recs = evaluate_labels(args.variant_name, id, pred, *s.label, C);
      records.insert(records.end(), recs.begin(), recs.end());
    }
    const double mean_snr =
        sigma > 0.0 ? snr_sum / static_cast<double>(ds.test_ids.size()) : 0.0;
    for (const auto& agg : aggregate(records)) {
      NoiseRow row;
      row.sigma = sigma;
      row.mean_snr = mean_snr;
      row.cls = agg.cls;
      if (agg.metric == "dc") {
        row.dc_mean = agg.mean;
        row.dc_sd = agg.sd;
        row.n = agg.n;
        // matching abd row comes separately; merge below
        rows.push_back(row);
      } else {
        for (auto& r : rows)
          if (r.sigma == sigma && r.cls == agg.cls) {
            r.abd_mean = agg.mean;
            r.abd_sd = agg.sd;
            r.n_undefined = agg.n_undefined;
          }
      }
    }
  }

  if (!args.out_csv.empty()) {
    fs::create_directories(fs::path(args.out_csv).parent_path());
    std::ofstream os(args.out_csv, std::ios::binary);
    if (!os) throw DataError("cannot write " + args.out_csv);
    FileConfig fc;
    fc.train.seed = args.noise_seed;
    os << provenance_line(fc) << "\n";
    os << "sigma,mean_snr,class,dc_mean,dc_sd,abd_mean,abd_sd,n,n_undefined\n";
    os.precision(12);
    for (const auto& r : rows)
      os << r.sigma << "," << r.mean_snr << "," << r.cls << "," << r.dc_mean
         << "," << r.dc_sd << "," << r.abd_mean << "," << r.abd_sd << ","
         << r.n << "," << r.n_undefined << "\n";
  }

  for (const auto& r : rows)
    if (r.cls == 0)
      log << "sigma " << r.sigma << ": mean snr " << r.mean_snr << "\n";
  return rows;
}

// ---------------------------------------------------------------------------
// ratio sweep
// ---------------------------------------------------------------------------

std::vector<RatioRow> cmd_ratio_sweep(const RatioSweepArgs& args,
                                      std::ostream& log) {
  const Dataset ds = load_dataset(resolve_data_path(args.data_dir));
  const ClassSet classes = default_class_set(args.config.train.model.num_classes);
  const std::string prov = provenance_line(args.config);

  struct Job {
    int ratio, repeat;
  };
  std::vector<Job> jobs;
  for (int r : args.ratios)
    for (int k = 0; k < args.repeats; ++k) jobs.push_back({r, k});

  std::vector<RatioRow> rows;
  std::mutex mu;
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      const Job job = jobs[j];

      DatasetSplit split;
      try {
        split = make_split(ds, job.ratio, job.repeat, args.config.train.seed);
      } catch (const DataError& e) {
        std::lock_guard<std::mutex> lk(mu);
        log << "skipping ratio " << job.ratio << "% repeat " << job.repeat
            << ": " << e.what() << "\n";
        continue;
      }

      TrainConfig cfg = args.config.train;
      cfg.seed = mix_seed(args.config.train.seed,
                          0xA11CE + static_cast<std::uint64_t>(job.repeat));
      cfg.model.seed = mix_seed(cfg.seed, 0x30DE1);

      RunResult stage1;
      bool have_stage1 = false;
      for (char vid : args.variants) {
        const VariantSpec v = VariantSpec::registry(vid);
        if (!have_stage1) {
          stage1 = train_supervised(cfg, ds, split);
          have_stage1 = true;
        }
        RunResult res = v.runs_stage2()
                            ? train_uats(v, cfg, ds, split, stage1.model,
                                         stage1.best_val_per_class)
                            : stage1;
        auto records =
            evaluate_on_test(res.model, ds, ds.test_ids, std::string(1, vid));

        const fs::path run_dir = fs::path(args.out_dir) / std::string(1, vid) /
                                 std::to_string(job.ratio) /
                                 std::to_string(job.repeat);
        fs::create_directories(run_dir);
        save_model_checkpoint((run_dir / "ckpt").string(), res.model);
        write_epoch_csv((run_dir / "epochs.csv").string(), res.logs, classes,
                        prov);
        write_eval_csv((run_dir / "eval.csv").string(), records, prov);

        // per-class mean DC over the test set
        std::vector<double> sums(classes.size(), 0.0);
        std::vector<int> counts(classes.size(), 0);
        for (const auto& rec : records) {
          sums[rec.cls] += rec.dc;
          ++counts[rec.cls];
        }
        std::lock_guard<std::mutex> lk(mu);
        for (int c = 0; c < classes.size(); ++c)
          rows.push_back({job.ratio, job.repeat, vid, c,
                          counts[c] ? sums[c] / counts[c] : 0.0});
        log << "ratio " << job.ratio << "% repeat " << job.repeat << " variant "
            << vid << " done (" << res.logs.size() << " epochs)\n";
      }
    }
  };

  const int n_threads = std::max(1, args.jobs);
  std::vector<std::thread> pool;
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::sort(rows.begin(), rows.end(), [](const RatioRow& a, const RatioRow& b) {
    return std::tie(a.ratio, a.repeat, a.variant, a.cls) <
           std::tie(b.ratio, b.repeat, b.variant, b.cls);
  });

  if (!args.out_dir.empty()) {
    fs::create_directories(args.out_dir);
    std::ofstream os(fs::path(args.out_dir) / "ratio_sweep.csv",
                     std::ios::binary);
    os << prov << "\n";
    os << "ratio,repeat,variant,class,dc\n";
    os.precision(12);
    for (const auto& r : rows)
      os << r.ratio << "," << r.repeat << "," << r.variant << "," << r.cls
         << "," << r.dc_mean << "\n";

    // mean-over-repeats summary
    std::ofstream sm(fs::path(args.out_dir) / "ratio_summary.csv",
                     std::ios::binary);
    sm << prov << "\n";
    sm << "ratio,variant,class,dc_mean\n";
    sm.precision(12);
    std::map<std::tuple<int, char, int>, std::pair<double, int>> acc;
    for (const auto& r : rows) {
      auto& a = acc[{r.ratio, r.variant, r.cls}];
      a.first += r.dc_mean;
      a.second += 1;
    }
    for (const auto& [key, a] : acc)
      sm << std::get<0>(key) << "," << std::get<1>(key) << ","
         << std::get<2>(key) << "," << a.first / a.second << "\n";
  }
  return rows;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

std::vector<CompareRow> compare_records(
    const std::vector<EvalRecord>& baseline,
    const std::vector<std::vector<EvalRecord>>& candidates, int num_classes) {
  auto by_key = [](const std::vector<EvalRecord>& recs) {
    std::map<std::pair<int, int>, const EvalRecord*> m;  // (sample, class)
    for (const auto& r : recs) m[{r.sample_id, r.cls}] = &r;
    return m;
  };
  const auto base = by_key(baseline);

  std::vector<CompareRow> out;
  for (const auto& cand : candidates) {
    const auto cm = by_key(cand);
    if (cm.size() != base.size())
      throw DataError("compare: records are not paired with the baseline");
    const std::string variant = cand.empty() ? "?" : cand.front().variant;
    for (int c = 0; c < num_classes; ++c) {
      for (const std::string metric : {"dc", "abd"}) {
        std::vector<double> a, b;
        int n_pairs = 0;
        for (const auto& [key, rec] : cm) {
          if (key.second != c) continue;
          const auto bit = base.find(key);
          if (bit == base.end())
            throw DataError("compare: unpaired record for sample " +
                            std::to_string(key.first));
          ++n_pairs;
          if (metric == "dc") {
            a.push_back(rec->dc);
            b.push_back(bit->second->dc);
          } else if (rec->abd && bit->second->abd) {
            a.push_back(*rec->abd);
            b.push_back(*bit->second->abd);
          }
        }
        CompareRow row;
        row.variant = variant;
        row.cls = c;
        row.metric = metric;
        row.n = static_cast<int>(a.size());
        if (!a.empty()) {
          const double mean =
              std::accumulate(a.begin(), a.end(), 0.0) / a.size();
          double sq = 0.0;
          for (double x : a) sq += (x - mean) * (x - mean);
          row.mean = mean;
          row.sd = std::sqrt(sq / a.size());
          const WilcoxonResult wr = wilcoxon_signed_rank(a, b);
          row.p_vs_baseline = wr.p;
          row.stars = star_coding(wr.p);
        }
        (void)n_pairs;
        out.push_back(std::move(row));
      }
    }
  }
  return out;
}

void cmd_compare(const std::string& baseline_csv,
                 const std::vector<std::string>& candidate_csvs,
                 const std::string& out_csv, std::ostream& log) {
  const auto baseline = read_eval_csv(baseline_csv);
  int num_classes = 0;
  for (const auto& r : baseline) num_classes = std::max(num_classes, r.cls + 1);
  std::vector<std::vector<EvalRecord>> cands;
  for (const auto& p : candidate_csvs) cands.push_back(read_eval_csv(p));

  const auto rows = compare_records(baseline, cands, num_classes);
  fs::create_directories(fs::path(out_csv).parent_path());
  std::ofstream os(out_csv, std::ios::binary);
  if (!os) throw DataError("cannot write " + out_csv);
  FileConfig fc;
  os << provenance_line(fc) << "\n";
  os << "variant,class,metric,mean,sd,n,p_vs_baseline,stars\n";
  os.precision(12);
  for (const auto& r : rows) {
    os << r.variant << "," << r.cls << "," << r.metric << "," << r.mean << ","
       << r.sd << "," << r.n << "," << r.p_vs_baseline << "," << r.stars
       << "\n";
    log << r.variant << " class " << r.cls << " " << r.metric << ": p="
        << r.p_vs_baseline << " " << r.stars << "\n";
  }
}

}  // namespace uats
