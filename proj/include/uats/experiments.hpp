#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "uats/config_file.hpp"
#include "uats/data.hpp"
#include "uats/metrics.hpp"
#include "uats/trainer.hpp"

namespace uats {

inline constexpr const char* kToolVersion = "0.1.0";

// Resolves relative paths against UATS_DATA_ROOT when set, else cwd.
std::string resolve_data_path(const std::string& path);

struct GenerateArgs {
  SyntheticSpec spec;
  int n = 120;
  double labeled_frac = 0.5;
  double test_frac = 0.2;
  std::string out;
  bool force = false;
};

void cmd_generate(const GenerateArgs& args, std::ostream& log);

struct TrainArgs {
  std::string data_dir;
  FileConfig config;
  int ratio = 100;
  int repeat = 0;
  std::string from_checkpoint;  // required for stage-II variants
  std::string out_dir;
};

// Writes <out>/ckpt, epochs.csv, eval.csv; returns the test-set records.
std::vector<EvalRecord> cmd_train(const TrainArgs& args, std::ostream& log);

void cmd_evaluate(const std::string& checkpoint, const std::string& data_dir,
                  const std::string& out_csv, const std::string& variant_name,
                  std::ostream& log);

struct NoiseSweepArgs {
  std::string checkpoint;
  std::string data_dir;
  std::vector<double> sigmas = {0.01, 0.025, 0.05, 0.1, 0.2};
  std::uint64_t noise_seed = 99;
  std::string out_csv;
  std::string variant_name = "model";
};

struct NoiseRow {
  double sigma = 0.0;
  double mean_snr = 0.0;  // 0 for the clean baseline row
  int cls = 0;
  double dc_mean = 0.0, dc_sd = 0.0;
  double abd_mean = 0.0, abd_sd = 0.0;
  int n = 0, n_undefined = 0;
};

std::vector<NoiseRow> cmd_noise_sweep(const NoiseSweepArgs& args,
                                      std::ostream& log);

struct RatioSweepArgs {
  std::string data_dir;
  FileConfig config;
  std::vector<int> ratios = {5, 10, 25, 50, 100};
  int repeats = 3;
  std::vector<char> variants = {'B', 'G', 'F'};
  int jobs = 1;
  std::string out_dir;
};

struct RatioRow {
  int ratio = 0, repeat = 0;
  char variant = 'B';
  int cls = 0;
  double dc_mean = 0.0;  // over test samples
};

std::vector<RatioRow> cmd_ratio_sweep(const RatioSweepArgs& args,
                                      std::ostream& log);

struct CompareRow {
  std::string variant;
  int cls = 0;
  std::string metric;
  double mean = 0.0, sd = 0.0;
  int n = 0;
  double p_vs_baseline = 1.0;
  std::string stars;  // "", "*", "**", "***"
};

// Paired per-sample comparison of each candidate against the baseline.
std::vector<CompareRow> compare_records(
    const std::vector<EvalRecord>& baseline,
    const std::vector<std::vector<EvalRecord>>& candidates, int num_classes);

void cmd_compare(const std::string& baseline_csv,
                 const std::vector<std::string>& candidate_csvs,
                 const std::string& out_csv, std::ostream& log);

// eval.csv IO
void write_eval_csv(const std::string& path,
                    const std::vector<EvalRecord>& records,
                    const std::string& provenance);
std::vector<EvalRecord> read_eval_csv(const std::string& path);

std::string provenance_line(const FileConfig& cfg);
std::string star_coding(double p);

}  // namespace uats
