#include <CLI11.hpp>

#include <iostream>

#include "uats/errors.hpp"
#include "uats/experiments.hpp"

using namespace uats;

namespace {

std::vector<char> parse_variant_list(const std::string& s) {
  std::vector<char> out;
  for (char c : s) {
    if (c == ',' || c == ' ') continue;
    VariantSpec::registry(c);  // throws on unknown ids
    out.push_back(c);
  }
  if (out.empty()) throw ConfigError("empty variant list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semi-supervised segmentation laboratory (UATS)"};
  app.require_subcommand(1);

  // generate ----------------------------------------------------------------
  GenerateArgs gen;
  auto* cgen = app.add_subcommand("generate", "generate a synthetic dataset");
  cgen->add_option("--n", gen.n, "sample count");
  cgen->add_option("--size", gen.spec.size, "image side length");
  cgen->add_option("--seed", gen.spec.seed, "generator seed");
  cgen->add_option("--texture-noise", gen.spec.texture_noise, "texture noise sd");
  cgen->add_option("--shape-jitter", gen.spec.shape_jitter, "geometry variability");
  cgen->add_option("--labeled-frac", gen.labeled_frac, "labeled pool fraction");
  cgen->add_option("--test-frac", gen.test_frac, "test fraction of labeled pool");
  cgen->add_option("--out", gen.out, "output directory")->required();
  cgen->add_flag("--force", gen.force, "overwrite an existing dataset");

  // train ---------------------------------------------------------------
  TrainArgs tr;
  std::string train_config_path, train_variant;
  auto* ctrain = app.add_subcommand("train", "train one variant");
  ctrain->add_option("--data", tr.data_dir, "dataset directory")->required();
  ctrain->add_option("--config", train_config_path, "config file");
  ctrain->add_option("--variant", train_variant, "variant id B..J");
  ctrain->add_option("--ratio", tr.ratio, "labeled ratio in percent");
  ctrain->add_option("--repeat", tr.repeat, "repeat index for the split");
  ctrain->add_option("--from", tr.from_checkpoint, "stage-I checkpoint");
  ctrain->add_option("--out", tr.out_dir, "run output directory")->required();
  ctrain->add_option("--seed", tr.config.train.seed, "training seed");
  ctrain->add_option("--max-epochs", tr.config.train.max_epochs, "epoch cap");
  ctrain->add_option("--patience", tr.config.train.patience, "early-stop patience");
  ctrain->add_option("--refresh-interval", tr.config.train.pl_refresh_interval,
                     "pseudo-label refresh interval (variant D)");

  // evaluate ------------------------------------------------------------
  std::string ev_ckpt, ev_data, ev_out, ev_name = "model";
  auto* ceval = app.add_subcommand("evaluate", "evaluate a checkpoint on the test set");
  ceval->add_option("--checkpoint", ev_ckpt)->required();
  ceval->add_option("--data", ev_data)->required();
  ceval->add_option("--out", ev_out, "eval.csv path")->required();
  ceval->add_option("--name", ev_name, "variant name for the records");

  // noise-sweep ---------------------------------------------------------
  NoiseSweepArgs ns;
  auto* cnoise = app.add_subcommand("noise-sweep", "noise robustness protocol");
  cnoise->add_option("--checkpoint", ns.checkpoint)->required();
  cnoise->add_option("--data", ns.data_dir)->required();
  cnoise->add_option("--sigmas", ns.sigmas, "noise sigma list");
  cnoise->add_option("--noise-seed", ns.noise_seed);
  cnoise->add_option("--out", ns.out_csv, "output csv")->required();
  cnoise->add_option("--name", ns.variant_name);

  // ratio-sweep ---------------------------------------------------------
  RatioSweepArgs rs;
  std::string rs_config_path, rs_variants = "B,G,F";
  auto* cratio = app.add_subcommand("ratio-sweep", "labeled-ratio protocol");
  cratio->add_option("--data", rs.data_dir)->required();
  cratio->add_option("--config", rs_config_path, "config file");
  cratio->add_option("--ratios", rs.ratios, "ratio list in percent");
  cratio->add_option("--repeats", rs.repeats, "repeats per ratio");
  cratio->add_option("--variants", rs_variants, "comma-separated variant ids");
  cratio->add_option("--jobs", rs.jobs, "parallel training jobs");
  cratio->add_option("--out", rs.out_dir, "output directory")->required();
  cratio->add_option("--seed", rs.config.train.seed, "sweep seed");
  cratio->add_option("--max-epochs", rs.config.train.max_epochs, "epoch cap");
  cratio->add_option("--patience", rs.config.train.patience, "early-stop patience");

  // compare -------------------------------------------------------------
  std::string cmp_baseline, cmp_out;
  std::vector<std::string> cmp_candidates;
  auto* ccomp = app.add_subcommand("compare", "significance table vs baseline");
  ccomp->add_option("--baseline", cmp_baseline, "baseline eval.csv")->required();
  ccomp->add_option("--candidate", cmp_candidates, "candidate eval.csv files")
      ->required();
  ccomp->add_option("--out", cmp_out, "output csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (cgen->parsed()) {
      cmd_generate(gen, std::cout);
    } else if (ctrain->parsed()) {
      if (!train_config_path.empty()) tr.config = load_config(train_config_path);
      // flags override the file
      for (const auto* opt : ctrain->parse_order()) {
        if (opt->get_name() == "--seed")
          tr.config.train.seed = opt->as<std::uint64_t>();
        else if (opt->get_name() == "--max-epochs")
          tr.config.train.max_epochs = opt->as<int>();
        else if (opt->get_name() == "--patience")
          tr.config.train.patience = opt->as<int>();
        else if (opt->get_name() == "--refresh-interval")
          tr.config.train.pl_refresh_interval = opt->as<int>();
      }
      if (!train_variant.empty()) {
        if (train_variant.size() != 1)
          throw ConfigError("variant must be a single letter; valid ids: " +
                            VariantSpec::valid_ids());
        VariantSpec::registry(train_variant[0]);
        tr.config.variant = train_variant[0];
      }
      if (tr.config.train.confidence.fractions.empty())
        tr.config.train.confidence.fractions = {0.5, 0.5, 0.5, 0.1, 0.1};
      cmd_train(tr, std::cout);
    } else if (ceval->parsed()) {
      cmd_evaluate(ev_ckpt, ev_data, ev_out, ev_name, std::cout);
    } else if (cnoise->parsed()) {
      cmd_noise_sweep(ns, std::cout);
    } else if (cratio->parsed()) {
      if (!rs_config_path.empty()) rs.config = load_config(rs_config_path);
      for (const auto* opt : cratio->parse_order()) {
        if (opt->get_name() == "--seed")
          rs.config.train.seed = opt->as<std::uint64_t>();
        else if (opt->get_name() == "--max-epochs")
          rs.config.train.max_epochs = opt->as<int>();
        else if (opt->get_name() == "--patience")
          rs.config.train.patience = opt->as<int>();
      }
      rs.variants = parse_variant_list(rs_variants);
      if (rs.config.train.confidence.fractions.empty())
        rs.config.train.confidence.fractions = {0.5, 0.5, 0.5, 0.1, 0.1};
      cmd_ratio_sweep(rs, std::cout);
    } else if (ccomp->parsed()) {
      cmd_compare(cmp_baseline, cmp_candidates, cmp_out, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
