#include "uats/config_file.hpp"

#include <fstream>
#include <sstream>

#include "uats/errors.hpp"

namespace uats {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean for " + key + ": " + v);
}

std::vector<double> parse_list(const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(trim(item)));
  return out;
}

}  // namespace

FileConfig parse_config(const std::string& text) {
  FileConfig fc;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      if (section != "model" && section != "confidence" && section != "variant")
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    TrainConfig& tc = fc.train;

    try {
      if (section.empty()) {
        if (key == "lr") tc.lr = std::stod(val);
        else if (key == "batch_size") tc.batch_size = std::stoi(val);
        else if (key == "max_epochs") tc.max_epochs = std::stoi(val);
        else if (key == "patience") tc.patience = std::stoi(val);
        else if (key == "alpha") tc.alpha = std::stod(val);
        else if (key == "lambda") tc.lambda = std::stod(val);
        else if (key == "beta1") tc.beta1 = std::stod(val);
        else if (key == "beta2") tc.beta2 = std::stod(val);
        else if (key == "adam_eps") tc.adam_eps = std::stod(val);
        else if (key == "pl_refresh_interval") tc.pl_refresh_interval = std::stoi(val);
        else if (key == "augment") tc.augment = parse_bool(val, key);
        else if (key == "seed") tc.seed = std::stoull(val);
        else throw ConfigError("config line " + std::to_string(lineno) +
                               ": unknown key " + key);
      } else if (section == "model") {
        if (key == "depth") tc.model.depth = std::stoi(val);
        else if (key == "base_channels") tc.model.base_channels = std::stoi(val);
        else if (key == "in_channels") tc.model.in_channels = std::stoi(val);
        else if (key == "num_classes") tc.model.num_classes = std::stoi(val);
        else if (key == "dropout_rate") tc.model.dropout_rate = std::stod(val);
        else if (key == "seed") tc.model.seed = std::stoull(val);
        else throw ConfigError("config line " + std::to_string(lineno) +
                               ": unknown key model." + key);
      } else if (section == "confidence") {
        if (key == "measure") {
          if (val == "softmax") tc.confidence.measure = ConfidenceMeasure::softmax;
          else if (val == "mc_entropy")
            tc.confidence.measure = ConfidenceMeasure::mc_entropy;
          else
            throw ConfigError("config: unknown confidence measure " + val);
        } else if (key == "fractions_percent") {
          tc.confidence.fractions.clear();
          for (double p : parse_list(val))
            tc.confidence.fractions.push_back(p / 100.0);
        } else if (key == "mc_passes") {
          tc.confidence.mc_passes = std::stoi(val);
        } else {
          throw ConfigError("config line " + std::to_string(lineno) +
                            ": unknown key confidence." + key);
        }
      } else if (section == "variant") {
        if (key == "id") {
          if (val.size() != 1)
            throw ConfigError("config: variant id must be a single letter");
          fc.variant = val[0];
          VariantSpec::registry(fc.variant);  // validates
        } else {
          throw ConfigError("config line " + std::to_string(lineno) +
                            ": unknown key variant." + key);
        }
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": bad value for " + key + ": " + val);
    }
  }
  return fc;
}

FileConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const FileConfig& fc) {
  const TrainConfig& tc = fc.train;
  std::ostringstream os;
  os.precision(17);
  os << "lr = " << tc.lr << "\n";
  os << "batch_size = " << tc.batch_size << "\n";
  os << "max_epochs = " << tc.max_epochs << "\n";
  os << "patience = " << tc.patience << "\n";
  os << "alpha = " << tc.alpha << "\n";
  os << "lambda = " << tc.lambda << "\n";
  os << "beta1 = " << tc.beta1 << "\n";
  os << "beta2 = " << tc.beta2 << "\n";
  os << "adam_eps = " << tc.adam_eps << "\n";
  os << "pl_refresh_interval = " << tc.pl_refresh_interval << "\n";
  os << "augment = " << (tc.augment ? "true" : "false") << "\n";
  os << "seed = " << tc.seed << "\n";
  os << "\n[model]\n";
  os << "depth = " << tc.model.depth << "\n";
  os << "base_channels = " << tc.model.base_channels << "\n";
  os << "in_channels = " << tc.model.in_channels << "\n";
  os << "num_classes = " << tc.model.num_classes << "\n";
  os << "dropout_rate = " << tc.model.dropout_rate << "\n";
  os << "seed = " << tc.model.seed << "\n";
  os << "\n[confidence]\n";
  os << "measure = "
     << (tc.confidence.measure == ConfidenceMeasure::softmax ? "softmax"
                                                             : "mc_entropy")
     << "\n";
  os << "fractions_percent = ";
  for (std::size_t i = 0; i < tc.confidence.fractions.size(); ++i) {
    if (i) os << ",";
    os << tc.confidence.fractions[i] * 100.0;
  }
  os << "\n";
  os << "mc_passes = " << tc.confidence.mc_passes << "\n";
  os << "\n[variant]\n";
  os << "id = " << fc.variant << "\n";
  return os.str();
}

std::uint64_t config_hash(const FileConfig& fc) {
  const std::string s = serialize_config(fc);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace uats
