#include "diffml/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "diffml/dataset_selection.hpp"
#include "diffml/error.hpp"
#include "diffml/feature_selection.hpp"

namespace diffml::harness {

using nlohmann::json;

namespace {

constexpr const char* kDiffml = "diffml";

[[noreturn]] void config_fail(const std::string& message) { throw Error(ErrorCode::config_error, message); }

// ---- JSON helpers ---------------------------------------------------------

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!obj.is_object()) config_fail(where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_fail(where + ": unknown key \"" + key + "\"");
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    config_fail(where + "." + key + ": " + e.what());
  }
}

double time_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string hex16(std::uint64_t value) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << value;
  return out.str();
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---- cleaning methods <-> JSON -------------------------------------------

cleaning::Detector detector_from_json(const json& j) {
  const std::string where = "options.detectors[]";
  if (j.is_string()) return detector_from_json(json{{"name", j}});
  check_keys(j, {"name", "threshold", "bin_count", "min_freq"}, where);
  std::string name;
  read(j, "name", name, where);
  cleaning::Detector d;
  if (name == "missing_value") {
    if (j.size() > 1) config_fail(where + ": missing_value takes no parameters");
    d = cleaning::MissingValueDetector{};
  } else if (name == "zscore") {
    cleaning::ZScoreDetector z;
    read(j, "threshold", z.threshold, where);
    if (j.contains("bin_count") || j.contains("min_freq")) config_fail(where + ": zscore takes only threshold");
    d = z;
  } else if (name == "histogram") {
    cleaning::HistogramDetector h;
    read(j, "bin_count", h.bin_count, where);
    read(j, "min_freq", h.min_freq, where);
    if (j.contains("threshold")) config_fail(where + ": histogram does not take threshold");
    d = h;
  } else {
    config_fail(where + ": unknown detector \"" + name + "\"");
  }
  try {
    cleaning::validate(d);
  } catch (const Error& e) {
    config_fail(where + ": " + e.what());
  }
  return d;
}

json detector_to_json(const cleaning::Detector& d) {
  json j{{"name", cleaning::name_of(d)}};
  if (const auto* z = std::get_if<cleaning::ZScoreDetector>(&d)) j["threshold"] = z->threshold;
  if (const auto* h = std::get_if<cleaning::HistogramDetector>(&d)) {
    j["bin_count"] = h->bin_count;
    j["min_freq"] = h->min_freq;
  }
  return j;
}

cleaning::Repair repair_from_json(const json& j) {
  const std::string where = "options.repairs[]";
  if (j.is_string()) return repair_from_json(json{{"name", j}});
  check_keys(j, {"name", "k"}, where);
  std::string name;
  read(j, "name", name, where);
  cleaning::Repair r;
  if (name == "mean") {
    r = cleaning::MeanImpute{};
  } else if (name == "median") {
    r = cleaning::MedianImpute{};
  } else if (name == "knn") {
    cleaning::KnnImpute knn;
    read(j, "k", knn.k, where);
    r = knn;
  } else {
    config_fail(where + ": unknown repair \"" + name + "\"");
  }
  if (j.contains("k") && name != "knn") config_fail(where + ": only knn takes k");
  try {
    cleaning::validate(r);
  } catch (const Error& e) {
    config_fail(where + ": " + e.what());
  }
  return r;
}

json repair_to_json(const cleaning::Repair& r) {
  json j{{"name", cleaning::name_of(r)}};
  if (const auto* knn = std::get_if<cleaning::KnnImpute>(&r)) j["k"] = knn->k;
  return j;
}

// ---- report row helpers --------------------------------------------------

std::string opt_number(const std::optional<double>& v) { return v ? data::format_number(*v) : ""; }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string_view to_string(Experiment experiment) {
  switch (experiment) {
    case Experiment::cleaning: return "cleaning";
    case Experiment::dataset_selection: return "dataset_selection";
    case Experiment::feature_selection: return "feature_selection";
  }
  return "unknown";
}

Experiment experiment_from_string(std::string_view name) {
  if (name == "cleaning") return Experiment::cleaning;
  if (name == "dataset_selection") return Experiment::dataset_selection;
  if (name == "feature_selection") return Experiment::feature_selection;
  config_fail("unknown experiment \"" + std::string(name) + "\"");
}

std::vector<std::string> baselines_for(Experiment experiment) {
  switch (experiment) {
    case Experiment::cleaning: return {"dirty", "grid_all_pairs"};
    case Experiment::dataset_selection: return {"union_default"};
    case Experiment::feature_selection: return {"no_selection", "pca_grid"};
  }
  return {};
}

ExperimentConfig default_config(Experiment experiment) {
  ExperimentConfig c;
  c.experiment = experiment;
  c.baselines = baselines_for(experiment);
  c.seeds = {0};
  c.data.synth.n_rows = 1000;
  c.train_config.epochs = 30;
  c.train_config.batch_size = 32;
  switch (experiment) {
    case Experiment::cleaning:
      c.cleaning.detectors = {cleaning::MissingValueDetector{}, cleaning::ZScoreDetector{},
                              cleaning::HistogramDetector{}};
      c.cleaning.repairs = {cleaning::MeanImpute{}, cleaning::KnnImpute{}};
      c.error_specs = {data::ErrorSpec{data::ErrorKind::missing, 0.1}};
      c.data.synth.n_rows = 2000;
      c.train_config.epochs = 40;
      c.train_config.learning_rate = 3e-3;
      c.train_config.lambda_learning_rate = 0.1;
      break;
    case Experiment::dataset_selection: {
      data::ErrorSpec swap;
      swap.kind = data::ErrorKind::label_swap;
      swap.rate = 0.3;
      swap.source = 1;
      c.error_specs = {swap};
      c.train_config.optimizer = nn::OptimizerKind::sgd;
      c.train_config.learning_rate = 0.05;
      c.train_config.lambda_learning_rate = 0.01;
      break;
    }
    case Experiment::feature_selection:
      c.data.synth.n_noise = 20;
      c.train_config.learning_rate = 3e-3;
      c.train_config.lambda_learning_rate = 5e-2;
      break;
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) config_fail("at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    config_fail("seeds must be distinct");
  }
  if (output_dir.empty()) config_fail("output_dir is empty");
  if (!(budget_seconds >= 0.0)) config_fail("budget_seconds must be >= 0");
  if (jobs < 1) config_fail("jobs must be >= 1");
  try {
    train_config.validate();
  } catch (const Error& e) {
    config_fail(std::string("train_config: ") + e.what());
  }
  const auto valid = baselines_for(experiment);
  std::set<std::string> seen;
  for (const auto& b : baselines) {
    if (std::find(valid.begin(), valid.end(), b) == valid.end()) {
      config_fail("baseline \"" + b + "\" is not valid for the " + std::string(to_string(experiment)) +
                  " experiment");
    }
    if (!seen.insert(b).second) config_fail("baseline \"" + b + "\" listed twice");
  }
  if (!(split.train > 0 && split.val > 0 && split.test > 0) ||
      std::abs(split.train + split.val + split.test - 1.0) > 1e-9) {
    config_fail("split fractions must be positive and sum to 1");
  }
  if (!data.csv) {
    if (data.synth.n_rows < 10) config_fail("synth.n_rows must be >= 10");
    if (data.synth.n_informative + data.synth.n_noise == 0) config_fail("synth needs at least one feature");
  }
  for (const auto& spec : error_specs) {
    if (!(spec.rate >= 0.0 && spec.rate <= 1.0)) config_fail("error rate must lie in [0, 1]");
    if (spec.source >= 0) {
      if (experiment != Experiment::dataset_selection) config_fail("error_specs[].source needs dataset_selection");
      if (static_cast<std::size_t>(spec.source) >= selection.sources) {
        config_fail("error_specs[].source out of range");
      }
    }
  }
  switch (experiment) {
    case Experiment::cleaning:
      if (cleaning.detectors.empty() || cleaning.repairs.empty()) {
        config_fail("cleaning needs at least one detector and one repair");
      }
      break;
    case Experiment::dataset_selection:
      if (selection.sources < 1) config_fail("sources must be >= 1");
      if (train_config.optimizer != nn::OptimizerKind::sgd) {
        config_fail("dataset_selection requires train_config.optimizer = sgd");
      }
      break;
    case Experiment::feature_selection:
      if (features.pca_k_values.empty() && features.pca_k_count < 1) config_fail("pca_k_count must be >= 1");
      for (auto k : features.pca_k_values)
        if (k < 1) config_fail("pca_k_values entries must be >= 1");
      if (!(features.l1_weight >= 0.0)) config_fail("l1_weight must be >= 0");
      if (!std::isfinite(features.gate_init)) config_fail("gate_init must be finite");
      break;
  }
}

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(root, {"experiment", "data", "split", "error_specs", "train_config", "baselines", "seeds",
                    "output_dir", "budget_seconds", "jobs", "options"},
             "config");
  if (!root.contains("experiment")) config_fail("config: \"experiment\" is required");
  std::string experiment_name;
  read(root, "experiment", experiment_name, "config");
  ExperimentConfig c = default_config(experiment_from_string(experiment_name));

  if (root.contains("data")) {
    const json& d = root["data"];
    check_keys(d, {"csv", "target", "synth"}, "data");
    if (d.contains("csv") && d.contains("synth")) config_fail("data: give either csv or synth");
    if (d.contains("csv")) {
      std::string path;
      read(d, "csv", path, "data");
      c.data.csv = path;
    }
    read(d, "target", c.data.target, "data");
    if (d.contains("synth")) {
      const json& s = d["synth"];
      check_keys(s, {"n_rows", "n_informative", "n_noise", "noise_std", "latent_factors"}, "data.synth");
      read(s, "n_rows", c.data.synth.n_rows, "data.synth");
      read(s, "n_informative", c.data.synth.n_informative, "data.synth");
      read(s, "n_noise", c.data.synth.n_noise, "data.synth");
      read(s, "noise_std", c.data.synth.noise_std, "data.synth");
      read(s, "latent_factors", c.data.synth.latent_factors, "data.synth");
    }
  }
  if (root.contains("split")) {
    const json& s = root["split"];
    check_keys(s, {"train", "val", "test"}, "split");
    read(s, "train", c.split.train, "split");
    read(s, "val", c.split.val, "split");
    read(s, "test", c.split.test, "split");
  }
  if (root.contains("error_specs")) {
    if (!root["error_specs"].is_array()) config_fail("error_specs must be an array");
    c.error_specs.clear();
    for (const json& e : root["error_specs"]) {
      check_keys(e, {"kind", "rate", "seed", "outlier_sigma", "typo_mode", "source"}, "error_specs[]");
      data::ErrorSpec spec;
      std::string kind = "missing";
      read(e, "kind", kind, "error_specs[]");
      try {
        spec.kind = data::error_kind_from_string(kind);
      } catch (const Error& err) {
        config_fail(std::string("error_specs[].kind: ") + err.what());
      }
      read(e, "rate", spec.rate, "error_specs[]");
      read(e, "seed", spec.seed, "error_specs[]");
      read(e, "outlier_sigma", spec.outlier_sigma, "error_specs[]");
      read(e, "typo_mode", spec.typo_mode, "error_specs[]");
      read(e, "source", spec.source, "error_specs[]");
      c.error_specs.push_back(spec);
    }
  }
  if (root.contains("train_config")) {
    const json& t = root["train_config"];
    check_keys(t, {"learning_rate", "lambda_learning_rate", "batch_size", "epochs", "optimizer",
                   "lambda_optimizer", "adam_betas", "adam_eps", "hidden_layers"},
               "train_config");
    auto& tc = c.train_config;
    read(t, "learning_rate", tc.learning_rate, "train_config");
    read(t, "lambda_learning_rate", tc.lambda_learning_rate, "train_config");
    read(t, "batch_size", tc.batch_size, "train_config");
    read(t, "epochs", tc.epochs, "train_config");
    for (const char* key : {"optimizer", "lambda_optimizer"}) {
      if (!t.contains(key)) continue;
      std::string name;
      read(t, key, name, "train_config");
      try {
        (std::string_view(key) == "optimizer" ? tc.optimizer : tc.lambda_optimizer) = nn::optimizer_from_string(name);
      } catch (const Error& e) {
        config_fail(std::string("train_config.") + key + ": " + e.what());
      }
    }
    if (t.contains("adam_betas")) {
      std::vector<double> betas;
      read(t, "adam_betas", betas, "train_config");
      if (betas.size() != 2) config_fail("train_config.adam_betas needs two values");
      tc.adam_betas = {betas[0], betas[1]};
    }
    read(t, "adam_eps", tc.adam_eps, "train_config");
    read(t, "hidden_layers", tc.hidden_layers, "train_config");
  }
  read(root, "baselines", c.baselines, "config");
  read(root, "seeds", c.seeds, "config");
  if (root.contains("output_dir")) {
    std::string dir;
    read(root, "output_dir", dir, "config");
    c.output_dir = dir;
  }
  read(root, "budget_seconds", c.budget_seconds, "config");
  read(root, "jobs", c.jobs, "config");

  if (root.contains("options")) {
    const json& o = root["options"];
    switch (c.experiment) {
      case Experiment::cleaning:
        check_keys(o, {"detectors", "repairs", "lambda_batch", "free_pair_weights"}, "options");
        if (o.contains("detectors")) {
          c.cleaning.detectors.clear();
          for (const json& d : o["detectors"]) c.cleaning.detectors.push_back(detector_from_json(d));
        }
        if (o.contains("repairs")) {
          c.cleaning.repairs.clear();
          for (const json& r : o["repairs"]) c.cleaning.repairs.push_back(repair_from_json(r));
        }
        if (o.contains("lambda_batch")) {
          std::string split;
          read(o, "lambda_batch", split, "options");
          if (split == "train") {
            c.cleaning.lambda_batch = cleaning::LambdaBatchSplit::train;
          } else if (split == "val") {
            c.cleaning.lambda_batch = cleaning::LambdaBatchSplit::val;
          } else {
            config_fail("options.lambda_batch must be \"train\" or \"val\"");
          }
        }
        read(o, "free_pair_weights", c.cleaning.free_pair_weights, "options");
        break;
      case Experiment::dataset_selection:
        check_keys(o, {"sources", "val_batch_size", "epoch_level_lambda"}, "options");
        read(o, "sources", c.selection.sources, "options");
        read(o, "val_batch_size", c.selection.val_batch_size, "options");
        read(o, "epoch_level_lambda", c.selection.epoch_level_lambda, "options");
        break;
      case Experiment::feature_selection:
        check_keys(o, {"pca_k_count", "pca_k_values", "alternating", "l1_weight", "gate_init"}, "options");
        read(o, "pca_k_count", c.features.pca_k_count, "options");
        read(o, "pca_k_values", c.features.pca_k_values, "options");
        read(o, "alternating", c.features.alternating, "options");
        read(o, "l1_weight", c.features.l1_weight, "options");
        read(o, "gate_init", c.features.gate_init, "options");
        break;
    }
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::config_error, "cannot read config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

namespace {

json config_json(const ExperimentConfig& c) {
  json data;
  if (c.data.csv) {
    data["csv"] = c.data.csv->string();
  } else {
    data["synth"] = {{"n_rows", c.data.synth.n_rows},
                     {"n_informative", c.data.synth.n_informative},
                     {"n_noise", c.data.synth.n_noise},
                     {"noise_std", c.data.synth.noise_std},
                     {"latent_factors", c.data.synth.latent_factors}};
  }
  data["target"] = c.data.target;

  json errors = json::array();
  for (const auto& e : c.error_specs) {
    errors.push_back({{"kind", std::string(data::to_string(e.kind))},
                      {"rate", e.rate},
                      {"seed", e.seed},
                      {"outlier_sigma", e.outlier_sigma},
                      {"typo_mode", e.typo_mode},
                      {"source", e.source}});
  }
  const auto& t = c.train_config;
  json train{{"learning_rate", t.learning_rate},
             {"lambda_learning_rate", t.lambda_learning_rate},
             {"batch_size", t.batch_size},
             {"epochs", t.epochs},
             {"optimizer", std::string(nn::to_string(t.optimizer))},
             {"lambda_optimizer", std::string(nn::to_string(t.lambda_optimizer))},
             {"adam_betas", {t.adam_betas.first, t.adam_betas.second}},
             {"adam_eps", t.adam_eps},
             {"hidden_layers", t.hidden_layers}};

  json options;
  switch (c.experiment) {
    case Experiment::cleaning: {
      json dets = json::array();
      for (const auto& d : c.cleaning.detectors) dets.push_back(detector_to_json(d));
      json reps = json::array();
      for (const auto& r : c.cleaning.repairs) reps.push_back(repair_to_json(r));
      options = {{"detectors", dets},
                 {"repairs", reps},
                 {"lambda_batch", c.cleaning.lambda_batch == cleaning::LambdaBatchSplit::val ? "val" : "train"},
                 {"free_pair_weights", c.cleaning.free_pair_weights}};
      break;
    }
    case Experiment::dataset_selection:
      options = {{"sources", c.selection.sources},
                 {"val_batch_size", c.selection.val_batch_size},
                 {"epoch_level_lambda", c.selection.epoch_level_lambda}};
      break;
    case Experiment::feature_selection:
      options = {{"pca_k_count", c.features.pca_k_count},
                 {"pca_k_values", c.features.pca_k_values},
                 {"alternating", c.features.alternating},
                 {"l1_weight", c.features.l1_weight},
                 {"gate_init", c.features.gate_init}};
      break;
  }
  return {{"experiment", std::string(to_string(c.experiment))},
          {"data", data},
          {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
          {"error_specs", errors},
          {"train_config", train},
          {"baselines", c.baselines},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir.string()},
          {"budget_seconds", c.budget_seconds},
          {"jobs", c.jobs},
          {"options", options}};
}

}  // namespace

std::string config_to_json(const ExperimentConfig& config) { return config_json(config).dump(2); }

std::string config_hash(const ExperimentConfig& config) {
  // Output location and worker count do not change results.
  json j = config_json(config);
  j.erase("output_dir");
  j.erase("jobs");
  return hex16(fnv1a(j.dump()));
}

const MethodResult* RunReport::find(std::uint64_t seed, const std::string& method) const {
  for (const auto& r : results)
    if (r.seed == seed && r.method == method) return &r;
  return nullptr;
}

std::size_t RunReport::failed_cells() const {
  return static_cast<std::size_t>(
      std::count_if(results.begin(), results.end(), [](const MethodResult& r) { return r.status != "ok"; }));
}

std::size_t RunReport::pipelines(const std::string& method, std::uint64_t seed) const {
  const auto* r = find(seed, method);
  return r ? r->pipelines : 0;
}

namespace {

// Residual encoding of a missing cell in the dirty table: a raw 0, mapped
// through the standardizer.
std::vector<double> dirty_fill(const data::DatasetBundle& bundle) {
  std::vector<double> fill(bundle.train.n_cols(), 0.0);
  for (auto c : bundle.train.feature_columns()) fill[c] = bundle.standardizer.apply_value(c, 0.0);
  return fill;
}

double test_rmse(const data::SealedTable& test, const std::function<Matrix(const Matrix&)>& predict) {
  const data::Table& t = test.open();
  return nn::rmse(predict(t.feature_matrix()), t.target_matrix());
}

}  // namespace

data::DatasetBundle prepare_bundle(const ExperimentConfig& config, std::uint64_t seed,
                                   std::vector<std::string>* warnings) {
  data::Table table;
  if (config.data.csv) {
    table = data::load_table(*config.data.csv, config.data.target, warnings);
  } else {
    data::SynthSpec spec = config.data.synth;
    spec.seed = nn::derive_seed(seed, 0xDA7A);
    table = data::synth_make(spec).table;
  }
  data::DatasetBundle bundle = data::split_bundle(table, config.split, nn::derive_seed(seed, 0x5B17));

  const std::size_t n_train = bundle.train.n_rows();
  const std::size_t sources = config.experiment == Experiment::dataset_selection ? config.selection.sources : 1;
  bundle.source_ids.assign(n_train, 0);
  for (std::size_t i = 0; i < n_train; ++i) bundle.source_ids[i] = static_cast<int>(i * sources / n_train);

  for (std::size_t i = 0; i < config.error_specs.size(); ++i) {
    data::ErrorSpec spec = config.error_specs[i];
    spec.seed = nn::derive_seed(nn::derive_seed(seed, 0xE000 + i), spec.seed);
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < n_train; ++r) {
      if (spec.source < 0 || bundle.source_ids[r] == spec.source) rows.push_back(r);
    }
    bundle.train = data::inject_errors(bundle.train, spec, rows).table;
  }
  bundle = data::standardize_fit_apply(std::move(bundle), warnings);

  // Held-out splits from a CSV may carry missing cells; they get the train
  // mean (0 after standardization) so every method sees the same inputs.
  auto mean_fill = [&](const data::Table& t, const char* split) {
    if (t.missing_count() == 0) return t;
    if (warnings) {
      warnings->push_back(std::string(split) + " split: " + std::to_string(t.missing_count()) +
                          " missing cells filled with the train mean");
    }
    return cleaning::fill_missing(t, std::vector<double>(t.n_cols(), 0.0));
  };
  bundle.val = mean_fill(bundle.val, "val");
  bundle.test.transform([&](const data::Table& t) { return mean_fill(t, "test"); });
  return bundle;
}

GridBaselineResult run_grid_baseline(const data::DatasetBundle& bundle,
                                     const std::vector<cleaning::RepairedVariant>& variants,
                                     const std::vector<std::string>& variant_names,
                                     const nn::TrainConfig& config, std::optional<double> budget_seconds) {
  if (variants.empty()) throw Error(ErrorCode::invalid_argument, "run_grid_baseline: no variants");
  if (variant_names.size() != variants.size()) {
    throw Error(ErrorCode::invalid_argument, "run_grid_baseline: one name per variant required");
  }
  const auto start = std::chrono::steady_clock::now();
  const Matrix val_x = bundle.val.feature_matrix();
  const Matrix val_y = bundle.val.target_matrix();
  GridBaselineResult result;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto& variant = variants[i];
    GridCellResult cell{variant.detector_idx, variant.repair_idx, variant_names[i], "", {}, {}, 0.0, {}};
    if (budget_seconds && time_since(start) >= *budget_seconds) {
      cell.status = "timeout";
      cell.message = "grid budget of " + data::format_number(*budget_seconds) + " s exhausted";
      result.timed_out = true;
      result.cells.push_back(std::move(cell));
      continue;
    }
    const auto cell_start = std::chrono::steady_clock::now();
    try {
      nn::MlpModel model = nn::MlpModel::regressor(variant.table.n_features(), config);
      ++result.pipelines_trained;
      nn::train_mlp(model, variant.table.feature_matrix(), variant.table.target_matrix(), val_x, val_y, config);
      cell.val_rmse = nn::rmse(model.predict(val_x), val_y);
      const std::size_t before = bundle.test.reads();
      cell.test_rmse = test_rmse(bundle.test, [&](const Matrix& x) { return model.predict(x); });
      result.test_reads += bundle.test.reads() - before;
      cell.status = "ok";
    } catch (const Error& e) {
      cell.status = "failed";
      cell.message = e.what();
    }
    cell.seconds = time_since(cell_start);
    result.cells.push_back(std::move(cell));
  }
  return result;
}

namespace {

struct SeedContext {
  std::uint64_t seed = 0;
  std::optional<data::DatasetBundle> bundle;
  std::uint64_t bundle_hash = 0;
  std::vector<cleaning::RepairedVariant> variants;  // cleaning only
  std::vector<std::string> variant_names;
  std::string error;  // preparation failure
  std::vector<std::string> warnings;
};

struct CellOutput {
  MethodResult result;
  std::vector<GridRow> grid;
  std::vector<WeightRow> weights;
};

std::vector<std::string> weight_columns(const ExperimentConfig& config, const SeedContext* any) {
  std::vector<std::string> cols;
  switch (config.experiment) {
    case Experiment::cleaning: {
      cleaning::CleaningMixture mixture(config.cleaning.detectors, config.cleaning.repairs);
      for (std::size_t p = 0; p < mixture.pair_count(); ++p) cols.push_back("sigma__" + mixture.pair_name(p));
      break;
    }
    case Experiment::dataset_selection:
      for (std::size_t k = 0; k < config.selection.sources; ++k) cols.push_back("pi__source" + std::to_string(k));
      break;
    case Experiment::feature_selection:
      if (any && any->bundle) {
        for (const auto& name : any->bundle->train.feature_names()) cols.push_back("gate__" + name);
      }
      break;
  }
  return cols;
}

// Picks the ok cell with the lowest validation RMSE.
template <typename Cell>
const Cell* val_best(const std::vector<Cell>& cells) {
  const Cell* best = nullptr;
  for (const auto& c : cells) {
    if (c.status != "ok" || !c.val_rmse) continue;
    if (!best || *c.val_rmse < *best->val_rmse) best = &c;
  }
  return best;
}

void run_diffml(const ExperimentConfig& config, const SeedContext& ctx, data::DatasetBundle& bundle,
                nn::TrainConfig tc, CellOutput& out) {
  const Matrix val_x = bundle.val.feature_matrix();
  const Matrix val_y = bundle.val.target_matrix();
  auto& r = out.result;
  switch (config.experiment) {
    case Experiment::cleaning: {
      cleaning::CleaningMixture mixture(config.cleaning.detectors, config.cleaning.repairs,
                                        config.cleaning.free_pair_weights);
      nn::MlpModel model = nn::MlpModel::regressor(bundle.train.n_features(), tc);
      cleaning::CleaningOptions options{config.cleaning.lambda_batch};
      std::vector<cleaning::RepairedVariant> val_variants;
      if (options.lambda_batch == cleaning::LambdaBatchSplit::val) {
        // The val split is clean, so every variant of it is the split itself.
        for (const auto& v : ctx.variants) val_variants.push_back({v.detector_idx, v.repair_idx, bundle.val});
      }
      r.pipelines = 1;
      const auto history = cleaning::train_cleaning(bundle, ctx.variants, mixture, model, tc, options, val_variants);
      for (const auto& e : history.epochs) out.weights.push_back({ctx.seed, e.epoch, e.val_rmse, e.sigma});
      r.val_rmse = nn::rmse(model.predict(val_x), val_y);
      r.test_rmse = test_rmse(bundle.test, [&](const Matrix& x) { return model.predict(x); });
      r.selected = mixture.pair_name(cleaning::chosen_pair(cleaning::pair_distribution(mixture)));
      break;
    }
    case Experiment::dataset_selection: {
      dataset_selection::SourceWeights weights(config.selection.sources);
      nn::MlpModel model = nn::MlpModel::regressor(bundle.train.n_features(), tc);
      dataset_selection::SelectionOptions options{config.selection.val_batch_size,
                                                  config.selection.epoch_level_lambda};
      r.pipelines = 1;
      const auto history = dataset_selection::train_selection(bundle, weights, model, tc, options);
      for (const auto& rec : history.records) out.weights.push_back({ctx.seed, rec.step, rec.val_rmse, rec.pi});
      r.val_rmse = nn::rmse(model.predict(val_x), val_y);
      r.test_rmse = test_rmse(bundle.test, [&](const Matrix& x) { return model.predict(x); });
      break;
    }
    case Experiment::feature_selection: {
      feature_selection::FeatureGates gates(bundle.train.n_features(), config.features.gate_init);
      nn::MlpModel model = nn::MlpModel::regressor(bundle.train.n_features(), tc);
      feature_selection::GateOptions options{config.features.alternating, config.features.l1_weight};
      r.pipelines = 1;
      const auto history = feature_selection::train_gated(bundle, gates, model, tc, options);
      for (const auto& e : history.epochs) out.weights.push_back({ctx.seed, e.epoch, e.val_rmse, e.gates});
      auto gated_predict = [&](const Matrix& x) {
        return model.predict(feature_selection::gate_apply_frozen(gates, autodiff::Value::constant(x)).data());
      };
      r.val_rmse = nn::rmse(gated_predict(val_x), val_y);
      r.test_rmse = test_rmse(bundle.test, gated_predict);
      std::string selected;
      const auto names = bundle.train.feature_names();
      for (auto j : gates.selected()) selected += (selected.empty() ? "" : ";") + names[j];
      r.selected = selected;
      break;
    }
  }
}

void run_baseline(const ExperimentConfig& config, const SeedContext& ctx, data::DatasetBundle& bundle,
                  nn::TrainConfig tc, CellOutput& out) {
  const Matrix val_x = bundle.val.feature_matrix();
  const Matrix val_y = bundle.val.target_matrix();
  auto& r = out.result;
  const std::string& method = r.method;
  const std::optional<double> budget = config.budget_seconds;

  if (method == "dirty" || method == "no_selection") {
    const data::Table train =
        method == "dirty" ? cleaning::fill_missing(bundle.train, dirty_fill(bundle)) : bundle.train;
    nn::MlpModel model = nn::MlpModel::regressor(train.n_features(), tc);
    r.pipelines = 1;
    nn::train_mlp(model, train.feature_matrix(), train.target_matrix(), val_x, val_y, tc);
    r.val_rmse = nn::rmse(model.predict(val_x), val_y);
    r.test_rmse = test_rmse(bundle.test, [&](const Matrix& x) { return model.predict(x); });
  } else if (method == "union_default") {
    // Same trainer with the source weights held at uniform.
    tc.lambda_learning_rate = 0.0;
    dataset_selection::SourceWeights weights(config.selection.sources);
    nn::MlpModel model = nn::MlpModel::regressor(bundle.train.n_features(), tc);
    r.pipelines = 1;
    dataset_selection::train_selection(bundle, weights, model, tc);
    r.val_rmse = nn::rmse(model.predict(val_x), val_y);
    r.test_rmse = test_rmse(bundle.test, [&](const Matrix& x) { return model.predict(x); });
  } else if (method == "grid_all_pairs") {
    const auto grid = run_grid_baseline(bundle, ctx.variants, ctx.variant_names, tc, budget);
    r.pipelines = grid.pipelines_trained;
    for (const auto& c : grid.cells) {
      out.grid.push_back({ctx.seed, method, c.name, c.status, c.val_rmse, c.test_rmse, c.seconds});
    }
    if (const auto* best = val_best(grid.cells)) {
      r.val_rmse = best->val_rmse;
      r.test_rmse = best->test_rmse;
      r.selected = best->name;
    } else {
      throw Error(grid.timed_out ? ErrorCode::timeout : ErrorCode::non_finite, "no grid cell completed");
    }
  } else if (method == "pca_grid") {
    const auto& f = config.features;
    const std::size_t n_features = bundle.train.n_features();
    std::vector<std::size_t> ks = f.pca_k_values;
    if (ks.empty()) ks = feature_selection::default_k_grid(n_features, f.pca_k_count);
    const auto grid = feature_selection::run_pca_grid(bundle, ks, tc, budget);
    r.pipelines = grid.pipelines_trained;
    r.test_reads += grid.test_reads;  // projected copies of the test split
    for (const auto& c : grid.cells) {
      out.grid.push_back({ctx.seed, method, "k=" + std::to_string(c.k), c.status, c.val_rmse, c.test_rmse,
                          c.seconds});
    }
    if (const auto* best = val_best(grid.cells)) {
      r.val_rmse = best->val_rmse;
      r.test_rmse = best->test_rmse;
      r.selected = "k=" + std::to_string(best->k);
    } else {
      throw Error(grid.timed_out ? ErrorCode::timeout : ErrorCode::non_finite, "no grid cell completed");
    }
  } else {
    throw Error(ErrorCode::config_error, "unknown baseline " + method);
  }
}

CellOutput run_cell(const ExperimentConfig& config, const SeedContext& ctx, const std::string& method) {
  CellOutput out;
  out.result.seed = ctx.seed;
  out.result.method = method;
  const auto start = std::chrono::steady_clock::now();
  if (!ctx.bundle) {
    out.result.status = "failed";
    out.result.message = ctx.error;
    return out;
  }
  // A private copy keeps test-read counting per cell and thread-safe.
  data::DatasetBundle bundle = *ctx.bundle;
  nn::TrainConfig tc = config.train_config;
  tc.seed = ctx.seed;
  try {
    if (data::hash_bundle(bundle) != ctx.bundle_hash) {
      throw Error(ErrorCode::invalid_argument, "bundle hash changed between methods");
    }
    if (method == kDiffml) {
      run_diffml(config, ctx, bundle, tc, out);
    } else {
      run_baseline(config, ctx, bundle, tc, out);
    }
    out.result.test_reads += bundle.test.reads();
    out.result.status = "ok";
  } catch (const Error& e) {
    out.result.status = e.code() == ErrorCode::timeout ? "timeout" : "failed";
    out.result.message = e.what();
    out.result.val_rmse.reset();
    out.result.test_rmse.reset();
  }
  out.result.seconds = time_since(start);
  return out;
}

SeedContext prepare_seed(const ExperimentConfig& config, std::uint64_t seed) {
  SeedContext ctx;
  ctx.seed = seed;
  try {
    ctx.bundle = prepare_bundle(config, seed, &ctx.warnings);
    ctx.bundle_hash = data::hash_bundle(*ctx.bundle);
    if (config.experiment == Experiment::cleaning) {
      cleaning::VariantOptions options{dirty_fill(*ctx.bundle)};
      ctx.variants = cleaning::build_variants(ctx.bundle->train, config.cleaning.detectors,
                                              config.cleaning.repairs, options, &ctx.warnings);
      cleaning::CleaningMixture mixture(config.cleaning.detectors, config.cleaning.repairs);
      for (std::size_t p = 0; p < mixture.pair_count(); ++p) ctx.variant_names.push_back(mixture.pair_name(p));
    }
  } catch (const Error& e) {
    ctx.bundle.reset();
    ctx.error = e.what();
  }
  return ctx;
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  RunReport report;
  report.experiment = std::string(to_string(config.experiment));
  report.config_hash = config_hash(config);
  report.config_json = config_to_json(config);
  report.seeds = config.seeds;
  report.methods.push_back(kDiffml);
  for (const auto& b : config.baselines) report.methods.push_back(b);

  std::vector<SeedContext> contexts;
  for (auto seed : config.seeds) contexts.push_back(prepare_seed(config, seed));
  for (const auto& ctx : contexts) {
    report.bundle_hashes.push_back(ctx.bundle ? hex16(ctx.bundle_hash) : "");
    for (const auto& w : ctx.warnings) report.warnings.push_back("seed " + std::to_string(ctx.seed) + ": " + w);
  }
  const SeedContext* first_ok = nullptr;
  for (const auto& ctx : contexts)
    if (ctx.bundle && !first_ok) first_ok = &ctx;
  report.weight_columns = weight_columns(config, first_ok);

  // (seed, method) cells in report order; workers fill fixed slots.
  const std::size_t methods = report.methods.size();
  std::vector<CellOutput> outputs(contexts.size() * methods);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < outputs.size(); i = next++) {
      outputs[i] = run_cell(config, contexts[i / methods], report.methods[i % methods]);
    }
  };
  const std::size_t threads = std::min(config.jobs, outputs.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& o : outputs) {
    report.results.push_back(std::move(o.result));
    for (auto& g : o.grid) report.grid.push_back(std::move(g));
    for (auto& w : o.weights) report.weights.push_back(std::move(w));
  }
  return report;
}

int exit_code_for(const RunReport& report) {
  const std::size_t failed = report.failed_cells();
  if (failed == 0) return 0;
  return failed == report.results.size() ? 2 : 3;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::io_error, "failed writing " + path.string());
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json report_to_json(const RunReport& r) {
  json results = json::array();
  for (const auto& m : r.results) {
    results.push_back({{"seed", m.seed},
                       {"method", m.method},
                       {"status", m.status},
                       {"val_rmse", opt_json(m.val_rmse)},
                       {"test_rmse", opt_json(m.test_rmse)},
                       {"seconds", m.seconds},
                       {"pipelines", m.pipelines},
                       {"test_reads", m.test_reads},
                       {"selected", m.selected},
                       {"message", m.message}});
  }
  json grid = json::array();
  for (const auto& g : r.grid) {
    grid.push_back({{"seed", g.seed},
                    {"method", g.method},
                    {"cell", g.cell},
                    {"status", g.status},
                    {"val_rmse", opt_json(g.val_rmse)},
                    {"test_rmse", opt_json(g.test_rmse)},
                    {"seconds", g.seconds}});
  }
  json weights = json::array();
  for (const auto& w : r.weights) {
    weights.push_back({{"seed", w.seed}, {"epoch", w.epoch}, {"val_rmse", w.val_rmse}, {"values", w.values}});
  }
  return {{"experiment", r.experiment},
          {"config_hash", r.config_hash},
          {"config", json::parse(r.config_json)},
          {"seeds", r.seeds},
          {"methods", r.methods},
          {"bundle_hashes", r.bundle_hashes},
          {"results", results},
          {"grid", grid},
          {"weight_columns", r.weight_columns},
          {"weights", weights},
          {"warnings", r.warnings}};
}

}  // namespace

RunReport load_report(const std::filesystem::path& report_json) {
  std::ifstream in(report_json);
  if (!in) throw Error(ErrorCode::io_error, "cannot read " + report_json.string());
  RunReport r;
  try {
    const json j = json::parse(in);
    r.experiment = j.at("experiment").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config_json = j.at("config").dump(2);
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.methods = j.at("methods").get<std::vector<std::string>>();
    r.bundle_hashes = j.at("bundle_hashes").get<std::vector<std::string>>();
    for (const auto& m : j.at("results")) {
      r.results.push_back({m.at("seed").get<std::uint64_t>(), m.at("method").get<std::string>(),
                           m.at("status").get<std::string>(), opt_from_json(m.at("val_rmse")),
                           opt_from_json(m.at("test_rmse")), m.at("seconds").get<double>(),
                           m.at("pipelines").get<std::size_t>(), m.at("test_reads").get<std::size_t>(),
                           m.at("selected").get<std::string>(), m.at("message").get<std::string>()});
    }
    for (const auto& g : j.at("grid")) {
      r.grid.push_back({g.at("seed").get<std::uint64_t>(), g.at("method").get<std::string>(),
                        g.at("cell").get<std::string>(), g.at("status").get<std::string>(),
                        opt_from_json(g.at("val_rmse")), opt_from_json(g.at("test_rmse")),
                        g.at("seconds").get<double>()});
    }
    r.weight_columns = j.at("weight_columns").get<std::vector<std::string>>();
    for (const auto& w : j.at("weights")) {
      r.weights.push_back({w.at("seed").get<std::uint64_t>(), w.at("epoch").get<std::size_t>(),
                           w.at("val_rmse").get<double>(), w.at("values").get<std::vector<double>>()});
    }
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, report_json.string() + ": " + e.what());
  }
  return r;
}

void emit_report(const RunReport& report, const std::filesystem::path& output_dir) {
  std::error_code ec;
  std::filesystem::create_directories(output_dir, ec);
  if (ec) throw Error(ErrorCode::io_error, "cannot create " + output_dir.string() + ": " + ec.message());

  // Wall-clock numbers stay out of summary/grid/weights so reruns compare
  // byte for byte; they live in timing.csv and report.json.
  std::ostringstream summary;
  summary << "seed,method,status,val_rmse,test_rmse,pipelines,test_reads,selected\n";
  std::ostringstream timing;
  timing << "seed,method,cell,seconds\n";
  for (const auto& m : report.results) {
    summary << m.seed << ',' << m.method << ',' << m.status << ',' << opt_number(m.val_rmse) << ','
            << opt_number(m.test_rmse) << ',' << m.pipelines << ',' << m.test_reads << ','
            << csv_field(m.selected) << '\n';
    timing << m.seed << ',' << m.method << ",," << data::format_number(m.seconds) << '\n';
  }
  std::ostringstream grid;
  grid << "seed,method,cell,status,val_rmse,test_rmse\n";
  for (const auto& g : report.grid) {
    grid << g.seed << ',' << g.method << ',' << g.cell << ',' << g.status << ',' << opt_number(g.val_rmse)
         << ',' << opt_number(g.test_rmse) << '\n';
    timing << g.seed << ',' << g.method << ',' << g.cell << ',' << data::format_number(g.seconds) << '\n';
  }
  std::ostringstream weights;
  weights << (report.experiment == "dataset_selection" ? "seed,step,val_rmse" : "seed,epoch,val_rmse");
  for (const auto& c : report.weight_columns) weights << ',' << csv_field(c);
  weights << '\n';
  for (const auto& w : report.weights) {
    weights << w.seed << ',' << w.epoch << ',' << data::format_number(w.val_rmse);
    for (double v : w.values) weights << ',' << data::format_number(v);
    weights << '\n';
  }

  json pipelines = json::object();
  for (const auto& method : report.methods) {
    json per_seed = json::array();
    for (auto seed : report.seeds) per_seed.push_back(report.pipelines(method, seed));
    pipelines[method] = per_seed;
  }
  const json config{{"config", json::parse(report.config_json)},
                    {"config_hash", report.config_hash},
                    {"seeds", report.seeds},
                    {"bundle_hashes", report.bundle_hashes},
                    {"pipelines_per_seed", pipelines},
                    {"gates_applied", "after_standardization"},
                    {"rmse_units", "standardized_target"},
                    {"run_at", utc_now()}};

  write_text(output_dir / "summary.csv", summary.str());
  write_text(output_dir / "timing.csv", timing.str());
  write_text(output_dir / "grid.csv", grid.str());
  write_text(output_dir / ("weights_" + report.experiment + ".csv"), weights.str());
  write_text(output_dir / "config.json", config.dump(2) + "\n");
  write_text(output_dir / "report.json", report_to_json(report).dump(2) + "\n");
}

}  // namespace diffml::harness
