#include "diffml/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "diffml/error.hpp"

namespace diffml::data {

std::size_t CellMask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

bool Table::is_missing(std::size_t row, std::size_t col) const {
  return std::isnan(columns[col][row]);
}

std::vector<std::size_t> Table::feature_columns() const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < n_cols(); ++c)
    if (c != target_column) out.push_back(c);
  return out;
}

std::vector<std::string> Table::feature_names() const {
  std::vector<std::string> out;
  for (auto c : feature_columns()) out.push_back(column_names[c]);
  return out;
}

CellMask Table::missing_mask() const {
  CellMask mask(n_rows(), n_cols());
  for (std::size_t c = 0; c < n_cols(); ++c)
    for (std::size_t r = 0; r < n_rows(); ++r)
      if (is_missing(r, c)) mask.set(r, c);
  return mask;
}

std::size_t Table::missing_count() const { return missing_mask().count(); }

Matrix Table::feature_matrix() const {
  const auto features = feature_columns();
  Matrix out(n_rows(), features.size());
  for (std::size_t j = 0; j < features.size(); ++j)
    for (std::size_t r = 0; r < n_rows(); ++r) out(r, j) = columns[features[j]][r];
  return out;
}

Matrix Table::target_matrix() const { return Matrix::column_vector(columns.at(target_column)); }

Table Table::select_rows(std::span<const std::size_t> rows) const {
  Table out;
  out.column_names = column_names;
  out.target_column = target_column;
  out.columns.resize(n_cols());
  for (std::size_t c = 0; c < n_cols(); ++c) {
    out.columns[c].reserve(rows.size());
    for (auto r : rows) {
      if (r >= n_rows()) {
        throw Error(ErrorCode::invalid_argument, "select_rows: row " + std::to_string(r) +
                                                     " out of range (" +
                                                     std::to_string(n_rows()) + " rows)");
      }
      out.columns[c].push_back(columns[c][r]);
    }
  }
  return out;
}

void Table::validate() const {
  if (column_names.size() != columns.size()) {
    throw Error(ErrorCode::shape_mismatch, "table has " + std::to_string(column_names.size()) +
                                               " names for " + std::to_string(columns.size()) +
                                               " columns");
  }
  if (target_column >= columns.size()) {
    throw Error(ErrorCode::invalid_argument, "target column index out of range");
  }
  for (const auto& col : columns) {
    if (col.size() != n_rows()) throw Error(ErrorCode::shape_mismatch, "ragged table columns");
  }
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        current += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        current += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(current));
      current.clear();
    } else {
      current += ch;
    }
  }
  fields.push_back(std::move(current));
  return fields;
}

std::optional<double> parse_number(std::string_view text) {
  text = trim(text);
  if (text.empty()) return std::nullopt;
  if (text.front() == '+') text.remove_prefix(1);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || !std::isfinite(value)) {
    return std::nullopt;
  }
  return value;
}

}  // namespace

Table parse_table(const std::string& csv_text, const std::string& target,
                  std::vector<std::string>* warnings, const LoadOptions& options) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(csv_text);
  std::string line;
  std::vector<std::string> header;
  bool have_header = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (!have_header) {
      header = std::move(fields);
      for (auto& h : header) h = std::string(trim(h));
      if (line_no == 1 && header.front().rfind("\xEF\xBB\xBF", 0) == 0) header.front().erase(0, 3);
      have_header = true;
      continue;
    }
    if (fields.size() != header.size()) {
      throw Error(ErrorCode::parse_error, "ragged row at line " + std::to_string(line_no) + ": " +
                                              std::to_string(fields.size()) + " fields, header has " +
                                              std::to_string(header.size()));
    }
    rows.push_back(std::move(fields));
  }
  if (!have_header) throw Error(ErrorCode::parse_error, "CSV has no header row");
  if (rows.empty()) throw Error(ErrorCode::parse_error, "CSV has zero data rows");
  const auto target_it = std::find(header.begin(), header.end(), target);
  if (target_it == header.end()) {
    throw Error(ErrorCode::parse_error, "target column '" + target + "' not found in header");
  }
  const std::size_t target_src = static_cast<std::size_t>(target_it - header.begin());

  Table table;
  for (std::size_t c = 0; c < header.size(); ++c) {
    std::vector<double> values(rows.size(), kMissing);
    std::vector<std::size_t> failures;
    std::size_t non_empty = 0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::string_view cell = trim(rows[r][c]);
      if (cell.empty()) continue;
      ++non_empty;
      if (auto v = parse_number(cell)) {
        values[r] = *v;
      } else {
        failures.push_back(r);
      }
    }
    if (c == target_src) {
      if (!failures.empty() || non_empty != rows.size()) {
        throw Error(ErrorCode::parse_error,
                    "target column '" + target + "' must be numeric with no empty cells");
      }
      table.target_column = table.columns.size();
      table.column_names.push_back(header[c]);
      table.columns.push_back(std::move(values));
      continue;
    }
    const bool categorical =
        !failures.empty() &&
        static_cast<double>(failures.size()) > options.categorical_threshold * static_cast<double>(non_empty);
    if (!categorical) {
      if (warnings) {
        for (auto r : failures) {
          warnings->push_back("column '" + header[c] + "' row " + std::to_string(r + 1) + ": '" +
                              rows[r][c] + "' is not a number; treated as missing");
        }
      }
      table.column_names.push_back(header[c]);
      table.columns.push_back(std::move(values));
      continue;
    }
    // One-hot encode, categories in lexicographic order.
    std::set<std::string> categories;
    for (const auto& row : rows) {
      const auto cell = trim(row[c]);
      if (!cell.empty()) categories.insert(std::string(cell));
    }
    for (const auto& category : categories) {
      std::vector<double> indicator(rows.size());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto cell = trim(rows[r][c]);
        indicator[r] = cell.empty() ? kMissing : (cell == category ? 1.0 : 0.0);
      }
      table.column_names.push_back(header[c] + "=" + category);
      table.columns.push_back(std::move(indicator));
    }
  }
  table.validate();
  return table;
}

Table load_table(const std::filesystem::path& path, const std::string& target,
                 std::vector<std::string>* warnings, const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_table(buffer.str(), target, warnings, options);
}

std::string format_number(double value) {
  if (std::isnan(value)) return {};
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

void write_table(const Table& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  for (std::size_t c = 0; c < table.n_cols(); ++c) {
    if (c) out << ',';
    out << table.column_names[c];
  }
  out << '\n';
  for (std::size_t r = 0; r < table.n_rows(); ++r) {
    for (std::size_t c = 0; c < table.n_cols(); ++c) {
      if (c) out << ',';
      out << format_number(table.at(r, c));
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::io_error, "write failed for " + path.string());
}

SynthTable synth_make(const SynthSpec& spec) {
  if (spec.n_informative < 1) {
    throw Error(ErrorCode::invalid_argument, "synth_make: n_informative must be >= 1");
  }
  if (spec.n_rows < 1) throw Error(ErrorCode::invalid_argument, "synth_make: n_rows must be >= 1");
  if (!(spec.noise_std >= 0.0)) {
    throw Error(ErrorCode::invalid_argument, "synth_make: noise_std must be >= 0");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> magnitude(0.5, 1.5);
  std::uniform_real_distribution<double> offset(1.0, 4.0);
  std::bernoulli_distribution coin(0.5);

  const std::size_t n_inf = spec.n_informative;
  const std::size_t n_feat = n_inf + spec.n_noise;
  SynthTable out;
  for (std::size_t j = 0; j < n_inf; ++j) out.weights.push_back((coin(rng) ? 1.0 : -1.0) * magnitude(rng));
  for (std::size_t j = 0; j < n_feat; ++j) out.offsets.push_back(offset(rng));
  const std::size_t factors = spec.latent_factors;
  std::vector<double> loadings(n_inf * factors);
  for (double& l : loadings) l = normal(rng);
  // Keep each informative column at roughly unit variance.
  const double own_scale = factors == 0 ? 1.0 : 0.5;
  const double factor_scale = factors == 0 ? 0.0 : std::sqrt(0.75 / static_cast<double>(factors));

  Table& t = out.table;
  for (std::size_t j = 0; j < n_inf; ++j) t.column_names.push_back("x" + std::to_string(j));
  for (std::size_t j = 0; j < spec.n_noise; ++j) t.column_names.push_back("n" + std::to_string(j));
  t.column_names.push_back("y");
  t.columns.assign(n_feat + 1, std::vector<double>(spec.n_rows));
  t.target_column = n_feat;

  std::vector<double> latent(factors);
  for (std::size_t r = 0; r < spec.n_rows; ++r) {
    for (double& z : latent) z = normal(rng);
    double y = 0.0;
    for (std::size_t j = 0; j < n_inf; ++j) {
      double v = own_scale * normal(rng);
      for (std::size_t l = 0; l < factors; ++l) v += factor_scale * loadings[j * factors + l] * latent[l];
      v += out.offsets[j];
      t.columns[j][r] = v;
      y += out.weights[j] * v;
    }
    for (std::size_t j = n_inf; j < n_feat; ++j) t.columns[j][r] = out.offsets[j] + normal(rng);
    t.columns[n_feat][r] = y + spec.noise_std * normal(rng);
  }
  return out;
}

Standardizer Standardizer::fit(const Table& table, std::vector<std::string>* warnings) {
  Standardizer s;
  for (std::size_t c = 0; c < table.n_cols(); ++c) {
    double sum = 0.0;
    std::size_t count = 0;
    for (double v : table.columns[c]) {
      if (std::isnan(v)) continue;
      sum += v;
      ++count;
    }
    if (count == 0) {
      if (warnings) warnings->push_back("column '" + table.column_names[c] + "' is entirely missing");
      s.means.push_back(0.0);
      s.stds.push_back(1.0);
      continue;
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (double v : table.columns[c])
      if (!std::isnan(v)) sq += (v - mean) * (v - mean);
    double std = std::sqrt(sq / static_cast<double>(count));
    if (std < kStdFloor) {
      if (warnings) {
        warnings->push_back("column '" + table.column_names[c] +
                            "' is constant; standard deviation floored");
      }
      std = kStdFloor;
    }
    s.means.push_back(mean);
    s.stds.push_back(std);
  }
  return s;
}

Table Standardizer::apply(const Table& table) const {
  if (table.n_cols() != means.size()) {
    throw Error(ErrorCode::shape_mismatch, "standardizer fitted on " + std::to_string(means.size()) +
                                               " columns, table has " +
                                               std::to_string(table.n_cols()));
  }
  Table out = table;
  for (std::size_t c = 0; c < out.n_cols(); ++c)
    for (double& v : out.columns[c]) v = (v - means[c]) / stds[c];
  return out;
}

Table Standardizer::inverse(const Table& table) const {
  Table out = table;
  for (std::size_t c = 0; c < out.n_cols(); ++c)
    for (double& v : out.columns[c]) v = v * stds[c] + means[c];
  return out;
}

std::size_t DatasetBundle::source_count() const {
  if (source_ids.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(source_ids.begin(), source_ids.end())) + 1;
}

DatasetBundle split_bundle(const Table& table, const SplitFractions& fractions, std::uint64_t seed) {
  table.validate();
  if (!(fractions.train > 0.0 && fractions.val > 0.0 && fractions.test > 0.0)) {
    throw Error(ErrorCode::invalid_argument, "split fractions must all be positive");
  }
  if (std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9) {
    throw Error(ErrorCode::invalid_argument, "split fractions must sum to 1");
  }
  const std::size_t n = table.n_rows();
  const auto portion = [n](double f) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9));
  };
  const std::size_t n_val = portion(fractions.val);
  const std::size_t n_test = portion(fractions.test);
  if (n_val + n_test >= n || n_val == 0 || n_test == 0) {
    throw Error(ErrorCode::invalid_argument,
                "split of " + std::to_string(n) + " rows leaves an empty split");
  }
  const std::size_t n_train = n - n_val - n_test;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetBundle bundle;
  bundle.indices.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  bundle.indices.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                            order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  bundle.indices.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  bundle.train = table.select_rows(bundle.indices.train);
  bundle.val = table.select_rows(bundle.indices.val);
  bundle.test = SealedTable(table.select_rows(bundle.indices.test));
  bundle.source_ids.assign(n_train, 0);
  return bundle;
}

DatasetBundle standardize_fit_apply(DatasetBundle bundle, std::vector<std::string>* warnings) {
  if (bundle.train.n_rows() == 0) {
    throw Error(ErrorCode::invalid_argument, "standardize: empty train split");
  }
  bundle.standardizer = Standardizer::fit(bundle.train, warnings);
  bundle.train = bundle.standardizer.apply(bundle.train);
  bundle.val = bundle.standardizer.apply(bundle.val);
  const Standardizer& s = bundle.standardizer;
  bundle.test.transform([&s](const Table& t) { return s.apply(t); });
  bundle.standardized = true;
  return bundle;
}

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::missing: return "missing";
    case ErrorKind::outlier: return "outlier";
    case ErrorKind::typo: return "typo";
    case ErrorKind::label_swap: return "label_swap";
  }
  return "unknown";
}

ErrorKind error_kind_from_string(std::string_view name) {
  if (name == "missing") return ErrorKind::missing;
  if (name == "outlier") return ErrorKind::outlier;
  if (name == "typo") return ErrorKind::typo;
  if (name == "label_swap") return ErrorKind::label_swap;
  throw Error(ErrorCode::config_error, "unknown error kind '" + std::string(name) + "'");
}

double transpose_digits(double value, std::uint64_t choice) {
  if (!std::isfinite(value)) return value;
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  std::string text(buf, end);
  // Mantissa digit positions (stop at an exponent marker).
  std::vector<std::size_t> digits;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == 'e' || text[i] == 'E') break;
    if (text[i] >= '0' && text[i] <= '9') digits.push_back(i);
  }
  // Candidate pairs: adjacent digits among the first four significant ones.
  std::size_t first_sig = 0;
  while (first_sig < digits.size() && text[digits[first_sig]] == '0') ++first_sig;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = first_sig; i + 1 < digits.size() && i + 1 < first_sig + 4; ++i) {
    if (text[digits[i]] != text[digits[i + 1]]) pairs.emplace_back(digits[i], digits[i + 1]);
  }
  if (!pairs.empty()) {
    const auto [a, b] = pairs[choice % pairs.size()];
    std::swap(text[a], text[b]);
  } else if (digits.size() >= 2) {
    std::swap(text[digits[0]], text[digits[1]]);
  }
  double out = value;
  std::from_chars(text.data(), text.data() + text.size(), out);
  return out;
}

Injection inject_errors(const Table& table, const ErrorSpec& spec, std::span<const std::size_t> rows) {
  table.validate();
  if (!(spec.rate >= 0.0 && spec.rate <= 1.0)) {
    throw Error(ErrorCode::invalid_argument, "error rate must lie in [0, 1]");
  }
  if (spec.kind == ErrorKind::typo && spec.typo_mode != "digit_transpose") {
    throw Error(ErrorCode::invalid_argument, "unsupported typo mode '" + spec.typo_mode + "'");
  }
  std::vector<std::size_t> eligible_rows;
  if (rows.empty()) {
    eligible_rows.resize(table.n_rows());
    std::iota(eligible_rows.begin(), eligible_rows.end(), std::size_t{0});
  } else {
    eligible_rows.assign(rows.begin(), rows.end());
  }

  Injection result{table, CellMask(table.n_rows(), table.n_cols())};
  std::mt19937_64 rng(spec.seed);
  // Partial Fisher-Yates: the first `take` entries become a uniform sample.
  auto choose = [&rng](auto& pool, std::size_t take) {
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
  };

  if (spec.kind == ErrorKind::label_swap) {
    const std::size_t pairs = static_cast<std::size_t>(
        std::llround(spec.rate * static_cast<double>(eligible_rows.size()) / 2.0));
    choose(eligible_rows, std::min(2 * pairs, eligible_rows.size()));
    auto& target = result.table.columns[table.target_column];
    for (std::size_t p = 0; p < pairs && 2 * p + 1 < eligible_rows.size(); ++p) {
      const std::size_t a = eligible_rows[2 * p];
      const std::size_t b = eligible_rows[2 * p + 1];
      std::swap(target[a], target[b]);
      result.ground_truth.set(a, table.target_column);
      result.ground_truth.set(b, table.target_column);
    }
    return result;
  }

  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (auto r : eligible_rows)
    for (auto c : table.feature_columns())
      if (!table.is_missing(r, c)) cells.emplace_back(r, c);
  const std::size_t take = static_cast<std::size_t>(
      std::llround(spec.rate * static_cast<double>(cells.size())));
  choose(cells, take);

  std::vector<double> column_std(table.n_cols(), 0.0);
  if (spec.kind == ErrorKind::outlier) {
    const Standardizer stats = Standardizer::fit(table);
    column_std = stats.stds;
  }
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < take; ++i) {
    const auto [r, c] = cells[i];
    double& cell = result.table.columns[c][r];
    switch (spec.kind) {
      case ErrorKind::missing: cell = kMissing; break;
      case ErrorKind::outlier: cell += (coin(rng) ? 1.0 : -1.0) * spec.outlier_sigma * column_std[c]; break;
      case ErrorKind::typo: cell = transpose_digits(cell, rng()); break;
      case ErrorKind::label_swap: break;
    }
    result.ground_truth.set(r, c);
  }
  return result;
}

namespace {

struct Fnv1a {
  std::uint64_t state = 0xcbf29ce484222325ULL;
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state ^= p[i];
      state *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { u64(std::isnan(v) ? 0x7ff8000000000000ULL : std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
};

void hash_into(Fnv1a& h, const Table& table) {
  h.u64(table.n_rows());
  h.u64(table.n_cols());
  h.u64(table.target_column);
  for (const auto& name : table.column_names) h.str(name);
  for (const auto& col : table.columns)
    for (double v : col) h.f64(v);
}

}  // namespace

std::uint64_t hash_table(const Table& table) {
  Fnv1a h;
  hash_into(h, table);
  return h.state;
}

std::uint64_t hash_bundle(const DatasetBundle& bundle) {
  Fnv1a h;
  hash_into(h, bundle.train);
  hash_into(h, bundle.val);
  hash_into(h, bundle.test.unsealed());
  for (int id : bundle.source_ids) h.u64(static_cast<std::uint64_t>(id));
  return h.state;
}

void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir,
                 const std::string& extra_metadata_json) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io_error, "cannot create " + dir.string() + ": " + ec.message());
  write_table(bundle.train, dir / "train.csv");
  write_table(bundle.val, dir / "val.csv");
  write_table(bundle.test.unsealed(), dir / "test.csv");

  nlohmann::json meta;
  meta["split_indices"] = {{"train", bundle.indices.train},
                           {"val", bundle.indices.val},
                           {"test", bundle.indices.test}};
  meta["source_ids"] = bundle.source_ids;
  meta["standardized"] = bundle.standardized;
  meta["standardizer"] = {{"means", bundle.standardizer.means}, {"stds", bundle.standardizer.stds}};
  meta["target_column"] = bundle.train.column_names.at(bundle.train.target_column);
  meta["extra"] = nlohmann::json::parse(extra_metadata_json);
  std::ofstream out(dir / "metadata.json");
  if (!out) throw Error(ErrorCode::io_error, "cannot write metadata in " + dir.string());
  out << meta.dump(2) << '\n';
}

}  // namespace diffml::data
