#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffml/matrix.hpp"

namespace diffml::data {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

// Cell-level boolean mask with the same shape as a Table (rows x columns).
class CellMask {
 public:
  CellMask() = default;
  CellMask(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool value = true) { bits_[r * cols_ + c] = value; }
  std::size_t count() const;
  bool any() const { return count() > 0; }

  bool operator==(const CellMask&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

// Columnar numeric table. Missing cells hold NaN in `columns`; the NaN
// sentinel and the missing flag always agree.
struct Table {
  std::vector<std::string> column_names;
  std::vector<std::vector<double>> columns;
  std::size_t target_column = 0;

  std::size_t n_rows() const { return columns.empty() ? 0 : columns.front().size(); }
  std::size_t n_cols() const { return columns.size(); }
  std::size_t n_features() const { return n_cols() == 0 ? 0 : n_cols() - 1; }

  bool is_missing(std::size_t row, std::size_t col) const;
  double at(std::size_t row, std::size_t col) const { return columns[col][row]; }
  void set(std::size_t row, std::size_t col, double value) { columns[col][row] = value; }
  void set_missing(std::size_t row, std::size_t col) { columns[col][row] = kMissing; }

  // Column indices of all non-target columns, in table order.
  std::vector<std::size_t> feature_columns() const;
  std::vector<std::string> feature_names() const;
  CellMask missing_mask() const;
  std::size_t missing_count() const;

  // rows x n_features / rows x 1. Missing cells come through as NaN.
  Matrix feature_matrix() const;
  Matrix target_matrix() const;

  Table select_rows(std::span<const std::size_t> rows) const;

  // Throws when columns are ragged or the target index is out of range.
  void validate() const;
};

struct LoadOptions {
  // A column is one-hot encoded when more than this share of its non-empty
  // cells fail to parse as numbers; otherwise failing cells become missing.
  double categorical_threshold = 0.5;
};

Table load_table(const std::filesystem::path& path, const std::string& target,
                 std::vector<std::string>* warnings = nullptr, const LoadOptions& options = {});
Table parse_table(const std::string& csv_text, const std::string& target,
                  std::vector<std::string>* warnings = nullptr, const LoadOptions& options = {});
void write_table(const Table& table, const std::filesystem::path& path);
std::string format_number(double value);

struct SynthSpec {
  std::size_t n_rows = 1000;
  std::size_t n_informative = 5;
  std::size_t n_noise = 0;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
  std::size_t latent_factors = 2;  // shared factors correlating the informative columns
};

struct SynthTable {
  Table table;
  std::vector<double> weights;    // one per informative column
  std::vector<double> offsets;    // column means of every feature column
};

// y = sum_j weights[j] * x_j over the informative columns + N(0, noise_std).
// Informative columns share latent factors; noise columns are independent of
// everything else. Columns: x0.., n0.., y (target last).
SynthTable synth_make(const SynthSpec& spec);

struct Standardizer {
  std::vector<double> means;  // per table column, target included
  std::vector<double> stds;

  static Standardizer fit(const Table& table, std::vector<std::string>* warnings = nullptr);
  Table apply(const Table& table) const;
  Table inverse(const Table& table) const;
  double apply_value(std::size_t col, double value) const { return (value - means[col]) / stds[col]; }
};

inline constexpr double kStdFloor = 1e-8;

// Holds the test split so every read is counted. Transformations that keep
// the split sealed (standardization, projections) go through transform().
class SealedTable {
 public:
  SealedTable() = default;
  explicit SealedTable(Table table) : table_(std::move(table)) {}

  const Table& open() const {
    ++reads_;
    return table_;
  }
  std::size_t reads() const { return reads_; }
  std::size_t n_rows() const { return table_.n_rows(); }

  template <typename Fn>
  void transform(Fn&& fn) {
    table_ = fn(static_cast<const Table&>(table_));
  }
  // Read access for hashing and serialization; not counted as use in training.
  const Table& unsealed() const { return table_; }

 private:
  Table table_;
  mutable std::size_t reads_ = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct DatasetBundle {
  Table train;
  Table val;
  SealedTable test;
  std::vector<int> source_ids;  // one per train row
  Standardizer standardizer;
  SplitIndices indices;         // rows of the source table per split
  bool standardized = false;

  std::size_t source_count() const;
};

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

DatasetBundle split_bundle(const Table& table, const SplitFractions& fractions, std::uint64_t seed);
DatasetBundle standardize_fit_apply(DatasetBundle bundle,
                                    std::vector<std::string>* warnings = nullptr);

enum class ErrorKind { missing, outlier, typo, label_swap };
std::string_view to_string(ErrorKind kind);
ErrorKind error_kind_from_string(std::string_view name);

struct ErrorSpec {
  ErrorKind kind = ErrorKind::missing;
  double rate = 0.1;
  std::uint64_t seed = 0;
  double outlier_sigma = 5.0;
  // Only digit transposition is defined for numeric typos.
  std::string typo_mode = "digit_transpose";
  // Restrict injection to rows of one source; -1 means every row.
  int source = -1;
};

struct Injection {
  Table table;
  CellMask ground_truth;  // every corrupted cell (target column for label swaps)
};

// Corrupts a copy of `table`. Cell-wise kinds pick exactly round(rate * cells)
// cells among the feature cells of `rows` (all rows when empty); label_swap
// exchanges targets within round(rate * rows / 2) disjoint row pairs.
Injection inject_errors(const Table& table, const ErrorSpec& spec,
                        std::span<const std::size_t> rows = {});

// Digit transposition on the decimal rendering of `value`; `choice` picks
// among the adjacent digit pairs that differ.
double transpose_digits(double value, std::uint64_t choice);

// FNV-1a over the shape, values and missing flags.
std::uint64_t hash_table(const Table& table);
std::uint64_t hash_bundle(const DatasetBundle& bundle);

// Writes train/val/test CSVs plus metadata.json (split indices, source ids,
// standardizer, and the caller's extra metadata as a JSON string).
void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir,
                 const std::string& extra_metadata_json = "{}");

}  // namespace diffml::data
