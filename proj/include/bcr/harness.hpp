#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bcr/pipeline.hpp"

namespace bcr {

enum class FoldScheme { FixedTest5Fold, Nested5x5, Plain10Fold };

std::string to_string(FoldScheme s);
FoldScheme fold_scheme_from_string(const std::string& s);

// Case-id partitions for cross-validation.
//   FixedTest5Fold: fixed_test = 20%, outer_folds = 5 folds of the rest
//                   (64% train / 16% validation per fold).
//   Nested5x5:      outer_folds = 5 folds of all cases; inner_folds[o] = 5
//                   folds of the cases outside outer fold o.
//   Plain10Fold:    outer_folds = 10 folds of all cases.
struct FoldPlan {
  std::uint64_t seed = 0;
  FoldScheme scheme = FoldScheme::Nested5x5;
  std::vector<std::vector<std::string>> outer_folds;
  std::vector<std::vector<std::vector<std::string>>> inner_folds;
  std::vector<std::string> fixed_test;
};

FoldPlan make_fold_plan(std::vector<std::string> case_ids, std::uint64_t seed, FoldScheme scheme);

// Splits `ids` into k contiguous, near-equal parts (sizes differ by at most 1).
std::vector<std::vector<std::string>> partition(const std::vector<std::string>& ids, std::size_t k);

// ---------------------------------------------------------------------------
// Grid search under nested cross-validation.

struct GridCell {
  Index top_k = 0;
  double m_percent = 0.0;
  std::vector<double> values;  // outer hold-out C-index per run
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  bool failed = false;
  std::string error;

  void recompute();
};

struct GridResult {
  std::vector<GridCell> cells;  // sorted by (top_k, m_percent)

  // Highest mean, ties broken by smaller σ; failed cells never win.
  std::optional<std::size_t> best() const;
};

struct RunLog {
  Index top_k = 0;
  double m_percent = 0.0;
  std::size_t outer = 0;
  std::size_t inner = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_eval = 0;
  std::vector<std::string> train_ids, val_ids, eval_ids;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::size_t selected_epoch = 0;
  double c_index = 0.0;
  std::string error;
};

// Masked high-resolution bags for one m, in cohort order, or the reason the
// masks could not be produced.
struct MaskedCohort {
  std::vector<Bag> bags;
  std::string error;
};

struct GridConfig {
  std::vector<Index> ks{5, 10, 15, 20, 30, 40, 50};
  std::vector<double> ms{5, 10, 15, 20, 25, 30, 35, 40};
  SlowTrainConfig slow;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  ConcordanceOptions concordance;
};

// Runs nested 5×5 CV for every (top_k, m) cell: 25 outer-hold-out C-index
// values per cell. Cells whose masks or runs fail are recorded, not fatal.
GridResult run_grid(const std::vector<SurvivalRecord>& records, const std::map<double, MaskedCohort>& cohorts,
                    const GridConfig& cfg, std::vector<RunLog>* logs = nullptr);

// Report CSV: top_k,m_percent,ci_mean,ci_std,n_runs
void write_grid_report(std::ostream& os, const GridResult& grid);
std::string grid_summary(const GridResult& grid);

void write_run_log(std::ostream& os, const RunLog& log);  // one JSON line

void save_grid_result(const GridResult& grid, const std::filesystem::path& path);
GridResult load_grid_result(const std::filesystem::path& path);

}  // namespace bcr
