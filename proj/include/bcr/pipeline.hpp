#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "bcr/datasets.hpp"
#include "bcr/diffcore.hpp"
#include "bcr/mil_models.hpp"
#include "bcr/survival.hpp"

namespace bcr {

// Case ids kept for the fast stage: drops cases censored before the threshold.
std::vector<std::string> stage1_exclusion(std::span<const SurvivalRecord> records, double threshold_years);

// ---------------------------------------------------------------------------
// Masks

struct PatchMask {
  std::string case_id;
  std::vector<PatchCoord> coords;  // low-resolution grid
  std::vector<std::uint8_t> flags;
  double m_percent = 0.0;

  std::size_t selected_count() const;
};

// Number of flagged patches for n patches at m percent: ceil(m·n/100).
std::size_t mask_count(std::size_t n, double m_percent);

// Flags the ceil(m·n/100) most attended patches; ties go to the lower index.
PatchMask make_mask(std::span<const double> attention, std::span<const PatchCoord> coords, double m_percent,
                    const std::string& case_id = {});

// Keeps every high-resolution patch overlapping at least one flagged
// low-resolution cell.
Bag apply_mask(const Bag& high_res, const PatchMask& mask, const GridGeometry& geometry);

// Mask CSV: case_id,x,y,level,flag
void write_masks_csv(std::ostream& os, std::span<const PatchMask> masks);
std::vector<PatchMask> read_masks_csv(std::istream& is, double m_percent = 0.0);
void write_masks_file(const std::filesystem::path& path, std::span<const PatchMask> masks);
std::vector<PatchMask> read_masks_file(const std::filesystem::path& path, double m_percent = 0.0);

// ---------------------------------------------------------------------------
// Fast stage training

struct FastTrainConfig {
  ad::AdamConfig adam;
  double dropout = 0.25;
  std::size_t epochs = 20;
  Index hidden = 256;
  FastLossConfig loss;
  double threshold_years = 1.65;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct FastFoldResult {
  std::size_t fold = 0;
  std::size_t best_epoch = 0;
  double best_val_auc = 0.0;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_auc;  // NaN when the fold lacks a class
};

struct FastTrainResult {
  FastModelParams params;  // best fold
  std::size_t best_fold = 0;
  std::vector<FastFoldResult> folds;
  double test_auc = 0.0;  // NaN when undefined
  std::vector<std::string> test_ids;
  std::size_t retained = 0;
  std::size_t excluded = 0;
};

// 5-fold CV over the retained cases with a fixed test set. When `fixed_test`
// is given those cases form the test set; otherwise 20% are drawn by seed.
FastTrainResult train_fast(const Dataset& data, const FastTrainConfig& cfg,
                           const std::vector<std::string>* fixed_test = nullptr);

// Fast-stage attention for one low-resolution bag, turned into a mask.
PatchMask predict_mask(const Bag& low_res, const FastModelParams& params, double m_percent);

// ---------------------------------------------------------------------------
// Slow stage training

// ScoreDirection starts beta along the negative Cox gradient of mean-pooled
// bags at beta = 0 (unit norm). A random start can point beta away from the
// informative direction, after which top-k never selects the patches that
// would correct it.
enum class SlowInit { ScoreDirection, Random };

std::string to_string(SlowInit s);
SlowInit slow_init_from_string(const std::string& s);

struct SlowTrainConfig {
  ad::AdamConfig adam;
  double dropout = 0.25;
  std::size_t epochs = 100;
  Index hidden = 256;
  Index top_k = 10;
  AttentionInput attention_input = AttentionInput::Embeddings;
  std::size_t batch_size = 0;  // 0 = full batch (cohort-wide risk sets)
  std::size_t min_epoch = 40;
  SlowInit init = SlowInit::ScoreDirection;
  std::uint64_t seed = 0;
};

struct SurvivalBatch {
  std::vector<const Bag*> bags;
  std::vector<SurvivalRecord> records;

  std::size_t size() const { return bags.size(); }
};

struct SlowTrainResult {
  SlowModelParams params;  // checkpoint at selected_epoch
  std::vector<double> train_loss;
  std::vector<double> val_loss;  // NaN when the validation set has no events
  std::size_t selected_epoch = 0;
  std::size_t min_epoch = 0;
};

// Checkpoint = lowest validation Cox loss among epochs with index >= min_epoch
// (clamped to the last epoch).
SlowTrainResult train_slow(const SurvivalBatch& train, const SurvivalBatch& val, const SlowTrainConfig& cfg);

// Cox loss of a frozen model over a batch (inference mode).
CoxLoss evaluate_cox(const SurvivalBatch& batch, const SlowModelParams& params, Index k);
std::vector<double> predict_log_risks(const SurvivalBatch& batch, const SlowModelParams& params, Index k);

struct MinEpochOptions {
  std::size_t default_epoch = 40;
  std::size_t window = 5;
};

// First epoch at which the second difference of the smoothed training loss
// changes sign; the default when it never does.
std::size_t min_epoch_rule(std::span<const double> train_losses, const MinEpochOptions& opts = {});

// ---------------------------------------------------------------------------
// Ensembling

struct EnsemblePrediction {
  std::string case_id;
  std::vector<double> fold_log_risks;
  double mean_log_risk = 0.0;
  double ttr = 0.0;
};

EnsemblePrediction ensemble_predict(const Bag& bag, std::span<const SlowModelParams> folds, Index k);

void write_predictions_csv(std::ostream& os, std::span<const EnsemblePrediction> preds);

// ---------------------------------------------------------------------------
// End-to-end orchestration

struct TwoStageConfig {
  FastTrainConfig fast;
  SlowTrainConfig slow;
  double m_percent = 20.0;
};

struct TwoStageResult {
  FastTrainResult fast;
  std::vector<PatchMask> masks;  // one per case, dataset order
  SlowTrainResult slow;
  std::vector<std::string> test_ids;
  std::vector<double> test_log_risks;
  double test_c_index = 0.0;
};

// Masks every case with the fast model and applies the masks to the
// high-resolution bags. Throws DegenerateMaskError for an empty result.
std::vector<Bag> mask_cohort(const Dataset& data, const FastModelParams& fast, double m_percent,
                             std::vector<PatchMask>* masks = nullptr);

// Fast stage → masks → slow stage, evaluated on `test_ids`. Validation cases
// for checkpointing come from `val_ids`; everything else trains.
TwoStageResult run_two_stage(const Dataset& data, const std::vector<std::string>& val_ids,
                             const std::vector<std::string>& test_ids, const TwoStageConfig& cfg);

}  // namespace bcr
