#include "bcr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include "bcr/harness.hpp"
#include "bcr/parallel.hpp"
#include "csv_util.hpp"

namespace bcr {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::span<const double> as_span(const VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

std::vector<std::string> stage1_exclusion(std::span<const SurvivalRecord> records, double threshold_years) {
  if (!(threshold_years > 0.0)) throw ArgumentError("stage1_exclusion: threshold must be positive");
  std::vector<std::string> retained;
  for (const auto& r : records)
    if (!(r.event == 0 && r.time_years < threshold_years)) retained.push_back(r.case_id);
  return retained;
}

// ---------------------------------------------------------------------------

std::size_t PatchMask::selected_count() const {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), std::uint8_t{1}));
}

std::size_t mask_count(std::size_t n, double m_percent) {
  if (!(m_percent > 0.0 && m_percent <= 40.0)) throw ArgumentError("mask: m_percent must lie in (0, 40]");
  // Guard against products like 7.000000000000001 rounding up.
  const double exact = m_percent * static_cast<double>(n) / 100.0;
  const auto count = static_cast<std::size_t>(std::ceil(exact - 1e-9));
  return std::clamp<std::size_t>(count, 1, n);
}

PatchMask make_mask(std::span<const double> attention, std::span<const PatchCoord> coords, double m_percent,
                    const std::string& case_id) {
  if (attention.empty()) throw ArgumentError("make_mask: no patches");
  if (coords.size() != attention.size()) throw DimensionError("make_mask: one coordinate per attention score");
  const std::size_t count = mask_count(attention.size(), m_percent);
  PatchMask mask{case_id, std::vector<PatchCoord>(coords.begin(), coords.end()),
                 std::vector<std::uint8_t>(attention.size(), 0), m_percent};
  for (Index i : top_k_indices(attention, static_cast<Index>(count))) mask.flags[static_cast<std::size_t>(i)] = 1;
  return mask;
}

Bag apply_mask(const Bag& high_res, const PatchMask& mask, const GridGeometry& geometry) {
  if (mask.coords.size() != mask.flags.size()) throw DimensionError("apply_mask: mask coords/flags length differ");
  if (static_cast<Index>(high_res.coords.size()) != high_res.size())
    throw DimensionError("apply_mask: bag coords length differs from patch count");
  const std::int64_t low = geometry.low_extent, high = geometry.high_extent;
  if (low <= 0 || high <= 0) throw ArgumentError("apply_mask: extents must be positive");

  // Bucket flagged cells by the low-extent grid squares they touch.
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::size_t>> buckets;
  for (std::size_t c = 0; c < mask.flags.size(); ++c) {
    if (mask.flags[c] != 1) continue;
    const std::int64_t x = mask.coords[c].x, y = mask.coords[c].y;
    for (std::int64_t bx = floor_div(x, low); bx <= floor_div(x + low - 1, low); ++bx)
      for (std::int64_t by = floor_div(y, low); by <= floor_div(y + low - 1, low); ++by) buckets[{bx, by}].push_back(c);
  }

  std::vector<Index> keep;
  for (Index i = 0; i < high_res.size(); ++i) {
    const std::int64_t hx = high_res.coords[i].x, hy = high_res.coords[i].y;
    bool hit = false;
    for (std::int64_t bx = floor_div(hx, low); !hit && bx <= floor_div(hx + high - 1, low); ++bx)
      for (std::int64_t by = floor_div(hy, low); !hit && by <= floor_div(hy + high - 1, low); ++by) {
        auto it = buckets.find({bx, by});
        if (it == buckets.end()) continue;
        for (std::size_t c : it->second) {
          const std::int64_t x = mask.coords[c].x, y = mask.coords[c].y;
          if (hx < x + low && x < hx + high && hy < y + low && y < hy + high) {
            hit = true;
            break;
          }
        }
      }
    if (hit) keep.push_back(i);
  }
  if (keep.empty())
    throw DegenerateMaskError(high_res.case_id, "apply_mask: no high-resolution patch survives the mask for case " +
                                                    high_res.case_id);

  Bag out;
  out.case_id = high_res.case_id;
  out.resolution_mpp = high_res.resolution_mpp;
  out.embeddings.resize(static_cast<Index>(keep.size()), high_res.dim());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    out.embeddings.row(static_cast<Index>(r)) = high_res.embeddings.row(keep[r]);
    out.coords.push_back(high_res.coords[keep[r]]);
  }
  return out;
}

static constexpr const char* kMaskHeader = "case_id,x,y,level,flag";

void write_masks_csv(std::ostream& os, std::span<const PatchMask> masks) {
  os << kMaskHeader << '\n';
  for (const auto& m : masks)
    for (std::size_t i = 0; i < m.flags.size(); ++i)
      os << m.case_id << ',' << m.coords[i].x << ',' << m.coords[i].y << ',' << m.coords[i].level << ','
         << static_cast<int>(m.flags[i]) << '\n';
}

std::vector<PatchMask> read_masks_csv(std::istream& is, double m_percent) {
  csv::expect_header(is, kMaskHeader, "mask csv");
  std::vector<PatchMask> masks;
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  while (csv::next_line(is, line)) {
    const auto f = csv::split(line);
    if (f.size() != 5) throw ValidationError("mask csv: expected 5 fields in '" + line + "'");
    auto [it, inserted] = index.emplace(f[0], masks.size());
    if (inserted) masks.push_back(PatchMask{f[0], {}, {}, m_percent});
    PatchMask& m = masks[it->second];
    m.coords.push_back({csv::to_int<std::int32_t>(f[1], "x"), csv::to_int<std::int32_t>(f[2], "y"),
                        csv::to_int<std::int32_t>(f[3], "level")});
    const int flag = csv::to_int<int>(f[4], "flag");
    if (flag != 0 && flag != 1) throw ValidationError("mask csv: flag must be 0 or 1");
    m.flags.push_back(static_cast<std::uint8_t>(flag));
  }
  return masks;
}

void write_masks_file(const std::filesystem::path& path, std::span<const PatchMask> masks) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_masks_csv(out, masks);
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<PatchMask> read_masks_file(const std::filesystem::path& path, double m_percent) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_masks_csv(in, m_percent);
}

// ---------------------------------------------------------------------------

namespace {

struct LabeledBag {
  const Bag* bag;
  int label;
};

double fast_eval_loss(std::span<const LabeledBag> items, const FastModelParams& params, const FastLossConfig& loss_cfg) {
  if (items.empty()) return kNaN;
  FastModelParams frozen = params;
  std::mt19937_64 unused(0);
  double total = 0.0;
  for (const auto& it : items) {
    ad::Tape<double> tape;
    auto fwd = fast_forward(tape, *it.bag, frozen, false, false, 0.0, unused);
    total += fast_loss(fwd, it.label, frozen, false, loss_cfg).scalar();
  }
  return total / static_cast<double>(items.size());
}

double auc_or_nan(std::span<const LabeledBag> items, const FastModelParams& params) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& it : items) {
    scores.push_back(fast_forward(*it.bag, params).recurrence_score());
    labels.push_back(it.label);
  }
  try {
    return binary_auc(scores, labels);
  } catch (const UndefinedMetricError&) {
    return kNaN;
  }
}

double or_minus_one(double v) { return std::isnan(v) ? -1.0 : v; }

}  // namespace

FastTrainResult train_fast(const Dataset& data, const FastTrainConfig& cfg, const std::vector<std::string>* fixed_test) {
  if (data.cases.empty()) throw ArgumentError("train_fast: empty dataset");
  if (cfg.folds < 2) throw ArgumentError("train_fast: need at least 2 folds");
  const auto records = data.records();
  const auto retained_ids = stage1_exclusion(records, cfg.threshold_years);
  const std::unordered_set<std::string> retained(retained_ids.begin(), retained_ids.end());

  std::unordered_map<std::string, LabeledBag> by_id;
  for (const auto& c : data.cases)
    if (retained.count(c.record.case_id)) by_id.emplace(c.record.case_id, LabeledBag{&c.low, bag_label(c.record, cfg.threshold_years)});

  FastTrainResult result;
  result.retained = retained_ids.size();
  result.excluded = data.cases.size() - retained_ids.size();

  std::vector<std::vector<std::string>> folds;
  if (fixed_test) {
    const std::unordered_set<std::string> test(fixed_test->begin(), fixed_test->end());
    std::vector<std::string> rest;
    for (const auto& id : retained_ids) (test.count(id) ? result.test_ids : rest).push_back(id);
    std::sort(rest.begin(), rest.end());
    std::shuffle(rest.begin(), rest.end(), std::mt19937_64(derive_seed(cfg.seed, {0xFA57})));
    folds = partition(rest, cfg.folds);
  } else {
    FoldPlan plan = make_fold_plan(retained_ids, cfg.seed, FoldScheme::FixedTest5Fold);
    result.test_ids = plan.fixed_test;
    folds = cfg.folds == 5 ? plan.outer_folds : [&] {
      std::vector<std::string> rest;
      for (const auto& f : plan.outer_folds) rest.insert(rest.end(), f.begin(), f.end());
      return partition(rest, cfg.folds);
    }();
  }

  auto gather = [&](const std::vector<std::string>& ids) {
    std::vector<LabeledBag> out;
    for (const auto& id : ids) out.push_back(by_id.at(id));
    return out;
  };

  const Index dim = data.cases.front().low.dim();
  std::vector<FastFoldResult> fold_results(folds.size());
  std::vector<FastModelParams> fold_params(folds.size());

  parallel_for(folds.size(), cfg.workers, [&](std::size_t f) {
    std::vector<LabeledBag> train, val = gather(folds[f]);
    for (std::size_t g = 0; g < folds.size(); ++g)
      if (g != f) {
        auto part = gather(folds[g]);
        train.insert(train.end(), part.begin(), part.end());
      }
    if (train.empty()) throw ArgumentError("train_fast: fold " + std::to_string(f) + " has no training cases");

    FastModelParams params = FastModelParams::init(dim, cfg.hidden, derive_seed(cfg.seed, {1, f}));
    std::mt19937_64 rng(derive_seed(cfg.seed, {2, f}));
    ad::Adam<double> opt(params.all(), cfg.adam);
    FastFoldResult& fr = fold_results[f];
    fr.fold = f;
    FastModelParams best = params;
    double best_auc = -2.0, best_loss = std::numeric_limits<double>::infinity();

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double total = 0.0;
      for (std::size_t idx : order) {
        opt.zero_grad();
        ad::Tape<double> tape;
        auto fwd = fast_forward(tape, *train[idx].bag, params, true, true, cfg.dropout, rng);
        auto loss = fast_loss(fwd, train[idx].label, params, true, cfg.loss);
        tape.backward(loss);
        opt.step();
        total += loss.scalar();
      }
      fr.train_loss.push_back(total / static_cast<double>(train.size()));
      const double auc = auc_or_nan(val, params);
      const double vloss = fast_eval_loss(val, params, cfg.loss);
      fr.val_auc.push_back(auc);
      fr.val_loss.push_back(vloss);
      // AUC on a small fold saturates quickly; the loss keeps discriminating.
      if (vloss < best_loss || (vloss == best_loss && or_minus_one(auc) > best_auc)) {
        best_auc = or_minus_one(auc);
        best_loss = vloss;
        best = params;
        fr.best_epoch = epoch;
      }
    }
    fr.best_val_auc = best_auc < 0.0 ? kNaN : best_auc;
    fold_params[f] = std::move(best);
  });

  std::size_t best_fold = 0;
  auto fold_key = [&](std::size_t f) {
    const FastFoldResult& r = fold_results[f];
    return std::make_pair(or_minus_one(r.best_val_auc), -r.val_loss[r.best_epoch]);
  };
  for (std::size_t f = 1; f < folds.size(); ++f)
    if (fold_key(f) > fold_key(best_fold)) best_fold = f;

  result.best_fold = best_fold;
  result.params = std::move(fold_params[best_fold]);
  result.folds = std::move(fold_results);
  const auto test = gather(result.test_ids);
  result.test_auc = test.empty() ? kNaN : auc_or_nan(test, result.params);
  return result;
}

PatchMask predict_mask(const Bag& low_res, const FastModelParams& params, double m_percent) {
  const FastOutput out = fast_forward(low_res, params);
  return make_mask(as_span(out.attention), low_res.coords, m_percent, low_res.case_id);
}

// ---------------------------------------------------------------------------

CoxLoss evaluate_cox(const SurvivalBatch& batch, const SlowModelParams& params, Index k) {
  const auto risks = predict_log_risks(batch, params, k);
  return cox_neg_log_partial_likelihood(risks, batch.records);
}

std::vector<double> predict_log_risks(const SurvivalBatch& batch, const SlowModelParams& params, Index k) {
  std::vector<double> risks;
  risks.reserve(batch.size());
  for (const Bag* b : batch.bags) risks.push_back(slow_forward(*b, params, k).bag_log_risk);
  return risks;
}

std::string to_string(SlowInit s) { return s == SlowInit::Random ? "random" : "score"; }

SlowInit slow_init_from_string(const std::string& s) {
  if (s == "score") return SlowInit::ScoreDirection;
  if (s == "random") return SlowInit::Random;
  throw ArgumentError("slow init must be 'score' or 'random', got '" + s + "'");
}

namespace {

void score_direction_init(SlowModelParams& params, const SurvivalBatch& train) {
  const std::vector<double> zeros(train.size(), 0.0);
  const CoxLoss at_zero = cox_neg_log_partial_likelihood(zeros, train.records);
  if (at_zero.no_events) return;
  Matrix g = Matrix::Zero(params.dim(), 1);
  for (std::size_t i = 0; i < train.size(); ++i)
    g += at_zero.grad(static_cast<Index>(i)) * train.bags[i]->embeddings.colwise().mean().transpose();
  const double norm = g.norm();
  if (norm > 0.0) params.beta.value = -g / norm;
}

}  // namespace

SlowTrainResult train_slow(const SurvivalBatch& train, const SurvivalBatch& val, const SlowTrainConfig& cfg) {
  if (train.size() == 0) throw ArgumentError("train_slow: empty training set");
  if (train.bags.size() != train.records.size() || val.bags.size() != val.records.size())
    throw DimensionError("train_slow: one record per bag required");
  if (cfg.epochs < 1) throw ArgumentError("train_slow: epochs must be >= 1");

  SlowTrainResult out;
  out.params = SlowModelParams::init(train.bags.front()->dim(), cfg.hidden, cfg.attention_input, derive_seed(cfg.seed, {0}));
  if (cfg.init == SlowInit::ScoreDirection) score_direction_init(out.params, train);
  out.min_epoch = std::min(cfg.min_epoch, cfg.epochs - 1);
  SlowModelParams params = out.params;
  ad::Adam<double> opt(params.all(), cfg.adam);
  std::mt19937_64 rng(derive_seed(cfg.seed, {1}));

  const std::size_t n = train.size();
  const std::size_t batch = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best_val = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch < n) std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches_with_events = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      std::vector<SurvivalRecord> recs;
      for (std::size_t p = start; p < stop; ++p) recs.push_back(train.records[order[p]]);
      if (std::none_of(recs.begin(), recs.end(), [](const SurvivalRecord& r) { return r.event == 1; })) continue;

      opt.zero_grad();
      ad::Tape<double> tape;
      std::vector<ad::Var<double>> risks;
      risks.reserve(stop - start);
      for (std::size_t p = start; p < stop; ++p)
        risks.push_back(
            slow_forward(tape, *train.bags[order[p]], params, true, cfg.top_k, true, cfg.dropout, rng).bag_log_risk);
      auto loss = cox_loss(risks, recs);
      tape.backward(loss);
      opt.step();
      loss_sum += loss.scalar();
      ++batches_with_events;
    }
    out.train_loss.push_back(batches_with_events ? loss_sum / static_cast<double>(batches_with_events) : kNaN);

    double vloss = kNaN;
    if (val.size() > 0) {
      const CoxLoss c = evaluate_cox(val, params, cfg.top_k);
      if (!c.no_events) vloss = c.value;
    }
    out.val_loss.push_back(vloss);
    if (epoch >= out.min_epoch && (std::isnan(vloss) || vloss < best_val)) {
      if (!std::isnan(vloss)) best_val = vloss;
      out.params = params;
      out.selected_epoch = epoch;
    }
  }
  return out;
}

std::size_t min_epoch_rule(std::span<const double> train_losses, const MinEpochOptions& opts) {
  if (train_losses.size() < 5) throw ArgumentError("min_epoch_rule: need at least 5 epochs");
  if (opts.window < 1 || opts.window % 2 == 0) throw ArgumentError("min_epoch_rule: window must be odd");
  const std::size_t half = opts.window / 2;
  if (train_losses.size() < opts.window + 2) return opts.default_epoch;

  // Centered moving average; smoothed[j] belongs to epoch j + half.
  std::vector<double> smoothed;
  double scale = 1.0;
  for (std::size_t i = half; i + half < train_losses.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = i - half; j <= i + half; ++j) s += train_losses[j];
    smoothed.push_back(s / static_cast<double>(opts.window));
    scale = std::max(scale, std::abs(smoothed.back()));
  }
  const double tol = 1e-10 * scale;
  int previous = 0;
  for (std::size_t j = 1; j + 1 < smoothed.size(); ++j) {
    const double d2 = smoothed[j + 1] - 2.0 * smoothed[j] + smoothed[j - 1];
    const int sign = d2 > tol ? 1 : (d2 < -tol ? -1 : 0);
    if (sign == 0) continue;
    if (previous != 0 && sign != previous) return j + half;
    previous = sign;
  }
  return opts.default_epoch;
}

// ---------------------------------------------------------------------------

EnsemblePrediction ensemble_predict(const Bag& bag, std::span<const SlowModelParams> folds, Index k) {
  if (folds.empty()) throw ArgumentError("ensemble_predict: no fold weights");
  EnsemblePrediction p;
  p.case_id = bag.case_id;
  for (const auto& params : folds) p.fold_log_risks.push_back(slow_forward(bag, params, k).bag_log_risk);
  // Summing in sorted order makes the mean independent of fold order.
  std::vector<double> sorted = p.fold_log_risks;
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (double v : sorted) total += v;
  p.mean_log_risk = total / static_cast<double>(sorted.size());
  p.ttr = ttr_from_log_risk(p.mean_log_risk);
  return p;
}

void write_predictions_csv(std::ostream& os, std::span<const EnsemblePrediction> preds) {
  std::size_t folds = 0;
  for (const auto& p : preds) folds = std::max(folds, p.fold_log_risks.size());
  os << "case_id,mean_log_risk,ttr_years";
  for (std::size_t f = 0; f < folds; ++f) os << ",fold_" << f;
  os << '\n';
  for (const auto& p : preds) {
    os << p.case_id << ',' << csv::exact(p.mean_log_risk) << ',' << csv::exact(p.ttr);
    for (std::size_t f = 0; f < folds; ++f)
      os << ',' << (f < p.fold_log_risks.size() ? csv::exact(p.fold_log_risks[f]) : std::string());
    os << '\n';
  }
}

// ---------------------------------------------------------------------------

std::vector<Bag> mask_cohort(const Dataset& data, const FastModelParams& fast, double m_percent,
                             std::vector<PatchMask>* masks) {
  std::vector<Bag> out;
  out.reserve(data.cases.size());
  if (masks) masks->clear();
  for (const auto& c : data.cases) {
    PatchMask m = predict_mask(c.low, fast, m_percent);
    out.push_back(apply_mask(c.high, m, data.geometry));
    if (masks) masks->push_back(std::move(m));
  }
  return out;
}

TwoStageResult run_two_stage(const Dataset& data, const std::vector<std::string>& val_ids,
                             const std::vector<std::string>& test_ids, const TwoStageConfig& cfg) {
  TwoStageResult out;
  out.fast = train_fast(data, cfg.fast, &test_ids);
  const std::vector<Bag> masked = mask_cohort(data, out.fast.params, cfg.m_percent, &out.masks);

  const std::unordered_set<std::string> val(val_ids.begin(), val_ids.end());
  const std::unordered_set<std::string> test(test_ids.begin(), test_ids.end());
  SurvivalBatch train_b, val_b, test_b;
  for (std::size_t i = 0; i < data.cases.size(); ++i) {
    const auto& rec = data.cases[i].record;
    SurvivalBatch& target = test.count(rec.case_id) ? test_b : (val.count(rec.case_id) ? val_b : train_b);
    target.bags.push_back(&masked[i]);
    target.records.push_back(rec);
  }
  out.slow = train_slow(train_b, val_b, cfg.slow);
  out.test_log_risks = predict_log_risks(test_b, out.slow.params, cfg.slow.top_k);
  for (const auto& r : test_b.records) out.test_ids.push_back(r.case_id);
  out.test_c_index = test_b.size() >= 2 ? concordance_index(out.test_log_risks, test_b.records) : kNaN;
  return out;
}

}  // namespace bcr
