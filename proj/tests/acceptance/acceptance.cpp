// Acceptance suite: one PASS/FAIL line per criterion. Exit status is 0 only
// when every criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <cstring>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "bcr/gradcheck_suite.hpp"
#include "bcr/harness.hpp"
#include "bcr/parallel.hpp"
#include "bcr/pipeline.hpp"
#include "oracles.hpp"

using namespace bcr;

namespace {

// Tolerances and thresholds.
constexpr double kGradTol = 1e-5;
constexpr double kGradPassFraction = 0.99;
constexpr double kGradSeconds = 60.0;
constexpr double kCoxTol = 1e-10;
constexpr double kShiftTol = 1e-9;
constexpr double kMinTestC = 0.85;
constexpr double kMinFastAuc = 0.95;
constexpr double kNullLow = 0.42, kNullHigh = 0.58;
constexpr double kPlantedSeconds = 15 * 60.0;
constexpr double kInflectionTol = 1.0;
constexpr double kTwoFoldTtrTol = 1e-15;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << ' ' << id << ' ' << name << ": " << detail << std::endl;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

template <typename F>
void guarded(int id, const std::string& name, F&& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, name, false, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

void gradient_fidelity() {
  const auto t0 = Clock::now();
  ad::GradCheckOptions opts;
  opts.tol = kGradTol;
  std::size_t checked = 0, failed = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const auto r = slow_stage_gradcheck(trial, opts);
    checked += r.checked;
    failed += r.failures.size();
  }
  const double frac = 1.0 - static_cast<double>(failed) / static_cast<double>(checked);
  const double secs = seconds_since(t0);
  report(1, "gradient fidelity", frac >= kGradPassFraction && secs < kGradSeconds && checked > 0,
         fmt("%.4f", frac) + " of " + std::to_string(checked) + " coordinates within 1e-5 over 100 trials, " +
             fmt("%.2f", secs) + " s");
}

void cox_oracle() {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> N(0, 2);
  std::uniform_real_distribution<double> shift(-50, 50);
  double worst = 0, worst_shift = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng() % 6;
    const auto r = oracle::random_records(rng, n, 0.4, 4);
    std::vector<double> h(n);
    for (auto& x : h) x = N(rng);
    const double v = cox_neg_log_partial_likelihood(h, r).value;
    worst = std::max(worst, std::abs(v - oracle::cox_nll(h, r)));
    const double c = shift(rng);
    for (auto& x : h) x += c;
    worst_shift = std::max(worst_shift, std::abs(cox_neg_log_partial_likelihood(h, r).value - v));
  }
  report(2, "cox loss oracle", worst <= kCoxTol && worst_shift <= kShiftTol,
         "max |loss - oracle| = " + fmt("%.3g", worst) + ", max shift change = " + fmt("%.3g", worst_shift) +
             " over 2000 instances (n <= 6)");
}

void cindex_oracle() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> cens(0.0, 0.8);
  int exact = 0, undefined = 0, mismatched = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 29;
    const auto r = oracle::random_records(rng, n, cens(rng), 8);
    std::vector<double> risk(n);
    const bool ties = trial % 2 == 0;
    std::normal_distribution<double> N;
    for (auto& x : risk) x = ties ? static_cast<double>(rng() % 5) : N(rng);
    const auto ref = oracle::cindex_pairs(risk, r);
    if (ref.comparable == 0) {
      try {
        concordance_index(risk, r);
        ++mismatched;
      } catch (const UndefinedMetricError&) {
        ++undefined;
      }
      continue;
    }
    if (concordance_index(risk, r) == ref.value()) ++exact;
    else ++mismatched;
  }
  std::vector<SurvivalRecord> r;
  std::vector<double> perfect, flat(10, 0.3);
  for (int i = 0; i < 10; ++i) {
    r.push_back({"c" + std::to_string(i), 1, 1.0 + i});
    perfect.push_back(10.0 - i);
  }
  const double c_perfect = concordance_index(perfect, r), c_flat = concordance_index(flat, r);
  report(3, "c-index oracle", mismatched == 0 && c_perfect == 1.0 && c_flat == 0.5,
         std::to_string(exact) + " exact, " + std::to_string(undefined) + " correctly undefined, " +
             std::to_string(mismatched) + " mismatched; perfect = " + fmt("%.17g", c_perfect) +
             ", ties = " + fmt("%.17g", c_flat));
}

// ---------------------------------------------------------------------------
// Planted signal.

SyntheticSpec planted_spec() {
  SyntheticSpec s;
  s.n_cases = 300;
  s.dim = 32;
  s.hot_fraction = 0.1;
  s.censoring_rate = 0.3;
  s.severity_min = 0.0;
  s.severity_max = 30.0;
  s.baseline_hazard = std::exp(-15.0);
  s.seed = 4;
  return s;
}

TwoStageConfig planted_config(double T, std::uint64_t seed) {
  TwoStageConfig c;
  c.m_percent = 20.0;
  c.fast.threshold_years = T;
  c.fast.adam.lr = 3e-4;
  c.fast.epochs = 30;
  c.fast.hidden = 32;
  c.fast.dropout = 0.25;
  c.fast.loss.lambda_inst = 0.3;
  c.fast.seed = seed;
  c.slow.adam.lr = 0.01;
  c.slow.epochs = 100;
  c.slow.hidden = 32;
  c.slow.top_k = 10;
  c.slow.min_epoch = 20;
  c.slow.seed = seed;
  return c;
}

void planted_signal() {
  const auto t0 = Clock::now();
  const SyntheticSpec spec = planted_spec();
  const SyntheticDataset syn = generate_synthetic(spec);

  // T: median observed event time, which balances the fast-stage labels.
  std::vector<double> times;
  for (const auto& c : syn.data.cases)
    if (c.record.event == 1) times.push_back(c.record.time_years);
  std::sort(times.begin(), times.end());
  const double T = times[times.size() / 2];

  std::vector<std::string> val, test;
  std::size_t censored = 0;
  for (const auto& c : syn.data.cases) {
    if (c.split == "val") val.push_back(c.record.case_id);
    if (c.split == "test") test.push_back(c.record.case_id);
    censored += c.record.event == 0;
  }
  const auto cfg = planted_config(T, spec.seed);
  const TwoStageResult res = run_two_stage(syn.data, val, test, cfg);

  // Permutation control: shuffle (event, time) pairs across cases, then pool
  // out-of-fold predictions from a 5-fold run of the whole pipeline.
  Dataset perm = syn.data;
  std::vector<std::size_t> order(perm.cases.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(spec.seed, {0x9E3}));
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < order.size(); ++i) {
    perm.cases[i].record.event = syn.data.cases[order[i]].record.event;
    perm.cases[i].record.time_years = syn.data.cases[order[i]].record.time_years;
  }
  const FoldPlan plan = make_fold_plan(perm.case_ids(), spec.seed, FoldScheme::Nested5x5);
  std::unordered_map<std::string, double> oof;
  for (std::size_t f = 0; f < plan.outer_folds.size(); ++f) {
    const auto& fold_test = plan.outer_folds[f];
    const auto& fold_val = plan.outer_folds[(f + 1) % plan.outer_folds.size()];
    const auto r = run_two_stage(perm, fold_val, fold_test, planted_config(T, derive_seed(spec.seed, {f})));
    for (std::size_t i = 0; i < r.test_ids.size(); ++i) oof[r.test_ids[i]] = r.test_log_risks[i];
  }
  std::vector<double> pooled;
  std::vector<SurvivalRecord> pooled_records;
  for (const auto& c : perm.cases) {
    pooled.push_back(oof.at(c.record.case_id));
    pooled_records.push_back(c.record);
  }
  const double null_c = concordance_index(pooled, pooled_records);
  const double secs = seconds_since(t0);

  const bool pass = res.test_c_index >= kMinTestC && res.fast.test_auc >= kMinFastAuc && null_c >= kNullLow &&
                    null_c <= kNullHigh && secs < kPlantedSeconds;
  report(4, "planted signal", pass,
         "test C = " + fmt("%.4f", res.test_c_index) + " (" + std::to_string(res.test_ids.size()) +
             " cases), fast AUC = " + fmt("%.4f", res.fast.test_auc) + " at T = " + fmt("%.4g", T) +
             ", permuted pooled C = " + fmt("%.4f", null_c) + ", censored " +
             fmt("%.3f", static_cast<double>(censored) / static_cast<double>(syn.data.cases.size())) + ", " +
             fmt("%.1f", secs) + " s");
}

// ---------------------------------------------------------------------------

void mask_correctness() {
  std::mt19937_64 rng(5);
  int count_bad = 0, oracle_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    const int half_percent = 1 + static_cast<int>(rng() % 80);  // m in (0, 40], steps of 0.5
    const double m = 0.5 * half_percent;
    std::vector<double> att(n);
    for (auto& a : att) a = trial % 3 == 0 ? static_cast<double>(rng() % 6) : std::ldexp(static_cast<double>(rng() >> 11), -53);
    std::vector<PatchCoord> coords(n);
    const PatchMask mask = make_mask(att, coords, m);
    // ceil(half_percent * n / 200) in integers.
    const std::size_t want = (static_cast<std::size_t>(half_percent) * n + 199) / 200;
    if (mask.selected_count() != want) ++count_bad;
    std::vector<std::uint8_t> flags(n, 0);
    for (Index i : oracle::top_k(att, static_cast<Index>(want))) flags[static_cast<std::size_t>(i)] = 1;
    if (flags != mask.flags) ++oracle_bad;
  }

  // Kept fraction of high-resolution patches against m on synthetic geometry.
  SyntheticSpec spec;
  spec.n_cases = 40;
  spec.dim = 4;
  spec.seed = 6;
  const auto syn = generate_synthetic(spec);
  int monotone_bad = 0;
  for (const auto& c : syn.data.cases) {
    std::vector<double> att(static_cast<std::size_t>(c.low.size()));
    for (auto& a : att) a = std::ldexp(static_cast<double>(rng() >> 11), -53);
    double prev = 0;
    std::set<PatchCoord> prev_kept;
    for (int m = 1; m <= 40; ++m) {
      const Bag kept = apply_mask(c.high, make_mask(att, c.low.coords, m, c.record.case_id), syn.data.geometry);
      const double frac = static_cast<double>(kept.size()) / static_cast<double>(c.high.size());
      const std::set<PatchCoord> now(kept.coords.begin(), kept.coords.end());
      if (frac < prev || !std::includes(now.begin(), now.end(), prev_kept.begin(), prev_kept.end())) ++monotone_bad;
      prev = frac;
      prev_kept = now;
    }
  }
  report(5, "mask correctness", count_bad == 0 && oracle_bad == 0 && monotone_bad == 0,
         "1000 score vectors: " + std::to_string(count_bad) + " count errors, " + std::to_string(oracle_bad) +
             " oracle mismatches; kept fraction non-monotone in " + std::to_string(monotone_bad) +
             " of 1600 steps over 40 cases");
}

std::string dump_logs(const std::vector<RunLog>& logs) {
  std::ostringstream os;
  for (const auto& l : logs) write_run_log(os, l);
  return os.str();
}

void grid_integrity() {
  SyntheticSpec spec;
  spec.n_cases = 60;
  spec.dim = 8;
  spec.severity_max = 30.0;
  spec.baseline_hazard = std::exp(-15.0);
  spec.seed = 7;
  const auto syn = generate_synthetic(spec);
  const auto fast = FastModelParams::init(8, 8, 7);
  std::map<double, MaskedCohort> cohorts;
  for (double m : {10.0, 20.0}) cohorts[m].bags = mask_cohort(syn.data, fast, m);

  GridConfig cfg;
  cfg.ks = {5, 10};
  cfg.ms = {10, 20};
  cfg.slow.epochs = 6;
  cfg.slow.hidden = 8;
  cfg.slow.min_epoch = 2;
  cfg.slow.adam.lr = 0.01;
  cfg.seed = 11;
  cfg.workers = 1;
  const auto records = syn.data.records();
  std::vector<RunLog> logs_a, logs_b;
  const GridResult a = run_grid(records, cohorts, cfg, &logs_a);
  const GridResult b = run_grid(records, cohorts, cfg, &logs_b);

  bool counts_ok = a.cells.size() == 4;
  for (const auto& c : a.cells) counts_ok = counts_ok && !c.failed && c.values.size() == 25;
  bool same = a.cells.size() == b.cells.size();
  for (std::size_t i = 0; same && i < a.cells.size(); ++i)
    for (std::size_t j = 0; same && j < a.cells[i].values.size(); ++j)
      same = std::memcmp(&a.cells[i].values[j], &b.cells[i].values[j], sizeof(double)) == 0;
  same = same && dump_logs(logs_a) == dump_logs(logs_b);

  std::size_t overlaps = 0, incomplete = 0;
  for (const auto& l : logs_a) {
    const std::set<std::string> tr(l.train_ids.begin(), l.train_ids.end()), va(l.val_ids.begin(), l.val_ids.end());
    for (const auto& id : l.eval_ids) overlaps += tr.count(id) + va.count(id);
    for (const auto& id : l.val_ids) overlaps += tr.count(id);
    if (l.train_ids.size() + l.val_ids.size() + l.eval_ids.size() != records.size()) ++incomplete;
  }
  report(6, "grid harness", counts_ok && same && overlaps == 0 && incomplete == 0 && logs_a.size() == 100,
         std::to_string(a.cells.size()) + " cells x 25 runs " + (counts_ok ? "ok" : "WRONG") + ", " +
             std::to_string(overlaps) + " overlapping ids across " + std::to_string(logs_a.size()) + " runs, " +
             "repeat run " + (same ? "bit-identical" : "DIFFERS"));
}

void min_epoch() {
  std::vector<double> inflect, logistic, linear, convex;
  for (int x = 0; x < 100; ++x) {
    inflect.push_back(std::exp(-x / 10.0) - x * x / 2000.0);
    logistic.push_back(1.0 / (1.0 + std::exp((x - 30.0) / 6.0)));
    linear.push_back(3.0 - 0.02 * x);
    convex.push_back(std::exp(-x / 10.0) + x * x / 2000.0);
  }
  const double want = 10.0 * std::log(10.0);
  const auto e1 = min_epoch_rule(inflect), e2 = min_epoch_rule(logistic);
  const auto e3 = min_epoch_rule(linear), e4 = min_epoch_rule(convex);
  const bool pass = std::abs(static_cast<double>(e1) - want) <= kInflectionTol &&
                    std::abs(static_cast<double>(e2) - 30.0) <= kInflectionTol && e3 == 40 && e4 == 40;
  report(7, "min-epoch rule", pass,
         "inflection " + fmt("%.2f", want) + " -> " + std::to_string(e1) + ", logistic 30 -> " + std::to_string(e2) +
             ", linear -> " + std::to_string(e3) + ", convex -> " + std::to_string(e4));
}

void ensemble_contract() {
  std::mt19937_64 rng(8);
  int perm_bad = 0, ttr_bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Bag b;
    b.case_id = "e" + std::to_string(trial);
    b.embeddings = Matrix::Random(1 + static_cast<Index>(rng() % 30), 6);
    b.coords.resize(static_cast<std::size_t>(b.size()));
    b.resolution_mpp = 0.25;
    std::vector<SlowModelParams> folds;
    for (int f = 0; f < 10; ++f) folds.push_back(SlowModelParams::init(6, 4, AttentionInput::Embeddings, rng()));
    const auto base = ensemble_predict(b, folds, 5);
    if (base.ttr != std::exp(-base.mean_log_risk)) ++ttr_bad;
    for (int p = 0; p < 5; ++p) {
      std::shuffle(folds.begin(), folds.end(), rng);
      const auto q = ensemble_predict(b, folds, 5);
      if (q.mean_log_risk != base.mean_log_risk || q.ttr != base.ttr) ++perm_bad;
    }
  }
  Bag one;
  one.case_id = "two_fold";
  one.embeddings = Matrix::Ones(1, 1);
  one.coords.resize(1);
  one.resolution_mpp = 0.25;
  auto f0 = SlowModelParams::init(1, 2, AttentionInput::Embeddings, 1);
  f0.beta.value(0, 0) = 0.0;
  auto f1 = f0;
  f1.beta.value(0, 0) = std::log(4.0);
  const std::vector<SlowModelParams> two{f0, f1};
  const auto p = ensemble_predict(one, two, 10);
  const bool example = std::abs(p.ttr - 0.5) <= kTwoFoldTtrTol && p.ttr == std::exp(-p.mean_log_risk);
  report(8, "ensemble/ttr contract", perm_bad == 0 && ttr_bad == 0 && example,
         std::to_string(perm_bad) + " permutation changes in 500 shuffles, " + std::to_string(ttr_bad) +
             " ttr mismatches; two-fold ttr = " + fmt("%.17g", p.ttr));
}

void persistence() {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> N(0, 10);
  std::uniform_int_distribution<std::int32_t> C(-2000000, 2000000);
  int bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Bag b;
    b.case_id = "b";
    b.embeddings.resize(1 + static_cast<Index>(rng() % 40), 1 + static_cast<Index>(rng() % 64));
    for (Index i = 0; i < b.embeddings.size(); ++i) b.embeddings.data()[i] = N(rng);
    for (Index i = 0; i < b.size(); ++i) b.coords.push_back({C(rng), C(rng), static_cast<std::int32_t>(rng() % 8)});
    b.resolution_mpp = 0.1 + static_cast<double>(rng() % 1000) / 7.0;
    const Bag back = decode_bag(encode_bag(b));
    bool ok = back.coords == b.coords && back.resolution_mpp == b.resolution_mpp && back.size() == b.size() &&
              back.dim() == b.dim();
    for (Index i = 0; ok && i < b.embeddings.size(); ++i)
      ok = back.embeddings.data()[i] == static_cast<double>(static_cast<float>(b.embeddings.data()[i]));
    bad += ok ? 0 : 1;
  }

  Bag b;
  b.embeddings = Matrix::Ones(3, 2);
  b.coords.resize(3);
  b.resolution_mpp = 1.0;
  const auto good = encode_bag(b);
  std::vector<std::vector<std::byte>> corrupt;
  corrupt.push_back(good);
  corrupt.back()[1] = std::byte{'X'};  // magic
  corrupt.push_back(good);
  corrupt.back()[4] = std::byte{9};  // version
  corrupt.push_back(std::vector<std::byte>(good.begin(), good.begin() + 8));  // header cut
  corrupt.push_back(std::vector<std::byte>(good.begin(), good.end() - 3));    // payload cut
  corrupt.push_back(good);
  corrupt.back()[10] = std::byte{0};  // n = 0
  corrupt.push_back(good);
  corrupt.back().push_back(std::byte{1});  // trailing
  int typed = 0;
  for (const auto& bytes : corrupt) {
    try {
      decode_bag(bytes);
    } catch (const FormatError&) {
      ++typed;
    } catch (...) {
    }
  }
  report(9, "persistence", bad == 0 && typed == static_cast<int>(corrupt.size()),
         std::to_string(1000 - bad) + "/1000 bags round-trip at f32, " + std::to_string(typed) + "/" +
             std::to_string(corrupt.size()) + " corrupt inputs rejected with FormatError");
}

}  // namespace

int main() {
  guarded(1, "gradient fidelity", gradient_fidelity);
  guarded(2, "cox loss oracle", cox_oracle);
  guarded(3, "c-index oracle", cindex_oracle);
  guarded(4, "planted signal", planted_signal);
  guarded(5, "mask correctness", mask_correctness);
  guarded(6, "grid harness", grid_integrity);
  guarded(7, "min-epoch rule", min_epoch);
  guarded(8, "ensemble/ttr contract", ensemble_contract);
  guarded(9, "persistence", persistence);
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
