#include "bcr/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "bcr/parallel.hpp"
#include "csv_util.hpp"

namespace bcr {

using nlohmann::json;

std::string to_string(FoldScheme s) {
  switch (s) {
    case FoldScheme::FixedTest5Fold: return "fixed_test_5fold";
    case FoldScheme::Nested5x5: return "nested_5x5";
    case FoldScheme::Plain10Fold: return "plain_10fold";
  }
  return "unknown";
}

FoldScheme fold_scheme_from_string(const std::string& s) {
  for (auto f : {FoldScheme::FixedTest5Fold, FoldScheme::Nested5x5, FoldScheme::Plain10Fold})
    if (to_string(f) == s) return f;
  throw ArgumentError("unknown fold scheme '" + s + "'");
}

std::vector<std::vector<std::string>> partition(const std::vector<std::string>& ids, std::size_t k) {
  if (k == 0) throw ArgumentError("partition: k must be positive");
  std::vector<std::vector<std::string>> parts(k);
  const std::size_t base = ids.size() / k, extra = ids.size() % k;
  std::size_t pos = 0;
  for (std::size_t p = 0; p < k; ++p) {
    const std::size_t len = base + (p < extra ? 1 : 0);
    parts[p].assign(ids.begin() + static_cast<std::ptrdiff_t>(pos), ids.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return parts;
}

FoldPlan make_fold_plan(std::vector<std::string> case_ids, std::uint64_t seed, FoldScheme scheme) {
  if (case_ids.size() < 10) throw ArgumentError("fold plan: need at least 10 cases");
  std::sort(case_ids.begin(), case_ids.end());
  if (std::adjacent_find(case_ids.begin(), case_ids.end()) != case_ids.end())
    throw ArgumentError("fold plan: duplicate case id");
  // Sorting first makes the plan independent of input order.
  std::mt19937_64 rng(derive_seed(seed, {0xF01D, static_cast<std::uint64_t>(scheme)}));
  std::shuffle(case_ids.begin(), case_ids.end(), rng);

  FoldPlan plan;
  plan.seed = seed;
  plan.scheme = scheme;
  switch (scheme) {
    case FoldScheme::FixedTest5Fold: {
      const auto n_test = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(case_ids.size())));
      plan.fixed_test.assign(case_ids.begin(), case_ids.begin() + static_cast<std::ptrdiff_t>(n_test));
      plan.outer_folds =
          partition(std::vector<std::string>(case_ids.begin() + static_cast<std::ptrdiff_t>(n_test), case_ids.end()), 5);
      break;
    }
    case FoldScheme::Nested5x5: {
      plan.outer_folds = partition(case_ids, 5);
      for (std::size_t o = 0; o < 5; ++o) {
        std::vector<std::string> rest;
        for (std::size_t p = 0; p < 5; ++p)
          if (p != o) rest.insert(rest.end(), plan.outer_folds[p].begin(), plan.outer_folds[p].end());
        plan.inner_folds.push_back(partition(rest, 5));
      }
      break;
    }
    case FoldScheme::Plain10Fold:
      plan.outer_folds = partition(case_ids, 10);
      break;
  }
  return plan;
}

// ---------------------------------------------------------------------------

void GridCell::recompute() {
  if (values.empty()) {
    mean = std = std::numeric_limits<double>::quiet_NaN();
    return;
  }
  double s = 0.0;
  for (double v : values) s += v;
  mean = s / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  std = std::sqrt(ss / static_cast<double>(values.size()));
}

std::optional<std::size_t> GridResult::best() const {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const GridCell& c = cells[i];
    if (c.failed || c.values.empty() || std::isnan(c.mean)) continue;
    if (!best || c.mean > cells[*best].mean || (c.mean == cells[*best].mean && c.std < cells[*best].std)) best = i;
  }
  return best;
}

namespace {

struct RunSplit {
  std::size_t outer, inner;
  std::vector<std::size_t> train, val, eval;  // cohort indices
};

std::vector<RunSplit> nested_splits(const std::vector<SurvivalRecord>& records, std::uint64_t seed) {
  std::vector<std::string> ids;
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    ids.push_back(records[i].case_id);
    index.emplace(records[i].case_id, i);
  }
  const FoldPlan plan = make_fold_plan(ids, seed, FoldScheme::Nested5x5);
  auto to_index = [&](const std::vector<std::string>& v, std::vector<std::size_t>& out) {
    for (const auto& id : v) out.push_back(index.at(id));
  };

  std::vector<RunSplit> splits;
  for (std::size_t o = 0; o < plan.outer_folds.size(); ++o)
    for (std::size_t i = 0; i < plan.inner_folds[o].size(); ++i) {
      RunSplit s{o, i, {}, {}, {}};
      to_index(plan.outer_folds[o], s.eval);
      to_index(plan.inner_folds[o][i], s.val);
      for (std::size_t j = 0; j < plan.inner_folds[o].size(); ++j)
        if (j != i) to_index(plan.inner_folds[o][j], s.train);

      std::unordered_set<std::size_t> seen;
      for (const auto* part : {&s.train, &s.val, &s.eval})
        for (std::size_t c : *part)
          if (!seen.insert(c).second) throw ContractViolation("nested CV: train/validation/evaluation sets overlap");
      splits.push_back(std::move(s));
    }
  return splits;
}

SurvivalBatch make_batch(const std::vector<Bag>& bags, const std::vector<SurvivalRecord>& records,
                         const std::vector<std::size_t>& idx) {
  SurvivalBatch b;
  for (std::size_t i : idx) {
    b.bags.push_back(&bags[i]);
    b.records.push_back(records[i]);
  }
  return b;
}

}  // namespace

GridResult run_grid(const std::vector<SurvivalRecord>& records, const std::map<double, MaskedCohort>& cohorts,
                    const GridConfig& cfg, std::vector<RunLog>* logs) {
  if (cfg.ks.empty() || cfg.ms.empty()) throw ArgumentError("run_grid: empty grid");
  const std::vector<RunSplit> splits = nested_splits(records, cfg.seed);

  std::vector<Index> ks = cfg.ks;
  std::vector<double> ms = cfg.ms;
  std::sort(ks.begin(), ks.end());
  std::sort(ms.begin(), ms.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  ms.erase(std::unique(ms.begin(), ms.end()), ms.end());

  GridResult grid;
  for (Index k : ks)
    for (double m : ms) grid.cells.push_back(GridCell{k, m, {}, 0.0, 0.0, false, {}});

  const std::size_t runs_per_cell = splits.size();
  std::vector<RunLog> run_logs(grid.cells.size() * runs_per_cell);

  parallel_for(run_logs.size(), cfg.workers, [&](std::size_t task) {
    const std::size_t cell_idx = task / runs_per_cell;
    const RunSplit& split = splits[task % runs_per_cell];
    const GridCell& cell = grid.cells[cell_idx];
    RunLog& log = run_logs[task];
    log.top_k = cell.top_k;
    log.m_percent = cell.m_percent;
    log.outer = split.outer;
    log.inner = split.inner;
    log.n_train = split.train.size();
    log.n_val = split.val.size();
    log.n_eval = split.eval.size();
    for (std::size_t i : split.train) log.train_ids.push_back(records[i].case_id);
    for (std::size_t i : split.val) log.val_ids.push_back(records[i].case_id);
    for (std::size_t i : split.eval) log.eval_ids.push_back(records[i].case_id);
    log.c_index = std::numeric_limits<double>::quiet_NaN();

    auto it = cohorts.find(cell.m_percent);
    if (it == cohorts.end()) {
      log.error = "no masked cohort for m=" + csv::exact(cell.m_percent);
      return;
    }
    if (!it->second.error.empty()) {
      log.error = it->second.error;
      return;
    }
    const auto& bags = it->second.bags;
    if (bags.size() != records.size()) {
      log.error = "masked cohort size differs from the record count";
      return;
    }
    try {
      SlowTrainConfig slow = cfg.slow;
      slow.top_k = cell.top_k;
      slow.seed = derive_seed(cfg.seed, {split.outer, split.inner});
      const SlowTrainResult res =
          train_slow(make_batch(bags, records, split.train), make_batch(bags, records, split.val), slow);
      const SurvivalBatch eval = make_batch(bags, records, split.eval);
      log.train_loss = res.train_loss;
      log.val_loss = res.val_loss;
      log.selected_epoch = res.selected_epoch;
      log.c_index = concordance_index(predict_log_risks(eval, res.params, cell.top_k), eval.records, cfg.concordance);
    } catch (const std::exception& e) {
      log.error = e.what();
    }
  });

  for (std::size_t c = 0; c < grid.cells.size(); ++c) {
    GridCell& cell = grid.cells[c];
    for (std::size_t r = 0; r < runs_per_cell; ++r) {
      const RunLog& log = run_logs[c * runs_per_cell + r];
      if (!log.error.empty()) {
        if (!cell.failed) cell.error = log.error;
        cell.failed = true;
      } else {
        cell.values.push_back(log.c_index);
      }
    }
    cell.recompute();
  }
  if (logs) *logs = std::move(run_logs);
  return grid;
}

// ---------------------------------------------------------------------------

void write_grid_report(std::ostream& os, const GridResult& grid) {
  std::vector<const GridCell*> rows;
  for (const auto& c : grid.cells) rows.push_back(&c);
  std::sort(rows.begin(), rows.end(), [](const GridCell* a, const GridCell* b) {
    return std::tie(a->top_k, a->m_percent) < std::tie(b->top_k, b->m_percent);
  });
  os << "top_k,m_percent,ci_mean,ci_std,n_runs\n";
  for (const GridCell* c : rows) {
    os << c->top_k << ',' << csv::exact(c->m_percent) << ',';
    if (!c->failed && !c->values.empty()) os << csv::exact(c->mean) << ',' << csv::exact(c->std);
    else os << ',';
    os << ',' << c->values.size() << '\n';
  }
}

std::string grid_summary(const GridResult& grid) {
  std::ostringstream os;
  std::size_t failed = 0;
  for (const auto& c : grid.cells) failed += c.failed ? 1 : 0;
  os << grid.cells.size() << " cells, " << failed << " failed";
  if (const auto b = grid.best()) {
    const GridCell& c = grid.cells[*b];
    os << "; best top_k=" << c.top_k << " m=" << csv::exact(c.m_percent) << " C=" << csv::sig9(c.mean)
       << " sd=" << csv::sig9(c.std) << " (" << c.values.size() << " runs)";
  } else {
    os << "; no successful cell";
  }
  return os.str();
}

void write_run_log(std::ostream& os, const RunLog& log) {
  json j{{"top_k", log.top_k},       {"m_percent", log.m_percent}, {"outer", log.outer},
         {"inner", log.inner},       {"n_train", log.n_train},     {"n_val", log.n_val},
         {"n_eval", log.n_eval},     {"train_loss", log.train_loss}, {"val_loss", log.val_loss},
         {"selected_epoch", log.selected_epoch}, {"train_ids", log.train_ids}, {"val_ids", log.val_ids},
         {"eval_ids", log.eval_ids}};
  if (std::isnan(log.c_index)) j["c_index"] = nullptr;
  else j["c_index"] = log.c_index;
  if (!log.error.empty()) j["error"] = log.error;
  os << j.dump() << '\n';
}

void save_grid_result(const GridResult& grid, const std::filesystem::path& path) {
  json cells = json::array();
  for (const auto& c : grid.cells)
    cells.push_back({{"top_k", c.top_k}, {"m_percent", c.m_percent}, {"values", c.values}, {"failed", c.failed},
                     {"error", c.error}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << json{{"cells", cells}}.dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

GridResult load_grid_result(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  GridResult grid;
  try {
    const json j = json::parse(in);
    for (const auto& c : j.at("cells")) {
      GridCell cell;
      cell.top_k = c.at("top_k").get<Index>();
      cell.m_percent = c.at("m_percent").get<double>();
      cell.values = c.at("values").get<std::vector<double>>();
      cell.failed = c.at("failed").get<bool>();
      cell.error = c.value("error", std::string());
      cell.recompute();
      grid.cells.push_back(std::move(cell));
    }
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return grid;
}

}  // namespace bcr
