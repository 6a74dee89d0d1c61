#include "bcr/survival.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>

namespace bcr {

namespace {

double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

void check_sizes(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DimensionError(std::string(what) + ": one value per record required");
}

// Index order by ascending time.
std::vector<std::size_t> by_time(std::span<const SurvivalRecord> records) {
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].time_years < records[b].time_years; });
  return order;
}

// Fenwick tree over risk ranks.
class RankCounter {
 public:
  explicit RankCounter(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t rank) {
    for (std::size_t i = rank + 1; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // Number of inserted ranks < rank.
  std::int64_t below(std::size_t rank) const {
    std::int64_t s = 0;
    for (std::size_t i = rank; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<std::int64_t> tree_;
};

}  // namespace

void validate(const SurvivalRecord& r) {
  if (!(r.time_years > 0.0) || !std::isfinite(r.time_years))
    throw ValidationError("case " + r.case_id + ": time_years must be positive and finite");
  if (r.event != 0 && r.event != 1) throw ValidationError("case " + r.case_id + ": event must be 0 or 1");
}

CoxLoss cox_neg_log_partial_likelihood(std::span<const double> log_risks, std::span<const SurvivalRecord> records) {
  check_sizes(log_risks.size(), records.size(), "cox loss");
  const std::size_t n = records.size();
  if (n == 0) throw ArgumentError("cox loss: no records");
  for (const auto& r : records) validate(r);
  for (double h : log_risks)
    if (!std::isfinite(h)) throw NumericError("cox loss: non-finite log risk");

  CoxLoss out;
  out.grad = VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (const auto& r : records) out.n_events += r.event;
  if (out.n_events == 0) {
    out.no_events = true;
    return out;
  }

  const auto order = by_time(records);

  // Descending sweep: log of the risk-set sum for each distinct time.
  std::vector<double> log_risk_sum(n);
  double acc = -std::numeric_limits<double>::infinity();
  for (std::size_t hi = n; hi > 0;) {
    std::size_t lo = hi - 1;
    const double t = records[order[lo]].time_years;
    while (lo > 0 && records[order[lo - 1]].time_years == t) --lo;
    for (std::size_t p = lo; p < hi; ++p) acc = log_add_exp(acc, log_risks[order[p]]);
    for (std::size_t p = lo; p < hi; ++p) log_risk_sum[order[p]] = acc;
    hi = lo;
  }

  // Ascending sweep: log Σ_{events i, t_i <= t} 1/S_i.
  double loss = 0.0;
  double log_inv = -std::numeric_limits<double>::infinity();
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo;
    const double t = records[order[lo]].time_years;
    while (hi < n && records[order[hi]].time_years == t) ++hi;
    for (std::size_t p = lo; p < hi; ++p) {
      const std::size_t i = order[p];
      if (records[i].event == 1) {
        loss -= log_risks[i] - log_risk_sum[i];
        log_inv = log_add_exp(log_inv, -log_risk_sum[i]);
      }
    }
    for (std::size_t p = lo; p < hi; ++p) {
      const std::size_t k = order[p];
      const double share = log_inv == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(log_risks[k] + log_inv);
      out.grad(static_cast<Eigen::Index>(k)) = share - records[k].event;
    }
    lo = hi;
  }
  out.value = loss;
  return out;
}

std::vector<std::vector<std::size_t>> risk_sets(std::span<const SurvivalRecord> records) {
  std::vector<std::vector<std::size_t>> sets(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    for (std::size_t j = 0; j < records.size(); ++j)
      if (records[j].time_years >= records[i].time_years) sets[i].push_back(j);
  return sets;
}

std::vector<double> censoring_survival_left(std::span<const SurvivalRecord> records) {
  const std::size_t n = records.size();
  const auto order = by_time(records);
  std::vector<double> g(n);
  double surv = 1.0;
  std::size_t at_risk = n;
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo;
    const double t = records[order[lo]].time_years;
    std::size_t censored = 0;
    while (hi < n && records[order[hi]].time_years == t) {
      censored += records[order[hi]].event == 0 ? 1 : 0;
      ++hi;
    }
    for (std::size_t p = lo; p < hi; ++p) g[order[p]] = surv;
    surv *= 1.0 - static_cast<double>(censored) / static_cast<double>(at_risk);
    at_risk -= hi - lo;
    lo = hi;
  }
  return g;
}

double concordance_index(std::span<const double> pred_risks, std::span<const SurvivalRecord> records,
                         const ConcordanceOptions& opts) {
  check_sizes(pred_risks.size(), records.size(), "concordance_index");
  const std::size_t n = records.size();
  if (n < 2) throw UndefinedMetricError("concordance_index: need at least two cases");
  for (const auto& r : records) validate(r);

  // Dense ranks of the predicted risks.
  std::vector<double> sorted(pred_risks.begin(), pred_risks.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i)
    rank[i] = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), pred_risks[i]) - sorted.begin());

  std::vector<double> weight;
  if (opts.mode == ConcordanceMode::Uno) {
    weight = censoring_survival_left(records);
    for (double& w : weight) w = w > 0.0 ? 1.0 / (w * w) : 0.0;
  }

  const auto order = by_time(records);
  RankCounter later(sorted.size());
  std::int64_t inserted = 0;
  std::int64_t num2 = 0, den = 0;  // Harrell: exact integer counts, num2 = 2·concordant + ties
  double wnum = 0.0, wden = 0.0;

  for (std::size_t hi = n; hi > 0;) {
    std::size_t lo = hi - 1;
    const double t = records[order[lo]].time_years;
    while (lo > 0 && records[order[lo - 1]].time_years == t) --lo;
    // Censored cases at this time count as later than events at the same time.
    for (std::size_t p = lo; p < hi; ++p)
      if (records[order[p]].event == 0) {
        later.add(rank[order[p]]);
        ++inserted;
      }
    for (std::size_t p = lo; p < hi; ++p) {
      const std::size_t i = order[p];
      if (records[i].event != 1 || inserted == 0) continue;
      const std::int64_t lower = later.below(rank[i]);
      const std::int64_t tied = later.below(rank[i] + 1) - lower;
      if (opts.mode == ConcordanceMode::Harrell) {
        num2 += 2 * lower + tied;
        den += inserted;
      } else if (opts.tau <= 0.0 || t < opts.tau) {
        wnum += weight[i] * (static_cast<double>(lower) + 0.5 * static_cast<double>(tied));
        wden += weight[i] * static_cast<double>(inserted);
      }
    }
    for (std::size_t p = lo; p < hi; ++p)
      if (records[order[p]].event == 1) {
        later.add(rank[order[p]]);
        ++inserted;
      }
    hi = lo;
  }

  if (opts.mode == ConcordanceMode::Harrell) {
    if (den == 0) throw UndefinedMetricError("concordance_index: no comparable pairs");
    return (static_cast<double>(num2) / 2.0) / static_cast<double>(den);
  }
  if (!(wden > 0.0)) throw UndefinedMetricError("concordance_index: no comparable pairs");
  return wnum / wden;
}

double binary_auc(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores.size(), labels.size(), "binary_auc");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ArgumentError("binary_auc: labels must be 0 or 1");
    n_pos += static_cast<std::size_t>(y);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("binary_auc: both classes required");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
  std::int64_t rank_sum2 = 0;
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo;
    while (hi < n && scores[order[hi]] == scores[order[lo]]) ++hi;
    const auto avg2 = static_cast<std::int64_t>(lo + 1 + hi);  // 2 × mean rank of positions lo..hi-1
    for (std::size_t p = lo; p < hi; ++p)
      if (labels[order[p]] == 1) rank_sum2 += avg2;
    lo = hi;
  }
  const auto np = static_cast<std::int64_t>(n_pos);
  const std::int64_t u2 = rank_sum2 - np * (np + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace bcr
