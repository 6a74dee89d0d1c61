#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "bcr/diffcore.hpp"

namespace bcr {

// One case's follow-up: event = 1 means recurrence observed at time_years,
// event = 0 means censored at time_years.
struct SurvivalRecord {
  std::string case_id;
  int event = 0;
  double time_years = 0.0;
};

void validate(const SurvivalRecord& r);

struct CoxLoss {
  double value = 0.0;
  VectorXd grad;           // d loss / d log_risk
  int n_events = 0;
  bool no_events = false;  // batch contributed nothing
};

// Negative log Cox partial likelihood with Breslow ties:
//   -Σ_{i:e_i=1} [ h_i - log Σ_{j:t_j>=t_i} exp(h_j) ]
CoxLoss cox_neg_log_partial_likelihood(std::span<const double> log_risks, std::span<const SurvivalRecord> records);

// Risk set of every case: indices j with t_j >= t_i.
std::vector<std::vector<std::size_t>> risk_sets(std::span<const SurvivalRecord> records);

enum class ConcordanceMode { Harrell, Uno };

struct ConcordanceOptions {
  ConcordanceMode mode = ConcordanceMode::Harrell;
  // Uno only: pairs whose earlier time exceeds tau are dropped. <= 0 disables.
  double tau = 0.0;
};

// Censored concordance. A pair is comparable when the earlier case has the
// event (t_i < t_j, e_i = 1), or when times tie and exactly one case has the
// event, that case counting as earlier. Equal risks earn half credit.
double concordance_index(std::span<const double> pred_risks, std::span<const SurvivalRecord> records,
                         const ConcordanceOptions& opts = {});

// Kaplan–Meier estimate of the censoring survival G(t-) evaluated at each
// record's own time (left limit). Used for Uno's weights.
std::vector<double> censoring_survival_left(std::span<const SurvivalRecord> records);

// Mann–Whitney AUC with half credit for ties.
double binary_auc(std::span<const double> scores, std::span<const int> labels);

inline double ttr_from_log_risk(double log_risk) { return std::exp(-log_risk); }

}  // namespace bcr
