#pragma once

#include <compare>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bcr/diffcore.hpp"
#include "bcr/survival.hpp"

namespace bcr {

using ad::Index;

// Patch origin in level-0 pixel space plus the pyramid level it was read at.
struct PatchCoord {
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t level = 0;

  auto operator<=>(const PatchCoord&) const = default;
};

// One case's patch embeddings at a single resolution.
struct Bag {
  std::string case_id;
  Matrix embeddings;  // n_patches × d
  std::vector<PatchCoord> coords;
  double resolution_mpp = 0.0;

  Index size() const { return embeddings.rows(); }
  Index dim() const { return embeddings.cols(); }
  void validate() const;
};

// Indices of the k largest values, largest first; ties go to the lower index.
std::vector<Index> top_k_indices(std::span<const double> values, Index k);

// Recurrence label at threshold T. Censored cases with t < T carry no label
// and must have been excluded before this point.
int bag_label(const SurvivalRecord& record, double threshold_years);

// ---------------------------------------------------------------------------
// Fast stage: gated-attention bag classifier over low-resolution patches.

struct FastModelParams {
  ad::Parameter<double> attn_V;        // d×h
  ad::Parameter<double> attn_V_bias;   // 1×h
  ad::Parameter<double> attn_U;        // d×h, sigmoid gate
  ad::Parameter<double> attn_U_bias;   // 1×h
  ad::Parameter<double> attn_w;        // h×1
  ad::Parameter<double> attn_w_bias;   // 1×1
  ad::Parameter<double> classifier;    // d×2
  ad::Parameter<double> classifier_bias;
  ad::Parameter<double> instance;      // d×2 instance head
  ad::Parameter<double> instance_bias;

  static FastModelParams init(Index dim, Index hidden, std::uint64_t seed);
  std::vector<ad::Parameter<double>*> all();
  std::vector<const ad::Parameter<double>*> all() const;
  Index dim() const { return attn_V.value.rows(); }
  Index hidden() const { return attn_V.value.cols(); }
};

struct FastLossConfig {
  double lambda_inst = 0.3;
  Index k_inst = 8;
};

// Nodes produced by the fast forward pass.
struct FastForward {
  ad::Var<double> logits;      // 1×2
  ad::Var<double> attention;   // n×1, softmax over all patches
  ad::Var<double> embeddings;  // n×d input as seen by the heads (after dropout)
};

struct FastOutput {
  VectorXd logits;     // 2
  VectorXd attention;  // n
  double recurrence_score() const { return logits(1) - logits(0); }
};

// When `bind_params` is true the parameters are registered for gradients,
// otherwise they enter the tape as constants.
FastForward fast_forward(ad::Tape<double>& tape, const Bag& bag, FastModelParams& params, bool bind_params,
                         bool training, double dropout_rate, std::mt19937_64& rng);
FastOutput fast_forward(const Bag& bag, const FastModelParams& params);

// Bag cross-entropy plus lambda_inst × instance cross-entropy on the k_inst
// most attended patches (pseudo-label = bag label) and the k_inst least
// attended (pseudo-label 0).
ad::Var<double> fast_loss(const FastForward& fwd, int label, FastModelParams& params, bool bind_params,
                          const FastLossConfig& cfg);

// Patches chosen for the instance term: (most attended, least attended).
std::pair<std::vector<Index>, std::vector<Index>> instance_patches(std::span<const double> attention, Index k_inst);

// ---------------------------------------------------------------------------
// Slow stage: Cox layer per patch, top-k selection, attention pooling.

enum class AttentionInput { Embeddings, Risks };

std::string to_string(AttentionInput a);
AttentionInput attention_input_from_string(const std::string& s);

struct SlowModelParams {
  ad::Parameter<double> beta;    // d×1, no bias
  ad::Parameter<double> attn_V;  // d×h (embeddings) or 1×h (risks)
  ad::Parameter<double> attn_w;  // h×1
  AttentionInput input = AttentionInput::Embeddings;

  static SlowModelParams init(Index dim, Index hidden, AttentionInput input, std::uint64_t seed);
  std::vector<ad::Parameter<double>*> all();
  std::vector<const ad::Parameter<double>*> all() const;
  Index dim() const { return beta.value.rows(); }
  Index hidden() const { return attn_w.value.rows(); }
};

struct SlowForward {
  ad::Var<double> bag_log_risk;     // 1×1
  std::vector<Index> selected;      // top-k patch indices, highest risk first
  ad::Var<double> attention;        // k'×1 over `selected`
  ad::Var<double> patch_log_risks;  // n×1
  bool truncated = false;           // bag had fewer than k patches
};

struct SlowOutput {
  double bag_log_risk = 0.0;
  std::vector<Index> selected;
  VectorXd attention;
  VectorXd patch_log_risks;
  bool truncated = false;
};

SlowForward slow_forward(ad::Tape<double>& tape, const Bag& bag, SlowModelParams& params, bool bind_params, Index k,
                         bool training, double dropout_rate, std::mt19937_64& rng);
SlowOutput slow_forward(const Bag& bag, const SlowModelParams& params, Index k);

// Cox loss over a batch of bag log risks, attached to the tape.
ad::Var<double> cox_loss(std::span<const ad::Var<double>> bag_log_risks, std::span<const SurvivalRecord> records,
                         CoxLoss* details = nullptr);

// ---------------------------------------------------------------------------
// Attention export.

struct AttentionRecord {
  std::string case_id;
  PatchCoord coord;
  double log_risk = 0.0;
  double attention = 0.0;
  bool selected = false;
};

std::vector<AttentionRecord> export_attention(const Bag& bag, const SlowOutput& out);
void write_attention_csv(std::ostream& os, std::span<const AttentionRecord> rows);
std::vector<AttentionRecord> read_attention_csv(std::istream& is);

// ---------------------------------------------------------------------------
// Weight files (JSON).

void save_params(const FastModelParams& p, const std::string& path);
void save_params(const SlowModelParams& p, const std::string& path);
FastModelParams load_fast_params(const std::string& path);
SlowModelParams load_slow_params(const std::string& path);

}  // namespace bcr
