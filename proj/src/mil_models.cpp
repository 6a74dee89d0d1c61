#include "bcr/mil_models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <type_traits>

#include <json.hpp>

#include "csv_util.hpp"

namespace bcr {

using ad::Parameter;
using ad::Tape;
using ad::Var;
using json = nlohmann::json;

void Bag::validate() const {
  if (embeddings.rows() < 1) throw ValidationError("bag " + case_id + ": no patches");
  if (static_cast<Index>(coords.size()) != embeddings.rows())
    throw ValidationError("bag " + case_id + ": coords length differs from patch count");
  if (!(resolution_mpp > 0.0)) throw ValidationError("bag " + case_id + ": resolution_mpp must be positive");
  if (!embeddings.allFinite()) throw NumericError("bag " + case_id + ": non-finite embedding");
}

std::vector<Index> top_k_indices(std::span<const double> values, Index k) {
  if (k < 0) throw ArgumentError("top_k_indices: k must be non-negative");
  std::vector<Index> idx(values.size());
  std::iota(idx.begin(), idx.end(), Index{0});
  const auto kk = static_cast<std::size_t>(std::min<Index>(k, static_cast<Index>(values.size())));
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(), [&](Index a, Index b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  idx.resize(kk);
  return idx;
}

int bag_label(const SurvivalRecord& record, double threshold_years) {
  validate(record);
  if (record.event == 1) return record.time_years <= threshold_years ? 1 : 0;
  if (record.time_years < threshold_years)
    throw ContractViolation("case " + record.case_id + " is censored before the threshold and must be excluded");
  return 0;
}

namespace {

Matrix normal_init(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix xavier(Index fan_in, Index fan_out, std::mt19937_64& rng) {
  return normal_init(fan_in, fan_out, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)), rng);
}

// Registers `p` for gradients when it is mutable and `as_param` is set;
// otherwise copies its value onto the tape as a constant.
template <typename P>
Var<double> bind(Tape<double>& tape, P& p, bool as_param) {
  if constexpr (std::is_const_v<P>) {
    return tape.constant(p.value);
  } else {
    return as_param ? tape.parameter(p) : tape.constant(p.value);
  }
}

std::vector<Index> iota_indices(Index n) {
  std::vector<Index> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), Index{0});
  return v;
}

std::span<const double> as_span(const Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }

Var<double> cross_entropy(const Var<double>& logits, std::vector<Index> labels) {
  return ad::mean(ad::log_sum_exp_rows(logits) - ad::pick(logits, std::move(labels)));
}

}  // namespace

// ---------------------------------------------------------------------------

FastModelParams FastModelParams::init(Index dim, Index hidden, std::uint64_t seed) {
  if (dim < 1 || hidden < 1) throw ArgumentError("FastModelParams: dim and hidden must be >= 1");
  std::mt19937_64 rng(seed);
  FastModelParams p;
  p.attn_V = {"attn_V", xavier(dim, hidden, rng)};
  p.attn_V_bias = {"attn_V_bias", Matrix::Zero(1, hidden)};
  p.attn_U = {"attn_U", xavier(dim, hidden, rng)};
  p.attn_U_bias = {"attn_U_bias", Matrix::Zero(1, hidden)};
  p.attn_w = {"attn_w", xavier(hidden, 1, rng)};
  p.attn_w_bias = {"attn_w_bias", Matrix::Zero(1, 1)};
  p.classifier = {"classifier", xavier(dim, 2, rng)};
  p.classifier_bias = {"classifier_bias", Matrix::Zero(1, 2)};
  p.instance = {"instance", xavier(dim, 2, rng)};
  p.instance_bias = {"instance_bias", Matrix::Zero(1, 2)};
  return p;
}

std::vector<Parameter<double>*> FastModelParams::all() {
  return {&attn_V, &attn_V_bias, &attn_U, &attn_U_bias, &attn_w, &attn_w_bias,
          &classifier, &classifier_bias, &instance, &instance_bias};
}

std::vector<const Parameter<double>*> FastModelParams::all() const {
  return {&attn_V, &attn_V_bias, &attn_U, &attn_U_bias, &attn_w, &attn_w_bias,
          &classifier, &classifier_bias, &instance, &instance_bias};
}

namespace {

template <typename Params>
FastForward fast_forward_impl(Tape<double>& tape, const Bag& bag, Params& params, bool bind_params, bool training,
                              double dropout_rate, std::mt19937_64& rng) {
  if (bag.dim() != params.dim())
    throw DimensionError("fast_forward: bag " + bag.case_id + " has d=" + std::to_string(bag.dim()) +
                         ", model expects " + std::to_string(params.dim()));
  if (bag.size() < 1) throw DimensionError("fast_forward: empty bag " + bag.case_id);
  const Var<double> feats = ad::dropout(tape.constant(bag.embeddings), dropout_rate, rng, training);
  const Var<double> a = ad::tanh(ad::linear(feats, bind(tape, params.attn_V, bind_params),
                                            bind(tape, params.attn_V_bias, bind_params)));
  const Var<double> gate = ad::sigmoid(ad::linear(feats, bind(tape, params.attn_U, bind_params),
                                                  bind(tape, params.attn_U_bias, bind_params)));
  const Var<double> scores = ad::linear(ad::hadamard(a, gate), bind(tape, params.attn_w, bind_params),
                                        bind(tape, params.attn_w_bias, bind_params));
  const Var<double> attention = ad::softmax_subset(scores, iota_indices(bag.size()));
  const Var<double> pooled = ad::weighted_sum(attention, feats);
  const Var<double> logits = ad::linear(pooled, bind(tape, params.classifier, bind_params),
                                        bind(tape, params.classifier_bias, bind_params));
  return {logits, attention, feats};
}

}  // namespace

FastForward fast_forward(Tape<double>& tape, const Bag& bag, FastModelParams& params, bool bind_params,
                         bool training, double dropout_rate, std::mt19937_64& rng) {
  return fast_forward_impl(tape, bag, params, bind_params, training, dropout_rate, rng);
}

FastOutput fast_forward(const Bag& bag, const FastModelParams& params) {
  Tape<double> tape;
  std::mt19937_64 unused(0);
  auto fwd = fast_forward_impl(tape, bag, params, false, false, 0.0, unused);
  return {fwd.logits.value().row(0).transpose(), fwd.attention.value().col(0)};
}

std::pair<std::vector<Index>, std::vector<Index>> instance_patches(std::span<const double> attention, Index k_inst) {
  const auto n = static_cast<Index>(attention.size());
  const Index k = std::min(k_inst, n / 2);
  if (k <= 0) return {};
  std::vector<Index> top = top_k_indices(attention, k);
  std::vector<Index> order = iota_indices(n);
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return attention[a] < attention[b]; });
  order.resize(static_cast<std::size_t>(k));
  return {std::move(top), std::move(order)};
}

Var<double> fast_loss(const FastForward& fwd, int label, FastModelParams& params, bool bind_params,
                      const FastLossConfig& cfg) {
  if (label != 0 && label != 1) throw ArgumentError("fast_loss: label must be 0 or 1");
  auto& tape = fwd.logits.tape();
  Var<double> loss = cross_entropy(fwd.logits, {label});
  if (cfg.lambda_inst == 0.0) return loss;

  auto [top, bottom] = instance_patches(as_span(fwd.attention.value()), cfg.k_inst);
  if (top.empty()) return loss;
  std::vector<Index> rows = top;
  rows.insert(rows.end(), bottom.begin(), bottom.end());
  std::vector<Index> targets(top.size(), label);
  targets.insert(targets.end(), bottom.size(), 0);
  const Var<double> inst_logits = ad::linear(ad::gather_rows(fwd.embeddings, std::move(rows)),
                                             bind(tape, params.instance, bind_params),
                                             bind(tape, params.instance_bias, bind_params));
  return loss + cfg.lambda_inst * cross_entropy(inst_logits, std::move(targets));
}

// ---------------------------------------------------------------------------

std::string to_string(AttentionInput a) { return a == AttentionInput::Embeddings ? "embeddings" : "risks"; }

AttentionInput attention_input_from_string(const std::string& s) {
  if (s == "embeddings") return AttentionInput::Embeddings;
  if (s == "risks") return AttentionInput::Risks;
  throw ArgumentError("attention_input must be 'embeddings' or 'risks', got '" + s + "'");
}

SlowModelParams SlowModelParams::init(Index dim, Index hidden, AttentionInput input, std::uint64_t seed) {
  if (dim < 1 || hidden < 1) throw ArgumentError("SlowModelParams: dim and hidden must be >= 1");
  std::mt19937_64 rng(seed);
  SlowModelParams p;
  p.input = input;
  p.beta = {"beta", normal_init(dim, 1, 1.0 / std::sqrt(static_cast<double>(dim)), rng)};
  const Index in = input == AttentionInput::Embeddings ? dim : 1;
  p.attn_V = {"attn_V", xavier(in, hidden, rng)};
  p.attn_w = {"attn_w", xavier(hidden, 1, rng)};
  return p;
}

std::vector<Parameter<double>*> SlowModelParams::all() { return {&beta, &attn_V, &attn_w}; }
std::vector<const Parameter<double>*> SlowModelParams::all() const { return {&beta, &attn_V, &attn_w}; }

namespace {

template <typename Params>
SlowForward slow_forward_impl(Tape<double>& tape, const Bag& bag, Params& params, bool bind_params, Index k,
                              bool training, double dropout_rate, std::mt19937_64& rng) {
  if (k < 1) throw ArgumentError("slow_forward: k must be >= 1");
  if (bag.dim() != params.dim())
    throw DimensionError("slow_forward: bag " + bag.case_id + " has d=" + std::to_string(bag.dim()) +
                         ", model expects " + std::to_string(params.dim()));
  if (bag.size() < 1) throw DimensionError("slow_forward: empty bag " + bag.case_id);

  const Var<double> feats = tape.constant(bag.embeddings);
  const Var<double> risks = ad::linear(feats, bind(tape, params.beta, bind_params));
  SlowForward out;
  out.patch_log_risks = risks;
  out.truncated = k > bag.size();
  out.selected = top_k_indices(as_span(risks.value()), k);

  const Var<double> top_risks = ad::gather_rows(risks, out.selected);
  Matrix top_feats;
  Var<double> attn_in;
  if (params.input == AttentionInput::Embeddings) {
    top_feats.resize(static_cast<Index>(out.selected.size()), bag.dim());
    for (std::size_t r = 0; r < out.selected.size(); ++r) top_feats.row(r) = bag.embeddings.row(out.selected[r]);
    attn_in = tape.constant(std::move(top_feats));
  } else {
    attn_in = top_risks;
  }
  Var<double> hidden = ad::tanh(ad::linear(attn_in, bind(tape, params.attn_V, bind_params)));
  hidden = ad::dropout(hidden, dropout_rate, rng, training);
  const Var<double> scores = ad::linear(hidden, bind(tape, params.attn_w, bind_params));
  out.attention = ad::softmax_subset(scores, iota_indices(scores.rows()));
  out.bag_log_risk = ad::weighted_sum(out.attention, top_risks);
  return out;
}

}  // namespace

SlowForward slow_forward(Tape<double>& tape, const Bag& bag, SlowModelParams& params, bool bind_params, Index k,
                         bool training, double dropout_rate, std::mt19937_64& rng) {
  return slow_forward_impl(tape, bag, params, bind_params, k, training, dropout_rate, rng);
}

SlowOutput slow_forward(const Bag& bag, const SlowModelParams& params, Index k) {
  Tape<double> tape;
  std::mt19937_64 unused(0);
  auto fwd = slow_forward_impl(tape, bag, params, false, k, false, 0.0, unused);
  return {fwd.bag_log_risk.scalar(), fwd.selected, fwd.attention.value().col(0), fwd.patch_log_risks.value().col(0),
          fwd.truncated};
}

Var<double> cox_loss(std::span<const Var<double>> bag_log_risks, std::span<const SurvivalRecord> records,
                     CoxLoss* details) {
  const Var<double> stacked = ad::stack(bag_log_risks);
  CoxLoss c = cox_neg_log_partial_likelihood(as_span(stacked.value()), records);
  Var<double> loss = ad::attach_loss(stacked, c.value, Matrix(c.grad));
  if (details) *details = std::move(c);
  return loss;
}

// ---------------------------------------------------------------------------

std::vector<AttentionRecord> export_attention(const Bag& bag, const SlowOutput& out) {
  if (out.patch_log_risks.size() != bag.size())
    throw DimensionError("export_attention: output does not belong to bag " + bag.case_id);
  std::vector<AttentionRecord> rows(static_cast<std::size_t>(bag.size()));
  for (Index i = 0; i < bag.size(); ++i) rows[i] = {bag.case_id, bag.coords[i], out.patch_log_risks(i), 0.0, false};
  for (std::size_t j = 0; j < out.selected.size(); ++j) {
    auto& r = rows[static_cast<std::size_t>(out.selected[j])];
    r.attention = out.attention(static_cast<Index>(j));
    r.selected = true;
  }
  return rows;
}

static constexpr const char* kAttentionHeader = "case_id,x,y,level,log_risk,attention,selected";

void write_attention_csv(std::ostream& os, std::span<const AttentionRecord> rows) {
  os << kAttentionHeader << '\n';
  for (const auto& r : rows)
    os << r.case_id << ',' << r.coord.x << ',' << r.coord.y << ',' << r.coord.level << ',' << csv::sig9(r.log_risk)
       << ',' << csv::sig9(r.attention) << ',' << (r.selected ? 1 : 0) << '\n';
}

std::vector<AttentionRecord> read_attention_csv(std::istream& is) {
  csv::expect_header(is, kAttentionHeader, "attention csv");
  std::vector<AttentionRecord> rows;
  std::string line;
  while (csv::next_line(is, line)) {
    const auto f = csv::split(line);
    if (f.size() != 7) throw ValidationError("attention csv: expected 7 fields in '" + line + "'");
    AttentionRecord r;
    r.case_id = f[0];
    r.coord = {csv::to_int<std::int32_t>(f[1], "x"), csv::to_int<std::int32_t>(f[2], "y"),
               csv::to_int<std::int32_t>(f[3], "level")};
    r.log_risk = csv::to_double(f[4], "log_risk");
    r.attention = csv::to_double(f[5], "attention");
    const int sel = csv::to_int<int>(f[6], "selected");
    if (sel != 0 && sel != 1) throw ValidationError("attention csv: selected must be 0 or 1");
    r.selected = sel == 1;
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------

namespace {

json tensor_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix tensor_from_json(const json& j, const std::string& name) {
  const auto rows = j.at("rows").get<Index>();
  const auto cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols)
    throw ValidationError("weights: tensor " + name + " has inconsistent shape");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  if (!m.allFinite()) throw NumericError("weights: tensor " + name + " is not finite");
  return m;
}

template <typename Params>
json params_json(const Params& p, const char* kind) {
  json j;
  j["kind"] = kind;
  for (const auto* t : p.all()) j["tensors"][t->name] = tensor_json(t->value);
  return j;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

template <typename Params>
void fill_params(Params& p, const json& j, const char* kind, const std::string& path) {
  if (j.value("kind", "") != kind) throw ValidationError(path + ": not a " + std::string(kind) + " weight file");
  for (auto* t : p.all()) {
    if (!j.at("tensors").contains(t->name)) throw ValidationError(path + ": missing tensor " + t->name);
    t->value = tensor_from_json(j["tensors"][t->name], t->name);
    t->zero_grad();
  }
}

}  // namespace

void save_params(const FastModelParams& p, const std::string& path) { write_json(params_json(p, "fast"), path); }

void save_params(const SlowModelParams& p, const std::string& path) {
  json j = params_json(p, "slow");
  j["attention_input"] = to_string(p.input);
  write_json(j, path);
}

FastModelParams load_fast_params(const std::string& path) {
  const json j = read_json(path);
  FastModelParams p = FastModelParams::init(1, 1, 0);
  try {
    fill_params(p, j, "fast", path);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
  const Index d = p.dim(), h = p.hidden();
  if (p.attn_U.value.rows() != d || p.attn_U.value.cols() != h || p.attn_w.value.rows() != h ||
      p.classifier.value.rows() != d || p.instance.value.rows() != d)
    throw ValidationError(path + ": inconsistent fast-model shapes");
  return p;
}

SlowModelParams load_slow_params(const std::string& path) {
  const json j = read_json(path);
  SlowModelParams p = SlowModelParams::init(1, 1, AttentionInput::Embeddings, 0);
  try {
    fill_params(p, j, "slow", path);
    p.input = attention_input_from_string(j.value("attention_input", "embeddings"));
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
  const Index expected_in = p.input == AttentionInput::Embeddings ? p.dim() : 1;
  if (p.beta.value.cols() != 1 || p.attn_V.value.rows() != expected_in || p.attn_w.value.rows() != p.attn_V.value.cols())
    throw ValidationError(path + ": inconsistent slow-model shapes");
  return p;
}

}  // namespace bcr
