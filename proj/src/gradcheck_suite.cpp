#include "bcr/gradcheck_suite.hpp"

#include <functional>
#include <random>

#include "bcr/mil_models.hpp"
#include "bcr/parallel.hpp"

namespace bcr {

namespace {

using Var = ad::Var<double>;
using Tape = ad::Tape<double>;
using Param = ad::Parameter<double>;

Matrix random_matrix(std::mt19937_64& rng, Index r, Index c, double scale = 1.0) {
  std::normal_distribution<double> N(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = N(rng);
  return m;
}

Index draw(std::mt19937_64& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

// Reduces any node to a scalar through fixed random weights.
Var probe(const Var& out, const Matrix& weights) {
  return ad::sum(ad::hadamard(out, out.tape().constant(weights)));
}

std::vector<SurvivalRecord> random_records(std::mt19937_64& rng, std::size_t n) {
  std::vector<SurvivalRecord> recs(n);
  std::uniform_int_distribution<int> half_years(1, 10);
  for (std::size_t i = 0; i < n; ++i) {
    // Coarse times so ties occur.
    recs[i] = {"c" + std::to_string(i), std::bernoulli_distribution(0.6)(rng) ? 1 : 0, 0.5 * half_years(rng)};
  }
  recs[0].event = 1;
  return recs;
}

Bag random_bag(std::mt19937_64& rng, Index n, Index d, const std::string& id) {
  Bag b;
  b.case_id = id;
  b.embeddings = random_matrix(rng, n, d);
  for (Index i = 0; i < n; ++i) b.coords.push_back({static_cast<std::int32_t>(i), 0, 0});
  b.resolution_mpp = 0.25;
  return b;
}

void merge(ad::GradCheckReport& into, const ad::GradCheckReport& r) {
  into.checked += r.checked;
  into.failures.insert(into.failures.end(), r.failures.begin(), r.failures.end());
}

struct Case {
  std::string name;
  std::function<ad::GradCheckReport(std::mt19937_64&, const ad::GradCheckOptions&)> run;
};

template <typename Body>
ad::GradCheckReport run_case(std::vector<Param> params, Body body, const ad::GradCheckOptions& opts) {
  std::vector<Param*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  const ad::LossBuilder<double> build = [&](Tape& tape) {
    std::vector<Var> v;
    for (auto* p : ptrs) v.push_back(tape.parameter(*p));
    return body(tape, v);
  };
  return ad::grad_check<double>(build, ptrs, opts);
}

std::vector<Case> primitive_cases() {
  std::vector<Case> cases;
  auto add = [&](std::string name, auto fn) { cases.push_back({std::move(name), fn}); };

  add("linear", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const Index n = draw(rng, 1, 5), d = draw(rng, 1, 5), h = draw(rng, 1, 4);
    const Matrix C = random_matrix(rng, n, h);
    return run_case({{"x", random_matrix(rng, n, d)}, {"W", random_matrix(rng, d, h)}, {"b", random_matrix(rng, 1, h)}},
                    [&](Tape&, std::vector<Var>& v) { return probe(ad::linear(v[0], v[1], v[2]), C); }, o);
  });
  add("tanh", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const Index n = draw(rng, 1, 5), d = draw(rng, 1, 5);
    const Matrix C = random_matrix(rng, n, d);
    return run_case({{"x", random_matrix(rng, n, d)}}, [&](Tape&, std::vector<Var>& v) { return probe(ad::tanh(v[0]), C); },
                    o);
  });
  add("sigmoid", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const Index n = draw(rng, 1, 5), d = draw(rng, 1, 5);
    const Matrix C = random_matrix(rng, n, d);
    return run_case({{"x", random_matrix(rng, n, d)}},
                    [&](Tape&, std::vector<Var>& v) { return probe(ad::sigmoid(v[0]), C); }, o);
  });
  add("hadamard_add_sub_scale", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const Index n = draw(rng, 1, 5), d = draw(rng, 1, 5);
    const Matrix C = random_matrix(rng, n, d);
    return run_case({{"a", random_matrix(rng, n, d)}, {"b", random_matrix(rng, n, d)}},
                    [&](Tape&, std::vector<Var>& v) {
                      return probe(ad::hadamard(v[0], v[1]) + 0.5 * (v[0] - v[1]), C);
                    },
                    o);
  });
  add("mean_gather", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const Index n = draw(rng, 2, 6), d = draw(rng, 1, 4);
    std::vector<Index> rows{n - 1, 0, n - 1};
    const Matrix C = random_matrix(rng, 3, d);
    return run_case({{"x", random_matrix(rng, n, d)}},
                    [&](Tape&, std::vector<Var>& v) {
                      auto g = ad::gather_rows(v[0], rows);
                      return ad::mean(ad::hadamard(g, g)) + probe(g, C);
                    },
                    o);
  });
  add("softmax_subset", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const Index n = draw(rng, 2, 8);
    std::vector<Index> subset;
    for (Index i = 0; i < n; ++i)
      if (i == 0 || std::bernoulli_distribution(0.6)(rng)) subset.push_back(i);
    const Matrix C = random_matrix(rng, static_cast<Index>(subset.size()), 1);
    return run_case({{"s", random_matrix(rng, n, 1, 2.0)}},
                    [&](Tape&, std::vector<Var>& v) { return probe(ad::softmax_subset(v[0], subset), C); }, o);
  });
  add("weighted_sum", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const Index k = draw(rng, 1, 5), m = draw(rng, 1, 4);
    const Matrix C = random_matrix(rng, 1, m);
    return run_case({{"w", random_matrix(rng, k, 1)}, {"V", random_matrix(rng, k, m)}},
                    [&](Tape&, std::vector<Var>& v) { return probe(ad::weighted_sum(v[0], v[1]), C); }, o);
  });
  add("log_sum_exp_pick", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const Index n = draw(rng, 1, 5), c = draw(rng, 2, 4);
    std::vector<Index> cols;
    for (Index i = 0; i < n; ++i) cols.push_back(draw(rng, 0, c - 1));
    return run_case({{"x", random_matrix(rng, n, c, 2.0)}},
                    [&](Tape&, std::vector<Var>& v) {
                      return ad::sum(ad::log_sum_exp_rows(v[0]) - ad::pick(v[0], cols));
                    },
                    o);
  });
  add("cox_loss", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const std::size_t n = static_cast<std::size_t>(draw(rng, 2, 8));
    const auto recs = random_records(rng, n);
    return run_case({{"h", random_matrix(rng, static_cast<Index>(n), 1)}},
                    [&](Tape&, std::vector<Var>& v) {
                      std::vector<Var> items;
                      for (std::size_t i = 0; i < n; ++i) items.push_back(ad::gather_rows(v[0], {static_cast<Index>(i)}));
                      return cox_loss(items, recs);
                    },
                    o);
  });
  add("fast_loss", [](std::mt19937_64& rng, const ad::GradCheckOptions& o) {
    const Index n = draw(rng, 2, 8), d = draw(rng, 2, 6), h = draw(rng, 2, 4);
    const Bag bag = random_bag(rng, n, d, "b");
    FastModelParams params = FastModelParams::init(d, h, rng());
    const int label = static_cast<int>(rng() % 2);
    const FastLossConfig cfg{0.3, 2};
    std::mt19937_64 unused(0);
    const ad::LossBuilder<double> build = [&](Tape& tape) {
      auto fwd = fast_forward(tape, bag, params, true, false, 0.0, unused);
      return fast_loss(fwd, label, params, true, cfg);
    };
    auto ptrs = params.all();
    return ad::grad_check<double>(build, ptrs, o);
  });
  return cases;
}

}  // namespace

ad::GradCheckReport slow_stage_gradcheck(std::uint64_t seed, const ad::GradCheckOptions& opts) {
  std::mt19937_64 rng(seed);
  const Index d = draw(rng, 1, 6), h = draw(rng, 1, 4), k = draw(rng, 1, 4);
  const std::size_t n_bags = static_cast<std::size_t>(draw(rng, 2, 6));
  const AttentionInput input = (rng() % 2) ? AttentionInput::Embeddings : AttentionInput::Risks;
  std::vector<Bag> bags;
  for (std::size_t b = 0; b < n_bags; ++b) bags.push_back(random_bag(rng, draw(rng, 1, 8), d, "b" + std::to_string(b)));
  const auto recs = random_records(rng, n_bags);
  SlowModelParams params = SlowModelParams::init(d, h, input, rng());
  // Wider initial weights so the attention is far from uniform.
  params.attn_V.value *= 2.0;
  params.attn_w.value *= 2.0;
  std::mt19937_64 unused(0);
  const ad::LossBuilder<double> build = [&](Tape& tape) {
    std::vector<Var> risks;
    for (const auto& b : bags) risks.push_back(slow_forward(tape, b, params, true, k, false, 0.0, unused).bag_log_risk);
    return cox_loss(risks, recs);
  };
  auto ptrs = params.all();
  return ad::grad_check<double>(build, ptrs, opts);
}

std::vector<GradSuiteEntry> run_gradcheck_suite(std::size_t trials, std::uint64_t seed,
                                                const ad::GradCheckOptions& opts) {
  std::vector<GradSuiteEntry> out;
  std::uint64_t tag = 0;
  for (const auto& c : primitive_cases()) {
    GradSuiteEntry e{c.name, {}};
    for (std::size_t t = 0; t < trials; ++t) {
      std::mt19937_64 rng(derive_seed(seed, {tag, t}));
      merge(e.report, c.run(rng, opts));
    }
    out.push_back(std::move(e));
    ++tag;
  }
  GradSuiteEntry slow{"slow_stage_cox", {}};
  for (std::size_t t = 0; t < trials; ++t) merge(slow.report, slow_stage_gradcheck(derive_seed(seed, {tag, t}), opts));
  out.push_back(std::move(slow));
  return out;
}

}  // namespace bcr
