#include "bcr/cli.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <unordered_map>

#include <CLI11.hpp>
#include <json.hpp>

#include "bcr/config.hpp"
#include "bcr/gradcheck_suite.hpp"
#include "bcr/harness.hpp"
#include "bcr/parallel.hpp"
#include "csv_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bcr {

std::string mask_file_name(double m_percent) { return "masks_m" + csv::exact(m_percent) + ".csv"; }

namespace {

json nan_safe(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

json nan_safe(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(nan_safe(x));
  return a;
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "Run config (JSON or key = value)");
  sub->add_option("--seed", c.seed, "Seed for every random choice (overrides the config)");
  sub->add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
}

class Context {
 public:
  Context(std::string command, const Common& common, std::ostream& log) : command_(std::move(command)), log_(log) {
    if (!common.config_path.empty()) config = load_run_config(fs::absolute(common.config_path));
    if (common.seed) config.seed = *common.seed;
    config.validate();
    workers = common.workers;
  }

  RunConfig config;
  std::size_t workers = 1;
  json args = json::object();
  std::vector<std::string> outputs;

  void log(const std::string& event, json fields = json::object()) {
    fields["event"] = event;
    fields["command"] = command_;
    log_ << fields.dump() << '\n';
  }

  void output(const fs::path& path) {
    outputs.push_back(path.filename().string());
    log("wrote", {{"path", path.string()}});
  }

  // Sidecar recording the effective config and its hash.
  void write_sidecar(const fs::path& dir) {
    std::sort(outputs.begin(), outputs.end());
    json cfg = json::object();
    std::istringstream lines(config.canonical());
    std::string line;
    while (std::getline(lines, line)) {
      const auto eq = line.find('=');
      cfg[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const json j{{"command", command_}, {"config_hash", config.hash()}, {"config", cfg}, {"args", args},
                 {"outputs", outputs}};
    const fs::path path = dir / "run.json";
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(1) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
  }

 private:
  std::string command_;
  std::ostream& log_;
};

fs::path prepare_dir(const std::string& dir) {
  const fs::path p = fs::absolute(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
  return p;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

template <typename Fn>
void write_text(const fs::path& path, Fn&& fn) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  fn(out);
  if (!out) throw IoError("write failed: " + path.string());
}

Dataset load_cohort(const std::string& manifest_path, const std::string& geometry_path) {
  const fs::path manifest = fs::absolute(manifest_path);
  fs::path geometry = geometry_path.empty() ? manifest.parent_path() / "geometry.json" : fs::absolute(geometry_path);
  const GridGeometry g = (geometry_path.empty() && !fs::exists(geometry)) ? GridGeometry{} : load_geometry(geometry);
  return load_dataset(load_manifest(manifest), g);
}

std::unordered_map<std::string, const PatchMask*> index_masks(const std::vector<PatchMask>& masks) {
  std::unordered_map<std::string, const PatchMask*> out;
  for (const auto& m : masks)
    if (!out.emplace(m.case_id, &m).second) throw ValidationError("masks: duplicate case id " + m.case_id);
  return out;
}

// High-resolution bags of every case, masked when masks are given.
std::vector<Bag> masked_bags(const Dataset& data, const std::vector<PatchMask>* masks) {
  std::vector<Bag> out;
  if (!masks) {
    for (const auto& c : data.cases) out.push_back(c.high);
    return out;
  }
  const auto by_id = index_masks(*masks);
  for (const auto& c : data.cases) {
    auto it = by_id.find(c.record.case_id);
    if (it == by_id.end()) throw ValidationError("masks: no mask for case " + c.record.case_id);
    out.push_back(apply_mask(c.high, *it->second, data.geometry));
  }
  return out;
}

json slow_report(const SlowTrainResult& r) {
  json j{{"selected_epoch", r.selected_epoch}, {"min_epoch", r.min_epoch}};
  if (r.train_loss.size() >= 5 && std::none_of(r.train_loss.begin(), r.train_loss.end(), [](double v) { return std::isnan(v); }))
    j["min_epoch_rule"] = min_epoch_rule(r.train_loss);
  return j;
}

void write_curves(const fs::path& path, const SlowTrainResult& r) {
  write_text(path, [&](std::ostream& os) {
    os << "epoch,train_loss,val_loss\n";
    for (std::size_t e = 0; e < r.train_loss.size(); ++e)
      os << e << ',' << (std::isnan(r.train_loss[e]) ? "" : csv::exact(r.train_loss[e])) << ','
         << (std::isnan(r.val_loss[e]) ? "" : csv::exact(r.val_loss[e])) << '\n';
  });
}

std::string fold_name(std::size_t f) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fold_%02zu", f);
  return buf;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  SyntheticSpec spec;
};

void cmd_synth(Context& ctx, SynthArgs& a) {
  SyntheticSpec spec = a.spec;
  spec.seed = ctx.config.seed;
  spec.validate();
  const fs::path dir = prepare_dir(a.out);
  const SyntheticDataset ds = generate_synthetic(spec);
  write_synthetic(ds, dir);
  // Read back what was written.
  const Dataset check = load_cohort((dir / "manifest.csv").string(), "");
  if (check.cases.size() != spec.n_cases) throw ValidationError("synth: manifest does not list every case");
  std::size_t censored = 0;
  for (const auto& c : check.cases) censored += c.record.event == 0 ? 1 : 0;
  ctx.args = {{"cases", spec.n_cases},          {"dim", spec.dim},
              {"patches_min", spec.patches_min}, {"patches_max", spec.patches_max},
              {"hot_fraction", spec.hot_fraction}, {"censoring", spec.censoring_rate},
              {"severity_min", spec.severity_min}, {"severity_max", spec.severity_max},
              {"baseline_hazard", spec.baseline_hazard}, {"noise", spec.noise_std}};
  ctx.outputs = {"bags", "geometry.json", "ground_truth.csv", "manifest.csv"};
  ctx.log("synth", {{"cases", spec.n_cases}, {"censored", censored}, {"dir", dir.string()}});
  ctx.write_sidecar(dir);
}

struct TrainFastArgs {
  std::string manifest, geometry, out;
};

void cmd_train_fast(Context& ctx, TrainFastArgs& a) {
  const Dataset data = load_cohort(a.manifest, a.geometry);
  std::vector<std::string> test;
  for (const auto& c : data.cases)
    if (c.split == "test") test.push_back(c.record.case_id);
  const fs::path dir = prepare_dir(a.out);
  const FastTrainConfig cfg = ctx.config.fast(ctx.workers);
  const FastTrainResult r = train_fast(data, cfg, test.empty() ? nullptr : &test);

  json folds = json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"fold", f.fold}, {"best_epoch", f.best_epoch}, {"best_val_auc", nan_safe(f.best_val_auc)},
                     {"train_loss", nan_safe(f.train_loss)}, {"val_loss", nan_safe(f.val_loss)},
                     {"val_auc", nan_safe(f.val_auc)}});
    ctx.log("fast_fold", {{"fold", f.fold}, {"best_epoch", f.best_epoch}, {"best_val_auc", nan_safe(f.best_val_auc)}});
  }
  const fs::path weights = dir / "fast_weights.json";
  save_params(r.params, weights.string());
  load_fast_params(weights.string());
  ctx.output(weights);
  const fs::path report = dir / "fast_report.json";
  write_json(report, {{"test_auc", nan_safe(r.test_auc)}, {"best_fold", r.best_fold}, {"retained", r.retained},
                      {"excluded", r.excluded}, {"test_ids", r.test_ids}, {"folds", folds}});
  ctx.output(report);
  ctx.args = {{"manifest", a.manifest}};
  ctx.log("train_fast", {{"test_auc", nan_safe(r.test_auc)}, {"best_fold", r.best_fold}});
  ctx.write_sidecar(dir);
}

struct MakeMasksArgs {
  std::string manifest, geometry, weights, out;
  std::vector<double> ms;
};

void cmd_make_masks(Context& ctx, MakeMasksArgs& a) {
  const Dataset data = load_cohort(a.manifest, a.geometry);
  const FastModelParams params = load_fast_params(fs::absolute(a.weights).string());
  if (params.dim() != data.cases.front().low.dim())
    throw DimensionError("make-masks: weights expect d=" + std::to_string(params.dim()) + ", bags have d=" +
                         std::to_string(data.cases.front().low.dim()));
  std::vector<double> ms = a.ms.empty() ? std::vector<double>{ctx.config.m_percent} : a.ms;
  const fs::path dir = prepare_dir(a.out);
  for (double m : ms) {
    std::vector<PatchMask> masks;
    std::size_t degenerate = 0;
    for (const auto& c : data.cases) {
      masks.push_back(predict_mask(c.low, params, m));
      try {
        apply_mask(c.high, masks.back(), data.geometry);
      } catch (const DegenerateMaskError&) {
        ++degenerate;
      }
    }
    const fs::path path = dir / mask_file_name(m);
    write_masks_file(path, masks);
    if (read_masks_file(path, m).size() != masks.size()) throw ValidationError("make-masks: read-back mismatch");
    ctx.output(path);
    ctx.log("masks", {{"m_percent", m}, {"cases", masks.size()}, {"degenerate", degenerate}});
  }
  ctx.args = {{"manifest", a.manifest}, {"weights", a.weights}, {"m", ms}};
  ctx.write_sidecar(dir);
}

struct TrainSlowArgs {
  std::string manifest, geometry, masks, out;
  std::size_t cv_folds = 0;
};

void cmd_train_slow(Context& ctx, TrainSlowArgs& a) {
  const Dataset data = load_cohort(a.manifest, a.geometry);
  std::optional<std::vector<PatchMask>> masks;
  if (!a.masks.empty()) masks = read_masks_file(fs::absolute(a.masks), ctx.config.m_percent);
  const std::vector<Bag> bags = masked_bags(data, masks ? &*masks : nullptr);
  const SlowTrainConfig cfg = ctx.config.slow();
  const fs::path dir = prepare_dir(a.out);

  auto batch_of = [&](const std::vector<std::size_t>& idx) {
    SurvivalBatch b;
    for (std::size_t i : idx) {
      b.bags.push_back(&bags[i]);
      b.records.push_back(data.cases[i].record);
    }
    return b;
  };

  std::vector<std::size_t> train, val, pool;
  for (std::size_t i = 0; i < data.cases.size(); ++i) {
    const std::string& split = data.cases[i].split;
    if (split == "test") continue;
    pool.push_back(i);
    (split == "val" ? val : train).push_back(i);
  }

  if (a.cv_folds == 0) {
    const SlowTrainResult r = train_slow(batch_of(train), batch_of(val), cfg);
    const fs::path weights = dir / "slow_weights.json";
    save_params(r.params, weights.string());
    load_slow_params(weights.string());
    ctx.output(weights);
    write_curves(dir / "loss_curves.csv", r);
    ctx.output(dir / "loss_curves.csv");
    write_json(dir / "slow_report.json", slow_report(r));
    ctx.output(dir / "slow_report.json");
    ctx.log("train_slow", slow_report(r));
  } else {
    if (a.cv_folds < 2) throw ArgumentError("train-slow: --cv-folds must be >= 2");
    std::vector<std::string> ids;
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i : pool) {
      ids.push_back(data.cases[i].record.case_id);
      index.emplace(ids.back(), i);
    }
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), std::mt19937_64(derive_seed(ctx.config.seed, {0xC5, a.cv_folds})));
    const auto folds = partition(ids, a.cv_folds);
    std::vector<SlowTrainResult> results(folds.size());
    parallel_for(folds.size(), ctx.workers, [&](std::size_t f) {
      std::vector<std::size_t> tr, va;
      for (std::size_t g = 0; g < folds.size(); ++g)
        for (const auto& id : folds[g]) (g == f ? va : tr).push_back(index.at(id));
      SlowTrainConfig fcfg = cfg;
      fcfg.seed = derive_seed(cfg.seed, {f});
      results[f] = train_slow(batch_of(tr), batch_of(va), fcfg);
    });
    json report = json::array();
    for (std::size_t f = 0; f < results.size(); ++f) {
      const fs::path weights = dir / (fold_name(f) + ".json");
      save_params(results[f].params, weights.string());
      load_slow_params(weights.string());
      ctx.output(weights);
      const fs::path curves = dir / ("loss_curves_" + fold_name(f) + ".csv");
      write_curves(curves, results[f]);
      ctx.output(curves);
      json fr = slow_report(results[f]);
      fr["fold"] = f;
      ctx.log("slow_fold", fr);
      report.push_back(fr);
    }
    write_json(dir / "slow_report.json", report);
    ctx.output(dir / "slow_report.json");
  }
  ctx.args = {{"manifest", a.manifest}, {"masks", a.masks}, {"cv_folds", a.cv_folds}};
  ctx.write_sidecar(dir);
}

struct NestedCvArgs {
  std::string manifest, geometry, masks_dir, out;
  std::vector<Index> ks{5, 10, 15, 20, 30, 40, 50};
  std::vector<double> ms{5, 10, 15, 20, 25, 30, 35, 40};
};

void cmd_nested_cv(Context& ctx, NestedCvArgs& a) {
  const Dataset data = load_cohort(a.manifest, a.geometry);
  const fs::path masks_dir = fs::absolute(a.masks_dir);
  std::map<double, MaskedCohort> cohorts;
  for (double m : a.ms) {
    MaskedCohort c;
    try {
      const auto masks = read_masks_file(masks_dir / mask_file_name(m), m);
      c.bags = masked_bags(data, &masks);
    } catch (const Error& e) {
      c.error = e.kind() + ": " + e.what();
      ctx.log("cohort_failed", {{"m_percent", m}, {"error", c.error}});
    }
    cohorts.emplace(m, std::move(c));
  }
  GridConfig gcfg;
  gcfg.ks = a.ks;
  gcfg.ms = a.ms;
  gcfg.slow = ctx.config.slow();
  gcfg.seed = ctx.config.seed;
  gcfg.workers = ctx.workers;
  std::vector<RunLog> logs;
  const GridResult grid = run_grid(data.records(), cohorts, gcfg, &logs);

  const fs::path dir = prepare_dir(a.out);
  write_text(dir / "grid.csv", [&](std::ostream& os) { write_grid_report(os, grid); });
  ctx.output(dir / "grid.csv");
  save_grid_result(grid, dir / "grid.json");
  load_grid_result(dir / "grid.json");
  ctx.output(dir / "grid.json");
  write_text(dir / "runs.jsonl", [&](std::ostream& os) {
    for (const auto& l : logs) write_run_log(os, l);
  });
  ctx.output(dir / "runs.jsonl");
  json summary{{"summary", grid_summary(grid)}};
  if (const auto b = grid.best()) {
    summary["best_top_k"] = grid.cells[*b].top_k;
    summary["best_m_percent"] = grid.cells[*b].m_percent;
  }
  ctx.log("nested_cv", summary);
  ctx.args = {{"manifest", a.manifest}, {"masks_dir", a.masks_dir}, {"ks", a.ks}, {"ms", a.ms}};
  ctx.write_sidecar(dir);
}

struct PredictArgs {
  std::string manifest, geometry, weights_dir, masks, out, attention_out, split;
  std::optional<Index> k;
};

void cmd_predict(Context& ctx, PredictArgs& a) {
  const Dataset data = load_cohort(a.manifest, a.geometry);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(fs::absolute(a.weights_dir))) {
    const std::string name = entry.path().filename().string();
    if (entry.path().extension() == ".json" && (name.rfind("fold_", 0) == 0 || name == "slow_weights.json"))
      files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("predict: no fold weights in " + a.weights_dir);
  std::vector<SlowModelParams> folds;
  for (const auto& f : files) folds.push_back(load_slow_params(f.string()));

  std::optional<std::vector<PatchMask>> masks;
  if (!a.masks.empty()) masks = read_masks_file(fs::absolute(a.masks), ctx.config.m_percent);
  const std::vector<Bag> bags = masked_bags(data, masks ? &*masks : nullptr);
  const Index k = a.k.value_or(ctx.config.top_k);

  std::vector<EnsemblePrediction> preds;
  std::vector<AttentionRecord> attention;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (!a.split.empty() && data.cases[i].split != a.split) continue;
    preds.push_back(ensemble_predict(bags[i], folds, k));
    if (!a.attention_out.empty()) {
      const auto rows = export_attention(bags[i], slow_forward(bags[i], folds.front(), k));
      attention.insert(attention.end(), rows.begin(), rows.end());
    }
  }
  const fs::path dir = prepare_dir(a.out);
  write_text(dir / "predictions.csv", [&](std::ostream& os) { write_predictions_csv(os, preds); });
  ctx.output(dir / "predictions.csv");
  if (!a.attention_out.empty()) {
    const fs::path path = fs::absolute(a.attention_out);
    write_text(path, [&](std::ostream& os) { write_attention_csv(os, attention); });
    std::ifstream in(path);
    if (read_attention_csv(in).size() != attention.size()) throw ValidationError("predict: attention read-back mismatch");
    ctx.output(path);
  }
  json fold_names = json::array();
  for (const auto& f : files) fold_names.push_back(f.filename().string());
  ctx.args = {{"manifest", a.manifest}, {"folds", fold_names}, {"k", k}, {"masks", a.masks}, {"split", a.split}};
  ctx.log("predict", {{"cases", preds.size()}, {"folds", folds.size()}});
  ctx.write_sidecar(dir);
}

struct GradcheckArgs {
  std::size_t trials = 10;
  std::string out;
};

int cmd_gradcheck(Context& ctx, GradcheckArgs& a) {
  const auto entries = run_gradcheck_suite(a.trials, ctx.config.seed);
  json report = json::array();
  bool ok = true;
  for (const auto& e : entries) {
    const bool pass = e.report.pass_fraction() >= 0.99;
    ok = ok && pass;
    json j{{"name", e.name}, {"checked", e.report.checked}, {"failed", e.report.failures.size()}, {"pass", pass}};
    ctx.log("gradcheck", j);
    report.push_back(j);
  }
  if (!a.out.empty()) {
    const fs::path dir = prepare_dir(a.out);
    write_json(dir / "gradcheck.json", report);
    ctx.output(dir / "gradcheck.json");
    ctx.args = {{"trials", a.trials}};
    ctx.write_sidecar(dir);
  }
  return ok ? 0 : 1;
}

void error_line(std::ostream& log, const std::string& kind, const std::string& message) {
  log << json{{"event", "error"}, {"kind", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& log) {
  CLI::App app{"Two-stage multiple-instance survival pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "bcrmil 1.0");

  Common common;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic cohort with a planted signal");
  add_common(s, common);
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--cases", synth.spec.n_cases, "Number of cases");
  s->add_option("--dim", synth.spec.dim, "Embedding width");
  s->add_option("--patches-min", synth.spec.patches_min, "Fewest low-resolution patches per bag");
  s->add_option("--patches-max", synth.spec.patches_max, "Most low-resolution patches per bag");
  s->add_option("--hot-fraction", synth.spec.hot_fraction, "Fraction of hot patches");
  s->add_option("--censoring", synth.spec.censoring_rate, "Target censored fraction");
  s->add_option("--severity-min", synth.spec.severity_min, "Lower bound of the true log risk");
  s->add_option("--severity-max", synth.spec.severity_max, "Upper bound of the true log risk");
  s->add_option("--baseline-hazard", synth.spec.baseline_hazard, "Baseline event rate per year");
  s->add_option("--noise", synth.spec.noise_std, "Embedding noise standard deviation");

  TrainFastArgs tf;
  auto* f = app.add_subcommand("train-fast", "Train the low-resolution attention classifier");
  add_common(f, common);
  f->add_option("--manifest", tf.manifest, "Manifest CSV")->required();
  f->add_option("--geometry", tf.geometry, "Grid geometry JSON (default: next to the manifest)");
  f->add_option("--out", tf.out, "Output directory")->required();

  MakeMasksArgs mm;
  auto* m = app.add_subcommand("make-masks", "Turn fast-stage attention into patch masks");
  add_common(m, common);
  m->add_option("--manifest", mm.manifest, "Manifest CSV")->required();
  m->add_option("--geometry", mm.geometry, "Grid geometry JSON");
  m->add_option("--fast-weights", mm.weights, "Fast-stage weights JSON")->required();
  m->add_option("--m", mm.ms, "Mask percentages (default: config m_percent)")->delimiter(',');
  m->add_option("--out", mm.out, "Output directory")->required();

  TrainSlowArgs ts;
  auto* t = app.add_subcommand("train-slow", "Train the high-resolution Cox model");
  add_common(t, common);
  t->add_option("--manifest", ts.manifest, "Manifest CSV")->required();
  t->add_option("--geometry", ts.geometry, "Grid geometry JSON");
  t->add_option("--masks", ts.masks, "Mask CSV (default: unmasked high-resolution bags)");
  t->add_option("--cv-folds", ts.cv_folds, "Train one model per fold of an N-fold split");
  t->add_option("--out", ts.out, "Output directory")->required();

  NestedCvArgs nc;
  auto* n = app.add_subcommand("nested-cv", "Grid search over top_k and m under nested 5x5 cross-validation");
  add_common(n, common);
  n->add_option("--manifest", nc.manifest, "Manifest CSV")->required();
  n->add_option("--geometry", nc.geometry, "Grid geometry JSON");
  n->add_option("--masks-dir", nc.masks_dir, "Directory with one mask file per m")->required();
  n->add_option("--ks", nc.ks, "top_k values")->delimiter(',');
  n->add_option("--ms", nc.ms, "m values")->delimiter(',');
  n->add_option("--out", nc.out, "Output directory")->required();

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Ensemble prediction of log risk and time to recurrence");
  add_common(p, common);
  p->add_option("--manifest", pr.manifest, "Manifest CSV")->required();
  p->add_option("--geometry", pr.geometry, "Grid geometry JSON");
  p->add_option("--weights-dir", pr.weights_dir, "Directory with fold_*.json or slow_weights.json")->required();
  p->add_option("--masks", pr.masks, "Mask CSV");
  p->add_option("--k", pr.k, "top_k (default: config top_k)");
  p->add_option("--split", pr.split, "Only predict cases of this split");
  p->add_option("--attention-out", pr.attention_out, "Attention export CSV");
  p->add_option("--out", pr.out, "Output directory")->required();

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  add_common(g, common);
  g->add_option("--trials", gc.trials, "Random instances per op");
  g->add_option("--out", gc.out, "Optional report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_line(log, "UsageError", e.what());
    return 1;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    Context ctx(sub->get_name(), common, log);
    const std::string name = sub->get_name();
    if (name == "synth") cmd_synth(ctx, synth);
    else if (name == "train-fast") cmd_train_fast(ctx, tf);
    else if (name == "make-masks") cmd_make_masks(ctx, mm);
    else if (name == "train-slow") cmd_train_slow(ctx, ts);
    else if (name == "nested-cv") cmd_nested_cv(ctx, nc);
    else if (name == "predict") cmd_predict(ctx, pr);
    else if (name == "gradcheck") return cmd_gradcheck(ctx, gc);
    return 0;
  } catch (const Error& e) {
    error_line(log, e.kind(), e.what());
  } catch (const fs::filesystem_error& e) {
    error_line(log, "IoError", e.what());
  } catch (const std::exception& e) {
    error_line(log, "InternalError", e.what());
  }
  return 1;
}

}  // namespace bcr
