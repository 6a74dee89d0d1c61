#include "bcr/datasets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "csv_util.hpp"

namespace bcr {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kHeaderFixed = 4 + 2 + 4 + 4;

class ByteWriter {
 public:
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v), 4); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const char* s, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<std::byte>(s[i]));
  }
  std::vector<std::byte> out;

 private:
  void put(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
  }
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> b) : bytes_(b) {}
  std::uint64_t offset() const { return pos_; }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::int32_t i32() { return static_cast<std::int32_t>(static_cast<std::uint32_t>(get(4))); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(get(4))); }
  double f64() { return std::bit_cast<double>(get(8)); }

 private:
  std::uint64_t get(int n) {
    if (pos_ + static_cast<std::uint64_t>(n) > bytes_.size()) throw FormatError(pos_, "bag store: unexpected end of data");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::uint64_t>(n);
    return v;
  }
  std::span<const std::byte> bytes_;
  std::uint64_t pos_ = 0;
};

}  // namespace

std::vector<std::byte> encode_bag(const Bag& bag) {
  bag.validate();
  if (bag.dim() < 1) throw ValidationError("bag " + bag.case_id + ": dimension must be >= 1");
  if (bag.size() > std::numeric_limits<std::uint32_t>::max() || bag.dim() > std::numeric_limits<std::uint32_t>::max())
    throw ValidationError("bag " + bag.case_id + ": too large for the bag store");
  ByteWriter w;
  w.out.reserve(kHeaderFixed + 12 * bag.coords.size() + 8 + 4 * static_cast<std::size_t>(bag.embeddings.size()));
  w.raw("MILB", 4);
  w.u16(kBagStoreVersion);
  w.u32(static_cast<std::uint32_t>(bag.dim()));
  w.u32(static_cast<std::uint32_t>(bag.size()));
  for (const auto& c : bag.coords) {
    w.i32(c.x);
    w.i32(c.y);
    w.i32(c.level);
  }
  w.f64(bag.resolution_mpp);
  for (Index r = 0; r < bag.size(); ++r)
    for (Index c = 0; c < bag.dim(); ++c) w.f32(static_cast<float>(bag.embeddings(r, c)));
  return std::move(w.out);
}

Bag decode_bag(std::span<const std::byte> bytes, const std::string& case_id) {
  if (bytes.size() < 4) throw FormatError(bytes.size(), "bag store: truncated header, expected magic 'MILB'");
  const char magic[4] = {'M', 'I', 'L', 'B'};
  for (std::size_t i = 0; i < 4; ++i)
    if (std::to_integer<char>(bytes[i]) != magic[i]) throw FormatError(i, "bag store: bad magic, expected 'MILB'");
  ByteReader r(bytes.subspan(4));
  const std::uint16_t version = r.u16();
  if (version != kBagStoreVersion)
    throw FormatError(4, "bag store: unsupported version " + std::to_string(version));
  const std::uint32_t d = r.u32();
  const std::uint32_t n = r.u32();
  if (d == 0) throw FormatError(6, "bag store: embedding dimension is zero");
  if (n == 0) throw FormatError(10, "bag store: bag has no patches");
  const std::uint64_t expected = kHeaderFixed + 12ull * n + 8ull + 4ull * n * d;
  if (bytes.size() < expected)
    throw FormatError(bytes.size(), "bag store: truncated, expected " + std::to_string(expected) + " bytes");
  if (bytes.size() > expected) throw FormatError(expected, "bag store: trailing bytes after payload");

  Bag bag;
  bag.case_id = case_id;
  bag.coords.resize(n);
  for (auto& c : bag.coords) {
    c.x = r.i32();
    c.y = r.i32();
    c.level = r.i32();
  }
  const std::uint64_t mpp_at = 4 + r.offset();
  bag.resolution_mpp = r.f64();
  if (!(bag.resolution_mpp > 0.0) || !std::isfinite(bag.resolution_mpp))
    throw FormatError(mpp_at, "bag store: resolution_mpp must be positive");
  bag.embeddings.resize(n, d);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < d; ++j) {
      const std::uint64_t at = 4 + r.offset();
      const float v = r.f32();
      if (!std::isfinite(v)) throw FormatError(at, "bag store: non-finite embedding value");
      bag.embeddings(i, j) = v;
    }
  return bag;
}

void save_bag(const Bag& bag, const fs::path& path) {
  const auto bytes = encode_bag(bag);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Bag load_bag(const fs::path& path, const std::string& case_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  std::transform(raw.begin(), raw.end(), bytes.begin(), [](char c) { return static_cast<std::byte>(c); });
  try {
    return decode_bag(bytes, case_id);
  } catch (const FormatError& e) {
    throw FormatError(e.offset(), path.string() + ": " + e.detail());
  }
}

// ---------------------------------------------------------------------------

static constexpr const char* kManifestHeader = "case_id,event,time_years,split,bag_path_low,bag_path_high";

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("manifest not found: " + path.string());
  const fs::path base = fs::absolute(path).parent_path();
  csv::expect_header(in, kManifestHeader, "manifest " + path.string());

  Manifest m;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 1;
  while (csv::next_line(in, line)) {
    ++line_no;
    const auto f = csv::split(line);
    const std::string where = "manifest line " + std::to_string(line_no);
    if (f.size() != 6) throw ValidationError(where + ": expected 6 fields");
    ManifestRow row;
    row.case_id = f[0];
    if (row.case_id.empty()) throw ValidationError(where + ": empty case_id");
    if (!seen.insert(row.case_id).second) throw ValidationError("manifest: duplicate case id " + row.case_id);
    row.event = csv::to_int<int>(f[1], where + " event");
    row.time_years = csv::to_double(f[2], where + " time_years");
    validate(row.record());
    row.split = f[3];
    for (auto [field, target] : {std::pair{&f[4], &row.bag_path_low}, std::pair{&f[5], &row.bag_path_high}}) {
      if (field->empty()) throw ValidationError(where + ": missing bag path for " + row.case_id);
      fs::path p(*field);
      *target = p.is_absolute() ? p : base / p;
      if (!fs::exists(*target))
        throw ValidationError("manifest: missing file " + target->string() + " for case " + row.case_id);
    }
    m.rows.push_back(std::move(row));
  }
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kManifestHeader << '\n';
  auto rel = [&](const fs::path& p) {
    return (p.is_absolute() ? fs::relative(p, base) : p).generic_string();
  };
  for (const auto& r : manifest.rows)
    out << r.case_id << ',' << r.event << ',' << csv::exact(r.time_years) << ',' << r.split << ','
        << rel(r.bag_path_low) << ',' << rel(r.bag_path_high) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

GridGeometry load_geometry(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    GridGeometry g;
    g.low_extent = j.at("low_extent").get<std::int32_t>();
    g.high_extent = j.at("high_extent").get<std::int32_t>();
    g.high_step = j.at("high_step").get<std::int32_t>();
    g.low_mpp = j.at("low_mpp").get<double>();
    g.high_mpp = j.at("high_mpp").get<double>();
    if (g.low_extent <= 0 || g.high_extent <= 0 || g.high_step <= 0)
      throw ValidationError(path.string() + ": extents must be positive");
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void save_geometry(const GridGeometry& g, const fs::path& path) {
  nlohmann::json j = {{"low_extent", g.low_extent}, {"high_extent", g.high_extent}, {"high_step", g.high_step},
                      {"low_mpp", g.low_mpp},       {"high_mpp", g.high_mpp}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

std::vector<SurvivalRecord> Dataset::records() const {
  std::vector<SurvivalRecord> r;
  r.reserve(cases.size());
  for (const auto& c : cases) r.push_back(c.record);
  return r;
}

std::vector<std::string> Dataset::case_ids() const {
  std::vector<std::string> ids;
  ids.reserve(cases.size());
  for (const auto& c : cases) ids.push_back(c.record.case_id);
  return ids;
}

Dataset load_dataset(const Manifest& manifest, const GridGeometry& geometry) {
  Dataset ds;
  ds.geometry = geometry;
  ds.cases.reserve(manifest.rows.size());
  for (const auto& row : manifest.rows) {
    Case c{row.record(), row.split, load_bag(row.bag_path_low, row.case_id), load_bag(row.bag_path_high, row.case_id)};
    if (!ds.cases.empty() && (c.low.dim() != ds.cases.front().low.dim() || c.high.dim() != ds.cases.front().high.dim()))
      throw ValidationError("case " + row.case_id + ": embedding dimension differs from the rest of the cohort");
    ds.cases.push_back(std::move(c));
  }
  return ds;
}

// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  if (n_cases < 1) throw ArgumentError("synthetic: n_cases must be >= 1");
  if (patches_min < 1 || patches_max < patches_min) throw ArgumentError("synthetic: bad patches_per_bag range");
  if (dim < 1) throw ArgumentError("synthetic: dim must be >= 1");
  if (!(hot_fraction > 0.0 && hot_fraction < 1.0)) throw ArgumentError("synthetic: hot_fraction must lie in (0, 1)");
  if (!(baseline_hazard > 0.0)) throw ArgumentError("synthetic: baseline_hazard must be positive");
  if (!(censoring_rate >= 0.0 && censoring_rate < 1.0)) throw ArgumentError("synthetic: censoring_rate must lie in [0, 1)");
  if (!(severity_max >= severity_min)) throw ArgumentError("synthetic: severity_max < severity_min");
  if (!(noise_std >= 0.0)) throw ArgumentError("synthetic: noise_std must be non-negative");
  if (high_per_side < 1) throw ArgumentError("synthetic: high_per_side must be >= 1");
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto d = static_cast<Index>(spec.dim);
  SyntheticDataset out;

  std::mt19937_64 dir_rng(spec.hot_direction_seed);
  std::normal_distribution<double> unit_normal(0.0, 1.0);
  out.hot_direction.resize(d);
  for (Index i = 0; i < d; ++i) out.hot_direction(i) = unit_normal(dir_rng);
  out.hot_direction.normalize();

  GridGeometry& geo = out.data.geometry;
  geo.high_step = 1024;
  geo.high_extent = 2 * geo.high_step;
  geo.low_extent = geo.high_step * static_cast<std::int32_t>(spec.high_per_side);

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<std::size_t> n_patches(spec.patches_min, spec.patches_max);
  std::uniform_real_distribution<double> severity(spec.severity_min, spec.severity_max);
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  std::exponential_distribution<double> unit_exp(1.0);

  const std::size_t n = spec.n_cases;
  std::vector<double> event_time(n), censor_draw(n);
  out.truth.resize(n);
  out.data.cases.resize(n);

  const std::size_t width = std::max<std::size_t>(4, std::to_string(n - 1).size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::string num = std::to_string(i);
    const std::string id = "case_" + std::string(width - num.size(), '0') + num;
    const double s = severity(rng);
    const std::size_t n_low = n_patches(rng);
    const std::size_t n_hot = static_cast<std::size_t>(std::ceil(spec.hot_fraction * static_cast<double>(n_low)));

    std::vector<std::size_t> cells(n_low);
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    std::shuffle(cells.begin(), cells.end(), rng);
    std::vector<bool> hot(n_low, false);
    for (std::size_t h = 0; h < n_hot; ++h) hot[cells[h]] = true;

    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_low))));
    auto draw = [&](bool is_hot) {
      Eigen::RowVectorXd f(d);
      for (Index j = 0; j < d; ++j) f(j) = noise(rng);
      if (is_hot) f += s * out.hot_direction.transpose();
      return f;
    };

    Case& c = out.data.cases[i];
    c.low.case_id = c.high.case_id = id;
    c.low.resolution_mpp = geo.low_mpp;
    c.high.resolution_mpp = geo.high_mpp;
    c.low.embeddings.resize(static_cast<Index>(n_low), d);
    const std::size_t per_cell = spec.high_per_side * spec.high_per_side;
    c.high.embeddings.resize(static_cast<Index>(n_low * per_cell), d);
    std::size_t hot_high = 0;
    for (std::size_t cell = 0; cell < n_low; ++cell) {
      const auto cx = static_cast<std::int32_t>(cell % side) * geo.low_extent;
      const auto cy = static_cast<std::int32_t>(cell / side) * geo.low_extent;
      c.low.coords.push_back({cx, cy, 1});
      c.low.embeddings.row(static_cast<Index>(cell)) = draw(hot[cell]);
      for (std::size_t a = 0; a < spec.high_per_side; ++a)
        for (std::size_t b = 0; b < spec.high_per_side; ++b) {
          const auto row = static_cast<Index>(c.high.coords.size());
          c.high.coords.push_back({cx + static_cast<std::int32_t>(b) * geo.high_step,
                                   cy + static_cast<std::int32_t>(a) * geo.high_step, 0});
          c.high.embeddings.row(row) = draw(hot[cell]);
          hot_high += hot[cell] ? 1 : 0;
        }
    }

    event_time[i] = unit_exp(rng) / (spec.baseline_hazard * std::exp(s));
    if (!(event_time[i] > 0.0)) event_time[i] = std::numeric_limits<double>::min();
    censor_draw[i] = unit_exp(rng);
    out.truth[i] = {id, s, event_time[i], std::numeric_limits<double>::infinity(), n_hot, hot_high, {}};
    for (std::size_t cell = 0; cell < n_low; ++cell)
      if (hot[cell]) out.truth[i].hot_cells.push_back(static_cast<Index>(cell));
  }

  // Censoring times C_i = E_i / mu. Case i is censored iff mu > E_i / T_i, so
  // placing mu between consecutive sorted thresholds hits the target count.
  const auto target = static_cast<std::size_t>(std::llround(spec.censoring_rate * static_cast<double>(n)));
  if (target > 0) {
    std::vector<double> thresholds(n);
    for (std::size_t i = 0; i < n; ++i) thresholds[i] = censor_draw[i] / event_time[i];
    std::sort(thresholds.begin(), thresholds.end());
    const double lo = thresholds[target - 1];
    const double mu = target < n ? std::sqrt(lo * thresholds[target]) : 2.0 * lo;
    for (std::size_t i = 0; i < n; ++i) out.truth[i].censor_time = censor_draw[i] / mu;
  }

  std::vector<std::size_t> split_order(n);
  std::iota(split_order.begin(), split_order.end(), std::size_t{0});
  std::shuffle(split_order.begin(), split_order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.16 * static_cast<double>(n)));
  for (std::size_t p = 0; p < n; ++p) {
    Case& c = out.data.cases[split_order[p]];
    c.split = p < n_test ? "test" : (p < n_test + n_val ? "val" : "train");
  }

  for (std::size_t i = 0; i < n; ++i) {
    const GroundTruth& t = out.truth[i];
    const bool observed = t.event_time <= t.censor_time;
    out.data.cases[i].record = {t.case_id, observed ? 1 : 0, observed ? t.event_time : t.censor_time};
  }
  return out;
}

Manifest write_synthetic(const SyntheticDataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "bags");
  Manifest m;
  for (const auto& c : ds.data.cases) {
    ManifestRow row{c.record.case_id, c.record.event, c.record.time_years, c.split,
                    dir / "bags" / (c.record.case_id + "_low.milb"), dir / "bags" / (c.record.case_id + "_high.milb")};
    save_bag(c.low, row.bag_path_low);
    save_bag(c.high, row.bag_path_high);
    m.rows.push_back(std::move(row));
  }
  write_manifest(m, dir / "manifest.csv");
  save_geometry(ds.data.geometry, dir / "geometry.json");

  std::ofstream gt(dir / "ground_truth.csv");
  if (!gt) throw IoError("cannot write ground truth under " + dir.string());
  gt << "case_id,severity,event_time,censor_time,hot_low,hot_high\n";
  for (const auto& t : ds.truth)
    gt << t.case_id << ',' << csv::exact(t.severity) << ',' << csv::exact(t.event_time) << ','
       << (std::isinf(t.censor_time) ? std::string("inf") : csv::exact(t.censor_time)) << ',' << t.hot_low << ','
       << t.hot_high << '\n';
  return m;
}

}  // namespace bcr
