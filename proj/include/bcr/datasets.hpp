#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bcr/mil_models.hpp"
#include "bcr/survival.hpp"

namespace bcr {

// ---------------------------------------------------------------------------
// Bag store: one little-endian binary file per bag.
//
//   offset  size      field
//   0       4         magic "MILB"
//   4       2         version (u16) = 1
//   6       4         d (u32)
//   10      4         n (u32)
//   14      12·n      coords, (x, y, level) as i32 triples
//   14+12n  8         resolution_mpp (f64)
//   22+12n  4·n·d     embeddings, f32 row-major

inline constexpr std::uint16_t kBagStoreVersion = 1;

std::vector<std::byte> encode_bag(const Bag& bag);
Bag decode_bag(std::span<const std::byte> bytes, const std::string& case_id = {});
void save_bag(const Bag& bag, const std::filesystem::path& path);
// The case id is not stored in the file; it is taken from the caller.
Bag load_bag(const std::filesystem::path& path, const std::string& case_id = {});

// ---------------------------------------------------------------------------
// Manifest CSV: case_id,event,time_years,split,bag_path_low,bag_path_high
// Bag paths are stored relative to the manifest's directory.

struct ManifestRow {
  std::string case_id;
  int event = 0;
  double time_years = 0.0;
  std::string split;
  std::filesystem::path bag_path_low;   // absolute after load
  std::filesystem::path bag_path_high;  // absolute after load

  SurvivalRecord record() const { return {case_id, event, time_years}; }
};

struct Manifest {
  std::vector<ManifestRow> rows;
};

Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Level-0 pixel extents of the two patch grids. Used to relate high-resolution
// patches to the low-resolution cells that contain them.
struct GridGeometry {
  std::int32_t low_extent = 14336;  // 224 px at ~16 mpp
  std::int32_t high_extent = 2048;
  std::int32_t high_step = 1024;
  double low_mpp = 16.0;
  double high_mpp = 0.25;
};

GridGeometry load_geometry(const std::filesystem::path& path);
void save_geometry(const GridGeometry& g, const std::filesystem::path& path);

// A fully loaded cohort: both resolutions of every case in manifest order.
struct Case {
  SurvivalRecord record;
  std::string split;
  Bag low;
  Bag high;
};

struct Dataset {
  std::vector<Case> cases;
  GridGeometry geometry;

  std::vector<SurvivalRecord> records() const;
  std::vector<std::string> case_ids() const;
};

Dataset load_dataset(const Manifest& manifest, const GridGeometry& geometry);

// ---------------------------------------------------------------------------
// Synthetic cohorts with a planted signal.

struct SyntheticSpec {
  std::size_t n_cases = 508;
  std::size_t patches_min = 16;  // low-resolution patches per bag
  std::size_t patches_max = 36;
  std::size_t dim = 32;
  double hot_fraction = 0.1;
  std::uint64_t hot_direction_seed = 1;
  double baseline_hazard = 0.1;
  double censoring_rate = 0.3;
  double severity_min = 0.0;
  double severity_max = 4.0;
  double noise_std = 1.0;
  std::size_t high_per_side = 2;  // high-res patch origins per low cell side
  std::uint64_t seed = 0;

  void validate() const;
};

struct GroundTruth {
  std::string case_id;
  double severity = 0.0;  // true log risk
  double event_time = 0.0;
  double censor_time = 0.0;  // +inf when uncensored by design
  std::size_t hot_low = 0;
  std::size_t hot_high = 0;
  std::vector<Index> hot_cells;  // low-resolution rows carrying the signal, ascending
};

struct SyntheticDataset {
  Dataset data;
  std::vector<GroundTruth> truth;
  Eigen::VectorXd hot_direction;
};

SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

// Writes manifest.csv, geometry.json, ground_truth.csv and bags/ under `dir`.
Manifest write_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir);

}  // namespace bcr
