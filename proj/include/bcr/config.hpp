#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "bcr/pipeline.hpp"

namespace bcr {

// Flat run configuration. Accepted as a JSON object or as `key = value`
// lines (# starts a comment). Unknown or repeated keys are rejected.
struct RunConfig {
  double T = 1.65;  // years
  Index top_k = 10;
  double m_percent = 20.0;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double dropout = 0.25;
  std::size_t min_epoch_default = 40;
  std::uint64_t seed = 0;
  AttentionInput attention_input = AttentionInput::Embeddings;

  std::size_t epochs_fast = 20;
  std::size_t epochs_slow = 100;
  Index hidden = 256;
  double lambda_inst = 0.3;
  Index k_inst = 8;
  std::size_t batch_size = 0;
  SlowInit slow_init = SlowInit::ScoreDirection;

  void validate() const;
  void set(const std::string& key, const std::string& value);

  FastTrainConfig fast(std::size_t workers = 1) const;
  SlowTrainConfig slow() const;

  // Sorted `key=value` lines; the hash is FNV-1a 64 over this text.
  std::string canonical() const;
  std::string hash() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace bcr
