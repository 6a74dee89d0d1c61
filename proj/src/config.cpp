#include "bcr/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "csv_util.hpp"

namespace bcr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) return s.substr(1, s.size() - 2);
  return s;
}

template <typename Int>
Int parse_count(const std::string& key, const std::string& v) {
  if (!v.empty() && v.front() == '-') throw ValidationError("config: " + key + " must be non-negative");
  return csv::to_int<Int>(v, "config: " + key);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const std::string v = unquote(trim(value));
  const std::string what = "config: " + key;
  if (key == "T") T = csv::to_double(v, what);
  else if (key == "top_k") top_k = csv::to_int<Index>(v, what);
  else if (key == "m_percent") m_percent = csv::to_double(v, what);
  else if (key == "lr") lr = csv::to_double(v, what);
  else if (key == "weight_decay") weight_decay = csv::to_double(v, what);
  else if (key == "dropout") dropout = csv::to_double(v, what);
  else if (key == "min_epoch_default") min_epoch_default = parse_count<std::size_t>(key, v);
  else if (key == "seed") seed = parse_count<std::uint64_t>(key, v);
  else if (key == "attention_input") {
    try {
      attention_input = attention_input_from_string(v);
    } catch (const Error& e) {
      throw ValidationError(what + ": " + e.what());
    }
  } else if (key == "epochs_fast") epochs_fast = parse_count<std::size_t>(key, v);
  else if (key == "epochs_slow") epochs_slow = parse_count<std::size_t>(key, v);
  else if (key == "hidden") hidden = csv::to_int<Index>(v, what);
  else if (key == "lambda_inst") lambda_inst = csv::to_double(v, what);
  else if (key == "k_inst") k_inst = csv::to_int<Index>(v, what);
  else if (key == "batch_size") batch_size = parse_count<std::size_t>(key, v);
  else if (key == "slow_init") {
    try {
      slow_init = slow_init_from_string(v);
    } catch (const Error& e) {
      throw ValidationError(what + ": " + e.what());
    }
  } else throw ValidationError("config: unknown key '" + key + "'");
}

void RunConfig::validate() const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ValidationError(std::string("config: ") + msg);
  };
  need(T > 0.0, "T must be positive");
  need(top_k >= 1, "top_k must be >= 1");
  need(m_percent > 0.0 && m_percent <= 40.0, "m_percent must lie in (0, 40]");
  need(lr > 0.0, "lr must be positive");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  need(epochs_fast >= 1 && epochs_slow >= 1, "epochs must be >= 1");
  need(hidden >= 1, "hidden must be >= 1");
  need(lambda_inst >= 0.0, "lambda_inst must be >= 0");
  need(k_inst >= 1, "k_inst must be >= 1");
}

FastTrainConfig RunConfig::fast(std::size_t workers) const {
  FastTrainConfig c;
  c.adam.lr = lr;
  c.adam.weight_decay = weight_decay;
  c.dropout = dropout;
  c.epochs = epochs_fast;
  c.hidden = hidden;
  c.loss.lambda_inst = lambda_inst;
  c.loss.k_inst = k_inst;
  c.threshold_years = T;
  c.seed = seed;
  c.workers = workers;
  return c;
}

SlowTrainConfig RunConfig::slow() const {
  SlowTrainConfig c;
  c.adam.lr = lr;
  c.adam.weight_decay = weight_decay;
  c.dropout = dropout;
  c.epochs = epochs_slow;
  c.hidden = hidden;
  c.top_k = top_k;
  c.attention_input = attention_input;
  c.batch_size = batch_size;
  c.min_epoch = min_epoch_default;
  c.init = slow_init;
  c.seed = seed;
  return c;
}

std::string RunConfig::canonical() const {
  std::set<std::string> lines{
      "T=" + csv::exact(T),
      "attention_input=" + to_string(attention_input),
      "batch_size=" + std::to_string(batch_size),
      "dropout=" + csv::exact(dropout),
      "epochs_fast=" + std::to_string(epochs_fast),
      "epochs_slow=" + std::to_string(epochs_slow),
      "hidden=" + std::to_string(hidden),
      "k_inst=" + std::to_string(k_inst),
      "lambda_inst=" + csv::exact(lambda_inst),
      "lr=" + csv::exact(lr),
      "m_percent=" + csv::exact(m_percent),
      "min_epoch_default=" + std::to_string(min_epoch_default),
      "seed=" + std::to_string(seed),
      "slow_init=" + to_string(slow_init),
      "top_k=" + std::to_string(top_k),
      "weight_decay=" + csv::exact(weight_decay),
  };
  std::string out;
  for (const auto& l : lines) out += l + '\n';
  return out;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  auto assign = [&](const std::string& key, const std::string& value) {
    if (!seen.insert(key).second) throw ValidationError("config: repeated key '" + key + "'");
    cfg.set(key, value);
  };

  const std::string body = trim(text);
  if (!body.empty() && body.front() == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("config: invalid JSON: ") + e.what());
    }
    for (const auto& [key, value] : j.items()) {
      if (value.is_string()) assign(key, value.get<std::string>());
      else if (value.is_number()) assign(key, value.dump());
      else throw ValidationError("config: value of '" + key + "' must be a number or string");
    }
  } else {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ValidationError("config: line " + std::to_string(lineno) + " is not 'key = value'");
      assign(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace bcr
