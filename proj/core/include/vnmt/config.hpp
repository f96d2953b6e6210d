#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vnmt/datasim.hpp"
#include "vnmt/model.hpp"
#include "vnmt/objective.hpp"

namespace vnmt {

/// The task's vocabulary always equals the model's; the vocab_size key sets both.
struct RunConfig {
  RunConfig();

  ModelConfig model;
  TrainSchedule schedule;
  TaskSpec task;

  double learning_rate = 1e-3;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double clip_norm = 1.0;
  std::size_t eval_interval = 200;
  std::size_t eval_beam = 1;
  std::size_t max_decode_len = 0;  // 0: twice the task's max_len plus two

  std::size_t train_size = 5000;
  std::size_t dev_size = 200;
  std::string train_corpus;  // loaded instead of generated when set
  std::string dev_corpus;

  std::uint64_t seed = 1;
  std::string out_dir = "run";

  /// Throws std::invalid_argument on the first inconsistent setting.
  void validate() const;
  std::size_t decode_limit() const;
};

/// Documented keys in serialization order.
const std::vector<std::string>& config_keys();

/// Applies one `key=value` setting; unknown keys and malformed values throw std::invalid_argument.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);

/// Flat key=value text; '#' starts a comment, blank lines are ignored. Later keys override earlier.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path);
/// Every key, one per line, in config_keys() order. parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& config);

}  // namespace vnmt
