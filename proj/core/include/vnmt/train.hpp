#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vnmt/config.hpp"
#include "vnmt/datasim.hpp"
#include "vnmt/model.hpp"
#include "vnmt/rng.hpp"

namespace vnmt {

// ---------------------------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Rescales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before.
  static double clip_grad_norm(std::span<NamedTensor> params, double max_norm);
  /// One update from the accumulated gradients; parameters without a gradient are left alone.
  void step(std::span<NamedTensor> params);

  const AdamState& state() const { return state_; }
  void set_state(AdamState state) { state_ = std::move(state); }

 private:
  double lr_, beta1_, beta2_, eps_;
  AdamState state_;
};

// ---------------------------------------------------------------------------------------------
// Metrics

struct EvalMetrics {
  double token_accuracy = 0.0;  // position-wise matches over reference tokens
  double exact_match = 0.0;     // fraction of identical sequences
  double overlap = 0.0;         // corpus n-gram precision (n <= 4) with brevity penalty, 0-100
};

/// Sequences exclude BOS; a trailing EOS is ignored. Throws on a count mismatch.
EvalMetrics evaluate_hypotheses(const std::vector<std::vector<int>>& hypotheses,
                                const std::vector<std::vector<int>>& references);

struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double recon_nll = 0.0;
  double kl_est = 0.0;
  double beta_effective = 0.0;
  double mean_gate = 0.0;
  double dev_token_accuracy = 0.0;
  double dev_exact_match = 0.0;
  double dev_overlap = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
std::vector<MetricsRecord> load_metrics_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------------------------
// Checkpoints

/// Everything needed to continue a run exactly where it stopped.
struct TrainingState {
  RunConfig config;
  std::vector<NamedTensor> params;
  AdamState adam;
  std::size_t step = 0;
  std::array<std::uint64_t, 4> sample_rng{};
  std::array<std::uint64_t, 4> batch_rng{};
  double best_overlap = -1.0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const TrainingState& state, const std::filesystem::path& path);
/// Throws CheckpointError on a bad magic, an unsupported version or truncated data.
TrainingState load_checkpoint(const std::filesystem::path& path);

/// Model with the checkpoint's configuration and parameter values.
Model model_from_checkpoint(const TrainingState& state);

// ---------------------------------------------------------------------------------------------
// Training

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, std::filesystem::path dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const std::filesystem::path& dump_path() const { return dump_; }

 private:
  std::filesystem::path dump_;
};

struct TrainOptions {
  /// Continue from this checkpoint instead of initializing.
  std::optional<std::filesystem::path> resume;
  /// Stop after this many total steps even if config.steps is larger (used to cut runs short).
  std::optional<std::size_t> stop_at;
  bool write_files = true;
  std::function<void(const MetricsRecord&)> on_eval;
};

struct TrainResult {
  Model model;
  std::vector<MetricsRecord> records;
  double best_overlap = 0.0;
  std::size_t steps = 0;
  TrainingState final_state;
};

/// Data for a run: loaded from the configured files or generated from the task spec.
Corpus training_corpus(const RunConfig& config);
Corpus dev_corpus(const RunConfig& config);

/// Writes config.txt, metrics.csv, last.ckpt and best.ckpt (best dev overlap) under out_dir.
TrainResult train(const RunConfig& config, const TrainOptions& options = {});

/// Beam-decodes every source of `data` and scores against its targets.
EvalMetrics evaluate_model(const Model& model, const Corpus& data, std::size_t beam, std::size_t max_len);

// ---------------------------------------------------------------------------------------------
// Collapse monitoring

enum class CollapseStatus { healthy, collapsed };

std::string to_string(CollapseStatus status);

/// Collapsed iff kl_est < threshold on `patience` consecutive records taken at or after
/// `anneal_steps`.
CollapseStatus collapse_monitor(std::span<const MetricsRecord> records, std::size_t anneal_steps,
                                double threshold = 0.01, std::size_t patience = 10);

}  // namespace vnmt
