#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vnmt/config.hpp"

namespace vnmt {

enum class SweepDimension { dropout, latent_dim, flow_count, ortho_columns };

std::string to_string(SweepDimension d);
SweepDimension parse_sweep_dimension(const std::string& name);

/// dropout {0, 0.1, 0.2, 0.3}; latent_dim {8, 16, 32, 64, 128, 256}; flow_count {0..6};
/// ortho_columns {2, 4, 8, 16, 24, 32}.
std::vector<std::string> default_grid(SweepDimension d);

struct SweepPoint {
  std::string row;     // grid value
  std::string column;  // flow family for flow_count, otherwise the metric name
  RunConfig config;
};

/// One run per point. dropout and latent_dim vary a Gaussian posterior (no flows); flow_count
/// crosses the grid with planar, Sylvester (M = 8) and coupling flows, sharing the zero-flow run;
/// ortho_columns varies M for Sylvester flows (4 steps unless the base config sets a count).
std::vector<SweepPoint> sweep_points(SweepDimension d, const std::vector<std::string>& grid, const RunConfig& base);

struct SweepOutcome {
  std::string row;
  std::string column;
  bool failed = false;
  std::string error;
  double dev_overlap = 0.0;
  double dev_token_accuracy = 0.0;
  double dev_exact_match = 0.0;
  double kl_est = 0.0;
};

struct SweepReport {
  SweepDimension dimension = SweepDimension::dropout;
  std::vector<std::string> grid;
  std::vector<SweepOutcome> outcomes;
};

/// Trains every point under base.out_dir/<dimension>/<row>[_<column>]; a failing point is recorded
/// and the sweep moves on.
SweepReport run_sweep(SweepDimension d, const std::vector<std::string>& grid, const RunConfig& base,
                      const std::function<void(const SweepOutcome&)>& progress = {});

/// Text table laid out like the corresponding appendix table; best value marked with '*'.
std::string format_sweep_table(const SweepReport& report);
std::string sweep_csv(const SweepReport& report);

}  // namespace vnmt
