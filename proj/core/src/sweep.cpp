#include "vnmt/sweep.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <stdexcept>

#include "vnmt/train.hpp"

namespace vnmt {

namespace {

struct FlowColumn {
  FlowKind kind;
  const char* id;
  const char* title;
};

constexpr FlowColumn kFlowColumns[] = {
    {FlowKind::planar, "PF", "PF"}, {FlowKind::sylvester, "SF", "SF (M=8)"}, {FlowKind::coupling, "CL", "CL"}};

constexpr const char* kSharedColumn = "all";
constexpr const char* kMetricColumn = "overlap";

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string cell_text(const SweepOutcome& o, double best) {
  if (o.failed) return "fail";
  return fmt(o.dev_overlap) + (o.dev_overlap == best ? "*" : "");
}

std::string row_line(const std::vector<std::string>& cells, const std::vector<std::size_t>& widths) {
  std::string line = "|";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto w = i < widths.size() ? widths[i] : cells[i].size();
    line += " " + cells[i] + std::string(w > cells[i].size() ? w - cells[i].size() : 0, ' ') + " |";
  }
  return line + "\n";
}

std::string render(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (widths.size() <= i) widths.push_back(0);
      widths[i] = std::max(widths[i], r[i].size());
    }
  std::string out = row_line(rows.front(), widths);
  std::vector<std::string> rule;
  for (auto w : widths) rule.push_back(std::string(w, '-'));
  out += row_line(rule, widths);
  for (std::size_t i = 1; i < rows.size(); ++i) out += row_line(rows[i], widths);
  return out;
}

}  // namespace

std::string to_string(SweepDimension d) {
  switch (d) {
    case SweepDimension::dropout: return "dropout";
    case SweepDimension::latent_dim: return "latent_dim";
    case SweepDimension::flow_count: return "flow_count";
    case SweepDimension::ortho_columns: return "ortho_columns";
  }
  return "?";
}

SweepDimension parse_sweep_dimension(const std::string& name) {
  for (auto d : {SweepDimension::dropout, SweepDimension::latent_dim, SweepDimension::flow_count,
                 SweepDimension::ortho_columns}) {
    if (to_string(d) == name) return d;
  }
  throw std::invalid_argument("unknown sweep dimension '" + name +
                              "' (expected dropout, latent_dim, flow_count or ortho_columns)");
}

std::vector<std::string> default_grid(SweepDimension d) {
  switch (d) {
    case SweepDimension::dropout: return {"0.0", "0.1", "0.2", "0.3"};
    case SweepDimension::latent_dim: return {"8", "16", "32", "64", "128", "256"};
    case SweepDimension::flow_count: return {"0", "1", "2", "3", "4", "5", "6"};
    case SweepDimension::ortho_columns: return {"2", "4", "8", "16", "24", "32"};
  }
  return {};
}

std::vector<SweepPoint> sweep_points(SweepDimension d, const std::vector<std::string>& grid, const RunConfig& base) {
  if (grid.empty()) throw std::invalid_argument("sweep: grid is empty");
  std::vector<SweepPoint> points;
  const auto dir = std::filesystem::path(base.out_dir) / to_string(d);
  const auto point = [&](const std::string& row, const std::string& column, RunConfig cfg) {
    cfg.model.latent = LatentMode::variational;
    cfg.out_dir = (dir / (column == kMetricColumn || column == kSharedColumn ? row : row + "_" + column)).string();
    points.push_back({row, column, std::move(cfg)});
  };
  for (const auto& value : grid) {
    RunConfig cfg = base;
    switch (d) {
      case SweepDimension::dropout:
        cfg.model.flow_count = 0;
        set_config_value(cfg, "word_dropout", value);
        point(value, kMetricColumn, cfg);
        break;
      case SweepDimension::latent_dim:
        cfg.model.flow_count = 0;
        set_config_value(cfg, "latent_dim", value);
        point(value, kMetricColumn, cfg);
        break;
      case SweepDimension::ortho_columns:
        cfg.model.flow_kind = FlowKind::sylvester;
        if (cfg.model.flow_count == 0) cfg.model.flow_count = 4;
        set_config_value(cfg, "ortho_columns", value);
        point(value, kMetricColumn, cfg);
        break;
      case SweepDimension::flow_count:
        set_config_value(cfg, "flow_count", value);
        if (cfg.model.flow_count == 0) {
          point(value, kSharedColumn, cfg);
          break;
        }
        for (const auto& col : kFlowColumns) {
          RunConfig c = cfg;
          c.model.flow_kind = col.kind;
          if (col.kind == FlowKind::sylvester) c.model.ortho_columns = 8;
          point(value, col.id, c);
        }
        break;
    }
  }
  return points;
}

SweepReport run_sweep(SweepDimension d, const std::vector<std::string>& grid, const RunConfig& base,
                      const std::function<void(const SweepOutcome&)>& progress) {
  SweepReport report{d, grid, {}};
  for (const auto& p : sweep_points(d, grid, base)) {
    SweepOutcome o;
    o.row = p.row;
    o.column = p.column;
    try {
      const auto result = train(p.config);
      o.dev_overlap = result.best_overlap;
      const auto best = std::max_element(result.records.begin(), result.records.end(),
                                         [](const auto& a, const auto& b) { return a.dev_overlap < b.dev_overlap; });
      if (best != result.records.end()) {
        o.dev_token_accuracy = best->dev_token_accuracy;
        o.dev_exact_match = best->dev_exact_match;
      }
      if (!result.records.empty()) o.kl_est = result.records.back().kl_est;
    } catch (const std::exception& e) {
      o.failed = true;
      o.error = e.what();
    }
    if (progress) progress(o);
    report.outcomes.push_back(std::move(o));
  }
  return report;
}

std::string format_sweep_table(const SweepReport& report) {
  double best = -1.0;
  for (const auto& o : report.outcomes)
    if (!o.failed) best = std::max(best, o.dev_overlap);
  const auto find = [&](const std::string& row, const std::string& column) -> const SweepOutcome* {
    for (const auto& o : report.outcomes)
      if (o.row == row && o.column == column) return &o;
    return nullptr;
  };

  if (report.dimension == SweepDimension::flow_count) {
    std::vector<std::vector<std::string>> rows{{"Num Flows"}};
    for (const auto& col : kFlowColumns) rows[0].push_back(col.title);
    for (const auto& value : report.grid) {
      std::vector<std::string> r{value};
      if (const auto* shared = find(value, kSharedColumn)) {
        r.push_back(cell_text(*shared, best) + " (all flows)");
      } else {
        for (const auto& col : kFlowColumns) {
          const auto* o = find(value, col.id);
          r.push_back(o ? cell_text(*o, best) : "-");
        }
      }
      rows.push_back(std::move(r));
    }
    return render(rows);
  }

  const char* header = report.dimension == SweepDimension::dropout      ? "Dropout rate"
                       : report.dimension == SweepDimension::latent_dim ? "D"
                                                                        : "M";
  std::vector<std::vector<std::string>> rows{{header}, {"Overlap"}};
  for (const auto& value : report.grid) {
    rows[0].push_back(value);
    const auto* o = find(value, kMetricColumn);
    rows[1].push_back(o ? cell_text(*o, best) : "-");
  }
  return render(rows);
}

std::string sweep_csv(const SweepReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "dimension,value,column,status,dev_overlap,dev_token_accuracy,dev_exact_match,kl_est,error\n";
  for (const auto& o : report.outcomes) {
    std::string error = o.error;
    std::replace(error.begin(), error.end(), ',', ';');
    std::replace(error.begin(), error.end(), '\n', ' ');
    out << to_string(report.dimension) << ',' << o.row << ',' << o.column << ',' << (o.failed ? "failed" : "ok") << ','
        << o.dev_overlap << ',' << o.dev_token_accuracy << ',' << o.dev_exact_match << ',' << o.kl_est << ',' << error
        << '\n';
  }
  return out.str();
}

}  // namespace vnmt
