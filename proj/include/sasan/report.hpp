#pragma once

// Aggregate tables, Welch comparisons and loss-curve plots over finished runs.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sasan/metricore.hpp"
#include "sasan/trainloop.hpp"

namespace sasan::runner {

struct ExperimentRecord {
  std::string name;
  metricore::MetricsReport metrics;
  trainloop::History history;  // empty when the run has no training history
};

/// Reads `<root>/<name>/metrics.json` (+ history.csv, validation.csv) for each
/// name; with no names, the order of `<root>/ablation.json` is used.
std::vector<ExperimentRecord> load_experiments(const std::filesystem::path& root,
                                               std::vector<std::string> names = {});

/// One row per experiment: per-class Dice, mean Dice, per-class ASSD, mean ASSD.
std::string aggregate_csv(const std::vector<ExperimentRecord>& records);
/// Same content as text with mean±std cells.
std::string aggregate_table(const std::vector<ExperimentRecord>& records);

struct Comparison {
  std::string first, second;
  metricore::WelchResult welch;
  double mean_first = 0.0, mean_second = 0.0;
};

/// Welch t-test on per-sample mean Dice. Throws ReportError when class sets differ.
Comparison compare(const ExperimentRecord& a, const ExperimentRecord& b);
std::string comparisons_csv(const std::vector<Comparison>& rows);

/// Line plot of the weighted loss terms (one polyline per term) against step.
std::string loss_plot_svg(const trainloop::History& history, const std::string& title);
/// Validation mean Dice against epoch.
std::string validation_plot_svg(const trainloop::History& history, const std::string& title);

/// Writes report.csv, report.txt, per-experiment CSVs, plots and, when pairs are
/// given, comparisons.csv into `out`.
void render_report(const std::vector<ExperimentRecord>& records, const std::filesystem::path& out,
                   const std::vector<std::pair<std::string, std::string>>& pairs = {});

}  // namespace sasan::runner
