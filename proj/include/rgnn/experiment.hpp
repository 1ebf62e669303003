#pragma once

// Experiment configuration, the commands behind the CLI, and run-log reports.
//
// Config files are plain key=value lines; '#' starts a comment. Every
// command writes the resolved config to <out>/config.txt.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rgnn/models.hpp"
#include "rgnn/training.hpp"

namespace rgnn {

struct ExperimentConfig {
  std::string task;  // recall | treemax | gradprofile | gradcheck | export | report
  std::vector<ModelName> models;
  std::vector<std::size_t> lengths = {3, 5, 7, 10};
  std::vector<std::uint64_t> seeds = {0};
  std::string out = "results";
  std::size_t threads = 1;

  // protocol settings
  std::size_t per_class = 20;
  std::size_t max_epochs = 0;  // 0: the task's default (300 recall, 200 Tree Max)
  std::size_t trees = 800;
  std::size_t batch_size = 20;  // Tree Max
  Hyper hyper;

  // sweep before the protocol runs, when any sweep axis is given
  std::vector<std::size_t> sweep_dims;
  std::vector<double> sweep_dropouts;
  std::vector<double> sweep_lrs;
  std::vector<std::size_t> sweep_layers;
  std::size_t sweep_candidates = 0;
  std::uint64_t sweep_seed = 0;

  // gradprofile / gradcheck
  std::size_t path_length = 30;
  std::size_t draws = 10;
  double tolerance = 1e-4;

  // export / report
  std::string dataset = "recall";  // recall | treemax
  std::size_t length = 5;
  std::string logs;

  // Applies one key; ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
  void validate() const;
  bool sweeping() const;
};

// Reads key=value lines. ParseError names the offending line.
ExperimentConfig read_experiment_config(std::istream& is, ExperimentConfig base = {});
ExperimentConfig read_experiment_config(const std::string& path, ExperimentConfig base = {});
void write_experiment_config(std::ostream& os, const ExperimentConfig& c);

std::vector<std::string> split_list(const std::string& s);
std::vector<ModelName> parse_models(const std::string& s);  // "all" or a comma list

struct CommandStatus {
  std::size_t runs = 0;
  std::size_t failed = 0;  // runs flagged as diverged; still "completed"
  std::vector<std::string> outputs;
};

// Runs config.task, writing into config.out. Throws ConfigError / IoError /
// ParseError for usage problems; divergent runs are only counted.
CommandStatus run_experiment(const ExperimentConfig& config, std::ostream& console);

// ---------------------------------------------------------------------------
// Reports over run logs

struct RunRecord {
  std::string source;
  std::map<std::string, std::string> run;  // key=value fields of the "run" line
  std::size_t epochs = 0;
  double test_node = 0, test_graph = 0;
  std::size_t stopped = 0;
  bool failed = false;
};

// Every run in one log. A run is a "run" line, its epoch records and a
// "result" line. ParseError names the line of any malformed record.
std::vector<RunRecord> parse_run_log(std::istream& is, const std::string& source = "");

struct ReportRow {
  std::string model, task, length;
  std::size_t runs = 0, failed = 0;
  MeanStd node, graph;
};

// One row per (model, task, length) in table order; failed runs are counted
// but excluded from the statistics.
std::vector<ReportRow> aggregate(const std::vector<RunRecord>& records);
void write_report_text(std::ostream& os, const std::vector<ReportRow>& rows);
void write_report_tsv(std::ostream& os, const std::vector<ReportRow>& rows);

}  // namespace rgnn
