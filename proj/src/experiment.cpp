#include "rgnn/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

#include "rgnn/diagnostics.hpp"
#include "rgnn/errors.hpp"
#include "rgnn/graph.hpp"
#include "rgnn/tasks.hpp"

namespace fs = std::filesystem;

namespace rgnn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

template <class T, class F>
std::vector<T> list_of(const std::string& v, F parse) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(static_cast<T>(parse(item)));
  return out;
}

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + xs[i];
  return out;
}

template <class T>
std::string join_numbers(const std::vector<T>& xs) {
  std::vector<std::string> parts;
  for (const auto& x : xs) {
    std::ostringstream ss;
    ss << x;
    parts.push_back(ss.str());
  }
  return join(parts);
}

std::string fmt(double x, const char* spec = "%g") {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

const std::vector<std::string> kTasks = {"recall", "treemax", "gradprofile", "gradcheck", "export", "report"};

}  // namespace

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<ModelName> parse_models(const std::string& s) {
  if (trim(s) == "all") return all_models();
  std::vector<ModelName> out;
  for (const auto& name : split_list(s)) out.push_back(parse_model_name(name));
  return out;
}

void ExperimentConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  auto size = [&](std::size_t& field) { field = static_cast<std::size_t>(to_u64(key, v)); };
  auto sizes = [&](std::vector<std::size_t>& field) {
    field = list_of<std::size_t>(v, [&](const std::string& x) { return to_u64(key, x); });
  };
  auto reals = [&](std::vector<double>& field) {
    field = list_of<double>(v, [&](const std::string& x) { return to_double(key, x); });
  };
  if (key == "task") task = v;
  else if (key == "models") models = parse_models(v);
  else if (key == "lengths") sizes(lengths);
  else if (key == "seeds") seeds = list_of<std::uint64_t>(v, [&](const std::string& x) { return to_u64(key, x); });
  else if (key == "out") out = v;
  else if (key == "threads") size(threads);
  else if (key == "per_class") size(per_class);
  else if (key == "max_epochs") size(max_epochs);
  else if (key == "trees") size(trees);
  else if (key == "batch_size") size(batch_size);
  else if (key == "dim") size(hyper.dim);
  else if (key == "dropout") hyper.dropout = to_double(key, v);
  else if (key == "lr") hyper.lr = to_double(key, v);
  else if (key == "layers") size(hyper.layers);
  else if (key == "sweep_dims") sizes(sweep_dims);
  else if (key == "sweep_dropouts") reals(sweep_dropouts);
  else if (key == "sweep_lrs") reals(sweep_lrs);
  else if (key == "sweep_layers") sizes(sweep_layers);
  else if (key == "sweep_candidates") size(sweep_candidates);
  else if (key == "sweep_seed") sweep_seed = to_u64(key, v);
  else if (key == "path_length") size(path_length);
  else if (key == "draws") size(draws);
  else if (key == "tolerance") tolerance = to_double(key, v);
  else if (key == "dataset") dataset = v;
  else if (key == "length") size(length);
  else if (key == "logs") logs = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  std::vector<std::string> names;
  for (ModelName m : models) names.push_back(to_string(m));
  return {
      {"task", task},
      {"models", join(names)},
      {"lengths", join_numbers(lengths)},
      {"seeds", join_numbers(seeds)},
      {"out", out},
      {"threads", std::to_string(threads)},
      {"per_class", std::to_string(per_class)},
      {"max_epochs", std::to_string(max_epochs)},
      {"trees", std::to_string(trees)},
      {"batch_size", std::to_string(batch_size)},
      {"dim", std::to_string(hyper.dim)},
      {"dropout", fmt(hyper.dropout)},
      {"lr", fmt(hyper.lr)},
      {"layers", std::to_string(hyper.layers)},
      {"sweep_dims", join_numbers(sweep_dims)},
      {"sweep_dropouts", join_numbers(sweep_dropouts)},
      {"sweep_lrs", join_numbers(sweep_lrs)},
      {"sweep_layers", join_numbers(sweep_layers)},
      {"sweep_candidates", std::to_string(sweep_candidates)},
      {"sweep_seed", std::to_string(sweep_seed)},
      {"path_length", std::to_string(path_length)},
      {"draws", std::to_string(draws)},
      {"tolerance", fmt(tolerance)},
      {"dataset", dataset},
      {"length", std::to_string(length)},
      {"logs", logs},
  };
}

bool ExperimentConfig::sweeping() const {
  return !sweep_dims.empty() || !sweep_dropouts.empty() || !sweep_lrs.empty() || !sweep_layers.empty();
}

void ExperimentConfig::validate() const {
  if (std::find(kTasks.begin(), kTasks.end(), task) == kTasks.end()) {
    throw ConfigError("unknown task '" + task + "'; valid tasks: " + join(kTasks));
  }
  if (threads == 0) throw ConfigError("threads must be at least 1");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if ((task == "recall" || task == "treemax" || task == "gradprofile") && models.empty()) {
    throw ConfigError("task " + task + " needs models (a list or 'all')");
  }
  if (task == "recall") {
    if (lengths.empty()) throw ConfigError("task recall needs lengths");
    for (std::size_t l : lengths) {
      if (l < 2 || l > 30) throw ConfigError("recall lengths must lie in 2..30, got " + std::to_string(l));
    }
  }
  if (task == "gradprofile" && path_length < 2) throw ConfigError("path_length must be at least 2");
  if (task == "export" && dataset != "recall" && dataset != "treemax") {
    throw ConfigError("dataset must be recall or treemax, got '" + dataset + "'");
  }
  if (task == "report" && logs.empty()) throw ConfigError("task report needs logs (a file or directory)");
  if (!(hyper.dropout >= 0 && hyper.dropout < 1)) throw ConfigError("dropout must lie in [0, 1)");
}

ExperimentConfig read_experiment_config(std::istream& is, ExperimentConfig base) {
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", n);
    try {
      base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), n);
    }
  }
  return base;
}

ExperimentConfig read_experiment_config(const std::string& path, ExperimentConfig base) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  return read_experiment_config(is, std::move(base));
}

void write_experiment_config(std::ostream& os, const ExperimentConfig& c) {
  for (const auto& [k, v] : c.entries()) os << k << '=' << v << '\n';
}

// ---------------------------------------------------------------------------
// Commands

namespace {

// Runs jobs[0..n) on up to `threads` workers; each job writes only its own slot.
void fan_out(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const std::size_t k = std::min(threads, n);
  if (k <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < k; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  return os;
}

std::string file_key(ModelName m) {
  std::string s = to_string(m);
  for (auto& c : s) {
    if (c == '-') c = '_';
  }
  return s;
}

SweepSpec sweep_spec(const ExperimentConfig& c, std::size_t default_dim) {
  SweepSpec s;
  s.dims = c.sweep_dims.empty() ? std::vector<std::size_t>{c.hyper.dim ? c.hyper.dim : default_dim} : c.sweep_dims;
  s.dropouts = c.sweep_dropouts.empty() ? std::vector<double>{c.hyper.dropout} : c.sweep_dropouts;
  s.lrs = c.sweep_lrs.empty() ? std::vector<double>{c.hyper.lr} : c.sweep_lrs;
  s.layers = c.sweep_layers.empty() ? std::vector<std::size_t>{c.hyper.layers} : c.sweep_layers;
  s.search_seed = c.sweep_seed;
  s.max_candidates = c.sweep_candidates;
  return s;
}

std::string pct(double x) { return fmt(100.0 * x, "%.1f"); }

CommandStatus cmd_recall(const ExperimentConfig& c, const fs::path& out, std::ostream& console) {
  struct Cell {
    ModelName model;
    std::size_t length;
    std::uint64_t seed;
    RecallResult result;
  };
  std::vector<Cell> cells;
  for (ModelName m : c.models) {
    for (std::size_t l : c.lengths) {
      for (std::uint64_t s : c.seeds) cells.push_back({m, l, s, {}});
    }
  }
  const std::size_t max_epochs = c.max_epochs ? c.max_epochs : 300;
  std::mutex console_mutex;
  fan_out(cells.size(), c.threads, [&](std::size_t i) {
    Cell& cell = cells[i];
    const fs::path log_path =
        out / ("recall_" + file_key(cell.model) + "_L" + std::to_string(cell.length) + "_s" +
               std::to_string(cell.seed) + ".log");
    std::ofstream log = open_out(log_path);
    RecallOptions o;
    o.seed = cell.seed;
    o.per_class = c.per_class;
    o.max_epochs = max_epochs;
    o.hyper = c.hyper;
    o.log = &log;
    if (c.sweeping()) {
      const SweepResult sw = sweep_conditional_recall(cell.model, cell.length, sweep_spec(c, recall_dim(cell.length)),
                                                      max_epochs);
      for (const auto& e : sw.entries) {
        log << "# sweep " << to_string(e.hyper) << " val_node " << fmt(e.validation.node, "%.6f") << '\n';
      }
      o.hyper = sw.best;
    }
    cell.result = protocol_conditional_recall(cell.model, cell.length, o);
    std::lock_guard lock(console_mutex);
    console << "recall " << to_string(cell.model) << " length=" << cell.length << " seed=" << cell.seed
            << " test_accuracy=" << pct(cell.result.test_accuracy()) << "% stopped=" << cell.result.run.stopped_epoch
            << (cell.result.run.failed ? " FAILED" : "") << '\n';
  });

  CommandStatus st;
  std::ofstream txt = open_out(out / "recall.txt"), tsv = open_out(out / "recall.tsv");
  txt << "Conditional Recall test accuracy (%), mean over " << c.seeds.size() << " seed(s)\n";
  char head[64];
  std::snprintf(head, sizeof head, "%-15s", "model");
  txt << head;
  tsv << "model";
  for (std::size_t l : c.lengths) {
    char col[16];
    std::snprintf(col, sizeof col, "%8zu", l);
    txt << col;
    tsv << '\t' << l;
  }
  txt << '\n';
  tsv << '\n';
  for (ModelName m : c.models) {
    char name[64];
    std::snprintf(name, sizeof name, "%-15s", to_string(m).c_str());
    txt << name;
    tsv << to_string(m);
    for (std::size_t l : c.lengths) {
      std::vector<double> acc;
      bool failed = false;
      for (const auto& cell : cells) {
        if (cell.model != m || cell.length != l) continue;
        ++st.runs;
        if (cell.result.run.failed) {
          ++st.failed;
          failed = true;
          continue;
        }
        acc.push_back(cell.result.test_accuracy());
      }
      const std::string v = acc.empty() ? "failed" : pct(mean_std(acc).mean) + (failed ? "*" : "");
      char col[24];
      std::snprintf(col, sizeof col, "%8s", v.c_str());
      txt << col;
      tsv << '\t' << (acc.empty() ? "nan" : fmt(100.0 * mean_std(acc).mean, "%.2f"));
    }
    txt << '\n';
    tsv << '\n';
  }
  if (st.failed) txt << "* some runs diverged and were excluded\n";
  st.outputs = {(out / "recall.txt").string(), (out / "recall.tsv").string()};
  return st;
}

CommandStatus cmd_treemax(const ExperimentConfig& c, const fs::path& out, std::ostream& console) {
  struct Cell {
    ModelName model;
    std::uint64_t seed;
    TreeMaxResult result;
  };
  std::vector<Cell> cells;
  for (ModelName m : c.models) {
    for (std::uint64_t s : c.seeds) cells.push_back({m, s, {}});
  }
  const std::size_t max_epochs = c.max_epochs ? c.max_epochs : 200;
  std::mutex console_mutex;
  std::vector<Hyper> best(c.models.size(), c.hyper);
  if (c.sweeping()) {
    fan_out(c.models.size(), c.threads, [&](std::size_t i) {
      const SweepResult sw = sweep_tree_max(c.models[i], sweep_spec(c, 150), c.trees, max_epochs);
      best[i] = sw.best;
      std::ofstream log = open_out(out / ("treemax_sweep_" + file_key(c.models[i]) + ".log"));
      for (const auto& e : sw.entries) {
        log << "# sweep " << to_string(e.hyper) << " val_node " << fmt(e.validation.node, "%.6f") << '\n';
      }
    });
  }
  fan_out(cells.size(), c.threads, [&](std::size_t i) {
    Cell& cell = cells[i];
    std::ofstream log =
        open_out(out / ("treemax_" + file_key(cell.model) + "_s" + std::to_string(cell.seed) + ".log"));
    TreeMaxOptions o;
    o.seeds = {cell.seed};
    o.trees = c.trees;
    o.max_epochs = max_epochs;
    o.batch_size = c.batch_size;
    o.hyper = best[static_cast<std::size_t>(std::find(c.models.begin(), c.models.end(), cell.model) - c.models.begin())];
    o.log = &log;
    cell.result = protocol_tree_max(cell.model, o);
    const TrainRun& run = cell.result.runs.front();
    std::lock_guard lock(console_mutex);
    console << "treemax " << to_string(cell.model) << " seed=" << cell.seed << " node=" << pct(run.test.node)
            << "% graph=" << pct(run.test.graph) << "%" << (run.failed ? " FAILED" : "") << '\n';
  });

  CommandStatus st;
  std::ofstream txt = open_out(out / "treemax.txt"), tsv = open_out(out / "treemax.tsv");
  txt << "Tree Max test accuracy (%), mean ± sample std over seeds\n";
  char head[128];
  std::snprintf(head, sizeof head, "%-15s %16s %16s %5s %7s\n", "model", "node", "graph", "runs", "failed");
  txt << head;
  tsv << "model\tnode_mean\tnode_std\tgraph_mean\tgraph_std\truns\tfailed\n";
  for (ModelName m : c.models) {
    std::vector<double> node, graph;
    std::size_t runs = 0, failed = 0;
    for (const auto& cell : cells) {
      if (cell.model != m) continue;
      ++runs;
      const TrainRun& run = cell.result.runs.front();
      if (run.failed) {
        ++failed;
        continue;
      }
      node.push_back(run.test.node);
      graph.push_back(run.test.graph);
    }
    st.runs += runs;
    st.failed += failed;
    const MeanStd n = mean_std(node), g = mean_std(graph);
    const std::string ns = pct(n.mean) + " ± " + pct(n.std), gs = pct(g.mean) + " ± " + pct(g.std);
    char row[160];
    std::snprintf(row, sizeof row, "%-15s %16s %16s %5zu %7zu\n", to_string(m).c_str(), ns.c_str(), gs.c_str(), runs,
                  failed);
    txt << row;
    tsv << to_string(m) << '\t' << fmt(100 * n.mean, "%.2f") << '\t' << fmt(100 * n.std, "%.2f") << '\t'
        << fmt(100 * g.mean, "%.2f") << '\t' << fmt(100 * g.std, "%.2f") << '\t' << runs << '\t' << failed << '\n';
  }
  if (st.failed) txt << "warning: " << st.failed << " diverged run(s) excluded from the statistics\n";
  st.outputs = {(out / "treemax.txt").string(), (out / "treemax.tsv").string()};
  return st;
}

CommandStatus cmd_gradprofile(const ExperimentConfig& c, const fs::path& out, std::ostream& console) {
  const std::size_t n = c.path_length;
  std::vector<std::pair<ModelName, std::uint64_t>> cells;
  for (ModelName m : c.models) {
    for (std::uint64_t s : c.seeds) cells.emplace_back(m, s);
  }
  std::vector<HopGradientProfile> profiles(cells.size());
  fan_out(cells.size(), c.threads, [&](std::size_t i) {
    ModelConfig mc = recall_model_config(cells[i].first, n, c.hyper);
    profiles[i] = hop_gradient_profile(mc, n, cells[i].second);
    std::ofstream os = open_out(out / ("profile_" + file_key(cells[i].first) + "_N" + std::to_string(n) + "_s" +
                                       std::to_string(cells[i].second) + ".tsv"));
    write_profile_tsv(os, profiles[i]);
  });

  CommandStatus st;
  st.runs = cells.size();
  std::map<ModelName, double> medians;
  std::ofstream tsv = open_out(out / "gradprofile.tsv");
  tsv << "model\tN\tseeds\tmedian_decay_ratio\n";
  for (ModelName m : c.models) {
    std::vector<double> ratios;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].first == m) ratios.push_back(profiles[i].decay_ratio());
    }
    medians[m] = median(ratios);
    tsv << to_string(m) << '\t' << n << '\t' << ratios.size() << '\t' << fmt(medians[m], "%.6e") << '\n';
  }
  std::ostringstream txt;
  txt << "Gradient norm decay from distance 0 to distance " << n - 1 << " at initialisation (median over "
      << c.seeds.size() << " seed(s))\n";
  for (ModelName m : c.models) txt << to_string(m) << ": " << fmt(medians[m], "%.3e") << '\n';
  if (medians.contains(ModelName::ggnn) && medians.contains(ModelName::sggnn_rv_gat)) {
    const double factor = medians[ModelName::ggnn] / medians[ModelName::sggnn_rv_gat];
    txt << "GGNN / SGGNN-RV-GAT decay factor: " << fmt(factor, "%.3e")
        << (factor >= 100 ? "  (at least 100x: yes)" : "  (at least 100x: NO, flagged)") << '\n';
  }
  open_out(out / "gradprofile.txt") << txt.str();
  console << txt.str();
  st.outputs = {(out / "gradprofile.tsv").string(), (out / "gradprofile.txt").string()};
  return st;
}

CommandStatus cmd_gradcheck(const ExperimentConfig& c, const fs::path& out, std::ostream& console) {
  std::vector<std::string> components;
  for (const auto& name : grad_check_components()) {
    const bool is_model = std::any_of(all_models().begin(), all_models().end(),
                                      [&](ModelName m) { return to_string(m) == name; });
    if (!is_model) components.push_back(name);
  }
  for (ModelName m : c.models.empty() ? all_models() : c.models) components.push_back(to_string(m));
  std::vector<GradCheckResult> results(components.size());
  fan_out(components.size(), c.threads, [&](std::size_t i) {
    results[i] = finite_diff_check(components[i], component_sampler(components[i]), c.tolerance, c.draws,
                                   c.seeds.front());
  });
  std::ofstream tsv = open_out(out / "gradcheck.tsv");
  write_grad_report(tsv, results);
  write_grad_report(console, results);
  CommandStatus st;
  st.runs = results.size();
  st.outputs = {(out / "gradcheck.tsv").string()};
  return st;
}

CommandStatus cmd_export(const ExperimentConfig& c, const fs::path& out, std::ostream& console) {
  const std::uint64_t seed = c.seeds.front();
  Dataset d;
  std::string name;
  if (c.dataset == "recall") {
    d = gen_conditional_recall(c.length, c.per_class, seed);
    name = "recall_L" + std::to_string(c.length) + "_s" + std::to_string(seed) + ".txt";
  } else {
    d = gen_tree_max(c.trees, seed);
    name = "treemax_n" + std::to_string(c.trees) + "_s" + std::to_string(seed) + ".txt";
  }
  const fs::path p = out / name;
  write_dataset(p.string(), d);
  console << "wrote " << d.size() << " instances to " << p.string() << '\n';
  if (c.dataset == "treemax") {
    console << "nodes needing >= 10 hops (test split): " << fmt(100 * hop_requirement_fraction(d.test, 10), "%.3f")
            << "%\n";
  }
  CommandStatus st;
  st.runs = 1;
  st.outputs = {p.string()};
  return st;
}

CommandStatus cmd_report(const ExperimentConfig& c, const fs::path& out, std::ostream& console) {
  std::vector<fs::path> files;
  const fs::path src(c.logs);
  if (fs::is_directory(src)) {
    for (const auto& e : fs::directory_iterator(src)) {
      if (e.is_regular_file() && e.path().extension() == ".log") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::is_regular_file(src)) {
    files.push_back(src);
  } else {
    throw IoError("no such log file or directory: " + c.logs);
  }
  std::vector<RunRecord> records;
  for (const auto& f : files) {
    std::ifstream is(f);
    if (!is) throw IoError("cannot read " + f.string());
    auto rs = parse_run_log(is, f.string());
    records.insert(records.end(), rs.begin(), rs.end());
  }
  const auto rows = aggregate(records);
  std::ofstream txt = open_out(out / "report.txt"), tsv = open_out(out / "report.tsv");
  write_report_text(txt, rows);
  write_report_tsv(tsv, rows);
  write_report_text(console, rows);
  CommandStatus st;
  st.runs = records.size();
  for (const auto& r : records) st.failed += r.failed ? 1 : 0;
  st.outputs = {(out / "report.txt").string(), (out / "report.tsv").string()};
  return st;
}

}  // namespace

CommandStatus run_experiment(const ExperimentConfig& config, std::ostream& console) {
  config.validate();
  const fs::path out(config.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + config.out);
  {
    std::ofstream os = open_out(out / "config.txt");
    write_experiment_config(os, config);
  }
  if (config.task == "recall") return cmd_recall(config, out, console);
  if (config.task == "treemax") return cmd_treemax(config, out, console);
  if (config.task == "gradprofile") return cmd_gradprofile(config, out, console);
  if (config.task == "gradcheck") return cmd_gradcheck(config, out, console);
  if (config.task == "export") return cmd_export(config, out, console);
  return cmd_report(config, out, console);
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::vector<std::string> tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string t;
  while (ss >> t) out.push_back(t);
  return out;
}

double number_at(const std::vector<std::string>& t, std::size_t i, const char* name, std::size_t line) {
  if (i >= t.size() || t[i - 1] != name) throw ParseError(std::string("expected '") + name + " <value>'", line);
  char* end = nullptr;
  const double x = std::strtod(t[i].c_str(), &end);
  if (end != t[i].c_str() + t[i].size()) throw ParseError("bad number '" + t[i] + "'", line);
  return x;
}

}  // namespace

std::vector<RunRecord> parse_run_log(std::istream& is, const std::string& source) {
  std::vector<RunRecord> out;
  std::optional<RunRecord> open;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto t = tokens(line);
    if (t.empty() || t[0][0] == '#') continue;
    if (t[0] == "run") {
      if (open) throw ParseError("run without a result record", n);
      open.emplace();
      open->source = source;
      for (std::size_t i = 1; i < t.size(); ++i) {
        const auto eq = t[i].find('=');
        if (eq == std::string::npos) throw ParseError("expected key=value in run record", n);
        open->run[t[i].substr(0, eq)] = t[i].substr(eq + 1);
      }
      if (!open->run.contains("model")) throw ParseError("run record without model", n);
    } else if (t[0] == "epoch") {
      if (!open) throw ParseError("epoch record outside a run", n);
      if (t.size() != 8) throw ParseError("malformed epoch record", n);
      number_at(t, 3, "loss", n);
      number_at(t, 5, "val_node", n);
      number_at(t, 7, "val_graph", n);
      ++open->epochs;
    } else if (t[0] == "result") {
      if (!open) throw ParseError("result record outside a run", n);
      open->test_node = number_at(t, 2, "test_node", n);
      open->test_graph = number_at(t, 4, "test_graph", n);
      open->stopped = static_cast<std::size_t>(number_at(t, 6, "stopped", n));
      if (t.size() > 7) {
        if (t[7] != "failed") throw ParseError("unexpected token '" + t[7] + "'", n);
        open->failed = true;
      }
      out.push_back(std::move(*open));
      open.reset();
    } else {
      throw ParseError("unknown record '" + t[0] + "'", n);
    }
  }
  if (open) throw ParseError("log ends inside a run", n);
  return out;
}

std::vector<ReportRow> aggregate(const std::vector<RunRecord>& records) {
  auto model_rank = [](const std::string& name) {
    const auto& ms = all_models();
    for (std::size_t i = 0; i < ms.size(); ++i) {
      if (to_string(ms[i]) == name) return i;
    }
    return ms.size();
  };
  auto field = [](const RunRecord& r, const char* k) {
    auto it = r.run.find(k);
    return it == r.run.end() ? std::string("-") : it->second;
  };
  struct Key {
    std::size_t rank;
    std::string model, task;
    std::size_t length_num;
    std::string length;
    auto operator<=>(const Key&) const = default;
  };
  std::map<Key, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    const std::string len = field(r, "length");
    const std::size_t len_num = len == "-" ? 0 : std::strtoull(len.c_str(), nullptr, 10);
    groups[{model_rank(field(r, "model")), field(r, "model"), field(r, "task"), len_num, len}].push_back(&r);
  }
  std::vector<ReportRow> rows;
  for (const auto& [key, rs] : groups) {
    ReportRow row{key.model, key.task, key.length, rs.size(), 0, {}, {}};
    std::vector<double> node, graph;
    for (const auto* r : rs) {
      if (r->failed) {
        ++row.failed;
        continue;
      }
      node.push_back(r->test_node);
      graph.push_back(r->test_graph);
    }
    row.node = mean_std(node);
    row.graph = mean_std(graph);
    rows.push_back(row);
  }
  return rows;
}

void write_report_text(std::ostream& os, const std::vector<ReportRow>& rows) {
  char line[200];
  std::snprintf(line, sizeof line, "%-15s %-8s %6s %4s %6s %16s %16s\n", "model", "task", "length", "runs", "failed",
                "test_node %", "test_graph %");
  os << line;
  for (const auto& r : rows) {
    const std::string n = pct(r.node.mean) + " ± " + pct(r.node.std);
    const std::string g = pct(r.graph.mean) + " ± " + pct(r.graph.std);
    std::snprintf(line, sizeof line, "%-15s %-8s %6s %4zu %6zu %16s %16s\n", r.model.c_str(), r.task.c_str(),
                  r.length.c_str(), r.runs, r.failed, n.c_str(), g.c_str());
    os << line;
  }
}

void write_report_tsv(std::ostream& os, const std::vector<ReportRow>& rows) {
  os << "model\ttask\tlength\truns\tfailed\ttest_node_mean\ttest_node_std\ttest_graph_mean\ttest_graph_std\n";
  for (const auto& r : rows) {
    os << r.model << '\t' << r.task << '\t' << r.length << '\t' << r.runs << '\t' << r.failed << '\t'
       << fmt(r.node.mean, "%.6f") << '\t' << fmt(r.node.std, "%.6f") << '\t' << fmt(r.graph.mean, "%.6f") << '\t'
       << fmt(r.graph.std, "%.6f") << '\n';
  }
}

}  // namespace rgnn
