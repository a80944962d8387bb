#include "stabmoe/commands.hpp"

#include "stabmoe/io.hpp"
#include "stabmoe/schema.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <ostream>
#include <thread>

namespace stabmoe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string str(std::uint64_t v) { return std::to_string(v); }

json number_or_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

json mean_std_json(const std::vector<double>& values) {
  const MeanStd ms = mean_std(values);
  return {{"mean", ms.mean}, {"std", ms.stddev}};
}

json toggles_json(const Toggles& t) {
  return {{"router_stabilizer", t.router_stabilizer},
          {"expert_stabilizer", t.expert_stabilizer},
          {"activation_gate", t.activation_gate}};
}

double final_probe_accuracy(const RunMetrics& m) {
  if (m.probes.empty() || !m.probes.back()) throw std::logic_error("final probe missing");
  return m.probes.back()->accuracy;
}

std::size_t total_frozen(const RunMetrics& m) {
  std::size_t n = 0;
  for (const auto& t : m.tasks)
    for (auto c : t.frozen_counts) n += c;
  return n;
}

fs::path seed_dir(const fs::path& run_dir, std::uint64_t seed) { return run_dir / ("seed-" + str(seed)); }

void report_config_error(const ConfigError& e, std::ostream& err) {
  err << "error: invalid configuration\n";
  for (const auto& issue : e.issues()) err << "  " << issue << "\n";
}

}  // namespace

fs::path snapshot_path(const fs::path& run_dir, std::uint64_t seed, std::size_t task) {
  return seed_dir(run_dir, seed) / "snapshots" / ("task-" + std::to_string(task) + ".snap");
}

RunConfig resolve_config(const RunOptions& options) {
  RunConfig config = load_config(options.config_path);
  if (options.out_dir) config.output.directory = *options.out_dir;
  if (options.seeds) config.seeds = *options.seeds;
  for (const auto& t : options.toggles) apply_toggle(config, t);
  return config;
}

std::size_t worker_count(std::size_t jobs) {
  std::size_t cap = std::max<std::size_t>(std::thread::hardware_concurrency(), 1);
  if (const char* env = std::getenv("SAME_THREADS"); env != nullptr && *env != '\0') {
    const std::string_view text(env);
    std::size_t v = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size() || v == 0)
      throw std::invalid_argument("SAME_THREADS must be a positive integer, got \"" + std::string(text) + "\"");
    cap = v;
  }
  return std::max<std::size_t>(1, std::min(cap, jobs));
}

std::vector<RunResult> run_parallel(const std::vector<RunSpec>& specs, std::size_t workers) {
  std::vector<RunResult> results(specs.size());
  std::vector<std::exception_ptr> errors(specs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) {
      try {
        results[i] = run_stream(specs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, specs.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

bool frozen_tensors_unchanged(const RunMetrics& metrics) {
  for (const auto& task : metrics.tasks)
    for (const auto& ev : task.freeze_events)
      if (ev.checksum_at_freeze != ev.checksum_at_release) return false;
  return true;
}

std::string metrics_csv(std::uint64_t seed, const RunResult& result) {
  const RunMetrics& m = result.metrics;
  CsvTable table(metrics_csv_header());
  const std::string s = str(seed);
  auto row = [&](const char* kind, std::string checkpoint, std::string probe, std::string layer,
                 std::string expert, std::string step, double value) {
    table.add_row({s, kind, std::move(checkpoint), std::move(probe), std::move(layer), std::move(expert),
                   std::move(step), format_number(value)});
  };
  const std::size_t T = m.accuracy.tasks();

  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t p = 0; p <= t; ++p) row("accuracy", str(t + 1), str(p + 1), "", "", "", m.accuracy.at(p, t));
  row("final_average", str(T), "", "", "", "", m.final_average);

  for (std::size_t t = 0; t < m.routing_histograms.size(); ++t)
    for (std::size_t p = 0; p < m.routing_histograms[t].size(); ++p)
      for (std::size_t l = 0; l < m.routing_histograms[t][p].size(); ++l) {
        const Vector& h = m.routing_histograms[t][p][l];
        for (Index e = 0; e < h.size(); ++e)
          row("routing", str(t + 1), str(p + 1), str(l), str(static_cast<std::uint64_t>(e)), "", h(e));
      }
  for (std::size_t t = 0; t < m.entropy_trace.size(); ++t)
    for (std::size_t l = 0; l < m.entropy_trace[t].size(); ++l) {
      row("entropy", str(t + 1), "1", str(l), "", "", m.entropy_trace[t][l]);
      row("drift", str(t + 1), "1", str(l), "", "", m.drift_trace[t][l]);
    }

  for (const auto& task : m.tasks) {
    const std::string ck = str(task.task);
    for (std::size_t b = 0; b < task.batch_losses.size(); ++b)
      row("loss", ck, "", "", "", str(b), task.batch_losses[b]);
    for (std::size_t l = 0; l < task.frozen_counts.size(); ++l)
      row("frozen_count", ck, "", str(l), "", "", static_cast<double>(task.frozen_counts[l]));
    row("skipped_expert_grads", ck, "", "", "", "", static_cast<double>(task.skipped_expert_grads));
    row("frozen_expert_batches", ck, "", "", "", "", static_cast<double>(task.frozen_expert_batches));
    row("post_freeze_batches", ck, "", "", "", "", static_cast<double>(task.post_freeze_batches));
    for (const auto& g : task.gating) {
      for (Index e = 0; e < g.utilization.size(); ++e) {
        const std::string ex = str(static_cast<std::uint64_t>(e));
        row("utilization", ck, "", str(g.layer), ex, "", g.utilization(e));
        row("sensitivity_pre", ck, "", str(g.layer), ex, "", g.sensitivity_pre(e));
        row("score", ck, "", str(g.layer), ex, "", g.scores(e));
        row("frozen", ck, "", str(g.layer), ex, "", g.frozen[static_cast<std::size_t>(e)] ? 1.0 : 0.0);
      }
    }
    for (const auto& ev : task.freeze_events)
      row("freeze_event", ck, "", str(ev.layer), str(ev.expert), str(ev.frozen_at_batch),
          ev.checksum_at_freeze == ev.checksum_at_release ? 1.0 : 0.0);
  }

  for (const auto& r : m.drift_log.rows()) {
    const std::string ck = str(r.task), l = str(r.layer), st = str(r.step);
    row("eta", ck, "", l, "", st, r.eta);
    row("lambda", ck, "", l, "", st, r.lambda);
    row("epsilon", ck, "", l, "", st, r.epsilon);
  }
  const auto& deg = m.drift_log.degradation_table();
  for (std::size_t l = 0; l < deg.size(); ++l)
    for (std::size_t e = 0; e < deg[l].size(); ++e)
      row("degradation", str(T), "", str(l), str(e), "", deg[l][e]);

  for (std::size_t t = 0; t < m.probes.size(); ++t) {
    if (!m.probes[t]) continue;
    row("probe_accuracy", str(t + 1), "1", "", "", "", m.probes[t]->accuracy);
    for (std::size_t k = 0; k < m.probes[t]->entropy_trace.size(); ++k)
      row("probe_entropy", str(t + 1), "1", "", "", str(k), m.probes[t]->entropy_trace[k]);
  }
  return table.render();
}

json seed_summary(std::uint64_t seed, const RunResult& result, const std::optional<std::string>& csv_path,
                  const std::vector<std::string>& snapshot_paths) {
  const RunMetrics& m = result.metrics;
  const std::size_t T = m.accuracy.tasks();
  json matrix = json::array(), finals = json::array();
  for (std::size_t s = 0; s < T; ++s) {
    json row = json::array();
    for (std::size_t t = 0; t < T; ++t) row.push_back(number_or_null(m.accuracy.at(s, t)));
    matrix.push_back(row);
    finals.push_back(m.accuracy.at(s, T - 1));
  }
  json frozen = json::array(), skipped = json::array(), post = json::array(), fexp = json::array();
  for (const auto& task : m.tasks) {
    frozen.push_back(task.frozen_counts);
    skipped.push_back(task.skipped_expert_grads);
    post.push_back(task.post_freeze_batches);
    fexp.push_back(task.frozen_expert_batches);
  }
  json probes = json::array();
  for (const auto& p : m.probes) probes.push_back(p ? json(p->accuracy) : json(nullptr));
  return {{"seed", seed},
          {"final_average", m.final_average},
          {"final_accuracies", finals},
          {"accuracy_matrix", matrix},
          {"drift_trace", m.drift_trace},
          {"entropy_trace", m.entropy_trace},
          {"frozen_counts", frozen},
          {"skipped_expert_grads", skipped},
          {"post_freeze_batches", post},
          {"frozen_expert_batches", fexp},
          {"probe_accuracy", probes},
          {"frozen_tensors_unchanged", frozen_tensors_unchanged(m)},
          {"base_unchanged", m.base_unchanged},
          {"metrics_csv", csv_path ? json(*csv_path) : json(nullptr)},
          {"snapshots", snapshot_paths}};
}

int cmd_run(const RunOptions& options, std::ostream& out, std::ostream& err) {
  RunConfig config;
  try {
    config = resolve_config(options);
  } catch (const ConfigError& e) {
    report_config_error(e, err);
    return kExitInvalid;
  }
  try {
    const fs::path dir = config.output.directory;
    std::vector<RunSpec> specs;
    for (auto seed : config.seeds) specs.push_back(config.run_spec(seed));
    const std::vector<RunResult> results = run_parallel(specs, worker_count(specs.size()));

    // Written first so a probe can regenerate the stream from the run directory.
    atomic_write(dir / "config.json", config_to_json(config).dump(2) + "\n");
    json seeds = json::array();
    std::vector<double> averages, drifts, probes;
    for (std::size_t i = 0; i < results.size(); ++i) {
      const std::uint64_t seed = config.seeds[i];
      const RunResult& r = results[i];
      std::optional<std::string> csv;
      if (config.output.csv) {
        const fs::path p = seed_dir(dir, seed) / "metrics.csv";
        atomic_write(p, metrics_csv(seed, r));
        csv = fs::relative(p, dir).generic_string();
      }
      std::vector<std::string> snaps;
      for (std::size_t t = 0; t < r.snapshots.size(); ++t) {
        const fs::path p = snapshot_path(dir, seed, t + 1);
        atomic_write(p, std::span<const std::uint8_t>(r.snapshots[t]));
        snaps.push_back(fs::relative(p, dir).generic_string());
      }
      seeds.push_back(seed_summary(seed, r, csv, snaps));
      averages.push_back(r.metrics.final_average);
      drifts.push_back(r.metrics.final_task1_drift());
      probes.push_back(final_probe_accuracy(r.metrics));
      out << "seed " << seed << ": final average accuracy " << format_number(r.metrics.final_average)
          << ", task-1 routing drift " << format_number(drifts.back()) << "\n";
    }
    if (config.output.json) {
      const json summary{{"format", "stabmoe-summary"},
                         {"version", 1},
                         {"toggles", toggles_json(config.train.toggles)},
                         {"tasks", config.stream.n_tasks},
                         {"layers", config.model.layers},
                         {"experts", config.model.n_experts},
                         {"seeds", seeds},
                         {"aggregate",
                          {{"final_average", mean_std_json(averages)},
                           {"task1_drift", mean_std_json(drifts)},
                           {"final_probe_accuracy", mean_std_json(probes)}}}};
      const auto problems = validate_json(summary_schema(), summary);
      if (!problems.empty()) {
        err << "error: summary does not match its schema\n";
        for (const auto& p : problems) err << "  " << p << "\n";
        return kExitFailure;
      }
      atomic_write(dir / "summary.json", summary.dump(2) + "\n");
    }
    out << "wrote " << dir.string() << "\n";
    return kExitOk;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

const std::vector<LadderRung>& toggle_ladder() {
  static const std::vector<LadderRung> ladder{{"baseline", {false, false, false}},
                                              {"router", {true, false, false}},
                                              {"router+expert", {true, true, false}},
                                              {"full", {true, true, true}}};
  return ladder;
}

LadderResult run_ladder(const RunConfig& config, std::size_t workers) {
  std::vector<RunSpec> specs;
  for (const auto& rung : toggle_ladder())
    for (auto seed : config.seeds) {
      RunSpec spec = config.run_spec(seed);
      spec.train.toggles = rung.toggles;
      spec.keep_snapshots = false;
      spec.probe_every_task = false;
      specs.push_back(std::move(spec));
    }
  std::vector<RunResult> flat = run_parallel(specs, workers);
  LadderResult ladder;
  ladder.seeds = config.seeds;
  const std::size_t n = config.seeds.size();
  for (std::size_t r = 0; r < toggle_ladder().size(); ++r)
    ladder.runs.emplace_back(std::make_move_iterator(flat.begin() + static_cast<std::ptrdiff_t>(r * n)),
                             std::make_move_iterator(flat.begin() + static_cast<std::ptrdiff_t>((r + 1) * n)));
  return ladder;
}

json comparison_json(const LadderResult& ladder) {
  json configs = json::array();
  for (std::size_t r = 0; r < ladder.runs.size(); ++r) {
    std::vector<double> averages, drifts, probes;
    json per_seed = json::array();
    for (std::size_t i = 0; i < ladder.runs[r].size(); ++i) {
      const RunMetrics& m = ladder.runs[r][i].metrics;
      averages.push_back(m.final_average);
      drifts.push_back(m.final_task1_drift());
      probes.push_back(final_probe_accuracy(m));
      per_seed.push_back({{"seed", ladder.seeds[i]},
                          {"final_average", averages.back()},
                          {"task1_drift", drifts.back()},
                          {"final_probe_accuracy", probes.back()},
                          {"frozen_experts", total_frozen(m)}});
    }
    configs.push_back({{"name", toggle_ladder()[r].name},
                       {"toggles", toggles_json(toggle_ladder()[r].toggles)},
                       {"final_average", mean_std_json(averages)},
                       {"task1_drift", mean_std_json(drifts)},
                       {"final_probe_accuracy", mean_std_json(probes)},
                       {"per_seed", per_seed}});
  }
  return {{"format", "stabmoe-comparison"}, {"version", 1}, {"seeds", ladder.seeds}, {"configurations", configs}};
}

int cmd_compare(const RunOptions& options, std::ostream& out, std::ostream& err) {
  RunConfig config;
  try {
    config = resolve_config(options);
  } catch (const ConfigError& e) {
    report_config_error(e, err);
    return kExitInvalid;
  }
  try {
    const LadderResult ladder = run_ladder(config, worker_count(4 * config.seeds.size()));
    const json doc = comparison_json(ladder);
    const auto problems = validate_json(comparison_schema(), doc);
    if (!problems.empty()) {
      err << "error: comparison does not match its schema\n";
      for (const auto& p : problems) err << "  " << p << "\n";
      return kExitFailure;
    }
    const fs::path path = fs::path(config.output.directory) / "comparison.json";
    atomic_write(path, doc.dump(2) + "\n");
    for (const auto& c : doc["configurations"])
      out << c["name"].get<std::string>() << ": final average accuracy "
          << format_number(c["final_average"]["mean"].get<double>()) << " +/- "
          << format_number(c["final_average"]["std"].get<double>()) << ", task-1 drift "
          << format_number(c["task1_drift"]["mean"].get<double>()) << "\n";
    out << "wrote " << path.string() << "\n";
    return kExitOk;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int cmd_probe(const ProbeOptions& options, std::ostream& out, std::ostream& err) {
  const fs::path dir = options.run_dir;
  RunConfig config;
  try {
    config = load_config((dir / "config.json").string());
  } catch (const ConfigError& e) {
    report_config_error(e, err);
    return kExitInvalid;
  }
  const std::uint64_t seed = options.seed.value_or(config.seeds.front());
  if (std::find(config.seeds.begin(), config.seeds.end(), seed) == config.seeds.end()) {
    err << "error: seed " << seed << " is not part of the run in " << dir.string() << "\n";
    return kExitInvalid;
  }
  const std::size_t T = config.stream.n_tasks;
  std::vector<std::size_t> tasks;
  if (options.task) {
    if (*options.task < 1 || *options.task > T) {
      err << "error: task index " << *options.task << " out of range [1, " << T << "]\n";
      return kExitInvalid;
    }
    tasks.push_back(*options.task);
  } else {
    for (std::size_t t = 1; t <= T; ++t) tasks.push_back(t);
  }
  try {
    const RunSpec spec = config.run_spec(seed);
    StreamConfig stream = spec.stream;
    const std::vector<TaskSpec> specs = make_stream(stream);
    const std::size_t epochs = options.epochs.value_or(config.train.probe_epochs);
    CsvTable table({"seed", "checkpoint", "steps", "accuracy", "entropy_before", "entropy_after"});
    for (std::size_t t : tasks) {
      const fs::path snap = snapshot_path(dir, seed, t);
      if (!fs::exists(snap)) {
        err << "error: missing snapshot " << snap.string() << "\n";
        return kExitFailure;
      }
      const MoeModel model = restore(read_bytes(snap));
      const ProbeResult r = rerouting_probe(model, specs.front(), spec.train, epochs);
      table.add_row({str(seed), str(t), str(r.steps), format_number(r.accuracy),
                     format_number(r.entropy_trace.front()), format_number(r.entropy_trace.back())});
      out << "checkpoint " << t << ": recovered task-1 accuracy " << format_number(r.accuracy) << "\n";
    }
    const fs::path path = seed_dir(dir, seed) / "probe.csv";
    atomic_write(path, table.render());
    out << "wrote " << path.string() << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int cmd_validate_config(const std::string& path, std::ostream& out, std::ostream& err) {
  try {
    const RunConfig config = load_config(path);
    out << path << ": ok (" << config.stream.n_tasks << " tasks, " << config.seeds.size() << " seeds)\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    report_config_error(e, err);
    return kExitInvalid;
  }
}

int cmd_validate_output(const std::string& path, std::ostream& out, std::ostream& err) {
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const std::exception& e) {
    err << "error: " << path << ": " << e.what() << "\n";
    return kExitInvalid;
  }
  const std::string format = doc.is_object() ? doc.value("format", "") : "";
  const json* schema = nullptr;
  if (format == "stabmoe-summary") schema = &summary_schema();
  else if (format == "stabmoe-comparison") schema = &comparison_schema();
  if (schema == nullptr) {
    err << "error: " << path << ": unrecognized \"format\" field\n";
    return kExitInvalid;
  }
  const auto problems = validate_json(*schema, doc);
  if (!problems.empty()) {
    err << "error: " << path << " does not match the " << format << " schema\n";
    for (const auto& p : problems) err << "  " << p << "\n";
    return kExitInvalid;
  }
  out << path << ": valid " << format << "\n";
  return kExitOk;
}

int cmd_export_split(const ExportOptions& options, std::ostream& out, std::ostream& err) {
  RunConfig config;
  try {
    config = load_config(options.config_path);
  } catch (const ConfigError& e) {
    report_config_error(e, err);
    return kExitInvalid;
  }
  if (options.task < 1 || options.task > config.stream.n_tasks) {
    err << "error: task index " << options.task << " out of range [1, " << config.stream.n_tasks << "]\n";
    return kExitInvalid;
  }
  try {
    const std::vector<TaskSpec> specs = make_stream(config.run_spec(options.seed).stream);
    const LabeledBatch data = full_split(specs[options.task - 1], options.split);
    std::vector<std::string> header{"label"};
    for (Index c = 0; c < data.inputs.cols(); ++c) header.push_back("x" + std::to_string(c));
    CsvTable table(header);
    for (Index r = 0; r < data.inputs.rows(); ++r) {
      std::vector<std::string> cells{std::to_string(data.labels[static_cast<std::size_t>(r)])};
      for (Index c = 0; c < data.inputs.cols(); ++c) cells.push_back(format_number(data.inputs(r, c)));
      table.add_row(std::move(cells));
    }
    atomic_write(options.out_path, table.render());
    out << "wrote " << data.size() << " rows to " << options.out_path << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace stabmoe
