// profilebench: command-line front end for the controllable-student harness.

#include <CLI11.hpp>

#include <iostream>
#include <profilebench/profilebench.hpp>

namespace pb = profilebench;
namespace fs = std::filesystem;

namespace {

struct RunFlags {
  std::string config;
  std::string run_id;
  std::string bank;
  std::vector<std::string> backends;
  std::vector<std::string> strategies;
  std::string profiles;
  std::optional<std::uint64_t> seed;
  std::string parse_mode;
  std::optional<std::size_t> workers;
  bool resume = false;
  std::string templates;
  std::string pool;
  std::string baseline_style;
  std::optional<std::size_t> replicates;
  std::optional<std::size_t> stop_after;
};

struct Globals {
  std::string out = "out";
};

void add_run_flags(CLI::App* cmd, RunFlags& f, bool with_profiles) {
  cmd->add_option("--config", f.config, "Run config JSON; flags below override its fields");
  cmd->add_option("--run-id", f.run_id, "Run identifier (log file name)");
  cmd->add_option("--bank", f.bank, "Item-bank JSON file");
  cmd->add_option("--backend", f.backends, "Backend JSON file, or 'synthetic[:<id>]'")->delimiter(',');
  cmd->add_option("--strategy", f.strategies, "instruction_only | example_only | hybrid")->delimiter(',');
  if (with_profiles)
    cmd->add_option("--profiles", f.profiles, "enumerate | sample:<n>[:<seed>] | comma-separated bit strings");
  cmd->add_option("--seed", f.seed, "Seed for synthetic backends and profile sampling");
  cmd->add_option("--parse-mode", f.parse_mode, "strict | lenient");
  cmd->add_option("--workers", f.workers, "Concurrent workers");
  cmd->add_flag("--resume", f.resume, "Continue an existing run with the same configuration");
  cmd->add_option("--templates", f.templates, "Directory with profile/instructions/examples/question templates");
  cmd->add_option("--pool", f.pool, "Demonstration example pool JSON");
  cmd->add_option("--baseline-style", f.baseline_style, "scaffold | plain");
  cmd->add_option("--replicates", f.replicates, "Student instances per profile");
  cmd->add_option("--stop-after", f.stop_after, "Stop after this many events (simulates an interruption)")
      ->group("");
}

pb::BackendConfig backend_from_flag(const std::string& spec, std::optional<std::uint64_t> seed) {
  if (spec == "synthetic" || spec.rfind("synthetic:", 0) == 0) {
    pb::BackendConfig c;
    c.backend_id = spec == "synthetic" ? "synthetic" : spec.substr(10);
    c.kind = pb::BackendKind::Synthetic;
    c.synthetic.seed = seed.value_or(0);
    return c;
  }
  auto c = pb::backend_config_from_json(pb::read_json_file(spec));
  if (seed && c.kind == pb::BackendKind::Synthetic) c.synthetic.seed = *seed;
  return c;
}

pb::RunConfig build_config(const RunFlags& f, const Globals& g, const std::string& default_prefix) {
  pb::RunConfig c;
  c.runs_dir = fs::path(g.out) / "runs";
  c.cache_dir = fs::path(g.out) / "cache";
  if (!f.config.empty()) {
    const fs::path path(f.config);
    c = pb::RunConfig::from_json(pb::read_json_file(path), path.parent_path());
    if (!pb::read_json_file(path).contains("runs_dir")) c.runs_dir = fs::path(g.out) / "runs";
    if (!pb::read_json_file(path).contains("cache_dir")) c.cache_dir = fs::path(g.out) / "cache";
  }
  if (!f.run_id.empty()) c.run_id = f.run_id;
  if (!f.bank.empty()) c.bank_path = f.bank;
  if (!f.backends.empty()) {
    c.backends.clear();
    for (const auto& b : f.backends) c.backends.push_back(backend_from_flag(b, f.seed));
  } else if (f.seed) {
    for (auto& b : c.backends)
      if (b.kind == pb::BackendKind::Synthetic) b.synthetic.seed = *f.seed;
  }
  if (!f.strategies.empty()) {
    c.strategies.clear();
    for (const auto& s : f.strategies) {
      auto parsed = pb::parse_strategy(s);
      if (!parsed) throw pb::Error(pb::ErrorCode::UsageError, "unknown strategy '" + s + "'");
      c.strategies.push_back(*parsed);
    }
  }
  if (!f.profiles.empty()) {
    c.profiles = pb::ProfileSource::parse(f.profiles);
    if (c.profiles.kind == pb::ProfileSource::Kind::Sample && f.seed && f.profiles.find(':', 7) == std::string::npos)
      c.profiles.seed = *f.seed;
  }
  if (!f.parse_mode.empty()) {
    auto mode = pb::parse_parse_mode(f.parse_mode);
    if (!mode) throw pb::Error(pb::ErrorCode::UsageError, "unknown parse mode '" + f.parse_mode + "'");
    c.parse_mode = *mode;
  }
  if (f.workers) c.workers = *f.workers;
  if (!f.templates.empty()) c.templates_dir = f.templates;
  if (!f.pool.empty()) c.pool_path = f.pool;
  if (!f.baseline_style.empty()) {
    if (f.baseline_style != "plain" && f.baseline_style != "scaffold")
      throw pb::Error(pb::ErrorCode::UsageError, "--baseline-style must be plain or scaffold");
    c.baseline_style = f.baseline_style == "plain" ? pb::BaselineStyle::Plain : pb::BaselineStyle::Scaffold;
  }
  if (f.replicates) c.replicates = *f.replicates;
  if (c.run_id.empty()) c.run_id = default_prefix;
  if (c.bank_path.empty()) throw pb::Error(pb::ErrorCode::UsageError, "--bank (or a config file) is required");
  if (c.backends.empty()) c.backends.push_back(backend_from_flag("synthetic", f.seed));
  if (c.strategies.empty()) c.strategies.push_back(pb::PromptStrategy::Hybrid);
  return c;
}

void print_summary(const pb::RunConfig& c, const pb::RunSummary& s) {
  for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << "run " << c.run_id << ": " << s.events << " new events, " << s.skipped << " already logged, "
            << s.backend_calls << " backend calls, " << s.cache_hits << " cache hits, " << s.failures
            << " failures, " << s.invalid << " invalid answers\n";
  const auto run = pb::load_run(c.runs_dir, c.run_id);
  std::size_t baseline = 0, sweep = 0;
  for (const auto& e : run.events) (e.stage == pb::Stage::Baseline ? baseline : sweep)++;
  std::cout << "log: " << pb::run_log_path(c.runs_dir, c.run_id).string() << " (" << baseline
            << " baseline events, " << sweep << " sweep events)\n";
}

pb::RunSummary execute(const pb::RunConfig& c, const RunFlags& f) {
  pb::RunOptions opt;
  opt.resume = f.resume;
  opt.stop_after = f.stop_after;
  return pb::run_protocol(c, opt);
}

int fail(const pb::Error& e, int status = 1) {
  std::cerr << pb::json{{"error", e.code_name()}, {"message", e.what()}}.dump() << '\n';
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"profilebench: controllable imperfect-student benchmark harness"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--out", g.out, "Working directory for runs/, cache/ and reports/")->capture_default_str();

  // validate-bank
  std::string bank_path, pool_path;
  auto* validate = app.add_subcommand("validate-bank", "Check an item bank (and optionally an example pool)");
  validate->add_option("--bank", bank_path, "Item-bank JSON file")->required();
  validate->add_option("--pool", pool_path, "Example pool to check for leakage and coverage");

  RunFlags baseline_flags, sweep_flags, ablate_flags;
  auto* run_baseline = app.add_subcommand("run-baseline", "Perfect-student baseline only");
  add_run_flags(run_baseline, baseline_flags, false);
  auto* run_sweep = app.add_subcommand("run-sweep", "Baseline plus a profile sweep");
  add_run_flags(run_sweep, sweep_flags, true);
  auto* ablate = app.add_subcommand("ablate", "Baseline plus profile sweeps under several strategies");
  add_run_flags(ablate, ablate_flags, true);

  std::vector<std::string> run_ids;
  std::string runs_dir, report_dir, agg = "mean";
  bool charts = false;
  double threshold = 1.0, ridge = pb::kDefaultRidge;
  auto add_report_inputs = [&](CLI::App* cmd) {
    cmd->add_option("--run", run_ids, "Run id(s) to read")->required()->delimiter(',');
    cmd->add_option("--runs-dir", runs_dir, "Directory holding run logs (default <out>/runs)");
    cmd->add_option("--report-dir", report_dir, "Output directory (default <out>/reports)");
  };
  auto* calibrate = app.add_subcommand("calibrate", "Fit the Gaussian calibration model per backend/grade/strategy");
  add_report_inputs(calibrate);
  calibrate->add_option("--ridge", ridge, "Ridge added to the forgotten-skill covariance block");
  auto* report = app.add_subcommand("report", "Export all report tables");
  add_report_inputs(report);
  report->add_flag("--charts", charts, "Also write SVG charts");
  report->add_option("--agg", agg, "RMSE aggregation across profiles: mean | median");
  report->add_option("--threshold", threshold, "Suspect-item cross-backend error threshold");
  report->add_option("--ridge", ridge, "Calibration ridge");
  auto* flag_items = app.add_subcommand("flag-items", "List items failed by several backends' baselines");
  add_report_inputs(flag_items);
  flag_items->add_option("--threshold", threshold, "Fraction of backends that must fail the item");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail(pb::Error(pb::ErrorCode::UsageError, e.what()), 2);
  }

  const fs::path runs = runs_dir.empty() ? fs::path(g.out) / "runs" : fs::path(runs_dir);
  const fs::path reports = report_dir.empty() ? fs::path(g.out) / "reports" : fs::path(report_dir);

  try {
    if (*validate) {
      const auto bank = pb::load_item_bank(bank_path);
      for (const auto& w : bank.warnings()) std::cerr << "warning: " << w << '\n';
      if (!pool_path.empty()) {
        const auto pool = pb::load_example_pool(pool_path, bank);
        std::cout << "example pool: " << pool.entries().size() << " entries, no leakage\n";
      }
      std::cout << bank.skill_count() << " skills, " << bank.items().size() << " items\n";
      return 0;
    }
    if (*run_baseline) {
      auto c = build_config(baseline_flags, g, "baseline");
      c.include_sweep = false;
      print_summary(c, execute(c, baseline_flags));
      return 0;
    }
    if (*run_sweep) {
      auto c = build_config(sweep_flags, g, "sweep");
      print_summary(c, execute(c, sweep_flags));
      return 0;
    }
    if (*ablate) {
      if (ablate_flags.strategies.empty() && ablate_flags.config.empty())
        ablate_flags.strategies = {"instruction_only", "example_only", "hybrid"};
      auto c = build_config(ablate_flags, g, "ablation");
      std::vector<std::string> warnings;
      if (pb::dedupe_strategies(c.strategies, &warnings).size() < 2)
        throw pb::Error(pb::ErrorCode::UsageError, "ablate needs at least two distinct strategies");
      print_summary(c, execute(c, ablate_flags));
      return 0;
    }

    const auto evidence = pb::load_evidence(runs, run_ids);
    if (*calibrate) {
      fs::create_directories(reports);
      std::size_t written = 0;
      for (const auto& [grade, gd] : evidence.grades()) {
        std::vector<pb::ResponseEvent> sweep;
        for (const auto& e : gd.events)
          if (e.stage == pb::Stage::Sweep) sweep.push_back(e);
        std::map<std::pair<std::string, pb::PromptStrategy>, std::vector<std::vector<double>>> cohorts;
        for (const auto& s : pb::aggregate_students(sweep, gd.bank))
          cohorts[{s.backend_id, s.strategy}].emplace_back(s.accuracy.values().begin(), s.accuracy.values().end());
        for (const auto& [key, vecs] : cohorts) {
          const auto model = pb::fit_calibration(std::span<const std::vector<double>>(vecs), ridge);
          auto matrix = [](const Eigen::MatrixXd& m) {
            pb::json rows = pb::json::array();
            for (Eigen::Index i = 0; i < m.rows(); ++i) {
              pb::json row = pb::json::array();
              for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
              rows.push_back(row);
            }
            return rows;
          };
          pb::json skills = pb::json::array(), zero = pb::json::array();
          for (const auto& s : gd.bank.taxonomy()) skills.push_back(s.id);
          for (auto i : model.zero_variance) zero.push_back(gd.bank.taxonomy()[i].id);
          const pb::json out = {{"backend", key.first},
                                {"grade", grade},
                                {"strategy", pb::strategy_name(key.second)},
                                {"skills", skills},
                                {"n_students", model.students},
                                {"ridge", model.ridge},
                                {"mean", std::vector<double>(model.mean.data(), model.mean.data() + model.mean.size())},
                                {"covariance", matrix(model.covariance)},
                                {"correlation", matrix(model.correlation)},
                                {"zero_variance_skills", zero}};
          const auto name = "calibration_" + key.first + "_g" + std::to_string(grade) + "_" +
                            std::string(pb::strategy_name(key.second)) + ".json";
          pb::write_text_file(reports / name, out.dump(2) + "\n");
          std::cout << "wrote " << (reports / name).string() << " (" << model.students << " students)\n";
          ++written;
        }
      }
      if (written == 0) throw pb::Error(pb::ErrorCode::IncompleteRuns, "no sweep with at least 2 students found");
      return 0;
    }
    if (*report) {
      pb::ReportOptions opt;
      if (agg != "mean" && agg != "median") throw pb::Error(pb::ErrorCode::UsageError, "--agg must be mean or median");
      opt.aggregation = agg == "median" ? pb::Aggregation::Median : pb::Aggregation::Mean;
      opt.charts = charts;
      opt.suspect_threshold = threshold;
      opt.ridge = ridge;
      const auto bundle = pb::export_reports(evidence, reports, opt);
      std::cout << "wrote " << bundle.tables.size() << " tables";
      if (charts) std::cout << " and " << bundle.charts.size() << " charts";
      std::cout << " to " << reports.string() << '\n';
      return 0;
    }
    if (*flag_items) {
      std::vector<pb::ResponseEvent> all;
      for (const auto& [grade, gd] : evidence.grades()) all.insert(all.end(), gd.events.begin(), gd.events.end());
      const auto suspects = pb::flag_suspect_items(all, threshold);
      pb::Table t{{"grade", "item_id", "backends_wrong", "backends_total", "error_fraction"}, {}};
      for (const auto& s : suspects)
        t.rows.push_back({std::to_string(s.grade), s.item_id, std::to_string(s.backends_wrong),
                          std::to_string(s.backends_total), pb::format_number(s.error_fraction())});
      fs::create_directories(reports);
      pb::write_text_file(reports / "suspect_items.csv", t.to_csv());
      std::cout << suspects.size() << " suspect items\n";
      for (const auto& s : suspects)
        std::cout << "  g" << s.grade << " " << s.item_id << " (" << s.backends_wrong << "/" << s.backends_total
                  << " backends)\n";
      return 0;
    }
  } catch (const pb::Error& e) {
    return fail(e, e.code() == pb::ErrorCode::UsageError ? 2 : 1);
  } catch (const std::exception& e) {
    return fail(pb::Error(pb::ErrorCode::IoError, e.what()));
  }
  return 0;
}
