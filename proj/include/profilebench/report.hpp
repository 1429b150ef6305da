#pragma once

// Report tables built from run logs. Each table is a list of string rows so
// the CSV files, their byte-for-byte reproducibility and the SVG charts all
// derive from one in-memory value.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "analytics.hpp"
#include "runner.hpp"

namespace profilebench {

/// Six significant digits, shortest general form; ties round half-even on
/// the exact binary value. Negative zero prints as "0".
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (v == 0.0) return "0";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 6);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_csv() const {
    std::string out;
    auto emit = [&](const std::vector<std::string>& row) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) out += ',';
        const auto& cell = row[i];
        if (cell.find_first_of(",\"\n") != std::string::npos) {
          out += '"';
          for (char c : cell) out += c == '"' ? std::string("\"\"") : std::string(1, c);
          out += '"';
        } else {
          out += cell;
        }
      }
      out += '\n';
    };
    emit(header);
    for (const auto& r : rows) emit(r);
    return out;
  }
};

enum class Aggregation { Mean, Median };

struct ReportOptions {
  Aggregation aggregation = Aggregation::Mean;
  bool charts = false;
  double suspect_threshold = 1.0;
  double ridge = kDefaultRidge;
  double loss_epsilon = kDefaultLossEpsilon;
};

/// Banks and events pooled from one or more run logs, grouped by grade.
class Evidence {
 public:
  struct Grade {
    ItemBank bank;
    std::vector<ResponseEvent> events;
  };

  void add(const LoadedRun& run) {
    const auto& bank = *run.bank;
    auto it = grades_.find(bank.grade());
    if (it == grades_.end()) {
      it = grades_.emplace(bank.grade(), Grade{bank, {}}).first;
    } else if (it->second.bank.digest() != bank.digest()) {
      throw Error(ErrorCode::IncompleteRuns, "runs use different item banks for grade " + std::to_string(bank.grade()));
    }
    it->second.events.insert(it->second.events.end(), run.events.begin(), run.events.end());
    run_ids_.push_back(run.header.at("run_id").get<std::string>());
  }

  const std::map<int, Grade>& grades() const { return grades_; }
  const std::vector<std::string>& run_ids() const { return run_ids_; }

 private:
  std::map<int, Grade> grades_;
  std::vector<std::string> run_ids_;
};

inline Evidence load_evidence(const fs::path& runs_dir, const std::vector<std::string>& run_ids) {
  Evidence ev;
  for (const auto& id : run_ids) ev.add(load_run(runs_dir, id));
  return ev;
}

struct ReportBundle {
  std::map<std::string, Table> tables;  ///< file name -> table
  std::map<std::string, std::string> charts;
  std::vector<std::string> run_ids;
};

namespace detail {

inline double aggregate(std::vector<double> values, Aggregation agg) {
  if (values.empty()) return std::nan("");
  if (agg == Aggregation::Mean) {
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
  }
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

inline double mean_of(const std::vector<double>& v) { return aggregate(v, Aggregation::Mean); }

struct GradeView {
  const ItemBank* bank = nullptr;
  std::vector<StudentRecord> sweep;
  std::map<std::string, SkillAccuracyVector> baseline;  ///< per backend, pooled baseline answers
  std::map<std::string, PromptStrategy> primary;        ///< per backend
};

inline GradeView view_grade(const Evidence::Grade& g) {
  GradeView v;
  v.bank = &g.bank;
  std::map<std::string, std::vector<ResponseEvent>> base_events;
  std::vector<ResponseEvent> sweep_events;
  for (const auto& e : g.events) {
    if (e.stage == Stage::Baseline)
      base_events[e.backend_id].push_back(e);
    else
      sweep_events.push_back(e);
  }
  for (auto& [backend, evs] : base_events) v.baseline.emplace(backend, accuracy_by_skill(evs, g.bank));
  v.sweep = aggregate_students(sweep_events, g.bank);

  std::map<std::string, std::set<PromptStrategy>> seen;
  for (const auto& s : v.sweep) seen[s.backend_id].insert(s.strategy);
  for (const auto& [backend, strategies] : seen) {
    if (!v.baseline.contains(backend))
      throw Error(ErrorCode::IncompleteRuns, "backend '" + backend + "' has sweep events but no baseline for grade " +
                                                 std::to_string(g.bank.grade()));
    v.primary[backend] = strategies.contains(PromptStrategy::Hybrid) ? PromptStrategy::Hybrid : *strategies.begin();
  }
  return v;
}

inline std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace detail

/// Builds every report table. Throws IncompleteRuns when the logs contain no
/// sweep, or a backend's sweep has no baseline to normalize against.
inline ReportBundle build_reports(const Evidence& evidence, const ReportOptions& opt = {}) {
  ReportBundle bundle;
  bundle.run_ids = evidence.run_ids();

  Table rmse_table{{"grade", "strategy", "mean_rmse", "chance_reference"}, {}};
  Table ps_table{{"backend", "grade", "ps"}, {}};
  Table ps_detail{{"backend", "grade", "strategy", "run_id", "profile", "student_id", "actual_retained", "expected_retained", "ps",
                   "mahalanobis"},
                  {}};
  Table forgotten{{"backend", "skill", "accuracy"}, {}};
  Table rf{{"backend", "grade", "retained_pct", "forgotten_pct"}, {}};
  Table metrics{{"backend", "grade", "strategy", "run_id", "profile", "student_id", "rmse", "controllability", "mean_retained",
                 "mean_forgotten", "prediction_score", "invalid_rate"},
                {}};
  Table losses{{"backend", "grade", "strategy", "run_id", "profile", "student_id", "skill", "baseline", "observed",
                "relative_loss"},
               {}};
  Table calib{{"scope", "grade", "strategy", "n_students", "ridge", "zero_variance_skills"}, {}};

  bool any_sweep = false;
  for (const auto& [grade, g] : evidence.grades()) {
    const auto view = detail::view_grade(g);
    const auto& taxonomy = g.bank.taxonomy();
    const auto k = taxonomy.size();
    const std::string grade_s = std::to_string(grade);
    if (!view.sweep.empty()) any_sweep = true;

    // Per (backend, strategy) calibration and per-student metrics.
    std::map<std::pair<std::string, PromptStrategy>, std::vector<const StudentRecord*>> cohorts;
    for (const auto& s : view.sweep) cohorts[{s.backend_id, s.strategy}].push_back(&s);

    std::map<std::pair<std::string, PromptStrategy>, std::vector<double>> ps_values;
    for (const auto& [key, students] : cohorts) {
      const auto& [backend, strategy] = key;
      std::optional<CalibrationModel> model;
      if (students.size() >= 2) {
        std::vector<std::vector<double>> vecs;
        for (const auto* s : students) vecs.push_back(detail::to_vector(s->accuracy.values()));
        model = fit_calibration(std::span<const std::vector<double>>(vecs), opt.ridge);
        std::string zv;
        for (auto i : model->zero_variance) zv += (zv.empty() ? "" : ";") + taxonomy[i].id;
        calib.rows.push_back({backend, grade_s, std::string(strategy_name(strategy)), std::to_string(students.size()),
                              format_number(opt.ridge), zv});
      }
      const auto& base = view.baseline.at(backend);
      for (const auto* s : students) {
        const auto a = s->accuracy.values();
        const auto split = retained_forgotten_split(s->profile, a);
        std::optional<double> ps;
        if (model) {
          if (auto er = expected_retention(*model, s->profile, a)) {
            ps = er->score;
            ps_values[key].push_back(er->score);
            ps_detail.rows.push_back({backend, grade_s, std::string(strategy_name(strategy)), s->run_id, s->profile.to_string(),
                                      s->student_id, format_number(er->actual), format_number(er->expected),
                                      format_number(er->score), format_number(er->distance)});
          }
        }
        metrics.rows.push_back({backend, grade_s, std::string(strategy_name(strategy)), s->run_id, s->profile.to_string(),
                                s->student_id, format_number(rmse(s->profile, a)),
                                format_number(controllability(s->profile, a)), format_optional(split.retained),
                                format_optional(split.forgotten), format_optional(ps), format_number(s->invalid_rate())});
        for (std::size_t i = 0; i < k; ++i)
          losses.rows.push_back({backend, grade_s, std::string(strategy_name(strategy)), s->run_id, s->profile.to_string(),
                                 s->student_id, taxonomy[i].id, format_number(base[i]), format_number(a[i]),
                                 format_number(relative_loss(base[i], a[i], opt.loss_epsilon))});
      }
    }

    // RMSE by strategy, pooled over backends.
    for (auto strategy : kAllStrategies) {
      std::vector<double> values, chance;
      for (const auto& s : view.sweep) {
        if (s.strategy != strategy) continue;
        values.push_back(rmse(s.profile, s.accuracy.values()));
        const std::vector<double> guess(k, kChanceAccuracy);
        chance.push_back(rmse(s.profile, guess));
      }
      if (values.empty()) continue;
      rmse_table.rows.push_back({grade_s, std::string(strategy_name(strategy)),
                                 format_number(detail::aggregate(values, opt.aggregation)),
                                 format_number(detail::mean_of(chance))});
    }

    // Tables restricted to each backend's primary strategy.
    std::vector<std::vector<double>> pooled;
    for (const auto& [backend, strategy] : view.primary) {
      std::vector<const StudentRecord*> students;
      for (const auto& s : view.sweep)
        if (s.backend_id == backend && s.strategy == strategy) students.push_back(&s);
      for (const auto* s : students) pooled.push_back(detail::to_vector(s->accuracy.values()));

      if (auto it = ps_values.find({backend, strategy}); it != ps_values.end())
        ps_table.rows.push_back({backend, grade_s, format_number(detail::mean_of(it->second))});

      // Heatmap: target row then observed row per profile (replicates averaged).
      Table heat{{"profile", "row"}, {}};
      for (const auto& s : taxonomy) heat.header.push_back(s.id);
      std::map<MasteryProfile, std::vector<const StudentRecord*>> by_profile;
      for (const auto* s : students) by_profile[s->profile].push_back(s);
      for (const auto& [profile, group] : by_profile) {
        std::vector<std::string> target{profile.to_string(), "target"}, observed{profile.to_string(), "observed"};
        for (std::size_t i = 0; i < k; ++i) {
          target.push_back(std::to_string(profile.bits()[i]));
          std::vector<double> vals;
          for (const auto* s : group) vals.push_back(s->accuracy[i]);
          observed.push_back(format_number(detail::mean_of(vals)));
        }
        heat.rows.push_back(std::move(target));
        heat.rows.push_back(std::move(observed));
      }
      bundle.tables["profile_heatmap_" + backend + "_g" + grade_s + ".csv"] = std::move(heat);

      // Forgotten-skill accuracy per skill.
      for (std::size_t i = 0; i < k; ++i) {
        std::vector<double> vals;
        for (const auto* s : students)
          if (!s->profile.retained(i)) vals.push_back(s->accuracy[i]);
        if (!vals.empty()) forgotten.rows.push_back({backend, taxonomy[i].id, format_number(detail::mean_of(vals))});
      }

      // Retained / forgotten relative to the same backend's baseline.
      const auto& base = view.baseline.at(backend);
      double r_obs = 0, r_base = 0, f_obs = 0, f_base = 0;
      bool any_r = false, any_f = false;
      for (const auto* s : students)
        for (std::size_t i = 0; i < k; ++i) {
          if (s->profile.retained(i)) {
            r_obs += s->accuracy[i];
            r_base += base[i];
            any_r = true;
          } else {
            f_obs += s->accuracy[i];
            f_base += base[i];
            any_f = true;
          }
        }
      auto pct = [](bool any, double obs, double b) -> std::string {
        if (!any || b <= 0.0) return "";
        return format_number(100.0 * obs / b);
      };
      rf.rows.push_back({backend, grade_s, pct(any_r, r_obs, r_base), pct(any_f, f_obs, f_base)});

      // Cross-skill influence, when every single-suppression profile was run.
      std::vector<std::vector<double>> single(k);
      bool complete = true;
      for (std::size_t i = 0; i < k && complete; ++i) {
        auto it = by_profile.find(single_suppression_profile(k, i, grade));
        if (it == by_profile.end()) {
          complete = false;
          break;
        }
        for (std::size_t j = 0; j < k; ++j) {
          std::vector<double> vals;
          for (const auto* s : it->second) vals.push_back(s->accuracy[j]);
          single[i].push_back(detail::mean_of(vals));
        }
      }
      if (complete && k > 1) {
        const auto delta = influence_matrix(base.values(), single);
        Table inf{{"suppressed"}, {}};
        for (const auto& s : taxonomy) inf.header.push_back(s.id);
        for (std::size_t i = 0; i < k; ++i) {
          std::vector<std::string> row{taxonomy[i].id};
          for (std::size_t j = 0; j < k; ++j)
            row.push_back(format_number(delta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
          inf.rows.push_back(std::move(row));
        }
        bundle.tables["influence_" + backend + "_g" + grade_s + ".csv"] = std::move(inf);
      }
    }

    // Grade-level correlation over the pooled primary-strategy students.
    if (pooled.size() >= 2) {
      const auto model = fit_calibration(std::span<const std::vector<double>>(pooled), opt.ridge);
      Table corr{{"skill"}, {}};
      for (const auto& s : taxonomy) corr.header.push_back(s.id);
      for (std::size_t i = 0; i < k; ++i) {
        std::vector<std::string> row{taxonomy[i].id};
        for (std::size_t j = 0; j < k; ++j)
          row.push_back(format_number(model.correlation(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
        corr.rows.push_back(std::move(row));
      }
      bundle.tables["correlation_g" + grade_s + ".csv"] = std::move(corr);
      std::string zv;
      for (auto i : model.zero_variance) zv += (zv.empty() ? "" : ";") + taxonomy[i].id;
      calib.rows.push_back({"pooled", grade_s, "primary", std::to_string(pooled.size()), format_number(opt.ridge), zv});
    }
  }
  if (!any_sweep) throw Error(ErrorCode::IncompleteRuns, "the runs contain no profile sweep");

  Table suspects{{"grade", "item_id", "backends_wrong", "backends_total", "error_fraction"}, {}};
  std::vector<ResponseEvent> all;
  for (const auto& [grade, g] : evidence.grades()) all.insert(all.end(), g.events.begin(), g.events.end());
  try {
    for (const auto& s : flag_suspect_items(all, opt.suspect_threshold))
      suspects.rows.push_back({std::to_string(s.grade), s.item_id, std::to_string(s.backends_wrong),
                               std::to_string(s.backends_total), format_number(s.error_fraction())});
  } catch (const Error& e) {
    if (e.code() != ErrorCode::TooFewBackends) throw;
  }

  bundle.tables["rmse_by_strategy.csv"] = std::move(rmse_table);
  bundle.tables["prediction_scores.csv"] = std::move(ps_table);
  bundle.tables["prediction_detail.csv"] = std::move(ps_detail);
  bundle.tables["forgotten_by_skill.csv"] = std::move(forgotten);
  bundle.tables["retained_forgotten.csv"] = std::move(rf);
  bundle.tables["metrics.csv"] = std::move(metrics);
  bundle.tables["relative_loss.csv"] = std::move(losses);
  bundle.tables["calibration_summary.csv"] = std::move(calib);
  bundle.tables["suspect_items.csv"] = std::move(suspects);
  return bundle;
}

// ---------------------------------------------------------------------------
// SVG charts, computed from the table cells

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline double cell_value(const std::string& s) { return s.empty() ? 0.0 : std::stod(s); }

}  // namespace detail

/// Grouped bars of mean RMSE per (grade, strategy) with the chance reference dashed.
inline std::string rmse_chart_svg(const Table& t) {
  constexpr int kBar = 36, kGap = 24, kHeight = 240, kTop = 30, kLeft = 50;
  const int width = kLeft + static_cast<int>(t.rows.size()) * (kBar + kGap) + kGap;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << kHeight + kTop + 60
      << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  svg << "<text x=\"" << kLeft << "\" y=\"18\" font-size=\"13\">Mean RMSE by prompting strategy</text>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + kHeight << "\" x2=\"" << width << "\" y2=\"" << kTop + kHeight
      << "\" stroke=\"black\"/>\n";
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const double v = detail::cell_value(row[2]);
    const double chance = detail::cell_value(row[3]);
    const int x = kLeft + kGap + static_cast<int>(r) * (kBar + kGap);
    const int h = static_cast<int>(std::lround(v * kHeight));
    const int cy = kTop + kHeight - static_cast<int>(std::lround(chance * kHeight));
    const char* fill = row[1] == "hybrid" ? "#2b6cb0" : row[1] == "example_only" ? "#dd6b20" : "#718096";
    svg << "<rect x=\"" << x << "\" y=\"" << kTop + kHeight - h << "\" width=\"" << kBar << "\" height=\"" << h
        << "\" fill=\"" << fill << "\"/>\n";
    svg << "<line x1=\"" << x - 4 << "\" y1=\"" << cy << "\" x2=\"" << x + kBar + 4 << "\" y2=\"" << cy
        << "\" stroke=\"black\" stroke-dasharray=\"4 3\"/>\n";
    svg << "<text x=\"" << x << "\" y=\"" << kTop + kHeight - h - 4 << "\">" << detail::svg_escape(row[2]) << "</text>\n";
    svg << "<text x=\"" << x << "\" y=\"" << kTop + kHeight + 14 << "\">G" << detail::svg_escape(row[0]) << "</text>\n";
    svg << "<text x=\"" << x << "\" y=\"" << kTop + kHeight + 28 << "\">" << detail::svg_escape(row[1]) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

/// Target strip and observed accuracy cells, one pair of rows per profile.
inline std::string heatmap_svg(const Table& t, const std::string& title) {
  constexpr int kCell = 40, kLeft = 110, kTop = 40;
  const int cols = static_cast<int>(t.header.size()) - 2;
  const int width = kLeft + cols * kCell + 20;
  const int height = kTop + static_cast<int>(t.rows.size()) * kCell / 2 + 20;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  svg << "<text x=\"10\" y=\"16\" font-size=\"13\">" << detail::svg_escape(title) << "</text>\n";
  for (int c = 0; c < cols; ++c)
    svg << "<text x=\"" << kLeft + c * kCell + 4 << "\" y=\"" << kTop - 6 << "\">"
        << detail::svg_escape(t.header[static_cast<std::size_t>(c) + 2]) << "</text>\n";
  int y = kTop;
  for (const auto& row : t.rows) {
    const bool target = row[1] == "target";
    const int h = target ? kCell / 4 : kCell * 3 / 4;
    svg << "<text x=\"10\" y=\"" << y + h - 4 << "\">" << detail::svg_escape(row[0] + " " + row[1]) << "</text>\n";
    for (int c = 0; c < cols; ++c) {
      const double v = std::clamp(detail::cell_value(row[static_cast<std::size_t>(c) + 2]), 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255 * (1.0 - v)));
      svg << "<rect x=\"" << kLeft + c * kCell << "\" y=\"" << y << "\" width=\"" << kCell << "\" height=\"" << h
          << "\" fill=\"rgb(" << shade << "," << shade << ",255)\" stroke=\"white\"/>\n";
      if (!target)
        svg << "<text x=\"" << kLeft + c * kCell + 6 << "\" y=\"" << y + h / 2 + 4 << "\">"
            << detail::svg_escape(row[static_cast<std::size_t>(c) + 2]) << "</text>\n";
    }
    y += h;
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << content;
}

/// Writes every table as CSV (plus optional SVG charts and a manifest naming
/// the source runs) under `out_dir`.
inline ReportBundle export_reports(const Evidence& evidence, const fs::path& out_dir, const ReportOptions& opt = {}) {
  ReportBundle bundle = build_reports(evidence, opt);
  if (opt.charts) {
    bundle.charts["rmse_by_strategy.svg"] = rmse_chart_svg(bundle.tables.at("rmse_by_strategy.csv"));
    for (const auto& [name, table] : bundle.tables)
      if (name.rfind("profile_heatmap_", 0) == 0) {
        const auto stem = name.substr(0, name.size() - 4);
        bundle.charts[stem + ".svg"] = heatmap_svg(table, stem);
      }
  }
  fs::create_directories(out_dir);
  for (const auto& [name, table] : bundle.tables) write_text_file(out_dir / name, table.to_csv());
  for (const auto& [name, svg] : bundle.charts) write_text_file(out_dir / name, svg);

  json files = json::array();
  for (const auto& [name, table] : bundle.tables) files.push_back(name);
  for (const auto& [name, svg] : bundle.charts) files.push_back(name);
  write_text_file(out_dir / "manifest.json",
                  json{{"runs", bundle.run_ids},
                       {"aggregation", opt.aggregation == Aggregation::Mean ? "mean" : "median"},
                       {"ridge", opt.ridge},
                       {"files", files}}
                          .dump(2) +
                      "\n");
  return bundle;
}

}  // namespace profilebench
