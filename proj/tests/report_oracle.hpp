#pragma once

// Recomputes every report cell from the raw JSONL logs (one pass, via
// oracle::LogDigest) and lists disagreements with the exported CSV files.

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"

namespace oracle {

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline Csv read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  Csv csv;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (first)
      csv.header = cells, first = false;
    else
      csv.rows.push_back(cells);
  }
  return csv;
}

class ReportChecker {
 public:
  ReportChecker(const LogDigest& d, std::filesystem::path dir, double ridge = 1e-6)
      : d_(d), dir_(std::move(dir)), ridge_(ridge) {
    build_cohorts();
  }

  std::vector<std::string> check_all() {
    check_metrics();
    check_losses();
    check_rmse();
    check_prediction();
    check_primary_tables();
    check_suspects();
    return problems_;
  }

  std::size_t cells_checked() const { return cells_; }

 private:
  using Student = LogDigest::Student;
  using CohortKey = std::tuple<int, std::string, std::string>;  // grade, backend, strategy

  void build_cohorts() {
    for (const auto& [key, s] : d_.students) cohorts_[{s.grade, s.backend, s.strategy}].push_back(&s);
    for (const auto& [key, members] : cohorts_) {
      if (members.size() < 2) continue;
      std::vector<Vec> rows;
      for (const auto* s : members) rows.push_back(LogDigest::accuracy(*s));
      moments_[key] = moments(rows);
    }
    static const std::vector<std::string> order{"instruction_only", "example_only", "hybrid"};
    std::map<std::pair<int, std::string>, std::set<std::string>> seen;
    for (const auto& [key, members] : cohorts_) seen[{std::get<0>(key), std::get<1>(key)}].insert(std::get<2>(key));
    for (const auto& [gb, strategies] : seen)
      for (const auto& s : order)
        if (strategies.contains(s)) primary_[gb] = s;
  }

  const Student& student(const std::string& backend, int grade, const std::string& strategy, const std::string& run,
                         const std::string& sid) {
    return d_.students.at({backend, grade, strategy, run, sid});
  }

  std::optional<double> ps_of(const Student& s) {
    auto it = moments_.find({s.grade, s.backend, s.strategy});
    const auto k = LogDigest::bits(s.profile);
    const auto r = std::count(k.begin(), k.end(), 1);
    if (it == moments_.end() || r == 0 || r == static_cast<long>(k.size())) return std::nullopt;
    return split(k, LogDigest::accuracy(s)).r - expected_retained_mean(it->second, k, ridge_);
  }

  void expect(const std::string& where, const std::string& cell, std::optional<double> want) {
    ++cells_;
    if (!want) {
      if (!cell.empty()) problems_.push_back(where + ": expected empty, got " + cell);
      return;
    }
    if (cell.empty()) {
      problems_.push_back(where + ": missing value");
      return;
    }
    const double got = std::stod(cell);
    if (std::abs(got - *want) > 5e-6 * std::max(1.0, std::abs(*want)))
      problems_.push_back(where + ": got " + cell + ", oracle " + std::to_string(*want));
  }

  void expect_rows(const std::string& file, std::size_t got, std::size_t want) {
    if (got != want)
      problems_.push_back(file + ": " + std::to_string(got) + " rows, oracle " + std::to_string(want));
  }

  void check_metrics() {
    const auto csv = read_csv(dir_ / "metrics.csv");
    expect_rows("metrics.csv", csv.rows.size(), d_.students.size());
    for (const auto& r : csv.rows) {
      const auto& s = student(r[0], std::stoi(r[1]), r[2], r[3], r[5]);
      const auto k = LogDigest::bits(s.profile);
      const auto a = LogDigest::accuracy(s);
      const auto sp = split(k, a);
      const std::string where = "metrics.csv " + r[5];
      if (r[4] != s.profile) problems_.push_back(where + ": profile mismatch");
      expect(where + " rmse", r[6], rmse(k, a));
      expect(where + " controllability", r[7], controllability(k, a));
      expect(where + " mean_retained", r[8], sp.has_r ? std::optional(sp.r) : std::nullopt);
      expect(where + " mean_forgotten", r[9], sp.has_f ? std::optional(sp.f) : std::nullopt);
      expect(where + " prediction_score", r[10], ps_of(s));
      double inv = 0, tot = 0;
      for (std::size_t i = 0; i < k.size(); ++i) inv += s.invalid[i], tot += s.total[i];
      expect(where + " invalid_rate", r[11], inv / tot);
    }
  }

  void check_losses() {
    const auto csv = read_csv(dir_ / "relative_loss.csv");
    std::size_t want = 0;
    for (const auto& [key, s] : d_.students) want += s.total.size();
    expect_rows("relative_loss.csv", csv.rows.size(), want);
    for (const auto& r : csv.rows) {
      const int grade = std::stoi(r[1]);
      const auto& s = student(r[0], grade, r[2], r[3], r[5]);
      const int i = d_.skill_pos.at({grade, r[6]});
      const double base = d_.baseline_accuracy(grade, r[0])[static_cast<std::size_t>(i)];
      const double obs = LogDigest::accuracy(s)[static_cast<std::size_t>(i)];
      const std::string where = "relative_loss.csv " + r[5] + " " + r[6];
      expect(where + " baseline", r[7], base);
      expect(where + " observed", r[8], obs);
      expect(where + " loss", r[9], relative_loss(base, obs, 1e-6));
    }
  }

  void check_rmse() {
    const auto csv = read_csv(dir_ / "rmse_by_strategy.csv");
    std::map<std::pair<int, std::string>, std::pair<Vec, Vec>> groups;
    for (const auto& [key, s] : d_.students) {
      const auto k = LogDigest::bits(s.profile);
      auto& [vals, chance] = groups[{s.grade, s.strategy}];
      vals.push_back(rmse(k, LogDigest::accuracy(s)));
      chance.push_back(rmse(k, Vec(k.size(), 0.25)));
    }
    expect_rows("rmse_by_strategy.csv", csv.rows.size(), groups.size());
    for (const auto& r : csv.rows) {
      const auto& [vals, chance] = groups.at({std::stoi(r[0]), r[1]});
      expect("rmse_by_strategy.csv " + r[0] + " " + r[1], r[2], std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size());
      expect("rmse_by_strategy.csv chance " + r[1], r[3],
             std::accumulate(chance.begin(), chance.end(), 0.0) / chance.size());
    }
  }

  void check_prediction() {
    const auto detail = read_csv(dir_ / "prediction_detail.csv");
    std::size_t want = 0;
    std::map<std::pair<int, std::string>, Vec> primary_ps;
    for (const auto& [key, s] : d_.students)
      if (auto ps = ps_of(s)) {
        ++want;
        if (primary_.at({s.grade, s.backend}) == s.strategy) primary_ps[{s.grade, s.backend}].push_back(*ps);
      }
    expect_rows("prediction_detail.csv", detail.rows.size(), want);
    for (const auto& r : detail.rows) {
      const auto& s = student(r[0], std::stoi(r[1]), r[2], r[3], r[5]);
      const auto k = LogDigest::bits(s.profile);
      const auto& m = moments_.at({s.grade, s.backend, s.strategy});
      const std::string where = "prediction_detail.csv " + r[5];
      expect(where + " actual", r[6], split(k, LogDigest::accuracy(s)).r);
      expect(where + " expected", r[7], expected_retained_mean(m, k, ridge_));
      expect(where + " ps", r[8], ps_of(s));
    }
    const auto scores = read_csv(dir_ / "prediction_scores.csv");
    expect_rows("prediction_scores.csv", scores.rows.size(), primary_ps.size());
    for (const auto& r : scores.rows) {
      const auto& v = primary_ps.at({std::stoi(r[1]), r[0]});
      expect("prediction_scores.csv " + r[0], r[2], std::accumulate(v.begin(), v.end(), 0.0) / v.size());
    }
  }

  void check_primary_tables() {
    const auto forgotten = read_csv(dir_ / "forgotten_by_skill.csv");
    const auto rf = read_csv(dir_ / "retained_forgotten.csv");
    std::map<std::pair<std::string, std::string>, Vec> forgot;  // backend, skill
    std::size_t rf_rows = 0;
    for (const auto& [gb, strategy] : primary_) {
      const auto& [grade, backend] = gb;
      const auto& members = cohorts_.at({grade, backend, strategy});
      const auto base = d_.baseline_accuracy(grade, backend);
      const auto& skills = d_.skills.at(grade);
      const std::size_t k = skills.size();
      double ro = 0, rb = 0, fo = 0, fb = 0;
      bool any_r = false, any_f = false;
      std::map<std::string, std::vector<Vec>> by_profile;
      std::vector<Vec> pooled;
      for (const auto* s : members) {
        const auto a = LogDigest::accuracy(*s);
        const auto bits = LogDigest::bits(s->profile);
        by_profile[s->profile].push_back(a);
        for (std::size_t i = 0; i < k; ++i) {
          if (bits[i]) {
            ro += a[i], rb += base[i], any_r = true;
          } else {
            fo += a[i], fb += base[i], any_f = true;
            forgot[{backend, skills[i]}].push_back(a[i]);
          }
        }
      }
      ++rf_rows;
      for (const auto& r : rf.rows) {
        if (r[0] != backend || std::stoi(r[1]) != grade) continue;
        expect("retained_forgotten.csv " + backend + " retained", r[2],
               any_r && rb > 0 ? std::optional(100.0 * ro / rb) : std::nullopt);
        expect("retained_forgotten.csv " + backend + " forgotten", r[3],
               any_f && fb > 0 ? std::optional(100.0 * fo / fb) : std::nullopt);
      }

      const auto heat = read_csv(dir_ / ("profile_heatmap_" + backend + "_g" + std::to_string(grade) + ".csv"));
      expect_rows("heatmap " + backend, heat.rows.size(), 2 * by_profile.size());
      for (const auto& r : heat.rows) {
        const auto& group = by_profile.at(r[0]);
        for (std::size_t i = 0; i < k; ++i) {
          double want = 0;
          if (r[1] == "target") {
            want = r[0][i] - '0';
          } else {
            for (const auto& a : group) want += a[i] / group.size();
          }
          expect("heatmap " + backend + " " + r[0] + " " + r[1], r[i + 2], want);
        }
      }

      const auto inf_path = dir_ / ("influence_" + backend + "_g" + std::to_string(grade) + ".csv");
      bool complete = k > 1;
      for (std::size_t i = 0; i < k; ++i) {
        std::string p(k, '1');
        p[i] = '0';
        complete = complete && by_profile.contains(p);
      }
      if (complete != std::filesystem::exists(inf_path)) problems_.push_back(inf_path.string() + ": presence mismatch");
      if (complete) {
        const auto inf = read_csv(inf_path);
        for (std::size_t i = 0; i < k; ++i) {
          std::string p(k, '1');
          p[i] = '0';
          const auto& group = by_profile.at(p);
          for (std::size_t j = 0; j < k; ++j) {
            double mean = 0;
            for (const auto& a : group) mean += a[j] / group.size();
            expect("influence " + backend, inf.rows[i][j + 1], mean - base[j]);
          }
        }
      }
    }
    expect_rows("retained_forgotten.csv", rf.rows.size(), rf_rows);
    expect_rows("forgotten_by_skill.csv", forgotten.rows.size(), forgot.size());
    for (const auto& r : forgotten.rows) {
      const auto& v = forgot.at({r[0], r[1]});
      expect("forgotten_by_skill.csv " + r[0] + " " + r[1], r[2], std::accumulate(v.begin(), v.end(), 0.0) / v.size());
    }

    for (const auto& [grade, skills] : d_.skills) {
      std::vector<Vec> pooled;
      for (const auto& [gb, strategy] : primary_)
        if (gb.first == grade)
          for (const auto* s : cohorts_.at({grade, gb.second, strategy})) pooled.push_back(LogDigest::accuracy(*s));
      const auto path = dir_ / ("correlation_g" + std::to_string(grade) + ".csv");
      if (pooled.size() < 2) continue;
      const auto corr = read_csv(path);
      const auto m = moments(pooled);
      for (std::size_t i = 0; i < skills.size(); ++i)
        for (std::size_t j = 0; j < skills.size(); ++j)
          expect("correlation_g" + std::to_string(grade), corr.rows[i][j + 1], m.corr[i][j]);
    }
  }

  void check_suspects() {
    const auto csv = read_csv(dir_ / "suspect_items.csv");
    std::map<int, std::set<std::string>> backends;
    for (const auto& [key, per] : d_.base_items)
      for (const auto& [b, wt] : per) backends[key.first].insert(b);
    std::size_t max_b = 0;
    for (const auto& [g, s] : backends) max_b = std::max(max_b, s.size());
    std::map<std::pair<int, std::string>, std::pair<std::size_t, std::size_t>> want;
    if (max_b >= 2)
      for (const auto& [key, per] : d_.base_items) {
        std::size_t wrong = 0;
        for (const auto& [b, wt] : per) wrong += 2 * wt.first > wt.second;
        const std::size_t total = backends[key.first].size();
        if (total >= 2 && wrong > 0 && static_cast<double>(wrong) / total >= 1.0) want[key] = {wrong, total};
      }
    expect_rows("suspect_items.csv", csv.rows.size(), want.size());
    for (const auto& r : csv.rows) {
      auto it = want.find({std::stoi(r[0]), r[1]});
      if (it == want.end()) {
        problems_.push_back("suspect_items.csv: unexpected " + r[1]);
        continue;
      }
      expect("suspect_items.csv " + r[1] + " wrong", r[2], static_cast<double>(it->second.first));
      expect("suspect_items.csv " + r[1] + " total", r[3], static_cast<double>(it->second.second));
    }
  }

  const LogDigest& d_;
  std::filesystem::path dir_;
  double ridge_;
  std::map<CohortKey, std::vector<const Student*>> cohorts_;
  std::map<CohortKey, Moments> moments_;
  std::map<std::pair<int, std::string>, std::string> primary_;
  std::vector<std::string> problems_;
  std::size_t cells_ = 0;
};

}  // namespace oracle
