#include <gtest/gtest.h>

#include "report_oracle.hpp"
#include "test_support.hpp"

namespace pb = profilebench;
using namespace testing_support;

TEST(FormatNumber, SixSignificantDigits) {
  EXPECT_EQ(pb::format_number(0.0), "0");
  EXPECT_EQ(pb::format_number(-0.0), "0");
  EXPECT_EQ(pb::format_number(1.0), "1");
  EXPECT_EQ(pb::format_number(0.1), "0.1");
  EXPECT_EQ(pb::format_number(2.0 / 3.0), "0.666667");
  EXPECT_EQ(pb::format_number(0.7222222222), "0.722222");
  EXPECT_EQ(pb::format_number(100.0), "100");
  EXPECT_EQ(pb::format_number(123456789.0), "1.23457e+08");
  EXPECT_EQ(pb::format_number(-0.05), "-0.05");
  EXPECT_EQ(pb::format_number(1e-7), "1e-07");
  EXPECT_EQ(pb::format_optional(std::nullopt), "");
}

TEST(CsvTable, QuotesSpecialCells) {
  pb::Table t{{"a", "b"}, {{"x,y", "say \"hi\""}, {"plain", ""}}};
  EXPECT_EQ(t.to_csv(), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\nplain,\n");
}

namespace {

pb::RunConfig config(const TempDir& dir, const std::string& id, const std::string& bank, const std::string& pool) {
  pb::RunConfig c;
  c.run_id = id;
  c.bank_path = data_dir() / bank;
  c.pool_path = data_dir() / pool;
  c.runs_dir = dir / "runs";
  c.cache_dir = dir / "cache";
  c.strategies = {pb::PromptStrategy::Hybrid};
  c.backends = {synthetic_backend("alpha", 1), synthetic_backend("beta", 2, 0.8, 0.3)};
  return c;
}

}  // namespace

TEST(Reports, BaselineOnlyIsIncomplete) {
  TempDir dir;
  auto c = config(dir, "base", "g4_sample.json", "g4_example_pool.json");
  c.include_sweep = false;
  pb::run_protocol(c);
  EXPECT_PB_ERROR(pb::build_reports(pb::load_evidence(c.runs_dir, {"base"})), pb::ErrorCode::IncompleteRuns);
  EXPECT_PB_ERROR(pb::load_evidence(c.runs_dir, {"missing"}), pb::ErrorCode::RunNotFound);
}

TEST(Reports, SweepWithoutBaselineIsIncomplete) {
  TempDir dir;
  auto c = config(dir, "nobase", "g4_sample.json", "g4_example_pool.json");
  c.include_baseline = false;
  pb::run_protocol(c);
  EXPECT_PB_ERROR(pb::build_reports(pb::load_evidence(c.runs_dir, {"nobase"})), pb::ErrorCode::IncompleteRuns);
}

TEST(Reports, RetainedPercentIsHundredWhenConditionEqualsBaseline) {
  TempDir dir;
  auto c = config(dir, "ident", "g4_sample.json", "g4_example_pool.json");
  c.backends = {synthetic_backend("perfect", 1, 1.0, 0.0)};
  c.profiles = pb::ProfileSource::parse("1100,1010");
  pb::run_protocol(c);
  const auto bundle = pb::build_reports(pb::load_evidence(c.runs_dir, {"ident"}));
  const auto& rf = bundle.tables.at("retained_forgotten.csv");
  ASSERT_EQ(rf.rows.size(), 1u);
  EXPECT_EQ(rf.rows[0][2], "100");
  EXPECT_EQ(rf.rows[0][3], "0");
}

TEST(Reports, AblationGivesThreeRmseRowsPerGrade) {
  TempDir dir;
  auto g4 = config(dir, "abl4", "g4_sample.json", "g4_example_pool.json");
  g4.strategies.assign(pb::kAllStrategies.begin(), pb::kAllStrategies.end());
  auto g5 = config(dir, "abl5", "g5_sample.json", "g5_example_pool.json");
  g5.strategies = g4.strategies;
  pb::run_protocol(g4);
  pb::run_protocol(g5);
  const auto bundle = pb::build_reports(pb::load_evidence(g4.runs_dir, {"abl4", "abl5"}));
  const auto& t = bundle.tables.at("rmse_by_strategy.csv");
  ASSERT_EQ(t.rows.size(), 6u);
  std::map<std::string, int> per_grade;
  for (const auto& r : t.rows) ++per_grade[r[0]];
  EXPECT_EQ(per_grade["4"], 3);
  EXPECT_EQ(per_grade["5"], 3);
  for (const char* name : {"correlation_g4.csv", "correlation_g5.csv", "influence_alpha_g4.csv",
                           "influence_beta_g5.csv", "profile_heatmap_alpha_g4.csv", "prediction_scores.csv"})
    EXPECT_TRUE(bundle.tables.contains(name)) << name;
}

TEST(Reports, ExportIsByteStableAndMatchesOracle) {
  TempDir dir;
  auto c = config(dir, "stable", "g4_sample.json", "g4_example_pool.json");
  c.strategies = {pb::PromptStrategy::Hybrid, pb::PromptStrategy::InstructionOnly};
  c.backends.push_back(synthetic_backend("gamma", 3, 0.3, 0.2));
  pb::run_protocol(c);
  pb::ReportOptions opt;
  opt.charts = true;
  const auto ev = pb::load_evidence(c.runs_dir, {"stable"});
  pb::export_reports(ev, dir / "out1", opt);
  pb::export_reports(ev, dir / "out2", opt);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dir / "out1")) {
    ++files;
    EXPECT_EQ(read_file(entry.path()), read_file(dir / "out2" / entry.path().filename())) << entry.path();
  }
  EXPECT_GE(files, 15u);
  EXPECT_TRUE(fs::exists(dir / "out1" / "rmse_by_strategy.svg"));

  const auto manifest = pb::json::parse(read_file(dir / "out1" / "manifest.json"));
  EXPECT_EQ(manifest["runs"], pb::json::array({"stable"}));

  oracle::LogDigest digest;
  digest.add_log(pb::run_log_path(c.runs_dir, "stable").string());
  oracle::ReportChecker checker(digest, dir / "out1");
  const auto problems = checker.check_all();
  EXPECT_GT(checker.cells_checked(), 1000u);
  for (const auto& p : problems) ADD_FAILURE() << p;
}

TEST(Reports, SuspectItemsFromLowAccuracyBackends) {
  TempDir dir;
  auto c = config(dir, "suspect", "g4_sample.json", "g4_example_pool.json");
  c.backends = {synthetic_backend("a", 1, 0.0, 0.0), synthetic_backend("b", 2, 0.0, 0.0)};
  c.profiles = pb::ProfileSource::parse("1111");
  pb::run_protocol(c);
  const auto bundle = pb::build_reports(pb::load_evidence(c.runs_dir, {"suspect"}));
  const auto& t = bundle.tables.at("suspect_items.csv");
  EXPECT_EQ(t.rows.size(), 100u);
  EXPECT_EQ(t.rows[0][2], "2");
  EXPECT_EQ(t.rows[0][4], "1");
}

TEST(Reports, MedianAggregation) {
  TempDir dir;
  auto c = config(dir, "median", "g4_sample.json", "g4_example_pool.json");
  pb::run_protocol(c);
  const auto ev = pb::load_evidence(c.runs_dir, {"median"});
  pb::ReportOptions opt;
  opt.aggregation = pb::Aggregation::Median;
  const auto bundle = pb::build_reports(ev, opt);
  std::vector<double> values;
  for (const auto& r : bundle.tables.at("metrics.csv").rows) values.push_back(std::stod(r[6]));
  std::sort(values.begin(), values.end());
  const double median = 0.5 * (values[values.size() / 2 - 1] + values[values.size() / 2]);
  EXPECT_NEAR(std::stod(bundle.tables.at("rmse_by_strategy.csv").rows[0][2]), median, 1e-5);
}

TEST(Reports, DifferentBanksForOneGradeConflict) {
  TempDir dir;
  auto a = config(dir, "banka", "g4_sample.json", "g4_example_pool.json");
  pb::run_protocol(a);
  auto b = a;
  b.run_id = "bankb";
  b.bank_path = dir / "other.json";
  b.pool_path.reset();
  b.strategies = {pb::PromptStrategy::InstructionOnly};
  write_file(b.bank_path, bank_json(4, {3, 3}).dump());
  pb::run_protocol(b);
  EXPECT_PB_ERROR(pb::load_evidence(a.runs_dir, {"banka", "bankb"}), pb::ErrorCode::IncompleteRuns);
}
