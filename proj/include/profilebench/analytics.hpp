#pragma once

// Profile-alignment metrics, the Gaussian calibration model over
// student-level accuracy vectors, cross-skill influence and suspect-item
// detection. Everything here is a pure function of its inputs.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"

namespace profilebench {

inline constexpr double kDefaultLossEpsilon = 1e-6;
inline constexpr double kDefaultRidge = 1e-6;
inline constexpr double kCrossCovarianceZero = 1e-9;
inline constexpr double kChanceAccuracy = 0.25;

namespace detail {
inline void require_same_length(const MasteryProfile& k, std::span<const double> a) {
  if (k.size() != a.size() || k.size() == 0)
    throw Error(ErrorCode::LengthMismatch, "profile has " + std::to_string(k.size()) + " skills, accuracy vector has " +
                                               std::to_string(a.size()));
}
}  // namespace detail

/// Clamped proportional drop from the baseline: max(0, (a0 - a*) / max(a0, eps)).
inline double relative_loss(double baseline, double observed, double epsilon = kDefaultLossEpsilon) {
  return std::max(0.0, (baseline - observed) / std::max(baseline, epsilon));
}

/// Root mean squared distance between the binary target and observed accuracies.
inline double rmse(const MasteryProfile& k, std::span<const double> a) {
  detail::require_same_length(k, a);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(k.bits()[i]) - a[i];
    sum += d * d;
  }
  return std::sqrt(sum / static_cast<double>(a.size()));
}

/// Mean agreement: a_i on retained skills, 1 - a_i on forgotten ones.
inline double controllability(const MasteryProfile& k, std::span<const double> a) {
  detail::require_same_length(k, a);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ki = k.bits()[i];
    sum += ki * a[i] + (1.0 - ki) * (1.0 - a[i]);
  }
  return sum / static_cast<double>(a.size());
}

/// Positive when retained skills held up better than the calibration model expected.
constexpr double prediction_score(double actual_retained_mean, double expected_retained_mean) {
  return actual_retained_mean - expected_retained_mean;
}

/// Delta(i, j): change in skill j's accuracy when only skill i is suppressed.
using InfluenceMatrix = Eigen::MatrixXd;

/// `suppressed[i]` is the accuracy vector observed under the profile with only
/// skill i forgotten; an empty vector means that run is missing.
inline InfluenceMatrix influence_matrix(std::span<const double> baseline,
                                        const std::vector<std::vector<double>>& suppressed) {
  const auto k = baseline.size();
  if (suppressed.size() != k)
    throw Error(ErrorCode::MissingSuppressionRun, "need one suppression run per skill");
  InfluenceMatrix delta(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) {
    if (suppressed[i].empty())
      throw Error(ErrorCode::MissingSuppressionRun, "no run with only skill " + std::to_string(i) + " suppressed");
    if (suppressed[i].size() != k) throw Error(ErrorCode::LengthMismatch, "suppression run has the wrong length");
    for (std::size_t j = 0; j < k; ++j)
      delta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = suppressed[i][j] - baseline[j];
  }
  return delta;
}

/// The single-skill suppression profile for skill i.
inline MasteryProfile single_suppression_profile(std::size_t k, std::size_t i, int grade = 0) {
  std::vector<std::uint8_t> bits(k, 1);
  bits.at(i) = 0;
  return {grade, std::move(bits)};
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  Eigen::MatrixXd correlation;
  std::size_t students = 0;
  double ridge = kDefaultRidge;
  std::vector<std::size_t> zero_variance;  ///< skills whose correlations were set to 0

  std::size_t skill_count() const { return static_cast<std::size_t>(mean.size()); }
};

/// Sample mean, covariance (n - 1 denominator) and Pearson correlation of
/// student-level accuracy vectors. Zero-variance skills correlate 0 with others.
inline CalibrationModel fit_calibration(std::span<const std::vector<double>> vectors, double ridge = kDefaultRidge) {
  if (vectors.size() < 2) throw Error(ErrorCode::TooFewStudents, "calibration needs at least 2 students");
  const auto k = vectors.front().size();
  if (k == 0) throw Error(ErrorCode::LengthMismatch, "empty accuracy vectors");
  const auto n = static_cast<Eigen::Index>(vectors.size());
  const auto kk = static_cast<Eigen::Index>(k);

  Eigen::MatrixXd data(n, kk);
  for (Eigen::Index s = 0; s < n; ++s) {
    const auto& v = vectors[static_cast<std::size_t>(s)];
    if (v.size() != k) throw Error(ErrorCode::LengthMismatch, "accuracy vectors differ in length");
    for (Eigen::Index i = 0; i < kk; ++i) data(s, i) = v[static_cast<std::size_t>(i)];
  }

  CalibrationModel m;
  m.students = vectors.size();
  m.ridge = ridge;
  m.mean = data.colwise().mean().transpose();
  const Eigen::MatrixXd centered = data.rowwise() - m.mean.transpose();
  m.covariance = (centered.transpose() * centered) / static_cast<double>(n - 1);
  m.covariance = 0.5 * (m.covariance + m.covariance.transpose());

  m.correlation = Eigen::MatrixXd::Identity(kk, kk);
  for (Eigen::Index i = 0; i < kk; ++i)
    if (m.covariance(i, i) <= 0.0) m.zero_variance.push_back(static_cast<std::size_t>(i));
  for (Eigen::Index i = 0; i < kk; ++i)
    for (Eigen::Index j = 0; j < kk; ++j) {
      if (i == j) continue;
      const double vi = m.covariance(i, i), vj = m.covariance(j, j);
      m.correlation(i, j) =
          (vi <= 0.0 || vj <= 0.0) ? 0.0 : std::clamp(m.covariance(i, j) / std::sqrt(vi * vj), -1.0, 1.0);
    }
  return m;
}

inline CalibrationModel fit_calibration(std::span<const SkillAccuracyVector> vectors, double ridge = kDefaultRidge) {
  std::vector<std::vector<double>> plain;
  plain.reserve(vectors.size());
  for (const auto& v : vectors) plain.emplace_back(v.values().begin(), v.values().end());
  return fit_calibration(std::span<const std::vector<double>>(plain), ridge);
}

namespace detail {
inline std::vector<std::size_t> retained_complement(std::size_t k, std::span<const std::size_t> forgotten) {
  std::vector<bool> is_f(k, false);
  for (auto f : forgotten) {
    if (f >= k) throw Error(ErrorCode::BadSubset, "forgotten index out of range");
    if (is_f[f]) throw Error(ErrorCode::BadSubset, "duplicate forgotten index");
    is_f[f] = true;
  }
  std::vector<std::size_t> r;
  for (std::size_t i = 0; i < k; ++i)
    if (!is_f[i]) r.push_back(i);
  if (forgotten.empty() || r.empty())
    throw Error(ErrorCode::BadSubset, "forgotten set must be a non-empty proper subset of the skills");
  return r;
}

inline Eigen::MatrixXd block(const Eigen::MatrixXd& m, std::span<const std::size_t> rows,
                             std::span<const std::size_t> cols) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c)
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          m(static_cast<Eigen::Index>(rows[r]), static_cast<Eigen::Index>(cols[c]));
  return out;
}

inline Eigen::VectorXd slice(const Eigen::VectorXd& v, std::span<const std::size_t> idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t r = 0; r < idx.size(); ++r) out(static_cast<Eigen::Index>(r)) = v(static_cast<Eigen::Index>(idx[r]));
  return out;
}

/// Solves (block + ridge I) x = rhs; with ridge 0 a singular block is an error.
inline Eigen::VectorXd solve_block(const Eigen::MatrixXd& block, const Eigen::VectorXd& rhs, double ridge) {
  const Eigen::MatrixXd a = block + ridge * Eigen::MatrixXd::Identity(block.rows(), block.cols());
  if (ridge == 0.0) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
    if (!lu.isInvertible()) throw Error(ErrorCode::SingularBlock, "forgotten-skill covariance block is singular");
    return lu.solve(rhs);
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  if (ldlt.info() != Eigen::Success) throw Error(ErrorCode::SingularBlock, "regularized block factorization failed");
  return ldlt.solve(rhs);
}
}  // namespace detail

/// E[a_R | a_F = 0] = mu_R - Sigma_RF (Sigma_FF + ridge I)^-1 mu_F, returned
/// over R in ascending skill order. When every |Sigma_RF| entry is below
/// 1e-9 the result is mu_R exactly.
inline Eigen::VectorXd conditional_retained_expectation(const CalibrationModel& m,
                                                        std::span<const std::size_t> forgotten, double ridge) {
  const auto k = m.skill_count();
  if (ridge < 0.0) throw Error(ErrorCode::InvalidConfig, "ridge must be non-negative");
  const auto retained = detail::retained_complement(k, forgotten);
  const Eigen::VectorXd mu_r = detail::slice(m.mean, retained);
  const Eigen::MatrixXd sigma_rf = detail::block(m.covariance, retained, forgotten);
  if (sigma_rf.cwiseAbs().maxCoeff() < kCrossCovarianceZero) return mu_r;
  const Eigen::MatrixXd sigma_ff = detail::block(m.covariance, forgotten, forgotten);
  const Eigen::VectorXd mu_f = detail::slice(m.mean, forgotten);
  return mu_r - sigma_rf * detail::solve_block(sigma_ff, mu_f, ridge);
}

inline Eigen::VectorXd conditional_retained_expectation(const CalibrationModel& m,
                                                        std::span<const std::size_t> forgotten) {
  return conditional_retained_expectation(m, forgotten, m.ridge);
}

/// Mahalanobis distance of the conditioning point a_F = 0 under the F marginal.
inline double conditioning_distance(const CalibrationModel& m, std::span<const std::size_t> forgotten, double ridge) {
  const Eigen::MatrixXd sigma_ff = detail::block(m.covariance, forgotten, forgotten);
  const Eigen::VectorXd mu_f = detail::slice(m.mean, forgotten);
  const double eff_ridge = ridge > 0.0 ? ridge : kDefaultRidge;
  const Eigen::VectorXd x = detail::solve_block(sigma_ff, mu_f, eff_ridge);
  return std::sqrt(std::max(0.0, mu_f.dot(x)));
}

struct ExpectedRetention {
  double actual = 0.0;
  double expected = 0.0;
  double score = 0.0;
  double distance = 0.0;
};

/// Prediction score for one student. Absent when R or F is empty.
inline std::optional<ExpectedRetention> expected_retention(const CalibrationModel& m, const MasteryProfile& k,
                                                           std::span<const double> a) {
  detail::require_same_length(k, a);
  const auto f = k.forgotten_indices();
  if (f.empty() || f.size() == k.size()) return std::nullopt;
  const Eigen::VectorXd expected = conditional_retained_expectation(m, f, m.ridge);
  ExpectedRetention out;
  out.actual = *retained_forgotten_split(k, a).retained;
  out.expected = expected.mean();
  out.score = prediction_score(out.actual, out.expected);
  out.distance = conditioning_distance(m, f, m.ridge);
  return out;
}

// ---------------------------------------------------------------------------
// Suspect items

struct SuspectItem {
  int grade = 0;
  std::string item_id;
  std::size_t backends_wrong = 0;
  std::size_t backends_total = 0;

  double error_fraction() const { return static_cast<double>(backends_wrong) / static_cast<double>(backends_total); }
};

/// Items failed in the perfect-student baseline by at least `threshold` of the
/// backends, widest failures first. A backend "fails" an item when more than
/// half of its baseline answers to it are incorrect.
template <typename Events>
std::vector<SuspectItem> flag_suspect_items(const Events& events, double threshold) {
  // (grade, item) -> backend -> (wrong, total)
  std::map<std::pair<int, std::string>, std::map<std::string, std::pair<std::size_t, std::size_t>>> tally;
  std::map<int, std::set<std::string>> backends_by_grade;
  for (const ResponseEvent& e : events) {
    if (e.stage != Stage::Baseline) continue;
    auto& t = tally[{e.grade, e.item_id}][e.backend_id];
    t.first += !e.is_correct;
    ++t.second;
    backends_by_grade[e.grade].insert(e.backend_id);
  }
  std::size_t max_backends = 0;
  for (const auto& [g, set] : backends_by_grade) max_backends = std::max(max_backends, set.size());
  if (max_backends < 2) throw Error(ErrorCode::TooFewBackends, "suspect-item flagging needs baselines from >= 2 backends");

  std::vector<SuspectItem> out;
  for (const auto& [key, per_backend] : tally) {
    SuspectItem s{key.first, key.second, 0, backends_by_grade[key.first].size()};
    for (const auto& [backend, wt] : per_backend) s.backends_wrong += 2 * wt.first > wt.second;
    if (s.backends_total >= 2 && s.backends_wrong > 0 && s.error_fraction() >= threshold) out.push_back(s);
  }
  std::stable_sort(out.begin(), out.end(), [](const SuspectItem& a, const SuspectItem& b) {
    if (a.backends_wrong != b.backends_wrong) return a.backends_wrong > b.backends_wrong;
    return std::tie(a.grade, a.item_id) < std::tie(b.grade, b.item_id);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Log aggregation

/// One simulated student's aggregated answers.
struct StudentRecord {
  std::string run_id;
  std::string backend_id;
  int grade = 0;
  PromptStrategy strategy = PromptStrategy::Hybrid;
  Stage stage = Stage::Sweep;
  std::string student_id;
  MasteryProfile profile;
  SkillAccuracyVector accuracy;

  double invalid_rate() const {
    return static_cast<double>(accuracy.invalid_count()) / static_cast<double>(accuracy.event_count());
  }
};

/// Groups events by (backend, stage, strategy, run, student) and aggregates
/// each group; output order is the sorted group key, so it is independent of
/// event order. Students from different runs are distinct.
template <typename Events>
std::vector<StudentRecord> aggregate_students(const Events& events, const ItemBank& bank) {
  using Key = std::tuple<std::string, int, int, std::string, std::string>;
  std::map<Key, std::vector<ResponseEvent>> groups;
  for (const ResponseEvent& e : events)
    groups[{e.backend_id, static_cast<int>(e.stage), static_cast<int>(e.strategy), e.run_id, e.student_id}].push_back(e);
  std::vector<StudentRecord> out;
  for (auto& [key, evs] : groups) {
    StudentRecord r;
    r.backend_id = std::get<0>(key);
    r.stage = static_cast<Stage>(std::get<1>(key));
    r.strategy = static_cast<PromptStrategy>(std::get<2>(key));
    r.run_id = std::get<3>(key);
    r.student_id = std::get<4>(key);
    r.grade = bank.grade();
    r.profile = evs.front().profile.with_grade(bank.grade());
    r.accuracy = accuracy_by_skill(evs, bank);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace profilebench
