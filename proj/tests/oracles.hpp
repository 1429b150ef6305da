#pragma once

// Independent reference implementations used to check the library. They
// share no code with include/ beyond plain data types and favor the most
// literal formulation over speed.

#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <algorithm>
#include <json.hpp>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<std::vector<double>>;
using Bits = std::vector<int>;

inline double relative_loss(double a0, double a, double eps) {
  const double denom = a0 > eps ? a0 : eps;
  const double v = (a0 - a) / denom;
  return v > 0.0 ? v : 0.0;
}

inline double rmse(const Bits& k, const Vec& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) s += std::pow(k[i] - a[i], 2);
  return std::sqrt(s / k.size());
}

inline double controllability(const Bits& k, const Vec& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) s += k[i] == 1 ? a[i] : 1.0 - a[i];
  return s / k.size();
}

struct Split {
  bool has_r = false, has_f = false;
  double r = 0.0, f = 0.0;
};

inline Split split(const Bits& k, const Vec& a) {
  Vec r, f;
  for (std::size_t i = 0; i < k.size(); ++i) (k[i] ? r : f).push_back(a[i]);
  Split out;
  if (!r.empty()) out.has_r = true, out.r = std::accumulate(r.begin(), r.end(), 0.0) / r.size();
  if (!f.empty()) out.has_f = true, out.f = std::accumulate(f.begin(), f.end(), 0.0) / f.size();
  return out;
}

inline Mat influence(const Vec& base, const Mat& ctrl) {
  Mat d(base.size(), Vec(base.size()));
  for (std::size_t i = 0; i < base.size(); ++i)
    for (std::size_t j = 0; j < base.size(); ++j) d[i][j] = ctrl[i][j] - base[j];
  return d;
}

// ---------------------------------------------------------------------------
// Linear algebra by hand

/// Gauss-Jordan with partial pivoting; solves A x = b.
inline Vec solve(Mat a, Vec b) {
  const std::size_t n = a.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  for (std::size_t i = 0; i < n; ++i) b[i] /= a[i][i];
  return b;
}

inline Mat cholesky(const Mat& m) {
  const std::size_t n = m.size();
  Mat l(n, Vec(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = m[i][j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      l[i][j] = i == j ? std::sqrt(s) : s / l[j][j];
    }
  return l;
}

struct Moments {
  Vec mean;
  Mat cov;
  Mat corr;
};

inline Moments moments(const std::vector<Vec>& rows) {
  const std::size_t n = rows.size(), k = rows.front().size();
  Moments m{Vec(k, 0.0), Mat(k, Vec(k, 0.0)), Mat(k, Vec(k, 0.0))};
  for (const auto& r : rows)
    for (std::size_t i = 0; i < k; ++i) m.mean[i] += r[i] / n;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (const auto& r : rows) s += (r[i] - m.mean[i]) * (r[j] - m.mean[j]);
      m.cov[i][j] = s / (n - 1);
    }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) {
        m.corr[i][j] = 1.0;
      } else if (m.cov[i][i] <= 0.0 || m.cov[j][j] <= 0.0) {
        m.corr[i][j] = 0.0;
      } else {
        m.corr[i][j] = m.cov[i][j] / std::sqrt(m.cov[i][i] * m.cov[j][j]);
      }
    }
  return m;
}

/// mu_R - S_RF (S_FF + ridge I)^-1 mu_F, averaged over R; mu_R mean when S_RF ~ 0.
inline double expected_retained_mean(const Moments& m, const Bits& k, double ridge) {
  std::vector<std::size_t> r, f;
  for (std::size_t i = 0; i < k.size(); ++i) (k[i] ? r : f).push_back(i);
  bool zero = true;
  for (auto i : r)
    for (auto j : f) zero = zero && std::abs(m.cov[i][j]) < 1e-9;
  Mat sff(f.size(), Vec(f.size()));
  Vec muf(f.size());
  for (std::size_t a = 0; a < f.size(); ++a) {
    muf[a] = m.mean[f[a]];
    for (std::size_t b = 0; b < f.size(); ++b) sff[a][b] = m.cov[f[a]][f[b]] + (a == b ? ridge : 0.0);
  }
  const Vec x = zero ? Vec(f.size(), 0.0) : solve(sff, muf);
  double total = 0.0;
  for (auto i : r) {
    double v = m.mean[i];
    for (std::size_t b = 0; b < f.size(); ++b) v -= m.cov[i][f[b]] * x[b];
    total += v;
  }
  return total / r.size();
}

// ---------------------------------------------------------------------------
// Monte Carlo

/// Per-skill probability vectors from a Gaussian copula built with a
/// Cholesky factor and the standard library normal generator.
inline std::vector<Vec> copula_cohort(std::size_t n, const Vec& base, double spread, const Mat& coupling,
                                      std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Mat l = cholesky(coupling);
  std::vector<Vec> out;
  for (std::size_t s = 0; s < n; ++s) {
    Vec z(base.size());
    for (auto& v : z) v = normal(gen);
    Vec p(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      double x = 0.0;
      for (std::size_t j = 0; j <= i; ++j) x += l[i][j] * z[j];
      p[i] = std::clamp(base[i] + spread * x, 0.0, 1.0);
    }
    out.push_back(p);
  }
  return out;
}

/// Realized accuracies: each probability vector answered over `items` Bernoulli trials per skill.
inline std::vector<Vec> realize(const std::vector<Vec>& probs, std::size_t items, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::vector<Vec> out;
  for (const auto& p : probs) {
    Vec a(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      std::binomial_distribution<int> b(static_cast<int>(items), p[i]);
      a[i] = static_cast<double>(b(gen)) / items;
    }
    out.push_back(a);
  }
  return out;
}

inline double pearson(const std::vector<Vec>& rows, std::size_t i, std::size_t j) {
  return moments(rows).corr[i][j];
}

/// Kernel-conditioned mean of the R coordinates given the F coordinates lie
/// within `h` of zero, from draws of N(mu, cov). Returns the R-average and
/// the number of accepted draws.
inline std::pair<double, std::size_t> conditioned_mean(const Vec& mu, const Mat& cov, const Bits& k, double h,
                                                       std::size_t draws, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Mat l = cholesky(cov);
  double sum = 0.0;
  std::size_t accepted = 0;
  Vec z(mu.size()), x(mu.size());
  for (std::size_t d = 0; d < draws; ++d) {
    for (auto& v : z) v = normal(gen);
    for (std::size_t i = 0; i < mu.size(); ++i) {
      x[i] = mu[i];
      for (std::size_t j = 0; j <= i; ++j) x[i] += l[i][j] * z[j];
    }
    bool near = true;
    for (std::size_t i = 0; i < mu.size(); ++i)
      if (!k[i] && std::abs(x[i]) > h) near = false;
    if (!near) continue;
    double r = 0.0;
    std::size_t nr = 0;
    for (std::size_t i = 0; i < mu.size(); ++i)
      if (k[i]) r += x[i], ++nr;
    sum += r / nr;
    ++accepted;
  }
  return {accepted ? sum / accepted : std::nan(""), accepted};
}

// ---------------------------------------------------------------------------
// One-pass log aggregation

/// Everything a report cell can be recomputed from, read straight from the
/// JSONL logs without the library's parsers.
struct LogDigest {
  struct Student {
    std::string backend, strategy, run_id, student_id, profile;
    int grade = 0;
    Vec correct, total, invalid;
  };
  std::map<int, std::vector<std::string>> skills;         // grade -> skill ids
  std::map<std::pair<int, std::string>, int> skill_pos;   // (grade, skill) -> index
  std::map<std::pair<int, std::string>, int> answer_of;   // (grade, item) -> correct index
  std::map<std::tuple<int, std::string>, std::pair<Vec, Vec>> baseline;  // (grade, backend) -> correct, total
  std::map<std::tuple<std::string, int, std::string, std::string, std::string>, Student> students;
  // (grade, item) -> backend -> (wrong, total) over baseline answers
  std::map<std::pair<int, std::string>, std::map<std::string, std::pair<int, int>>> base_items;

  void add_log(const std::string& path) {
    std::ifstream in(path);
    std::string line;
    int grade = 0;
    bool header = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (header) {
        header = false;
        grade = j["bank"]["grade"].get<int>();
        std::vector<std::string> ids;
        for (const auto& s : j["bank"]["skills"]) ids.push_back(s["id"].get<std::string>());
        for (std::size_t i = 0; i < ids.size(); ++i) skill_pos[{grade, ids[i]}] = static_cast<int>(i);
        skills[grade] = ids;
        for (const auto& it : j["bank"]["items"])
          answer_of[{grade, it["id"].get<std::string>()}] = it["answer_index"].get<int>();
        continue;
      }
      const std::size_t k = skills[grade].size();
      const int pos = skill_pos.at({grade, j["skill_id"].get<std::string>()});
      const auto item = j["item_id"].get<std::string>();
      const bool valid = !j["chosen_index"].is_null();
      const bool right = valid && j["chosen_index"].get<int>() == answer_of.at({grade, item});
      const auto backend = j["backend_id"].get<std::string>();
      if (j["stage"] == "baseline") {
        auto& [c, t] = baseline[{grade, backend}];
        if (c.empty()) c.assign(k, 0.0), t.assign(k, 0.0);
        c[pos] += right;
        t[pos] += 1;
        auto& bi = base_items[{grade, item}][backend];
        bi.first += !right;
        bi.second += 1;
        continue;
      }
      const auto strategy = j["strategy"].get<std::string>();
      const auto run = j["run_id"].get<std::string>();
      const auto sid = j["student_id"].get<std::string>();
      auto& s = students[{backend, grade, strategy, run, sid}];
      if (s.total.empty()) {
        s = {backend, strategy, run, sid, j["profile"].get<std::string>(), grade, Vec(k, 0.0), Vec(k, 0.0),
             Vec(k, 0.0)};
      }
      s.correct[pos] += right;
      s.total[pos] += 1;
      s.invalid[pos] += !valid;
    }
  }

  static Vec accuracy(const Student& s) {
    Vec a(s.total.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = s.correct[i] / s.total[i];
    return a;
  }

  Vec baseline_accuracy(int grade, const std::string& backend) const {
    const auto& [c, t] = baseline.at({grade, backend});
    Vec a(c.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = c[i] / t[i];
    return a;
  }

  static Bits bits(const std::string& profile) {
    Bits b;
    for (char c : profile) b.push_back(c - '0');
    return b;
  }
};

}  // namespace oracle
