#pragma once

// Answer providers. A backend turns one rendered prompt (plus the structured
// request it came from) into raw answer text. The remote backend talks to an
// OpenAI-compatible chat endpoint; the synthetic backend is a seeded student
// model whose every answer is a pure function of (seed, student, item).

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <httplib.h>

#include "core.hpp"
#include "prompt.hpp"

namespace profilebench {

// ---------------------------------------------------------------------------
// Answer parsing

enum class ParseMode { Strict, Lenient };

constexpr std::string_view parse_mode_name(ParseMode m) { return m == ParseMode::Strict ? "strict" : "lenient"; }

inline std::optional<ParseMode> parse_parse_mode(std::string_view s) {
  if (s == "strict" || s == "STRICT") return ParseMode::Strict;
  if (s == "lenient" || s == "LENIENT") return ParseMode::Lenient;
  return std::nullopt;
}

namespace detail {
inline bool is_trim_char(unsigned char c) { return std::isspace(c) || std::ispunct(c); }
inline bool is_choice_letter(char c) { return c >= 'A' && c <= 'D'; }
}  // namespace detail

/// Maps raw backend text to an option index, or nullopt for INVALID.
/// STRICT: a lone A-D after trimming whitespace and punctuation.
/// LENIENT: additionally, the standalone A-D token when exactly one distinct
/// letter is expressed anywhere in the text.
inline std::optional<int> parse_answer(std::string_view raw, ParseMode mode) {
  std::size_t b = 0, e = raw.size();
  while (b < e && detail::is_trim_char(static_cast<unsigned char>(raw[b]))) ++b;
  while (e > b && detail::is_trim_char(static_cast<unsigned char>(raw[e - 1]))) --e;
  if (e - b == 1 && detail::is_choice_letter(raw[b])) return raw[b] - 'A';
  if (mode == ParseMode::Strict) return std::nullopt;

  std::optional<char> found;
  std::size_t i = 0;
  while (i < raw.size()) {
    if (!std::isalnum(static_cast<unsigned char>(raw[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < raw.size() && std::isalnum(static_cast<unsigned char>(raw[j]))) ++j;
    if (j - i == 1 && detail::is_choice_letter(raw[i])) {
      if (found && *found != raw[i]) return std::nullopt;
      found = raw[i];
    }
    i = j;
  }
  if (!found) return std::nullopt;
  return *found - 'A';
}

// ---------------------------------------------------------------------------
// Configuration

struct ObedienceOverride {
  std::optional<double> p_retain;
  std::optional<double> p_forget;
};

struct SyntheticStudentParams {
  double p_retain = 0.9;
  double p_forget = 0.25;
  std::uint64_t seed = 0;
  double spread = 0.1;
  std::optional<Eigen::MatrixXd> coupling;  ///< K x K correlation for the aptitude copula
  std::map<PromptStrategy, ObedienceOverride> per_strategy;

  double retain_for(PromptStrategy s) const {
    auto it = per_strategy.find(s);
    return it != per_strategy.end() && it->second.p_retain ? *it->second.p_retain : p_retain;
  }
  double forget_for(PromptStrategy s) const {
    auto it = per_strategy.find(s);
    return it != per_strategy.end() && it->second.p_forget ? *it->second.p_forget : p_forget;
  }

  void validate() const {
    auto check = [](double r, double f) {
      if (!(0.0 <= f && f <= r && r <= 1.0))
        throw Error(ErrorCode::InvalidConfig, "synthetic probabilities need 0 <= p_forget <= p_retain <= 1");
    };
    check(p_retain, p_forget);
    for (auto s : kAllStrategies) check(retain_for(s), forget_for(s));
    if (spread < 0.0) throw Error(ErrorCode::InvalidConfig, "spread must be non-negative");
    if (coupling) validate_coupling(*coupling);
  }

  static void validate_coupling(const Eigen::MatrixXd& c) {
    if (c.rows() != c.cols() || c.rows() == 0) throw Error(ErrorCode::BadCouplingMatrix, "coupling must be square");
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
      if (std::abs(c(i, i) - 1.0) > 1e-12) throw Error(ErrorCode::BadCouplingMatrix, "coupling diagonal must be 1");
      for (Eigen::Index j = 0; j < c.cols(); ++j) {
        if (std::abs(c(i, j) - c(j, i)) > 1e-12) throw Error(ErrorCode::BadCouplingMatrix, "coupling not symmetric");
        if (c(i, j) < -1.0 || c(i, j) > 1.0) throw Error(ErrorCode::BadCouplingMatrix, "coupling entry outside [-1, 1]");
      }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c);
    if (eig.eigenvalues().minCoeff() < -1e-9)
      throw Error(ErrorCode::BadCouplingMatrix, "coupling is not positive semidefinite");
  }
};

struct RemoteConfig {
  std::string endpoint;
  std::string model;
  std::string api_key_env;
  double temperature = 0.0;
  int max_retries = 3;
  double requests_per_minute = 60.0;
  double timeout_seconds = 60.0;
  double backoff_initial_seconds = 1.0;
  double backoff_max_seconds = 30.0;
};

enum class BackendKind { Remote, Synthetic };

/// Default key variable: PROFILEBENCH_<BACKEND>_API_KEY with the id upper-cased.
inline std::string default_api_key_env(std::string_view backend_id) {
  std::string out = "PROFILEBENCH_";
  for (char c : backend_id)
    out += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::toupper(static_cast<unsigned char>(c)))
                                                       : '_';
  return out + "_API_KEY";
}

struct BackendConfig {
  std::string backend_id;
  BackendKind kind = BackendKind::Synthetic;
  RemoteConfig remote;
  SyntheticStudentParams synthetic;

  void validate() const {
    if (backend_id.empty()) throw Error(ErrorCode::InvalidConfig, "backend id is empty");
    if (kind == BackendKind::Remote) {
      if (remote.temperature != 0.0) throw Error(ErrorCode::InvalidConfig, "remote temperature must be 0");
      if (remote.requests_per_minute < 1.0) throw Error(ErrorCode::InvalidConfig, "rate cap must be >= 1");
      if (remote.max_retries < 0) throw Error(ErrorCode::InvalidConfig, "max_retries must be >= 0");
      if (remote.endpoint.empty() || remote.model.empty())
        throw Error(ErrorCode::InvalidConfig, "remote backend needs endpoint and model");
    } else {
      synthetic.validate();
    }
  }

  std::string model_name() const {
    return kind == BackendKind::Remote ? remote.model : "synthetic";
  }
};

inline json to_json(const BackendConfig& c) {
  json j = {{"id", c.backend_id}, {"kind", c.kind == BackendKind::Remote ? "remote" : "synthetic"}};
  if (c.kind == BackendKind::Remote) {
    j["endpoint"] = c.remote.endpoint;
    j["model"] = c.remote.model;
    j["api_key_env"] = c.remote.api_key_env;
    j["temperature"] = c.remote.temperature;
    j["max_retries"] = c.remote.max_retries;
    j["requests_per_minute"] = c.remote.requests_per_minute;
    j["timeout_seconds"] = c.remote.timeout_seconds;
    j["backoff_initial_seconds"] = c.remote.backoff_initial_seconds;
    j["backoff_max_seconds"] = c.remote.backoff_max_seconds;
  } else {
    const auto& p = c.synthetic;
    json s = {{"p_retain", p.p_retain}, {"p_forget", p.p_forget}, {"seed", p.seed}, {"spread", p.spread}};
    if (p.coupling) {
      json rows = json::array();
      for (Eigen::Index i = 0; i < p.coupling->rows(); ++i) {
        json row = json::array();
        for (Eigen::Index k = 0; k < p.coupling->cols(); ++k) row.push_back((*p.coupling)(i, k));
        rows.push_back(row);
      }
      s["coupling"] = rows;
    }
    if (!p.per_strategy.empty()) {
      json ps = json::object();
      for (const auto& [strategy, o] : p.per_strategy) {
        json e = json::object();
        if (o.p_retain) e["p_retain"] = *o.p_retain;
        if (o.p_forget) e["p_forget"] = *o.p_forget;
        ps[std::string(strategy_name(strategy))] = e;
      }
      s["per_strategy"] = ps;
    }
    j["synthetic"] = s;
  }
  return j;
}

inline BackendConfig backend_config_from_json(const json& j) {
  BackendConfig c;
  try {
    c.backend_id = j.at("id").get<std::string>();
    const auto kind = j.value("kind", std::string("synthetic"));
    if (kind == "remote") {
      c.kind = BackendKind::Remote;
      c.remote.endpoint = j.at("endpoint").get<std::string>();
      c.remote.model = j.at("model").get<std::string>();
      c.remote.api_key_env = j.value("api_key_env", default_api_key_env(c.backend_id));
      c.remote.temperature = j.value("temperature", 0.0);
      c.remote.max_retries = j.value("max_retries", 3);
      c.remote.requests_per_minute = j.value("requests_per_minute", 60.0);
      c.remote.timeout_seconds = j.value("timeout_seconds", 60.0);
      c.remote.backoff_initial_seconds = j.value("backoff_initial_seconds", 1.0);
      c.remote.backoff_max_seconds = j.value("backoff_max_seconds", 30.0);
    } else if (kind == "synthetic") {
      c.kind = BackendKind::Synthetic;
      const json s = j.value("synthetic", json::object());
      auto& p = c.synthetic;
      p.p_retain = s.value("p_retain", 0.9);
      p.p_forget = s.value("p_forget", 0.25);
      p.seed = s.value("seed", std::uint64_t{0});
      p.spread = s.value("spread", 0.1);
      if (s.contains("coupling")) {
        const auto& rows = s.at("coupling");
        const auto n = static_cast<Eigen::Index>(rows.size());
        Eigen::MatrixXd m(n, n);
        for (Eigen::Index r = 0; r < n; ++r) {
          if (rows[r].size() != rows.size()) throw Error(ErrorCode::BadCouplingMatrix, "coupling must be square");
          for (Eigen::Index k = 0; k < n; ++k) m(r, k) = rows[r][k].get<double>();
        }
        p.coupling = m;
      }
      if (s.contains("per_strategy")) {
        for (const auto& [name, o] : s.at("per_strategy").items()) {
          auto strategy = parse_strategy(name);
          if (!strategy) throw Error(ErrorCode::InvalidConfig, "unknown strategy '" + name + "'");
          ObedienceOverride ov;
          if (o.contains("p_retain")) ov.p_retain = o.at("p_retain").get<double>();
          if (o.contains("p_forget")) ov.p_forget = o.at("p_forget").get<double>();
          p.per_strategy[*strategy] = ov;
        }
      }
    } else {
      throw Error(ErrorCode::InvalidConfig, "unknown backend kind '" + kind + "'");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Backend interface

struct AnswerRequest {
  const RenderedPrompt& prompt;
  const Item& item;
  std::size_t skill_index;
  const MasteryProfile& profile;
  PromptStrategy strategy;
  std::string_view student_id;
};

struct AnswerRecord {
  std::string raw_text;
  std::optional<int> parsed_index;  ///< empty = INVALID
  std::chrono::milliseconds latency{0};
  bool cache_hit = false;
};

/// Thread-safe answer provider. raw_answer throws Error on failure.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual const BackendConfig& config() const = 0;
  /// Whether identical prompts can be served from the response cache.
  virtual bool cacheable() const = 0;
  virtual std::string raw_answer(const AnswerRequest& request) = 0;

  const std::string& id() const { return config().backend_id; }
};

// ---------------------------------------------------------------------------
// Synthetic students

namespace detail {
/// Symmetric square root of a PSD matrix, so that factor * z has covariance c.
inline Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& c) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c);
  Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}
}  // namespace detail

/// One simulated student: the effective per-skill correctness probability
/// for its profile and strategy, plus the keyed answer generator.
class SyntheticStudent {
 public:
  SyntheticStudent(const SyntheticStudentParams& params, std::string student_id, const MasteryProfile& profile,
                   PromptStrategy strategy)
      : SyntheticStudent(params, std::move(student_id), profile, strategy,
                         params.coupling ? std::optional(detail::psd_factor(*params.coupling)) : std::nullopt) {}

  SyntheticStudent(const SyntheticStudentParams& params, std::string student_id, const MasteryProfile& profile,
                   PromptStrategy strategy, const std::optional<Eigen::MatrixXd>& coupling_factor)
      : seed_(params.seed), student_id_(std::move(student_id)) {
    const std::size_t k = profile.size();
    probabilities_.resize(k);
    for (std::size_t i = 0; i < k; ++i)
      probabilities_[i] = profile.retained(i) ? params.retain_for(strategy) : params.forget_for(strategy);
    if (coupling_factor) {
      if (static_cast<std::size_t>(coupling_factor->rows()) != k)
        throw Error(ErrorCode::BadCouplingMatrix, "coupling size differs from the skill count");
      rng::KeyedStream stream(rng::combine(rng::combine(rng::splitmix64(seed_), "aptitude"), student_id_));
      Eigen::VectorXd z(static_cast<Eigen::Index>(k));
      for (std::size_t i = 0; i < k; ++i) z[static_cast<Eigen::Index>(i)] = stream.normal();
      const Eigen::VectorXd latent = *coupling_factor * z;
      for (std::size_t i = 0; i < k; ++i)
        probabilities_[i] = std::clamp(probabilities_[i] + params.spread * latent[static_cast<Eigen::Index>(i)], 0.0, 1.0);
    }
  }

  const std::vector<double>& probabilities() const { return probabilities_; }
  const std::string& student_id() const { return student_id_; }

  /// Correct with the skill's effective probability, otherwise a uniformly
  /// chosen distractor. Depends only on (seed, student_id, item_id).
  int answer(const Item& item, std::size_t skill_index) const {
    if (skill_index >= probabilities_.size()) throw Error(ErrorCode::UnknownSkill, "skill index out of range");
    rng::KeyedStream stream(
        rng::combine(rng::combine(rng::combine(rng::splitmix64(seed_), "answer"), student_id_), item.id));
    const double p = probabilities_[skill_index];
    if (stream.uniform() < p) return item.correct_index;
    const int pick = static_cast<int>(stream.below(kOptionCount - 1));
    return pick < item.correct_index ? pick : pick + 1;
  }

 private:
  std::uint64_t seed_;
  std::string student_id_;
  std::vector<double> probabilities_;
};

inline int synthetic_answer(const Item& item, const MasteryProfile& profile, std::span<const Skill> taxonomy,
                            const SyntheticStudentParams& params, std::string_view student_id,
                            PromptStrategy strategy = PromptStrategy::Hybrid) {
  std::optional<std::size_t> idx;
  for (std::size_t i = 0; i < taxonomy.size(); ++i)
    if (taxonomy[i].id == item.skill_id) idx = i;
  if (!idx || *idx >= profile.size())
    throw Error(ErrorCode::UnknownSkill, "skill '" + item.skill_id + "' is not in the profile's taxonomy");
  return SyntheticStudent(params, std::string(student_id), profile, strategy).answer(item, *idx);
}

inline std::string cohort_student_id(std::size_t index) { return "student-" + std::to_string(index); }

/// Effective probability vectors for n students ("student-0" ...), the
/// population the calibration model is fitted over.
inline std::vector<std::vector<double>> sample_synthetic_cohort(std::size_t n_students, std::size_t k,
                                                                const SyntheticStudentParams& params,
                                                                std::optional<MasteryProfile> profile = std::nullopt,
                                                                PromptStrategy strategy = PromptStrategy::Hybrid) {
  if (n_students < 2) throw Error(ErrorCode::TooFewStudents, "a cohort needs at least 2 students");
  std::optional<Eigen::MatrixXd> factor;
  if (params.coupling) {
    SyntheticStudentParams::validate_coupling(*params.coupling);
    if (static_cast<std::size_t>(params.coupling->rows()) != k)
      throw Error(ErrorCode::BadCouplingMatrix, "coupling must be K x K");
    factor = detail::psd_factor(*params.coupling);
  }
  const MasteryProfile target = profile ? *profile : MasteryProfile::all_retained(k);
  if (target.size() != k) throw Error(ErrorCode::LengthMismatch, "profile length differs from K");
  std::vector<std::vector<double>> out;
  out.reserve(n_students);
  for (std::size_t s = 0; s < n_students; ++s)
    out.push_back(SyntheticStudent(params, cohort_student_id(s), target, strategy, factor).probabilities());
  return out;
}

class SyntheticBackend final : public Backend {
 public:
  explicit SyntheticBackend(BackendConfig config) : config_(std::move(config)) {
    config_.validate();
    if (config_.synthetic.coupling) factor_ = detail::psd_factor(*config_.synthetic.coupling);
  }

  const BackendConfig& config() const override { return config_; }
  bool cacheable() const override { return false; }

  std::string raw_answer(const AnswerRequest& r) override {
    SyntheticStudent student(config_.synthetic, std::string(r.student_id), r.profile, r.strategy, factor_);
    return std::string(1, option_letter(student.answer(r.item, r.skill_index)));
  }

 private:
  BackendConfig config_;
  std::optional<Eigen::MatrixXd> factor_;
};

// ---------------------------------------------------------------------------
// Remote chat-completion client

/// Shared request-rate limiter: refills at rate_per_minute / 60 tokens per
/// second, burst capacity of one second's worth (at least one token).
class TokenBucket {
 public:
  using clock = std::chrono::steady_clock;

  explicit TokenBucket(double rate_per_minute)
      : rate_per_second_(rate_per_minute / 60.0),
        capacity_(std::max(1.0, rate_per_second_)),
        tokens_(capacity_),
        last_(clock::now()) {}

  void acquire() {
    std::unique_lock lock(mutex_);
    for (;;) {
      refill();
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      const auto wait = std::chrono::duration<double>((1.0 - tokens_) / rate_per_second_);
      lock.unlock();
      std::this_thread::sleep_for(wait);
      lock.lock();
    }
  }

 private:
  void refill() {
    const auto now = clock::now();
    tokens_ = std::min(capacity_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_per_second_);
    last_ = now;
  }

  std::mutex mutex_;
  double rate_per_second_;
  double capacity_;
  double tokens_;
  clock::time_point last_;
};

/// Request body: {model, temperature, messages: [{role: "user", content}]}.
inline json chat_request_body(const RemoteConfig& cfg, std::string_view prompt_text) {
  return {{"model", cfg.model},
          {"temperature", cfg.temperature},
          {"messages", json::array({{{"role", "user"}, {"content", prompt_text}}})}};
}

/// Extracts choices[0].message.content.
inline std::string chat_response_content(std::string_view body) {
  try {
    const json j = json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::TransportError, std::string("malformed completion response: ") + e.what());
  }
}

class RemoteBackend final : public Backend {
 public:
  explicit RemoteBackend(BackendConfig config)
      : config_(std::move(config)), bucket_(config_.remote.requests_per_minute) {
    config_.validate();
    const auto& ep = config_.remote.endpoint;
    const auto scheme = ep.find("://");
    const auto path_start = ep.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (scheme == std::string::npos) throw Error(ErrorCode::InvalidConfig, "endpoint must be an http(s) URL");
    host_ = ep.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : ep.substr(path_start);
  }

  const BackendConfig& config() const override { return config_; }
  bool cacheable() const override { return true; }

  /// Number of HTTP requests attempted so far.
  std::size_t request_count() const { return requests_.load(); }

  std::string raw_answer(const AnswerRequest& r) override { return complete(r.prompt.text); }

  std::string complete(std::string_view prompt_text) {
    const auto& rc = config_.remote;
    const char* key = std::getenv(rc.api_key_env.c_str());
    if (key == nullptr || *key == '\0')
      throw Error(ErrorCode::AuthError, "environment variable " + rc.api_key_env + " is not set");

    const std::string body = chat_request_body(rc, prompt_text).dump();
    const httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
    ErrorCode last_code = ErrorCode::TransportError;
    std::string last_message;

    for (int attempt = 0; attempt <= rc.max_retries; ++attempt) {
      if (attempt > 0) backoff(attempt);
      bucket_.acquire();
      ++requests_;
      httplib::Client client(host_);
      const auto timeout = std::chrono::duration<double>(rc.timeout_seconds);
      client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      auto res = client.Post(path_, headers, body, "application/json");
      if (!res) {
        const auto err = res.error();
        last_code = (err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout) ? ErrorCode::Timeout
                                                                                             : ErrorCode::TransportError;
        last_message = httplib::to_string(err);
        continue;
      }
      if (res->status == 401 || res->status == 403)
        throw Error(ErrorCode::AuthError, "endpoint rejected credentials (HTTP " + std::to_string(res->status) + ")");
      if (res->status == 429) {
        last_code = ErrorCode::RateLimitExhausted;
        last_message = "HTTP 429";
        continue;
      }
      if (res->status >= 500) {
        last_code = ErrorCode::TransportError;
        last_message = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw Error(ErrorCode::TransportError, "HTTP " + std::to_string(res->status) + ": " + res->body);
      return chat_response_content(res->body);
    }
    throw Error(last_code, last_message + " after " + std::to_string(rc.max_retries + 1) + " attempts");
  }

 private:
  void backoff(int attempt) const {
    const auto& rc = config_.remote;
    const double delay = std::min(rc.backoff_max_seconds, rc.backoff_initial_seconds * std::pow(2.0, attempt - 1));
    std::this_thread::sleep_for(std::chrono::duration<double>(delay));
  }

  BackendConfig config_;
  TokenBucket bucket_;
  std::string host_;
  std::string path_;
  std::atomic<std::size_t> requests_{0};
};

inline std::unique_ptr<Backend> make_backend(const BackendConfig& config) {
  if (config.kind == BackendKind::Remote) return std::make_unique<RemoteBackend>(config);
  return std::make_unique<SyntheticBackend>(config);
}

/// Single remote query with parsing; failures propagate as Error.
inline AnswerRecord query_remote(const RenderedPrompt& prompt, RemoteBackend& backend, ParseMode mode) {
  const auto start = std::chrono::steady_clock::now();
  AnswerRecord rec;
  rec.raw_text = backend.complete(prompt.text);
  rec.parsed_index = parse_answer(rec.raw_text, mode);
  rec.latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
  return rec;
}

}  // namespace profilebench
