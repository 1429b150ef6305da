#pragma once

// Protocol execution: perfect-student baseline, profile sweeps and strategy
// ablations over one bank. Work is a flat, deterministically ordered task
// list consumed by N workers; results are written to the append-only JSONL
// log strictly in task order, so logs do not depend on the worker count and
// an interrupted log is always a prefix of the complete one.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "backends.hpp"

namespace profilebench {

namespace fs = std::filesystem;

inline constexpr std::string_view kRunLogFormat = "profilebench-runlog/1";

enum class BaselineStyle { Scaffold, Plain };

// ---------------------------------------------------------------------------
// Event serialization

inline json to_json(const ResponseEvent& e) {
  return {{"type", "event"},
          {"run_id", e.run_id},
          {"stage", stage_name(e.stage)},
          {"backend_id", e.backend_id},
          {"grade", e.grade},
          {"strategy", strategy_name(e.strategy)},
          {"student_id", e.student_id},
          {"profile", e.profile.to_string()},
          {"item_id", e.item_id},
          {"skill_id", e.skill_id},
          {"chosen_index", e.chosen_index ? json(*e.chosen_index) : json(nullptr)},
          {"raw_text", e.raw_text},
          {"is_correct", e.is_correct},
          {"prompt_hash", e.prompt_hash},
          {"error", e.error ? json(*e.error) : json(nullptr)},
          {"timestamp", e.timestamp}};
}

inline ResponseEvent event_from_json(const json& j) {
  try {
    ResponseEvent e;
    e.run_id = j.at("run_id").get<std::string>();
    e.stage = j.at("stage").get<std::string>() == "baseline" ? Stage::Baseline : Stage::Sweep;
    e.backend_id = j.at("backend_id").get<std::string>();
    e.grade = j.at("grade").get<int>();
    auto strategy = parse_strategy(j.at("strategy").get<std::string>());
    if (!strategy) throw Error(ErrorCode::MalformedFile, "unknown strategy in event");
    e.strategy = *strategy;
    e.student_id = j.at("student_id").get<std::string>();
    e.profile = MasteryProfile::from_string(j.at("profile").get<std::string>(), e.grade);
    e.item_id = j.at("item_id").get<std::string>();
    e.skill_id = j.at("skill_id").get<std::string>();
    if (!j.at("chosen_index").is_null()) e.chosen_index = j.at("chosen_index").get<int>();
    e.raw_text = j.at("raw_text").get<std::string>();
    e.is_correct = j.at("is_correct").get<bool>();
    e.prompt_hash = j.at("prompt_hash").get<std::string>();
    if (!j.at("error").is_null()) e.error = j.at("error").get<std::string>();
    e.timestamp = j.value("timestamp", std::string{});
    return e;
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::MalformedFile, std::string("bad event record: ") + ex.what());
  }
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(3) << std::setfill('0') << ms << 'Z';
  return ss.str();
}

/// Log line with its wall-clock and machine-local fields removed, for replay comparisons.
inline std::string normalize_log_line(const std::string& line) {
  json j = json::parse(line);
  j.erase("timestamp");
  j.erase("created");
  if (auto it = j.find("config"); it != j.end() && it->is_object()) {
    it->erase("runs_dir");
    it->erase("cache_dir");
    it->erase("workers");
  }
  return j.dump();
}

// ---------------------------------------------------------------------------
// Response cache

/// digest of (backend_id, model, prompt_hash)
inline std::string cache_key(std::string_view backend_id, std::string_view model, std::string_view prompt_hash) {
  std::string material;
  material.append(backend_id).append(1, '\n').append(model).append(1, '\n').append(prompt_hash);
  return sha256_hex(material);
}

/// Content-addressed store of raw responses: <dir>/<key[0:2]>/<key>.json.
/// Reads are lock-free; inserts are serialized and atomic (write + rename).
class ResponseCache {
 public:
  explicit ResponseCache(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }

  std::optional<std::string> get(const std::string& key) const {
    std::ifstream in(path_for(key), std::ios::binary);
    if (!in) return std::nullopt;
    try {
      return json::parse(in).at("raw_text").get<std::string>();
    } catch (const json::exception&) {
      return std::nullopt;
    }
  }

  void put(const std::string& key, std::string_view backend_id, std::string_view model, std::string_view prompt_hash,
           std::string_view raw_text) {
    std::lock_guard lock(mutex_);
    const auto path = path_for(key);
    fs::create_directories(path.parent_path());
    const auto tmp = fs::path(path.string() + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << json{{"backend_id", backend_id}, {"model", model}, {"prompt_hash", prompt_hash}, {"raw_text", raw_text}}
                 .dump()
          << '\n';
    }
    fs::rename(tmp, path);
  }

 private:
  fs::path path_for(const std::string& key) const { return dir_ / key.substr(0, 2) / (key + ".json"); }

  fs::path dir_;
  std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Run configuration

struct ProfileSource {
  enum class Kind { Enumerate, Sample, Explicit };
  Kind kind = Kind::Enumerate;
  std::size_t sample_size = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> explicit_profiles;

  std::vector<MasteryProfile> resolve(const ItemBank& bank) const {
    const auto k = bank.skill_count();
    switch (kind) {
      case Kind::Enumerate: return enumerate_profiles(k, bank.grade());
      case Kind::Sample: return sample_profiles(k, sample_size, seed, bank.grade());
      case Kind::Explicit: {
        std::vector<MasteryProfile> out;
        for (const auto& s : explicit_profiles) {
          auto p = MasteryProfile::from_string(s, bank.grade());
          if (p.size() != k)
            throw Error(ErrorCode::LengthMismatch, "profile '" + s + "' does not have " + std::to_string(k) + " bits");
          out.push_back(std::move(p));
        }
        if (out.empty()) throw Error(ErrorCode::InvalidConfig, "explicit profile list is empty");
        return out;
      }
    }
    return {};
  }

  json to_json() const {
    switch (kind) {
      case Kind::Enumerate: return {{"source", "enumerate"}};
      case Kind::Sample: return {{"source", "sample"}, {"n", sample_size}, {"seed", seed}};
      case Kind::Explicit: return {{"source", "explicit"}, {"list", explicit_profiles}};
    }
    return {};
  }

  static ProfileSource from_json(const json& j) {
    ProfileSource p;
    const auto src = j.value("source", std::string("enumerate"));
    if (src == "enumerate") {
      p.kind = Kind::Enumerate;
    } else if (src == "sample") {
      p.kind = Kind::Sample;
      p.sample_size = j.at("n").get<std::size_t>();
      p.seed = j.value("seed", std::uint64_t{0});
    } else if (src == "explicit") {
      p.kind = Kind::Explicit;
      p.explicit_profiles = j.at("list").get<std::vector<std::string>>();
    } else {
      throw Error(ErrorCode::InvalidConfig, "unknown profile source '" + src + "'");
    }
    return p;
  }

  /// "enumerate", "sample:<n>[:<seed>]", or a comma-separated bit-string list.
  static ProfileSource parse(std::string_view text) {
    ProfileSource p;
    if (text == "enumerate") return p;
    if (text.rfind("sample:", 0) == 0) {
      p.kind = Kind::Sample;
      auto rest = std::string(text.substr(7));
      auto colon = rest.find(':');
      p.sample_size = std::stoull(rest.substr(0, colon));
      if (colon != std::string::npos) p.seed = std::stoull(rest.substr(colon + 1));
      return p;
    }
    p.kind = Kind::Explicit;
    std::string cur;
    for (char c : text) {
      if (c == ',' || c == ';') {
        if (!cur.empty()) p.explicit_profiles.push_back(cur);
        cur.clear();
      } else if (c != ' ') {
        cur += c;
      }
    }
    if (!cur.empty()) p.explicit_profiles.push_back(cur);
    return p;
  }
};

struct RunConfig {
  std::string run_id;
  fs::path bank_path;
  std::vector<BackendConfig> backends;
  std::vector<PromptStrategy> strategies;
  ProfileSource profiles;
  ParseMode parse_mode = ParseMode::Strict;
  std::optional<fs::path> templates_dir;  ///< compiled-in defaults when absent
  std::optional<fs::path> pool_path;
  fs::path runs_dir = "runs";
  fs::path cache_dir = "cache";
  std::size_t workers = 1;
  BaselineStyle baseline_style = BaselineStyle::Scaffold;
  bool include_baseline = true;
  bool include_sweep = true;
  std::size_t replicates = 1;

  void validate() const {
    if (run_id.empty()) throw Error(ErrorCode::InvalidConfig, "run_id is empty");
    for (char c : run_id)
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'))
        throw Error(ErrorCode::InvalidConfig, "run_id may only contain letters, digits, '-', '_' and '.'");
    if (backends.empty()) throw Error(ErrorCode::InvalidConfig, "at least one backend is required");
    if (strategies.empty()) throw Error(ErrorCode::InvalidConfig, "at least one strategy is required");
    if (replicates < 1) throw Error(ErrorCode::InvalidConfig, "replicates must be >= 1");
    std::set<std::string> ids;
    for (const auto& b : backends) {
      b.validate();
      if (!ids.insert(b.backend_id).second)
        throw Error(ErrorCode::InvalidConfig, "duplicate backend id '" + b.backend_id + "'");
    }
  }

  json to_json() const {
    json backs = json::array();
    for (const auto& b : backends) backs.push_back(profilebench::to_json(b));
    json strats = json::array();
    for (auto s : strategies) strats.push_back(strategy_name(s));
    return {{"run_id", run_id},
            {"bank", bank_path.string()},
            {"backends", backs},
            {"strategies", strats},
            {"profiles", profiles.to_json()},
            {"parse_mode", parse_mode_name(parse_mode)},
            {"templates", templates_dir ? json(templates_dir->string()) : json(nullptr)},
            {"example_pool", pool_path ? json(pool_path->string()) : json(nullptr)},
            {"runs_dir", runs_dir.string()},
            {"cache_dir", cache_dir.string()},
            {"workers", workers},
            {"baseline_style", baseline_style == BaselineStyle::Plain ? "plain" : "scaffold"},
            {"include_baseline", include_baseline},
            {"include_sweep", include_sweep},
            {"replicates", replicates}};
  }

  static RunConfig from_json(const json& j, const fs::path& base_dir = {}) {
    RunConfig c;
    try {
      auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
      c.run_id = j.at("run_id").get<std::string>();
      c.bank_path = resolve(j.at("bank").get<std::string>());
      for (const auto& b : j.at("backends")) c.backends.push_back(backend_config_from_json(b));
      for (const auto& s : j.at("strategies")) {
        auto strategy = parse_strategy(s.get<std::string>());
        if (!strategy) throw Error(ErrorCode::InvalidConfig, "unknown strategy '" + s.get<std::string>() + "'");
        c.strategies.push_back(*strategy);
      }
      if (j.contains("profiles")) c.profiles = ProfileSource::from_json(j.at("profiles"));
      if (j.contains("parse_mode")) {
        auto mode = parse_parse_mode(j.at("parse_mode").get<std::string>());
        if (!mode) throw Error(ErrorCode::InvalidConfig, "unknown parse mode");
        c.parse_mode = *mode;
      }
      if (j.contains("templates") && !j.at("templates").is_null()) c.templates_dir = resolve(j.at("templates"));
      if (j.contains("example_pool") && !j.at("example_pool").is_null())
        c.pool_path = resolve(j.at("example_pool"));
      if (j.contains("runs_dir")) c.runs_dir = resolve(j.at("runs_dir"));
      if (j.contains("cache_dir")) c.cache_dir = resolve(j.at("cache_dir"));
      c.workers = j.value("workers", std::size_t{1});
      c.baseline_style = j.value("baseline_style", std::string("scaffold")) == "plain" ? BaselineStyle::Plain
                                                                                      : BaselineStyle::Scaffold;
      c.include_baseline = j.value("include_baseline", true);
      c.include_sweep = j.value("include_sweep", true);
      c.replicates = j.value("replicates", std::size_t{1});
    } catch (const json::exception& e) {
      throw Error(ErrorCode::InvalidConfig, e.what());
    }
    return c;
  }
};

/// Drops repeated strategies (keeping first occurrences); reports each drop.
inline std::vector<PromptStrategy> dedupe_strategies(std::span<const PromptStrategy> strategies,
                                                     std::vector<std::string>* warnings = nullptr) {
  std::vector<PromptStrategy> out;
  for (auto s : strategies) {
    if (std::find(out.begin(), out.end(), s) != out.end()) {
      if (warnings) warnings->push_back("duplicate strategy '" + std::string(strategy_name(s)) + "' ignored");
      continue;
    }
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task execution

struct Task {
  Stage stage = Stage::Sweep;
  std::size_t backend = 0;
  PromptStrategy strategy = PromptStrategy::Hybrid;
  MasteryProfile profile;
  std::string student_id;
  const Item* item = nullptr;

  std::string key(const std::vector<Backend*>& backends) const {
    return backends[backend]->id() + '|' + std::string(stage_name(stage)) + '|' + std::string(strategy_name(strategy)) +
           '|' + student_id + '|' + item->id;
  }
};

inline std::string event_key(const ResponseEvent& e) {
  return e.backend_id + '|' + std::string(stage_name(e.stage)) + '|' + std::string(strategy_name(e.strategy)) + '|' +
         e.student_id + '|' + e.item_id;
}

inline std::string baseline_student_id(PromptStrategy s) { return std::string(strategy_name(s)) + "/baseline"; }

inline std::string sweep_student_id(PromptStrategy s, const MasteryProfile& p, std::size_t replicate,
                                    std::size_t replicates) {
  std::string id = std::string(strategy_name(s)) + "/" + p.to_string();
  if (replicates > 1) id += "#" + std::to_string(replicate);
  return id;
}

/// Everything needed to turn a task into an event, shared by all workers.
struct Session {
  std::string run_id = "adhoc";
  const PromptTemplates* templates = nullptr;  ///< defaults when null
  const ExamplePool* pool = nullptr;
  ParseMode parse_mode = ParseMode::Strict;
  BaselineStyle baseline_style = BaselineStyle::Scaffold;
  ResponseCache* cache = nullptr;
  std::size_t workers = 1;
  std::optional<std::size_t> stop_after;  ///< stop once this many events are emitted (interruption testing)
};

struct RunSummary {
  std::size_t events = 0;
  std::size_t skipped = 0;
  std::size_t backend_calls = 0;
  std::size_t cache_hits = 0;
  std::size_t failures = 0;
  std::size_t invalid = 0;
  std::vector<std::string> warnings;
};

inline RenderedPrompt render_task_prompt(const Task& t, const ItemBank& bank, const Session& s) {
  static const PromptTemplates kDefaults = PromptTemplates::defaults();
  const PromptTemplates& templates = s.templates ? *s.templates : kDefaults;
  if (t.stage == Stage::Baseline && s.baseline_style == BaselineStyle::Plain)
    return render_plain_prompt(*t.item, templates);
  return render_prompt(t.profile, t.strategy, *t.item, bank.taxonomy(), templates, s.pool);
}

inline ResponseEvent execute_task(const Task& t, const ItemBank& bank, Backend& backend, const Session& s,
                                  RunSummary& stats, std::mutex& stats_mutex) {
  ResponseEvent e;
  e.run_id = s.run_id;
  e.stage = t.stage;
  e.backend_id = backend.id();
  e.grade = bank.grade();
  e.strategy = t.strategy;
  e.student_id = t.student_id;
  e.profile = t.profile;
  e.item_id = t.item->id;
  e.skill_id = t.item->skill_id;

  const RenderedPrompt prompt = render_task_prompt(t, bank, s);
  e.prompt_hash = prompt.hash;

  bool hit = false, called = false;
  const bool use_cache = s.cache && backend.cacheable();
  const std::string key = use_cache ? cache_key(backend.id(), backend.config().model_name(), prompt.hash) : "";
  if (use_cache) {
    if (auto cached = s.cache->get(key)) {
      e.raw_text = *cached;
      hit = true;
    }
  }
  if (!hit) {
    called = true;
    try {
      e.raw_text = backend.raw_answer({prompt, *t.item, *bank.skill_index(t.item->skill_id), t.profile, t.strategy,
                                       t.student_id});
      if (use_cache) s.cache->put(key, backend.id(), backend.config().model_name(), prompt.hash, e.raw_text);
    } catch (const Error& err) {
      e.error = std::string(err.code_name());
    }
  }
  if (!e.error) e.chosen_index = parse_answer(e.raw_text, s.parse_mode);
  e.is_correct = e.chosen_index && *e.chosen_index == t.item->correct_index;
  e.timestamp = utc_timestamp();

  std::lock_guard lock(stats_mutex);
  stats.cache_hits += hit;
  stats.backend_calls += called;
  stats.failures += e.error.has_value();
  stats.invalid += !e.error && !e.chosen_index;
  return e;
}

/// Runs tasks on `session.workers` threads and hands events to `sink` in task
/// order. Returns once every task (or `stop_after` events) is emitted.
inline RunSummary execute_tasks(const std::vector<Task>& tasks, const ItemBank& bank,
                                const std::vector<Backend*>& backends, const Session& session,
                                const std::function<void(const ResponseEvent&)>& sink) {
  RunSummary stats;
  std::mutex stats_mutex;
  const std::size_t limit = std::min(tasks.size(), session.stop_after.value_or(tasks.size()));

  std::vector<std::optional<ResponseEvent>> done(limit);
  std::mutex out_mutex;
  std::size_t next_out = 0;
  std::atomic<std::size_t> next_task{0};
  std::exception_ptr failure;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next_task.fetch_add(1);
      if (i >= limit) return;
      std::optional<ResponseEvent> event;
      try {
        event = execute_task(tasks[i], bank, *backends[tasks[i].backend], session, stats, stats_mutex);
      } catch (...) {
        std::lock_guard lock(out_mutex);
        if (!failure) failure = std::current_exception();
        next_task.store(limit);
        return;
      }
      std::lock_guard lock(out_mutex);
      if (failure) return;
      done[i] = std::move(event);
      while (next_out < limit && done[next_out]) {
        sink(*done[next_out]);
        done[next_out].reset();
        ++next_out;
      }
    }
  };

  const std::size_t n_workers = std::max<std::size_t>(1, std::min(session.workers, std::max<std::size_t>(limit, 1)));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  stats.events = next_out;
  return stats;
}

inline std::vector<Task> baseline_tasks(const ItemBank& bank, std::size_t backend, PromptStrategy strategy) {
  std::vector<Task> tasks;
  const auto perfect = MasteryProfile::all_retained(bank.skill_count(), bank.grade());
  for (const auto& item : bank.items())
    tasks.push_back({Stage::Baseline, backend, strategy, perfect, baseline_student_id(strategy), &item});
  return tasks;
}

inline std::vector<Task> sweep_tasks(const ItemBank& bank, std::size_t backend, PromptStrategy strategy,
                                     std::span<const MasteryProfile> profiles, std::size_t replicates = 1) {
  std::vector<Task> tasks;
  for (const auto& p : profiles) {
    if (p.size() != bank.skill_count())
      throw Error(ErrorCode::LengthMismatch, "profile " + p.to_string() + " does not match the bank's skill count");
    if (p.grade() != 0 && p.grade() != bank.grade())
      throw Error(ErrorCode::GradeMismatch, "profile grade differs from the bank grade");
    const auto profile = p.with_grade(bank.grade());
    for (std::size_t r = 0; r < replicates; ++r)
      for (const auto& item : bank.items())
        tasks.push_back({Stage::Sweep, backend, strategy, profile, sweep_student_id(strategy, profile, r, replicates),
                         &item});
  }
  return tasks;
}

namespace detail {
inline std::vector<ResponseEvent> collect(const std::vector<Task>& tasks, const ItemBank& bank, Backend& backend,
                                          const Session& session, RunSummary* summary) {
  std::vector<ResponseEvent> events;
  auto stats = execute_tasks(tasks, bank, {&backend}, session, [&](const ResponseEvent& e) { events.push_back(e); });
  if (summary) *summary = std::move(stats);
  return events;
}
}  // namespace detail

/// Stage 1: every item once under the all-retained profile.
inline std::vector<ResponseEvent> run_baseline(const ItemBank& bank, Backend& backend, PromptStrategy strategy,
                                               const Session& session, RunSummary* summary = nullptr) {
  return detail::collect(baseline_tasks(bank, 0, strategy), bank, backend, session, summary);
}

/// Stage 2: one event per (profile, item) pair.
inline std::vector<ResponseEvent> run_profile_sweep(const ItemBank& bank, std::span<const MasteryProfile> profiles,
                                                    PromptStrategy strategy, Backend& backend, const Session& session,
                                                    RunSummary* summary = nullptr) {
  if (profiles.empty()) throw Error(ErrorCode::InvalidConfig, "profile list is empty");
  return detail::collect(sweep_tasks(bank, 0, strategy, profiles), bank, backend, session, summary);
}

/// Stage 3: the full strategy x profile x item cross product.
inline std::vector<ResponseEvent> run_strategy_ablation(const ItemBank& bank, std::span<const MasteryProfile> profiles,
                                                        std::span<const PromptStrategy> strategies, Backend& backend,
                                                        const Session& session, RunSummary* summary = nullptr) {
  std::vector<std::string> warnings;
  const auto unique = dedupe_strategies(strategies, &warnings);
  if (unique.size() < 2) throw Error(ErrorCode::InvalidConfig, "an ablation needs at least two distinct strategies");
  if (profiles.empty()) throw Error(ErrorCode::InvalidConfig, "profile list is empty");
  std::vector<Task> tasks;
  for (auto s : unique) {
    auto part = sweep_tasks(bank, 0, s, profiles);
    tasks.insert(tasks.end(), part.begin(), part.end());
  }
  auto events = detail::collect(tasks, bank, backend, session, summary);
  if (summary) summary->warnings.insert(summary->warnings.end(), warnings.begin(), warnings.end());
  return events;
}

// ---------------------------------------------------------------------------
// File-backed runs

struct LoadedRun {
  json header;
  std::optional<ItemBank> bank;
  std::vector<ResponseEvent> events;
  std::size_t truncated_bytes = 0;  ///< size of a partial trailing line, if any
};

inline fs::path run_log_path(const fs::path& runs_dir, const std::string& run_id) {
  return runs_dir / (run_id + ".jsonl");
}

inline LoadedRun read_run_log(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::RunNotFound, "no run log at " + path.string());
  LoadedRun run;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (in.eof()) {
      // Last line without a newline: a write was cut short.
      run.truncated_bytes = line.size();
      break;
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::MalformedFile, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (line_no == 1) {
      if (j.value("type", "") != "header") throw Error(ErrorCode::MalformedFile, "run log must start with a header");
      run.header = j;
      run.bank = parse_item_bank(j.at("bank"));
      continue;
    }
    run.events.push_back(event_from_json(j));
  }
  if (run.header.is_null()) throw Error(ErrorCode::MalformedFile, "run log has no header: " + path.string());
  return run;
}

inline LoadedRun load_run(const fs::path& runs_dir, const std::string& run_id) {
  const auto path = run_log_path(runs_dir, run_id);
  if (!fs::exists(path)) throw Error(ErrorCode::RunNotFound, "run '" + run_id + "' not found in " + runs_dir.string());
  return read_run_log(path);
}

struct RunOptions {
  bool resume = false;
  std::optional<std::size_t> stop_after;
  /// Pre-built backends by id (tests inject instrumented ones); others are built from config.
  std::map<std::string, Backend*> backend_overrides;
};

struct PreparedRun {
  ItemBank bank;
  PromptTemplates templates;
  std::optional<ExamplePool> pool;
  std::vector<MasteryProfile> profiles;
  std::vector<PromptStrategy> strategies;
  json header;
  std::vector<std::string> warnings;
};

/// Loads every input and builds the log header, including the config hash
/// that guards resumption. Paths, worker count and directories are excluded
/// from the hash; content digests stand in for files.
inline PreparedRun prepare_run(const RunConfig& config) {
  config.validate();
  PreparedRun p{load_item_bank(config.bank_path),
                config.templates_dir ? PromptTemplates::load(*config.templates_dir) : PromptTemplates::defaults(),
                std::nullopt, {}, {}, {}, {}};
  p.warnings = p.bank.warnings();
  p.strategies = dedupe_strategies(config.strategies, &p.warnings);
  if (config.pool_path) p.pool = load_example_pool(*config.pool_path, p.bank);
  for (auto s : p.strategies)
    if (needs_examples(s) && !p.pool)
      throw Error(ErrorCode::PoolRequired, std::string(strategy_name(s)) + " prompting needs --pool");
  if (config.include_sweep) p.profiles = config.profiles.resolve(p.bank);

  json backends = json::array();
  for (const auto& b : config.backends) backends.push_back(to_json(b));
  json strategies = json::array();
  for (auto s : p.strategies) strategies.push_back(strategy_name(s));
  const json identity = {{"run_id", config.run_id},
                         {"bank_digest", p.bank.digest()},
                         {"backends", backends},
                         {"strategies", strategies},
                         {"profiles", config.profiles.to_json()},
                         {"parse_mode", parse_mode_name(config.parse_mode)},
                         {"template_hashes", p.templates.hashes()},
                         {"pool_digest", p.pool ? json(p.pool->digest()) : json(nullptr)},
                         {"baseline_style", config.baseline_style == BaselineStyle::Plain ? "plain" : "scaffold"},
                         {"include_baseline", config.include_baseline},
                         {"include_sweep", config.include_sweep},
                         {"replicates", config.replicates}};

  json pool_entries = nullptr;
  if (p.pool) {
    pool_entries = json::array();
    for (const auto& e : p.pool->entries())
      pool_entries.push_back({{"skill", e.skill_id}, {"correct_demo", e.correct_demo}, {"incorrect_demo", e.incorrect_demo}});
  }
  p.header = {{"type", "header"},
              {"format", kRunLogFormat},
              {"run_id", config.run_id},
              {"created", utc_timestamp()},
              {"config", config.to_json()},
              {"config_hash", sha256_hex(identity.dump())},
              {"identity", identity},
              {"templates",
               {{"profile", p.templates.profile},
                {"instructions", p.templates.instructions},
                {"examples", p.templates.examples},
                {"question", p.templates.question}}},
              {"example_pool", pool_entries},
              {"bank", p.bank.to_json()}};
  return p;
}

/// Full task list in canonical order: per backend, the baseline (under the
/// first strategy) followed by each strategy's profile sweep.
inline std::vector<Task> plan_tasks(const RunConfig& config, const PreparedRun& p) {
  std::vector<Task> tasks;
  for (std::size_t b = 0; b < config.backends.size(); ++b) {
    if (config.include_baseline) {
      auto part = baseline_tasks(p.bank, b, p.strategies.front());
      tasks.insert(tasks.end(), part.begin(), part.end());
    }
    if (config.include_sweep)
      for (auto s : p.strategies) {
        auto part = sweep_tasks(p.bank, b, s, p.profiles, config.replicates);
        tasks.insert(tasks.end(), part.begin(), part.end());
      }
  }
  return tasks;
}

/// Executes (or resumes) a configured run, appending to runs_dir/<run_id>.jsonl.
inline RunSummary run_protocol(const RunConfig& config, const RunOptions& options = {}) {
  PreparedRun prepared = prepare_run(config);
  const auto log_path = run_log_path(config.runs_dir, config.run_id);
  fs::create_directories(config.runs_dir);

  std::unordered_set<std::string> done;
  if (options.resume) {
    LoadedRun existing = load_run(config.runs_dir, config.run_id);
    if (existing.header.at("config_hash") != prepared.header.at("config_hash"))
      throw Error(ErrorCode::ConfigDrift, "configuration differs from the logged snapshot of run '" + config.run_id + "'");
    if (existing.truncated_bytes > 0)
      fs::resize_file(log_path, fs::file_size(log_path) - existing.truncated_bytes);
    for (const auto& e : existing.events) done.insert(event_key(e));
  } else if (fs::exists(log_path)) {
    throw Error(ErrorCode::RunExists, "run '" + config.run_id + "' already exists; use --resume");
  }

  std::vector<std::unique_ptr<Backend>> owned;
  std::vector<Backend*> backends;
  for (const auto& bc : config.backends) {
    if (auto it = options.backend_overrides.find(bc.backend_id); it != options.backend_overrides.end()) {
      backends.push_back(it->second);
    } else {
      owned.push_back(make_backend(bc));
      backends.push_back(owned.back().get());
    }
  }

  const auto all_tasks = plan_tasks(config, prepared);
  std::vector<Task> pending;
  for (const auto& t : all_tasks)
    if (!done.contains(t.key(backends))) pending.push_back(t);

  std::ofstream out(log_path, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + log_path.string());
  if (!options.resume) out << prepared.header.dump() << '\n' << std::flush;

  ResponseCache cache(config.cache_dir);
  Session session;
  session.run_id = config.run_id;
  session.templates = &prepared.templates;
  session.pool = prepared.pool ? &*prepared.pool : nullptr;
  session.parse_mode = config.parse_mode;
  session.baseline_style = config.baseline_style;
  session.cache = &cache;
  session.workers = config.workers;
  session.stop_after = options.stop_after;

  auto summary = execute_tasks(pending, prepared.bank, backends, session, [&](const ResponseEvent& e) {
    out << to_json(e).dump() << '\n' << std::flush;
  });
  summary.skipped = all_tasks.size() - pending.size();
  summary.warnings.insert(summary.warnings.begin(), prepared.warnings.begin(), prepared.warnings.end());
  return summary;
}

}  // namespace profilebench
