#pragma once

// Domain model: skills, items, mastery profiles, answer events and the
// per-skill accuracy aggregation that every metric is built on.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "hash.hpp"
#include "random.hpp"
#include "strategy.hpp"

namespace profilebench {

using json = nlohmann::json;

inline constexpr int kOptionCount = 4;
inline constexpr std::size_t kDefaultEnumerationCap = 16;

struct Skill {
  std::string id;
  std::string name;
  int grade = 0;
};

struct Item {
  std::string id;
  int grade = 0;
  std::string skill_id;
  std::string stem;
  std::array<std::string, kOptionCount> options;
  int correct_index = 0;
};

constexpr char option_letter(int index) { return static_cast<char>('A' + index); }

/// A validated, skill-tagged item bank. The taxonomy order is the canonical
/// skill ordering for every vector and matrix derived from the bank.
class ItemBank {
 public:
  ItemBank(int grade, std::vector<Skill> taxonomy, std::vector<Item> items)
      : grade_(grade), taxonomy_(std::move(taxonomy)), items_(std::move(items)) {
    validate();
  }

  int grade() const { return grade_; }
  std::size_t skill_count() const { return taxonomy_.size(); }
  const std::vector<Skill>& taxonomy() const { return taxonomy_; }
  const std::vector<Item>& items() const { return items_; }

  std::optional<std::size_t> skill_index(const std::string& skill_id) const {
    auto it = skill_pos_.find(skill_id);
    if (it == skill_pos_.end()) return std::nullopt;
    return it->second;
  }

  const Item* find_item(const std::string& item_id) const {
    auto it = item_pos_.find(item_id);
    return it == item_pos_.end() ? nullptr : &items_[it->second];
  }

  /// n_i per skill in taxonomy order.
  const std::vector<std::size_t>& items_per_skill() const { return per_skill_; }

  /// Human-readable warnings (per-skill imbalance above 20% of the mean).
  const std::vector<std::string>& warnings() const { return warnings_; }

  /// Content digest over the canonical JSON form.
  std::string digest() const { return sha256_hex(to_json().dump()); }

  json to_json() const {
    json skills = json::array();
    for (const auto& s : taxonomy_) skills.push_back({{"id", s.id}, {"name", s.name}});
    json items = json::array();
    for (const auto& it : items_)
      items.push_back({{"id", it.id}, {"skill", it.skill_id}, {"stem", it.stem},
                       {"options", it.options}, {"answer_index", it.correct_index}});
    return {{"grade", grade_}, {"skills", skills}, {"items", items}};
  }

 private:
  void validate() {
    if (grade_ < 1 || grade_ > 8)
      throw Error(ErrorCode::MalformedFile, "grade must be in [1, 8], got " + std::to_string(grade_));
    if (taxonomy_.empty()) throw Error(ErrorCode::MalformedFile, "taxonomy is empty");
    for (std::size_t i = 0; i < taxonomy_.size(); ++i) {
      auto& s = taxonomy_[i];
      if (s.id.empty()) throw Error(ErrorCode::MalformedFile, "skill with empty id");
      s.grade = grade_;
      if (!skill_pos_.emplace(s.id, i).second)
        throw Error(ErrorCode::MalformedFile, "duplicate skill id '" + s.id + "'");
    }
    per_skill_.assign(taxonomy_.size(), 0);
    for (std::size_t i = 0; i < items_.size(); ++i) {
      auto& item = items_[i];
      item.grade = grade_;
      if (item.id.empty()) throw Error(ErrorCode::MalformedFile, "item with empty id");
      if (!item_pos_.emplace(item.id, i).second)
        throw Error(ErrorCode::DuplicateItemId, "duplicate item id '" + item.id + "'");
      auto pos = skill_index(item.skill_id);
      if (!pos)
        throw Error(ErrorCode::UnknownSkillTag,
                    "item '" + item.id + "' is tagged with unknown skill '" + item.skill_id + "'");
      if (item.correct_index < 0 || item.correct_index >= kOptionCount)
        throw Error(ErrorCode::MalformedFile, "item '" + item.id + "' answer_index out of range");
      std::set<std::string> seen;
      for (const auto& opt : item.options) {
        if (opt.empty()) throw Error(ErrorCode::MalformedFile, "item '" + item.id + "' has an empty option");
        if (!seen.insert(opt).second)
          throw Error(ErrorCode::MalformedFile, "item '" + item.id + "' has duplicate options");
      }
      ++per_skill_[*pos];
    }
    for (std::size_t i = 0; i < taxonomy_.size(); ++i)
      if (per_skill_[i] == 0)
        throw Error(ErrorCode::EmptySkill, "skill '" + taxonomy_[i].id + "' has no items");

    const double mean = static_cast<double>(items_.size()) / static_cast<double>(taxonomy_.size());
    for (std::size_t i = 0; i < taxonomy_.size(); ++i) {
      const double dev = std::abs(static_cast<double>(per_skill_[i]) - mean) / mean;
      if (dev > 0.20) {
        std::ostringstream msg;
        msg << "skill " << taxonomy_[i].id << " has " << per_skill_[i] << " items (mean " << mean << ")";
        warnings_.push_back(msg.str());
      }
    }
  }

  int grade_;
  std::vector<Skill> taxonomy_;
  std::vector<Item> items_;
  std::unordered_map<std::string, std::size_t> skill_pos_;
  std::unordered_map<std::string, std::size_t> item_pos_;
  std::vector<std::size_t> per_skill_;
  std::vector<std::string> warnings_;
};

/// Builds a bank from the item-bank JSON object.
inline ItemBank parse_item_bank(const json& doc) {
  try {
    if (!doc.is_object()) throw Error(ErrorCode::MalformedFile, "item bank must be a JSON object");
    const int grade = doc.at("grade").get<int>();
    std::vector<Skill> taxonomy;
    for (const auto& s : doc.at("skills"))
      taxonomy.push_back({s.at("id").get<std::string>(), s.value("name", s.at("id").get<std::string>()), grade});
    std::vector<Item> items;
    for (const auto& j : doc.at("items")) {
      Item item;
      item.id = j.at("id").get<std::string>();
      item.grade = grade;
      item.skill_id = j.at("skill").get<std::string>();
      item.stem = j.at("stem").get<std::string>();
      const auto& opts = j.at("options");
      if (!opts.is_array() || opts.size() != kOptionCount)
        throw Error(ErrorCode::OptionCountNot4, "item '" + item.id + "' has " +
                                                    std::to_string(opts.is_array() ? opts.size() : 0) +
                                                    " options, expected 4");
      for (int i = 0; i < kOptionCount; ++i) item.options[i] = opts[i].get<std::string>();
      item.correct_index = j.at("answer_index").get<int>();
      items.push_back(std::move(item));
    }
    return ItemBank(grade, std::move(taxonomy), std::move(items));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedFile, e.what());
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MalformedFile, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::MalformedFile, path.string() + ": " + e.what());
  }
}

inline ItemBank load_item_bank(const std::filesystem::path& path) { return parse_item_bank(read_json_file(path)); }

/// Binary mastery vector k over a grade's taxonomy; 1 = retained, 0 = forgotten.
class MasteryProfile {
 public:
  MasteryProfile() = default;
  MasteryProfile(int grade, std::vector<std::uint8_t> bits) : grade_(grade), bits_(std::move(bits)) {
    for (auto b : bits_)
      if (b > 1) throw Error(ErrorCode::InvalidConfig, "mastery bits must be 0 or 1");
  }

  /// Parses "1001"-style bit strings (commas and spaces ignored).
  static MasteryProfile from_string(std::string_view text, int grade = 0) {
    std::vector<std::uint8_t> bits;
    for (char c : text) {
      if (c == '0' || c == '1')
        bits.push_back(static_cast<std::uint8_t>(c - '0'));
      else if (c != ',' && c != ' ' && c != '(' && c != ')' && c != '[' && c != ']')
        throw Error(ErrorCode::InvalidConfig, "bad profile string '" + std::string(text) + "'");
    }
    if (bits.empty()) throw Error(ErrorCode::InvalidConfig, "empty profile string");
    return {grade, std::move(bits)};
  }

  static MasteryProfile all_retained(std::size_t k, int grade = 0) {
    return {grade, std::vector<std::uint8_t>(k, 1)};
  }

  int grade() const { return grade_; }
  MasteryProfile with_grade(int grade) const { return {grade, bits_}; }
  std::size_t size() const { return bits_.size(); }
  std::span<const std::uint8_t> bits() const { return bits_; }
  bool retained(std::size_t i) const { return bits_.at(i) == 1; }

  bool is_perfect() const { return std::all_of(bits_.begin(), bits_.end(), [](auto b) { return b == 1; }); }

  std::vector<std::size_t> retained_indices() const { return indices_with(1); }
  std::vector<std::size_t> forgotten_indices() const { return indices_with(0); }

  /// Bitwise flip; an involution.
  MasteryProfile complement() const {
    auto flipped = bits_;
    for (auto& b : flipped) b ^= 1;
    return {grade_, std::move(flipped)};
  }

  std::string to_string() const {
    std::string s;
    for (auto b : bits_) s += static_cast<char>('0' + b);
    return s;
  }

  friend bool operator==(const MasteryProfile& a, const MasteryProfile& b) { return a.bits_ == b.bits_; }
  friend auto operator<=>(const MasteryProfile& a, const MasteryProfile& b) { return a.bits_ <=> b.bits_; }

 private:
  std::vector<std::size_t> indices_with(std::uint8_t v) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i] == v) out.push_back(i);
    return out;
  }

  int grade_ = 0;
  std::vector<std::uint8_t> bits_;
};

namespace detail {
inline MasteryProfile profile_from_index(std::uint64_t index, std::size_t k, int grade) {
  std::vector<std::uint8_t> bits(k);
  for (std::size_t i = 0; i < k; ++i) bits[i] = static_cast<std::uint8_t>((index >> (k - 1 - i)) & 1U);
  return {grade, std::move(bits)};
}
}  // namespace detail

/// All 2^K profiles in lexicographic bit order, from all-forgotten to all-retained.
inline std::vector<MasteryProfile> enumerate_profiles(std::size_t k, int grade = 0,
                                                      std::size_t cap = kDefaultEnumerationCap) {
  if (k < 1) throw Error(ErrorCode::InvalidConfig, "skill count must be at least 1");
  if (k > cap)
    throw Error(ErrorCode::KTooLarge, "2^" + std::to_string(k) + " profiles exceeds the enumeration cap 2^" +
                                          std::to_string(cap) + "; use sampling");
  std::vector<MasteryProfile> out;
  out.reserve(std::size_t{1} << k);
  for (std::uint64_t m = 0; m < (std::uint64_t{1} << k); ++m) out.push_back(detail::profile_from_index(m, k, grade));
  return out;
}

/// n distinct profiles drawn uniformly without replacement (Floyd's
/// algorithm), returned in lexicographic order. Deterministic in `seed`.
inline std::vector<MasteryProfile> sample_profiles(std::size_t k, std::size_t n, std::uint64_t seed, int grade = 0) {
  if (k < 1 || k > 62) throw Error(ErrorCode::InvalidConfig, "skill count for sampling must be in [1, 62]");
  const std::uint64_t total = std::uint64_t{1} << k;
  if (n > total)
    throw Error(ErrorCode::SampleTooLarge,
                "cannot draw " + std::to_string(n) + " distinct profiles from 2^" + std::to_string(k));
  rng::KeyedStream stream(rng::combine(rng::splitmix64(seed), "sample_profiles"));
  std::set<std::uint64_t> chosen;
  for (std::uint64_t j = total - n; j < total; ++j) {
    const std::uint64_t t = stream.below(j + 1);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  std::vector<MasteryProfile> out;
  for (auto idx : chosen) out.push_back(detail::profile_from_index(idx, k, grade));
  return out;
}

enum class Stage { Baseline, Sweep };

constexpr std::string_view stage_name(Stage s) { return s == Stage::Baseline ? "baseline" : "sweep"; }

/// One answer for one (student, item) pair. `chosen_index` is empty when the
/// answer was INVALID or the backend failed; both count as incorrect.
struct ResponseEvent {
  std::string run_id;
  Stage stage = Stage::Sweep;
  std::string backend_id;
  int grade = 0;
  PromptStrategy strategy = PromptStrategy::Hybrid;
  std::string student_id;
  MasteryProfile profile;
  std::string item_id;
  std::string skill_id;
  std::optional<int> chosen_index;
  std::string raw_text;
  bool is_correct = false;
  std::string prompt_hash;
  std::optional<std::string> error;
  std::string timestamp;
};

struct SkillTally {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t invalid = 0;

  double accuracy() const { return static_cast<double>(correct) / static_cast<double>(total); }
};

/// Per-skill accuracies a_i* = c_i / n_i in taxonomy order. Vectors built
/// from plain values (calibration inputs, tests) carry no tallies.
class SkillAccuracyVector {
 public:
  SkillAccuracyVector() = default;
  explicit SkillAccuracyVector(std::vector<SkillTally> tallies) : tallies_(std::move(tallies)) {
    values_.reserve(tallies_.size());
    for (const auto& t : tallies_) {
      if (t.total == 0 || t.correct > t.total)
        throw Error(ErrorCode::MissingSkillCoverage, "every skill needs at least one event");
      values_.push_back(t.accuracy());
    }
  }

  static SkillAccuracyVector from_values(std::vector<double> values) {
    SkillAccuracyVector v;
    v.values_ = std::move(values);
    return v;
  }

  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const { return values_; }
  const std::vector<SkillTally>& tallies() const { return tallies_; }

  std::size_t invalid_count() const {
    std::size_t n = 0;
    for (const auto& t : tallies_) n += t.invalid;
    return n;
  }

  std::size_t event_count() const {
    std::size_t n = 0;
    for (const auto& t : tallies_) n += t.total;
    return n;
  }

  friend bool operator==(const SkillAccuracyVector& a, const SkillAccuracyVector& b) { return a.values_ == b.values_; }

 private:
  std::vector<SkillTally> tallies_;
  std::vector<double> values_;
};

/// Aggregates one student's events into per-skill accuracies. Order independent.
template <typename Events>
SkillAccuracyVector accuracy_by_skill(const Events& events, const ItemBank& bank) {
  std::vector<SkillTally> tallies(bank.skill_count());
  for (const ResponseEvent& e : events) {
    const Item* item = bank.find_item(e.item_id);
    if (!item) throw Error(ErrorCode::UnknownItem, "event refers to unknown item '" + e.item_id + "'");
    auto& t = tallies[*bank.skill_index(item->skill_id)];
    ++t.total;
    if (e.chosen_index && *e.chosen_index == item->correct_index) ++t.correct;
    if (!e.chosen_index) ++t.invalid;
  }
  for (std::size_t i = 0; i < tallies.size(); ++i)
    if (tallies[i].total == 0)
      throw Error(ErrorCode::MissingSkillCoverage, "no events for skill '" + bank.taxonomy()[i].id + "'");
  return SkillAccuracyVector(std::move(tallies));
}

struct RetainedForgotten {
  std::optional<double> retained;   ///< ā_R, absent when R is empty
  std::optional<double> forgotten;  ///< ā_F, absent when F is empty
};

inline RetainedForgotten retained_forgotten_split(const MasteryProfile& profile, std::span<const double> accuracy) {
  if (profile.size() != accuracy.size())
    throw Error(ErrorCode::LengthMismatch, "profile and accuracy vector differ in length");
  double sum_r = 0.0, sum_f = 0.0;
  std::size_t n_r = 0, n_f = 0;
  for (std::size_t i = 0; i < accuracy.size(); ++i) {
    if (profile.retained(i)) {
      sum_r += accuracy[i];
      ++n_r;
    } else {
      sum_f += accuracy[i];
      ++n_f;
    }
  }
  RetainedForgotten out;
  if (n_r) out.retained = sum_r / static_cast<double>(n_r);
  if (n_f) out.forgotten = sum_f / static_cast<double>(n_f);
  return out;
}

inline RetainedForgotten retained_forgotten_split(const MasteryProfile& profile, const SkillAccuracyVector& a) {
  return retained_forgotten_split(profile, a.values());
}

}  // namespace profilebench
