#pragma once

// Skill-vector to prompt rendering. A prompt is assembled from four template
// sections (profile, instructions, examples, question); the strategy decides
// which of the two behavioral sections are included, so the hybrid prompt
// contains the other two strategies' blocks verbatim by construction.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"

namespace profilebench {

inline constexpr std::string_view kAnswerDirective =
    "Answer with exactly one letter (A, B, C, or D) and nothing else.";

/// Collapses whitespace runs to one space and trims both ends.
inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(c);
  }
  return out;
}

struct ExampleEntry {
  std::string skill_id;
  std::string correct_demo;
  std::string incorrect_demo;
};

/// Demonstrations loaded from a file kept apart from the evaluation bank.
class ExamplePool {
 public:
  ExamplePool(std::vector<ExampleEntry> entries, const ItemBank& bank, std::string source_path = {})
      : entries_(std::move(entries)), source_path_(std::move(source_path)) {
    check_leakage(bank);
    check_coverage(bank);
  }

  const std::vector<ExampleEntry>& entries() const { return entries_; }
  const std::string& source_path() const { return source_path_; }

  /// First non-empty correct demonstration for the skill, in pool order.
  const std::string& correct_demo(const std::string& skill_id) const {
    for (const auto& e : entries_)
      if (e.skill_id == skill_id && !e.correct_demo.empty()) return e.correct_demo;
    throw Error(ErrorCode::MissingSkillExamples, "no correct demonstration for skill '" + skill_id + "'");
  }

  const std::string& incorrect_demo(const std::string& skill_id) const {
    for (const auto& e : entries_)
      if (e.skill_id == skill_id && !e.incorrect_demo.empty()) return e.incorrect_demo;
    throw Error(ErrorCode::MissingSkillExamples, "no incorrect demonstration for skill '" + skill_id + "'");
  }

  std::string digest() const {
    json j = json::array();
    for (const auto& e : entries_)
      j.push_back({{"skill", e.skill_id}, {"correct_demo", e.correct_demo}, {"incorrect_demo", e.incorrect_demo}});
    return sha256_hex(j.dump());
  }

 private:
  void check_leakage(const ItemBank& bank) const {
    for (const auto& item : bank.items()) {
      const std::string stem = normalize_whitespace(item.stem);
      if (stem.empty()) continue;
      for (const auto& e : entries_)
        for (const auto* demo : {&e.correct_demo, &e.incorrect_demo})
          if (normalize_whitespace(*demo).find(stem) != std::string::npos)
            throw Error(ErrorCode::LeakageDetected,
                        "example for skill '" + e.skill_id + "' contains the stem of evaluation item '" + item.id + "'");
    }
  }

  void check_coverage(const ItemBank& bank) const {
    for (const auto& skill : bank.taxonomy()) {
      bool has_correct = false, has_incorrect = false;
      for (const auto& e : entries_) {
        if (e.skill_id != skill.id) continue;
        has_correct |= !e.correct_demo.empty();
        has_incorrect |= !e.incorrect_demo.empty();
      }
      if (!has_correct || !has_incorrect)
        throw Error(ErrorCode::MissingSkillExamples,
                    "skill '" + skill.id + "' needs at least one correct and one incorrect demonstration");
    }
  }

  std::vector<ExampleEntry> entries_;
  std::string source_path_;
};

inline ExamplePool parse_example_pool(const json& doc, const ItemBank& bank, std::string source_path = {}) {
  std::vector<ExampleEntry> entries;
  try {
    if (!doc.is_array()) throw Error(ErrorCode::MalformedFile, "example pool must be a JSON list");
    for (const auto& j : doc)
      entries.push_back({j.at("skill").get<std::string>(), j.value("correct_demo", std::string{}),
                         j.value("incorrect_demo", std::string{})});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedFile, e.what());
  }
  return ExamplePool(std::move(entries), bank, std::move(source_path));
}

inline ExamplePool load_example_pool(const std::filesystem::path& path, const ItemBank& bank) {
  return parse_example_pool(read_json_file(path), bank, path.string());
}

/// The four template sections. Placeholders: {{retained_skills}},
/// {{missing_skills}}, {{examples}}, {{question}}.
struct PromptTemplates {
  std::string profile;
  std::string instructions;
  std::string examples;
  std::string question;

  static PromptTemplates defaults() {
    return {
        "You are role-playing a student. Your skill profile:\n"
        "Retained skills: {{retained_skills}}\n"
        "Missing skills: {{missing_skills}}",

        "Behavioral rules:\n"
        "- Answer questions that use a retained skill correctly.\n"
        "- For questions that need a missing skill ({{missing_skills}}), you do not know how to do it. "
        "Make the consistent mistake such a student would make and pick a plausible wrong option.",

        "Examples of how this student answers:\n"
        "{{examples}}",

        "Question:\n"
        "{{question}}",
    };
  }

  /// Reads profile.txt, instructions.txt, examples.txt and question.txt.
  static PromptTemplates load(const std::filesystem::path& dir) {
    auto read = [&](const char* name) {
      std::ifstream in(dir / name, std::ios::binary);
      if (!in) throw Error(ErrorCode::MalformedFile, "missing template " + (dir / name).string());
      std::ostringstream ss;
      ss << in.rdbuf();
      std::string text = ss.str();
      while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
      return text;
    };
    return {read("profile.txt"), read("instructions.txt"), read("examples.txt"), read("question.txt")};
  }

  json hashes() const {
    return {{"profile", sha256_hex(profile)},
            {"instructions", sha256_hex(instructions)},
            {"examples", sha256_hex(examples)},
            {"question", sha256_hex(question)}};
  }
};

struct RenderedPrompt {
  std::string text;
  std::string hash;
  std::string profile_statement;
  std::string behavioral_block;
  std::string question_block;
};

/// SHA-256 of the UTF-8 prompt text, lowercase hex.
inline std::string prompt_hash(std::string_view text) { return sha256_hex(text); }
inline std::string prompt_hash(const RenderedPrompt& p) { return prompt_hash(p.text); }

namespace detail {

inline std::string replace_all(std::string text, std::string_view key, std::string_view value) {
  std::size_t pos = 0;
  while ((pos = text.find(key, pos)) != std::string::npos) {
    text.replace(pos, key.size(), value);
    pos += value.size();
  }
  return text;
}

inline std::string skill_label(const Skill& s) { return s.id + " (" + s.name + ")"; }

inline std::string skill_list(std::span<const Skill> taxonomy, const std::vector<std::size_t>& indices) {
  if (indices.empty()) return "none";
  std::string out;
  for (std::size_t n = 0; n < indices.size(); ++n) {
    if (n) out += ", ";
    out += skill_label(taxonomy[indices[n]]);
  }
  return out;
}

inline std::string question_text(const Item& item) {
  std::string out = item.stem;
  for (int i = 0; i < kOptionCount; ++i) {
    out += '\n';
    out += option_letter(i);
    out += ") ";
    out += item.options[i];
  }
  return out;
}

/// Retained skills get one correct demonstration; missing skills get a
/// correct/incorrect pair. Skills appear in taxonomy order.
inline std::string demonstrations(const MasteryProfile& profile, std::span<const Skill> taxonomy,
                                  const ExamplePool& pool) {
  std::string out;
  for (std::size_t i = 0; i < taxonomy.size(); ++i) {
    const auto& skill = taxonomy[i];
    if (i) out += "\n\n";
    if (profile.retained(i)) {
      out += skill_label(skill) + " [retained]\n";
      out += "This student answers correctly: " + pool.correct_demo(skill.id);
    } else {
      out += skill_label(skill) + " [missing]\n";
      out += "A student with this skill would answer: " + pool.correct_demo(skill.id) + "\n";
      out += "This student answers instead: " + pool.incorrect_demo(skill.id);
    }
  }
  return out;
}

inline std::string fill(const std::string& tmpl, const std::string& retained, const std::string& missing,
                        const std::string& examples, const std::string& question) {
  std::string out = replace_all(tmpl, "{{retained_skills}}", retained);
  out = replace_all(std::move(out), "{{missing_skills}}", missing);
  out = replace_all(std::move(out), "{{examples}}", examples);
  return replace_all(std::move(out), "{{question}}", question);
}

}  // namespace detail

/// Renders the control prompt for one (profile, item) pair.
inline RenderedPrompt render_prompt(const MasteryProfile& profile, PromptStrategy strategy, const Item& item,
                                    std::span<const Skill> taxonomy, const PromptTemplates& templates,
                                    const ExamplePool* pool) {
  if (needs_examples(strategy) && pool == nullptr)
    throw Error(ErrorCode::PoolRequired, std::string(strategy_name(strategy)) + " prompting needs an example pool");
  if (profile.grade() != item.grade)
    throw Error(ErrorCode::GradeMismatch, "profile grade " + std::to_string(profile.grade()) + " vs item grade " +
                                              std::to_string(item.grade));
  if (profile.size() != taxonomy.size())
    throw Error(ErrorCode::LengthMismatch, "profile length differs from the taxonomy size");

  const std::string retained = detail::skill_list(taxonomy, profile.retained_indices());
  const std::string missing = detail::skill_list(taxonomy, profile.forgotten_indices());
  const std::string question = detail::question_text(item);
  const std::string examples = needs_examples(strategy) ? detail::demonstrations(profile, taxonomy, *pool) : "";

  RenderedPrompt p;
  p.profile_statement = detail::fill(templates.profile, retained, missing, examples, question);
  if (needs_instructions(strategy))
    p.behavioral_block = detail::fill(templates.instructions, retained, missing, examples, question);
  if (needs_examples(strategy)) {
    if (!p.behavioral_block.empty()) p.behavioral_block += "\n\n";
    p.behavioral_block += detail::fill(templates.examples, retained, missing, examples, question);
  }
  p.question_block = detail::fill(templates.question, retained, missing, examples, question);
  p.question_block += "\n\n";
  p.question_block += kAnswerDirective;

  p.text = p.profile_statement + "\n\n" + p.behavioral_block + "\n\n" + p.question_block;
  p.hash = prompt_hash(p.text);
  return p;
}

/// Bare question with the answer directive and no profile scaffold.
inline RenderedPrompt render_plain_prompt(const Item& item, const PromptTemplates& templates) {
  RenderedPrompt p;
  p.question_block = detail::fill(templates.question, "", "", "", detail::question_text(item));
  p.question_block += "\n\n";
  p.question_block += kAnswerDirective;
  p.text = p.question_block;
  p.hash = prompt_hash(p.text);
  return p;
}

}  // namespace profilebench
