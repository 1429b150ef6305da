#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace profilebench {

enum class PromptStrategy { InstructionOnly, ExampleOnly, Hybrid };

inline constexpr std::array<PromptStrategy, 3> kAllStrategies = {
    PromptStrategy::InstructionOnly, PromptStrategy::ExampleOnly, PromptStrategy::Hybrid};

constexpr std::string_view strategy_name(PromptStrategy s) {
  switch (s) {
    case PromptStrategy::InstructionOnly: return "instruction_only";
    case PromptStrategy::ExampleOnly: return "example_only";
    case PromptStrategy::Hybrid: return "hybrid";
  }
  return "";
}

/// Accepts the canonical names plus the hyphenated/upper-case spellings.
inline std::optional<PromptStrategy> parse_strategy(std::string_view text) {
  std::string norm;
  for (char c : text) norm += (c == '-') ? '_' : static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c);
  for (auto s : kAllStrategies)
    if (norm == strategy_name(s)) return s;
  if (norm == "instruction") return PromptStrategy::InstructionOnly;
  if (norm == "example") return PromptStrategy::ExampleOnly;
  return std::nullopt;
}

constexpr bool needs_examples(PromptStrategy s) { return s != PromptStrategy::InstructionOnly; }
constexpr bool needs_instructions(PromptStrategy s) { return s != PromptStrategy::ExampleOnly; }

}  // namespace profilebench
