#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fewvlm/data.hpp"
#include "fewvlm/rng.hpp"
#include "json.hpp"

namespace fewvlm {

inline constexpr std::string_view kQuestionSlot = "[Q]";
inline constexpr std::string_view kAnswerSlot = "[A]";

struct PromptTemplate {
  std::string id;
  std::string input_pattern;   // at most one [Q]
  std::string target_pattern;  // exactly one [A]

  // Throws PlaceholderMismatch.
  void validate() const;
  bool has_question() const;
  nlohmann::json to_json() const;
};

PromptTemplate make_template(std::string id, std::string input_pattern, std::string target_pattern);

// Every named template: "none", P1-P3 (sentinel target), P1-P3 "-plain"
// (bare target), Q1-Q3, "classify", and the fixed noisy rows.
const std::vector<PromptTemplate>& catalog_templates();
std::optional<PromptTemplate> find_template(std::string_view id);
// Throws InvalidArgument for unknown ids.
PromptTemplate get_template(std::string_view id);
nlohmann::json catalog_json();

// Returns the template with every `<text_1>` replaced by `<text_k>`.
PromptTemplate rebase_sentinel(const PromptTemplate& t, std::size_t k);
PromptTemplate with_target(const PromptTemplate& t, std::string target_pattern);

struct PromptedText {
  std::string input;
  std::string target;
};

// [Q] must appear iff the example is VQA. The VQA target uses the most
// frequent answer (earliest on ties); captioning uses the first caption.
PromptedText apply_prompt(const PromptTemplate& t, const VLExample& example);
PromptedText apply_prompt(const PromptTemplate& t, std::string_view question, std::string_view answer);

// Strips the target pattern's text around [A]; generations missing the
// literal prefix or suffix pass through trimmed.
std::string extract_label(std::string_view generated, const PromptTemplate& t);

std::string majority_answer(const std::vector<std::string>& answers);

enum class NoisyKind { kIrrelevant, kNoisyTokens, kRandomSentence };

inline constexpr std::size_t kNoisyRows = 5;

const std::vector<std::string>& irrelevant_prompts();
const std::vector<std::string>& random_sentence_prompts();
const std::vector<std::string>& example_noisy_token_prompts();

// Fixed rows for irrelevant / random-sentence (and the listed noisy-token
// examples); throws IndexOutOfRange.
PromptTemplate noisy_prompt(NoisyKind kind, std::size_t index);
// 5..9 tokens drawn from the vocabulary's words, placed before or after [Q].
PromptTemplate noisy_token_prompt(const Vocab& vocab, Rng& rng, std::string id = "noisy-token");

}  // namespace fewvlm
