#include "fewvlm/prompts.hpp"

#include <algorithm>
#include <map>

#include "fewvlm/error.hpp"

namespace fewvlm {

namespace {

std::size_t count_of(std::string_view s, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string_view::npos; pos = s.find(needle, pos + needle.size())) ++n;
  return n;
}

std::string replace_once(std::string s, std::string_view slot, std::string_view value) {
  const auto pos = s.find(slot);
  if (pos != std::string::npos) s.replace(pos, slot.size(), value);
  return s;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

constexpr std::string_view kSentinelTarget = "<text_1> [A]";

}  // namespace

void PromptTemplate::validate() const {
  if (count_of(target_pattern, kAnswerSlot) != 1) {
    fail(ErrorCode::kPlaceholderMismatch, "template " + id + ": target must contain [A] exactly once");
  }
  if (count_of(input_pattern, kQuestionSlot) > 1) {
    fail(ErrorCode::kPlaceholderMismatch, "template " + id + ": input contains [Q] more than once");
  }
  if (count_of(input_pattern, kAnswerSlot) != 0) {
    fail(ErrorCode::kPlaceholderMismatch, "template " + id + ": input must not contain [A]");
  }
}

bool PromptTemplate::has_question() const { return input_pattern.find(kQuestionSlot) != std::string::npos; }

nlohmann::json PromptTemplate::to_json() const {
  return {{"id", id}, {"input", input_pattern}, {"target", target_pattern}};
}

PromptTemplate make_template(std::string id, std::string input_pattern, std::string target_pattern) {
  PromptTemplate t{std::move(id), std::move(input_pattern), std::move(target_pattern)};
  t.validate();
  return t;
}

const std::vector<std::string>& irrelevant_prompts() {
  static const std::vector<std::string> rows = {
      "Fill in the blank in the below sentence: [Q]",
      "Question: [Q] True or False?",
      "[Q] What color is the floor?",
      "Paraphrase this into a different question? [Q]",
      "[Q] How many are they?",
  };
  return rows;
}

const std::vector<std::string>& random_sentence_prompts() {
  static const std::vector<std::string> rows = {
      "[Q] A black dog is sitting on a couch.",
      "[Q] A man working at a kitchen counter in a room illuminated by sunlight.",
      "A brown purse is sitting on a green bench. [Q]",
      "A television that is sitting next to signs. [Q]",
      "[Q] A woman is wearing white pants.",
  };
  return rows;
}

const std::vector<std::string>& example_noisy_token_prompts() {
  static const std::vector<std::string> rows = {
      "nezg publice passed Dream [Q]",
      "benefic video starting garbagetap Talent summary [Q]",
      "gestion Bun dates youngest batteriesfeder organisationoyez [Q]",
      "[Q] chefernției geekutilisées plantingasta Pest principiiMF saddle véritable",
      "[Q] composant emergency laissé Klägereiniger swipe concentrateOSS/18 rewardprepaid",
  };
  return rows;
}

const std::vector<PromptTemplate>& catalog_templates() {
  static const std::vector<PromptTemplate> all = [] {
    std::vector<PromptTemplate> t;
    t.push_back(make_template("none", "[Q]", "[A]"));
    const std::vector<std::pair<std::string, std::string>> vqa = {
        {"P1", "[Q] <text_1>"}, {"P2", "question: [Q] answer:"}, {"P3", "question: [Q] answer: <text_1>"}};
    for (const auto& [id, input] : vqa) t.push_back(make_template(id, input, std::string(kSentinelTarget)));
    for (const auto& [id, input] : vqa) t.push_back(make_template(id + "-plain", input, "[A]"));
    t.push_back(make_template("Q1", "a picture of", "[A]"));
    t.push_back(make_template("Q2", "a photo of", "[A]"));
    t.push_back(make_template("Q3", "an image of", "[A]"));
    t.push_back(make_template("classify", "This is <text_1>", std::string(kSentinelTarget)));
    for (std::size_t i = 0; i < kNoisyRows; ++i) {
      t.push_back(noisy_prompt(NoisyKind::kIrrelevant, i));
      t.push_back(noisy_prompt(NoisyKind::kNoisyTokens, i));
      t.push_back(noisy_prompt(NoisyKind::kRandomSentence, i));
    }
    return t;
  }();
  return all;
}

std::optional<PromptTemplate> find_template(std::string_view id) {
  for (const auto& t : catalog_templates())
    if (t.id == id) return t;
  return std::nullopt;
}

PromptTemplate get_template(std::string_view id) {
  auto t = find_template(id);
  if (!t) fail(ErrorCode::kInvalidArgument, "unknown template id '" + std::string(id) + "'");
  return *t;
}

nlohmann::json catalog_json() {
  nlohmann::json j;
  j["vqa"] = {{"P1", "[Q] <text_1>"}, {"P2", "question: [Q] answer:"}, {"P3", "question: [Q] answer: <text_1>"}};
  j["vqa_targets"] = {"[A]", "<text_1> [A]"};
  j["caption"] = {{"Q1", "a picture of"}, {"Q2", "a photo of"}, {"Q3", "an image of"}};
  j["classify"] = {{"input", "This is <text_1>"}, {"target", "<text_1> [A]"}};
  j["noisy"] = {{"irrelevant", irrelevant_prompts()},
                {"noisy_tokens", example_noisy_token_prompts()},
                {"random_sentences", random_sentence_prompts()},
                {"target", "<text_1> [A]"}};
  j["templates"] = nlohmann::json::array();
  for (const auto& t : catalog_templates()) j["templates"].push_back(t.to_json());
  return j;
}

PromptTemplate rebase_sentinel(const PromptTemplate& t, std::size_t k) {
  const std::string from = "<text_1>";
  const std::string to = sentinel_text(k);
  auto sub = [&](std::string s) {
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
      s.replace(pos, from.size(), to);
    }
    return s;
  };
  return make_template(t.id, sub(t.input_pattern), sub(t.target_pattern));
}

PromptTemplate with_target(const PromptTemplate& t, std::string target_pattern) {
  return make_template(t.id, t.input_pattern, std::move(target_pattern));
}

std::string majority_answer(const std::vector<std::string>& answers) {
  if (answers.empty()) fail(ErrorCode::kEmptyAnswers, "answer list is empty");
  std::map<std::string, std::size_t> counts;
  for (const auto& a : answers) ++counts[a];
  const std::string* best = &answers.front();
  for (const auto& a : answers)
    if (counts[a] > counts[*best]) best = &a;
  return *best;
}

PromptedText apply_prompt(const PromptTemplate& t, std::string_view question, std::string_view answer) {
  t.validate();
  return {replace_once(t.input_pattern, kQuestionSlot, question), replace_once(t.target_pattern, kAnswerSlot, answer)};
}

PromptedText apply_prompt(const PromptTemplate& t, const VLExample& example) {
  const bool is_vqa = example.task() == TaskKind::kVqa;
  if (is_vqa != t.has_question()) {
    fail(ErrorCode::kPlaceholderMismatch, "template " + t.id + (is_vqa ? " has no [Q] for a VQA example"
                                                                       : " has [Q] but the example has no question"));
  }
  return std::visit(
      [&](const auto& p) -> PromptedText {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, VqaPayload>) {
          return apply_prompt(t, p.question, majority_answer(p.answers));
        } else if constexpr (std::is_same_v<P, CaptionPayload>) {
          if (p.captions.empty()) fail(ErrorCode::kMissingField, "caption example without captions");
          return apply_prompt(t, "", p.captions.front());
        } else {
          return apply_prompt(t, "", p.label);
        }
      },
      example.payload);
}

std::string extract_label(std::string_view generated, const PromptTemplate& t) {
  const auto slot = t.target_pattern.find(kAnswerSlot);
  if (slot == std::string::npos) return std::string(trim(generated));
  const auto prefix = trim(std::string_view(t.target_pattern).substr(0, slot));
  const auto suffix = trim(std::string_view(t.target_pattern).substr(slot + kAnswerSlot.size()));
  auto s = trim(generated);
  if (!prefix.empty() && s.substr(0, prefix.size()) == prefix) s = trim(s.substr(prefix.size()));
  if (!suffix.empty() && s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix) {
    s = trim(s.substr(0, s.size() - suffix.size()));
  }
  return std::string(s);
}

PromptTemplate noisy_prompt(NoisyKind kind, std::size_t index) {
  if (index >= kNoisyRows) {
    fail(ErrorCode::kIndexOutOfRange, "noisy prompt index " + std::to_string(index) + " out of range");
  }
  switch (kind) {
    case NoisyKind::kIrrelevant:
      return make_template("irrelevant-" + std::to_string(index), irrelevant_prompts()[index],
                           std::string(kSentinelTarget));
    case NoisyKind::kRandomSentence:
      return make_template("random-sentence-" + std::to_string(index), random_sentence_prompts()[index],
                           std::string(kSentinelTarget));
    case NoisyKind::kNoisyTokens:
      return make_template("noisy-token-" + std::to_string(index), example_noisy_token_prompts()[index],
                           std::string(kSentinelTarget));
  }
  fail(ErrorCode::kInvalidArgument, "unknown noisy prompt kind");
}

PromptTemplate noisy_token_prompt(const Vocab& vocab, Rng& rng, std::string id) {
  const auto words = vocab.words();
  if (words.empty()) fail(ErrorCode::kInvalidArgument, "vocabulary has no words to sample");
  const auto n = static_cast<std::size_t>(rng.range(5, 9));
  std::string noise;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) noise += ' ';
    noise += words[static_cast<std::size_t>(rng.below(words.size()))];
  }
  const bool before = rng.bernoulli(0.5);
  return make_template(std::move(id), before ? noise + " [Q]" : "[Q] " + noise, std::string(kSentinelTarget));
}

}  // namespace fewvlm
