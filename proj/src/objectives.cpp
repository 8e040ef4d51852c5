#include "fewvlm/objectives.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fewvlm/error.hpp"
#include "json.hpp"

namespace fewvlm {

std::string_view objective_name(Objective objective) {
  return objective == Objective::kMasked ? "masked" : "prefix";
}

namespace {

void require_length(std::span<const TokenId> text) {
  if (text.size() < 2) fail(ErrorCode::kTooShort, "pre-training text needs at least 2 tokens");
}

}  // namespace

PretrainPair mask_positions(std::span<const TokenId> text, const Vocab& vocab, std::span<const std::size_t> masked) {
  require_length(text);
  std::vector<std::uint8_t> is_masked(text.size(), 0);
  for (std::size_t p : masked) {
    if (p >= text.size()) fail(ErrorCode::kIndexOutOfRange, "mask position past end of text");
    is_masked[p] = 1;
  }
  PretrainPair pair;
  pair.objective = Objective::kMasked;
  std::size_t span = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!is_masked[i]) {
      pair.input.push_back(text[i]);
      continue;
    }
    if (i == 0 || !is_masked[i - 1]) {
      if (span >= vocab.n_sentinels()) {
        fail(ErrorCode::kInvalidArgument, "text needs more sentinels than the vocabulary reserves");
      }
      const TokenId s = vocab.sentinel(span++);
      pair.input.push_back(s);
      pair.target.push_back(s);
    }
    pair.target.push_back(text[i]);
  }
  if (pair.target.empty()) fail(ErrorCode::kEmptyTarget, "no position was masked");
  return pair;
}

PretrainPair mask_spans(std::span<const TokenId> text, const Vocab& vocab, Rng& rng, double mask_rate) {
  require_length(text);
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) fail(ErrorCode::kInvalidArgument, "mask_rate must lie in (0, 1)");
  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < text.size(); ++i)
    if (rng.bernoulli(mask_rate)) masked.push_back(i);
  if (masked.empty()) masked.push_back(static_cast<std::size_t>(rng.below(text.size())));
  return mask_positions(text, vocab, masked);
}

PretrainPair prefix_split_at(std::span<const TokenId> text, std::size_t index) {
  require_length(text);
  if (index < 1 || index >= text.size()) fail(ErrorCode::kIndexOutOfRange, "split index must lie in [1, len-1]");
  PretrainPair pair;
  pair.objective = Objective::kPrefix;
  pair.input.assign(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(index));
  pair.target.assign(text.begin() + static_cast<std::ptrdiff_t>(index), text.end());
  return pair;
}

PretrainPair prefix_split(std::span<const TokenId> text, Rng& rng) {
  require_length(text);
  return prefix_split_at(text, 1 + static_cast<std::size_t>(rng.below(text.size() - 1)));
}

TokenSeq merge_spans(std::span<const TokenId> input, std::span<const TokenId> target, const Vocab& vocab) {
  // Group target tokens by the sentinel that opens them.
  std::vector<std::pair<TokenId, TokenSeq>> spans;
  for (TokenId t : target) {
    if (vocab.is_sentinel(t)) {
      spans.push_back({t, {}});
    } else {
      if (spans.empty()) fail(ErrorCode::kInvalidArgument, "target does not start with a sentinel");
      spans.back().second.push_back(t);
    }
  }
  TokenSeq out;
  std::size_t next = 0;
  for (TokenId t : input) {
    if (!vocab.is_sentinel(t)) {
      out.push_back(t);
      continue;
    }
    if (next >= spans.size() || spans[next].first != t) {
      fail(ErrorCode::kInvalidArgument, "input and target sentinels disagree");
    }
    out.insert(out.end(), spans[next].second.begin(), spans[next].second.end());
    ++next;
  }
  if (next != spans.size()) fail(ErrorCode::kInvalidArgument, "target has spans missing from the input");
  return out;
}

std::vector<CorpusItem> read_pretrain_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + path.string());
  std::vector<CorpusItem> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kParseError, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("image_id") || !j.contains("caption")) {
      fail(ErrorCode::kMissingField, path.string() + ":" + std::to_string(line_no) + ": needs image_id and caption");
    }
    out.push_back({j["image_id"].get<std::string>(), j["caption"].get<std::string>()});
  }
  return out;
}

void write_pretrain_corpus(std::span<const CorpusItem> items, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  for (const auto& item : items) out << nlohmann::json{{"image_id", item.image_id}, {"caption", item.caption}}.dump() << '\n';
}

std::vector<TokenizedItem> tokenize_corpus(std::span<const CorpusItem> items, const Vocab& vocab) {
  std::vector<TokenizedItem> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back({item.image_id, tokenize(item.caption, vocab)});
  return out;
}

double objective_mix(std::string_view objectives) {
  if (objectives == "masked") return 1.0;
  if (objectives == "prefix") return 0.0;
  if (objectives == "both") return 0.5;
  fail(ErrorCode::kInvalidArgument, "objectives must be masked, prefix or both, got '" + std::string(objectives) + "'");
}

std::vector<PretrainBatch> build_pretrain_batches(std::span<const TokenizedItem> corpus, const Vocab& vocab,
                                                  double mix, std::size_t batch_size, Rng& rng, double mask_rate) {
  if (corpus.empty()) fail(ErrorCode::kEmptyCorpus, "pre-training corpus is empty");
  if (batch_size < 1) fail(ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  if (mix < 0.0 || mix > 1.0) fail(ErrorCode::kInvalidArgument, "mix must lie in [0, 1]");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<PretrainBatch> batches;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i % batch_size == 0) batches.emplace_back();
    const auto& item = corpus[order[i]];
    // Draw the tag first so the objective sequence does not depend on the
    // masking draws.
    const bool masked = rng.bernoulli(mix);
    PretrainPair pair = masked ? mask_spans(item.ids, vocab, rng, mask_rate) : prefix_split(item.ids, rng);
    pair.image_id = item.image_id;
    batches.back().push_back(std::move(pair));
  }
  return batches;
}

PretrainStream::PretrainStream(std::vector<TokenizedItem> corpus, const Vocab& vocab, double mix,
                               std::size_t batch_size, std::uint64_t seed)
    : corpus_(std::move(corpus)), vocab_(&vocab), mix_(mix), batch_size_(batch_size), rng_(seed) {
  if (corpus_.empty()) fail(ErrorCode::kEmptyCorpus, "pre-training corpus is empty");
  if (batch_size_ < 1) fail(ErrorCode::kInvalidArgument, "batch_size must be >= 1");
}

std::size_t PretrainStream::batches_per_epoch() const { return (corpus_.size() + batch_size_ - 1) / batch_size_; }

const PretrainBatch& PretrainStream::next() {
  if (cursor_ == current_.size()) {
    if (!current_.empty()) ++epoch_;
    current_ = build_pretrain_batches(corpus_, *vocab_, mix_, batch_size_, rng_);
    cursor_ = 0;
  }
  return current_[cursor_++];
}

}  // namespace fewvlm
