#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fewvlm/data.hpp"
#include "fewvlm/rng.hpp"

namespace fewvlm {

enum class Objective { kMasked, kPrefix };

std::string_view objective_name(Objective objective);

struct PretrainPair {
  Objective objective = Objective::kMasked;
  TokenSeq input;
  TokenSeq target;
  std::string image_id;
};

// iid token masking at `mask_rate`; runs of masked tokens collapse into one
// sentinel each. At least one token is always masked.
PretrainPair mask_spans(std::span<const TokenId> text, const Vocab& vocab, Rng& rng, double mask_rate = 0.15);
// Same construction with the masked positions given explicitly.
PretrainPair mask_positions(std::span<const TokenId> text, const Vocab& vocab, std::span<const std::size_t> masked);

// Split index drawn uniformly from [1, len-1].
PretrainPair prefix_split(std::span<const TokenId> text, Rng& rng);
PretrainPair prefix_split_at(std::span<const TokenId> text, std::size_t index);

// Inverse of mask_spans: substitutes each target span back into its sentinel.
TokenSeq merge_spans(std::span<const TokenId> input, std::span<const TokenId> target, const Vocab& vocab);

struct CorpusItem {
  std::string image_id;
  std::string caption;
};

struct TokenizedItem {
  std::string image_id;
  TokenSeq ids;
};

// JSONL lines of {"image_id", "caption"}.
std::vector<CorpusItem> read_pretrain_corpus(const std::filesystem::path& path);
void write_pretrain_corpus(std::span<const CorpusItem> items, const std::filesystem::path& path);
std::vector<TokenizedItem> tokenize_corpus(std::span<const CorpusItem> items, const Vocab& vocab);

// Objective mix for the three pre-training variants.
double objective_mix(std::string_view objectives);  // "masked" | "prefix" | "both"

using PretrainBatch = std::vector<PretrainPair>;

// One pass over the corpus: order shuffled, each item tagged masked with
// probability `mix` (prefix otherwise) and cut into batches.
std::vector<PretrainBatch> build_pretrain_batches(std::span<const TokenizedItem> corpus, const Vocab& vocab,
                                                  double mix, std::size_t batch_size, Rng& rng,
                                                  double mask_rate = 0.15);

// Endless epoch-by-epoch stream; fully determined by (corpus, seed).
class PretrainStream {
 public:
  PretrainStream(std::vector<TokenizedItem> corpus, const Vocab& vocab, double mix, std::size_t batch_size,
                 std::uint64_t seed);
  const PretrainBatch& next();
  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const;

 private:
  std::vector<TokenizedItem> corpus_;
  const Vocab* vocab_;
  double mix_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<PretrainBatch> current_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

}  // namespace fewvlm
