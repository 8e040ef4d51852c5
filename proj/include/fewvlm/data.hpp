#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace fewvlm {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Token inventory. Sentinels `<text_0>` .. `<text_{n-1}>` occupy ids
// 0..n-1, followed by the four special tokens and then corpus words.
class Vocab {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<s>";
  static constexpr std::string_view kEos = "</s>";
  static constexpr std::string_view kUnk = "<unk>";

  // Builds the inventory from raw texts; words are sorted so the id
  // assignment does not depend on corpus order.
  static Vocab build(std::span<const std::string> texts, std::size_t n_sentinels);
  // Validates an explicit token list (as read from a vocab file).
  static Vocab from_tokens(std::vector<std::string> tokens);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t n_sentinels() const { return n_sentinels_; }
  TokenId pad() const { return pad_; }
  TokenId bos() const { return bos_; }
  TokenId eos() const { return eos_; }
  TokenId unk() const { return unk_; }
  TokenId sentinel(std::size_t k) const;
  bool is_sentinel(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < n_sentinels_;
  }
  bool is_control(TokenId id) const { return id == pad_ || id == bos_ || id == eos_; }

  std::optional<TokenId> find(std::string_view token) const;
  TokenId id(std::string_view token) const;  // unk when absent
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  // Ordinary corpus words (everything after the specials).
  std::span<const std::string> words() const;

 private:
  explicit Vocab(std::vector<std::string> tokens);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t n_sentinels_ = 0;
  TokenId pad_ = -1, bos_ = -1, eos_ = -1, unk_ = -1;
};

std::string sentinel_text(std::size_t k);

// Lowercasing whitespace/punctuation splitter. Sentinel markers survive as
// single pieces; every other ASCII punctuation character is its own piece.
std::vector<std::string> split_words(std::string_view text);
// Canonical form that detokenize(tokenize(s)) reproduces.
std::string normalize_text(std::string_view text);

TokenSeq tokenize(std::string_view text, const Vocab& vocab);
std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab);

struct RegionFeatures {
  std::size_t n_regions = 0;
  std::size_t dim = 0;
  std::vector<float> features;  // n_regions x dim, row-major
  std::vector<float> boxes;     // n_regions x 4, (x1, y1, x2, y2)

  std::span<const float> row(std::size_t r) const {
    return {features.data() + r * dim, dim};
  }
  std::span<const float> box(std::size_t r) const { return {boxes.data() + r * 4, 4}; }
  // A slot whose features and box are all zero is padding.
  bool is_padding(std::size_t r) const;
  // Throws ShapeMismatch / NonFiniteValue / InvalidArgument.
  void validate() const;
};

inline constexpr std::size_t kDefaultRegions = 36;
inline constexpr std::size_t kDefaultFeatureDim = 2048;

RegionFeatures load_features(const std::filesystem::path& path);
void save_features(const RegionFeatures& regions, const std::filesystem::path& path);

// Per-image feature files `<dir>/<image_id>.vlft`, loaded once and cached.
class FeatureStore {
 public:
  explicit FeatureStore(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::shared_ptr<const RegionFeatures> get(const std::string& image_id) const;
  std::filesystem::path path_for(const std::string& image_id) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::mutex mutex_;
  mutable std::map<std::string, std::shared_ptr<const RegionFeatures>> cache_;
};

enum class TaskKind { kVqa, kCaption, kClassify };

std::string_view task_name(TaskKind task);
TaskKind parse_task(std::string_view name);

struct VqaPayload {
  std::string question;
  std::vector<std::string> answers;
};

struct CaptionPayload {
  std::vector<std::string> captions;
};

struct ClassifyPayload {
  std::string label;
  std::vector<std::string> candidate_labels;
};

struct VLExample {
  std::string image_id;
  std::variant<VqaPayload, CaptionPayload, ClassifyPayload> payload;

  TaskKind task() const { return static_cast<TaskKind>(payload.index()); }
  // Checks the payload invariants; throws MissingField.
  void validate() const;
};

// One n-way k-shot episode: support and query examples carry Classify payloads.
struct Episode {
  std::vector<std::string> classes;
  std::vector<VLExample> support;
  std::vector<VLExample> queries;
};

std::vector<VLExample> read_dataset(const std::filesystem::path& path, TaskKind task);
std::vector<VLExample> parse_dataset(std::string_view jsonl, TaskKind task);
void write_dataset(std::span<const VLExample> examples, const std::filesystem::path& path);
std::string example_to_json_line(const VLExample& example);

}  // namespace fewvlm
