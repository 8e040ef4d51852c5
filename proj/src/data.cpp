#include "fewvlm/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "fewvlm/error.hpp"
#include "json.hpp"

namespace fewvlm {

namespace {

bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c); }
bool is_ascii_space(unsigned char c) { return c < 128 && std::isspace(c); }

// Length of a `<text_N>` marker starting at text[pos], 0 if none.
std::size_t sentinel_marker_length(std::string_view text, std::size_t pos) {
  constexpr std::string_view kOpen = "<text_";
  if (text.compare(pos, kOpen.size(), kOpen) != 0) return 0;
  std::size_t i = pos + kOpen.size();
  const std::size_t digits_start = i;
  while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
  if (i == digits_start || i >= text.size() || text[i] != '>') return 0;
  return i + 1 - pos;
}

std::optional<std::size_t> sentinel_index(std::string_view piece) {
  if (sentinel_marker_length(piece, 0) != piece.size()) return std::nullopt;
  std::size_t k = 0;
  for (char c : piece.substr(6, piece.size() - 7)) {
    k = k * 10 + static_cast<std::size_t>(c - '0');
    if (k > 1'000'000) return std::nullopt;
  }
  return k;
}

}  // namespace

std::string sentinel_text(std::size_t k) { return "<text_" + std::to_string(k) + ">"; }

std::vector<std::string> split_words(std::string_view text) {
  std::string lowered(text);
  for (char& c : lowered) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 128) c = static_cast<char>(std::tolower(u));
  }
  std::vector<std::string> pieces;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) pieces.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < lowered.size();) {
    const auto c = static_cast<unsigned char>(lowered[i]);
    if (is_ascii_space(c)) {
      flush();
      ++i;
    } else if (const std::size_t n = sentinel_marker_length(lowered, i); n > 0) {
      flush();
      pieces.emplace_back(lowered.substr(i, n));
      i += n;
    } else if (is_ascii_punct(c)) {
      flush();
      pieces.emplace_back(1, lowered[i]);
      ++i;
    } else {
      current.push_back(lowered[i]);
      ++i;
    }
  }
  flush();
  return pieces;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& piece : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += piece;
  }
  return out;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      fail(ErrorCode::kInvalidArgument, "duplicate vocabulary token: " + tokens_[i]);
    }
  }
  while (n_sentinels_ < tokens_.size() && tokens_[n_sentinels_] == sentinel_text(n_sentinels_)) {
    ++n_sentinels_;
  }
  if (n_sentinels_ < 2) fail(ErrorCode::kInvalidArgument, "vocabulary needs at least 2 sentinels");
  auto require = [&](std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) {
      fail(ErrorCode::kInvalidArgument, "vocabulary lacks special token " + std::string(name));
    }
    return it->second;
  };
  pad_ = require(kPad);
  bos_ = require(kBos);
  eos_ = require(kEos);
  unk_ = require(kUnk);
  for (std::size_t i = n_sentinels_; i < tokens_.size(); ++i) {
    if (sentinel_index(tokens_[i])) {
      fail(ErrorCode::kInvalidArgument, "sentinel out of order: " + tokens_[i]);
    }
  }
}

Vocab Vocab::build(std::span<const std::string> texts, std::size_t n_sentinels) {
  std::set<std::string> words;
  for (const auto& text : texts) {
    for (auto& piece : split_words(text)) {
      if (!sentinel_index(piece)) words.insert(std::move(piece));
    }
  }
  for (auto special : {kPad, kBos, kEos, kUnk}) words.erase(std::string(special));
  std::vector<std::string> tokens;
  tokens.reserve(n_sentinels + 4 + words.size());
  for (std::size_t k = 0; k < n_sentinels; ++k) tokens.push_back(sentinel_text(k));
  for (auto special : {kPad, kBos, kEos, kUnk}) tokens.emplace_back(special);
  tokens.insert(tokens.end(), words.begin(), words.end());
  return Vocab(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) { return Vocab(std::move(tokens)); }

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open vocab file " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(std::move(line));
  }
  return Vocab(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write vocab file " + path.string());
  for (const auto& token : tokens_) out << token << '\n';
}

TokenId Vocab::sentinel(std::size_t k) const {
  if (k >= n_sentinels_) {
    fail(ErrorCode::kIndexOutOfRange, "sentinel index " + std::to_string(k) + " out of range");
  }
  return static_cast<TokenId>(k);
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id(std::string_view token) const { return find(token).value_or(unk_); }

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    fail(ErrorCode::kInvalidId, "token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::span<const std::string> Vocab::words() const {
  const std::size_t first = n_sentinels_ + 4;
  return std::span<const std::string>(tokens_).subspan(std::min(first, tokens_.size()));
}

TokenSeq tokenize(std::string_view text, const Vocab& vocab) {
  TokenSeq ids;
  for (const auto& piece : split_words(text)) ids.push_back(vocab.id(piece));
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& token = vocab.token(id);
    if (vocab.is_control(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += token;
  }
  return out;
}

// --- region features -------------------------------------------------------

bool RegionFeatures::is_padding(std::size_t r) const {
  auto zero = [](float v) { return v == 0.0f; };
  auto f = row(r);
  auto b = box(r);
  return std::all_of(f.begin(), f.end(), zero) && std::all_of(b.begin(), b.end(), zero);
}

void RegionFeatures::validate() const {
  if (n_regions == 0 || dim == 0) {
    fail(ErrorCode::kShapeMismatch, "region features need n_regions >= 1 and dim >= 1");
  }
  if (features.size() != n_regions * dim || boxes.size() != n_regions * 4) {
    fail(ErrorCode::kShapeMismatch, "region feature buffers disagree with declared shape");
  }
  for (float v : features) {
    if (!std::isfinite(v)) fail(ErrorCode::kNonFiniteValue, "non-finite region feature value");
  }
  for (std::size_t r = 0; r < n_regions; ++r) {
    auto b = box(r);
    for (float v : b) {
      if (!std::isfinite(v)) fail(ErrorCode::kNonFiniteValue, "non-finite box coordinate");
    }
    const bool ok = 0.0f <= b[0] && b[0] <= b[2] && b[2] <= 1.0f && 0.0f <= b[1] &&
                    b[1] <= b[3] && b[3] <= 1.0f;
    if (!ok) {
      fail(ErrorCode::kInvalidArgument, "box " + std::to_string(r) + " is not a normalized (x1,y1,x2,y2)");
    }
  }
}

namespace {

constexpr char kFeatureMagic[4] = {'V', 'L', 'F', 'T'};

template <typename U>
U to_little_endian(U value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return value;
}

void put_u32(std::string& out, std::uint32_t v) {
  v = to_little_endian(v);
  out.append(reinterpret_cast<const char*>(&v), 4);
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(const std::string& in, std::size_t offset) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + offset, 4);
  return to_little_endian(v);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

RegionFeatures load_features(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
    fail(ErrorCode::kBadMagic, path.string() + " is not a VLFT feature file");
  }
  RegionFeatures out;
  out.n_regions = get_u32(bytes, 4);
  out.dim = get_u32(bytes, 8);
  if (out.n_regions == 0 || out.dim == 0) {
    fail(ErrorCode::kShapeMismatch, path.string() + ": header declares an empty matrix");
  }
  const std::size_t expected = 12 + 4 * (out.n_regions * out.dim + out.n_regions * 4);
  if (bytes.size() != expected) {
    fail(ErrorCode::kShapeMismatch, path.string() + ": payload size " + std::to_string(bytes.size()) +
                                        " != " + std::to_string(expected));
  }
  std::size_t offset = 12;
  auto read_floats = [&](std::vector<float>& dst, std::size_t n) {
    dst.resize(n);
    for (std::size_t i = 0; i < n; ++i, offset += 4) {
      dst[i] = std::bit_cast<float>(get_u32(bytes, offset));
    }
  };
  read_floats(out.features, out.n_regions * out.dim);
  read_floats(out.boxes, out.n_regions * 4);
  out.validate();
  return out;
}

void save_features(const RegionFeatures& regions, const std::filesystem::path& path) {
  regions.validate();
  std::string out(kFeatureMagic, 4);
  out.reserve(12 + 4 * (regions.features.size() + regions.boxes.size()));
  put_u32(out, static_cast<std::uint32_t>(regions.n_regions));
  put_u32(out, static_cast<std::uint32_t>(regions.dim));
  for (float f : regions.features) put_f32(out, f);
  for (float f : regions.boxes) put_f32(out, f);
  std::ofstream file(path, std::ios::binary);
  if (!file) fail(ErrorCode::kIoError, "cannot write " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

std::filesystem::path FeatureStore::path_for(const std::string& image_id) const {
  return dir_ / (image_id + ".vlft");
}

std::shared_ptr<const RegionFeatures> FeatureStore::get(const std::string& image_id) const {
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(image_id); it != cache_.end()) return it->second;
  }
  auto loaded = std::make_shared<const RegionFeatures>(load_features(path_for(image_id)));
  std::lock_guard lock(mutex_);
  return cache_.emplace(image_id, std::move(loaded)).first->second;
}

// --- datasets --------------------------------------------------------------

std::string_view task_name(TaskKind task) {
  switch (task) {
    case TaskKind::kVqa: return "vqa";
    case TaskKind::kCaption: return "caption";
    case TaskKind::kClassify: return "classify";
  }
  return "?";
}

TaskKind parse_task(std::string_view name) {
  if (name == "vqa") return TaskKind::kVqa;
  if (name == "caption") return TaskKind::kCaption;
  if (name == "classify") return TaskKind::kClassify;
  fail(ErrorCode::kInvalidArgument, "unknown task kind: " + std::string(name));
}

void VLExample::validate() const {
  if (image_id.empty()) fail(ErrorCode::kMissingField, "empty image_id");
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, VqaPayload>) {
          if (p.answers.empty()) fail(ErrorCode::kMissingField, image_id + ": answers is empty");
        } else if constexpr (std::is_same_v<P, CaptionPayload>) {
          if (p.captions.empty()) fail(ErrorCode::kMissingField, image_id + ": captions is empty");
        } else {
          if (std::find(p.candidate_labels.begin(), p.candidate_labels.end(), p.label) ==
              p.candidate_labels.end()) {
            fail(ErrorCode::kMissingField, image_id + ": label not among candidate_labels");
          }
        }
      },
      payload);
}

namespace {

using nlohmann::json;

const json& field(const json& record, const char* name, std::size_t line) {
  auto it = record.find(name);
  if (it == record.end()) {
    fail(ErrorCode::kMissingField, "line " + std::to_string(line) + ": missing field '" + name + "'");
  }
  return *it;
}

std::vector<std::string> string_list(const json& value, const char* name, std::size_t line) {
  if (!value.is_array()) {
    fail(ErrorCode::kParseError, "line " + std::to_string(line) + ": '" + name + "' must be an array");
  }
  std::vector<std::string> out;
  for (const auto& v : value) {
    if (!v.is_string()) {
      fail(ErrorCode::kParseError, "line " + std::to_string(line) + ": '" + name + "' must hold strings");
    }
    out.push_back(v.get<std::string>());
  }
  return out;
}

std::string string_field(const json& record, const char* name, std::size_t line) {
  const json& v = field(record, name, line);
  if (!v.is_string()) {
    fail(ErrorCode::kParseError, "line " + std::to_string(line) + ": '" + name + "' must be a string");
  }
  return v.get<std::string>();
}

}  // namespace

std::vector<VLExample> parse_dataset(std::string_view jsonl, TaskKind task) {
  std::vector<VLExample> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= jsonl.size()) {
    std::size_t end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    std::string_view line = jsonl.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == jsonl.size()) break;
      continue;
    }
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(ErrorCode::kParseError, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!record.is_object()) {
      fail(ErrorCode::kParseError, "line " + std::to_string(line_no) + ": expected a JSON object");
    }
    VLExample ex;
    ex.image_id = string_field(record, "image_id", line_no);
    switch (task) {
      case TaskKind::kVqa:
        ex.payload = VqaPayload{string_field(record, "question", line_no),
                                string_list(field(record, "answers", line_no), "answers", line_no)};
        break;
      case TaskKind::kCaption:
        ex.payload = CaptionPayload{string_list(field(record, "captions", line_no), "captions", line_no)};
        break;
      case TaskKind::kClassify:
        ex.payload = ClassifyPayload{
            string_field(record, "label", line_no),
            string_list(field(record, "candidate_labels", line_no), "candidate_labels", line_no)};
        break;
    }
    try {
      ex.validate();
    } catch (const Error& e) {
      fail(e.code(), "line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(ex));
    if (end == jsonl.size()) break;
  }
  return out;
}

std::vector<VLExample> read_dataset(const std::filesystem::path& path, TaskKind task) {
  return parse_dataset(read_file(path), task);
}

std::string example_to_json_line(const VLExample& example) {
  json record;
  record["image_id"] = example.image_id;
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, VqaPayload>) {
          record["question"] = p.question;
          record["answers"] = p.answers;
        } else if constexpr (std::is_same_v<P, CaptionPayload>) {
          record["captions"] = p.captions;
        } else {
          record["label"] = p.label;
          record["candidate_labels"] = p.candidate_labels;
        }
      },
      example.payload);
  return record.dump();
}

void write_dataset(std::span<const VLExample> examples, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  for (const auto& ex : examples) out << example_to_json_line(ex) << '\n';
}

}  // namespace fewvlm
