#include "fewvlm/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "fewvlm/error.hpp"

namespace fewvlm {

std::string_view metric_name(MetricId metric) {
  switch (metric) {
    case MetricId::kVqaAccuracy:
      return "vqa_accuracy";
    case MetricId::kCider:
      return "cider";
    case MetricId::kClassifyAccuracy:
      return "classify_accuracy";
  }
  return "unknown";
}

MetricId parse_metric(std::string_view name) {
  if (name == "vqa_accuracy") return MetricId::kVqaAccuracy;
  if (name == "cider") return MetricId::kCider;
  if (name == "classify_accuracy") return MetricId::kClassifyAccuracy;
  fail(ErrorCode::kInvalidArgument, "unknown metric '" + std::string(name) + "'");
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

MetricReport make_report(std::string metric, std::vector<double> scores) {
  MetricReport r;
  r.metric = std::move(metric);
  r.n_examples = scores.size();
  r.corpus = mean_of(scores);
  r.scores = std::move(scores);
  return r;
}

std::vector<std::string> lower_words_without_punct(std::string_view s) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(c)) {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
  return {{"metric", metric}, {"corpus", corpus}, {"n_examples", n_examples}, {"scores", scores}};
}

std::string MetricReport::to_markdown() const {
  std::ostringstream out;
  out << "| metric | n | score |\n|---|---|---|\n";
  out << "| " << metric << " | " << n_examples << " | " << std::fixed << std::setprecision(4) << corpus << " |\n";
  return out.str();
}

std::string normalize_answer(std::string_view s) {
  auto words = lower_words_without_punct(s);
  if (!words.empty() && (words.front() == "a" || words.front() == "an" || words.front() == "the")) {
    words.erase(words.begin());
  }
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

double vqa_accuracy(std::string_view pred, std::span<const std::string> answers) {
  if (answers.empty()) fail(ErrorCode::kEmptyAnswers, "vqa_accuracy needs at least one answer");
  const std::string p = normalize_answer(pred);
  std::size_t matches = 0;
  for (const auto& a : answers)
    if (normalize_answer(a) == p) ++matches;
  if (answers.size() >= 4) return std::min(static_cast<double>(matches) / 3.0, 1.0);
  return matches > 0 ? 1.0 : 0.0;
}

MetricReport vqa_report(std::span<const std::string> preds, std::span<const std::vector<std::string>> answers) {
  if (preds.size() != answers.size()) fail(ErrorCode::kLengthMismatch, "predictions and answers differ in length");
  std::vector<double> scores;
  scores.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) scores.push_back(vqa_accuracy(preds[i], answers[i]));
  return make_report("vqa_accuracy", std::move(scores));
}

std::vector<std::string> cider_tokens(std::string_view caption) { return lower_words_without_punct(caption); }

namespace {

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, double>;

NgramCounts count_ngrams(const std::vector<std::string>& words, std::size_t n_max) {
  NgramCounts counts;
  for (std::size_t n = 1; n <= n_max; ++n) {
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      counts[Ngram(words.begin() + static_cast<std::ptrdiff_t>(i), words.begin() + static_cast<std::ptrdiff_t>(i + n))] +=
          1.0;
    }
  }
  return counts;
}

struct TfIdfVector {
  std::vector<std::map<Ngram, double>> vec;  // per order
  std::vector<double> norm;
  double length = 0.0;  // bigram count, as the reference scorer measures length
};

TfIdfVector to_vector(const NgramCounts& counts, const std::map<Ngram, double>& df, double ref_len,
                      std::size_t n_max) {
  TfIdfVector v;
  v.vec.resize(n_max);
  v.norm.assign(n_max, 0.0);
  for (const auto& [gram, tf] : counts) {
    const auto it = df.find(gram);
    const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
    const std::size_t n = gram.size() - 1;
    const double w = tf * (ref_len - d);
    v.vec[n][gram] = w;
    v.norm[n] += w * w;
    if (n == 1) v.length += tf;
  }
  for (auto& x : v.norm) x = std::sqrt(x);
  return v;
}

double similarity(const TfIdfVector& hyp, const TfIdfVector& ref, const CiderOptions& opt) {
  const double delta = hyp.length - ref.length;
  double total = 0.0;
  for (std::size_t n = 0; n < opt.n_max; ++n) {
    double val = 0.0;
    for (const auto& [gram, h] : hyp.vec[n]) {
      const auto it = ref.vec[n].find(gram);
      if (it == ref.vec[n].end()) continue;
      val += (opt.cider_d ? std::min(h, it->second) : h) * it->second;
    }
    if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val /= hyp.norm[n] * ref.norm[n];
    if (opt.cider_d) val *= std::exp(-(delta * delta) / (2.0 * opt.sigma * opt.sigma));
    total += val;
  }
  return total;
}

}  // namespace

MetricReport cider(std::span<const std::string> candidates, std::span<const std::vector<std::string>> references,
                   const CiderOptions& options) {
  if (candidates.size() != references.size()) {
    fail(ErrorCode::kLengthMismatch, "cider: candidates and references differ in length");
  }
  if (options.n_max < 1) fail(ErrorCode::kInvalidArgument, "cider: n_max must be >= 1");
  std::vector<std::vector<NgramCounts>> ref_counts(references.size());
  std::map<Ngram, double> df;
  for (std::size_t i = 0; i < references.size(); ++i) {
    if (references[i].empty()) fail(ErrorCode::kEmptyReferences, "cider: image " + std::to_string(i) + " has no references");
    std::map<Ngram, bool> seen;
    for (const auto& r : references[i]) {
      ref_counts[i].push_back(count_ngrams(cider_tokens(r), options.n_max));
      for (const auto& [gram, c] : ref_counts[i].back()) seen[gram] = true;
    }
    for (const auto& [gram, unused] : seen) df[gram] += 1.0;
  }
  const double ref_len = candidates.empty() ? 0.0 : std::log(static_cast<double>(references.size()));
  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto hyp = to_vector(count_ngrams(cider_tokens(candidates[i]), options.n_max), df, ref_len, options.n_max);
    double sum = 0.0;
    for (const auto& rc : ref_counts[i]) sum += similarity(hyp, to_vector(rc, df, ref_len, options.n_max), options);
    double s = sum / static_cast<double>(options.n_max) / static_cast<double>(ref_counts[i].size()) * 10.0;
    scores.push_back(std::max(0.0, s));
  }
  return make_report(options.cider_d ? "cider" : "cider_plain", std::move(scores));
}

double classify_accuracy(std::span<const std::string> preds, std::span<const std::string> labels) {
  return classify_report(preds, labels).corpus;
}

MetricReport classify_report(std::span<const std::string> preds, std::span<const std::string> labels) {
  if (preds.size() != labels.size()) fail(ErrorCode::kLengthMismatch, "predictions and labels differ in length");
  std::vector<double> scores;
  scores.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    scores.push_back(normalize_answer(preds[i]) == normalize_answer(labels[i]) ? 1.0 : 0.0);
  }
  return make_report("classify_accuracy", std::move(scores));
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + path.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("image_id").get<std::string>(), j.at("prediction").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kParseError, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_predictions(std::span<const Prediction> preds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  for (const auto& p : preds) out << nlohmann::json{{"image_id", p.image_id}, {"prediction", p.prediction}}.dump() << '\n';
}

}  // namespace fewvlm
