#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace fewvlm {

enum class MetricId { kVqaAccuracy, kCider, kClassifyAccuracy };

std::string_view metric_name(MetricId metric);
MetricId parse_metric(std::string_view name);  // "vqa_accuracy" | "cider" | "classify_accuracy"

struct MetricReport {
  std::string metric;
  std::vector<double> scores;  // per example
  double corpus = 0.0;         // mean of scores
  std::size_t n_examples = 0;

  nlohmann::json to_json() const;
  std::string to_markdown() const;
};

// Lowercase, punctuation removed, whitespace collapsed, leading article dropped.
std::string normalize_answer(std::string_view s);

// Consensus min(matches/3, 1) with four or more answers, exact match otherwise.
double vqa_accuracy(std::string_view pred, std::span<const std::string> answers);
MetricReport vqa_report(std::span<const std::string> preds, std::span<const std::vector<std::string>> answers);

struct CiderOptions {
  std::size_t n_max = 4;
  double sigma = 6.0;
  // CIDEr-D: clipped counts and the Gaussian length penalty. Off gives plain CIDEr.
  bool cider_d = true;
};

// Document frequencies come from the reference sets of this corpus.
MetricReport cider(std::span<const std::string> candidates, std::span<const std::vector<std::string>> references,
                   const CiderOptions& options = {});
// Caption text as the metric sees it: lowercase words, punctuation dropped.
std::vector<std::string> cider_tokens(std::string_view caption);

double classify_accuracy(std::span<const std::string> preds, std::span<const std::string> labels);
MetricReport classify_report(std::span<const std::string> preds, std::span<const std::string> labels);

struct Prediction {
  std::string image_id;
  std::string prediction;
};

std::vector<Prediction> read_predictions(const std::filesystem::path& path);
void write_predictions(std::span<const Prediction> preds, const std::filesystem::path& path);

}  // namespace fewvlm
