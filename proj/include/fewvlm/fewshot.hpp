#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fewvlm/data.hpp"
#include "fewvlm/eval.hpp"
#include "fewvlm/model.hpp"
#include "fewvlm/objectives.hpp"
#include "fewvlm/prompts.hpp"
#include "json.hpp"

namespace fewvlm {

struct SplitSpec {
  std::uint64_t seed = 0;
  std::size_t n_train = 16;
  std::size_t n_dev = 16;
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> dev_ids;

  nlohmann::json to_json() const;
};

// Split i is drawn without replacement with seed master_seed + i.
std::vector<SplitSpec> sample_splits(std::size_t dataset_size, std::size_t n_splits, std::size_t n_train,
                                     std::size_t n_dev, std::uint64_t master_seed);

struct TrainConfig {
  std::size_t epochs = 200;
  double lr = 5e-5;
  double warmup = 0.05;
  std::size_t batch_size = 0;  // 0 picks min(n_train, 16)
  std::uint64_t seed = 0;
  std::size_t eval_stride = 1;  // dev evaluation every this many epochs
  std::size_t max_gen_len = 24;
  double clip_norm = 0.0;

  static TrainConfig few_shot() { return {}; }
  static TrainConfig pretrain() {
    TrainConfig c;
    c.epochs = 30;
    c.lr = 1e-4;
    c.batch_size = 32;
    return c;
  }
  // Throws InvalidArgument.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

using FeatureLookup = std::function<const RegionFeatures&(const std::string& image_id)>;

// What the harness needs besides the examples themselves.
struct TaskContext {
  const Vocab* vocab = nullptr;
  FeatureLookup features;
  MetricId metric = MetricId::kVqaAccuracy;
};

// Tokenized prompted pairs; targets end with eos.
std::vector<SeqExample> prompted_examples(std::span<const VLExample> examples, std::span<const std::size_t> ids,
                                          const PromptTemplate& t, const TaskContext& ctx);

// Greedy generation followed by label extraction.
std::vector<std::string> predict(const Model& model, std::span<const VLExample> examples,
                                 std::span<const std::size_t> ids, const PromptTemplate& t, const TaskContext& ctx,
                                 std::size_t max_len);

MetricReport score_predictions(std::span<const VLExample> examples, std::span<const std::size_t> ids,
                               std::span<const std::string> preds, MetricId metric);

MetricReport evaluate(const Model& model, std::span<const VLExample> examples, std::span<const std::size_t> ids,
                      const PromptTemplate& t, const TaskContext& ctx, std::size_t max_len);

struct FinetuneResult {
  Model best;
  std::size_t best_epoch = 0;  // 1-based; 0 means no dev evaluation ran
  double best_dev = 0.0;
  std::vector<double> dev_trace;   // one entry per evaluated epoch
  std::vector<double> train_loss;  // mean per-example loss, one per epoch
};

// Trains on the prompted train examples and keeps the weights with the best
// dev metric (earliest epoch on ties). An empty dev set keeps the final weights.
FinetuneResult finetune(const Model& init, std::span<const VLExample> examples, std::span<const std::size_t> train_ids,
                        std::span<const std::size_t> dev_ids, const PromptTemplate& t, const TrainConfig& cfg,
                        const TaskContext& ctx);

struct PretrainLog {
  std::vector<double> epoch_loss;  // mean per-pair loss
  std::size_t steps = 0;
};

// MaskedLM / PrefixLM pre-training in place; `mix` is the masked fraction.
PretrainLog pretrain(Model& model, std::span<const TokenizedItem> corpus, const Vocab& vocab,
                     const FeatureLookup& features, double mix, const TrainConfig& cfg);

struct ProtocolSpec {
  std::size_t n_splits = 5;
  std::size_t n_train = 16;  // 0 is zero-shot
  std::size_t n_dev = 16;
  std::uint64_t master_seed = 0;
  std::size_t threads = 1;
};

struct RunResult {
  std::string metric;
  std::string template_id;
  std::vector<double> split_scores;
  double mean = 0.0;
  double stddev = 0.0;  // sample stddev; 0 for a single split
  std::vector<std::size_t> best_epochs;
  std::vector<std::vector<double>> dev_traces;

  nlohmann::json to_json() const;
  std::string to_markdown() const;
};

RunResult aggregate(std::string metric, std::string template_id, std::vector<double> scores);

// Fine-tunes a fresh copy of `pretrained` per split drawn from `pool` and
// scores each on `test`. With n_train == 0 the model is scored as is.
RunResult run_protocol(const Model& pretrained, std::span<const VLExample> pool, std::span<const VLExample> test,
                       const PromptTemplate& t, const TrainConfig& cfg, const ProtocolSpec& spec,
                       const TaskContext& ctx);

struct EpisodeResult {
  std::vector<double> accuracies;
  double mean = 0.0;
  nlohmann::json to_json() const;
};

// Throws MalformedEpisode.
void validate_episode(const Episode& episode, std::size_t n_way);

// Per episode: fine-tune on the support set, score queries by exact match.
EpisodeResult episode_protocol(const Model& pretrained, std::span<const Episode> episodes, const PromptTemplate& t,
                               const TrainConfig& cfg, const TaskContext& ctx, std::size_t n_way = 5);

}  // namespace fewvlm
