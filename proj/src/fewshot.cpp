#include "fewvlm/fewshot.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "fewvlm/error.hpp"
#include "fewvlm/optim.hpp"
#include "fewvlm/rng.hpp"

namespace fewvlm {

nlohmann::json SplitSpec::to_json() const {
  return {{"seed", seed}, {"n_train", n_train}, {"n_dev", n_dev}, {"train_ids", train_ids}, {"dev_ids", dev_ids}};
}

std::vector<SplitSpec> sample_splits(std::size_t dataset_size, std::size_t n_splits, std::size_t n_train,
                                     std::size_t n_dev, std::uint64_t master_seed) {
  if (dataset_size < n_train + n_dev) {
    fail(ErrorCode::kDatasetTooSmall, "dataset of " + std::to_string(dataset_size) + " cannot hold " +
                                          std::to_string(n_train) + " train + " + std::to_string(n_dev) + " dev");
  }
  std::vector<SplitSpec> out;
  for (std::size_t i = 0; i < n_splits; ++i) {
    SplitSpec s;
    s.seed = master_seed + i;
    s.n_train = n_train;
    s.n_dev = n_dev;
    std::vector<std::size_t> idx(dataset_size);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(s.seed);
    // Partial Fisher-Yates: the first n_train + n_dev slots are the sample.
    for (std::size_t k = 0; k < n_train + n_dev; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng.below(dataset_size - k));
      std::swap(idx[k], idx[j]);
    }
    s.train_ids.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.dev_ids.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                     idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
    out.push_back(std::move(s));
  }
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 1) fail(ErrorCode::kInvalidArgument, "epochs must be >= 1");
  if (!(lr > 0.0)) fail(ErrorCode::kInvalidArgument, "lr must be > 0");
  if (warmup < 0.0 || warmup >= 1.0) fail(ErrorCode::kInvalidArgument, "warmup must lie in [0, 1)");
  if (eval_stride < 1) fail(ErrorCode::kInvalidArgument, "eval_stride must be >= 1");
  if (max_gen_len < 1) fail(ErrorCode::kInvalidArgument, "max_gen_len must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs}, {"lr", lr},           {"warmup", warmup},           {"batch_size", batch_size},
          {"seed", seed},     {"eval_stride", eval_stride}, {"max_gen_len", max_gen_len}, {"clip_norm", clip_norm}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.warmup = j.value("warmup", c.warmup);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.eval_stride = j.value("eval_stride", c.eval_stride);
  c.max_gen_len = j.value("max_gen_len", c.max_gen_len);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.validate();
  return c;
}

std::vector<SeqExample> prompted_examples(std::span<const VLExample> examples, std::span<const std::size_t> ids,
                                          const PromptTemplate& t, const TaskContext& ctx) {
  std::vector<SeqExample> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    if (id >= examples.size()) fail(ErrorCode::kIndexOutOfRange, "example index out of range");
    const auto& ex = examples[id];
    const auto text = apply_prompt(t, ex);
    SeqExample s;
    s.regions = &ctx.features(ex.image_id);
    s.input = tokenize(text.input, *ctx.vocab);
    s.target = tokenize(text.target, *ctx.vocab);
    s.target.push_back(ctx.vocab->eos());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::string> predict(const Model& model, std::span<const VLExample> examples,
                                 std::span<const std::size_t> ids, const PromptTemplate& t, const TaskContext& ctx,
                                 std::size_t max_len) {
  const auto prompted = prompted_examples(examples, ids, t, ctx);
  std::vector<std::string> out;
  out.reserve(prompted.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t b = 0; b < prompted.size(); b += kChunk) {
    const auto chunk = std::span<const SeqExample>(prompted).subspan(b, std::min(kChunk, prompted.size() - b));
    for (const auto& seq : model.generate_batch(chunk, max_len)) {
      out.push_back(extract_label(detokenize(seq, *ctx.vocab), t));
    }
  }
  return out;
}

MetricReport score_predictions(std::span<const VLExample> examples, std::span<const std::size_t> ids,
                               std::span<const std::string> preds, MetricId metric) {
  if (preds.size() != ids.size()) fail(ErrorCode::kLengthMismatch, "one prediction per example expected");
  switch (metric) {
    case MetricId::kVqaAccuracy: {
      std::vector<std::vector<std::string>> answers;
      for (std::size_t id : ids) {
        const auto* p = std::get_if<VqaPayload>(&examples[id].payload);
        if (!p) fail(ErrorCode::kInvalidArgument, "vqa_accuracy needs VQA examples");
        answers.push_back(p->answers);
      }
      return vqa_report(preds, answers);
    }
    case MetricId::kCider: {
      std::vector<std::vector<std::string>> refs;
      for (std::size_t id : ids) {
        const auto* p = std::get_if<CaptionPayload>(&examples[id].payload);
        if (!p) fail(ErrorCode::kInvalidArgument, "cider needs caption examples");
        refs.push_back(p->captions);
      }
      return cider(preds, refs);
    }
    case MetricId::kClassifyAccuracy: {
      std::vector<std::string> labels;
      for (std::size_t id : ids) {
        const auto* p = std::get_if<ClassifyPayload>(&examples[id].payload);
        if (!p) fail(ErrorCode::kInvalidArgument, "classify_accuracy needs classification examples");
        labels.push_back(p->label);
      }
      return classify_report(preds, labels);
    }
  }
  fail(ErrorCode::kInvalidArgument, "unknown metric");
}

MetricReport evaluate(const Model& model, std::span<const VLExample> examples, std::span<const std::size_t> ids,
                      const PromptTemplate& t, const TaskContext& ctx, std::size_t max_len) {
  const auto preds = predict(model, examples, ids, t, ctx, max_len);
  return score_predictions(examples, ids, preds, ctx.metric);
}

FinetuneResult finetune(const Model& init, std::span<const VLExample> examples, std::span<const std::size_t> train_ids,
                        std::span<const std::size_t> dev_ids, const PromptTemplate& t, const TrainConfig& cfg,
                        const TaskContext& ctx) {
  cfg.validate();
  if (train_ids.empty()) fail(ErrorCode::kInvalidArgument, "finetune needs at least one training example");
  const auto train = prompted_examples(examples, train_ids, t, ctx);
  const std::size_t batch = cfg.batch_size ? cfg.batch_size : std::min<std::size_t>(train.size(), 16);
  const std::size_t steps_per_epoch = (train.size() + batch - 1) / batch;

  FinetuneResult result;
  Model model = init.clone();
  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.warmup_fraction = cfg.warmup;
  acfg.total_steps = cfg.epochs * steps_per_epoch;
  acfg.clip_norm = cfg.clip_norm;
  nn::Adam<float> opt(model.parameters(), acfg);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best = -std::numeric_limits<double>::infinity();
  bool have_best = false;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < train.size(); b += batch) {
      std::vector<SeqExample> mb;
      for (std::size_t i = b; i < std::min(b + batch, train.size()); ++i) mb.push_back(train[order[i]]);
      nn::Graph<float> g(true);
      g.set_training(true);
      g.seed(cfg.seed * 1000003ULL + step++);
      auto loss = model.nll_loss(g, mb);
      epoch_loss += static_cast<double>(loss.item());
      g.backward(loss);
      opt.step();
    }
    result.train_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    if (dev_ids.empty()) continue;
    if (epoch % cfg.eval_stride != 0 && epoch != cfg.epochs) continue;
    const double dev = evaluate(model, examples, dev_ids, t, ctx, cfg.max_gen_len).corpus;
    result.dev_trace.push_back(dev);
    if (dev > best) {
      best = dev;
      result.best = model.clone();
      result.best_epoch = epoch;
      result.best_dev = dev;
      have_best = true;
    }
  }
  if (!have_best) result.best = std::move(model);
  return result;
}

PretrainLog pretrain(Model& model, std::span<const TokenizedItem> corpus, const Vocab& vocab,
                     const FeatureLookup& features, double mix, const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t batch = cfg.batch_size ? cfg.batch_size : 32;
  PretrainStream stream(std::vector<TokenizedItem>(corpus.begin(), corpus.end()), vocab, mix, batch, cfg.seed);
  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.warmup_fraction = cfg.warmup;
  acfg.total_steps = cfg.epochs * stream.batches_per_epoch();
  acfg.clip_norm = cfg.clip_norm;
  nn::Adam<float> opt(model.parameters(), acfg);
  PretrainLog log;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < stream.batches_per_epoch(); ++b) {
      const auto& pairs = stream.next();
      std::vector<SeqExample> mb;
      mb.reserve(pairs.size());
      for (const auto& p : pairs) {
        SeqExample s{&features(p.image_id), p.input, p.target};
        s.target.push_back(vocab.eos());
        mb.push_back(std::move(s));
      }
      nn::Graph<float> g(true);
      g.set_training(true);
      g.seed(cfg.seed * 1000003ULL + log.steps++);
      auto loss = model.nll_loss(g, mb);
      total += static_cast<double>(loss.item());
      n += mb.size();
      g.backward(loss);
      opt.step();
    }
    log.epoch_loss.push_back(total / static_cast<double>(n));
  }
  return log;
}

nlohmann::json RunResult::to_json() const {
  return {{"metric", metric},           {"template", template_id}, {"split_scores", split_scores},
          {"mean", mean},               {"stddev", stddev},        {"best_epochs", best_epochs},
          {"dev_traces", dev_traces}};
}

std::string RunResult::to_markdown() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "| template | metric | splits | mean | stddev |\n|---|---|---|---|---|\n";
  out << "| " << template_id << " | " << metric << " | " << split_scores.size() << " | " << mean << " | " << stddev
      << " |\n";
  return out.str();
}

RunResult aggregate(std::string metric, std::string template_id, std::vector<double> scores) {
  RunResult r;
  r.metric = std::move(metric);
  r.template_id = std::move(template_id);
  r.split_scores = std::move(scores);
  const double n = static_cast<double>(r.split_scores.size());
  if (!r.split_scores.empty()) r.mean = std::accumulate(r.split_scores.begin(), r.split_scores.end(), 0.0) / n;
  if (r.split_scores.size() > 1) {
    double ss = 0.0;
    for (double s : r.split_scores) ss += (s - r.mean) * (s - r.mean);
    r.stddev = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

RunResult run_protocol(const Model& pretrained, std::span<const VLExample> pool, std::span<const VLExample> test,
                       const PromptTemplate& t, const TrainConfig& cfg, const ProtocolSpec& spec,
                       const TaskContext& ctx) {
  std::vector<std::size_t> test_ids(test.size());
  std::iota(test_ids.begin(), test_ids.end(), std::size_t{0});
  const std::string metric(metric_name(ctx.metric));
  if (spec.n_train == 0) {
    const double score = evaluate(pretrained, test, test_ids, t, ctx, cfg.max_gen_len).corpus;
    return aggregate(metric, t.id, {score});
  }
  cfg.validate();
  if (spec.n_splits < 1) fail(ErrorCode::kInvalidArgument, "n_splits must be >= 1");
  const auto splits = sample_splits(pool.size(), spec.n_splits, spec.n_train, spec.n_dev, spec.master_seed);
  std::vector<double> scores(splits.size());
  std::vector<std::size_t> epochs(splits.size());
  std::vector<std::vector<double>> traces(splits.size());
  std::vector<std::exception_ptr> errors(splits.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < splits.size(); i = next++) {
      try {
        TrainConfig c = cfg;
        c.seed = cfg.seed + splits[i].seed;
        const auto ft = finetune(pretrained, pool, splits[i].train_ids, splits[i].dev_ids, t, c, ctx);
        scores[i] = evaluate(ft.best, test, test_ids, t, ctx, cfg.max_gen_len).corpus;
        epochs[i] = ft.best_epoch;
        traces[i] = ft.dev_trace;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(spec.threads, 1, splits.size());
  std::vector<std::thread> threads;
  for (std::size_t k = 1; k < n_threads; ++k) threads.emplace_back(worker);
  worker();
  for (auto& th : threads) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  auto r = aggregate(metric, t.id, std::move(scores));
  r.best_epochs = std::move(epochs);
  r.dev_traces = std::move(traces);
  return r;
}

nlohmann::json EpisodeResult::to_json() const { return {{"accuracies", accuracies}, {"mean", mean}}; }

void validate_episode(const Episode& episode, std::size_t n_way) {
  const std::set<std::string> classes(episode.classes.begin(), episode.classes.end());
  if (classes.size() != episode.classes.size()) fail(ErrorCode::kMalformedEpisode, "episode repeats a class");
  if (episode.classes.size() != n_way) {
    fail(ErrorCode::kMalformedEpisode, "episode has " + std::to_string(episode.classes.size()) + " classes, expected " +
                                           std::to_string(n_way));
  }
  if (episode.support.empty() || episode.queries.empty()) {
    fail(ErrorCode::kMalformedEpisode, "episode needs support and query examples");
  }
  std::map<std::string, std::size_t> shots;
  auto label_of = [&](const VLExample& ex) -> const std::string& {
    const auto* p = std::get_if<ClassifyPayload>(&ex.payload);
    if (!p) fail(ErrorCode::kMalformedEpisode, "episode examples must be classification examples");
    if (!classes.count(p->label)) fail(ErrorCode::kMalformedEpisode, "label '" + p->label + "' is not an episode class");
    return p->label;
  };
  for (const auto& ex : episode.support) ++shots[label_of(ex)];
  for (const auto& ex : episode.queries) label_of(ex);
  const std::size_t k = episode.support.size() / n_way;
  for (const auto& c : episode.classes) {
    if (shots[c] != k || k * n_way != episode.support.size()) {
      fail(ErrorCode::kMalformedEpisode, "support set is not k examples per class");
    }
  }
}

EpisodeResult episode_protocol(const Model& pretrained, std::span<const Episode> episodes, const PromptTemplate& t,
                               const TrainConfig& cfg, const TaskContext& ctx, std::size_t n_way) {
  for (const auto& ep : episodes) validate_episode(ep, n_way);
  TaskContext c = ctx;
  c.metric = MetricId::kClassifyAccuracy;
  EpisodeResult r;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    std::vector<std::size_t> support_ids(ep.support.size());
    std::iota(support_ids.begin(), support_ids.end(), std::size_t{0});
    std::vector<std::size_t> query_ids(ep.queries.size());
    std::iota(query_ids.begin(), query_ids.end(), std::size_t{0});
    TrainConfig tc = cfg;
    tc.seed = cfg.seed + e;
    const auto ft = finetune(pretrained, ep.support, support_ids, {}, t, tc, c);
    r.accuracies.push_back(evaluate(ft.best, ep.queries, query_ids, t, c, cfg.max_gen_len).corpus);
  }
  if (!r.accuracies.empty()) {
    r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / static_cast<double>(r.accuracies.size());
  }
  return r;
}

}  // namespace fewvlm
