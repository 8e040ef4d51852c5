// Command-line driver: synth, pretrain, finetune, zeroshot, eval, report.
//
// Every command prints one JSON object on stdout and logs to stderr. The
// effective configuration (flags overlaid by --config) is echoed in the
// output together with its hash, so a result file is enough to rerun it.
#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fewvlm/data.hpp"
#include "fewvlm/error.hpp"
#include "fewvlm/eval.hpp"
#include "fewvlm/fewshot.hpp"
#include "fewvlm/model.hpp"
#include "fewvlm/objectives.hpp"
#include "fewvlm/prompts.hpp"
#include "fewvlm/synthdata.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace fewvlm;

namespace {

std::uint64_t default_seed() {
  const char* env = std::getenv("FEWVLM_SEED");
  if (!env || !*env) return 0;
  try {
    return std::stoull(env);
  } catch (const std::exception&) {
    fail(ErrorCode::kInvalidArgument, std::string("FEWVLM_SEED is not an unsigned integer: ") + env);
  }
}

std::string config_hash(const json& cfg) {
  // FNV-1a over the canonical dump; object keys are already sorted.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : cfg.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

void log(const std::string& msg) { std::cerr << "[fewvlm] " << msg << "\n"; }

// Flags of one subcommand, readable afterwards as a JSON object whose keys
// match the flag names. A --config file is laid over the flags.
class OptionSet {
 public:
  explicit OptionSet(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON config file; its keys override flags");
  }

  template <typename T>
  void add(const std::string& key, T value, const std::string& help, bool required = false) {
    auto storage = std::make_shared<T>(std::move(value));
    auto* opt = app_->add_option("--" + key, *storage, help);
    if (required) opt->required();
    else opt->capture_default_str();
    getters_[key] = [storage] { return json(*storage); };
    keep_.push_back(storage);
  }

  json resolve() const {
    json cfg = json::object();
    for (const auto& [key, get] : getters_) cfg[key] = get();
    if (config_path_.empty()) return cfg;
    std::ifstream in(config_path_);
    if (!in) fail(ErrorCode::kIoError, "cannot open config " + config_path_);
    json file;
    try {
      in >> file;
    } catch (const json::exception& e) {
      fail(ErrorCode::kParseError, "config " + config_path_ + ": " + e.what());
    }
    if (!file.is_object()) fail(ErrorCode::kParseError, "config " + config_path_ + " is not a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (!getters_.count(key)) fail(ErrorCode::kInvalidArgument, "config key '" + key + "' is not a flag of this command");
      if (app_->count("--" + key) > 0 && cfg[key] != value) {
        log("warning: --" + key + "=" + cfg[key].dump() + " overridden by config value " + value.dump());
      }
      cfg[key] = value;
    }
    return cfg;
  }

 private:
  CLI::App* app_;
  std::string config_path_;
  std::map<std::string, std::function<json()>> getters_;
  std::vector<std::shared_ptr<void>> keep_;
};

MetricId metric_for(TaskKind task) {
  switch (task) {
    case TaskKind::kVqa: return MetricId::kVqaAccuracy;
    case TaskKind::kCaption: return MetricId::kCider;
    case TaskKind::kClassify: return MetricId::kClassifyAccuracy;
  }
  return MetricId::kVqaAccuracy;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Catalog ids plus "noisy-token-sampled", which draws fresh tokens from the vocabulary.
PromptTemplate resolve_template(const std::string& id, const Vocab& vocab, std::uint64_t seed) {
  if (id == "noisy-token-sampled") {
    Rng rng(seed);
    return noisy_token_prompt(vocab, rng, id);
  }
  return get_template(id);
}

// An empty id picks the task's usual prompt.
std::string template_id(const std::string& id, TaskKind task) {
  if (!id.empty()) return id;
  switch (task) {
    case TaskKind::kVqa: return "P3";
    case TaskKind::kCaption: return "Q1";
    case TaskKind::kClassify: return "classify";
  }
  return id;
}

struct LoadedModel {
  Model model;
  Vocab vocab;
};

LoadedModel load_checkpoint(const fs::path& path) {
  json extra;
  auto model = Model::load(path, &extra);
  if (!extra.contains("vocab")) fail(ErrorCode::kMissingField, path.string() + " carries no vocabulary");
  auto vocab = Vocab::from_tokens(extra["vocab"].get<std::vector<std::string>>());
  if (vocab.size() != model.config().vocab_size) {
    fail(ErrorCode::kShapeMismatch, "checkpoint vocabulary does not match the model's output layer");
  }
  return {std::move(model), std::move(vocab)};
}

TaskContext make_context(const Vocab& vocab, FeatureStore& store, MetricId metric) {
  TaskContext ctx;
  ctx.vocab = &vocab;
  ctx.features = [&store](const std::string& id) -> const RegionFeatures& { return *store.get(id); };
  ctx.metric = metric;
  return ctx;
}

json episodes_to_json(std::span<const Episode> episodes) {
  json out = json::array();
  for (const auto& ep : episodes) {
    json e;
    e["classes"] = ep.classes;
    e["support"] = json::array();
    e["queries"] = json::array();
    for (const auto& x : ep.support) e["support"].push_back(json::parse(example_to_json_line(x)));
    for (const auto& x : ep.queries) e["queries"].push_back(json::parse(example_to_json_line(x)));
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Episode> read_episodes(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open episodes file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorCode::kParseError, path.string() + ": " + e.what());
  }
  auto lines = [](const json& arr) {
    std::string s;
    for (const auto& x : arr) s += x.dump() + "\n";
    return parse_dataset(s, TaskKind::kClassify);
  };
  std::vector<Episode> out;
  for (const auto& e : j) {
    if (!e.contains("classes") || !e.contains("support") || !e.contains("queries")) {
      fail(ErrorCode::kMissingField, path.string() + ": episode needs classes, support and queries");
    }
    out.push_back({e["classes"].get<std::vector<std::string>>(), lines(e["support"]), lines(e["queries"])});
  }
  return out;
}

// ---------------------------------------------------------------- commands

json cmd_synth(const json& cfg) {
  synth::SynthConfig sc;
  sc.seed = cfg["seed"];
  sc.n_pretrain_scenes = cfg["pretrain_scenes"];
  sc.n_task_scenes = cfg["task_scenes"];
  sc.min_objects = cfg["min_objects"];
  sc.max_objects = cfg["max_objects"];
  sc.caption_prompt_rate = cfg["caption_prompt_rate"];
  sc.world.feature_dim = cfg["feature_dim"];
  sc.world.n_regions = cfg["regions"];
  sc.world.noise = cfg["noise"];
  auto world = synth::generate_world(sc);
  const fs::path out = cfg["out"].get<std::string>();
  fs::create_directories(out);

  json episode_files = json::object();
  const std::size_t n_episodes = cfg["episodes"];
  if (n_episodes > 0) {
    for (const auto& k : split_list(cfg["shots"])) {
      const std::size_t shots = std::stoul(k);
      const auto eps = synth::make_episodes(world, n_episodes, cfg["way"], shots, cfg["queries_per_class"],
                                            sc.seed * 1000 + shots);
      const auto path = out / ("episodes_" + k + "shot.json");
      std::ofstream f(path);
      f << episodes_to_json(eps).dump() << "\n";
      if (!f) fail(ErrorCode::kIoError, "cannot write " + path.string());
      episode_files[k] = path.string();
    }
  }
  const auto vocab = Vocab::build(world.all_texts(), cfg["sentinels"]);
  synth::write_world(world, vocab, out);
  log("wrote " + std::to_string(world.features.size()) + " images to " + out.string());
  return {{"dir", out.string()},
          {"images", world.features.size()},
          {"pretrain_pairs", world.pretrain.size()},
          {"vqa", world.vqa.size()},
          {"caption", world.caption.size()},
          {"classify", world.classify.size()},
          {"vocab_size", vocab.size()},
          {"episodes", episode_files}};
}

json cmd_pretrain(const json& cfg, const std::string& hash) {
  const fs::path data = cfg["data"].get<std::string>();
  const auto vocab = Vocab::load(data / "vocab.txt");
  const auto corpus = tokenize_corpus(read_pretrain_corpus(data / "pretrain.jsonl"), vocab);
  FeatureStore store(data / "features");
  if (corpus.empty()) fail(ErrorCode::kEmptyCorpus, "no pre-training pairs in " + data.string());
  const auto& first = *store.get(corpus.front().image_id);

  auto mc = ModelConfig::desk(vocab);
  mc.hidden_dim = cfg["hidden"];
  mc.ff_dim = cfg["ff"];
  mc.n_heads = cfg["heads"];
  mc.head_dim = mc.hidden_dim / std::max<std::size_t>(mc.n_heads, 1);
  mc.n_enc_layers = cfg["enc_layers"];
  mc.n_dec_layers = cfg["dec_layers"];
  mc.dropout = cfg["dropout"];
  mc.n_regions = first.n_regions;
  mc.feature_dim = first.dim;
  mc.validate();
  const std::uint64_t seed = cfg["seed"];
  Model model(mc, seed);

  auto tc = TrainConfig::pretrain();
  tc.epochs = cfg["epochs"];
  tc.lr = cfg["lr"];
  tc.batch_size = cfg["batch_size"];
  tc.warmup = cfg["warmup"];
  tc.seed = seed;
  const std::string objective = cfg["objective"];
  const double mix = objective_mix(objective);
  log("pre-training " + std::to_string(model.parameter_count()) + " parameters on " + std::to_string(corpus.size()) +
      " pairs (" + objective + ")");
  const auto t0 = std::chrono::steady_clock::now();
  const auto trace = pretrain(model, corpus, vocab, [&store](const std::string& id) -> const RegionFeatures& {
    return *store.get(id);
  }, mix, tc);
  log("done in " + std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");

  const fs::path out = cfg["out"].get<std::string>();
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  model.save(out, {{"vocab", vocab.tokens()}, {"objective", objective}, {"config_hash", hash}});
  return {{"checkpoint", out.string()},
          {"parameters", model.parameter_count()},
          {"steps", trace.steps},
          {"epoch_loss", trace.epoch_loss},
          {"model", mc.to_json()}};
}

struct TaskData {
  TaskKind task;
  std::vector<VLExample> examples;
};

TaskData load_task(const json& cfg) {
  const TaskKind task = parse_task(cfg["task"].get<std::string>());
  std::string path = cfg["dataset"];
  if (path.empty()) path = (fs::path(cfg["data"].get<std::string>()) / (std::string(task_name(task)) + ".jsonl")).string();
  return {task, read_dataset(path, task)};
}

MetricId resolve_metric(const json& cfg, TaskKind task) {
  const std::string m = cfg["metric"];
  return m.empty() ? metric_for(task) : parse_metric(m);
}

TrainConfig train_config(const json& cfg) {
  auto tc = TrainConfig::few_shot();
  tc.epochs = cfg["epochs"];
  tc.lr = cfg["lr"];
  tc.warmup = cfg["warmup"];
  tc.batch_size = cfg["batch_size"];
  tc.seed = cfg["seed"];
  tc.eval_stride = cfg["eval_stride"];
  tc.max_gen_len = cfg["max_len"];
  tc.validate();
  return tc;
}

json cmd_finetune(const json& cfg, std::size_t threads) {
  auto [model, vocab] = load_checkpoint(cfg["checkpoint"].get<std::string>());
  FeatureStore store(fs::path(cfg["data"].get<std::string>()) / "features");
  const auto tc = train_config(cfg);
  const std::string episodes = cfg["episodes"];
  const TaskKind task = episodes.empty() ? parse_task(cfg["task"].get<std::string>()) : TaskKind::kClassify;
  const auto t = resolve_template(template_id(cfg["template"], task), vocab, tc.seed);

  if (!episodes.empty()) {
    const auto eps = read_episodes(episodes);
    const auto ctx = make_context(vocab, store, MetricId::kClassifyAccuracy);
    log("running " + std::to_string(eps.size()) + " episodes");
    return episode_protocol(model, eps, t, tc, ctx, cfg["way"]).to_json();
  }

  auto data = load_task(cfg);
  const std::size_t test_size = cfg["test_size"];
  if (test_size == 0 || test_size >= data.examples.size()) {
    fail(ErrorCode::kDatasetTooSmall, "test_size must leave a non-empty training pool");
  }
  // The tail of the dataset is the test set; splits are drawn from the rest.
  const auto cut = data.examples.end() - static_cast<std::ptrdiff_t>(test_size);
  std::vector<VLExample> pool(data.examples.begin(), cut), test(cut, data.examples.end());
  ProtocolSpec spec;
  spec.n_splits = cfg["splits"];
  spec.n_train = cfg["n_train"];
  spec.n_dev = cfg["n_dev"];
  spec.master_seed = cfg["seed"];
  spec.threads = threads;
  const auto ctx = make_context(vocab, store, resolve_metric(cfg, data.task));
  log("fine-tuning on " + std::to_string(spec.n_splits) + " splits of " + std::to_string(spec.n_train) + "/" +
      std::to_string(spec.n_dev));
  return run_protocol(model, pool, test, t, tc, spec, ctx).to_json();
}

json cmd_zeroshot(const json& cfg) {
  auto [model, vocab] = load_checkpoint(cfg["checkpoint"].get<std::string>());
  FeatureStore store(fs::path(cfg["data"].get<std::string>()) / "features");
  auto data = load_task(cfg);
  std::size_t n = data.examples.size();
  if (cfg["limit"].get<std::size_t>() > 0) n = std::min<std::size_t>(n, cfg["limit"]);
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  const auto ctx = make_context(vocab, store, resolve_metric(cfg, data.task));
  const std::string pred_path = cfg["predictions_out"];

  json out = json::object();
  for (const auto& id : split_list(cfg["templates"])) {
    const auto t = resolve_template(id, vocab, cfg["seed"]);
    const auto preds = predict(model, data.examples, ids, t, ctx, cfg["max_len"]);
    const auto report = score_predictions(data.examples, ids, preds, ctx.metric);
    out[id] = {{"metric", report.metric}, {"score", report.corpus}, {"n_examples", report.n_examples}};
    log(id + ": " + std::to_string(report.corpus));
    if (!pred_path.empty()) {
      std::vector<Prediction> rows;
      for (std::size_t i = 0; i < n; ++i) rows.push_back({data.examples[i].image_id, preds[i]});
      write_predictions(rows, fs::path(pred_path).replace_extension(id + ".jsonl"));
    }
  }
  return out;
}

json cmd_eval(const json& cfg) {
  const auto preds = read_predictions(cfg["predictions"].get<std::string>());
  const TaskKind task = parse_task(cfg["task"].get<std::string>());
  const auto refs = read_dataset(cfg["references"].get<std::string>(), task);
  if (preds.size() != refs.size()) {
    fail(ErrorCode::kLengthMismatch, std::to_string(preds.size()) + " predictions for " + std::to_string(refs.size()) +
                                         " references");
  }
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].image_id != refs[i].image_id) {
      fail(ErrorCode::kInvalidId, "prediction " + std::to_string(i) + " is for " + preds[i].image_id + ", reference for " +
                                      refs[i].image_id);
    }
    texts.push_back(preds[i].prediction);
  }
  std::vector<std::size_t> ids(refs.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return score_predictions(refs, ids, texts, resolve_metric(cfg, task)).to_json();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json cmd_report(const json& cfg) {
  const fs::path dir = cfg["results"].get<std::string>();
  if (!fs::is_directory(dir)) fail(ErrorCode::kIoError, dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  struct Row {
    std::string file, command, setting, metric;
    double score;
    std::string spread;
  };
  std::vector<Row> rows;
  for (const auto& f : files) {
    std::ifstream in(f);
    json j;
    try {
      in >> j;
    } catch (const json::exception&) {
      log("skipping unreadable " + f.string());
      continue;
    }
    if (!j.is_object() || !j.contains("command") || !j.contains("result")) continue;
    const std::string cmd = j["command"];
    const auto& r = j["result"];
    const auto name = f.filename().string();
    if (cmd == "finetune" && r.contains("mean") && r.contains("split_scores")) {
      rows.push_back({name, cmd, r.value("template", ""), r.value("metric", ""), r["mean"].get<double>(),
                      std::to_string(r.value("stddev", 0.0))});
    } else if (cmd == "finetune" && r.contains("accuracies")) {
      std::string tid = j["config"].value("template", "");
      rows.push_back({name, "episodes", tid.empty() ? "classify" : tid, "classify_accuracy",
                      r["mean"].get<double>(), ""});
    } else if (cmd == "zeroshot") {
      for (const auto& [tid, s] : r.items()) {
        rows.push_back({name, cmd, tid, s.value("metric", ""), s.value("score", 0.0), ""});
      }
    } else if (cmd == "eval") {
      rows.push_back({name, cmd, j["config"].value("task", ""), r.value("metric", ""), r.value("corpus", 0.0), ""});
    } else if (cmd == "pretrain" && r.contains("epoch_loss") && !r["epoch_loss"].empty()) {
      rows.push_back({name, cmd, j["config"].value("objective", ""), "final_loss", r["epoch_loss"].back().get<double>(),
                      ""});
    }
  }

  std::ostringstream md, csv;
  md << "| file | command | setting | metric | score | stddev |\n|---|---|---|---|---|---|\n";
  csv << "file,command,setting,metric,score,stddev\n";
  for (const auto& r : rows) {
    std::ostringstream score;
    score.precision(4);
    score << std::fixed << r.score;
    md << "| " << r.file << " | " << r.command << " | " << r.setting << " | " << r.metric << " | " << score.str()
       << " | " << r.spread << " |\n";
    csv << csv_field(r.file) << "," << r.command << "," << csv_field(r.setting) << "," << r.metric << ","
        << score.str() << "," << r.spread << "\n";
  }
  const bool write = cfg["write"];
  if (write) {
    std::ofstream(dir / "report.md") << md.str();
    std::ofstream(dir / "report.csv") << csv.str();
  }
  return {{"rows", rows.size()}, {"markdown", md.str()}, {"csv", csv.str()}};
}

void print_error(const std::string& code, const std::string& message) {
  std::cout << json{{"error", {{"code", code}, {"message", message}}}}.dump() << std::endl;
  std::cerr << "[fewvlm] error: " << message << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fewvlm: prompt-based few-shot vision-language experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = 1;
  app.add_option("--threads", threads, "worker threads for split-parallel commands")->capture_default_str();

  std::uint64_t seed = 0;
  try {
    seed = default_seed();
  } catch (const Error& e) {
    print_error(std::string(error_code_name(e.code())), e.what());
    return 1;
  }

  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic world");
  OptionSet synth_opts(synth_cmd);
  synth_opts.add<std::string>("out", "", "output directory", true);
  synth_opts.add<std::uint64_t>("seed", seed, "world seed");
  synth_opts.add<std::size_t>("pretrain_scenes", 1000, "scenes for the pre-training corpus (two pairs each)");
  synth_opts.add<std::size_t>("task_scenes", 400, "scenes for the downstream tasks");
  synth_opts.add<std::size_t>("min_objects", 1, "fewest objects per scene");
  synth_opts.add<std::size_t>("max_objects", 4, "most objects per scene");
  synth_opts.add<double>("caption_prompt_rate", 0.25, "fraction of captions opened with a picture phrase");
  synth_opts.add<std::size_t>("feature_dim", 32, "region feature width");
  synth_opts.add<std::size_t>("regions", 8, "region slots per image");
  synth_opts.add<double>("noise", 0.05, "feature noise sigma");
  synth_opts.add<std::size_t>("sentinels", 16, "sentinel tokens in the vocabulary");
  synth_opts.add<std::size_t>("episodes", 0, "classification episodes per shot count");
  synth_opts.add<std::string>("shots", "1,5", "comma-separated shot counts for episodes");
  synth_opts.add<std::size_t>("way", 5, "classes per episode");
  synth_opts.add<std::size_t>("queries_per_class", 2, "query images per class");

  auto* pre_cmd = app.add_subcommand("pretrain", "pre-train a model on a synthetic corpus");
  OptionSet pre_opts(pre_cmd);
  pre_opts.add<std::string>("data", "", "directory written by synth", true);
  pre_opts.add<std::string>("out", "", "checkpoint path", true);
  pre_opts.add<std::string>("objective", "both", "masked | prefix | both");
  pre_opts.add<std::size_t>("epochs", 10, "passes over the corpus");
  pre_opts.add<double>("lr", 1e-3, "peak learning rate");
  pre_opts.add<std::size_t>("batch_size", 32, "pairs per step");
  pre_opts.add<double>("warmup", 0.05, "warmup fraction");
  pre_opts.add<std::uint64_t>("seed", seed, "initialisation and data order seed");
  pre_opts.add<std::size_t>("hidden", 128, "model width");
  pre_opts.add<std::size_t>("ff", 512, "feed-forward width");
  pre_opts.add<std::size_t>("heads", 8, "attention heads");
  pre_opts.add<std::size_t>("enc_layers", 2, "encoder layers");
  pre_opts.add<std::size_t>("dec_layers", 2, "decoder layers");
  pre_opts.add<double>("dropout", 0.1, "dropout rate");

  auto add_task_opts = [&](OptionSet& o) {
    o.add<std::string>("checkpoint", "", "pre-trained checkpoint", true);
    o.add<std::string>("data", "", "directory written by synth (features live under it)", true);
    o.add<std::string>("task", "vqa", "vqa | caption | classify");
    o.add<std::string>("dataset", "", "JSONL dataset; defaults to <data>/<task>.jsonl");
    o.add<std::string>("metric", "", "metric id; defaults to the task's metric");
    o.add<std::size_t>("max_len", 24, "generation length cap");
    o.add<std::uint64_t>("seed", seed, "master seed");
  };

  auto* ft_cmd = app.add_subcommand("finetune", "few-shot fine-tuning over sampled splits or episodes");
  OptionSet ft_opts(ft_cmd);
  add_task_opts(ft_opts);
  ft_opts.add<std::string>("template", "", "prompt template id; defaults to P3, Q1 or classify by task");
  ft_opts.add<std::size_t>("epochs", 200, "epochs per split");
  ft_opts.add<double>("lr", 5e-5, "peak learning rate");
  ft_opts.add<double>("warmup", 0.05, "warmup fraction");
  ft_opts.add<std::size_t>("batch_size", 0, "0 picks min(n_train, 16)");
  ft_opts.add<std::size_t>("eval_stride", 1, "epochs between dev evaluations");
  ft_opts.add<std::size_t>("splits", 5, "number of train/dev splits");
  ft_opts.add<std::size_t>("n_train", 16, "training examples per split");
  ft_opts.add<std::size_t>("n_dev", 16, "dev examples per split");
  ft_opts.add<std::size_t>("test_size", 200, "examples held out from the end of the dataset");
  ft_opts.add<std::string>("episodes", "", "episodes file; switches to the episode protocol");
  ft_opts.add<std::size_t>("way", 5, "classes per episode");

  auto* zs_cmd = app.add_subcommand("zeroshot", "score a checkpoint without any training");
  OptionSet zs_opts(zs_cmd);
  add_task_opts(zs_opts);
  zs_opts.add<std::string>("templates", "P3,none", "comma-separated template ids");
  zs_opts.add<std::size_t>("limit", 0, "score only the first N examples (0 = all)");
  zs_opts.add<std::string>("predictions_out", "", "write predictions to <path>.<template>.jsonl");

  auto* eval_cmd = app.add_subcommand("eval", "score a predictions file against references");
  OptionSet eval_opts(eval_cmd);
  eval_opts.add<std::string>("predictions", "", "predictions JSONL", true);
  eval_opts.add<std::string>("references", "", "reference dataset JSONL", true);
  eval_opts.add<std::string>("task", "vqa", "vqa | caption | classify");
  eval_opts.add<std::string>("metric", "", "metric id; defaults to the task's metric");

  auto* rep_cmd = app.add_subcommand("report", "tabulate result JSON files");
  OptionSet rep_opts(rep_cmd);
  rep_opts.add<std::string>("results", "", "directory of command outputs", true);
  rep_opts.add<bool>("write", true, "also write report.md and report.csv there");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("UsageError", e.what());
    return 2;
  }

  try {
    std::string name;
    json cfg, result;
    if (synth_cmd->parsed()) {
      name = "synth";
      cfg = synth_opts.resolve();
      result = cmd_synth(cfg);
    } else if (pre_cmd->parsed()) {
      name = "pretrain";
      cfg = pre_opts.resolve();
      result = cmd_pretrain(cfg, config_hash(cfg));
    } else if (ft_cmd->parsed()) {
      name = "finetune";
      cfg = ft_opts.resolve();
      result = cmd_finetune(cfg, threads);
    } else if (zs_cmd->parsed()) {
      name = "zeroshot";
      cfg = zs_opts.resolve();
      result = cmd_zeroshot(cfg);
    } else if (eval_cmd->parsed()) {
      name = "eval";
      cfg = eval_opts.resolve();
      result = cmd_eval(cfg);
    } else {
      name = "report";
      cfg = rep_opts.resolve();
      result = cmd_report(cfg);
    }
    std::cout << json{{"command", name}, {"config", cfg}, {"config_hash", config_hash(cfg)}, {"result", result}}.dump(2)
              << std::endl;
  } catch (const Error& e) {
    print_error(std::string(error_code_name(e.code())), e.what());
    return 1;
  } catch (const json::exception& e) {
    print_error("InvalidArgument", std::string("config value has the wrong type: ") + e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("Internal", e.what());
    return 1;
  }
  return 0;
}
