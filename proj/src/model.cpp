#include "fewvlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fewvlm/checkpoint.hpp"
#include "fewvlm/error.hpp"

namespace fewvlm {

using nlohmann::json;
using nn::Graph;
using nn::Tensor;

// --- config ----------------------------------------------------------------

ModelConfig ModelConfig::desk(const Vocab& vocab) {
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.pad_id = vocab.pad();
  c.bos_id = vocab.bos();
  c.eos_id = vocab.eos();
  return c;
}

ModelConfig ModelConfig::base(const Vocab& vocab) {
  ModelConfig c = desk(vocab);
  c.n_enc_layers = c.n_dec_layers = 12;
  c.hidden_dim = 768;
  c.ff_dim = 3072;
  c.n_heads = 12;
  c.head_dim = 64;
  c.max_text_len = 512;
  return c;
}

ModelConfig ModelConfig::large(const Vocab& vocab) {
  ModelConfig c = desk(vocab);
  c.n_enc_layers = c.n_dec_layers = 24;
  c.hidden_dim = 1024;
  c.ff_dim = 4096;
  c.n_heads = 16;
  c.head_dim = 64;
  c.max_text_len = 512;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) fail(ErrorCode::kInvalidArgument, std::string("model config: ") + name + " must be >= 1");
  };
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(hidden_dim, "hidden_dim");
  positive(ff_dim, "ff_dim");
  positive(n_heads, "n_heads");
  positive(head_dim, "head_dim");
  positive(vocab_size, "vocab_size");
  positive(max_text_len, "max_text_len");
  positive(n_regions, "n_regions");
  positive(feature_dim, "feature_dim");
  if (hidden_dim != n_heads * head_dim) {
    fail(ErrorCode::kInvalidArgument, "model config: hidden_dim must equal n_heads * head_dim");
  }
  if (dropout < 0.0 || dropout >= 1.0) fail(ErrorCode::kInvalidArgument, "model config: dropout must lie in [0, 1)");
  for (TokenId id : {pad_id, bos_id, eos_id}) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      fail(ErrorCode::kInvalidArgument, "model config: special token ids must lie inside the vocabulary");
    }
  }
}

json ModelConfig::to_json() const {
  return {{"n_enc_layers", n_enc_layers}, {"n_dec_layers", n_dec_layers}, {"hidden_dim", hidden_dim},
          {"ff_dim", ff_dim},             {"n_heads", n_heads},           {"head_dim", head_dim},
          {"vocab_size", vocab_size},     {"max_text_len", max_text_len}, {"n_regions", n_regions},
          {"feature_dim", feature_dim},   {"dropout", dropout},           {"pad_id", pad_id},
          {"bos_id", bos_id},             {"eos_id", eos_id}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.n_enc_layers = j.at("n_enc_layers");
  c.n_dec_layers = j.at("n_dec_layers");
  c.hidden_dim = j.at("hidden_dim");
  c.ff_dim = j.at("ff_dim");
  c.n_heads = j.at("n_heads");
  c.head_dim = j.at("head_dim");
  c.vocab_size = j.at("vocab_size");
  c.max_text_len = j.at("max_text_len");
  c.n_regions = j.at("n_regions");
  c.feature_dim = j.at("feature_dim");
  c.dropout = j.at("dropout");
  c.pad_id = j.at("pad_id");
  c.bos_id = j.at("bos_id");
  c.eos_id = j.at("eos_id");
  c.validate();
  return c;
}

// --- layers ----------------------------------------------------------------

namespace nn {

template <typename T>
Tensor<T> multi_head_attention(Graph<T>& g, const Tensor<T>& query_in, const Tensor<T>& key_in,
                               const Tensor<T>& value_in, const AttentionParams<T>& p,
                               const AttentionMask& mask, std::size_t n_heads) {
  auto q = linear(g, query_in, p.q.w, p.q.b);
  auto k = linear(g, key_in, p.k.w, p.k.b);
  auto v = linear(g, value_in, p.v.w, p.v.b);
  auto ctx = attention(g, q, k, v, mask, n_heads);
  return linear(g, ctx, p.o.w, p.o.b);
}

template Tensor<float> multi_head_attention(Graph<float>&, const Tensor<float>&, const Tensor<float>&,
                                            const Tensor<float>&, const AttentionParams<float>&,
                                            const AttentionMask&, std::size_t);
template Tensor<double> multi_head_attention(Graph<double>&, const Tensor<double>&, const Tensor<double>&,
                                             const Tensor<double>&, const AttentionParams<double>&,
                                             const AttentionMask&, std::size_t);

}  // namespace nn

std::vector<std::uint8_t> EncoderBatch::key_valid() const {
  std::vector<std::uint8_t> out;
  out.reserve(batch * (text_len + region_len));
  for (std::size_t b = 0; b < batch; ++b) {
    out.insert(out.end(), text_valid.begin() + static_cast<std::ptrdiff_t>(b * text_len),
               text_valid.begin() + static_cast<std::ptrdiff_t>((b + 1) * text_len));
    out.insert(out.end(), region_valid.begin() + static_cast<std::ptrdiff_t>(b * region_len),
               region_valid.begin() + static_cast<std::ptrdiff_t>((b + 1) * region_len));
  }
  return out;
}

// --- model -----------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> normal_tensor(nn::Shape shape, double stddev, Rng& rng) {
  std::vector<T> values(nn::shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
Tensor<T> const_tensor(nn::Shape shape, T value) {
  return Tensor<T>::from(shape, std::vector<T>(nn::shape_numel(shape), value), true);
}

template <typename T>
nn::LinearParams<T> make_linear(std::size_t in, std::size_t out, double stddev, Rng& rng, bool with_bias = true) {
  nn::LinearParams<T> p;
  p.w = normal_tensor<T>({in, out}, stddev, rng);
  if (with_bias) p.b = const_tensor<T>({out}, T(0));
  return p;
}

template <typename T>
nn::LayerNormParams<T> make_ln(std::size_t d) {
  return {const_tensor<T>({d}, T(1)), const_tensor<T>({d}, T(0))};
}

template <typename T>
nn::AttentionParams<T> make_attention(std::size_t d, double stddev, double out_stddev, Rng& rng) {
  return {make_linear<T>(d, d, stddev, rng), make_linear<T>(d, d, stddev, rng), make_linear<T>(d, d, stddev, rng),
          make_linear<T>(d, d, out_stddev, rng)};
}

template <typename T>
Tensor<T> constant_input(nn::Shape shape, std::span<const float> values) {
  return Tensor<T>::from(std::move(shape), std::vector<T>(values.begin(), values.end()), false);
}

constexpr double kInitStd = 0.02;

}  // namespace

template <typename T>
FewVLMModel<T>::FewVLMModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.hidden_dim;
  const double out_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config_.n_enc_layers + config_.n_dec_layers));
  tok_emb_ = normal_tensor<T>({config_.vocab_size, d}, kInitStd, rng);
  enc_pos_ = normal_tensor<T>({config_.max_text_len, d}, kInitStd / 2, rng);
  dec_pos_ = normal_tensor<T>({config_.max_text_len, d}, kInitStd / 2, rng);
  region_feat_ = make_linear<T>(config_.feature_dim, d, kInitStd, rng);
  region_box_ = make_linear<T>(4, d, kInitStd, rng, false);
  region_ln_ = make_ln<T>(d);
  for (std::size_t i = 0; i < config_.n_enc_layers; ++i) {
    EncoderLayer layer;
    layer.ln_attn = make_ln<T>(d);
    layer.attn = make_attention<T>(d, kInitStd, out_std, rng);
    layer.ln_ff = make_ln<T>(d);
    layer.ff_in = make_linear<T>(d, config_.ff_dim, kInitStd, rng);
    layer.ff_out = make_linear<T>(config_.ff_dim, d, out_std, rng);
    enc_layers_.push_back(std::move(layer));
  }
  for (std::size_t i = 0; i < config_.n_dec_layers; ++i) {
    DecoderLayer layer;
    layer.ln_self = make_ln<T>(d);
    layer.self_attn = make_attention<T>(d, kInitStd, out_std, rng);
    layer.ln_cross = make_ln<T>(d);
    layer.cross_attn = make_attention<T>(d, kInitStd, out_std, rng);
    layer.ln_ff = make_ln<T>(d);
    layer.ff_in = make_linear<T>(d, config_.ff_dim, kInitStd, rng);
    layer.ff_out = make_linear<T>(config_.ff_dim, d, out_std, rng);
    dec_layers_.push_back(std::move(layer));
  }
  enc_final_ln_ = make_ln<T>(d);
  dec_final_ln_ = make_ln<T>(d);
}

template <typename T>
void FewVLMModel<T>::for_each_parameter(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  auto lin = [&](const std::string& name, nn::LinearParams<T>& p) {
    fn(name + ".w", p.w);
    if (p.b.defined()) fn(name + ".b", p.b);
  };
  auto ln = [&](const std::string& name, nn::LayerNormParams<T>& p) {
    fn(name + ".gain", p.gain);
    fn(name + ".bias", p.bias);
  };
  auto attn = [&](const std::string& name, nn::AttentionParams<T>& p) {
    lin(name + ".q", p.q);
    lin(name + ".k", p.k);
    lin(name + ".v", p.v);
    lin(name + ".o", p.o);
  };
  fn("embed.tokens", tok_emb_);
  fn("embed.enc_pos", enc_pos_);
  fn("embed.dec_pos", dec_pos_);
  lin("region.feat", region_feat_);
  lin("region.box", region_box_);
  ln("region.ln", region_ln_);
  for (std::size_t i = 0; i < enc_layers_.size(); ++i) {
    const std::string p = "enc." + std::to_string(i);
    auto& l = enc_layers_[i];
    ln(p + ".ln_attn", l.ln_attn);
    attn(p + ".attn", l.attn);
    ln(p + ".ln_ff", l.ln_ff);
    lin(p + ".ff_in", l.ff_in);
    lin(p + ".ff_out", l.ff_out);
  }
  ln("enc.final_ln", enc_final_ln_);
  for (std::size_t i = 0; i < dec_layers_.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    auto& l = dec_layers_[i];
    ln(p + ".ln_self", l.ln_self);
    attn(p + ".self_attn", l.self_attn);
    ln(p + ".ln_cross", l.ln_cross);
    attn(p + ".cross_attn", l.cross_attn);
    ln(p + ".ln_ff", l.ln_ff);
    lin(p + ".ff_in", l.ff_in);
    lin(p + ".ff_out", l.ff_out);
  }
  ln("dec.final_ln", dec_final_ln_);
}

template <typename T>
void FewVLMModel<T>::for_each_parameter(
    const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
  const_cast<FewVLMModel*>(this)->for_each_parameter(
      [&](const std::string& name, Tensor<T>& t) { fn(name, t); });
}

template <typename T>
nn::ParameterList<T> FewVLMModel<T>::parameters() const {
  nn::ParameterList<T> out;
  for_each_parameter([&](const std::string& name, const Tensor<T>& t) { out.push_back({name, t}); });
  return out;
}

template <typename T>
std::size_t FewVLMModel<T>::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
FewVLMModel<T> FewVLMModel<T>::clone() const {
  FewVLMModel copy = *this;
  copy.for_each_parameter([](const std::string&, Tensor<T>& t) { t = t.clone(); });
  return copy;
}

template <typename T>
void FewVLMModel<T>::copy_from(const FewVLMModel& other) {
  auto src = other.parameters();
  std::size_t i = 0;
  for_each_parameter([&](const std::string& name, Tensor<T>& t) {
    if (i >= src.size() || src[i].name != name || src[i].tensor.numel() != t.numel()) {
      fail(ErrorCode::kShapeMismatch, "copy_from: parameter layout differs at " + name);
    }
    std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(), t.values().begin());
    t.zero_grad();
    ++i;
  });
}

template <typename T>
void FewVLMModel<T>::check_input(const RegionFeatures* regions, std::span<const TokenId> input) const {
  if (input.size() > config_.max_text_len) {
    fail(ErrorCode::kSequenceTooLong, "input of " + std::to_string(input.size()) + " tokens exceeds max_text_len " +
                                          std::to_string(config_.max_text_len));
  }
  for (TokenId id : input) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      fail(ErrorCode::kInvalidId, "token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  if (regions && regions->dim != config_.feature_dim) {
    fail(ErrorCode::kFeatureDimMismatch, "region features have dim " + std::to_string(regions->dim) +
                                             ", model expects " + std::to_string(config_.feature_dim));
  }
}

template <typename T>
EncoderBatch FewVLMModel<T>::make_encoder_batch(std::span<const SeqExample> examples) const {
  EncoderBatch b;
  b.batch = examples.size();
  b.feature_dim = config_.feature_dim;
  for (const auto& ex : examples) {
    check_input(ex.regions, ex.input);
    b.text_len = std::max(b.text_len, ex.input.size());
    if (!ex.regions) continue;
    // Trailing padding rows are masked anyway, so the batch drops them.
    std::size_t used = ex.regions->n_regions;
    while (used > 0 && ex.regions->is_padding(used - 1)) --used;
    b.region_len = std::max(b.region_len, used);
  }
  if (b.region_len == 0 && b.text_len == 0 && b.batch > 0) b.region_len = 1;
  const std::size_t f = b.feature_dim;
  b.text_ids.assign(b.batch * b.text_len, config_.pad_id);
  b.text_valid.assign(b.batch * b.text_len, 0);
  b.features.assign(b.batch * b.region_len * f, 0.0f);
  b.boxes.assign(b.batch * b.region_len * 4, 0.0f);
  b.region_valid.assign(b.batch * b.region_len, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const auto& ex = examples[i];
    std::copy(ex.input.begin(), ex.input.end(), b.text_ids.begin() + static_cast<std::ptrdiff_t>(i * b.text_len));
    std::fill_n(b.text_valid.begin() + static_cast<std::ptrdiff_t>(i * b.text_len), ex.input.size(), 1);
    if (!ex.regions) continue;
    const auto& r = *ex.regions;
    const std::size_t rows = std::min(r.n_regions, b.region_len);
    std::copy_n(r.features.begin(), rows * f, b.features.begin() + static_cast<std::ptrdiff_t>(i * b.region_len * f));
    std::copy_n(r.boxes.begin(), rows * 4, b.boxes.begin() + static_cast<std::ptrdiff_t>(i * b.region_len * 4));
    for (std::size_t k = 0; k < rows; ++k) b.region_valid[i * b.region_len + k] = r.is_padding(k) ? 0 : 1;
  }
  return b;
}

template <typename T>
DecoderBatch FewVLMModel<T>::make_decoder_batch(std::span<const SeqExample> examples) const {
  DecoderBatch d;
  d.batch = examples.size();
  for (const auto& ex : examples) {
    if (ex.target.empty()) fail(ErrorCode::kEmptyTarget, "target sequence is empty");
    if (ex.target.size() > config_.max_text_len) {
      fail(ErrorCode::kSequenceTooLong, "target of " + std::to_string(ex.target.size()) +
                                            " tokens exceeds max_text_len");
    }
    for (TokenId id : ex.target) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        fail(ErrorCode::kInvalidId, "target id " + std::to_string(id) + " outside vocabulary");
      }
    }
    d.length = std::max(d.length, ex.target.size());
  }
  d.input_ids.assign(d.batch * d.length, config_.pad_id);
  d.targets.assign(d.batch * d.length, config_.pad_id);
  d.valid.assign(d.batch * d.length, 0);
  for (std::size_t i = 0; i < d.batch; ++i) {
    const auto& t = examples[i].target;
    for (std::size_t j = 0; j < t.size(); ++j) {
      d.input_ids[i * d.length + j] = j == 0 ? config_.bos_id : t[j - 1];
      d.targets[i * d.length + j] = t[j];
      d.valid[i * d.length + j] = 1;
    }
  }
  return d;
}

template <typename T>
Tensor<T> FewVLMModel<T>::feed_forward(Graph<T>& g, const Tensor<T>& x, const nn::LinearParams<T>& in,
                                       const nn::LinearParams<T>& out) const {
  return nn::linear(g, nn::gelu(g, nn::linear(g, x, in.w, in.b)), out.w, out.b);
}

template <typename T>
EncoderStates<T> FewVLMModel<T>::encode(Graph<T>& g, const EncoderBatch& batch) const {
  const std::size_t d = config_.hidden_dim;
  const std::size_t lt = batch.text_len, lr = batch.region_len;
  if (batch.feature_dim != config_.feature_dim) {
    fail(ErrorCode::kFeatureDimMismatch, "encoder batch feature dim does not match the model");
  }
  if (lt > config_.max_text_len) fail(ErrorCode::kSequenceTooLong, "encoder text exceeds max_text_len");
  std::vector<TokenId> positions(batch.batch * lt);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i % std::max<std::size_t>(lt, 1));

  auto text = nn::add(g, nn::embedding_lookup(g, tok_emb_, batch.text_ids),
                      nn::embedding_lookup(g, enc_pos_, positions));
  auto feats = constant_input<T>({batch.batch * lr, batch.feature_dim}, batch.features);
  auto boxes = constant_input<T>({batch.batch * lr, 4}, batch.boxes);
  auto regions = nn::add(g, nn::linear(g, feats, region_feat_.w, region_feat_.b),
                         nn::linear(g, boxes, region_box_.w, Tensor<T>()));
  regions = nn::layer_norm(g, regions, region_ln_.gain, region_ln_.bias);
  auto x = nn::dropout(g, nn::concat_sequences(g, text, regions, batch.batch), config_.dropout);
  EncoderStates<T> enc;
  enc.batch = batch.batch;
  enc.length = lt + lr;
  enc.key_valid = batch.key_valid();
  const auto mask = nn::AttentionMask::key_padding(enc.batch, enc.length, enc.length, enc.key_valid);
  for (const auto& layer : enc_layers_) {
    auto h = nn::layer_norm(g, x, layer.ln_attn.gain, layer.ln_attn.bias);
    h = nn::multi_head_attention(g, h, h, h, layer.attn, mask, config_.n_heads);
    x = nn::add(g, x, nn::dropout(g, h, config_.dropout));
    h = nn::layer_norm(g, x, layer.ln_ff.gain, layer.ln_ff.bias);
    h = feed_forward(g, h, layer.ff_in, layer.ff_out);
    x = nn::add(g, x, nn::dropout(g, h, config_.dropout));
  }
  enc.states = nn::layer_norm(g, x, enc_final_ln_.gain, enc_final_ln_.bias);
  (void)d;
  return enc;
}

template <typename T>
Tensor<T> FewVLMModel<T>::encode(Graph<T>& g, const RegionFeatures& regions,
                                 std::span<const TokenId> input_ids) const {
  SeqExample ex{&regions, TokenSeq(input_ids.begin(), input_ids.end()), {}};
  return encode(g, make_encoder_batch(std::span<const SeqExample>(&ex, 1))).states;
}

template <typename T>
Tensor<T> FewVLMModel<T>::decode(Graph<T>& g, const EncoderStates<T>& enc, std::span<const TokenId> dec_ids,
                                 std::span<const std::uint8_t> dec_valid, std::size_t length) const {
  if (dec_ids.size() != enc.batch * length || dec_valid.size() != dec_ids.size()) {
    fail(ErrorCode::kShapeMismatch, "decoder inputs do not match the encoder batch");
  }
  if (length > config_.max_text_len) fail(ErrorCode::kSequenceTooLong, "decoder input exceeds max_text_len");
  std::vector<TokenId> positions(dec_ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i % length);
  auto x = nn::add(g, nn::embedding_lookup(g, tok_emb_, dec_ids), nn::embedding_lookup(g, dec_pos_, positions));
  x = nn::dropout(g, x, config_.dropout);
  auto self_mask = nn::AttentionMask::key_padding(enc.batch, length, length, dec_valid);
  self_mask.causal();
  const auto cross_mask = nn::AttentionMask::key_padding(enc.batch, length, enc.length, enc.key_valid);
  for (const auto& layer : dec_layers_) {
    auto h = nn::layer_norm(g, x, layer.ln_self.gain, layer.ln_self.bias);
    h = nn::multi_head_attention(g, h, h, h, layer.self_attn, self_mask, config_.n_heads);
    x = nn::add(g, x, nn::dropout(g, h, config_.dropout));
    h = nn::layer_norm(g, x, layer.ln_cross.gain, layer.ln_cross.bias);
    h = nn::multi_head_attention(g, h, enc.states, enc.states, layer.cross_attn, cross_mask, config_.n_heads);
    x = nn::add(g, x, nn::dropout(g, h, config_.dropout));
    h = nn::layer_norm(g, x, layer.ln_ff.gain, layer.ln_ff.bias);
    h = feed_forward(g, h, layer.ff_in, layer.ff_out);
    x = nn::add(g, x, nn::dropout(g, h, config_.dropout));
  }
  x = nn::layer_norm(g, x, dec_final_ln_.gain, dec_final_ln_.bias);
  return nn::matmul_transposed(g, x, tok_emb_);
}

template <typename T>
Tensor<T> FewVLMModel<T>::nll_loss(Graph<T>& g, std::span<const SeqExample> examples) const {
  if (examples.empty()) fail(ErrorCode::kEmptyTarget, "nll_loss needs at least one example");
  const auto dec = make_decoder_batch(examples);
  const auto enc = encode(g, make_encoder_batch(examples));
  auto logits = decode(g, enc, dec.input_ids, dec.valid, dec.length);
  std::vector<T> weights(dec.valid.begin(), dec.valid.end());
  return nn::cross_entropy<T>(g, logits, dec.targets, weights);
}

template <typename T>
Tensor<T> FewVLMModel<T>::nll_loss(Graph<T>& g, const RegionFeatures& regions, std::span<const TokenId> input_ids,
                                   std::span<const TokenId> target_ids) const {
  SeqExample ex{&regions, TokenSeq(input_ids.begin(), input_ids.end()),
                TokenSeq(target_ids.begin(), target_ids.end())};
  return nll_loss(g, std::span<const SeqExample>(&ex, 1));
}

namespace {

template <typename T>
TokenId argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  const T* x = logits.data() + row * v;
  std::size_t best = 0;
  for (std::size_t c = 1; c < v; ++c)
    if (x[c] > x[best]) best = c;
  return static_cast<TokenId>(best);
}

}  // namespace

template <typename T>
std::vector<TokenSeq> FewVLMModel<T>::generate_batch(std::span<const SeqExample> examples,
                                                     std::size_t max_len) const {
  std::vector<TokenSeq> out(examples.size());
  if (examples.empty()) return out;
  if (max_len < 1) fail(ErrorCode::kInvalidArgument, "generate: max_len must be >= 1");
  max_len = std::min(max_len, config_.max_text_len);
  Graph<T> g(false);
  const auto enc = encode(g, make_encoder_batch(examples));
  const std::size_t n = examples.size();
  std::vector<TokenSeq> prefix(n, TokenSeq{config_.bos_id});
  std::vector<bool> done(n, false);
  for (std::size_t step = 0; step < max_len; ++step) {
    const std::size_t len = step + 1;
    std::vector<TokenId> ids;
    ids.reserve(n * len);
    for (const auto& p : prefix) ids.insert(ids.end(), p.begin(), p.end());
    const std::vector<std::uint8_t> valid(ids.size(), 1);
    const auto logits = decode(g, enc, ids, valid, len);
    bool all_done = true;
    for (std::size_t i = 0; i < n; ++i) {
      TokenId next = config_.eos_id;
      if (!done[i]) {
        next = argmax_row(logits, i * len + step);
        if (next == config_.eos_id) {
          done[i] = true;
        } else {
          out[i].push_back(next);
        }
      }
      prefix[i].push_back(next);
      all_done = all_done && done[i];
    }
    if (all_done) break;
  }
  return out;
}

template <typename T>
TokenSeq FewVLMModel<T>::generate(const RegionFeatures& regions, std::span<const TokenId> input_ids,
                                  std::size_t max_len, DecodeStrategy strategy) const {
  SeqExample ex{&regions, TokenSeq(input_ids.begin(), input_ids.end()), {}};
  if (strategy.kind == DecodeStrategy::Kind::kGreedy) {
    return generate_batch(std::span<const SeqExample>(&ex, 1), max_len).front();
  }
  if (max_len < 1) fail(ErrorCode::kInvalidArgument, "generate: max_len must be >= 1");
  const std::size_t beam = std::max<std::size_t>(strategy.beam_size, 1);
  max_len = std::min(max_len, config_.max_text_len);
  Graph<T> g(false);
  const auto single = encode(g, make_encoder_batch(std::span<const SeqExample>(&ex, 1)));

  struct Hyp {
    TokenSeq tokens;  // excludes bos
    double score = 0.0;
  };
  auto better = [](const Hyp& a, const Hyp& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  };
  std::vector<Hyp> alive{Hyp{}};
  std::vector<Hyp> finished;
  for (std::size_t step = 0; step < max_len && !alive.empty(); ++step) {
    const std::size_t len = step + 1;
    EncoderStates<T> enc;
    enc.batch = alive.size();
    enc.length = single.length;
    std::vector<T> states;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      states.insert(states.end(), single.states.values().begin(), single.states.values().end());
      enc.key_valid.insert(enc.key_valid.end(), single.key_valid.begin(), single.key_valid.end());
    }
    enc.states = Tensor<T>::from({alive.size() * single.length, config_.hidden_dim}, std::move(states));
    std::vector<TokenId> ids;
    for (const auto& h : alive) {
      ids.push_back(config_.bos_id);
      ids.insert(ids.end(), h.tokens.begin(), h.tokens.end());
    }
    const std::vector<std::uint8_t> valid(ids.size(), 1);
    const auto logits = decode(g, enc, ids, valid, len);
    std::vector<Hyp> candidates;
    const std::size_t v = logits.cols();
    for (std::size_t i = 0; i < alive.size(); ++i) {
      const T* row = logits.data() + (i * len + step) * v;
      const double mx = static_cast<double>(*std::max_element(row, row + v));
      double z = 0.0;
      for (std::size_t c = 0; c < v; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
      const double lse = mx + std::log(z);
      for (std::size_t c = 0; c < v; ++c) {
        Hyp h{alive[i].tokens, alive[i].score + static_cast<double>(row[c]) - lse};
        h.tokens.push_back(static_cast<TokenId>(c));
        candidates.push_back(std::move(h));
      }
    }
    const std::size_t keep = std::min(beam, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    alive.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      auto& c = candidates[i];
      if (c.tokens.back() == config_.eos_id) {
        c.tokens.pop_back();
        finished.push_back(std::move(c));
      } else if (step + 1 == max_len) {
        finished.push_back(std::move(c));
      } else {
        alive.push_back(std::move(c));
      }
    }
    // Every alive hypothesis already scores below the best finished one and
    // log-probabilities only decrease, so the search can stop.
    if (!finished.empty()) {
      const auto best = std::min_element(finished.begin(), finished.end(), better);
      std::erase_if(alive, [&](const Hyp& h) { return h.score < best->score; });
      if (finished.size() >= beam) alive.clear();
    }
  }
  return std::min_element(finished.begin(), finished.end(), better)->tokens;
}

template <typename T>
void FewVLMModel<T>::save(const std::filesystem::path& path, const json& extra) const {
  json cfg = extra.is_object() ? extra : json::object();
  cfg["model"] = config_.to_json();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  for_each_parameter([&](const std::string& name, const Tensor<T>& t) {
    tensors.emplace_back(name, Tensor<float>::from(t.shape(), std::vector<float>(t.values().begin(), t.values().end())));
  });
  nn::save_checkpoint(path, cfg, tensors);
}

template <typename T>
FewVLMModel<T> FewVLMModel<T>::load(const std::filesystem::path& path, json* extra) {
  auto ck = nn::load_checkpoint(path);
  if (!ck.config.contains("model")) fail(ErrorCode::kMissingField, path.string() + ": checkpoint lacks a model config");
  FewVLMModel model(ModelConfig::from_json(ck.config.at("model")), 0);
  model.for_each_parameter([&](const std::string& name, Tensor<T>& t) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) fail(ErrorCode::kMissingField, path.string() + ": missing tensor " + name);
    if (it->second.shape() != t.shape()) {
      fail(ErrorCode::kShapeMismatch, path.string() + ": tensor " + name + " has shape " +
                                          nn::shape_string(it->second.shape()));
    }
    std::copy(it->second.values().begin(), it->second.values().end(), t.values().begin());
  });
  if (extra) *extra = ck.config;
  return model;
}

template class FewVLMModel<float>;
template class FewVLMModel<double>;

}  // namespace fewvlm
