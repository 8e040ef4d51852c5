#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fewvlm/data.hpp"
#include "fewvlm/optim.hpp"
#include "fewvlm/tensor.hpp"
#include "json.hpp"

namespace fewvlm {

struct ModelConfig {
  std::size_t n_enc_layers = 4;
  std::size_t n_dec_layers = 4;
  std::size_t hidden_dim = 128;
  std::size_t ff_dim = 512;
  std::size_t n_heads = 8;
  std::size_t head_dim = 16;
  std::size_t vocab_size = 0;
  std::size_t max_text_len = 64;
  std::size_t n_regions = kDefaultRegions;
  std::size_t feature_dim = kDefaultFeatureDim;
  double dropout = 0.1;
  TokenId pad_id = -1;
  TokenId bos_id = -1;
  TokenId eos_id = -1;

  // Desk-scale defaults bound to a vocabulary's special ids.
  static ModelConfig desk(const Vocab& vocab);
  // Base-size architecture (12+12 layers, 768 wide). Shippable, not exercised.
  static ModelConfig base(const Vocab& vocab);
  static ModelConfig large(const Vocab& vocab);

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

namespace nn {

template <typename T>
struct LinearParams {
  Tensor<T> w, b;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain, bias;
};

template <typename T>
struct AttentionParams {
  LinearParams<T> q, k, v, o;
};

// Projects inputs, runs masked multi-head attention, projects the result.
// query_in: (batch*q_len, d); key_in / value_in: (batch*k_len, d).
template <typename T>
Tensor<T> multi_head_attention(Graph<T>& g, const Tensor<T>& query_in, const Tensor<T>& key_in,
                               const Tensor<T>& value_in, const AttentionParams<T>& p,
                               const AttentionMask& mask, std::size_t n_heads);

}  // namespace nn

// One training / scoring example. `target` should already carry eos when the
// model is meant to learn where to stop.
struct SeqExample {
  const RegionFeatures* regions = nullptr;
  TokenSeq input;
  TokenSeq target;
};

// Padded, batch-major tensors for a list of examples.
struct EncoderBatch {
  std::size_t batch = 0;
  std::size_t text_len = 0;    // padded text length
  std::size_t region_len = 0;  // padded region count
  std::size_t feature_dim = 0;
  std::vector<TokenId> text_ids;        // batch x text_len
  std::vector<std::uint8_t> text_valid;  // batch x text_len
  std::vector<float> features;           // batch x region_len x feature_dim
  std::vector<float> boxes;              // batch x region_len x 4
  std::vector<std::uint8_t> region_valid;
  // Encoder key validity, batch x (text_len + region_len).
  std::vector<std::uint8_t> key_valid() const;
};

struct DecoderBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<TokenId> input_ids;  // bos-shifted targets
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> valid;
};

template <typename T>
struct EncoderStates {
  nn::Tensor<T> states;  // (batch * (text_len + region_len), hidden)
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> key_valid;
};

struct DecodeStrategy {
  enum class Kind { kGreedy, kBeam };
  Kind kind = Kind::kGreedy;
  std::size_t beam_size = 1;

  static DecodeStrategy greedy() { return {}; }
  static DecodeStrategy beam(std::size_t k) { return {Kind::kBeam, k}; }
};

template <typename T>
class FewVLMModel {
 public:
  FewVLMModel() = default;
  FewVLMModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  nn::ParameterList<T> parameters() const;
  std::size_t parameter_count() const;
  // Deep copy; the clone shares no storage with *this.
  FewVLMModel clone() const;
  // Copies parameter values from another model of the same config.
  void copy_from(const FewVLMModel& other);
  // The tied output projection is the token embedding itself.
  const nn::Tensor<T>& token_embedding() const { return tok_emb_; }

  EncoderBatch make_encoder_batch(std::span<const SeqExample> examples) const;
  DecoderBatch make_decoder_batch(std::span<const SeqExample> examples) const;

  EncoderStates<T> encode(nn::Graph<T>& g, const EncoderBatch& batch) const;
  // Single-example convenience: returns (n_regions + len(input_ids), hidden).
  nn::Tensor<T> encode(nn::Graph<T>& g, const RegionFeatures& regions, std::span<const TokenId> input_ids) const;
  // Logits (batch * length, vocab) for teacher-forced decoder inputs.
  nn::Tensor<T> decode(nn::Graph<T>& g, const EncoderStates<T>& enc, std::span<const TokenId> dec_ids,
                       std::span<const std::uint8_t> dec_valid, std::size_t length) const;

  // Summed negative log-likelihood of the targets (teacher forcing).
  nn::Tensor<T> nll_loss(nn::Graph<T>& g, std::span<const SeqExample> examples) const;
  nn::Tensor<T> nll_loss(nn::Graph<T>& g, const RegionFeatures& regions, std::span<const TokenId> input_ids,
                         std::span<const TokenId> target_ids) const;

  // Generated tokens without bos/eos.
  TokenSeq generate(const RegionFeatures& regions, std::span<const TokenId> input_ids, std::size_t max_len,
                    DecodeStrategy strategy = DecodeStrategy::greedy()) const;
  // Greedy decoding of many inputs at once; same result as per-example greedy.
  std::vector<TokenSeq> generate_batch(std::span<const SeqExample> examples, std::size_t max_len) const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static FewVLMModel load(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

 private:
  struct EncoderLayer {
    nn::LayerNormParams<T> ln_attn, ln_ff;
    nn::AttentionParams<T> attn;
    nn::LinearParams<T> ff_in, ff_out;
  };
  struct DecoderLayer {
    nn::LayerNormParams<T> ln_self, ln_cross, ln_ff;
    nn::AttentionParams<T> self_attn, cross_attn;
    nn::LinearParams<T> ff_in, ff_out;
  };

  void for_each_parameter(const std::function<void(const std::string&, nn::Tensor<T>&)>& fn);
  void for_each_parameter(const std::function<void(const std::string&, const nn::Tensor<T>&)>& fn) const;
  nn::Tensor<T> feed_forward(nn::Graph<T>& g, const nn::Tensor<T>& x, const nn::LinearParams<T>& in,
                             const nn::LinearParams<T>& out) const;
  void check_input(const RegionFeatures* regions, std::span<const TokenId> input) const;

  ModelConfig config_;
  nn::Tensor<T> tok_emb_, enc_pos_, dec_pos_;
  nn::LinearParams<T> region_feat_, region_box_;
  nn::LayerNormParams<T> region_ln_;
  std::vector<EncoderLayer> enc_layers_;
  std::vector<DecoderLayer> dec_layers_;
  nn::LayerNormParams<T> enc_final_ln_, dec_final_ln_;
};

using Model = FewVLMModel<float>;

}  // namespace fewvlm
