#pragma once

// Small post-LN transformer over malware sentences, trained from scratch.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mdenet/data.hpp"
#include "mdenet/layers.hpp"

namespace mdenet {

struct TextualEncoderConfig {
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t blocks = 2;
  int heads = 1;
  std::size_t output_dim = 1024;

  void validate() const;
};

struct EncoderBlockParams {
  Var query;  // [D, D]
  Var key;
  Var value;
  LayerNormParams attn_norm;
  Linear ffn_in;   // D -> ffn_dim
  Linear ffn_out;  // ffn_dim -> D
  LayerNormParams ffn_norm;

  static EncoderBlockParams make(std::size_t model_dim, std::size_t ffn_dim, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// Token ids and key mask (1 = real token) for a batch of sentences.
struct SentenceBatch {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  std::size_t batch = 0;
  std::size_t length = 0;
};

SentenceBatch make_sentence_batch(std::span<const MalwareSentence> sentences);

// v~_i = sum_j softmax_j(q_i . k_j) v_j over unmasked j; S is [N, L, D].
Var self_attention(const Var& s, const EncoderBlockParams& block, std::span<const std::uint8_t> mask,
                   int heads);
// max(0, v W1 + b1) W2 + b2 applied to the last dimension.
Var feed_forward(const Var& v, const EncoderBlockParams& block);
// LN(A + FFN(A)) with A = LN(S + SelfAttn(S)).
Var encoder_block(const Var& s, const EncoderBlockParams& block, std::span<const std::uint8_t> mask,
                  int heads);

struct TextualEncoding {
  Var z;                         // [N, output_dim]
  std::vector<bool> all_padding;  // sentence had no real token
};

struct TextualEncoder {
  TextualEncoderConfig config;
  std::size_t vocab_size = 0;
  std::size_t max_length = 0;
  Var token_embedding;     // [V, D]
  Var position_embedding;  // [L_max, D]
  std::vector<EncoderBlockParams> blocks;
  Linear proj;  // D -> output_dim

  static TextualEncoder make(const TextualEncoderConfig& config, std::size_t vocab_size,
                             std::size_t max_length, Rng& rng);

  TextualEncoding encode(const SentenceBatch& batch) const;
  TextualEncoding encode(std::span<const MalwareSentence> sentences) const {
    return encode(make_sentence_batch(sentences));
  }
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

}  // namespace mdenet
