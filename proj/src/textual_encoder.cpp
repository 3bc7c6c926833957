#include "mdenet/textual_encoder.hpp"

#include "mdenet/errors.hpp"

namespace mdenet {

void TextualEncoderConfig::validate() const {
  if (model_dim == 0 || ffn_dim == 0 || output_dim == 0) {
    throw ConfigError("textual encoder: zero-width layer");
  }
  if (blocks < 1) throw ConfigError("textual encoder: need at least one block");
  if (heads < 1 || model_dim % static_cast<std::size_t>(heads) != 0) {
    throw ConfigError("textual encoder: model_dim must be divisible by heads");
  }
}

EncoderBlockParams EncoderBlockParams::make(std::size_t d, std::size_t ffn, Rng& rng) {
  EncoderBlockParams b;
  b.query = parameter({d, d}, fan_in_uniform(d * d, d, rng));
  b.key = parameter({d, d}, fan_in_uniform(d * d, d, rng));
  b.value = parameter({d, d}, fan_in_uniform(d * d, d, rng));
  b.attn_norm = LayerNormParams::make(d);
  b.ffn_in = Linear::make(d, ffn, rng);
  b.ffn_out = Linear::make(ffn, d, rng);
  b.ffn_norm = LayerNormParams::make(d);
  return b;
}

void EncoderBlockParams::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".attn.query", query);
  reg.add(prefix + ".attn.key", key);
  reg.add(prefix + ".attn.value", value);
  attn_norm.register_params(reg, prefix + ".attn_norm");
  ffn_in.register_params(reg, prefix + ".ffn.in");
  ffn_out.register_params(reg, prefix + ".ffn.out");
  ffn_norm.register_params(reg, prefix + ".ffn_norm");
}

SentenceBatch make_sentence_batch(std::span<const MalwareSentence> sentences) {
  if (sentences.empty()) throw InputError("sentence batch is empty");
  SentenceBatch b;
  b.batch = sentences.size();
  b.length = sentences.front().token_ids.size();
  for (const auto& s : sentences) {
    if (s.token_ids.size() != b.length) throw ShapeError("sentences differ in length");
    for (int id : s.token_ids) {
      b.ids.push_back(id);
      b.mask.push_back(id != s.pad_id ? 1 : 0);
    }
  }
  return b;
}

namespace {

// Applies a 2-d op to the last dimension of an [N, L, D] tensor.
template <typename F>
Var on_rows(const Var& s, F f) {
  const auto n = s->shape[0], l = s->shape[1];
  Var out = f(reshape(s, {n * l, s->shape[2]}));
  return reshape(out, {n, l, out->shape[1]});
}

}  // namespace

Var self_attention(const Var& s, const EncoderBlockParams& block, std::span<const std::uint8_t> mask,
                   int heads) {
  if (s->shape.size() != 3) throw ShapeError("self_attention: expected [N, L, D]");
  Var q = on_rows(s, [&](const Var& x) { return matmul(x, block.query); });
  Var k = on_rows(s, [&](const Var& x) { return matmul(x, block.key); });
  Var v = on_rows(s, [&](const Var& x) { return matmul(x, block.value); });
  return masked_attention(q, k, v, mask, heads);
}

Var feed_forward(const Var& v, const EncoderBlockParams& block) {
  auto ffn = [&](const Var& x) { return block.ffn_out(relu(block.ffn_in(x))); };
  return v->shape.size() == 3 ? on_rows(v, ffn) : ffn(v);
}

Var encoder_block(const Var& s, const EncoderBlockParams& block, std::span<const std::uint8_t> mask,
                  int heads) {
  Var a = block.attn_norm(add(s, self_attention(s, block, mask, heads)));
  return block.ffn_norm(add(a, feed_forward(a, block)));
}

TextualEncoder TextualEncoder::make(const TextualEncoderConfig& config, std::size_t vocab_size,
                                    std::size_t max_length, Rng& rng) {
  config.validate();
  if (vocab_size < 2 || max_length < 1) throw ConfigError("textual encoder: bad vocab or length");
  TextualEncoder enc;
  enc.config = config;
  enc.vocab_size = vocab_size;
  enc.max_length = max_length;
  const auto d = config.model_dim;
  enc.token_embedding = parameter({vocab_size, d}, fan_in_uniform(vocab_size * d, 1, rng));
  enc.position_embedding = parameter({max_length, d}, fan_in_uniform(max_length * d, 1, rng));
  for (std::size_t i = 0; i < config.blocks; ++i) {
    enc.blocks.push_back(EncoderBlockParams::make(d, config.ffn_dim, rng));
  }
  enc.proj = Linear::make(d, config.output_dim, rng);
  return enc;
}

TextualEncoding TextualEncoder::encode(const SentenceBatch& batch) const {
  if (batch.length > max_length) {
    throw ShapeError("encode_textual: sentence length " + std::to_string(batch.length) +
                     " exceeds " + std::to_string(max_length));
  }
  Var h = embed_tokens(batch.ids, batch.batch, batch.length, token_embedding, position_embedding);
  for (const auto& block : blocks) h = encoder_block(h, block, batch.mask, config.heads);
  TextualEncoding out;
  out.z = relu(proj(masked_mean(h, batch.mask)));
  out.all_padding.resize(batch.batch);
  for (std::size_t i = 0; i < batch.batch; ++i) {
    bool any = false;
    for (std::size_t t = 0; t < batch.length; ++t) any = any || batch.mask[i * batch.length + t];
    out.all_padding[i] = !any;
  }
  return out;
}

void TextualEncoder::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".token_embedding", token_embedding);
  reg.add(prefix + ".position_embedding", position_embedding);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].register_params(reg, prefix + ".blocks." + std::to_string(i));
  }
  proj.register_params(reg, prefix + ".proj");
}

}  // namespace mdenet
