#pragma once

#include <fstream>
#include <string>

#include "mdenet/train.hpp"

namespace mdenet::testing {

inline TrainConfig desk_config() {
  std::ifstream in(std::string(MDENET_CONFIG_DIR) + "/desk.json");
  return train_config_from_json(nlohmann::json::parse(in));
}

// Small enough that a full epoch takes a few milliseconds.
inline SyntheticSpec tiny_spec(int known = 3) {
  SyntheticSpec s;
  s.known_families = known;
  s.unknown_families = 1;
  s.samples_per_family = 20;
  s.features = 16;
  s.max_length = 8;
  s.vocab_size = 32;
  s.signature_length = 4;
  s.tokens_per_sample = 6;
  return s;
}

inline TrainConfig tiny_config(int known = 3) {
  TrainConfig c;
  c.known_families = known;
  c.height = 4;
  c.width = 4;
  c.max_length = 8;
  c.batch_size = 8;
  c.epochs = 2;
  c.disc_margin = 1.0;
  c.seed = 3;
  c.numeric.key_channels = 4;
  c.numeric.value_channels = 3;
  c.numeric.local_channels = 3;
  c.numeric.stack = NumericEncoderConfig::default_stack(3, {4, 4, 8, 8});
  c.numeric.branch_dim = 8;
  c.textual.model_dim = 8;
  c.textual.ffn_dim = 16;
  c.textual.blocks = 1;
  c.textual.output_dim = 16;
  c.fusion_hidden = 16;
  c.embedding_dim = 16;
  c.sub_dim = 8;
  return c;
}

}  // namespace mdenet::testing
