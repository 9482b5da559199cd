#pragma once

#include <array>
#include <vector>

#include "hand/core/error.hpp"

namespace hand::model {

// Hyperparameters of the hybrid network. Defaults reproduce the full-size
// 256x256 stack; smaller input sizes scale the token grid with them.
struct ModelConfig {
  int input_size = 256;
  int init_channels = 4;
  std::array<int, 4> encoder_channels{4, 8, 16, 32};
  int token_dim = 128;          // d
  int transformer_layers = 4;
  int attention_heads = 8;
  std::vector<int> discriminator_hidden{128, 64};
  float dropout_rate = 0.1f;

  // The encoder halves spatial resolution three times and the token
  // projection once more, so the token grid is input_size / 16 per side.
  int token_grid() const { return input_size / 16; }
  int token_count() const { return token_grid() * token_grid(); }  // N

  void validate() const {
    if (input_size < 16 || input_size % 16 != 0)
      throw input_error("model: input_size must be a positive multiple of 16");
    if (init_channels != encoder_channels[0])
      throw input_error("model: init_channels must equal encoder_channels[0]");
    for (int c : encoder_channels)
      if (c <= 0) throw input_error("model: encoder channels must be positive");
    if (token_dim <= 0 || transformer_layers <= 0)
      throw input_error("model: token_dim and transformer_layers must be positive");
    if (attention_heads <= 0 || token_dim % attention_heads != 0)
      throw input_error("model: attention_heads must divide token_dim");
    if (discriminator_hidden.empty())
      throw input_error("model: discriminator needs at least one hidden layer");
    if (dropout_rate < 0.0f || dropout_rate >= 1.0f)
      throw input_error("model: dropout_rate must be in [0, 1)");
    // Token content must be reshapeable onto the post-bottleneck grid.
    if ((static_cast<long long>(token_dim) * token_count()) % encoder_channels[3] != 0)
      throw input_error("model: token_dim * token_count not divisible by bottleneck channels");
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace hand::model
