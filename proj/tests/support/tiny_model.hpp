#pragma once

// Narrow 16x16 model and training config: same code paths as the default,
// a fraction of the compute.

#include "mcdiff/config.hpp"

namespace mcdiff::testing {

inline ModelConfig tiny_model_config() {
  ModelConfig m;
  m.cond.d_embed = 16;
  m.cond.encoder_channels = 8;
  m.cond.encoder_out_channels = 16;
  m.cond.fusion_layers = 1;
  m.cond.fusion_heads = 2;
  m.cond.fusion_hidden = 32;
  m.denoiser.base_channels = 8;
  m.denoiser.res_blocks = 1;
  m.denoiser.time_dim = 16;
  m.denoiser.time_hidden = 32;
  m.denoiser.context_dim = 16;
  m.denoiser.attention_heads = 2;
  return m;
}

inline TrainConfig tiny_train_config() {
  TrainConfig c;
  c.model = tiny_model_config();
  c.iterations = 20;
  c.batch = 8;
  c.warmup = 5;
  c.dataset.size = 32;
  c.checkpoint_interval = 0;
  c.log_interval = 0;
  return c;
}

}  // namespace mcdiff::testing
