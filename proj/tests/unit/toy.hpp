#pragma once

#include "motionpred/ainb_vae.hpp"
#include "motionpred/synth.hpp"

namespace toy {

inline motionpred::VaeConfig vae_config(motionpred::DecoderMode mode = motionpred::DecoderMode::owm) {
  motionpred::VaeConfig c;
  c.width = 8;
  c.heads = 2;
  c.layers = 1;
  c.ffn_width = 16;
  c.period = 4;
  c.latent = 4;
  c.t_start = 2;
  c.t_end = 2;
  c.t_between = 3;
  c.mode = mode;
  return c;
}

inline std::vector<motionpred::MotionSequence> gait_set(std::size_t per_action, std::size_t frames,
                                                        std::uint64_t seed) {
  motionpred::GenDataOptions g;
  g.actions = motionpred::gait_actions().actions;
  g.per_action = per_action;
  g.frames = frames;
  g.test_fraction = 0;
  g.seed = seed;
  return motionpred::generate_dataset(g).train;
}

inline std::vector<motionpred::MotionSequence> windows(const std::vector<motionpred::MotionSequence>& seqs,
                                                       std::size_t length, std::uint64_t seed) {
  motionpred::Rng rng(seed);
  std::vector<motionpred::MotionSequence> out;
  for (const auto& s : seqs) out.push_back(motionpred::random_window(s, length, rng));
  return out;
}

}  // namespace toy
