// Learnable softmax-weighted fusion of the backbone's per-layer hidden
// representations into a single frame sequence.

#pragma once

#include "sermtl/tape.hpp"

namespace sermtl {

// Per-utterance stack of L hidden-layer feature sequences, [L, T, D].
struct LayerStack {
  Tensor layers;

  LayerStack() = default;
  explicit LayerStack(Tensor t);

  std::size_t num_layers() const { return layers.extent(0); }
  std::size_t num_frames() const { return layers.extent(1); }
  std::size_t dim() const { return layers.extent(2); }
};

struct FusionParams {
  Tensor layer_logits;  // [L], zero-initialized -> uniform weights

  static FusionParams uniform(std::size_t num_layers) {
    return FusionParams{Tensor::zeros({num_layers})};
  }
};

// out[t,d] = sum_l softmax(layer_logits)[l] * stack[l,t,d]
Var fuse_layers(Tape& tape, Var stack, Var layer_logits);
Tensor fuse_layers(const LayerStack& stack, const FusionParams& params);

// stack[L-1], unchanged.
Var select_last(Tape& tape, Var stack);
Tensor select_last(const LayerStack& stack);

}  // namespace sermtl
