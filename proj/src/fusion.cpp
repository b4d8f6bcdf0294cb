#include "sermtl/fusion.hpp"

namespace sermtl {

LayerStack::LayerStack(Tensor t) : layers(std::move(t)) {
  require_shape(layers.rank() == 3,
                "LayerStack: need [L,T,D], got " + shape_str(layers.shape()));
  require_shape(layers.extent(0) >= 1 && layers.extent(1) >= 1,
                "LayerStack: L and T must be >= 1");
  if (!layers.all_finite()) {
    throw NumericError("LayerStack: non-finite features");
  }
}

Var fuse_layers(Tape& tape, Var stack, Var layer_logits) {
  require_shape(
      tape.val(stack).rank() == 3 &&
          tape.val(layer_logits).numel() == tape.val(stack).extent(0),
      "fuse_layers: logits length " +
          std::to_string(tape.val(layer_logits).numel()) +
          " does not match L=" + std::to_string(tape.val(stack).extent(0)));
  Var weights = tape.softmax(layer_logits, 0);
  return tape.weighted_layer_sum(stack, weights);
}

Tensor fuse_layers(const LayerStack& stack, const FusionParams& params) {
  Tape tape;
  Var s = tape.constant(stack.layers);
  Var logits = tape.constant(params.layer_logits);
  return tape.val(fuse_layers(tape, s, logits));
}

Var select_last(Tape& tape, Var stack) {
  const Tensor& ts = tape.val(stack);
  require_shape(ts.rank() == 3, "select_last: need [L,T,D]");
  const std::size_t L = ts.extent(0), T = ts.extent(1), D = ts.extent(2);
  Var flat = tape.reshape(stack, {L, T * D});
  Var last = tape.slice_row(flat, L - 1);
  return tape.reshape(last, {T, D});
}

Tensor select_last(const LayerStack& stack) {
  Tape tape;
  Var s = tape.constant(stack.layers);
  return tape.val(select_last(tape, s));
}

}  // namespace sermtl
