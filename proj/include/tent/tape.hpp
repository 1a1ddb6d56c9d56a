#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "tent/model.hpp"
#include "tent/tensor.hpp"

namespace tent {

// Reverse-mode gradient tape. Each operation records its output eagerly
// together with an adjoint rule; gradients() replays those rules in reverse
// execution order, accumulating adjoints keyed by value id. Values are
// immutable once recorded, so a tape can compute gradients repeatedly.
class GradientTape {
 public:
  using ValueId = std::size_t;

  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Registers an input or parameter. Leaves have no adjoint rule.
  ValueId leaf(Tensor value);

  const Tensor& value(ValueId id) const;
  std::size_t node_count() const { return nodes_.size(); }

  ValueId add(ValueId a, ValueId b);
  ValueId qkv_projection(ValueId x, ValueId w);
  // Fused score computation: pair scores summed over the station-pair axis
  // and scaled by 1/sqrt(head_dim), without materializing the rank-4 tensor.
  ValueId attention_scores(ValueId query, ValueId key, std::size_t head_dim);
  ValueId attention_weights(ValueId scores, SoftmaxAxis axis);
  ValueId attention_output(ValueId weights, ValueId value);
  ValueId concat_last(const std::vector<ValueId>& parts);
  ValueId time_slice_matmul(ValueId a, ValueId w);
  ValueId slice_linear(ValueId x, ValueId w, ValueId b);
  ValueId relu(ValueId x);
  ValueId layer_norm(ValueId x, ValueId gain, ValueId bias, double epsilon = kNormEpsilon);
  ValueId flatten(ValueId x);
  ValueId linear_map(ValueId x, ValueId w, ValueId b);
  // Mean squared error against a fixed target; returns a rank-0 scalar.
  ValueId mse_loss(ValueId pred, Tensor target);
  // Mean of rank-0 scalars, in the given order.
  ValueId mean_scalars(const std::vector<ValueId>& scalars);

  // d(loss)/d(wrt[i]) for each requested id. loss must be a rank-0 value on
  // this tape. Ids never reached from the loss get zero gradients.
  std::vector<Tensor> gradients(ValueId loss, const std::vector<ValueId>& wrt);

 private:
  using BackwardFn = std::function<void(GradientTape&, const Tensor& upstream)>;

  struct Node {
    Tensor value;
    BackwardFn backward;  // empty for leaves
  };

  ValueId record(Tensor value, BackwardFn backward);
  // Adjoint accumulator for id, zero-initialized on first touch.
  Tensor& adjoint(ValueId id);

  std::vector<Node> nodes_;
  std::vector<Tensor> adjoints_;
  std::vector<char> touched_;
};

// Tape-side handles for every model parameter, mirroring TentParams.
struct TapeParams {
  struct Head {
    GradientTape::ValueId wq, wk, wv;
  };
  struct Layer {
    std::vector<Head> heads;
    GradientTape::ValueId wo, ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    GradientTape::ValueId norm1_gain, norm1_bias, norm2_gain, norm2_bias;
  };
  std::vector<Layer> layers;
  GradientTape::ValueId out_w, out_b;
  // Ids in TentParams::for_each order, for gradient extraction.
  std::vector<GradientTape::ValueId> ordered;
};

TapeParams register_params(GradientTape& tape, const TentParams& params);

// Records the full forward pass on the tape and returns the prediction id.
// Produces bit-identical values to tent::forward on the same inputs.
GradientTape::ValueId tape_forward(GradientTape& tape, GradientTape::ValueId input,
                                   GradientTape::ValueId pos_encoding, const TapeParams& params,
                                   const ModelConfig& cfg);

}  // namespace tent
