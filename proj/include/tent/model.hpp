#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tent/rng.hpp"
#include "tent/tensor.hpp"

namespace tent {

inline constexpr double kNormEpsilon = 1e-6;

// Axis the attention softmax normalizes over. kCity normalizes the score
// slice across stations for each (query step, key step) pair; kKeyTime
// normalizes across key steps for each (query step, station) pair, which is
// the axis classical scaled dot-product attention uses.
enum class SoftmaxAxis { kCity, kKeyTime };

std::string to_string(SoftmaxAxis axis);
SoftmaxAxis softmax_axis_from_string(const std::string& name);

// Static shape and width configuration of one model instance.
struct ModelConfig {
  std::size_t time_steps = 16;  // input window length
  std::size_t stations = 30;
  std::size_t features = 11;
  std::size_t heads = 8;
  std::size_t key_dim = 16;  // total attention width, split across heads
  std::size_t ffn_hidden = 32;
  std::size_t layers = 1;
  SoftmaxAxis softmax_axis = SoftmaxAxis::kCity;
  std::size_t outputs = 1;
  bool ffn_relu_both = false;  // apply ReLU after the second FFN linear too

  std::size_t head_dim() const { return key_dim / heads; }
  std::size_t flat_size() const { return time_steps * stations * features; }
  void validate() const;
};

// Projection weights of one attention head; each is stations x features x head_dim.
struct HeadParams {
  Tensor wq, wk, wv;
};

// Weights of one encoder layer.
struct LayerParams {
  std::vector<HeadParams> heads;
  Tensor wo;  // time_steps x (heads*head_dim) x features
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor norm1_gain, norm1_bias, norm2_gain, norm2_bias;
};

// All learnable weights of one model.
struct TentParams {
  std::vector<LayerParams> layers;
  Tensor out_w;  // (time_steps*stations*features) x outputs
  Tensor out_b;  // outputs

  // Visits every tensor in canonical order with a stable name. The order
  // defines weight initialization, checkpoint layout, and gradient keying.
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  std::size_t tensor_count() const;

 private:
  template <typename Params, typename Fn>
  static void visit(Params& p, Fn& fn) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      auto& layer = p.layers[l];
      const std::string base = "layer." + std::to_string(l) + ".";
      for (std::size_t h = 0; h < layer.heads.size(); ++h) {
        const std::string hb = base + "head." + std::to_string(h) + ".";
        fn(hb + "wq", layer.heads[h].wq);
        fn(hb + "wk", layer.heads[h].wk);
        fn(hb + "wv", layer.heads[h].wv);
      }
      fn(base + "wo", layer.wo);
      fn(base + "ffn.w1", layer.ffn_w1);
      fn(base + "ffn.b1", layer.ffn_b1);
      fn(base + "ffn.w2", layer.ffn_w2);
      fn(base + "ffn.b2", layer.ffn_b2);
      fn(base + "norm1.gain", layer.norm1_gain);
      fn(base + "norm1.bias", layer.norm1_bias);
      fn(base + "norm2.gain", layer.norm2_gain);
      fn(base + "norm2.bias", layer.norm2_bias);
    }
    fn(std::string("out.w"), p.out_w);
    fn(std::string("out.b"), p.out_b);
  }
};

// Zero-valued parameters with the shapes the config implies.
TentParams shaped_params(const ModelConfig& cfg);

// Glorot-uniform weights, zero biases, unit norm gains. Draw order follows
// TentParams::for_each, so a seed fully determines the result.
TentParams init_params(const ModelConfig& cfg, Rng& rng);

// Intermediate tensors of one attention head, kept for inspection/export.
struct HeadActivations {
  Tensor query, key, value;  // T x C x D
  Tensor pair_scores;        // T x T' x C x C', one score per station pair
  Tensor scores;             // T x T' x C, station-pair axis reduced and scaled
  Tensor weights;            // T x T' x C, softmax-normalized scores
  Tensor context;            // T x C x D, attention-weighted values
};

// ---- forward operations ----

// Sinusoidal encoding over (time, station), replicated along the feature
// axis. Even station indices take the sine form, odd ones the cosine form.
Tensor positional_encoding(std::size_t time_steps, std::size_t stations, std::size_t features);

// out[t,c,:] = x[t,c,:] * w[c,:,:]; x is T x C x F, w is C x F x D.
Tensor qkv_projection(const Tensor& x, const Tensor& w);

// pair_scores[t,t',c,c'] = sum_d q[t,c,d] * k[t',c',d].
Tensor score_tensor(const Tensor& query, const Tensor& key);

// scores[t,t',c] = (1/sqrt(head_dim)) * sum_c' pair_scores[t,t',c,c'].
Tensor reduce_scores(const Tensor& pair_scores, std::size_t head_dim);

// Softmax over the configured axis; see SoftmaxAxis.
Tensor attention_weights(const Tensor& scores, SoftmaxAxis axis);

// context[t,c,d] = sum_t' weights[t,t',c] * value[t',c,d].
Tensor attention_output(const Tensor& weights, const Tensor& value);

// y[t,c,f] = sum_j a[t,c,j] * w[t,j,f]; per-time-step linear map.
Tensor time_slice_matmul(const Tensor& a, const Tensor& w);

// Normalizes each (t,c) slice over the feature axis, then applies gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double epsilon = kNormEpsilon);

// out[t,c,:] = x[t,c,:] * w + b applied to every (t,c) slice; w is F x J.
Tensor slice_linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor relu(const Tensor& x);

// y = x * w + b for a rank-1 x; w is N x M.
Tensor linear_map(const Tensor& x, const Tensor& w, const Tensor& b);

// Per-(t,c) feed-forward: linear, ReLU, linear (optional second ReLU).
Tensor ffn(const Tensor& x, const LayerParams& layer, bool relu_both);

struct MultiHeadResult {
  Tensor output;  // T x C x F
  std::vector<HeadActivations> heads;
};

// Runs every head, concatenates the contexts along the last axis, and maps
// each time slice back to feature width.
MultiHeadResult multi_head(const Tensor& x, const LayerParams& layer, const ModelConfig& cfg);

// Attention sublayer and feed-forward sublayer, each wrapped in a residual
// connection and layer normalization.
Tensor encoder_block(const Tensor& x, const LayerParams& layer, const ModelConfig& cfg,
                     std::vector<HeadActivations>* heads_out = nullptr);

struct ForwardResult {
  Tensor prediction;                                    // outputs
  std::vector<std::vector<HeadActivations>> attention;  // [layer][head]
};

// Full forward pass on one window: positional encoding, encoder layers,
// flatten, linear output head.
ForwardResult forward(const Tensor& x, const TentParams& params, const ModelConfig& cfg);

// Forward pass without keeping per-head activations.
Tensor forward_prediction(const Tensor& x, const TentParams& params, const ModelConfig& cfg);

// Accepts a single window (rank 3) or a batch with a leading axis (rank 4);
// returns a batch x outputs matrix.
Tensor predict(const Tensor& x, const TentParams& params, const ModelConfig& cfg);

}  // namespace tent
