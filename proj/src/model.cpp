#include "tent/model.hpp"

#include <cmath>
#include <utility>

namespace tent {

std::string to_string(SoftmaxAxis axis) {
  return axis == SoftmaxAxis::kCity ? "city" : "key_time";
}

SoftmaxAxis softmax_axis_from_string(const std::string& name) {
  if (name == "city") return SoftmaxAxis::kCity;
  if (name == "key_time") return SoftmaxAxis::kKeyTime;
  throw ValidationError("unknown softmax_axis '" + name + "' (expected city or key_time)");
}

void ModelConfig::validate() const {
  if (time_steps == 0 || stations == 0 || features == 0 || heads == 0 || key_dim == 0 ||
      ffn_hidden == 0 || layers == 0 || outputs == 0) {
    throw ValidationError("model config extents must all be >= 1");
  }
  if (key_dim % heads != 0) {
    throw ValidationError("key_dim " + std::to_string(key_dim) +
                          " is not divisible by heads " + std::to_string(heads));
  }
}

std::size_t TentParams::tensor_count() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const Tensor&) { ++n; });
  return n;
}

TentParams shaped_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t t = cfg.time_steps, c = cfg.stations, f = cfg.features;
  const std::size_t d = cfg.head_dim(), cat = cfg.heads * d;
  TentParams p;
  p.layers.resize(cfg.layers);
  for (LayerParams& layer : p.layers) {
    layer.heads.resize(cfg.heads);
    for (HeadParams& head : layer.heads) {
      head.wq = Tensor({c, f, d});
      head.wk = Tensor({c, f, d});
      head.wv = Tensor({c, f, d});
    }
    layer.wo = Tensor({t, cat, f});
    layer.ffn_w1 = Tensor({f, cfg.ffn_hidden});
    layer.ffn_b1 = Tensor({cfg.ffn_hidden});
    layer.ffn_w2 = Tensor({cfg.ffn_hidden, f});
    layer.ffn_b2 = Tensor({f});
    layer.norm1_gain = Tensor({f});
    layer.norm1_bias = Tensor({f});
    layer.norm2_gain = Tensor({f});
    layer.norm2_bias = Tensor({f});
  }
  p.out_w = Tensor({cfg.flat_size(), cfg.outputs});
  p.out_b = Tensor({cfg.outputs});
  return p;
}

namespace {

void fill_glorot(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.values()) {
    v = rng.uniform(-limit, limit);
  }
}

}  // namespace

TentParams init_params(const ModelConfig& cfg, Rng& rng) {
  TentParams p = shaped_params(cfg);
  const std::size_t f = cfg.features, d = cfg.head_dim(), cat = cfg.heads * d;
  for (LayerParams& layer : p.layers) {
    for (HeadParams& head : layer.heads) {
      fill_glorot(head.wq, f, d, rng);
      fill_glorot(head.wk, f, d, rng);
      fill_glorot(head.wv, f, d, rng);
    }
    fill_glorot(layer.wo, cat, f, rng);
    fill_glorot(layer.ffn_w1, f, cfg.ffn_hidden, rng);
    fill_glorot(layer.ffn_w2, cfg.ffn_hidden, f, rng);
    for (double& v : layer.norm1_gain.values()) v = 1.0;
    for (double& v : layer.norm2_gain.values()) v = 1.0;
  }
  fill_glorot(p.out_w, cfg.flat_size(), cfg.outputs, rng);
  return p;
}

Tensor positional_encoding(std::size_t time_steps, std::size_t stations, std::size_t features) {
  if (time_steps == 0 || stations == 0 || features == 0) {
    throw ValidationError("positional_encoding extents must be >= 1");
  }
  Tensor out({time_steps, stations, features});
  for (std::size_t t = 0; t < time_steps; ++t) {
    for (std::size_t c = 0; c < stations; ++c) {
      const std::size_t i = c / 2;
      const double exponent = 2.0 * static_cast<double>(i) / static_cast<double>(stations);
      const double angle = static_cast<double>(t) / std::pow(10000.0, exponent);
      const double v = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
      for (std::size_t f = 0; f < features; ++f) {
        out(t, c, f) = v;
      }
    }
  }
  return out;
}

Tensor qkv_projection(const Tensor& x, const Tensor& w) {
  if (x.rank() != 3 || w.rank() != 3 || x.extent(1) != w.extent(0) ||
      x.extent(2) != w.extent(1)) {
    throw ShapeError("qkv_projection: incompatible shapes " + shape_to_string(x.shape()) +
                     " and " + shape_to_string(w.shape()));
  }
  const std::size_t ts = x.extent(0), cs = x.extent(1), fs = x.extent(2), ds = w.extent(2);
  Tensor out({ts, cs, ds});
  for (std::size_t t = 0; t < ts; ++t) {
    for (std::size_t c = 0; c < cs; ++c) {
      for (std::size_t d = 0; d < ds; ++d) {
        double acc = 0.0;
        for (std::size_t f = 0; f < fs; ++f) {
          acc += x(t, c, f) * w(c, f, d);
        }
        out(t, c, d) = acc;
      }
    }
  }
  return out;
}

Tensor score_tensor(const Tensor& query, const Tensor& key) {
  if (query.rank() != 3 || key.rank() != 3 || query.extent(2) != key.extent(2)) {
    throw ShapeError("score_tensor: incompatible shapes " + shape_to_string(query.shape()) +
                     " and " + shape_to_string(key.shape()));
  }
  const std::size_t ts = query.extent(0), cs = query.extent(1);
  const std::size_t ts2 = key.extent(0), cs2 = key.extent(1), ds = query.extent(2);
  Tensor out({ts, ts2, cs, cs2});
  for (std::size_t t = 0; t < ts; ++t) {
    for (std::size_t t2 = 0; t2 < ts2; ++t2) {
      for (std::size_t c = 0; c < cs; ++c) {
        for (std::size_t c2 = 0; c2 < cs2; ++c2) {
          double acc = 0.0;
          for (std::size_t d = 0; d < ds; ++d) {
            acc += query(t, c, d) * key(t2, c2, d);
          }
          out(t, t2, c, c2) = acc;
        }
      }
    }
  }
  return out;
}

Tensor reduce_scores(const Tensor& pair_scores, std::size_t head_dim) {
  if (pair_scores.rank() != 4) {
    throw ShapeError("reduce_scores: expected rank-4 tensor, got " +
                     shape_to_string(pair_scores.shape()));
  }
  if (head_dim == 0) {
    throw ValidationError("reduce_scores: head_dim must be >= 1");
  }
  const std::size_t ts = pair_scores.extent(0), ts2 = pair_scores.extent(1);
  const std::size_t cs = pair_scores.extent(2), cs2 = pair_scores.extent(3);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Tensor out({ts, ts2, cs});
  for (std::size_t t = 0; t < ts; ++t) {
    for (std::size_t t2 = 0; t2 < ts2; ++t2) {
      for (std::size_t c = 0; c < cs; ++c) {
        double acc = 0.0;
        for (std::size_t c2 = 0; c2 < cs2; ++c2) {
          acc += pair_scores(t, t2, c, c2);
        }
        out(t, t2, c) = acc * inv_sqrt;
      }
    }
  }
  return out;
}

Tensor attention_weights(const Tensor& scores, SoftmaxAxis axis) {
  if (scores.rank() != 3) {
    throw ShapeError("attention_weights: expected rank-3 tensor, got " +
                     shape_to_string(scores.shape()));
  }
  const std::size_t ts = scores.extent(0), ts2 = scores.extent(1), cs = scores.extent(2);
  Tensor out(scores.shape());
  if (axis == SoftmaxAxis::kCity) {
    // Station lanes are contiguous.
    for (std::size_t t = 0; t < ts; ++t) {
      for (std::size_t t2 = 0; t2 < ts2; ++t2) {
        const std::size_t base = (t * ts2 + t2) * cs;
        softmax_lane(scores.data() + base, out.data() + base, cs);
      }
    }
  } else {
    std::vector<double> lane(ts2), norm(ts2);
    for (std::size_t t = 0; t < ts; ++t) {
      for (std::size_t c = 0; c < cs; ++c) {
        for (std::size_t t2 = 0; t2 < ts2; ++t2) lane[t2] = scores(t, t2, c);
        softmax_lane(lane.data(), norm.data(), ts2);
        for (std::size_t t2 = 0; t2 < ts2; ++t2) out(t, t2, c) = norm[t2];
      }
    }
  }
  return out;
}

Tensor attention_output(const Tensor& weights, const Tensor& value) {
  if (weights.rank() != 3 || value.rank() != 3 || weights.extent(1) != value.extent(0) ||
      weights.extent(2) != value.extent(1)) {
    throw ShapeError("attention_output: incompatible shapes " +
                     shape_to_string(weights.shape()) + " and " +
                     shape_to_string(value.shape()));
  }
  const std::size_t ts = weights.extent(0), ts2 = weights.extent(1);
  const std::size_t cs = value.extent(1), ds = value.extent(2);
  Tensor out({ts, cs, ds});
  for (std::size_t t = 0; t < ts; ++t) {
    for (std::size_t t2 = 0; t2 < ts2; ++t2) {
      for (std::size_t c = 0; c < cs; ++c) {
        const double wv = weights(t, t2, c);
        for (std::size_t d = 0; d < ds; ++d) {
          out(t, c, d) += wv * value(t2, c, d);
        }
      }
    }
  }
  return out;
}

Tensor time_slice_matmul(const Tensor& a, const Tensor& w) {
  if (a.rank() != 3 || w.rank() != 3 || a.extent(0) != w.extent(0) ||
      a.extent(2) != w.extent(1)) {
    throw ShapeError("time_slice_matmul: incompatible shapes " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(w.shape()));
  }
  const std::size_t ts = a.extent(0), cs = a.extent(1), js = a.extent(2), fs = w.extent(2);
  Tensor out({ts, cs, fs});
  for (std::size_t t = 0; t < ts; ++t) {
    for (std::size_t c = 0; c < cs; ++c) {
      for (std::size_t f = 0; f < fs; ++f) {
        double acc = 0.0;
        for (std::size_t j = 0; j < js; ++j) {
          acc += a(t, c, j) * w(t, j, f);
        }
        out(t, c, f) = acc;
      }
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  if (x.rank() != 3 || gain.rank() != 1 || bias.rank() != 1 ||
      gain.extent(0) != x.extent(2) || bias.extent(0) != x.extent(2)) {
    throw ShapeError("layer_norm: incompatible shapes " + shape_to_string(x.shape()) + ", " +
                     shape_to_string(gain.shape()) + ", " + shape_to_string(bias.shape()));
  }
  const std::size_t ts = x.extent(0), cs = x.extent(1), fs = x.extent(2);
  const double inv_f = 1.0 / static_cast<double>(fs);
  Tensor out(x.shape());
  for (std::size_t t = 0; t < ts; ++t) {
    for (std::size_t c = 0; c < cs; ++c) {
      double mean = 0.0;
      for (std::size_t f = 0; f < fs; ++f) mean += x(t, c, f);
      mean *= inv_f;
      double var = 0.0;
      for (std::size_t f = 0; f < fs; ++f) {
        const double d = x(t, c, f) - mean;
        var += d * d;
      }
      var *= inv_f;
      const double inv_std = 1.0 / std::sqrt(var + epsilon);
      for (std::size_t f = 0; f < fs; ++f) {
        out(t, c, f) = gain(f) * ((x(t, c, f) - mean) * inv_std) + bias(f);
      }
    }
  }
  return out;
}

Tensor slice_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3 || w.rank() != 2 || b.rank() != 1 || w.extent(0) != x.extent(2) ||
      b.extent(0) != w.extent(1)) {
    throw ShapeError("slice_linear: incompatible shapes " + shape_to_string(x.shape()) + ", " +
                     shape_to_string(w.shape()) + ", " + shape_to_string(b.shape()));
  }
  const std::size_t ts = x.extent(0), cs = x.extent(1), fs = x.extent(2), js = w.extent(1);
  Tensor out({ts, cs, js});
  for (std::size_t t = 0; t < ts; ++t) {
    for (std::size_t c = 0; c < cs; ++c) {
      for (std::size_t j = 0; j < js; ++j) {
        double acc = b(j);
        for (std::size_t f = 0; f < fs; ++f) {
          acc += x(t, c, f) * w(f, j);
        }
        out(t, c, j) = acc;
      }
    }
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] > 0.0 ? x[i] : 0.0;
  }
  return out;
}

Tensor ffn(const Tensor& x, const LayerParams& layer, bool relu_both) {
  Tensor hidden = relu(slice_linear(x, layer.ffn_w1, layer.ffn_b1));
  Tensor out = slice_linear(hidden, layer.ffn_w2, layer.ffn_b2);
  if (relu_both) out = relu(out);
  return out;
}

MultiHeadResult multi_head(const Tensor& x, const LayerParams& layer, const ModelConfig& cfg) {
  MultiHeadResult result;
  result.heads.reserve(layer.heads.size());
  std::vector<Tensor> contexts;
  contexts.reserve(layer.heads.size());
  for (const HeadParams& head : layer.heads) {
    HeadActivations act;
    act.query = qkv_projection(x, head.wq);
    act.key = qkv_projection(x, head.wk);
    act.value = qkv_projection(x, head.wv);
    act.pair_scores = score_tensor(act.query, act.key);
    act.scores = reduce_scores(act.pair_scores, cfg.head_dim());
    act.weights = attention_weights(act.scores, cfg.softmax_axis);
    act.context = attention_output(act.weights, act.value);
    contexts.push_back(act.context);
    result.heads.push_back(std::move(act));
  }
  result.output = time_slice_matmul(concat_last(contexts), layer.wo);
  return result;
}

Tensor encoder_block(const Tensor& x, const LayerParams& layer, const ModelConfig& cfg,
                     std::vector<HeadActivations>* heads_out) {
  MultiHeadResult mh = multi_head(x, layer, cfg);
  if (heads_out != nullptr) {
    *heads_out = std::move(mh.heads);
  }
  Tensor u = layer_norm(add(x, mh.output), layer.norm1_gain, layer.norm1_bias);
  Tensor f = ffn(u, layer, cfg.ffn_relu_both);
  return layer_norm(add(u, f), layer.norm2_gain, layer.norm2_bias);
}

Tensor linear_map(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 1 || w.rank() != 2 || b.rank() != 1 || w.extent(0) != x.extent(0) ||
      b.extent(0) != w.extent(1)) {
    throw ShapeError("linear_map: incompatible shapes " + shape_to_string(x.shape()) + ", " +
                     shape_to_string(w.shape()) + ", " + shape_to_string(b.shape()));
  }
  const std::size_t n = x.extent(0), m = w.extent(1);
  Tensor out({m});
  for (std::size_t j = 0; j < m; ++j) {
    double acc = b(j);
    for (std::size_t i = 0; i < n; ++i) {
      acc += x[i] * w(i, j);
    }
    out(j) = acc;
  }
  return out;
}

namespace {

ForwardResult forward_impl(const Tensor& x, const TentParams& params, const ModelConfig& cfg,
                           bool keep_attention) {
  if (x.rank() != 3 || x.extent(0) != cfg.time_steps || x.extent(1) != cfg.stations ||
      x.extent(2) != cfg.features) {
    throw ShapeError("forward: input shape " + shape_to_string(x.shape()) +
                     " does not match configured " +
                     shape_to_string({cfg.time_steps, cfg.stations, cfg.features}));
  }
  ForwardResult result;
  Tensor h = add(x, positional_encoding(cfg.time_steps, cfg.stations, cfg.features));
  for (const LayerParams& layer : params.layers) {
    if (keep_attention) {
      std::vector<HeadActivations> heads;
      h = encoder_block(h, layer, cfg, &heads);
      result.attention.push_back(std::move(heads));
    } else {
      h = encoder_block(h, layer, cfg);
    }
  }
  result.prediction = linear_map(reshape(h, {cfg.flat_size()}), params.out_w, params.out_b);
  return result;
}

}  // namespace

ForwardResult forward(const Tensor& x, const TentParams& params, const ModelConfig& cfg) {
  return forward_impl(x, params, cfg, true);
}

Tensor forward_prediction(const Tensor& x, const TentParams& params, const ModelConfig& cfg) {
  return forward_impl(x, params, cfg, false).prediction;
}

Tensor predict(const Tensor& x, const TentParams& params, const ModelConfig& cfg) {
  if (x.rank() == 3) {
    Tensor pred = forward_prediction(x, params, cfg);
    return reshape(pred, {1, cfg.outputs});
  }
  if (x.rank() != 4) {
    throw ShapeError("predict: expected rank-3 window or rank-4 batch, got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t batch = x.extent(0);
  const std::size_t window = cfg.time_steps * cfg.stations * cfg.features;
  Tensor out({batch, cfg.outputs});
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor sample({cfg.time_steps, cfg.stations, cfg.features},
                  std::vector<double>(x.data() + b * window, x.data() + (b + 1) * window));
    Tensor pred = forward_prediction(sample, params, cfg);
    for (std::size_t j = 0; j < cfg.outputs; ++j) {
      out(b, j) = pred(j);
    }
  }
  return out;
}

}  // namespace tent
