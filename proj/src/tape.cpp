#include "tent/tape.hpp"

#include <cmath>
#include <unordered_map>
#include <utility>

namespace tent {

GradientTape::ValueId GradientTape::record(Tensor value, BackwardFn backward) {
  nodes_.push_back(Node{std::move(value), std::move(backward)});
  return nodes_.size() - 1;
}

GradientTape::ValueId GradientTape::leaf(Tensor value) {
  return record(std::move(value), BackwardFn{});
}

const Tensor& GradientTape::value(ValueId id) const {
  if (id >= nodes_.size()) {
    throw ValidationError("tape: value id " + std::to_string(id) + " is not on this tape");
  }
  return nodes_[id].value;
}

Tensor& GradientTape::adjoint(ValueId id) {
  if (!touched_[id]) {
    adjoints_[id] = Tensor::zeros(nodes_[id].value.shape());
    touched_[id] = 1;
  }
  return adjoints_[id];
}

std::vector<Tensor> GradientTape::gradients(ValueId loss, const std::vector<ValueId>& wrt) {
  if (loss >= nodes_.size()) {
    throw ValidationError("tape: loss id " + std::to_string(loss) + " is not on this tape");
  }
  if (nodes_[loss].value.rank() != 0) {
    throw ValidationError("tape: loss must be a rank-0 scalar, got shape " +
                          shape_to_string(nodes_[loss].value.shape()));
  }
  adjoints_.assign(nodes_.size(), Tensor());
  touched_.assign(nodes_.size(), 0);
  adjoint(loss)[0] = 1.0;

  for (std::size_t i = loss + 1; i-- > 0;) {
    if (touched_[i] && nodes_[i].backward) {
      nodes_[i].backward(*this, adjoints_[i]);
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (ValueId id : wrt) {
    if (id >= nodes_.size()) {
      throw ValidationError("tape: gradient requested for unknown id " + std::to_string(id));
    }
    out.push_back(touched_[id] ? adjoints_[id] : Tensor::zeros(nodes_[id].value.shape()));
  }
  return out;
}

GradientTape::ValueId GradientTape::add(ValueId a, ValueId b) {
  Tensor out = tent::add(value(a), value(b));
  return record(std::move(out), [a, b](GradientTape& t, const Tensor& g) {
    Tensor& da = t.adjoint(a);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    Tensor& db = t.adjoint(b);
    for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
  });
}

GradientTape::ValueId GradientTape::qkv_projection(ValueId x, ValueId w) {
  Tensor out = tent::qkv_projection(value(x), value(w));
  return record(std::move(out), [x, w](GradientTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const std::size_t ts = xv.extent(0), cs = xv.extent(1), fs = xv.extent(2);
    const std::size_t ds = wv.extent(2);
    Tensor& dx = t.adjoint(x);
    Tensor& dw = t.adjoint(w);
    for (std::size_t tt = 0; tt < ts; ++tt) {
      for (std::size_t c = 0; c < cs; ++c) {
        for (std::size_t f = 0; f < fs; ++f) {
          double acc = 0.0;
          for (std::size_t d = 0; d < ds; ++d) {
            acc += g(tt, c, d) * wv(c, f, d);
          }
          dx(tt, c, f) += acc;
        }
      }
    }
    for (std::size_t c = 0; c < cs; ++c) {
      for (std::size_t f = 0; f < fs; ++f) {
        for (std::size_t d = 0; d < ds; ++d) {
          double acc = 0.0;
          for (std::size_t tt = 0; tt < ts; ++tt) {
            acc += xv(tt, c, f) * g(tt, c, d);
          }
          dw(c, f, d) += acc;
        }
      }
    }
  });
}

GradientTape::ValueId GradientTape::attention_scores(ValueId query, ValueId key,
                                                     std::size_t head_dim) {
  const Tensor& q = value(query);
  const Tensor& k = value(key);
  if (q.rank() != 3 || k.rank() != 3 || q.extent(2) != k.extent(2)) {
    throw ShapeError("attention_scores: incompatible shapes " + shape_to_string(q.shape()) +
                     " and " + shape_to_string(k.shape()));
  }
  const std::size_t ts = q.extent(0), cs = q.extent(1);
  const std::size_t ts2 = k.extent(0), cs2 = k.extent(1), ds = q.extent(2);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  // Same accumulation order as reduce_scores(score_tensor(q, k), head_dim).
  Tensor out({ts, ts2, cs});
  for (std::size_t t = 0; t < ts; ++t) {
    for (std::size_t t2 = 0; t2 < ts2; ++t2) {
      for (std::size_t c = 0; c < cs; ++c) {
        double acc = 0.0;
        for (std::size_t c2 = 0; c2 < cs2; ++c2) {
          double dot = 0.0;
          for (std::size_t d = 0; d < ds; ++d) {
            dot += q(t, c, d) * k(t2, c2, d);
          }
          acc += dot;
        }
        out(t, t2, c) = acc * inv_sqrt;
      }
    }
  }

  return record(std::move(out), [query, key, inv_sqrt](GradientTape& t, const Tensor& g) {
    const Tensor& q = t.value(query);
    const Tensor& k = t.value(key);
    const std::size_t ts = q.extent(0), cs = q.extent(1);
    const std::size_t ts2 = k.extent(0), cs2 = k.extent(1), ds = q.extent(2);

    // key summed over its station axis; the score is linear in that sum.
    Tensor key_sum({ts2, ds});
    for (std::size_t t2 = 0; t2 < ts2; ++t2) {
      for (std::size_t d = 0; d < ds; ++d) {
        double acc = 0.0;
        for (std::size_t c2 = 0; c2 < cs2; ++c2) {
          acc += k(t2, c2, d);
        }
        key_sum(t2, d) = acc;
      }
    }
    Tensor& dq = t.adjoint(query);
    for (std::size_t tt = 0; tt < ts; ++tt) {
      for (std::size_t c = 0; c < cs; ++c) {
        for (std::size_t d = 0; d < ds; ++d) {
          double acc = 0.0;
          for (std::size_t t2 = 0; t2 < ts2; ++t2) {
            acc += g(tt, t2, c) * key_sum(t2, d);
          }
          dq(tt, c, d) += acc * inv_sqrt;
        }
      }
    }

    // dk[t2,c2,d] is independent of c2: every station pair shares it.
    Tensor gq({ts2, ds});
    for (std::size_t t2 = 0; t2 < ts2; ++t2) {
      for (std::size_t d = 0; d < ds; ++d) {
        double acc = 0.0;
        for (std::size_t tt = 0; tt < ts; ++tt) {
          for (std::size_t c = 0; c < cs; ++c) {
            acc += g(tt, t2, c) * q(tt, c, d);
          }
        }
        gq(t2, d) = acc * inv_sqrt;
      }
    }
    Tensor& dk = t.adjoint(key);
    for (std::size_t t2 = 0; t2 < ts2; ++t2) {
      for (std::size_t c2 = 0; c2 < cs2; ++c2) {
        for (std::size_t d = 0; d < ds; ++d) {
          dk(t2, c2, d) += gq(t2, d);
        }
      }
    }
  });
}

GradientTape::ValueId GradientTape::attention_weights(ValueId scores, SoftmaxAxis axis) {
  Tensor out = tent::attention_weights(value(scores), axis);
  const ValueId self = record(std::move(out), BackwardFn{});
  nodes_[self].backward = [scores, self, axis](GradientTape& t, const Tensor& g) {
    const Tensor& s = t.value(self);  // softmax output
    const std::size_t ts = s.extent(0), ts2 = s.extent(1), cs = s.extent(2);
    Tensor& dr = t.adjoint(scores);
    if (axis == SoftmaxAxis::kCity) {
      for (std::size_t tt = 0; tt < ts; ++tt) {
        for (std::size_t t2 = 0; t2 < ts2; ++t2) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cs; ++c) dot += g(tt, t2, c) * s(tt, t2, c);
          for (std::size_t c = 0; c < cs; ++c) {
            dr(tt, t2, c) += s(tt, t2, c) * (g(tt, t2, c) - dot);
          }
        }
      }
    } else {
      for (std::size_t tt = 0; tt < ts; ++tt) {
        for (std::size_t c = 0; c < cs; ++c) {
          double dot = 0.0;
          for (std::size_t t2 = 0; t2 < ts2; ++t2) dot += g(tt, t2, c) * s(tt, t2, c);
          for (std::size_t t2 = 0; t2 < ts2; ++t2) {
            dr(tt, t2, c) += s(tt, t2, c) * (g(tt, t2, c) - dot);
          }
        }
      }
    }
  };
  return self;
}

GradientTape::ValueId GradientTape::attention_output(ValueId weights, ValueId val) {
  Tensor out = tent::attention_output(value(weights), value(val));
  return record(std::move(out), [weights, val](GradientTape& t, const Tensor& g) {
    const Tensor& w = t.value(weights);
    const Tensor& v = t.value(val);
    const std::size_t ts = w.extent(0), ts2 = w.extent(1);
    const std::size_t cs = v.extent(1), ds = v.extent(2);
    Tensor& dw = t.adjoint(weights);
    Tensor& dv = t.adjoint(val);
    for (std::size_t tt = 0; tt < ts; ++tt) {
      for (std::size_t t2 = 0; t2 < ts2; ++t2) {
        for (std::size_t c = 0; c < cs; ++c) {
          double acc = 0.0;
          for (std::size_t d = 0; d < ds; ++d) {
            acc += g(tt, c, d) * v(t2, c, d);
          }
          dw(tt, t2, c) += acc;
        }
      }
    }
    for (std::size_t t2 = 0; t2 < ts2; ++t2) {
      for (std::size_t c = 0; c < cs; ++c) {
        for (std::size_t d = 0; d < ds; ++d) {
          double acc = 0.0;
          for (std::size_t tt = 0; tt < ts; ++tt) {
            acc += w(tt, t2, c) * g(tt, c, d);
          }
          dv(t2, c, d) += acc;
        }
      }
    }
  });
}

GradientTape::ValueId GradientTape::concat_last(const std::vector<ValueId>& parts) {
  std::vector<Tensor> tensors;
  tensors.reserve(parts.size());
  for (ValueId id : parts) tensors.push_back(value(id));
  Tensor out = tent::concat_last(tensors);
  return record(std::move(out), [parts](GradientTape& t, const Tensor& g) {
    const std::size_t total = g.shape().back();
    const std::size_t rows = g.size() / total;
    std::size_t offset = 0;
    for (ValueId id : parts) {
      const std::size_t w = t.value(id).shape().back();
      Tensor& dp = t.adjoint(id);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) {
          dp[r * w + j] += g[r * total + offset + j];
        }
      }
      offset += w;
    }
  });
}

GradientTape::ValueId GradientTape::time_slice_matmul(ValueId a, ValueId w) {
  Tensor out = tent::time_slice_matmul(value(a), value(w));
  return record(std::move(out), [a, w](GradientTape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& wv = t.value(w);
    const std::size_t ts = av.extent(0), cs = av.extent(1), js = av.extent(2);
    const std::size_t fs = wv.extent(2);
    Tensor& da = t.adjoint(a);
    Tensor& dw = t.adjoint(w);
    for (std::size_t tt = 0; tt < ts; ++tt) {
      for (std::size_t c = 0; c < cs; ++c) {
        for (std::size_t j = 0; j < js; ++j) {
          double acc = 0.0;
          for (std::size_t f = 0; f < fs; ++f) {
            acc += g(tt, c, f) * wv(tt, j, f);
          }
          da(tt, c, j) += acc;
        }
      }
    }
    for (std::size_t tt = 0; tt < ts; ++tt) {
      for (std::size_t j = 0; j < js; ++j) {
        for (std::size_t f = 0; f < fs; ++f) {
          double acc = 0.0;
          for (std::size_t c = 0; c < cs; ++c) {
            acc += av(tt, c, j) * g(tt, c, f);
          }
          dw(tt, j, f) += acc;
        }
      }
    }
  });
}

GradientTape::ValueId GradientTape::slice_linear(ValueId x, ValueId w, ValueId b) {
  Tensor out = tent::slice_linear(value(x), value(w), value(b));
  return record(std::move(out), [x, w, b](GradientTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const std::size_t ts = xv.extent(0), cs = xv.extent(1), fs = xv.extent(2);
    const std::size_t js = wv.extent(1);
    Tensor& dx = t.adjoint(x);
    Tensor& dw = t.adjoint(w);
    Tensor& db = t.adjoint(b);
    for (std::size_t tt = 0; tt < ts; ++tt) {
      for (std::size_t c = 0; c < cs; ++c) {
        for (std::size_t f = 0; f < fs; ++f) {
          double acc = 0.0;
          for (std::size_t j = 0; j < js; ++j) {
            acc += g(tt, c, j) * wv(f, j);
          }
          dx(tt, c, f) += acc;
        }
      }
    }
    for (std::size_t f = 0; f < fs; ++f) {
      for (std::size_t j = 0; j < js; ++j) {
        double acc = 0.0;
        for (std::size_t tt = 0; tt < ts; ++tt) {
          for (std::size_t c = 0; c < cs; ++c) {
            acc += xv(tt, c, f) * g(tt, c, j);
          }
        }
        dw(f, j) += acc;
      }
    }
    for (std::size_t j = 0; j < js; ++j) {
      double acc = 0.0;
      for (std::size_t tt = 0; tt < ts; ++tt) {
        for (std::size_t c = 0; c < cs; ++c) {
          acc += g(tt, c, j);
        }
      }
      db(j) += acc;
    }
  });
}

GradientTape::ValueId GradientTape::relu(ValueId x) {
  Tensor out = tent::relu(value(x));
  return record(std::move(out), [x](GradientTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    Tensor& dx = t.adjoint(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += g[i];
    }
  });
}

GradientTape::ValueId GradientTape::layer_norm(ValueId x, ValueId gain, ValueId bias,
                                               double epsilon) {
  Tensor out = tent::layer_norm(value(x), value(gain), value(bias), epsilon);
  return record(std::move(out), [x, gain, bias, epsilon](GradientTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gain);
    const std::size_t ts = xv.extent(0), cs = xv.extent(1), fs = xv.extent(2);
    const double inv_f = 1.0 / static_cast<double>(fs);
    Tensor& dx = t.adjoint(x);
    Tensor& dgain = t.adjoint(gain);
    Tensor& dbias = t.adjoint(bias);
    std::vector<double> xhat(fs), dxhat(fs);
    for (std::size_t tt = 0; tt < ts; ++tt) {
      for (std::size_t c = 0; c < cs; ++c) {
        double mean = 0.0;
        for (std::size_t f = 0; f < fs; ++f) mean += xv(tt, c, f);
        mean *= inv_f;
        double var = 0.0;
        for (std::size_t f = 0; f < fs; ++f) {
          const double d = xv(tt, c, f) - mean;
          var += d * d;
        }
        var *= inv_f;
        const double inv_std = 1.0 / std::sqrt(var + epsilon);

        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t f = 0; f < fs; ++f) {
          xhat[f] = (xv(tt, c, f) - mean) * inv_std;
          dxhat[f] = g(tt, c, f) * gv(f);
          mean_dxhat += dxhat[f];
          mean_dxhat_xhat += dxhat[f] * xhat[f];
        }
        mean_dxhat *= inv_f;
        mean_dxhat_xhat *= inv_f;
        for (std::size_t f = 0; f < fs; ++f) {
          dx(tt, c, f) += inv_std * (dxhat[f] - mean_dxhat - xhat[f] * mean_dxhat_xhat);
          dgain(f) += g(tt, c, f) * xhat[f];
          dbias(f) += g(tt, c, f);
        }
      }
    }
  });
}

GradientTape::ValueId GradientTape::flatten(ValueId x) {
  const Tensor& xv = value(x);
  Tensor out = reshape(xv, {xv.size()});
  return record(std::move(out), [x](GradientTape& t, const Tensor& g) {
    Tensor& dx = t.adjoint(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

GradientTape::ValueId GradientTape::linear_map(ValueId x, ValueId w, ValueId b) {
  Tensor out = tent::linear_map(value(x), value(w), value(b));
  return record(std::move(out), [x, w, b](GradientTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const std::size_t n = xv.extent(0), m = wv.extent(1);
    Tensor& dx = t.adjoint(x);
    Tensor& dw = t.adjoint(w);
    Tensor& db = t.adjoint(b);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        acc += wv(i, j) * g(j);
      }
      dx(i) += acc;
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        dw(i, j) += xv(i) * g(j);
      }
    }
    for (std::size_t j = 0; j < m; ++j) db(j) += g(j);
  });
}

GradientTape::ValueId GradientTape::mse_loss(ValueId pred, Tensor target) {
  const Tensor& p = value(pred);
  if (p.rank() != 1 || target.rank() != 1 || p.size() != target.size()) {
    throw ShapeError("mse_loss: shape mismatch, " + shape_to_string(p.shape()) + " vs " +
                     shape_to_string(target.shape()));
  }
  if (p.size() == 0) {
    throw ShapeError("mse_loss: empty input");
  }
  const std::size_t n = p.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = p[i] - target[i];
    acc += r * r;
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  return record(std::move(out),
                [pred, target = std::move(target)](GradientTape& t, const Tensor& g) {
                  const Tensor& p = t.value(pred);
                  const std::size_t n = p.size();
                  const double scale = 2.0 * g[0] / static_cast<double>(n);
                  Tensor& dp = t.adjoint(pred);
                  for (std::size_t i = 0; i < n; ++i) {
                    dp(i) += scale * (p[i] - target[i]);
                  }
                });
}

GradientTape::ValueId GradientTape::mean_scalars(const std::vector<ValueId>& scalars) {
  if (scalars.empty()) {
    throw ValidationError("mean_scalars: no values given");
  }
  double acc = 0.0;
  for (ValueId id : scalars) {
    const Tensor& v = value(id);
    if (v.rank() != 0) {
      throw ShapeError("mean_scalars: expected rank-0 values, got " +
                       shape_to_string(v.shape()));
    }
    acc += v[0];
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  Tensor out = Tensor::scalar(acc * inv);
  return record(std::move(out), [scalars, inv](GradientTape& t, const Tensor& g) {
    const double share = g[0] * inv;
    for (ValueId id : scalars) {
      t.adjoint(id)[0] += share;
    }
  });
}

TapeParams register_params(GradientTape& tape, const TentParams& params) {
  TapeParams out;
  std::unordered_map<std::string, GradientTape::ValueId> ids;
  params.for_each([&](const std::string& name, const Tensor& t) {
    const GradientTape::ValueId id = tape.leaf(t);
    ids.emplace(name, id);
    out.ordered.push_back(id);
  });
  out.layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const std::string base = "layer." + std::to_string(l) + ".";
    TapeParams::Layer& layer = out.layers[l];
    layer.heads.resize(params.layers[l].heads.size());
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const std::string hb = base + "head." + std::to_string(h) + ".";
      layer.heads[h] = {ids.at(hb + "wq"), ids.at(hb + "wk"), ids.at(hb + "wv")};
    }
    layer.wo = ids.at(base + "wo");
    layer.ffn_w1 = ids.at(base + "ffn.w1");
    layer.ffn_b1 = ids.at(base + "ffn.b1");
    layer.ffn_w2 = ids.at(base + "ffn.w2");
    layer.ffn_b2 = ids.at(base + "ffn.b2");
    layer.norm1_gain = ids.at(base + "norm1.gain");
    layer.norm1_bias = ids.at(base + "norm1.bias");
    layer.norm2_gain = ids.at(base + "norm2.gain");
    layer.norm2_bias = ids.at(base + "norm2.bias");
  }
  out.out_w = ids.at("out.w");
  out.out_b = ids.at("out.b");
  return out;
}

GradientTape::ValueId tape_forward(GradientTape& tape, GradientTape::ValueId input,
                                   GradientTape::ValueId pos_encoding, const TapeParams& params,
                                   const ModelConfig& cfg) {
  GradientTape::ValueId h = tape.add(input, pos_encoding);
  for (const TapeParams::Layer& layer : params.layers) {
    std::vector<GradientTape::ValueId> contexts;
    contexts.reserve(layer.heads.size());
    for (const TapeParams::Head& head : layer.heads) {
      const auto q = tape.qkv_projection(h, head.wq);
      const auto k = tape.qkv_projection(h, head.wk);
      const auto v = tape.qkv_projection(h, head.wv);
      const auto scores = tape.attention_scores(q, k, cfg.head_dim());
      const auto weights = tape.attention_weights(scores, cfg.softmax_axis);
      contexts.push_back(tape.attention_output(weights, v));
    }
    const auto mh = tape.time_slice_matmul(tape.concat_last(contexts), layer.wo);
    const auto u =
        tape.layer_norm(tape.add(h, mh), layer.norm1_gain, layer.norm1_bias, kNormEpsilon);
    auto f = tape.relu(tape.slice_linear(u, layer.ffn_w1, layer.ffn_b1));
    f = tape.slice_linear(f, layer.ffn_w2, layer.ffn_b2);
    if (cfg.ffn_relu_both) f = tape.relu(f);
    h = tape.layer_norm(tape.add(u, f), layer.norm2_gain, layer.norm2_bias, kNormEpsilon);
  }
  return tape.linear_map(tape.flatten(h), params.out_w, params.out_b);
}

}  // namespace tent
