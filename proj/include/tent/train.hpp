#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "tent/data.hpp"
#include "tent/model.hpp"
#include "tent/tensor.hpp"

namespace tent {

// Optimizer and schedule settings.
struct TrainConfig {
  std::size_t max_epochs = 300;
  std::size_t patience = 20;
  std::size_t batch_size = 96;
  std::size_t warmup_steps = 4000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t schedule_dim = 16;  // width term of the warmup schedule
  std::uint64_t seed = 42;

  void validate() const;
};

// Sum of squared residuals divided by length.
double mse_loss(std::span<const double> pred, std::span<const double> target);

// Warmup-then-decay schedule:
// lr = schedule_dim^-0.5 * min(step^-0.5, step * warmup_steps^-1.5).
// step counts from 1.
double lr_schedule(std::size_t step, const TrainConfig& cfg);

// Adam moment estimates, one pair per parameter tensor in canonical order.
struct OptimizerState {
  struct Moments {
    Tensor first, second;
  };
  std::vector<Moments> moments;
  std::size_t step = 0;

  static OptimizerState init(const TentParams& params);
};

// One bias-corrected Adam update. grads must follow TentParams::for_each
// order, as produced by GradientTape::gradients over TapeParams::ordered.
void adam_step(TentParams& params, const std::vector<Tensor>& grads, OptimizerState& state,
               double lr, const TrainConfig& cfg);

// Stops after `patience` consecutive epochs without strict improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  // Returns true when the value strictly improves on the best so far.
  bool observe(double val_loss);
  bool should_stop() const { return stalled_ >= patience_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t stalled_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // global optimizer steps taken so far
  double lr = 0.0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  bool best = false;
};

struct TrainResult {
  TentParams params;  // weights of the best validation epoch
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
};

// Mean squared error of the model over samples, in scaled space.
double evaluate_mse(const TentParams& params, const ModelConfig& cfg,
                    std::span<const Sample> samples);

// Full training loop: seeded shuffling, mini-batches, warmup schedule, Adam,
// early stopping on validation loss. Keeps the weights of the best epoch.
// When log_csv is given, one `epoch,step,lr,train_mse,val_mse,best` row is
// written and flushed per epoch.
TrainResult train(const ModelConfig& model_cfg, TentParams params, const WindowedDataset& data,
                  const TrainConfig& cfg, std::ostream* log_csv = nullptr,
                  const std::function<void(const EpochLog&)>& on_epoch = nullptr);

}  // namespace tent
