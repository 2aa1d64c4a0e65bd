#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "lossprio/dataset.hpp"

namespace lossprio {

/// Fully connected classifier: tanh hidden layers, softmax output.
/// weights[l] is (widths[l+1] x widths[l]).
struct Mlp {
  std::vector<std::size_t> widths;
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;

  std::size_t input_dim() const { return widths.front(); }
  std::size_t num_classes() const { return widths.back(); }
  std::size_t layer_count() const { return weights.size(); }
  std::size_t parameter_count() const;

  /// Flat view in layer order, weights (column-major) before biases.
  double& parameter(std::size_t flat_index);
  double parameter(std::size_t flat_index) const;

  bool all_finite() const;
};

/// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases.
Mlp make_mlp(std::span<const std::size_t> widths, std::uint64_t seed);
/// All weights and biases zero.
Mlp make_zero_mlp(std::span<const std::size_t> widths);

struct TrainerConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double lr_drop_factor = 0.2;
  std::vector<double> lr_drop_points{0.6, 0.8};
  std::size_t batch_size = 128;
  std::size_t total_epochs = 20;
  std::vector<std::size_t> hidden_layers{128, 128};
  std::uint64_t seed = 1;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
};

/// Rows are examples.
struct Batch {
  Eigen::MatrixXd inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

Batch gather(const Dataset& dataset, std::span<const std::size_t> ids);
Batch make_batch(std::span<const Example> examples);

struct ForwardResult {
  double loss = 0.0;
  Eigen::VectorXd probabilities;
  std::size_t predicted = 0;
};

std::vector<ForwardResult> forward(const Mlp& params, const Batch& batch);
std::vector<ForwardResult> forward(const Mlp& params, std::span<const Example> examples);

/// Fraction of misclassified rows.
double classification_error(const Mlp& params, const Batch& batch);

struct Gradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

struct LossAndGradient {
  double mean_loss = 0.0;
  Gradients gradient;
};

/// Mean cross-entropy over the batch and its gradient (no weight decay).
LossAndGradient loss_gradient(const Mlp& params, const Batch& batch);

struct SgdState {
  Gradients velocity;
  std::size_t iteration = 0;
  std::size_t backprops = 0;
};

/// One SGD step on the batch-mean gradient:
///   g = grad + weight_decay * w;  v = momentum * v + g;  w -= lr * v
/// with lr = learning_rate_at(progress, cfg). Increments state.backprops by the
/// batch size. Throws TrainingDiverged on a non-finite gradient or parameter.
void backward_and_update(Mlp& params, const Batch& batch, const TrainerConfig& cfg,
                         SgdState& state, double progress = 0.0);

/// Maximum relative error between the analytic loss gradient and central finite
/// differences over up to `max_coordinates` randomly chosen parameters.
double gradient_check(const Mlp& params, const Batch& batch, double epsilon,
                      std::size_t max_coordinates = 256, std::uint64_t seed = 0);

/// Shannon entropy (nats) with 0 ln 0 = 0. Throws NumericalError on negative entries.
double prediction_entropy(std::span<const double> distribution);

double learning_rate_at(double progress, const TrainerConfig& cfg);

/// Textual checkpoint; parameters are written as hex floats so they round-trip exactly.
void save_checkpoint(const Mlp& params, std::ostream& out);
Mlp load_checkpoint(std::istream& in);

}  // namespace lossprio
