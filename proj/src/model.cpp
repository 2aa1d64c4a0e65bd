#include "lossprio/model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include <fmt/format.h>

#include "lossprio/errors.hpp"
#include "lossprio/random.hpp"

namespace lossprio {

namespace {

struct Activations {
  // layers[0] is the input, layers.back() the softmax output.
  std::vector<Eigen::MatrixXd> layers;
};

Activations run_layers(const Mlp& params, const Eigen::MatrixXd& inputs) {
  if (static_cast<std::size_t>(inputs.cols()) != params.input_dim()) {
    throw ConfigError(fmt::format("batch feature dimension {} does not match model input {}",
                                  inputs.cols(), params.input_dim()));
  }
  Activations acts;
  acts.layers.reserve(params.layer_count() + 1);
  acts.layers.push_back(inputs);
  for (std::size_t l = 0; l < params.layer_count(); ++l) {
    Eigen::MatrixXd z = acts.layers.back() * params.weights[l].transpose();
    z.rowwise() += params.biases[l].transpose();
    if (l + 1 < params.layer_count()) {
      acts.layers.push_back(z.array().tanh().matrix());
    } else {
      // Row-wise softmax with max subtraction.
      Eigen::VectorXd row_max = z.rowwise().maxCoeff();
      z.colwise() -= row_max;
      z = z.array().exp().matrix();
      Eigen::VectorXd row_sum = z.rowwise().sum();
      for (Eigen::Index r = 0; r < z.rows(); ++r) z.row(r) /= row_sum(r);
      acts.layers.push_back(std::move(z));
    }
  }
  return acts;
}

void check_labels(const Mlp& params, const Batch& batch) {
  if (static_cast<std::size_t>(batch.inputs.rows()) != batch.labels.size()) {
    throw ConfigError("batch inputs and labels differ in length");
  }
  for (auto y : batch.labels) {
    if (y >= params.num_classes()) {
      throw ConfigError(fmt::format("label {} out of range for K={}", y, params.num_classes()));
    }
  }
}

Gradients zeros_like(const Mlp& params) {
  Gradients g;
  for (std::size_t l = 0; l < params.layer_count(); ++l) {
    g.weights.push_back(Eigen::MatrixXd::Zero(params.weights[l].rows(), params.weights[l].cols()));
    g.biases.push_back(Eigen::VectorXd::Zero(params.biases[l].size()));
  }
  return g;
}

double mean_loss(const Mlp& params, const Batch& batch) {
  const auto results = forward(params, batch);
  double total = 0.0;
  for (const auto& r : results) total += r.loss;
  return total / static_cast<double>(results.size());
}

double flat_gradient(const Gradients& g, std::size_t flat_index) {
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    const auto wsize = static_cast<std::size_t>(g.weights[l].size());
    if (flat_index < wsize) return g.weights[l].data()[flat_index];
    flat_index -= wsize;
    const auto bsize = static_cast<std::size_t>(g.biases[l].size());
    if (flat_index < bsize) return g.biases[l](static_cast<Eigen::Index>(flat_index));
    flat_index -= bsize;
  }
  throw std::out_of_range("gradient index out of range");
}

}  // namespace

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
  }
  return n;
}

double& Mlp::parameter(std::size_t flat_index) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const auto wsize = static_cast<std::size_t>(weights[l].size());
    if (flat_index < wsize) return weights[l].data()[flat_index];
    flat_index -= wsize;
    const auto bsize = static_cast<std::size_t>(biases[l].size());
    if (flat_index < bsize) return biases[l](static_cast<Eigen::Index>(flat_index));
    flat_index -= bsize;
  }
  throw std::out_of_range("parameter index out of range");
}

double Mlp::parameter(std::size_t flat_index) const {
  return const_cast<Mlp&>(*this).parameter(flat_index);
}

bool Mlp::all_finite() const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
  }
  return true;
}

Mlp make_zero_mlp(std::span<const std::size_t> widths) {
  if (widths.size() < 2 || std::find(widths.begin(), widths.end(), 0u) != widths.end()) {
    throw ConfigError("architecture needs at least two positive layer widths");
  }
  Mlp m;
  m.widths.assign(widths.begin(), widths.end());
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(widths[l]);
    const auto out = static_cast<Eigen::Index>(widths[l + 1]);
    m.weights.push_back(Eigen::MatrixXd::Zero(out, in));
    m.biases.push_back(Eigen::VectorXd::Zero(out));
  }
  return m;
}

Mlp make_mlp(std::span<const std::size_t> widths, std::uint64_t seed) {
  Mlp m = make_zero_mlp(widths);
  Rng rng(seed);
  for (auto& w : m.weights) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    // Column-major fill order is part of the determinism contract.
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  }
  return m;
}

void TrainerConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_drop_factor > 0.0 && lr_drop_factor <= 1.0)) {
    throw ConfigError("lr_drop_factor must be in (0, 1]");
  }
  for (std::size_t i = 0; i < lr_drop_points.size(); ++i) {
    const double p = lr_drop_points[i];
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("lr_drop_points must lie in (0, 1)");
    if (i > 0 && !(p > lr_drop_points[i - 1])) {
      throw ConfigError("lr_drop_points must be strictly increasing");
    }
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (total_epochs == 0) throw ConfigError("total_epochs must be positive");
  for (auto h : hidden_layers) {
    if (h == 0) throw ConfigError("hidden layer widths must be positive");
  }
}

Batch gather(const Dataset& dataset, std::span<const std::size_t> ids) {
  Batch b;
  b.inputs.resize(static_cast<Eigen::Index>(ids.size()),
                  static_cast<Eigen::Index>(dataset.feature_dim));
  b.labels.reserve(ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const Example& ex = dataset.examples.at(ids[r]);
    for (std::size_t j = 0; j < dataset.feature_dim; ++j) {
      b.inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = ex.features[j];
    }
    b.labels.push_back(ex.label);
  }
  return b;
}

Batch make_batch(std::span<const Example> examples) {
  Batch b;
  const std::size_t dim = examples.empty() ? 0 : examples.front().features.size();
  b.inputs.resize(static_cast<Eigen::Index>(examples.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < examples.size(); ++r) {
    if (examples[r].features.size() != dim) {
      throw ConfigError("examples in one batch must share the feature dimension");
    }
    for (std::size_t j = 0; j < dim; ++j) {
      b.inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) =
          examples[r].features[j];
    }
    b.labels.push_back(examples[r].label);
  }
  return b;
}

std::vector<ForwardResult> forward(const Mlp& params, const Batch& batch) {
  check_labels(params, batch);
  const Activations acts = run_layers(params, batch.inputs);
  const Eigen::MatrixXd& probs = acts.layers.back();
  // Loss comes from the log-softmax of the logits rather than log(prob) so it
  // stays finite when a probability underflows.
  const Eigen::MatrixXd& last_hidden = acts.layers[acts.layers.size() - 2];
  Eigen::MatrixXd logits = last_hidden * params.weights.back().transpose();
  logits.rowwise() += params.biases.back().transpose();

  std::vector<ForwardResult> out(batch.size());
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    ForwardResult& res = out[r];
    res.probabilities = probs.row(row).transpose();
    Eigen::Index arg = 0;
    res.probabilities.maxCoeff(&arg);
    res.predicted = static_cast<std::size_t>(arg);
    const double zmax = logits.row(row).maxCoeff();
    const double log_norm = zmax + std::log((logits.row(row).array() - zmax).exp().sum());
    res.loss = log_norm - logits(row, static_cast<Eigen::Index>(batch.labels[r]));
  }
  return out;
}

std::vector<ForwardResult> forward(const Mlp& params, std::span<const Example> examples) {
  return forward(params, make_batch(examples));
}

double classification_error(const Mlp& params, const Batch& batch) {
  if (batch.size() == 0) return 0.0;
  const auto results = forward(params, batch);
  std::size_t wrong = 0;
  for (std::size_t r = 0; r < results.size(); ++r) {
    if (results[r].predicted != batch.labels[r]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(results.size());
}

LossAndGradient loss_gradient(const Mlp& params, const Batch& batch) {
  if (batch.size() == 0) throw ConfigError("cannot compute a gradient on an empty batch");
  check_labels(params, batch);
  const Activations acts = run_layers(params, batch.inputs);
  const double n = static_cast<double>(batch.size());

  LossAndGradient out;
  out.gradient = zeros_like(params);

  const Eigen::MatrixXd& probs = acts.layers.back();
  double total = 0.0;
  Eigen::MatrixXd delta = probs;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    const auto y = static_cast<Eigen::Index>(batch.labels[r]);
    total -= std::log(probs(row, y));
    delta(row, y) -= 1.0;
  }
  out.mean_loss = total / n;
  delta /= n;

  for (std::size_t l = params.layer_count(); l-- > 0;) {
    const Eigen::MatrixXd& input = acts.layers[l];
    out.gradient.weights[l] = delta.transpose() * input;
    out.gradient.biases[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      Eigen::MatrixXd upstream = delta * params.weights[l];
      delta = (upstream.array() * (1.0 - input.array().square())).matrix();
    }
  }
  return out;
}

void backward_and_update(Mlp& params, const Batch& batch, const TrainerConfig& cfg,
                         SgdState& state, double progress) {
  if (batch.size() == 0) throw ConfigError("cannot back-propagate an empty batch");
  LossAndGradient lg = loss_gradient(params, batch);
  Gradients& g = lg.gradient;
  if (state.velocity.weights.empty()) state.velocity = zeros_like(params);

  const double lr = learning_rate_at(progress, cfg);
  for (std::size_t l = 0; l < params.layer_count(); ++l) {
    if (!g.weights[l].allFinite() || !g.biases[l].allFinite()) {
      throw TrainingDiverged(state.iteration);
    }
    g.weights[l] += cfg.weight_decay * params.weights[l];
    g.biases[l] += cfg.weight_decay * params.biases[l];
    state.velocity.weights[l] = cfg.momentum * state.velocity.weights[l] + g.weights[l];
    state.velocity.biases[l] = cfg.momentum * state.velocity.biases[l] + g.biases[l];
    params.weights[l] -= lr * state.velocity.weights[l];
    params.biases[l] -= lr * state.velocity.biases[l];
  }
  if (!params.all_finite()) throw TrainingDiverged(state.iteration);
  ++state.iteration;
  state.backprops += batch.size();
}

double gradient_check(const Mlp& params, const Batch& batch, double epsilon,
                      std::size_t max_coordinates, std::uint64_t seed) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) {
    throw ConfigError("gradient_check epsilon must be in [1e-6, 1e-3]");
  }
  const Gradients analytic = loss_gradient(params, batch).gradient;

  std::vector<std::size_t> coords(params.parameter_count());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (coords.size() > max_coordinates) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coordinates);
  }

  Mlp probe = params;
  double worst = 0.0;
  for (std::size_t idx : coords) {
    double& p = probe.parameter(idx);
    const double saved = p;
    p = saved + epsilon;
    const double up = mean_loss(probe, batch);
    p = saved - epsilon;
    const double down = mean_loss(probe, batch);
    p = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double exact = flat_gradient(analytic, idx);
    // The floor keeps coordinates with near-zero gradient from dividing roundoff by roundoff.
    const double scale = std::max({std::abs(numeric), std::abs(exact), 1e-6});
    worst = std::max(worst, std::abs(numeric - exact) / scale);
  }
  return worst;
}

double prediction_entropy(std::span<const double> distribution) {
  double sum = 0.0;
  double h = 0.0;
  for (double p : distribution) {
    if (!(p >= 0.0)) throw NumericalError(fmt::format("negative probability {}", p));
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw NumericalError(fmt::format("distribution sums to {}, not 1", sum));
  }
  return std::max(h, 0.0);
}

double learning_rate_at(double progress, const TrainerConfig& cfg) {
  double lr = cfg.learning_rate;
  for (double point : cfg.lr_drop_points) {
    if (progress >= point) lr *= cfg.lr_drop_factor;
  }
  return lr;
}

void save_checkpoint(const Mlp& params, std::ostream& out) {
  out << "lossprio-mlp 1\nwidths";
  for (auto w : params.widths) out << ' ' << w;
  out << "\nparameters " << params.parameter_count() << '\n';
  for (std::size_t i = 0; i < params.parameter_count(); ++i) {
    out << fmt::format("{:a}\n", params.parameter(i));
  }
}

Mlp load_checkpoint(std::istream& in) {
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "lossprio-mlp" || version != 1) {
    throw ConfigError("not a lossprio checkpoint");
  }
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  std::istringstream widths_line(line);
  widths_line >> tag;
  if (tag != "widths") throw ConfigError("checkpoint is missing the widths line");
  std::vector<std::size_t> widths;
  for (std::size_t w; widths_line >> w;) widths.push_back(w);
  Mlp m = make_zero_mlp(widths);

  std::size_t count = 0;
  if (!(in >> tag >> count) || tag != "parameters" || count != m.parameter_count()) {
    throw ConfigError("checkpoint parameter count does not match its architecture");
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::string token;
    if (!(in >> token)) throw ConfigError(fmt::format("checkpoint truncated at parameter {}", i));
    m.parameter(i) = std::strtod(token.c_str(), nullptr);
  }
  return m;
}

}  // namespace lossprio
