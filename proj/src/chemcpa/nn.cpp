#include "chemcpa/nn.hpp"

#include <cmath>
#include <random>
#include <string>

namespace chemcpa {
namespace {

Matrix ReluMask(const Matrix& pre) { return (pre.array() > 0.0).cast<double>().matrix(); }

}  // namespace

std::uint64_t DeriveSeed(std::uint64_t base, std::uint64_t stream) noexcept {
  std::uint64_t z = base ^ (stream * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void EnsureFinite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw Error(ErrorKind::kNonFinite, "NonFinite", std::string(what) + " contains NaN or Inf");
  }
}

std::vector<std::span<const double>> MlpGradients::Spans() const {
  std::vector<std::span<const double>> out;
  out.reserve(layers.size() * 2);
  for (const Layer& l : layers) {
    out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

void MlpGradients::SetZero() {
  for (Layer& l : layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

MlpGradients& MlpGradients::operator+=(const MlpGradients& other) {
  if (other.layers.size() != layers.size()) throw DimensionMismatch("gradient layer counts differ");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weight += other.layers[i].weight;
    layers[i].bias += other.layers[i].bias;
  }
  return *this;
}

MlpGradients& MlpGradients::operator*=(double s) {
  for (Layer& l : layers) {
    l.weight *= s;
    l.bias *= s;
  }
  return *this;
}

Mlp::Mlp(const std::vector<int>& sizes, std::uint64_t seed) {
  if (sizes.size() < 2) throw InvalidArgument("InvalidArchitecture", "an MLP needs >= 2 sizes");
  for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
    const int in = sizes[k];
    const int out = sizes[k + 1];
    if (in <= 0 || out <= 0) throw InvalidArgument("InvalidArchitecture", "layer sizes must be > 0");
    std::mt19937_64 rng(DeriveSeed(seed, k));
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Layer layer{Matrix(out, in), Vector(out)};
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = bound * dist(rng);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = bound * dist(rng);
    layers_.push_back(std::move(layer));
  }
}

Mlp Mlp::Zeros(const std::vector<int>& sizes) {
  Mlp mlp(sizes, 0);
  for (Layer& l : mlp.layers_) {
    l.weight.setZero();
    l.bias.setZero();
  }
  return mlp;
}

std::vector<int> Mlp::Sizes(int in, int width, int depth, int out) {
  std::vector<int> sizes{in};
  for (int i = 0; i < depth; ++i) sizes.push_back(width);
  sizes.push_back(out);
  return sizes;
}

int Mlp::input_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols());
}

int Mlp::output_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows());
}

std::vector<int> Mlp::sizes() const {
  std::vector<int> s;
  if (layers_.empty()) return s;
  s.push_back(input_dim());
  for (const Layer& l : layers_) s.push_back(static_cast<int>(l.weight.rows()));
  return s;
}

std::vector<Layer>& Mlp::mutable_layers() {
  ++version_;
  return layers_;
}

std::vector<std::span<double>> Mlp::ParameterSpans() {
  ++version_;
  std::vector<std::span<double>> out;
  out.reserve(layers_.size() * 2);
  for (Layer& l : layers_) {
    out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

MlpGradients Mlp::ZeroGradients() const {
  MlpGradients g;
  for (const Layer& l : layers_) {
    g.layers.push_back(Layer{Matrix::Zero(l.weight.rows(), l.weight.cols()),
                             Vector::Zero(l.bias.size())});
  }
  return g;
}

std::size_t Mlp::ParameterCount() const {
  std::size_t n = 0;
  for (const Layer& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

void Mlp::CheckInput(const Matrix& batch) const {
  if (layers_.empty()) throw InvalidArgument("EmptyNetwork", "network has no layers");
  if (batch.cols() != input_dim()) {
    throw DimensionMismatch("batch width " + std::to_string(batch.cols()) +
                            " != network input " + std::to_string(input_dim()));
  }
  EnsureFinite(batch, "network input");
}

ForwardPass Mlp::Forward(const Matrix& batch) const {
  CheckInput(batch);
  ForwardPass pass;
  pass.tape.owner = this;
  pass.tape.version = version_;
  pass.tape.inputs.reserve(layers_.size());
  pass.tape.pre_activations.reserve(layers_.size());
  Matrix h = batch;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const Layer& l = layers_[k];
    Matrix a = h * l.weight.transpose();
    a.rowwise() += l.bias.transpose();
    pass.tape.inputs.push_back(std::move(h));
    h = k + 1 < layers_.size() ? Matrix(a.cwiseMax(0.0)) : a;
    pass.tape.pre_activations.push_back(std::move(a));
  }
  pass.output = std::move(h);
  return pass;
}

Matrix Mlp::Predict(const Matrix& batch) const {
  CheckInput(batch);
  Matrix h = batch;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    Matrix a = h * layers_[k].weight.transpose();
    a.rowwise() += layers_[k].bias.transpose();
    h = k + 1 < layers_.size() ? Matrix(a.cwiseMax(0.0)) : std::move(a);
  }
  return h;
}

BackwardResult Backward(const Mlp& mlp, const GradientTape& tape, const Matrix& output_grad) {
  if (tape.owner != &mlp || tape.version != mlp.version() ||
      tape.inputs.size() != mlp.num_layers()) {
    throw Error(ErrorKind::kStaleTape, "StaleTape",
                "tape was recorded for a different network or parameter version");
  }
  const Matrix& last = tape.pre_activations.back();
  if (output_grad.rows() != last.rows() || output_grad.cols() != last.cols()) {
    throw DimensionMismatch("output gradient shape does not match the forward output");
  }
  EnsureFinite(output_grad, "output gradient");

  BackwardResult result;
  result.params.layers.resize(mlp.num_layers());
  Matrix delta = output_grad;
  for (std::size_t k = mlp.num_layers(); k-- > 0;) {
    const Layer& l = mlp.layers()[k];
    result.params.layers[k].weight = delta.transpose() * tape.inputs[k];
    result.params.layers[k].bias = delta.colwise().sum().transpose();
    Matrix upstream = delta * l.weight;
    if (k > 0) {
      delta = upstream.cwiseProduct(ReluMask(tape.pre_activations[k - 1]));
    } else {
      result.input_grad = std::move(upstream);
    }
  }
  return result;
}

namespace {

// Backward vectors of sum_k out_k: back[k] is d(sum out)/d(pre-activation k),
// masks[k] the ReLU mask of layer k (unused for the last layer).
struct InputGradientTrace {
  std::vector<Matrix> back;
  std::vector<Matrix> masks;
  Matrix input_grad;
};

InputGradientTrace TraceInputGradient(const Mlp& mlp, const Matrix& z) {
  const ForwardPass pass = mlp.Forward(z);
  const std::size_t n = mlp.num_layers();
  InputGradientTrace trace;
  trace.back.resize(n);
  trace.masks.resize(n);
  for (std::size_t k = 0; k + 1 < n; ++k) trace.masks[k] = ReluMask(pass.tape.pre_activations[k]);
  trace.back[n - 1] = Matrix::Ones(z.rows(), mlp.output_dim());
  for (std::size_t k = n - 1; k > 0; --k) {
    trace.back[k - 1] = (trace.back[k] * mlp.layers()[k].weight).cwiseProduct(trace.masks[k - 1]);
  }
  trace.input_grad = trace.back[0] * mlp.layers()[0].weight;
  return trace;
}

}  // namespace

Vector InputGradientNorm(const Mlp& mlp, const Matrix& z) {
  return TraceInputGradient(mlp, z).input_grad.rowwise().norm();
}

MlpGradients PenaltyParameterGrads(const Mlp& mlp, const Matrix& z) {
  const InputGradientTrace trace = TraceInputGradient(mlp, z);
  const std::size_t n = mlp.num_layers();
  const double inv_batch = 1.0 / static_cast<double>(z.rows());

  // d||g||/dg = g / ||g|| (zero where g vanishes).
  Matrix carry = trace.input_grad;
  for (Eigen::Index b = 0; b < carry.rows(); ++b) {
    const double norm = carry.row(b).norm();
    if (norm > 0.0) {
      carry.row(b) /= norm;
    } else {
      carry.row(b).setZero();
    }
  }

  // g = W1^T D1 W2^T D2 ... WL^T 1 is linear in each W_k given the masks, so
  // the adjoint is pushed forward through the same masked chain.
  MlpGradients grads = mlp.ZeroGradients();
  for (std::size_t k = 0; k < n; ++k) {
    grads.layers[k].weight = inv_batch * (trace.back[k].transpose() * carry);
    if (k + 1 < n) carry = (carry * mlp.layers()[k].weight.transpose()).cwiseProduct(trace.masks[k]);
  }
  return grads;
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config), lr_(config.learning_rate) {
  if (!(config.learning_rate > 0.0)) throw InvalidArgument("InvalidLearningRate", "learning rate must be > 0");
  if (config.step_size <= 0) throw InvalidArgument("InvalidSchedule", "step_size must be > 0");
}

void Optimizer::Step(std::span<const std::span<double>> params,
                     std::span<const std::span<const double>> grads) {
  if (params.size() != grads.size()) throw DimensionMismatch("parameter/gradient block counts differ");
  if (first_.empty()) {
    first_.resize(params.size());
    second_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      first_[i].assign(params[i].size(), 0.0);
      second_[i].assign(params[i].size(), 0.0);
    }
  }
  if (first_.size() != params.size()) throw DimensionMismatch("optimizer state layout changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || first_[i].size() != params[i].size()) {
      throw DimensionMismatch("parameter block " + std::to_string(i) + " has mismatched size");
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) throw Error(ErrorKind::kNonFinite, "NonFinite", "non-finite gradient");
    }
  }

  ++steps_;
  const double lr = lr_;
  const double decay = 1.0 - lr * config_.weight_decay;
  if (config_.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].size(); ++j) {
        params[i][j] = params[i][j] * decay - lr * grads[i][j];
      }
    }
    return;
  }
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = first_[i];
    auto& v = second_[i];
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double g = grads[i][j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
      params[i][j] = params[i][j] * decay - lr * update;
    }
  }
}

double Optimizer::ScheduleStep(int epoch) {
  if (epoch < 0) throw InvalidArgument("InvalidEpoch", "epoch must be >= 0");
  lr_ = config_.learning_rate * std::pow(config_.decay_factor, epoch / config_.step_size);
  return lr_;
}

}  // namespace chemcpa
