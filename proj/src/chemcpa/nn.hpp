#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "chemcpa/error.hpp"

namespace chemcpa {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Deterministic seed derivation (SplitMix64 finalizer over base ^ stream).
std::uint64_t DeriveSeed(std::uint64_t base, std::uint64_t stream) noexcept;

void EnsureFinite(const Matrix& m, const char* what);

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

struct MlpGradients {
  std::vector<Layer> layers;

  std::vector<std::span<const double>> Spans() const;
  void SetZero();
  MlpGradients& operator+=(const MlpGradients& other);
  MlpGradients& operator*=(double s);
};

// Records what one forward pass needs for its backward pass. A tape is tied
// to the exact parameter version that produced it.
struct GradientTape {
  std::vector<Matrix> inputs;           // input of each layer
  std::vector<Matrix> pre_activations;  // affine output of each layer
  const void* owner = nullptr;
  std::uint64_t version = 0;
};

struct ForwardPass {
  Matrix output;
  GradientTape tape;
};

struct BackwardResult {
  MlpGradients params;
  Matrix input_grad;
};

// Fully connected network: ReLU between layers, identity after the last.
class Mlp {
 public:
  Mlp() = default;
  // sizes = {in, hidden..., out}. Weights and biases ~ U(-1/sqrt(in), 1/sqrt(in)),
  // one seed stream per layer.
  Mlp(const std::vector<int>& sizes, std::uint64_t seed);
  static Mlp Zeros(const std::vector<int>& sizes);
  // Builds {in, width x depth, out}, the layout used by every sub-network.
  static std::vector<int> Sizes(int in, int width, int depth, int out);

  int input_dim() const;
  int output_dim() const;
  std::size_t num_layers() const { return layers_.size(); }
  std::vector<int> sizes() const;
  std::uint64_t version() const { return version_; }

  const std::vector<Layer>& layers() const { return layers_; }
  // Mutable access invalidates outstanding tapes.
  std::vector<Layer>& mutable_layers();
  std::vector<std::span<double>> ParameterSpans();
  MlpGradients ZeroGradients() const;
  std::size_t ParameterCount() const;

  ForwardPass Forward(const Matrix& batch) const;
  Matrix Predict(const Matrix& batch) const;

 private:
  void CheckInput(const Matrix& batch) const;

  std::vector<Layer> layers_;
  std::uint64_t version_ = 0;
};

BackwardResult Backward(const Mlp& mlp, const GradientTape& tape, const Matrix& output_grad);

// Per row b: || d/dz sum_k mlp(z)_k ||_2.
Vector InputGradientNorm(const Mlp& mlp, const Matrix& z);

// Gradient of mean_b InputGradientNorm(mlp, z)_b with respect to the
// parameters. ReLU masks are piecewise constant, so bias gradients vanish
// almost everywhere and are reported as exact zeros.
MlpGradients PenaltyParameterGrads(const Mlp& mlp, const Matrix& z);

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;  // decoupled
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int step_size = 100;  // epochs between decays
  double decay_factor = 0.5;
};

class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig config);

  // params[i] and grads[i] must have equal sizes; the layout of the span list
  // must stay the same between calls.
  void Step(std::span<const std::span<double>> params,
            std::span<const std::span<const double>> grads);
  // lr = base_lr * factor^floor(epoch / step_size)
  double ScheduleStep(int epoch);

  double learning_rate() const { return lr_; }
  std::int64_t step_count() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  double lr_ = 1e-3;
  std::int64_t steps_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

}  // namespace chemcpa
