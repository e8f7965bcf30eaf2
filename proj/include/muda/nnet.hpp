#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "muda/matrix.hpp"
#include "muda/tape.hpp"

namespace muda::nnet {

struct DenseLayer {
  Matrix weights;  // fan_in x fan_out; outputs are x * W + b
  Matrix bias;     // 1 x fan_out

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Multilayer perceptron with tanh hidden units and a linear head.
///
/// layer_dims = [d_in, h_1, ..., h_L, num_classes], L >= 1. The features are
/// the tanh activation of the last hidden layer (C = h_L); the final layer is
/// the linear classifier on top of them.
class MlpModel {
 public:
  MlpModel() = default;
  /// Per-layer uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  MlpModel(std::vector<std::size_t> layer_dims, std::uint64_t seed);
  /// All-zero parameters.
  static MlpModel zeros(std::vector<std::size_t> layer_dims);
  static MlpModel from_layers(std::vector<std::size_t> layer_dims, std::vector<DenseLayer> layers);

  const std::vector<std::size_t>& layer_dims() const noexcept { return dims_; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t num_classes() const { return dims_.back(); }
  std::size_t feature_dim() const { return dims_[dims_.size() - 2]; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  /// Index of the layer whose activation is the feature representation.
  std::size_t feature_layer_index() const noexcept { return layers_.size() - 2; }
  std::size_t parameter_count() const;

  std::vector<DenseLayer>& layers() noexcept { return layers_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

  /// Re-draws layer `index` from the initialization distribution using a
  /// generator seeded with `seed` (same draw order as the constructor).
  void reinitialize_layer(std::size_t index, std::uint64_t seed);

  bool all_finite() const;

  friend bool operator==(const MlpModel&, const MlpModel&) = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<DenseLayer> layers_;
};

struct ForwardResult {
  Matrix features;  // batch x C
  Matrix logits;    // batch x num_classes
  Matrix probs;     // batch x num_classes
};

ForwardResult forward(const MlpModel& model, const Matrix& inputs);
Matrix features(const MlpModel& model, const Matrix& inputs);

/// Mean negative log-softmax probability of the true class.
double cross_entropy(const Matrix& logits, std::span<const int> labels);

/// Mean over rows of KL(p || q) with 0 log 0 = 0. Rows must sum to 1 within
/// 1e-6 (NotNormalized); p > 0 where q = 0 is a SupportViolation.
double kl_divergence(const Matrix& p, const Matrix& q);

// --- differentiable view of a model ------------------------------------------

struct TapedModel {
  std::vector<autodiff::Var> weights;
  std::vector<autodiff::Var> biases;
};

struct TapedForward {
  autodiff::Var features;
  autodiff::Var logits;
};

/// Registers every parameter of `model` as a leaf on `tape`.
TapedModel bind(autodiff::Tape& tape, const MlpModel& model);
TapedForward forward(const TapedModel& params, autodiff::Var inputs);

/// Gradients shaped like the model's layers.
using Gradients = std::vector<DenseLayer>;

Gradients zero_gradients(const MlpModel& model);
Gradients collect_gradients(const autodiff::Tape& tape, const TapedModel& params);

// --- optimization ------------------------------------------------------------

struct SgdConfig {
  double learning_rate = 0.1;
  double weight_decay = 0.0;
  double lr_decay = 1.0;  // lr_t = learning_rate * lr_decay^t
  double momentum = 0.0;

  void validate() const;
};

/// Stateless step (momentum ignored): theta -= lr_t * (g + wd * theta) for
/// every layer whose `trainable` flag is set (all layers when empty).
void sgd_step(MlpModel& model, const Gradients& grads, const SgdConfig& cfg,
              std::size_t step_index, const std::vector<bool>& trainable = {});

/// SGD with optional heavy-ball momentum: v <- mu v + (g + wd theta);
/// theta -= lr_t v. With momentum 0 this is exactly sgd_step.
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(MlpModel& model, const Gradients& grads, const std::vector<bool>& trainable = {});
  std::size_t steps_taken() const noexcept { return step_; }
  double current_learning_rate() const;
  const SgdConfig& config() const noexcept { return cfg_; }

 private:
  SgdConfig cfg_;
  std::size_t step_ = 0;
  Gradients velocity_;
};

// --- checkpoints -------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(const MlpModel& model);
MlpModel checkpoint_from_string(const std::string& text);

}  // namespace muda::nnet
