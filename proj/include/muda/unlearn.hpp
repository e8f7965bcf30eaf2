#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "muda/datagen.hpp"
#include "muda/metrics.hpp"
#include "muda/nnet.hpp"
#include "muda/tape.hpp"

namespace muda::unlearn {

enum class Method { kMuda, kFt, kNegGrad, kNegGradFt, kEuK, kCfK, kFtClassifierOnly, kRetrain };

std::string to_string(Method m);
Method method_from_string(const std::string& name);

struct UnlearnConfig {
  Method method = Method::kMuda;
  double alpha = 0.1;   // weight of the alignment loss
  double beta = 0.01;   // weight of the self-distillation loss
  nnet::SgdConfig sgd{1e-3, 0.0, 1.0, 0.0};
  std::size_t total_iterations = 200;
  std::size_t batch_size = 32;
  std::size_t k_layers = 2;  // EU-k / CF-k: number of trailing layers that train
  std::size_t forget_epochs = 1;   // per cycle, forget phase first
  std::size_t recover_epochs = 1;  // per cycle
  std::uint64_t seed = 0;

  /// Throws ConfigInvalid. `num_layers` bounds k_layers.
  void validate(std::size_t num_layers) const;
};

enum class Phase { kForget, kRecover };

struct TraceRow {
  std::size_t iteration = 0;
  Phase phase = Phase::kRecover;
  double l_da = std::numeric_limits<double>::quiet_NaN();
  double l_sd = std::numeric_limits<double>::quiet_NaN();
  double ce = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
};

struct PhaseTrace {
  std::vector<TraceRow> rows;
  /// Columns iteration,phase,l_da,l_sd,ce,lr; terms not computed are blank.
  std::string to_csv() const;
};

struct UnlearnResult {
  nnet::MlpModel model;
  PhaseTrace trace;
  data::AccessAudit audit;
};

/// Called after every optimizer step with the 1-based step count.
using StepObserver = std::function<void(std::size_t step, const nnet::MlpModel& model)>;

// --- losses -------------------------------------------------------------------

/// -||G P||_F / ||G||_F with G = X^T X of the taped forget features and P a
/// constant projector.
autodiff::Var da_loss(autodiff::Var forget_features, const Matrix& projector);

/// Full alignment loss: the retain features are computed on the tape and cut
/// by stop_gradient before the eigendecomposition, so no gradient reaches
/// them. Returns the loss; `retain_features_out` (optional) receives the cut node.
autodiff::Var da_loss(autodiff::Tape& tape, const nnet::TapedModel& params,
                      const Matrix& forget_x, const Matrix& retain_prime_x,
                      autodiff::Var* retain_features_out = nullptr);

/// Zeroes `forget_class` and renormalizes. Throws MassConcentrated when the
/// forget class holds more than 1 - 1e-9 of the mass.
std::vector<double> sd_target(std::span<const double> probs_row, std::size_t forget_class);

/// Floor applied to target probabilities before the log.
inline constexpr double kTargetFloor = 1e-12;

/// Mean KL(f || f_hat) with f = softmax(logits) and f_hat the detached
/// self-distillation target, floored at kTargetFloor.
autodiff::Var sd_loss(autodiff::Var logits, std::size_t forget_class);

/// Output class zeroed by the self-distillation target: the forget class in
/// class mode, the attacker's label in poisoned mode (shared by every
/// poisoned sample), none in subclass mode where L_SD is off.
std::optional<std::size_t> distilled_class(const data::DataBundle& bundle);

// --- training ------------------------------------------------------------------

struct TrainRecipe {
  nnet::SgdConfig sgd{0.1, 1e-3, 0.998, 0.0};
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
};

/// Trains a fresh seeded model on the rows of `subset` with cross-entropy.
nnet::MlpModel train_classifier(const data::Subset& subset, const std::vector<std::size_t>& layer_dims,
                                const TrainRecipe& recipe, std::uint64_t seed,
                                PhaseTrace* trace = nullptr);

/// theta_o: trained on the full train split.
nnet::MlpModel train_original(const data::DataBundle& bundle,
                              const std::vector<std::size_t>& layer_dims,
                              const TrainRecipe& recipe, std::uint64_t seed);

/// theta_r: trained from scratch on the full retain set only.
UnlearnResult retrain_oracle(const data::DataBundle& bundle,
                             const std::vector<std::size_t>& layer_dims,
                             const TrainRecipe& recipe, std::uint64_t seed);

// --- unlearning methods ----------------------------------------------------------

UnlearnResult muda_unlearn(const nnet::MlpModel& original, const data::DataBundle& bundle,
                           const UnlearnConfig& cfg, const StepObserver& observer = {});
UnlearnResult finetune(const nnet::MlpModel& original, const data::DataBundle& bundle,
                       const UnlearnConfig& cfg, const StepObserver& observer = {});
UnlearnResult neggrad(const nnet::MlpModel& original, const data::DataBundle& bundle,
                      const UnlearnConfig& cfg, const StepObserver& observer = {});
UnlearnResult neggrad_ft(const nnet::MlpModel& original, const data::DataBundle& bundle,
                         const UnlearnConfig& cfg, const StepObserver& observer = {});
UnlearnResult eu_k(const nnet::MlpModel& original, const data::DataBundle& bundle,
                   const UnlearnConfig& cfg, const StepObserver& observer = {});
UnlearnResult cf_k(const nnet::MlpModel& original, const data::DataBundle& bundle,
                   const UnlearnConfig& cfg, const StepObserver& observer = {});
UnlearnResult ft_classifier_only(const nnet::MlpModel& original, const data::DataBundle& bundle,
                                 const UnlearnConfig& cfg, const StepObserver& observer = {});

/// Dispatches on cfg.method. kRetrain is not handled here (it needs the
/// training recipe); use retrain_oracle.
UnlearnResult run_method(const nnet::MlpModel& original, const data::DataBundle& bundle,
                         const UnlearnConfig& cfg, const StepObserver& observer = {});

}  // namespace muda::unlearn
