#include "muda/unlearn.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "muda/error.hpp"
#include "muda/softmax.hpp"

namespace muda::unlearn {

namespace ad = muda::autodiff;

std::string to_string(Method m) {
  switch (m) {
    case Method::kMuda: return "muda";
    case Method::kFt: return "ft";
    case Method::kNegGrad: return "neggrad";
    case Method::kNegGradFt: return "neggrad_ft";
    case Method::kEuK: return "eu_k";
    case Method::kCfK: return "cf_k";
    case Method::kFtClassifierOnly: return "ft_classifier_only";
    case Method::kRetrain: return "retrain";
  }
  return "unknown";
}

Method method_from_string(const std::string& name) {
  for (Method m : {Method::kMuda, Method::kFt, Method::kNegGrad, Method::kNegGradFt, Method::kEuK,
                   Method::kCfK, Method::kFtClassifierOnly, Method::kRetrain}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorCode::kConfigInvalid, "unknown method '" + name + "'");
}

void UnlearnConfig::validate(std::size_t num_layers) const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::kConfigInvalid, what); };
  if (!std::isfinite(alpha) || alpha < 0.0) bad("alpha must be finite and >= 0");
  if (!std::isfinite(beta) || beta < 0.0) bad("beta must be finite and >= 0");
  if (batch_size == 0) bad("batch_size must be >= 1");
  if ((method == Method::kEuK || method == Method::kCfK) && (k_layers < 1 || k_layers > num_layers)) {
    bad("k_layers must lie in [1, number of layers]");
  }
  if (forget_epochs == 0 && recover_epochs == 0) bad("phase schedule has no epochs");
  try {
    sgd.validate();
  } catch (const Error& e) {
    bad(e.what());
  }
}

std::string PhaseTrace::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "iteration,phase,l_da,l_sd,ce,lr\n";
  auto cell = [&](double v) {
    if (!std::isnan(v)) out << v;
  };
  for (const auto& r : rows) {
    out << r.iteration << ',' << (r.phase == Phase::kForget ? "forget" : "recover") << ',';
    cell(r.l_da);
    out << ',';
    cell(r.l_sd);
    out << ',';
    cell(r.ce);
    out << ',' << r.lr << '\n';
  }
  return out.str();
}

// --- losses -------------------------------------------------------------------

ad::Var da_loss(ad::Var forget_features, const Matrix& projector) {
  ad::Tape& tape = *forget_features.tape;
  ad::Var g = ad::gram(forget_features);
  const double denom = g.value().empty() ? 0.0 : [&] {
    double s = 0.0;
    for (double v : g.value().data()) s += v * v;
    return std::sqrt(s);
  }();
  if (!(denom > 1e-12)) {
    throw Error(ErrorCode::kDegenerateForgetFeatures, "||F_f F_f^T||_F below 1e-12");
  }
  ad::Var projected = ad::matmul(g, tape.constant(projector));
  return ad::scale(ad::div(ad::frobenius(projected), ad::frobenius(g)), -1.0);
}

ad::Var da_loss(ad::Tape& tape, const nnet::TapedModel& params, const Matrix& forget_x,
                const Matrix& retain_prime_x, ad::Var* retain_features_out) {
  if (forget_x.rows() == 0) throw Error(ErrorCode::kDegenerateForgetFeatures, "empty forget batch");
  if (retain_prime_x.rows() == 0) {
    throw Error(ErrorCode::kDegenerateRetainFeatures, "empty retain set");
  }
  ad::Var retain = ad::stop_gradient(nnet::forward(params, tape.constant(retain_prime_x)).features);
  if (retain_features_out) *retain_features_out = retain;
  const metrics::RetainSubspace subspace = metrics::retain_subspace(retain.value());
  ad::Var forget = nnet::forward(params, tape.constant(forget_x)).features;
  return da_loss(forget, subspace.projector);
}

std::vector<double> sd_target(std::span<const double> probs_row, std::size_t forget_class) {
  if (probs_row.size() < 2 || forget_class >= probs_row.size()) {
    throw Error(ErrorCode::kInvalidArgument, "sd_target needs >= 2 classes and a valid forget class");
  }
  double total = 0.0;
  for (double p : probs_row) total += p;
  if (std::abs(total - 1.0) > 1e-6) throw Error(ErrorCode::kNotNormalized, "sd_target row");
  const double rest = 1.0 - probs_row[forget_class];
  if (probs_row[forget_class] > 1.0 - 1e-9) {
    throw Error(ErrorCode::kMassConcentrated, "forget class holds all probability mass");
  }
  std::vector<double> out(probs_row.begin(), probs_row.end());
  if (probs_row[forget_class] == 0.0) return out;
  out[forget_class] = 0.0;
  for (std::size_t c = 0; c < out.size(); ++c)
    if (c != forget_class) out[c] /= rest;
  return out;
}

ad::Var sd_loss(ad::Var logits, std::size_t forget_class) {
  const Matrix& z = logits.value();
  if (z.cols() < 2 || forget_class >= z.cols()) {
    throw Error(ErrorCode::kInvalidArgument, "sd_loss forget class");
  }
  // Zero-and-renormalize done in log space: log f_hat_c = z_c - lse_{c' != f} z_c'.
  // This equals the probability-space target but stays finite when the
  // forget class dominates.
  const double log_floor = std::log(kTargetFloor);
  Matrix log_target(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < z.cols(); ++c)
      if (c != forget_class) m = std::max(m, z(i, c));
    double s = 0.0;
    for (std::size_t c = 0; c < z.cols(); ++c)
      if (c != forget_class) s += std::exp(z(i, c) - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < z.cols(); ++c) {
      log_target(i, c) = c == forget_class ? log_floor : std::max(z(i, c) - lse, log_floor);
    }
  }
  return ad::kl_to_log_target(logits, std::move(log_target));
}

// --- training ------------------------------------------------------------------

namespace {

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

struct Batch {
  Matrix x;
  std::vector<int> y;
};

Batch make_batch(const data::Subset& s, std::span<const std::size_t> rows) {
  Batch b{s.x.gather_rows(rows), {}};
  for (std::size_t r : rows) b.y.push_back(s.y[r]);
  return b;
}

nnet::Gradients ce_gradients(const nnet::MlpModel& model, const Batch& batch, double sign,
                             double* ce_out) {
  ad::Tape tape;
  const nnet::TapedModel params = nnet::bind(tape, model);
  const nnet::TapedForward fwd = nnet::forward(params, tape.constant(batch.x));
  ad::Var ce = ad::cross_entropy(fwd.logits, batch.y);
  ad::Var loss = sign == 1.0 ? ce : ad::scale(ce, sign);
  tape.backward(loss);
  if (ce_out) *ce_out = ce.scalar();
  return nnet::collect_gradients(tape, params);
}

}  // namespace

nnet::MlpModel train_classifier(const data::Subset& subset, const std::vector<std::size_t>& layer_dims,
                                const TrainRecipe& recipe, std::uint64_t seed, PhaseTrace* trace) {
  if (recipe.batch_size == 0) throw Error(ErrorCode::kConfigInvalid, "batch_size must be >= 1");
  if (subset.x.rows() == 0) throw Error(ErrorCode::kInvalidArgument, "empty training set");
  nnet::MlpModel model(layer_dims, seed);
  nnet::Sgd opt(recipe.sgd);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order = iota_vec(subset.x.rows());
  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += recipe.batch_size) {
      const std::size_t end = std::min(order.size(), start + recipe.batch_size);
      const Batch batch = make_batch(subset, std::span(order).subspan(start, end - start));
      double ce = 0.0;
      const double lr = opt.current_learning_rate();
      opt.step(model, ce_gradients(model, batch, 1.0, &ce));
      if (trace) {
        TraceRow row;
        row.iteration = opt.steps_taken();
        row.phase = Phase::kRecover;
        row.ce = ce;
        row.lr = lr;
        trace->rows.push_back(row);
      }
    }
  }
  if (!model.all_finite()) throw Error(ErrorCode::kNonFinite, "training diverged");
  return model;
}

nnet::MlpModel train_original(const data::DataBundle& bundle,
                              const std::vector<std::size_t>& layer_dims,
                              const TrainRecipe& recipe, std::uint64_t seed) {
  return train_classifier(data::gather(bundle, data::Partition::kTrain), layer_dims, recipe, seed);
}

UnlearnResult retrain_oracle(const data::DataBundle& bundle,
                             const std::vector<std::size_t>& layer_dims,
                             const TrainRecipe& recipe, std::uint64_t seed) {
  UnlearnResult r;
  const data::Subset retain = data::gather(bundle, data::Partition::kRetain, &r.audit);
  r.model = train_classifier(retain, layer_dims, recipe, seed, &r.trace);
  return r;
}

// --- alternating engine ------------------------------------------------------------

namespace {

struct ForgetLoss {
  ad::Var total;
  double l_da = std::numeric_limits<double>::quiet_NaN();
  double l_sd = std::numeric_limits<double>::quiet_NaN();
  double ce = std::numeric_limits<double>::quiet_NaN();
};

struct EngineSpec {
  bool forget_phase = false;
  bool recover_phase = false;
  // Builds the forget-phase loss for one minibatch.
  std::function<ForgetLoss(ad::Tape&, const nnet::TapedModel&, const Batch&)> forget_loss;
  // Runs at the start of every forget epoch (e.g. refresh the retain subspace).
  std::function<void(const nnet::MlpModel&)> on_forget_epoch;
  std::vector<bool> trainable;  // empty: all layers
};

UnlearnResult run_engine(nnet::MlpModel model, const data::DataBundle& bundle,
                         const UnlearnConfig& cfg, const EngineSpec& spec,
                         const StepObserver& observer) {
  UnlearnResult r;
  data::Subset forget_set, prime_set;
  if (spec.forget_phase) forget_set = data::gather(bundle, data::Partition::kForget, &r.audit);
  if (spec.recover_phase) prime_set = data::gather(bundle, data::Partition::kRetainPrime, &r.audit);
  if (spec.forget_phase && forget_set.x.rows() == 0) {
    throw Error(ErrorCode::kEmptyForgetSet, "forget partition is empty");
  }
  if (spec.recover_phase && prime_set.x.rows() == 0) {
    throw Error(ErrorCode::kConfigInvalid, "retain_prime partition is empty");
  }

  const std::size_t forget_epochs = spec.forget_phase ? cfg.forget_epochs : 0;
  const std::size_t recover_epochs = spec.recover_phase ? cfg.recover_epochs : 0;
  if (forget_epochs + recover_epochs == 0) {
    if (cfg.total_iterations == 0) {
      r.model = std::move(model);
      return r;
    }
    throw Error(ErrorCode::kConfigInvalid, "no phase has any epoch");
  }

  nnet::Sgd opt(cfg.sgd);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> forget_order = iota_vec(forget_set.x.rows());
  std::vector<std::size_t> recover_order = iota_vec(prime_set.x.rows());
  std::size_t step = 0;

  auto run_epoch = [&](Phase phase) {
    const data::Subset& set = phase == Phase::kForget ? forget_set : prime_set;
    std::vector<std::size_t>& order = phase == Phase::kForget ? forget_order : recover_order;
    if (phase == Phase::kForget && spec.on_forget_epoch) spec.on_forget_epoch(model);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size() && step < cfg.total_iterations;
         start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const Batch batch = make_batch(set, std::span(order).subspan(start, end - start));
      TraceRow row;
      row.phase = phase;
      row.lr = opt.current_learning_rate();
      nnet::Gradients grads;
      if (phase == Phase::kForget) {
        ad::Tape tape;
        const nnet::TapedModel params = nnet::bind(tape, model);
        const ForgetLoss loss = spec.forget_loss(tape, params, batch);
        tape.backward(loss.total);
        grads = nnet::collect_gradients(tape, params);
        row.l_da = loss.l_da;
        row.l_sd = loss.l_sd;
        row.ce = loss.ce;
      } else {
        grads = ce_gradients(model, batch, 1.0, &row.ce);
      }
      opt.step(model, grads, spec.trainable);
      ++step;
      row.iteration = step;
      r.trace.rows.push_back(row);
      if (observer) observer(step, model);
    }
  };

  while (step < cfg.total_iterations) {
    for (std::size_t e = 0; e < forget_epochs && step < cfg.total_iterations; ++e) {
      run_epoch(Phase::kForget);
    }
    for (std::size_t e = 0; e < recover_epochs && step < cfg.total_iterations; ++e) {
      run_epoch(Phase::kRecover);
    }
  }
  if (!model.all_finite()) throw Error(ErrorCode::kNonFinite, "unlearning diverged");
  r.model = std::move(model);
  return r;
}

std::vector<bool> last_k_trainable(std::size_t num_layers, std::size_t k) {
  std::vector<bool> t(num_layers, false);
  for (std::size_t l = num_layers - std::min(k, num_layers); l < num_layers; ++l) t[l] = true;
  return t;
}

void check_method(const UnlearnConfig& cfg, Method expected, const nnet::MlpModel& model) {
  if (cfg.method != expected) {
    throw Error(ErrorCode::kConfigInvalid, "config method is " + to_string(cfg.method) +
                                               ", expected " + to_string(expected));
  }
  cfg.validate(model.num_layers());
}

}  // namespace

std::optional<std::size_t> distilled_class(const data::DataBundle& bundle) {
  if (!bundle.has_partitions()) return std::nullopt;
  switch (bundle.forget_spec->mode) {
    case data::ForgetMode::kClass:
      return static_cast<std::size_t>(bundle.forget_spec->target);
    case data::ForgetMode::kPoisoned:
      // Every poisoned sample carries the attacker's label.
      if (bundle.backdoor) return static_cast<std::size_t>(bundle.backdoor->target_label);
      return std::nullopt;
    case data::ForgetMode::kSubclass:
      return std::nullopt;
  }
  return std::nullopt;
}

UnlearnResult muda_unlearn(const nnet::MlpModel& original, const data::DataBundle& bundle,
                           const UnlearnConfig& cfg, const StepObserver& observer) {
  check_method(cfg, Method::kMuda, original);
  if (!bundle.has_partitions()) throw Error(ErrorCode::kConfigInvalid, "bundle has no partitions");

  const std::optional<std::size_t> zeroed = distilled_class(bundle);
  const bool use_sd = cfg.beta > 0.0 && zeroed.has_value();
  const std::size_t forget_class = zeroed.value_or(0);
  const bool use_da = cfg.alpha > 0.0;

  // Retain-side features are constants within a forget epoch.
  auto subspace = std::make_shared<metrics::RetainSubspace>();
  const Matrix prime_x = bundle.train_x.gather_rows(bundle.retain_prime);

  EngineSpec spec;
  spec.forget_phase = cfg.forget_epochs > 0;
  spec.recover_phase = cfg.recover_epochs > 0;
  spec.on_forget_epoch = [&, subspace](const nnet::MlpModel& model) {
    if (use_da) *subspace = metrics::retain_subspace(nnet::features(model, prime_x));
  };
  spec.forget_loss = [&, subspace](ad::Tape& tape, const nnet::TapedModel& params,
                                   const Batch& batch) {
    const nnet::TapedForward fwd = nnet::forward(params, tape.constant(batch.x));
    ForgetLoss out;
    std::vector<ad::Var> terms;
    if (use_da) {
      ad::Var da = da_loss(fwd.features, subspace->projector);
      out.l_da = da.scalar();
      terms.push_back(ad::scale(da, cfg.alpha));
    }
    if (use_sd) {
      ad::Var sd = sd_loss(fwd.logits, forget_class);
      out.l_sd = sd.scalar();
      terms.push_back(ad::scale(sd, cfg.beta));
    }
    if (terms.empty()) {
      out.total = ad::scale(ad::sum(fwd.logits), 0.0);
    } else {
      out.total = terms[0];
      for (std::size_t i = 1; i < terms.size(); ++i) out.total = ad::add(out.total, terms[i]);
    }
    return out;
  };

  UnlearnResult r = run_engine(original, bundle, cfg, spec, observer);
  // The retain_prime features used by the alignment loss are read too.
  if (spec.forget_phase && use_da) r.audit.retain_prime += bundle.retain_prime.size();
  return r;
}

UnlearnResult finetune(const nnet::MlpModel& original, const data::DataBundle& bundle,
                       const UnlearnConfig& cfg, const StepObserver& observer) {
  check_method(cfg, Method::kFt, original);
  EngineSpec spec;
  spec.recover_phase = true;
  return run_engine(original, bundle, cfg, spec, observer);
}

namespace {

EngineSpec neggrad_spec() {
  EngineSpec spec;
  spec.forget_phase = true;
  spec.forget_loss = [](ad::Tape& tape, const nnet::TapedModel& params, const Batch& batch) {
    const nnet::TapedForward fwd = nnet::forward(params, tape.constant(batch.x));
    ad::Var ce = ad::cross_entropy(fwd.logits, batch.y);
    ForgetLoss out;
    out.ce = ce.scalar();
    out.total = ad::scale(ce, -1.0);
    return out;
  };
  return spec;
}

}  // namespace

UnlearnResult neggrad(const nnet::MlpModel& original, const data::DataBundle& bundle,
                      const UnlearnConfig& cfg, const StepObserver& observer) {
  check_method(cfg, Method::kNegGrad, original);
  return run_engine(original, bundle, cfg, neggrad_spec(), observer);
}

UnlearnResult neggrad_ft(const nnet::MlpModel& original, const data::DataBundle& bundle,
                         const UnlearnConfig& cfg, const StepObserver& observer) {
  check_method(cfg, Method::kNegGradFt, original);
  EngineSpec spec = neggrad_spec();
  spec.forget_phase = cfg.forget_epochs > 0;
  spec.recover_phase = cfg.recover_epochs > 0;
  return run_engine(original, bundle, cfg, spec, observer);
}

UnlearnResult eu_k(const nnet::MlpModel& original, const data::DataBundle& bundle,
                   const UnlearnConfig& cfg, const StepObserver& observer) {
  check_method(cfg, Method::kEuK, original);
  nnet::MlpModel start = original;
  const std::size_t n = start.num_layers();
  for (std::size_t l = n - cfg.k_layers; l < n; ++l) start.reinitialize_layer(l, cfg.seed);
  EngineSpec spec;
  spec.recover_phase = true;
  spec.trainable = last_k_trainable(n, cfg.k_layers);
  return run_engine(std::move(start), bundle, cfg, spec, observer);
}

UnlearnResult cf_k(const nnet::MlpModel& original, const data::DataBundle& bundle,
                   const UnlearnConfig& cfg, const StepObserver& observer) {
  check_method(cfg, Method::kCfK, original);
  EngineSpec spec;
  spec.recover_phase = true;
  spec.trainable = last_k_trainable(original.num_layers(), cfg.k_layers);
  return run_engine(original, bundle, cfg, spec, observer);
}

UnlearnResult ft_classifier_only(const nnet::MlpModel& original, const data::DataBundle& bundle,
                                 const UnlearnConfig& cfg, const StepObserver& observer) {
  check_method(cfg, Method::kFtClassifierOnly, original);
  EngineSpec spec;
  spec.recover_phase = true;
  spec.trainable = last_k_trainable(original.num_layers(), 1);
  return run_engine(original, bundle, cfg, spec, observer);
}

UnlearnResult run_method(const nnet::MlpModel& original, const data::DataBundle& bundle,
                         const UnlearnConfig& cfg, const StepObserver& observer) {
  switch (cfg.method) {
    case Method::kMuda: return muda_unlearn(original, bundle, cfg, observer);
    case Method::kFt: return finetune(original, bundle, cfg, observer);
    case Method::kNegGrad: return neggrad(original, bundle, cfg, observer);
    case Method::kNegGradFt: return neggrad_ft(original, bundle, cfg, observer);
    case Method::kEuK: return eu_k(original, bundle, cfg, observer);
    case Method::kCfK: return cf_k(original, bundle, cfg, observer);
    case Method::kFtClassifierOnly: return ft_classifier_only(original, bundle, cfg, observer);
    case Method::kRetrain: break;
  }
  throw Error(ErrorCode::kConfigInvalid, "retrain is not an unlearning method; use retrain_oracle");
}

}  // namespace muda::unlearn
