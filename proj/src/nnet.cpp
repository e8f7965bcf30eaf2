#include "muda/nnet.hpp"

#include <cmath>
#include <random>

#include <json.hpp>

#include "muda/error.hpp"
#include "muda/io.hpp"
#include "muda/kernels.hpp"
#include "muda/softmax.hpp"

namespace muda::nnet {
namespace {

void validate_dims(const std::vector<std::size_t>& dims) {
  if (dims.size() < 3) {
    throw Error(ErrorCode::kInvalidArgument, "MLP needs at least one hidden layer");
  }
  for (std::size_t d : dims)
    if (d == 0) throw Error(ErrorCode::kInvalidArgument, "layer width must be positive");
}

Matrix affine(const Matrix& x, const DenseLayer& layer) {
  Matrix out = kernels::matmul(x, layer.weights);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += layer.bias(0, j);
  }
  return out;
}

}  // namespace

MlpModel::MlpModel(std::vector<std::size_t> layer_dims, std::uint64_t seed)
    : dims_(std::move(layer_dims)) {
  validate_dims(dims_);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const std::size_t fan_in = dims_[l], fan_out = dims_[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer{Matrix(fan_in, fan_out), Matrix(1, fan_out)};
    for (double& w : layer.weights.data()) w = dist(rng);
    for (double& b : layer.bias.data()) b = dist(rng);
    layers_.push_back(std::move(layer));
  }
}

MlpModel MlpModel::zeros(std::vector<std::size_t> layer_dims) {
  validate_dims(layer_dims);
  MlpModel m;
  m.dims_ = std::move(layer_dims);
  for (std::size_t l = 0; l + 1 < m.dims_.size(); ++l) {
    m.layers_.push_back({Matrix(m.dims_[l], m.dims_[l + 1]), Matrix(1, m.dims_[l + 1])});
  }
  return m;
}

MlpModel MlpModel::from_layers(std::vector<std::size_t> layer_dims,
                               std::vector<DenseLayer> layers) {
  validate_dims(layer_dims);
  if (layers.size() + 1 != layer_dims.size()) {
    throw Error(ErrorCode::kShapeMismatch, "layer count does not match layer_dims");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].weights.rows() != layer_dims[l] ||
        layers[l].weights.cols() != layer_dims[l + 1] || layers[l].bias.rows() != 1 ||
        layers[l].bias.cols() != layer_dims[l + 1]) {
      throw Error(ErrorCode::kShapeMismatch, "layer " + std::to_string(l) + " shape");
    }
  }
  MlpModel m;
  m.dims_ = std::move(layer_dims);
  m.layers_ = std::move(layers);
  return m;
}

std::size_t MlpModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
  return n;
}

void MlpModel::reinitialize_layer(std::size_t index, std::uint64_t seed) {
  if (index >= layers_.size()) throw Error(ErrorCode::kInvalidArgument, "layer index");
  MlpModel fresh(dims_, seed);
  layers_[index] = std::move(fresh.layers_[index]);
}

bool MlpModel::all_finite() const {
  for (const auto& l : layers_)
    if (!l.weights.all_finite() || !l.bias.all_finite()) return false;
  return true;
}

ForwardResult forward(const MlpModel& model, const Matrix& inputs) {
  if (inputs.cols() != model.input_dim()) {
    throw Error(ErrorCode::kShapeMismatch, "input width does not match d_in");
  }
  if (!inputs.all_finite()) throw Error(ErrorCode::kNonFinite, "forward input");
  Matrix h = inputs;
  const auto& layers = model.layers();
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    h = affine(h, layers[l]);
    for (double& v : h.data()) v = std::tanh(v);
  }
  ForwardResult out;
  out.logits = affine(h, layers.back());
  out.features = std::move(h);
  out.probs = softmax_rows(out.logits);
  return out;
}

Matrix features(const MlpModel& model, const Matrix& inputs) {
  return forward(model, inputs).features;
}

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (logits.rows() != labels.size() || logits.rows() == 0) {
    throw Error(ErrorCode::kShapeMismatch, "cross_entropy: one label per row");
  }
  const Matrix lp = log_softmax_rows(logits);
  double s = 0.0;
  for (std::size_t i = 0; i < lp.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= lp.cols()) {
      throw Error(ErrorCode::kLabelOutOfRange, "label " + std::to_string(y));
    }
    s -= lp(i, static_cast<std::size_t>(y));
  }
  return s / static_cast<double>(lp.rows());
}

double kl_divergence(const Matrix& p, const Matrix& q) {
  if (!p.same_shape(q) || p.rows() == 0) throw Error(ErrorCode::kShapeMismatch, "kl_divergence");
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double sp = 0.0, sq = 0.0, row = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) {
      const double pc = p(i, c), qc = q(i, c);
      if (!(pc >= 0.0) || !(qc >= 0.0)) {
        throw Error(ErrorCode::kNotNormalized, "negative or NaN probability");
      }
      sp += pc;
      sq += qc;
      if (pc == 0.0) continue;
      if (qc == 0.0) throw Error(ErrorCode::kSupportViolation, "p > 0 where q = 0");
      row += pc * std::log(pc / qc);
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) {
      throw Error(ErrorCode::kNotNormalized, "row does not sum to 1");
    }
    total += row;
  }
  return total / static_cast<double>(p.rows());
}

TapedModel bind(autodiff::Tape& tape, const MlpModel& model) {
  TapedModel params;
  for (const auto& layer : model.layers()) {
    params.weights.push_back(tape.leaf(layer.weights));
    params.biases.push_back(tape.leaf(layer.bias));
  }
  return params;
}

TapedForward forward(const TapedModel& params, autodiff::Var inputs) {
  autodiff::Var h = inputs;
  const std::size_t n = params.weights.size();
  for (std::size_t l = 0; l + 1 < n; ++l) {
    h = autodiff::tanh(autodiff::add_bias(autodiff::matmul(h, params.weights[l]), params.biases[l]));
  }
  autodiff::Var logits =
      autodiff::add_bias(autodiff::matmul(h, params.weights[n - 1]), params.biases[n - 1]);
  return {h, logits};
}

Gradients zero_gradients(const MlpModel& model) {
  Gradients g;
  for (const auto& l : model.layers()) {
    g.push_back({Matrix(l.weights.rows(), l.weights.cols()), Matrix(1, l.bias.cols())});
  }
  return g;
}

Gradients collect_gradients(const autodiff::Tape& tape, const TapedModel& params) {
  Gradients g;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    g.push_back({tape.grad(params.weights[l]), tape.grad(params.biases[l])});
  }
  return g;
}

void SgdConfig::validate() const {
  if (!std::isfinite(learning_rate) || learning_rate < 0.0 || !std::isfinite(weight_decay) ||
      weight_decay < 0.0 || !(lr_decay > 0.0 && lr_decay <= 1.0) || !std::isfinite(momentum) ||
      momentum < 0.0 || momentum >= 1.0) {
    throw Error(ErrorCode::kConfigInvalid, "invalid SGD configuration");
  }
}

namespace {

void check_grad_shapes(const MlpModel& model, const Gradients& grads) {
  if (grads.size() != model.num_layers()) {
    throw Error(ErrorCode::kShapeMismatch, "gradient layer count");
  }
  for (std::size_t l = 0; l < grads.size(); ++l) {
    if (!grads[l].weights.same_shape(model.layers()[l].weights) ||
        !grads[l].bias.same_shape(model.layers()[l].bias)) {
      throw Error(ErrorCode::kShapeMismatch, "gradient shape for layer " + std::to_string(l));
    }
  }
}

bool is_trainable(const std::vector<bool>& trainable, std::size_t l) {
  return trainable.empty() || (l < trainable.size() && trainable[l]);
}

void apply_plain(Matrix& theta, const Matrix& g, double lr, double wd) {
  auto t = theta.data();
  auto gv = g.data();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] -= lr * (gv[i] + wd * t[i]);
}

}  // namespace

void sgd_step(MlpModel& model, const Gradients& grads, const SgdConfig& cfg,
              std::size_t step_index, const std::vector<bool>& trainable) {
  check_grad_shapes(model, grads);
  const double lr = cfg.learning_rate * std::pow(cfg.lr_decay, static_cast<double>(step_index));
  for (std::size_t l = 0; l < grads.size(); ++l) {
    if (!is_trainable(trainable, l)) continue;
    apply_plain(model.layers()[l].weights, grads[l].weights, lr, cfg.weight_decay);
    apply_plain(model.layers()[l].bias, grads[l].bias, lr, cfg.weight_decay);
  }
}

double Sgd::current_learning_rate() const {
  return cfg_.learning_rate * std::pow(cfg_.lr_decay, static_cast<double>(step_));
}

void Sgd::step(MlpModel& model, const Gradients& grads, const std::vector<bool>& trainable) {
  if (cfg_.momentum == 0.0) {
    sgd_step(model, grads, cfg_, step_, trainable);
    ++step_;
    return;
  }
  check_grad_shapes(model, grads);
  if (velocity_.empty()) velocity_ = zero_gradients(model);
  const double lr = current_learning_rate();
  auto update = [&](Matrix& theta, Matrix& vel, const Matrix& g) {
    auto t = theta.data();
    auto v = vel.data();
    auto gv = g.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      v[i] = cfg_.momentum * v[i] + gv[i] + cfg_.weight_decay * t[i];
      t[i] -= lr * v[i];
    }
  };
  for (std::size_t l = 0; l < grads.size(); ++l) {
    if (!is_trainable(trainable, l)) continue;
    update(model.layers()[l].weights, velocity_[l].weights, grads[l].weights);
    update(model.layers()[l].bias, velocity_[l].bias, grads[l].bias);
  }
  ++step_;
}

// --- checkpoints ---------------------------------------------------------------

std::string checkpoint_to_string(const MlpModel& model) {
  nlohmann::ordered_json doc;
  doc["format_version"] = kCheckpointVersion;
  doc["layer_dims"] = model.layer_dims();
  doc["activation"] = "tanh";
  doc["feature_layer_index"] = model.feature_layer_index();
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : model.layers()) {
    nlohmann::ordered_json entry;
    entry["weights"] = l.weights.values();
    entry["bias"] = l.bias.values();
    layers.push_back(std::move(entry));
  }
  doc["layers"] = std::move(layers);
  return doc.dump(1) + "\n";
}

MlpModel checkpoint_from_string(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptPayload, e.what());
  }
  try {
    if (!doc.contains("format_version") || doc.at("format_version").get<int>() != kCheckpointVersion) {
      throw Error(ErrorCode::kSchemaVersionMismatch,
                  "expected format_version " + std::to_string(kCheckpointVersion));
    }
    auto dims = doc.at("layer_dims").get<std::vector<std::size_t>>();
    if (doc.at("activation").get<std::string>() != "tanh") {
      throw Error(ErrorCode::kCorruptPayload, "unsupported activation");
    }
    const auto& jl = doc.at("layers");
    if (dims.size() < 3 || jl.size() + 1 != dims.size()) {
      throw Error(ErrorCode::kCorruptPayload, "layer count does not match layer_dims");
    }
    if (doc.at("feature_layer_index").get<std::size_t>() != dims.size() - 3) {
      throw Error(ErrorCode::kCorruptPayload, "feature_layer_index");
    }
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l < jl.size(); ++l) {
      auto w = jl[l].at("weights").get<std::vector<double>>();
      auto b = jl[l].at("bias").get<std::vector<double>>();
      if (w.size() != dims[l] * dims[l + 1] || b.size() != dims[l + 1]) {
        throw Error(ErrorCode::kCorruptPayload, "layer " + std::to_string(l) + " payload size");
      }
      layers.push_back({Matrix(dims[l], dims[l + 1], std::move(w)), Matrix(1, dims[l + 1], std::move(b))});
    }
    MlpModel m = MlpModel::from_layers(std::move(dims), std::move(layers));
    if (!m.all_finite()) throw Error(ErrorCode::kCorruptPayload, "non-finite parameter");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptPayload, e.what());
  }
}

void save_checkpoint(const MlpModel& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, checkpoint_to_string(model));
}

MlpModel load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_string(io::read_file(path));
}

}  // namespace muda::nnet
