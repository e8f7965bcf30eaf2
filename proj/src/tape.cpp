#include "muda/tape.hpp"

#include <cmath>

#include "muda/error.hpp"
#include "muda/kernels.hpp"
#include "muda/softmax.hpp"

namespace muda::autodiff {

const Matrix& Var::value() const { return tape->value(*this); }

double Var::scalar() const {
  const Matrix& m = value();
  if (m.rows() != 1 || m.cols() != 1) throw Error(ErrorCode::kNonScalarLoss, "not a 1x1 node");
  return m(0, 0);
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, requires_grad});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::vector<Var> parents, ForwardFn forward, BackwardFn backward) {
  Node node;
  std::vector<const Matrix*> inputs;
  inputs.reserve(parents.size());
  for (const Var& p : parents) {
    if (p.tape != this) throw Error(ErrorCode::kInvalidArgument, "variable from another tape");
    node.parents.push_back(p.id);
    inputs.push_back(&nodes_[p.id].value);
    node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
  }
  node.value = forward(inputs);
  node.forward = std::move(forward);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::stop_gradient(Var v) {
  Node node;
  node.parents.push_back(v.id);
  node.value = nodes_.at(v.id).value;
  node.forward = [](std::span<const Matrix* const> in) { return *in[0]; };
  node.requires_grad = false;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  const Matrix& lv = nodes_.at(loss.id).value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw Error(ErrorCode::kNonScalarLoss, "backward() needs a 1x1 loss");
  }
  grads_.assign(nodes_.size(), Matrix());
  if (!nodes_[loss.id].requires_grad) return;
  grads_[loss.id] = Matrix(1, 1, 1.0);

  std::vector<const Matrix*> inputs;
  std::vector<Matrix*> input_grads;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || !node.backward || grads_[id].empty()) continue;
    inputs.clear();
    input_grads.clear();
    for (std::size_t p : node.parents) {
      inputs.push_back(&nodes_[p].value);
      if (nodes_[p].requires_grad) {
        if (grads_[p].empty()) grads_[p] = Matrix(nodes_[p].value.rows(), nodes_[p].value.cols());
        input_grads.push_back(&grads_[p]);
      } else {
        input_grads.push_back(nullptr);
      }
    }
    node.backward(grads_[id], node.value, inputs, input_grads);
  }
}

Matrix Tape::grad(Var v) const {
  if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
  const Matrix& val = nodes_.at(v.id).value;
  return Matrix(val.rows(), val.cols());
}

const Matrix& Tape::replay(Var v) {
  std::vector<const Matrix*> inputs;
  for (std::size_t id = 0; id <= v.id; ++id) {
    Node& node = nodes_[id];
    if (!node.forward) continue;
    inputs.clear();
    for (std::size_t p : node.parents) inputs.push_back(&nodes_[p].value);
    node.value = node.forward(inputs);
  }
  return nodes_[v.id].value;
}

// --- operations ------------------------------------------------------------

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) throw Error(ErrorCode::kShapeMismatch, what);
}

void accumulate(Matrix& dst, const Matrix& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  return a.tape->record(
      {a, b}, [](auto in) { return kernels::matmul(*in[0], *in[1]); },
      [](const Matrix& g, const Matrix&, auto in, auto grads) {
        if (grads[0]) accumulate(*grads[0], kernels::matmul_nt(g, *in[1]));
        if (grads[1]) accumulate(*grads[1], kernels::matmul_tn(*in[0], g));
      });
}

Var add_bias(Var a, Var bias) {
  return a.tape->record(
      {a, bias},
      [](auto in) {
        const Matrix& x = *in[0];
        const Matrix& b = *in[1];
        if (b.rows() != 1 || b.cols() != x.cols()) {
          throw Error(ErrorCode::kShapeMismatch, "add_bias expects a 1 x cols bias");
        }
        Matrix out = x;
        for (std::size_t i = 0; i < out.rows(); ++i) {
          auto r = out.row(i);
          for (std::size_t j = 0; j < r.size(); ++j) r[j] += b(0, j);
        }
        return out;
      },
      [](const Matrix& g, const Matrix&, auto, auto grads) {
        if (grads[0]) accumulate(*grads[0], g);
        if (grads[1]) {
          Matrix& gb = *grads[1];
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
        }
      });
}

Var tanh(Var a) {
  return a.tape->record(
      {a},
      [](auto in) {
        Matrix out = *in[0];
        for (double& v : out.data()) v = std::tanh(v);
        return out;
      },
      [](const Matrix& g, const Matrix& y, auto, auto grads) {
        if (!grads[0]) return;
        auto d = grads[0]->data();
        auto gy = g.data();
        auto yv = y.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * (1.0 - yv[i] * yv[i]);
      });
}

Var add(Var a, Var b) {
  return a.tape->record(
      {a, b},
      [](auto in) {
        require_same_shape(*in[0], *in[1], "add");
        return *in[0] + *in[1];
      },
      [](const Matrix& g, const Matrix&, auto, auto grads) {
        if (grads[0]) accumulate(*grads[0], g);
        if (grads[1]) accumulate(*grads[1], g);
      });
}

Var sub(Var a, Var b) {
  return a.tape->record(
      {a, b},
      [](auto in) {
        require_same_shape(*in[0], *in[1], "sub");
        return *in[0] - *in[1];
      },
      [](const Matrix& g, const Matrix&, auto, auto grads) {
        if (grads[0]) accumulate(*grads[0], g);
        if (grads[1]) accumulate(*grads[1], -1.0 * g);
      });
}

Var mul(Var a, Var b) {
  return a.tape->record(
      {a, b},
      [](auto in) {
        require_same_shape(*in[0], *in[1], "mul");
        Matrix out = *in[0];
        auto o = out.data();
        auto bv = in[1]->data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
        return out;
      },
      [](const Matrix& g, const Matrix&, auto in, auto grads) {
        auto gv = g.data();
        auto av = in[0]->data();
        auto bv = in[1]->data();
        if (grads[0]) {
          auto d = grads[0]->data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * bv[i];
        }
        if (grads[1]) {
          auto d = grads[1]->data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * av[i];
        }
      });
}

Var div(Var a, Var b) {
  return a.tape->record(
      {a, b},
      [](auto in) {
        require_same_shape(*in[0], *in[1], "div");
        Matrix out = *in[0];
        auto o = out.data();
        auto bv = in[1]->data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] /= bv[i];
        return out;
      },
      [](const Matrix& g, const Matrix& y, auto in, auto grads) {
        auto gv = g.data();
        auto bv = in[1]->data();
        auto yv = y.data();
        if (grads[0]) {
          auto d = grads[0]->data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] / bv[i];
        }
        if (grads[1]) {
          auto d = grads[1]->data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gv[i] * yv[i] / bv[i];
        }
      });
}

Var scale(Var a, double s) {
  return a.tape->record(
      {a}, [s](auto in) { return s * *in[0]; },
      [s](const Matrix& g, const Matrix&, auto, auto grads) {
        if (grads[0]) accumulate(*grads[0], s * g);
      });
}

Var sum(Var a) {
  return a.tape->record(
      {a},
      [](auto in) {
        double s = 0.0;
        for (double v : in[0]->data()) s += v;
        return Matrix(1, 1, s);
      },
      [](const Matrix& g, const Matrix&, auto, auto grads) {
        if (!grads[0]) return;
        for (double& d : grads[0]->data()) d += g(0, 0);
      });
}

Var gram(Var x) {
  return x.tape->record(
      {x}, [](auto in) { return kernels::gram(*in[0]); },
      [](const Matrix& g, const Matrix&, auto in, auto grads) {
        // d(X^T X) : G  ->  X (G + G^T)
        if (!grads[0]) return;
        Matrix sym = g + g.transposed();
        accumulate(*grads[0], kernels::matmul(*in[0], sym));
      });
}

Var frobenius(Var a) {
  return a.tape->record(
      {a},
      [](auto in) {
        double s = 0.0;
        for (double v : in[0]->data()) s += v * v;
        return Matrix(1, 1, std::sqrt(s));
      },
      [](const Matrix& g, const Matrix& y, auto in, auto grads) {
        if (!grads[0]) return;
        const double norm = y(0, 0);
        if (norm == 0.0) return;
        const double f = g(0, 0) / norm;
        auto d = grads[0]->data();
        auto av = in[0]->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += f * av[i];
      });
}

Var softmax(Var logits) {
  return logits.tape->record(
      {logits}, [](auto in) { return softmax_rows(*in[0]); },
      [](const Matrix& g, const Matrix& p, auto, auto grads) {
        if (!grads[0]) return;
        Matrix& d = *grads[0];
        for (std::size_t i = 0; i < p.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t c = 0; c < p.cols(); ++c) dot += g(i, c) * p(i, c);
          for (std::size_t c = 0; c < p.cols(); ++c) d(i, c) += p(i, c) * (g(i, c) - dot);
        }
      });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  std::vector<int> y(labels.begin(), labels.end());
  const Matrix& z = logits.value();
  if (z.rows() != y.size() || z.rows() == 0) {
    throw Error(ErrorCode::kShapeMismatch, "cross_entropy: one label per logit row");
  }
  for (int l : y)
    if (l < 0 || static_cast<std::size_t>(l) >= z.cols()) {
      throw Error(ErrorCode::kLabelOutOfRange, "cross_entropy label");
    }
  return logits.tape->record(
      {logits},
      [y](auto in) {
        const Matrix lp = log_softmax_rows(*in[0]);
        double s = 0.0;
        for (std::size_t i = 0; i < lp.rows(); ++i) s -= lp(i, static_cast<std::size_t>(y[i]));
        return Matrix(1, 1, s / static_cast<double>(lp.rows()));
      },
      [y](const Matrix& g, const Matrix&, auto in, auto grads) {
        if (!grads[0]) return;
        const Matrix p = softmax_rows(*in[0]);
        const double f = g(0, 0) / static_cast<double>(p.rows());
        Matrix& d = *grads[0];
        for (std::size_t i = 0; i < p.rows(); ++i)
          for (std::size_t c = 0; c < p.cols(); ++c) {
            const double target = static_cast<std::size_t>(y[i]) == c ? 1.0 : 0.0;
            d(i, c) += f * (p(i, c) - target);
          }
      });
}

Var kl_to_log_target(Var logits, Matrix log_target) {
  if (!logits.value().same_shape(log_target)) {
    throw Error(ErrorCode::kShapeMismatch, "kl_to_log_target target shape");
  }
  // Per row L = sum_c p_c a_c with a = log p - t; dL/dz_j = p_j (a_j - L).
  return logits.tape->record(
      {logits},
      [t = log_target](auto in) {
        const Matrix lp = log_softmax_rows(*in[0]);
        double s = 0.0;
        for (std::size_t i = 0; i < lp.rows(); ++i)
          for (std::size_t c = 0; c < lp.cols(); ++c) {
            const double p = std::exp(lp(i, c));
            if (p > 0.0) s += p * (lp(i, c) - t(i, c));
          }
        return Matrix(1, 1, s / static_cast<double>(lp.rows()));
      },
      [t = log_target](const Matrix& g, const Matrix&, auto in, auto grads) {
        if (!grads[0]) return;
        const Matrix lp = log_softmax_rows(*in[0]);
        const double f = g(0, 0) / static_cast<double>(lp.rows());
        Matrix& d = *grads[0];
        for (std::size_t i = 0; i < lp.rows(); ++i) {
          double row_loss = 0.0;
          for (std::size_t c = 0; c < lp.cols(); ++c) {
            const double p = std::exp(lp(i, c));
            if (p > 0.0) row_loss += p * (lp(i, c) - t(i, c));
          }
          for (std::size_t c = 0; c < lp.cols(); ++c) {
            const double p = std::exp(lp(i, c));
            if (p > 0.0) d(i, c) += f * p * (lp(i, c) - t(i, c) - row_loss);
          }
        }
      });
}

}  // namespace muda::autodiff
