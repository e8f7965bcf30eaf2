#include "muda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "muda/error.hpp"
#include "muda/kernels.hpp"
#include "muda/linalg.hpp"
#include "muda/softmax.hpp"

namespace muda::metrics {

// --- dimensional alignment ----------------------------------------------------

RetainSubspace retain_subspace(const Matrix& retain_features) {
  if (retain_features.rows() == 0) {
    throw Error(ErrorCode::kDegenerateRetainFeatures, "empty retain feature matrix");
  }
  const Matrix cov = kernels::gram(retain_features);
  if (linalg::frobenius_norm(cov) == 0.0) {
    throw Error(ErrorCode::kDegenerateRetainFeatures, "retain covariance is zero");
  }
  linalg::EigenDecomposition eig = linalg::sym_eig(cov);
  for (double& l : eig.eigenvalues) l = std::max(l, 0.0);
  RetainSubspace s;
  s.effective_rank = linalg::effective_rank(eig.eigenvalues);
  s.k = linalg::subspace_dimension(eig.eigenvalues);
  s.projector = linalg::top_k_projector(eig, s.k);
  s.eigenvalues = std::move(eig.eigenvalues);
  return s;
}

double dimensional_alignment(const Matrix& forget_features, const RetainSubspace& subspace) {
  if (forget_features.rows() == 0) {
    throw Error(ErrorCode::kDegenerateForgetFeatures, "empty forget feature matrix");
  }
  if (forget_features.cols() != subspace.projector.rows()) {
    throw Error(ErrorCode::kShapeMismatch, "feature dimension differs from the retain subspace");
  }
  const Matrix g = kernels::gram(forget_features);
  const double denom = linalg::frobenius_norm(g);
  if (denom <= 1e-12) throw Error(ErrorCode::kDegenerateForgetFeatures, "||F_f F_f^T|| ~ 0");
  // ||G P|| <= ||G|| for an orthogonal projector; clamp the rounding excess.
  return std::min(1.0, linalg::frobenius_norm(kernels::matmul(g, subspace.projector)) / denom);
}

double dimensional_alignment(const Matrix& forget_features, const Matrix& retain_features) {
  return dimensional_alignment(forget_features, retain_subspace(retain_features));
}

// --- linear probing -------------------------------------------------------------

double linear_probe(const Matrix& train_features, std::span<const int> train_labels,
                    const Matrix& eval_features, std::span<const int> eval_labels,
                    const ProbeConfig& cfg) {
  if (train_features.rows() != train_labels.size() || eval_features.rows() != eval_labels.size() ||
      train_features.cols() != eval_features.cols() || train_features.rows() == 0 ||
      eval_features.rows() == 0) {
    throw Error(ErrorCode::kShapeMismatch, "linear_probe inputs");
  }
  int max_label = 0;
  for (int y : train_labels) {
    if (y < 0) throw Error(ErrorCode::kLabelOutOfRange, "negative probe label");
    max_label = std::max(max_label, y);
  }
  for (int y : eval_labels) {
    if (y < 0) throw Error(ErrorCode::kLabelOutOfRange, "negative probe label");
    max_label = std::max(max_label, y);
  }
  if (std::all_of(train_labels.begin(), train_labels.end(),
                  [&](int y) { return y == train_labels[0]; })) {
    throw Error(ErrorCode::kSingleClassTrainingSet, "probe needs two or more classes");
  }
  const std::size_t d = train_features.cols(), k = static_cast<std::size_t>(max_label) + 1;
  const std::size_t n = train_features.rows();

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> init(-0.01, 0.01);
  Matrix w(d, k);
  for (double& v : w.data()) v = init(rng);
  std::vector<double> b(k, 0.0);

  const double inv_n = 1.0 / static_cast<double>(n);
  for (int step = 0; step < cfg.steps; ++step) {
    Matrix logits = kernels::matmul(train_features, w);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) logits(i, c) += b[c];
    Matrix delta = softmax_rows(logits);
    for (std::size_t i = 0; i < n; ++i) delta(i, static_cast<std::size_t>(train_labels[i])) -= 1.0;
    const Matrix gw = kernels::matmul_tn(train_features, delta);
    auto wv = w.data();
    auto gv = gw.data();
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] -= cfg.learning_rate * inv_n * gv[i];
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += delta(i, c);
      b[c] -= cfg.learning_rate * inv_n * s;
    }
  }

  Matrix logits = kernels::matmul(eval_features, w);
  for (std::size_t i = 0; i < logits.rows(); ++i)
    for (std::size_t c = 0; c < k; ++c) logits(i, c) += b[c];
  return accuracy(logits, eval_labels);
}

// --- clustering -------------------------------------------------------------------

ClusterAssignment kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                         int max_iterations) {
  const std::size_t n = points.rows(), d = points.cols();
  if (k < 1 || n < k) throw Error(ErrorCode::kTooFewSamples, "kmeans needs n >= k >= 1");
  std::mt19937_64 rng(seed);

  // k-means++ seeding.
  Matrix centroids(k, d);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t c = 0; c < k; ++c) {
    if (c > 0) {
      double total = 0.0;
      for (double v : nearest) total += v;
      if (total > 0.0) {
        double r = std::uniform_real_distribution<double>(0.0, total)(rng);
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          r -= nearest[i];
          if (r < 0.0 && nearest[i] > 0.0) {
            pick = i;
            break;
          }
        }
      } else {
        pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      }
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = points(i, j) - centroids(c, j);
        s += diff * diff;
      }
      nearest[i] = std::min(nearest[i], s);
    }
  }

  ClusterAssignment out;
  std::vector<double> sq;
  std::vector<std::size_t> ids;
  for (int it = 0; it < max_iterations; ++it) {
    std::vector<std::size_t> next = kernels::nearest_centroid(points, centroids, sq);
    double inertia = 0.0;
    for (double v : sq) inertia += v;
    out.inertia_history.push_back(inertia);
    const bool converged = next == ids;
    ids = std::move(next);
    out.inertia = inertia;
    if (converged) break;

    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[ids[i]];
      for (std::size_t j = 0; j < d; ++j) sums(ids[i], j) += points(i, j);
    }
    std::vector<std::uint8_t> taken(n, 0);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (std::size_t j = 0; j < d; ++j)
          centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
        continue;
      }
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i] && sq[i] > far_d) {
          far_d = sq[i];
          far = i;
        }
      taken[far] = 1;
      std::copy(points.row(far).begin(), points.row(far).end(), centroids.row(c).begin());
    }
  }
  out.ids = std::move(ids);
  out.centroids = std::move(centroids);
  return out;
}

namespace {

struct Contingency {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> per_cluster;  // (non-forget, forget)
  std::size_t forget = 0, total = 0;
};

Contingency contingency(std::span<const std::size_t> ids, std::span<const std::uint8_t> mask) {
  if (ids.size() != mask.size() || ids.empty()) {
    throw Error(ErrorCode::kShapeMismatch, "cluster ids and mask differ in length");
  }
  Contingency t;
  t.total = ids.size();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto& cell = t.per_cluster[ids[i]];
    if (mask[i]) {
      ++cell.second;
      ++t.forget;
    } else {
      ++cell.first;
    }
  }
  return t;
}

double plogp(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

}  // namespace

double nmi_forget(std::span<const std::size_t> cluster_ids, std::span<const std::uint8_t> forget_mask) {
  const Contingency t = contingency(cluster_ids, forget_mask);
  if (t.forget == 0 || t.forget == t.total) {
    throw Error(ErrorCode::kDegenerateMask, "forget mask is constant");
  }
  const double n = static_cast<double>(t.total);
  const double px1 = static_cast<double>(t.forget) / n, px0 = 1.0 - px1;
  const double hx = -plogp(px0) - plogp(px1);
  double hk = 0.0, mi = 0.0;
  for (const auto& [id, cell] : t.per_cluster) {
    const double pk = static_cast<double>(cell.first + cell.second) / n;
    hk -= plogp(pk);
    const double p0 = static_cast<double>(cell.first) / n;
    const double p1 = static_cast<double>(cell.second) / n;
    if (p0 > 0.0) mi += p0 * std::log(p0 / (pk * px0));
    if (p1 > 0.0) mi += p1 * std::log(p1 / (pk * px1));
  }
  if (hk <= 0.0) throw Error(ErrorCode::kZeroEntropy, "all samples in one cluster");
  return std::clamp(mi / std::min(hk, hx), 0.0, 1.0);
}

double f1_forget(std::span<const std::size_t> cluster_ids, std::span<const std::uint8_t> forget_mask) {
  const Contingency t = contingency(cluster_ids, forget_mask);
  if (t.forget == 0) throw Error(ErrorCode::kEmptyForgetSet, "f1_forget with no forget sample");
  double best = 0.0;
  for (const auto& [id, cell] : t.per_cluster) {
    if (cell.second == 0) continue;
    const double precision =
        static_cast<double>(cell.second) / static_cast<double>(cell.first + cell.second);
    const double recall = static_cast<double>(cell.second) / static_cast<double>(t.forget);
    best = std::max(best, 2.0 * precision * recall / (precision + recall));
  }
  return best;
}

// --- output-level metrics ----------------------------------------------------------

double accuracy(const Matrix& probs, std::span<const int> labels) {
  if (probs.rows() != labels.size()) throw Error(ErrorCode::kShapeMismatch, "accuracy");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto r = probs.row(i);
    const auto arg = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    if (arg == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double accuracy(const nnet::MlpModel& model, const Matrix& x, std::span<const int> labels) {
  return accuracy(nnet::forward(model, x).logits, labels);
}

double attack_success_rate(const nnet::MlpModel& model, const Matrix& triggered_x,
                           int target_label) {
  if (triggered_x.rows() == 0) return 0.0;
  std::vector<int> target(triggered_x.rows(), target_label);
  return accuracy(model, triggered_x, target);
}

MiaResult mia_from_confidences(std::span<const double> member_conf,
                               std::span<const double> nonmember_conf,
                               std::span<const double> forget_conf, const MiaConfig& cfg) {
  if (member_conf.empty() || nonmember_conf.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "MIA needs member and non-member confidences");
  }
  const double n = static_cast<double>(member_conf.size() + nonmember_conf.size());
  double mean = 0.0;
  for (double q : member_conf) mean += q;
  for (double q : nonmember_conf) mean += q;
  mean /= n;
  double var = 0.0;
  for (double q : member_conf) var += (q - mean) * (q - mean);
  for (double q : nonmember_conf) var += (q - mean) * (q - mean);
  const double sd = std::sqrt(var / n);

  MiaResult r;
  if (!(sd > 1e-12)) {
    r.rate = r.soft_rate = 0.5;
    r.degenerate = true;
    return r;
  }

  // 1-D logistic regression on standardized confidences.
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> init(-0.01, 0.01);
  double w = init(rng), b = 0.0;
  auto sigmoid = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  for (int step = 0; step < cfg.steps; ++step) {
    double gw = 0.0, gb = 0.0;
    for (double q : member_conf) {
      const double z = (q - mean) / sd;
      const double e = sigmoid(w * z + b) - 1.0;
      gw += e * z;
      gb += e;
    }
    for (double q : nonmember_conf) {
      const double z = (q - mean) / sd;
      const double e = sigmoid(w * z + b);
      gw += e * z;
      gb += e;
    }
    w -= cfg.learning_rate * gw / n;
    b -= cfg.learning_rate * gb / n;
  }
  r.weight = w / sd;
  r.bias = b - w * mean / sd;
  if (forget_conf.empty()) return r;
  std::size_t members = 0;
  double soft = 0.0;
  for (double q : forget_conf) {
    const double h = sigmoid(r.weight * q + r.bias);
    soft += h;
    if (h >= 0.5) ++members;
  }
  r.rate = static_cast<double>(members) / static_cast<double>(forget_conf.size());
  r.soft_rate = soft / static_cast<double>(forget_conf.size());
  return r;
}

namespace {

std::vector<double> confidences(const nnet::MlpModel& model, const Matrix& x) {
  std::vector<double> q;
  if (x.rows() == 0) return q;
  const Matrix p = nnet::forward(model, x).probs;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto r = p.row(i);
    q.push_back(*std::max_element(r.begin(), r.end()));
  }
  return q;
}

std::vector<int> pick(const std::vector<int>& v, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace

MiaResult mia_success_rate(const nnet::MlpModel& model, const Matrix& retain_train,
                           const Matrix& test_set, const Matrix& forget_set,
                           const MiaConfig& cfg) {
  return mia_from_confidences(confidences(model, retain_train), confidences(model, test_set),
                              confidences(model, forget_set), cfg);
}

// --- reports -------------------------------------------------------------------------

void MetricsReport::check_ranges() const {
  if (failed) return;
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0 + 1e-12)) {
      throw Error(ErrorCode::kInvalidArgument, std::string(name) + " outside [0, 1]");
    }
  };
  unit(da, "da");
  unit(lp_forget, "lp_forget");
  unit(lp_retain, "lp_retain");
  if (lp_sub) unit(*lp_sub, "lp_sub");
  unit(f1, "f1");
  unit(nmi, "nmi");
  unit(acc_forget, "acc_forget");
  unit(acc_retain, "acc_retain");
  unit(mia, "mia");
  unit(mia_soft, "mia_soft");
  if (asr) unit(*asr, "asr");
}

void MetricsReport::fill_diffs(const MetricsReport& ref) {
  Diffs d;
  d.da = std::abs(da - ref.da);
  d.lp_forget = std::abs(lp_forget - ref.lp_forget);
  d.lp_retain = std::abs(lp_retain - ref.lp_retain);
  d.f1 = std::abs(f1 - ref.f1);
  d.nmi = std::abs(nmi - ref.nmi);
  d.acc_forget = std::abs(acc_forget - ref.acc_forget);
  d.acc_retain = std::abs(acc_retain - ref.acc_retain);
  d.mia = std::abs(mia - ref.mia);
  if (lp_sub && ref.lp_sub) d.lp_sub = std::abs(*lp_sub - *ref.lp_sub);
  if (asr && ref.asr) d.asr = std::abs(*asr - *ref.asr);
  diffs = d;
}

ProbePair probe_pair(const nnet::MlpModel& model, const data::DataBundle& bundle,
                     const ProbeConfig& cfg) {
  if (!bundle.has_partitions()) throw Error(ErrorCode::kInvalidArgument, "bundle has no partitions");
  const Matrix train_f = nnet::features(model, bundle.train_x);
  const Matrix test_f = nnet::features(model, bundle.test_x);

  ProbePair out;
  const auto retain_test = bundle.retain_test_indices();
  out.lp_retain = linear_probe(train_f.gather_rows(bundle.retain), pick(bundle.train_y, bundle.retain),
                               test_f.gather_rows(retain_test), pick(bundle.test_y, retain_test), cfg);
  if (bundle.backdoor) {
    const Matrix trig_f = nnet::features(model, bundle.backdoor->triggered_test_x);
    std::vector<int> target(trig_f.rows(), bundle.backdoor->target_label);
    out.lp_forget = linear_probe(train_f, bundle.train_y, trig_f, target, cfg);
  } else {
    const auto forget_test = bundle.forget_test_indices();
    out.lp_forget = forget_test.empty()
                        ? 0.0
                        : linear_probe(train_f, bundle.train_y, test_f.gather_rows(forget_test),
                                       pick(bundle.test_y, forget_test), cfg);
  }
  return out;
}

MetricsReport evaluate_model(const nnet::MlpModel& model, const data::DataBundle& bundle,
                             const std::optional<MetricsReport>& reference,
                             const EvalConfig& cfg) {
  if (!bundle.has_partitions()) throw Error(ErrorCode::kInvalidArgument, "bundle has no partitions");
  const nnet::ForwardResult train = nnet::forward(model, bundle.train_x);
  const nnet::ForwardResult test = nnet::forward(model, bundle.test_x);

  MetricsReport r;
  r.da = dimensional_alignment(train.features.gather_rows(bundle.forget),
                               train.features.gather_rows(bundle.retain));

  const ProbePair lp = probe_pair(model, bundle, cfg.probe);
  r.lp_retain = lp.lp_retain;
  r.lp_forget = lp.lp_forget;
  if (bundle.forget_spec->mode == data::ForgetMode::kSubclass) {
    const auto forget_test = bundle.forget_test_indices();
    r.lp_sub = linear_probe(train.features, bundle.train_sub, test.features.gather_rows(forget_test),
                            pick(bundle.test_sub, forget_test), cfg.probe);
  }

  const ClusterAssignment clusters = kmeans(train.features, bundle.num_classes, cfg.kmeans_seed);
  std::vector<std::uint8_t> mask(bundle.num_train(), 0);
  for (std::size_t i : bundle.forget) mask[i] = 1;
  r.f1 = f1_forget(clusters.ids, mask);
  r.nmi = nmi_forget(clusters.ids, mask);

  r.acc_forget = accuracy(train.logits.gather_rows(bundle.forget), pick(bundle.train_y, bundle.forget));
  const auto retain_test = bundle.retain_test_indices();
  r.acc_retain = accuracy(test.logits.gather_rows(retain_test), pick(bundle.test_y, retain_test));

  const MiaResult mia = mia_success_rate(model, bundle.train_x.gather_rows(bundle.retain),
                                         bundle.test_x, bundle.train_x.gather_rows(bundle.forget),
                                         cfg.mia);
  r.mia = mia.rate;
  r.mia_soft = mia.soft_rate;

  if (bundle.backdoor) {
    r.asr = attack_success_rate(model, bundle.backdoor->triggered_test_x, bundle.backdoor->target_label);
  }
  if (reference) r.fill_diffs(*reference);
  r.check_ranges();
  return r;
}

}  // namespace muda::metrics
