#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "muda/datagen.hpp"
#include "muda/matrix.hpp"
#include "muda/nnet.hpp"

namespace muda::metrics {

// --- dimensional alignment ----------------------------------------------------

/// Retain-side quantities of dimensional alignment: the top-k eigenspace
/// projector of the uncentered retain covariance Y^T Y.
struct RetainSubspace {
  Matrix projector;  // C x C
  std::size_t k = 0;
  double effective_rank = 0.0;
  std::vector<double> eigenvalues;  // clamped to >= 0
};

/// `retain_features` is n_r x C (one sample per row). Throws
/// DegenerateRetainFeatures when the covariance is all zero.
RetainSubspace retain_subspace(const Matrix& retain_features);

/// ||G P||_F / ||G||_F with G = X^T X of the forget features (n_f x C).
double dimensional_alignment(const Matrix& forget_features, const RetainSubspace& subspace);
double dimensional_alignment(const Matrix& forget_features, const Matrix& retain_features);

// --- linear probing -------------------------------------------------------------

struct ProbeConfig {
  int steps = 500;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
};

/// Multinomial logistic regression on frozen features by full-batch gradient
/// descent; returns accuracy on the evaluation rows.
double linear_probe(const Matrix& train_features, std::span<const int> train_labels,
                    const Matrix& eval_features, std::span<const int> eval_labels,
                    const ProbeConfig& cfg = {});

// --- clustering -------------------------------------------------------------------

struct ClusterAssignment {
  std::vector<std::size_t> ids;
  Matrix centroids;  // k x C
  double inertia = 0.0;
  std::vector<double> inertia_history;  // one entry per Lloyd iteration
};

/// k-means++ seeding then Lloyd iterations until the assignment stops
/// changing (at most `max_iterations`). Empty clusters are reseeded with the
/// point farthest from its centroid.
ClusterAssignment kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                         int max_iterations = 300);

/// I(K, X) / min(H(K), H(X)) with natural logs; X is forget membership.
double nmi_forget(std::span<const std::size_t> cluster_ids, std::span<const std::uint8_t> forget_mask);

/// Best harmonic mean of precision and recall of a cluster w.r.t. the forget set.
double f1_forget(std::span<const std::size_t> cluster_ids, std::span<const std::uint8_t> forget_mask);

// --- output-level metrics ----------------------------------------------------------

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double accuracy(const Matrix& probs, std::span<const int> labels);
double accuracy(const nnet::MlpModel& model, const Matrix& x, std::span<const int> labels);

double attack_success_rate(const nnet::MlpModel& model, const Matrix& triggered_x,
                           int target_label);

struct MiaResult {
  double rate = 0.0;       // fraction of forget samples with h(q) >= 0.5
  double soft_rate = 0.0;  // mean of h(q) over the forget samples
  bool degenerate = false; // all training confidences identical; rate = 0.5
  double weight = 0.0, bias = 0.0;  // h(q) = sigmoid(weight * q + bias)
};

struct MiaConfig {
  int steps = 2000;
  double learning_rate = 1.0;
  std::uint64_t seed = 0;
};

/// Confidence-based membership inference from precomputed confidences.
MiaResult mia_from_confidences(std::span<const double> member_conf,
                               std::span<const double> nonmember_conf,
                               std::span<const double> forget_conf, const MiaConfig& cfg = {});

/// Confidence = max softmax probability under `model`.
MiaResult mia_success_rate(const nnet::MlpModel& model, const Matrix& retain_train,
                           const Matrix& test_set, const Matrix& forget_set,
                           const MiaConfig& cfg = {});

// --- reports -------------------------------------------------------------------------

/// One table row. Accuracy-like fields are fractions in [0, 1].
struct MetricsReport {
  std::string method;
  std::uint64_t seed = 0;
  double da = 0.0;
  double lp_forget = 0.0;
  double lp_retain = 0.0;
  std::optional<double> lp_sub;
  double f1 = 0.0;
  double nmi = 0.0;
  double acc_forget = 0.0;
  double acc_retain = 0.0;
  double mia = 0.0;
  double mia_soft = 0.0;
  std::optional<double> asr;
  bool failed = false;  // the method failed; numeric fields are meaningless

  struct Diffs {
    double da = 0, lp_forget = 0, lp_retain = 0, f1 = 0, nmi = 0, acc_forget = 0, acc_retain = 0,
           mia = 0;
    std::optional<double> lp_sub, asr;
  };
  std::optional<Diffs> diffs;

  /// Throws InvalidArgument when a bounded field leaves its range.
  void check_ranges() const;
  void fill_diffs(const MetricsReport& reference);
};

struct EvalConfig {
  ProbeConfig probe;
  MiaConfig mia;
  std::uint64_t kmeans_seed = 0;
};

/// Computes every applicable metric of `model` on the bundle's partitions.
MetricsReport evaluate_model(const nnet::MlpModel& model, const data::DataBundle& bundle,
                             const std::optional<MetricsReport>& reference = std::nullopt,
                             const EvalConfig& cfg = {});

/// LP(D_r) and LP(D_f) only (cheap path for stability curves).
struct ProbePair {
  double lp_retain = 0.0;
  double lp_forget = 0.0;
};
ProbePair probe_pair(const nnet::MlpModel& model, const data::DataBundle& bundle,
                     const ProbeConfig& cfg = {});

}  // namespace muda::metrics
