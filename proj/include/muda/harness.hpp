#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "muda/datagen.hpp"
#include "muda/metrics.hpp"
#include "muda/unlearn.hpp"

namespace muda::harness {

struct BackdoorConfig {
  std::vector<std::size_t> trigger_dims{0, 1, 2};
  double trigger_value = 6.0;
  int target_label = -1;  // -1: odd classes 1, 3, 5, ... by seed position
  double fraction = 0.05;
};

/// One compared method. `name` labels its rows and output files.
struct MethodEntry {
  std::string name;
  unlearn::UnlearnConfig cfg;
};

struct StabilityConfig {
  std::vector<std::size_t> budget_multipliers{1, 5};
  std::size_t sample_every = 25;
  std::vector<std::string> methods{"muda", "neggrad"};  // names from the method list
};

struct ExperimentConfig {
  data::BlobConfig data;
  std::vector<std::size_t> hidden{64, 16};
  unlearn::TrainRecipe train;
  data::ForgetSpec forget{data::ForgetMode::kClass, -1};  // target -1: round-robin by seed position
  std::vector<MethodEntry> methods;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  metrics::EvalConfig eval;
  BackdoorConfig backdoor;
  StabilityConfig stability;
  std::filesystem::path output_dir = "out";
  bool emit_features = false;
  bool run_backdoor = false;
  bool run_stability = false;

  std::vector<std::size_t> layer_dims() const;
  /// Throws ConfigInvalid.
  void validate() const;
  /// Throws ConfigInvalid when no entry carries `name`.
  const MethodEntry& method(const std::string& name) const;
};

/// Defaults: the synthetic class-unlearning task and every method with the
/// learning rate picked from its search grid.
ExperimentConfig default_config();

/// Parses the structured-text config. Keys that are absent keep the
/// defaults of default_config(). Throws ConfigInvalid.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);

/// Rows and per-method summaries. Row order per seed: original, retrained,
/// then the configured methods.
struct ComparisonTable {
  std::vector<metrics::MetricsReport> rows;

  struct Summary {
    std::string method;
    metrics::MetricsReport mean;          // field means over non-failed seeds
    metrics::MetricsReport::Diffs mean_diff;  // mean over seeds of |value - retrained|
    std::size_t seeds = 0;
    std::vector<std::string> winners;     // metric names where this method is closest
  };
  std::vector<Summary> summaries;

  std::string to_csv() const;
  nlohmann::ordered_json to_json() const;
  /// Rows of `method` (in seed order).
  std::vector<const metrics::MetricsReport*> rows_of(const std::string& method) const;
  const Summary* summary(const std::string& method) const;
};

/// Rebuilds the rows of a table.json document and checks their ranges.
ComparisonTable table_from_json(const nlohmann::json& doc);

/// Fills diffs of every row against the retrained row of the same seed,
/// builds per-method summaries and marks the per-metric winners among the
/// unlearning methods (ties flagged jointly).
ComparisonTable compare_to_retrained(ComparisonTable table);

/// Mean over {da, lp_forget, f1, nmi} of a summary's mean diffs.
double feature_level_gap(const ComparisonTable::Summary& s);

/// Per seed: data, theta_o, theta_r, every method, evaluation. Writes
/// table.csv, table.json and trace_<method>_<seed>.csv to cfg.output_dir
/// (after every seed, so partial results survive a failure).
ComparisonTable run_experiment(const ExperimentConfig& cfg);

/// Class-unlearning replaced by unlearning of trigger-poisoned samples.
ComparisonTable run_backdoor(const ExperimentConfig& cfg);

struct CurvePoint {
  std::size_t iteration = 0;
  double lp_retain = 0.0;
  double lp_forget = 0.0;
};

struct StabilityCurve {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t base_iterations = 0;
  std::vector<CurvePoint> points;

  std::string to_csv() const;
  /// Probe accuracy at the sample closest to `iteration` (never later).
  const CurvePoint& at(std::size_t iteration) const;
};

/// Runs each stability method for max(multiplier) x its budget and samples
/// LP(D_r), LP(D_f) every `sample_every` steps (plus step 0 and the last step). Writes
/// stability_<method>_<seed>.csv.
std::vector<StabilityCurve> run_stability(const ExperimentConfig& cfg);

// --- pieces shared with the CLI ---------------------------------------------------

struct SeedSetup {
  std::uint64_t seed = 0;
  data::DataBundle bundle;
};

/// Data for the `position`-th seed, partitioned according to cfg.forget.
SeedSetup prepare_seed(const ExperimentConfig& cfg, std::size_t position, bool poisoned = false);

std::uint64_t init_seed(std::uint64_t seed);
/// Config of `entry` with its seed derived from the run seed.
unlearn::UnlearnConfig seeded_method(std::uint64_t seed, const MethodEntry& entry);

/// features_<name>.csv content: sample_id, split, partition, f_0..f_{C-1}.
std::string features_csv(const nnet::MlpModel& model, const data::DataBundle& bundle);

std::string format_double(double v);

}  // namespace muda::harness
