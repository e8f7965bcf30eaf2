#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "muda/matrix.hpp"

namespace muda::data {

enum class ForgetMode { kClass, kSubclass, kPoisoned };

std::string to_string(ForgetMode mode);
ForgetMode forget_mode_from_string(const std::string& name);

struct ForgetSpec {
  ForgetMode mode = ForgetMode::kClass;
  int target = 0;  // class or subclass id; unused for kPoisoned
};

struct BlobConfig {
  std::size_t num_classes = 10;
  std::size_t subclasses_per_class = 2;
  std::size_t dim = 32;
  std::size_t n_per_subclass = 200;
  double spread = 1.5;            // stddev of samples around their subclass mean
  double subclass_offset = 1.0;   // stddev of subclass means around their class center
  double test_fraction = 0.2;
};

struct Backdoor {
  std::vector<std::size_t> trigger_dims;
  double trigger_value = 0.0;
  int target_label = -1;
  Matrix triggered_test_x;           // clean test samples with the trigger stamped in
  std::vector<int> triggered_test_y; // their true labels (never target_label)
};

/// Labeled dataset with train/test splits and the forget/retain partitions.
struct DataBundle {
  Matrix train_x, test_x;
  std::vector<int> train_y, test_y;
  std::vector<int> train_sub, test_sub;  // subclass ids; parent class = sub / subclasses_per_class
  std::size_t num_classes = 0;
  std::size_t subclasses_per_class = 1;

  std::vector<std::uint8_t> poisoned;  // per train sample; empty when unpoisoned
  std::optional<Backdoor> backdoor;

  std::optional<ForgetSpec> forget_spec;
  std::vector<std::size_t> forget, retain, retain_prime;  // sorted train indices

  std::size_t num_train() const { return train_y.size(); }
  std::size_t num_test() const { return test_y.size(); }
  std::size_t num_subclasses() const { return num_classes * subclasses_per_class; }
  bool has_partitions() const { return forget_spec.has_value(); }

  /// Test samples that represent the forget set: the forget class or
  /// subclass. Empty for poisoned bundles.
  std::vector<std::size_t> forget_test_indices() const;
  /// Test samples outside the forget class/subclass (all test for poisoned).
  std::vector<std::size_t> retain_test_indices() const;

  /// Throws InvalidArgument on any broken partition, size or hierarchy invariant.
  void check_invariants() const;
};

/// Gaussian blob hierarchy: class centers ~ N(0, I), subclass means ~
/// center + N(0, subclass_offset^2 I), samples ~ mean + N(0, spread^2 I).
/// The first round((1 - test_fraction) n) samples of every subclass go to train.
DataBundle gen_blobs(const BlobConfig& cfg, std::uint64_t seed);

/// Fills forget/retain/retain_prime. retain_prime is a uniform sample without
/// replacement from retain of size min(|forget|, |retain|).
DataBundle split_forget_retain(DataBundle bundle, const ForgetSpec& spec, std::uint64_t seed);

/// Stamps `trigger_value` into `trigger_dims` of round(fraction * n_train)
/// train samples drawn from outside the target class and relabels them to
/// `target_label`. The poisoned samples become the forget set.
DataBundle poison_backdoor(DataBundle bundle, const std::vector<std::size_t>& trigger_dims,
                           double trigger_value, int target_label, double fraction,
                           std::uint64_t seed);

// --- partition access with auditing -------------------------------------------

enum class Partition { kForget, kRetain, kRetainPrime, kTrain };

/// Counts of train samples read per partition. retain_other counts reads of
/// retain samples outside retain_prime.
struct AccessAudit {
  std::size_t forget = 0;
  std::size_t retain_prime = 0;
  std::size_t retain_other = 0;
};

struct Subset {
  Matrix x;
  std::vector<int> y;
  std::vector<std::size_t> indices;  // train indices of the rows
};

Subset gather(const DataBundle& bundle, Partition part, AccessAudit* audit = nullptr);

/// One row per sample: f_0..f_{d-1}, class, subclass, split, partition, poisoned.
std::string dump_csv(const DataBundle& bundle);

}  // namespace muda::data
