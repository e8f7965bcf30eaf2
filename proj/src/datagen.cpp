#include "muda/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "muda/error.hpp"

namespace muda::data {

std::string to_string(ForgetMode mode) {
  switch (mode) {
    case ForgetMode::kClass: return "class";
    case ForgetMode::kSubclass: return "subclass";
    case ForgetMode::kPoisoned: return "poisoned";
  }
  return "class";
}

ForgetMode forget_mode_from_string(const std::string& name) {
  if (name == "class") return ForgetMode::kClass;
  if (name == "subclass") return ForgetMode::kSubclass;
  if (name == "poisoned") return ForgetMode::kPoisoned;
  throw Error(ErrorCode::kConfigInvalid, "unknown forget mode '" + name + "'");
}

std::vector<std::size_t> DataBundle::forget_test_indices() const {
  std::vector<std::size_t> out;
  if (!forget_spec || forget_spec->mode == ForgetMode::kPoisoned) return out;
  for (std::size_t i = 0; i < test_y.size(); ++i) {
    const int id = forget_spec->mode == ForgetMode::kClass ? test_y[i] : test_sub[i];
    if (id == forget_spec->target) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> DataBundle::retain_test_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < test_y.size(); ++i) {
    if (forget_spec && forget_spec->mode != ForgetMode::kPoisoned) {
      const int id = forget_spec->mode == ForgetMode::kClass ? test_y[i] : test_sub[i];
      if (id == forget_spec->target) continue;
    }
    out.push_back(i);
  }
  return out;
}

void DataBundle::check_invariants() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); };
  if (train_x.rows() != train_y.size() || test_x.rows() != test_y.size()) fail("x/y length");
  if (!train_sub.empty()) {
    if (train_sub.size() != train_y.size() || test_sub.size() != test_y.size()) fail("subclass length");
    const auto spc = static_cast<int>(subclasses_per_class);
    for (std::size_t i = 0; i < train_y.size(); ++i)
      if (!poisoned.empty() && poisoned[i]) continue;
      else if (train_sub[i] / spc != train_y[i]) fail("subclass does not refine class");
    for (std::size_t i = 0; i < test_y.size(); ++i)
      if (test_sub[i] / spc != test_y[i]) fail("subclass does not refine class");
  }
  if (!poisoned.empty() && poisoned.size() != train_y.size()) fail("poison flag length");
  if (!forget_spec) return;

  std::vector<int> owner(train_y.size(), 0);
  for (std::size_t i : forget) {
    if (i >= owner.size() || owner[i]++) fail("forget index invalid or repeated");
  }
  for (std::size_t i : retain) {
    if (i >= owner.size() || owner[i]++) fail("forget and retain overlap");
  }
  if (std::any_of(owner.begin(), owner.end(), [](int c) { return c != 1; })) {
    fail("forget and retain do not cover the train split");
  }
  if (retain_prime.size() != std::min(forget.size(), retain.size())) fail("|retain_prime|");
  for (std::size_t i : retain_prime) {
    if (!std::binary_search(retain.begin(), retain.end(), i)) fail("retain_prime outside retain");
  }
}

DataBundle gen_blobs(const BlobConfig& cfg, std::uint64_t seed) {
  if (cfg.num_classes < 1 || cfg.subclasses_per_class < 1 || cfg.dim < 1 ||
      cfg.n_per_subclass < 1 || !(cfg.spread > 0.0) || !(cfg.subclass_offset >= 0.0) ||
      !(cfg.test_fraction >= 0.0 && cfg.test_fraction < 1.0)) {
    throw Error(ErrorCode::kInvalidCounts, "gen_blobs configuration");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t n_sub = cfg.num_classes * cfg.subclasses_per_class;
  Matrix means(n_sub, cfg.dim);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    std::vector<double> center(cfg.dim);
    for (double& v : center) v = normal(rng);
    for (std::size_t s = 0; s < cfg.subclasses_per_class; ++s) {
      auto m = means.row(c * cfg.subclasses_per_class + s);
      for (std::size_t j = 0; j < cfg.dim; ++j) m[j] = center[j] + cfg.subclass_offset * normal(rng);
    }
  }

  const auto n_train_per = static_cast<std::size_t>(
      std::llround((1.0 - cfg.test_fraction) * static_cast<double>(cfg.n_per_subclass)));
  const std::size_t n_test_per = cfg.n_per_subclass - n_train_per;

  DataBundle b;
  b.num_classes = cfg.num_classes;
  b.subclasses_per_class = cfg.subclasses_per_class;
  b.train_x = Matrix(n_sub * n_train_per, cfg.dim);
  b.test_x = Matrix(n_sub * n_test_per, cfg.dim);
  std::size_t tr = 0, te = 0;
  for (std::size_t s = 0; s < n_sub; ++s) {
    const int cls = static_cast<int>(s / cfg.subclasses_per_class);
    for (std::size_t i = 0; i < cfg.n_per_subclass; ++i) {
      const bool is_train = i < n_train_per;
      auto row = is_train ? b.train_x.row(tr++) : b.test_x.row(te++);
      for (std::size_t j = 0; j < cfg.dim; ++j) row[j] = means(s, j) + cfg.spread * normal(rng);
      (is_train ? b.train_y : b.test_y).push_back(cls);
      (is_train ? b.train_sub : b.test_sub).push_back(static_cast<int>(s));
    }
  }
  return b;
}

DataBundle split_forget_retain(DataBundle b, const ForgetSpec& spec, std::uint64_t seed) {
  b.forget.clear();
  b.retain.clear();
  b.retain_prime.clear();
  switch (spec.mode) {
    case ForgetMode::kClass:
      if (spec.target < 0 || static_cast<std::size_t>(spec.target) >= b.num_classes) {
        throw Error(ErrorCode::kTargetMissing, "forget class " + std::to_string(spec.target));
      }
      break;
    case ForgetMode::kSubclass:
      if (b.train_sub.empty() || spec.target < 0 ||
          static_cast<std::size_t>(spec.target) >= b.num_subclasses()) {
        throw Error(ErrorCode::kTargetMissing, "forget subclass " + std::to_string(spec.target));
      }
      break;
    case ForgetMode::kPoisoned:
      if (b.poisoned.empty()) throw Error(ErrorCode::kTargetMissing, "bundle has no poison flags");
      break;
  }
  for (std::size_t i = 0; i < b.num_train(); ++i) {
    bool in_forget = false;
    switch (spec.mode) {
      case ForgetMode::kClass: in_forget = b.train_y[i] == spec.target; break;
      case ForgetMode::kSubclass: in_forget = b.train_sub[i] == spec.target; break;
      case ForgetMode::kPoisoned: in_forget = b.poisoned[i] != 0; break;
    }
    (in_forget ? b.forget : b.retain).push_back(i);
  }
  if (b.forget.empty()) throw Error(ErrorCode::kEmptyForgetSet, "no train sample matches");

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pool = b.retain;
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(b.forget.size(), pool.size()));
  std::sort(pool.begin(), pool.end());
  b.retain_prime = std::move(pool);
  b.forget_spec = spec;
  b.check_invariants();
  return b;
}

DataBundle poison_backdoor(DataBundle b, const std::vector<std::size_t>& trigger_dims,
                           double trigger_value, int target_label, double fraction,
                           std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw Error(ErrorCode::kInvalidFraction, "fraction must lie in (0, 1)");
  }
  for (std::size_t d : trigger_dims)
    if (d >= b.train_x.cols()) throw Error(ErrorCode::kDimOutOfRange, "trigger dim");
  if (trigger_dims.empty()) throw Error(ErrorCode::kDimOutOfRange, "empty trigger");
  if (target_label < 0 || static_cast<std::size_t>(target_label) >= b.num_classes) {
    throw Error(ErrorCode::kTargetMissing, "backdoor target label");
  }

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < b.num_train(); ++i)
    if (b.train_y[i] != target_label) candidates.push_back(i);
  const auto count = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(b.num_train())));
  if (count == 0 || count > candidates.size()) {
    throw Error(ErrorCode::kInvalidFraction, "poison count out of range");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(count);

  b.poisoned.assign(b.num_train(), 0);
  for (std::size_t i : candidates) {
    b.poisoned[i] = 1;
    for (std::size_t d : trigger_dims) b.train_x(i, d) = trigger_value;
    b.train_y[i] = target_label;
  }

  Backdoor bd;
  bd.trigger_dims = trigger_dims;
  bd.trigger_value = trigger_value;
  bd.target_label = target_label;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < b.num_test(); ++i)
    if (b.test_y[i] != target_label) keep.push_back(i);
  bd.triggered_test_x = b.test_x.gather_rows(keep);
  for (std::size_t r = 0; r < keep.size(); ++r) {
    for (std::size_t d : trigger_dims) bd.triggered_test_x(r, d) = trigger_value;
    bd.triggered_test_y.push_back(b.test_y[keep[r]]);
  }
  b.backdoor = std::move(bd);
  return split_forget_retain(std::move(b), {ForgetMode::kPoisoned, target_label}, seed + 1);
}

Subset gather(const DataBundle& b, Partition part, AccessAudit* audit) {
  Subset s;
  switch (part) {
    case Partition::kForget: s.indices = b.forget; break;
    case Partition::kRetain: s.indices = b.retain; break;
    case Partition::kRetainPrime: s.indices = b.retain_prime; break;
    case Partition::kTrain:
      s.indices.resize(b.num_train());
      std::iota(s.indices.begin(), s.indices.end(), 0);
      break;
  }
  if (part != Partition::kTrain && !b.has_partitions()) {
    throw Error(ErrorCode::kInvalidArgument, "bundle has no forget/retain partitions");
  }
  if (audit) {
    std::vector<std::uint8_t> in_forget(b.num_train(), 0), in_prime(b.num_train(), 0);
    for (std::size_t i : b.forget) in_forget[i] = 1;
    for (std::size_t i : b.retain_prime) in_prime[i] = 1;
    for (std::size_t i : s.indices) {
      if (in_forget[i]) ++audit->forget;
      else if (in_prime[i]) ++audit->retain_prime;
      else ++audit->retain_other;
    }
  }
  s.x = b.train_x.gather_rows(s.indices);
  for (std::size_t i : s.indices) s.y.push_back(b.train_y[i]);
  return s;
}

std::string dump_csv(const DataBundle& b) {
  std::ostringstream out;
  out.precision(17);
  const std::size_t d = b.train_x.cols();
  for (std::size_t j = 0; j < d; ++j) out << 'f' << j << ',';
  out << "class,subclass,split,partition,poisoned\n";

  std::vector<std::string> part(b.num_train(), "none");
  for (std::size_t i : b.retain) part[i] = "retain";
  for (std::size_t i : b.retain_prime) part[i] = "retain_prime";
  for (std::size_t i : b.forget) part[i] = "forget";

  for (std::size_t i = 0; i < b.num_train(); ++i) {
    for (double v : b.train_x.row(i)) out << v << ',';
    out << b.train_y[i] << ',' << (b.train_sub.empty() ? -1 : b.train_sub[i]) << ",train,"
        << part[i] << ',' << (b.poisoned.empty() ? 0 : int(b.poisoned[i])) << '\n';
  }
  for (std::size_t i = 0; i < b.num_test(); ++i) {
    for (double v : b.test_x.row(i)) out << v << ',';
    out << b.test_y[i] << ',' << (b.test_sub.empty() ? -1 : b.test_sub[i]) << ",test,none,0\n";
  }
  return out.str();
}

}  // namespace muda::data
