#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "muda/datagen.hpp"
#include "muda/error.hpp"

using namespace muda::data;

namespace {

muda::ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const muda::Error& e) {
    return e.code();
  }
  return muda::ErrorCode::kInvalidArgument;
}

BlobConfig small() {
  BlobConfig cfg;
  cfg.num_classes = 5;
  cfg.subclasses_per_class = 2;
  cfg.dim = 16;
  cfg.n_per_subclass = 50;
  return cfg;
}

}  // namespace

TEST_CASE("gen_blobs is a pure function of config and seed") {
  const auto a = gen_blobs(small(), 7), b = gen_blobs(small(), 7), c = gen_blobs(small(), 8);
  CHECK(a.train_x == b.train_x);
  CHECK(a.test_x == b.test_x);
  CHECK(a.train_y == b.train_y);
  CHECK_FALSE(a.train_x == c.train_x);
}

TEST_CASE("hierarchy and split sizes") {
  const auto b = gen_blobs(small(), 1);
  CHECK(b.num_train() == 10 * 40);
  CHECK(b.num_test() == 10 * 10);
  CHECK(b.train_x.cols() == 16);
  const std::set<int> subs(b.train_sub.begin(), b.train_sub.end());
  CHECK(subs.size() == 10);
  for (std::size_t i = 0; i < b.num_train(); ++i) CHECK(b.train_sub[i] / 2 == b.train_y[i]);
  for (int s = 0; s < 10; ++s) CHECK(std::count(b.train_sub.begin(), b.train_sub.end(), s) == 40);
  CHECK(b.train_x.all_finite());
}

TEST_CASE("subclass means sit around their class center") {
  // With no subclass offset, the two subclasses of a class share a mean.
  BlobConfig cfg = small();
  cfg.subclass_offset = 0.0;
  cfg.spread = 1e-3;
  const auto b = gen_blobs(cfg, 3);
  CHECK(std::abs(b.train_x(0, 0) - b.train_x(40, 0)) < 0.05);
  CHECK(std::abs(b.train_x(0, 0) - b.train_x(80, 0)) > 0.05);
}

TEST_CASE("class forgetting partitions") {
  const auto b = split_forget_retain(gen_blobs(small(), 2), {ForgetMode::kClass, 3}, 9);
  CHECK(b.forget.size() == 80);
  CHECK(b.forget.size() + b.retain.size() == b.num_train());
  CHECK(b.retain_prime.size() == b.forget.size());
  for (std::size_t i : b.forget) CHECK(b.train_y[i] == 3);
  for (std::size_t i : b.retain) CHECK(b.train_y[i] != 3);
  CHECK(std::includes(b.retain.begin(), b.retain.end(), b.retain_prime.begin(), b.retain_prime.end()));
  CHECK(std::is_sorted(b.retain_prime.begin(), b.retain_prime.end()));
  for (std::size_t i : b.forget_test_indices()) CHECK(b.test_y[i] == 3);
  CHECK(b.forget_test_indices().size() + b.retain_test_indices().size() == b.num_test());
  const auto again = split_forget_retain(gen_blobs(small(), 2), {ForgetMode::kClass, 3}, 9);
  CHECK(again.retain_prime == b.retain_prime);
  CHECK_NOTHROW(b.check_invariants());
}

TEST_CASE("subclass forgetting partitions") {
  const auto b = split_forget_retain(gen_blobs(small(), 2), {ForgetMode::kSubclass, 7}, 9);
  CHECK(b.forget.size() == 40);
  for (std::size_t i : b.forget) CHECK(b.train_sub[i] == 7);
  // The sibling subclass stays in the retain set.
  std::size_t sibling = 0;
  for (std::size_t i : b.retain) sibling += b.train_sub[i] == 6;
  CHECK(sibling == 40);
  for (std::size_t i : b.forget_test_indices()) CHECK(b.test_sub[i] == 7);
}

TEST_CASE("retain_prime is capped by the retain size") {
  BlobConfig cfg = small();
  cfg.num_classes = 2;
  cfg.subclasses_per_class = 1;
  const auto base = gen_blobs(cfg, 4);
  const auto b = split_forget_retain(base, {ForgetMode::kClass, 0}, 1);
  CHECK(b.retain_prime.size() == std::min(b.forget.size(), b.retain.size()));
}

TEST_CASE("backdoor poisoning") {
  const auto b = poison_backdoor(gen_blobs(small(), 5), {0, 1, 2}, 6.0, 3, 0.05, 11);
  const std::size_t n = b.num_train();
  const auto expected = static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(n)));
  CHECK(b.forget.size() == expected);
  CHECK(std::count(b.poisoned.begin(), b.poisoned.end(), 1) == static_cast<long>(expected));
  for (std::size_t i : b.forget) {
    CHECK(b.poisoned[i] == 1);
    CHECK(b.train_y[i] == 3);
    CHECK(b.train_sub[i] / 2 != 3);  // drawn from outside the target class
    for (std::size_t d : {0, 1, 2}) CHECK(b.train_x(i, d) == 6.0);
  }
  REQUIRE(b.backdoor.has_value());
  CHECK(b.backdoor->triggered_test_x.rows() == b.num_test() - 20);
  for (int y : b.backdoor->triggered_test_y) CHECK(y != 3);
  CHECK(b.retain_prime.size() == b.forget.size());
  CHECK(b.forget_test_indices().empty());
  CHECK(b.retain_test_indices().size() == b.num_test());
}

TEST_CASE("gather and access audit") {
  const auto b = split_forget_retain(gen_blobs(small(), 2), {ForgetMode::kClass, 1}, 9);
  AccessAudit audit;
  const auto f = gather(b, Partition::kForget, &audit);
  CHECK(f.x.rows() == b.forget.size());
  CHECK(audit.forget == b.forget.size());
  gather(b, Partition::kRetainPrime, &audit);
  CHECK(audit.retain_prime == b.retain_prime.size());
  CHECK(audit.retain_other == 0);
  gather(b, Partition::kRetain, &audit);
  CHECK(audit.retain_other == b.retain.size() - b.retain_prime.size());
  CHECK(code_of([] { gather(gen_blobs(small(), 2), Partition::kForget); }) ==
        muda::ErrorCode::kInvalidArgument);
}

TEST_CASE("csv dump has a header and one row per sample") {
  const auto b = split_forget_retain(gen_blobs(small(), 2), {ForgetMode::kClass, 1}, 9);
  const std::string csv = dump_csv(b);
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == b.num_train() + b.num_test() + 1);
}

TEST_CASE("datagen errors") {
  BlobConfig bad = small();
  bad.n_per_subclass = 0;
  CHECK(code_of([&] { gen_blobs(bad, 0); }) == muda::ErrorCode::kInvalidCounts);
  bad = small();
  bad.spread = 0.0;
  CHECK(code_of([&] { gen_blobs(bad, 0); }) == muda::ErrorCode::kInvalidCounts);
  const auto base = gen_blobs(small(), 0);
  CHECK(code_of([&] { split_forget_retain(base, {ForgetMode::kClass, 5}, 0); }) == muda::ErrorCode::kTargetMissing);
  CHECK(code_of([&] { split_forget_retain(base, {ForgetMode::kSubclass, -1}, 0); }) ==
        muda::ErrorCode::kTargetMissing);
  CHECK(code_of([&] { split_forget_retain(base, {ForgetMode::kPoisoned, 0}, 0); }) ==
        muda::ErrorCode::kTargetMissing);
  CHECK(code_of([&] { poison_backdoor(base, {0}, 6.0, 1, 0.0, 0); }) == muda::ErrorCode::kInvalidFraction);
  CHECK(code_of([&] { poison_backdoor(base, {0}, 6.0, 1, 1.0, 0); }) == muda::ErrorCode::kInvalidFraction);
  CHECK(code_of([&] { poison_backdoor(base, {16}, 6.0, 1, 0.1, 0); }) == muda::ErrorCode::kDimOutOfRange);
  CHECK(code_of([&] { poison_backdoor(base, {0}, 6.0, 9, 0.1, 0); }) == muda::ErrorCode::kTargetMissing);
  CHECK(code_of([] { forget_mode_from_string("everything"); }) == muda::ErrorCode::kConfigInvalid);
  CHECK(forget_mode_from_string(to_string(ForgetMode::kSubclass)) == ForgetMode::kSubclass);
}
