#include <doctest.h>

#include <cmath>
#include <functional>

#include "muda/error.hpp"
#include "muda/metrics.hpp"
#include "muda/unlearn.hpp"
#include "test_support.hpp"

using muda::Matrix;
namespace ad = muda::autodiff;
namespace nn = muda::nnet;
namespace ul = muda::unlearn;
namespace data = muda::data;
using namespace muda::testing;

namespace {

muda::ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const muda::Error& e) {
    return e.code();
  }
  return muda::ErrorCode::kInvalidArgument;
}

struct Fixture {
  data::DataBundle bundle;
  std::vector<std::size_t> dims{8, 16, 8, 5};
  nn::MlpModel original;

  explicit Fixture(data::ForgetSpec spec = {data::ForgetMode::kClass, 2}) {
    data::BlobConfig cfg;
    cfg.num_classes = 5;
    cfg.dim = 8;
    cfg.n_per_subclass = 30;
    bundle = data::split_forget_retain(data::gen_blobs(cfg, 3), spec, 4);
    ul::TrainRecipe recipe;
    recipe.epochs = 5;
    original = ul::train_original(bundle, dims, recipe, 5);
  }
};

ul::UnlearnConfig config(ul::Method m, std::size_t iterations = 12) {
  ul::UnlearnConfig c;
  c.method = m;
  c.sgd = {0.05, 0.0, 1.0, 0.0};
  c.total_iterations = iterations;
  c.batch_size = 16;
  c.seed = 21;
  return c;
}

double max_param_diff(const nn::MlpModel& a, const nn::MlpModel& b) {
  double d = 0.0;
  for (std::size_t l = 0; l < a.num_layers(); ++l) {
    d = std::max(d, muda::max_abs_diff(a.layers()[l].weights, b.layers()[l].weights));
    d = std::max(d, muda::max_abs_diff(a.layers()[l].bias, b.layers()[l].bias));
  }
  return d;
}

}  // namespace

TEST_CASE("self-distillation target") {
  const std::vector<double> p{0.5, 0.3, 0.2};
  const auto t = ul::sd_target(p, 0);
  CHECK(t[0] == 0.0);
  CHECK(t[1] == doctest::Approx(0.6));
  CHECK(t[2] == doctest::Approx(0.4));
  const std::vector<double> already{0.0, 0.25, 0.75};
  CHECK(ul::sd_target(already, 0) == already);
  const std::vector<double> all{1.0, 0.0};
  CHECK(code_of([&] { ul::sd_target(all, 0); }) == muda::ErrorCode::kMassConcentrated);
  const std::vector<double> unnorm{0.5, 0.6};
  CHECK(code_of([&] { ul::sd_target(unnorm, 1); }) == muda::ErrorCode::kNotNormalized);
}

TEST_CASE("self-distillation loss") {
  ad::Tape tape;
  SUBCASE("matches the probability-space oracle") {
    std::mt19937_64 rng(71);
    const Matrix z = random_matrix(9, 6, rng, -3.0, 3.0);
    const auto loss = ul::sd_loss(tape.leaf(z), 4);
    CHECK(loss.scalar() == doctest::Approx(kl_plain(z, sd_log_target_plain(z, 4))).epsilon(1e-10));
  }
  SUBCASE("near zero once the forget class has no mass") {
    const Matrix z{{-60.0, 1.0, 2.0}, {-60.0, 0.5, -0.5}};
    CHECK(ul::sd_loss(tape.leaf(z), 0).scalar() < 1e-20);
  }
  SUBCASE("dominant forget class gives a large finite loss") {
    // probs [0.5, 0.5], forget class 0: the floored target keeps this finite.
    const double expected = 0.5 * (std::log(0.5) - std::log(1e-12)) + 0.5 * std::log(0.5);
    const auto loss = ul::sd_loss(tape.leaf(Matrix{{0.0, 0.0}}), 0);
    CHECK(std::isfinite(loss.scalar()));
    CHECK(loss.scalar() == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("target is detached") {
    const Matrix z{{0.2, -0.4, 1.0}};
    const auto x = tape.leaf(z);
    tape.backward(ul::sd_loss(x, 1));
    // d/dz of KL(softmax(z) || t) with constant t is p * (log p - log t - KL).
    const Matrix lp = log_softmax_plain(z), lt = sd_log_target_plain(z, 1);
    double kl = 0.0;
    for (std::size_t c = 0; c < 3; ++c) kl += std::exp(lp(0, c)) * (lp(0, c) - lt(0, c));
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(tape.grad(x)(0, c) == doctest::Approx(std::exp(lp(0, c)) * (lp(0, c) - lt(0, c) - kl)).epsilon(1e-9));
  }
  CHECK(code_of([&] { ul::sd_loss(tape.leaf(Matrix{{0.0, 0.0}}), 2); }) == muda::ErrorCode::kInvalidArgument);
}

TEST_CASE("alignment loss") {
  ad::Tape tape;
  const Matrix p{{1.0, 0.0}, {0.0, 0.0}};
  CHECK(ul::da_loss(tape.leaf(Matrix{{3.0, 0.0}}), p).scalar() == doctest::Approx(-1.0));
  CHECK(ul::da_loss(tape.leaf(Matrix{{0.0, 3.0}}), p).scalar() == doctest::Approx(0.0));
  CHECK(std::abs(ul::da_loss(tape.leaf(Matrix{{1.0, 0.0}, {0.0, 1.0}}), p).scalar() + 0.7071067811865475) < 1e-12);
  CHECK(code_of([&] { ul::da_loss(tape.leaf(Matrix(3, 2)), p); }) == muda::ErrorCode::kDegenerateForgetFeatures);
}

TEST_CASE("no gradient reaches the retain branch of the alignment loss") {
  Fixture f;
  const Matrix fx = f.bundle.train_x.gather_rows(f.bundle.forget);
  const Matrix rx = f.bundle.train_x.gather_rows(f.bundle.retain_prime);

  ad::Tape full;
  const auto params = nn::bind(full, f.original);
  ad::Var retain_node;
  full.backward(ul::da_loss(full, params, fx, rx, &retain_node));
  CHECK(full.grad(retain_node) == Matrix(retain_node.value().rows(), retain_node.value().cols()));

  // Same gradient as treating the projector as a constant from the start.
  const Matrix projector = muda::metrics::retain_subspace(nn::features(f.original, rx)).projector;
  const auto reference = tape_gradient(f.original, [&](ad::Tape& t, const nn::TapedModel& p) {
    return ul::da_loss(nn::forward(p, t.constant(fx)).features, projector);
  });
  CHECK(relative_error(flatten(nn::collect_gradients(full, params)), reference) < 1e-12);
}

TEST_CASE("distilled class by forget mode") {
  CHECK(ul::distilled_class(Fixture().bundle) == std::optional<std::size_t>(2));
  CHECK_FALSE(ul::distilled_class(Fixture({data::ForgetMode::kSubclass, 3}).bundle).has_value());
}

TEST_CASE("zero budget or zero learning rate leaves the model unchanged") {
  Fixture f;
  for (ul::Method m : {ul::Method::kMuda, ul::Method::kFt, ul::Method::kNegGrad, ul::Method::kNegGradFt,
                       ul::Method::kCfK, ul::Method::kFtClassifierOnly}) {
    CHECK(ul::run_method(f.original, f.bundle, config(m, 0)).model == f.original);
    auto c = config(m);
    c.sgd.learning_rate = 0.0;
    CHECK(ul::run_method(f.original, f.bundle, c).model == f.original);
  }
}

TEST_CASE("equivalences between methods") {
  Fixture f;
  SUBCASE("MUDA without a forget phase is finetuning") {
    auto c = config(ul::Method::kMuda);
    c.alpha = c.beta = 0.0;
    c.forget_epochs = 0;
    CHECK(ul::run_method(f.original, f.bundle, c).model ==
          ul::run_method(f.original, f.bundle, config(ul::Method::kFt)).model);
  }
  SUBCASE("NegGrad+FT without recovery is NegGrad") {
    auto c = config(ul::Method::kNegGradFt);
    c.recover_epochs = 0;
    CHECK(ul::run_method(f.original, f.bundle, c).model ==
          ul::run_method(f.original, f.bundle, config(ul::Method::kNegGrad)).model);
  }
  SUBCASE("NegGrad+FT without a forget phase is finetuning") {
    auto c = config(ul::Method::kNegGradFt);
    c.forget_epochs = 0;
    CHECK(ul::run_method(f.original, f.bundle, c).model ==
          ul::run_method(f.original, f.bundle, config(ul::Method::kFt)).model);
  }
  SUBCASE("CF-k over every layer is finetuning") {
    auto c = config(ul::Method::kCfK);
    c.k_layers = 3;
    CHECK(ul::run_method(f.original, f.bundle, c).model ==
          ul::run_method(f.original, f.bundle, config(ul::Method::kFt)).model);
  }
  SUBCASE("one NegGrad step ascends the forget cross-entropy") {
    auto c = config(ul::Method::kNegGrad, 1);
    c.batch_size = f.bundle.forget.size();
    const auto stepped = ul::run_method(f.original, f.bundle, c).model;
    const Matrix fx = f.bundle.train_x.gather_rows(f.bundle.forget);
    std::vector<int> fy;
    for (std::size_t i : f.bundle.forget) fy.push_back(f.bundle.train_y[i]);
    nn::MlpModel base = f.original;
    const auto params = parameter_pointers(base);
    const auto g = tape_gradient(f.original, [&](ad::Tape& t, const nn::TapedModel& p) {
      return ad::cross_entropy(nn::forward(p, t.constant(fx)).logits, fy);
    });
    nn::MlpModel expected = f.original;
    auto out = parameter_pointers(expected);
    for (std::size_t i = 0; i < out.size(); ++i) *out[i] = *params[i] + 0.05 * g[i];
    CHECK(max_param_diff(stepped, expected) < 1e-12);
  }
}

TEST_CASE("frozen layers stay frozen") {
  Fixture f;
  SUBCASE("CF-k") {
    auto c = config(ul::Method::kCfK);
    c.k_layers = 2;
    const auto m = ul::run_method(f.original, f.bundle, c).model;
    CHECK(m.layers()[0] == f.original.layers()[0]);
    CHECK_FALSE(m.layers()[1] == f.original.layers()[1]);
    CHECK_FALSE(m.layers()[2] == f.original.layers()[2]);
  }
  SUBCASE("classifier-only finetuning keeps the features") {
    const auto m = ul::run_method(f.original, f.bundle, config(ul::Method::kFtClassifierOnly)).model;
    CHECK(m.layers()[0] == f.original.layers()[0]);
    CHECK(m.layers()[1] == f.original.layers()[1]);
    CHECK(nn::features(m, f.bundle.test_x) == nn::features(f.original, f.bundle.test_x));
  }
  SUBCASE("EU-k re-initializes the trailing layers") {
    auto c = config(ul::Method::kEuK, 0);
    c.k_layers = 2;
    const auto m = ul::run_method(f.original, f.bundle, c).model;
    nn::MlpModel fresh = f.original;
    fresh.reinitialize_layer(1, c.seed);
    fresh.reinitialize_layer(2, c.seed);
    CHECK(m == fresh);
    CHECK(m.layers()[0] == f.original.layers()[0]);
    c.total_iterations = 12;
    CHECK(ul::run_method(f.original, f.bundle, c).model.layers()[0] == f.original.layers()[0]);
  }
}

TEST_CASE("data access audits") {
  Fixture f;
  ul::TrainRecipe recipe;
  recipe.epochs = 1;
  const auto retrained = ul::retrain_oracle(f.bundle, f.dims, recipe, 5);
  CHECK(retrained.audit.forget == 0);
  const auto muda = ul::run_method(f.original, f.bundle, config(ul::Method::kMuda, 40));
  CHECK(muda.audit.retain_other == 0);
  CHECK(muda.audit.forget > 0);
  const auto ft = ul::run_method(f.original, f.bundle, config(ul::Method::kFt));
  CHECK(ft.audit.forget == 0);
  CHECK(ft.audit.retain_other == 0);
}

TEST_CASE("budget accounting alternates full passes") {
  Fixture f;
  const std::size_t forget_steps = (f.bundle.forget.size() + 15) / 16;
  const std::size_t recover_steps = (f.bundle.retain_prime.size() + 15) / 16;
  const std::size_t budget = forget_steps + recover_steps + 2;
  std::size_t observed = 0;
  const auto r = ul::run_method(f.original, f.bundle, config(ul::Method::kMuda, budget),
                                [&](std::size_t step, const nn::MlpModel&) { CHECK(step == ++observed); });
  CHECK(observed == budget);
  REQUIRE(r.trace.rows.size() == budget);
  for (std::size_t i = 0; i < budget; ++i) {
    const auto expect = i < forget_steps || i >= forget_steps + recover_steps ? ul::Phase::kForget
                                                                             : ul::Phase::kRecover;
    CHECK(r.trace.rows[i].phase == expect);
    CHECK(r.trace.rows[i].iteration == i + 1);
  }
  CHECK(std::isfinite(r.trace.rows[0].l_da));
  CHECK(std::isfinite(r.trace.rows[0].l_sd));
  CHECK(std::isnan(r.trace.rows[forget_steps].l_da));
}

TEST_CASE("methods are deterministic") {
  Fixture f;
  for (ul::Method m : {ul::Method::kMuda, ul::Method::kNegGradFt, ul::Method::kEuK}) {
    const auto a = ul::run_method(f.original, f.bundle, config(m));
    const auto b = ul::run_method(f.original, f.bundle, config(m));
    CHECK(a.model == b.model);
    CHECK(a.trace.to_csv() == b.trace.to_csv());
  }
}

TEST_CASE("config validation") {
  Fixture f;
  auto c = config(ul::Method::kMuda);
  c.alpha = -1.0;
  CHECK(code_of([&] { ul::run_method(f.original, f.bundle, c); }) == muda::ErrorCode::kConfigInvalid);
  c = config(ul::Method::kCfK);
  c.k_layers = 4;
  CHECK(code_of([&] { ul::run_method(f.original, f.bundle, c); }) == muda::ErrorCode::kConfigInvalid);
  c = config(ul::Method::kFt);
  c.batch_size = 0;
  CHECK(code_of([&] { ul::run_method(f.original, f.bundle, c); }) == muda::ErrorCode::kConfigInvalid);
  CHECK(code_of([&] { ul::finetune(f.original, f.bundle, config(ul::Method::kMuda)); }) ==
        muda::ErrorCode::kConfigInvalid);
  CHECK(code_of([&] { ul::run_method(f.original, f.bundle, config(ul::Method::kRetrain)); }) ==
        muda::ErrorCode::kConfigInvalid);
  CHECK(ul::method_from_string("neggrad_ft") == ul::Method::kNegGradFt);
  CHECK(code_of([] { ul::method_from_string("scrub"); }) == muda::ErrorCode::kConfigInvalid);
}
