#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <functional>

#include "muda/error.hpp"
#include "muda/harness.hpp"
#include "muda/io.hpp"

namespace fs = std::filesystem;
namespace h = muda::harness;
using nlohmann::json;

namespace {

muda::ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const muda::Error& e) {
    return e.code();
  }
  return muda::ErrorCode::kInvalidArgument;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("muda_harness_" + name);
  fs::remove_all(p);
  return p;
}

// Small enough to run in a few seconds.
json tiny_doc() {
  return json::parse(R"({
    "data": {"num_classes": 4, "subclasses_per_class": 2, "dim": 8, "n_per_subclass": 25},
    "model": {"hidden": [12, 6]},
    "train": {"epochs": 4},
    "methods": [
      {"method": "muda", "learning_rate": 0.1, "total_iterations": 10},
      {"method": "ft", "learning_rate": 0.1, "total_iterations": 10}
    ],
    "seeds": [0, 1],
    "eval": {"probe_steps": 40, "mia_steps": 40}
  })");
}

h::ExperimentConfig tiny(const fs::path& out) {
  auto cfg = h::config_from_json(tiny_doc());
  cfg.output_dir = out;
  return cfg;
}

muda::metrics::MetricsReport row(const std::string& method, std::uint64_t seed, double da) {
  muda::metrics::MetricsReport r;
  r.method = method;
  r.seed = seed;
  r.da = da;
  r.lp_forget = r.lp_retain = r.f1 = r.nmi = r.acc_forget = r.acc_retain = r.mia = 0.5;
  return r;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = h::config_from_json(tiny_doc());
  CHECK(cfg.data.num_classes == 4);
  CHECK(cfg.layer_dims() == std::vector<std::size_t>{8, 12, 6, 4});
  CHECK(cfg.methods.size() == 2);
  CHECK(cfg.method("muda").cfg.alpha == 0.1);  // untouched keys keep their defaults
  CHECK(cfg.train.sgd.learning_rate == 0.1);

  // Round trip through the serialized form.
  const auto again = h::config_from_json(json::parse(h::config_to_json(cfg).dump()));
  CHECK(h::config_to_json(again).dump() == h::config_to_json(cfg).dump());
  const auto defaults = h::config_from_json(json::parse(h::config_to_json(h::default_config()).dump()));
  CHECK(h::config_to_json(defaults).dump() == h::config_to_json(h::default_config()).dump());

  auto bad = [](const char* text) { return code_of([&] { h::config_from_json(json::parse(text)); }); };
  CHECK(bad(R"({"colour": 1})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"data": {"dims": 4}})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"data": {"dim": "wide"}})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"methods": [{"method": "scrub"}]})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"methods": [{"name": "x"}]})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"methods": [{"method": "ft"}, {"method": "ft"}]})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"methods": [{"method": "ft", "name": "retrained"}]})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"methods": [{"method": "cf_k", "k_layers": 9}]})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"forget": {"mode": "poisoned"}})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"forget": {"mode": "class", "target": 10}})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"seeds": []})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"data": {"spread": 0}})") == muda::ErrorCode::kConfigInvalid);
  CHECK(bad(R"({"train": {"momentum": 1.5}})") == muda::ErrorCode::kConfigInvalid);

  const auto dir = scratch("cfg");
  fs::create_directories(dir);
  muda::io::write_file_atomic(dir / "broken.json", "{\"seeds\": [");
  CHECK(code_of([&] { h::load_config(dir / "broken.json"); }) == muda::ErrorCode::kConfigInvalid);
  fs::remove_all(dir);
}

TEST_CASE("winners and ties") {
  h::ComparisonTable t;
  for (std::uint64_t s : {0, 1}) {
    t.rows.push_back(row("original", s, 0.1));
    t.rows.push_back(row("retrained", s, 0.5));
    t.rows.push_back(row("a", s, 0.6));
    t.rows.push_back(row("b", s, 0.4));
    t.rows.push_back(row("c", s, 0.9));
  }
  t = h::compare_to_retrained(std::move(t));
  const auto* a = t.summary("a");
  const auto* b = t.summary("b");
  const auto* c = t.summary("c");
  REQUIRE(a);
  CHECK(a->mean_diff.da == doctest::Approx(0.1));
  CHECK(b->mean_diff.da == doctest::Approx(0.1));
  auto has = [](const h::ComparisonTable::Summary* s, const char* m) {
    return std::find(s->winners.begin(), s->winners.end(), m) != s->winners.end();
  };
  CHECK(has(a, "da"));
  CHECK(has(b, "da"));
  CHECK_FALSE(has(c, "da"));
  CHECK(has(c, "lp_forget"));  // every method ties on the other fields
  CHECK(t.summary("original")->winners.empty());
  CHECK(h::feature_level_gap(*c) == doctest::Approx(0.4 / 4.0));
}

TEST_CASE("failed rows are kept but excluded from summaries") {
  h::ComparisonTable t;
  t.rows.push_back(row("retrained", 0, 0.5));
  t.rows.push_back(row("a", 0, 0.7));
  auto failed = row("a", 1, 0.0);
  failed.failed = true;
  t.rows.push_back(row("retrained", 1, 0.5));
  t.rows.push_back(failed);
  t = h::compare_to_retrained(std::move(t));
  CHECK(t.summary("a")->seeds == 1);
  CHECK(t.summary("a")->mean.da == doctest::Approx(0.7));
  const std::string csv = t.to_csv();
  CHECK(csv.find("a,1,") != std::string::npos);
  CHECK(csv.find("a,mean,") != std::string::npos);
}

TEST_CASE("a diverging method becomes a failed row") {
  const auto dir = scratch("fail");
  auto doc = tiny_doc();
  doc["methods"] = json::parse(R"([{"method": "neggrad", "learning_rate": 1e308, "total_iterations": 20}])");
  doc["seeds"] = {0};
  auto cfg = h::config_from_json(doc);
  cfg.output_dir = dir;
  const auto t = h::run_experiment(cfg);
  const auto rows = t.rows_of("neggrad");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0]->failed);
  CHECK(t.summary("neggrad")->seeds == 0);
  fs::remove_all(dir);
}

TEST_CASE("retraining compared with itself has zero diffs") {
  const auto dir = scratch("retrain");
  auto doc = tiny_doc();
  doc["methods"] = json::parse(R"([{"method": "retrain"}])");
  auto cfg = h::config_from_json(doc);
  cfg.output_dir = dir;
  const auto t = h::run_experiment(cfg);
  for (const auto* r : t.rows_of("retrain")) {
    REQUIRE(r->diffs.has_value());
    CHECK(r->diffs->da == 0.0);
    CHECK(r->diffs->lp_forget == 0.0);
    CHECK(r->diffs->nmi == 0.0);
    CHECK(r->diffs->mia == 0.0);
  }
  CHECK(h::feature_level_gap(*t.summary("retrain")) == 0.0);
  fs::remove_all(dir);
}

TEST_CASE("experiment outputs are deterministic and parse back") {
  const auto d1 = scratch("det1"), d2 = scratch("det2");
  const auto t1 = h::run_experiment(tiny(d1));
  h::run_experiment(tiny(d2));
  for (const char* f : {"table.csv", "table.json", "trace_muda_0.csv", "trace_ft_1.csv"}) {
    CHECK(muda::io::read_file(d1 / f) == muda::io::read_file(d2 / f));
  }
  CHECK(t1.rows.size() == 2 * 4);
  CHECK(t1.rows_of("muda").size() == 2);

  const auto parsed = h::table_from_json(json::parse(muda::io::read_file(d1 / "table.json")));
  CHECK(parsed.rows.size() == t1.rows.size());
  for (const auto& r : parsed.rows) CHECK_NOTHROW(r.check_ranges());
  const auto rebuilt = h::compare_to_retrained(parsed);
  CHECK(rebuilt.summary("muda")->mean.da == doctest::Approx(t1.summary("muda")->mean.da).epsilon(1e-15));

  auto doc = json::parse(muda::io::read_file(d1 / "table.json"));
  doc["methods"]["muda"]["seeds"]["0"]["da"] = 1.5;
  CHECK_THROWS_AS(h::table_from_json(doc), muda::Error);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("stability curves sample the extended budget") {
  const auto dir = scratch("stab");
  auto cfg = tiny(dir);
  cfg.seeds = {0};
  cfg.stability.methods = {"muda"};
  cfg.stability.budget_multipliers = {1, 3};
  cfg.stability.sample_every = 4;
  const auto curves = h::run_stability(cfg);
  REQUIRE(curves.size() == 1);
  const auto& c = curves[0];
  // 0, 4, ..., 28 and the final step 30.
  REQUIRE(c.points.size() == 9);
  CHECK(c.points.front().iteration == 0);
  CHECK(c.points.back().iteration == 30);
  CHECK(c.at(10).iteration == 8);
  CHECK(c.at(30).iteration == 30);
  CHECK(fs::exists(dir / "stability_muda_0.csv"));
  fs::remove_all(dir);
}

TEST_CASE("backdoor pipeline reports attack success") {
  const auto dir = scratch("bd");
  auto cfg = tiny(dir);
  cfg.seeds = {0};
  const auto t = h::run_backdoor(cfg);
  for (const auto& r : t.rows) {
    REQUIRE(r.asr.has_value());
    CHECK(*r.asr >= 0.0);
    CHECK(*r.asr <= 1.0);
  }
  fs::remove_all(dir);
}
