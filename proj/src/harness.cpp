#include "muda/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "muda/error.hpp"
#include "muda/io.hpp"

namespace muda::harness {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::kConfigInvalid, what); }

// Reads an optional key with type checking; unknown keys are rejected by check_keys.
template <typename T>
void read(const json& obj, const char* key, T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    invalid(std::string("bad value for '") + key + "': " + e.what());
  }
}

void check_keys(const json& obj, const char* where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) invalid(std::string(where) + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) invalid(std::string("unknown key '") + it.key() + "' in " + where);
  }
}

void read_sgd(const json& obj, nnet::SgdConfig& sgd) {
  read(obj, "learning_rate", sgd.learning_rate);
  read(obj, "weight_decay", sgd.weight_decay);
  read(obj, "lr_decay", sgd.lr_decay);
  read(obj, "momentum", sgd.momentum);
}

ordered_json sgd_json(const nnet::SgdConfig& sgd) {
  ordered_json j;
  j["learning_rate"] = sgd.learning_rate;
  j["weight_decay"] = sgd.weight_decay;
  j["lr_decay"] = sgd.lr_decay;
  j["momentum"] = sgd.momentum;
  return j;
}

MethodEntry method_from_json(const json& m) {
  check_keys(m, "methods[]",
             {"name", "method", "alpha", "beta", "learning_rate", "weight_decay", "lr_decay",
              "momentum", "total_iterations", "batch_size", "k_layers", "forget_epochs",
              "recover_epochs", "seed"});
  if (!m.contains("method")) invalid("methods[] entry needs 'method'");
  MethodEntry e;
  std::string kind;
  read(m, "method", kind);
  try {
    e.cfg.method = unlearn::method_from_string(kind);
  } catch (const Error& err) {
    invalid(err.what());
  }
  e.name = kind;
  read(m, "name", e.name);
  read(m, "alpha", e.cfg.alpha);
  read(m, "beta", e.cfg.beta);
  read_sgd(m, e.cfg.sgd);
  read(m, "total_iterations", e.cfg.total_iterations);
  read(m, "batch_size", e.cfg.batch_size);
  read(m, "k_layers", e.cfg.k_layers);
  read(m, "forget_epochs", e.cfg.forget_epochs);
  read(m, "recover_epochs", e.cfg.recover_epochs);
  read(m, "seed", e.cfg.seed);
  return e;
}

ordered_json method_json(const MethodEntry& e) {
  ordered_json j;
  j["name"] = e.name;
  j["method"] = unlearn::to_string(e.cfg.method);
  j["alpha"] = e.cfg.alpha;
  j["beta"] = e.cfg.beta;
  const ordered_json sgd = sgd_json(e.cfg.sgd);
  for (auto& [k, v] : sgd.items()) j[k] = v;
  j["total_iterations"] = e.cfg.total_iterations;
  j["batch_size"] = e.cfg.batch_size;
  j["k_layers"] = e.cfg.k_layers;
  j["forget_epochs"] = e.cfg.forget_epochs;
  j["recover_epochs"] = e.cfg.recover_epochs;
  j["seed"] = e.cfg.seed;
  return j;
}

MethodEntry entry(const char* name, unlearn::Method method, double lr, std::size_t iterations) {
  MethodEntry e;
  e.name = name;
  e.cfg.method = method;
  e.cfg.sgd = nnet::SgdConfig{lr, 0.0, 1.0, 0.0};
  e.cfg.total_iterations = iterations;
  return e;
}

std::string cell(double v) { return format_double(v); }
std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

void write_text(const std::filesystem::path& dir, const std::string& name, const std::string& text) {
  io::write_file_atomic(dir / name, text);
}

ordered_json report_json(const metrics::MetricsReport& r) {
  ordered_json j;
  auto num = [](const std::optional<double>& v) -> ordered_json {
    return v ? ordered_json(*v) : ordered_json(nullptr);
  };
  j["failed"] = r.failed;
  if (r.failed) return j;
  j["da"] = r.da;
  j["lp_forget"] = r.lp_forget;
  j["lp_retain"] = r.lp_retain;
  j["lp_sub"] = num(r.lp_sub);
  j["f1"] = r.f1;
  j["nmi"] = r.nmi;
  j["acc_forget"] = r.acc_forget;
  j["acc_retain"] = r.acc_retain;
  j["mia"] = r.mia;
  j["mia_soft"] = r.mia_soft;
  j["asr"] = num(r.asr);
  if (r.diffs) {
    const auto& d = *r.diffs;
    ordered_json dj;
    dj["da"] = d.da;
    dj["lp_forget"] = d.lp_forget;
    dj["lp_retain"] = d.lp_retain;
    dj["lp_sub"] = num(d.lp_sub);
    dj["f1"] = d.f1;
    dj["nmi"] = d.nmi;
    dj["acc_forget"] = d.acc_forget;
    dj["acc_retain"] = d.acc_retain;
    dj["mia"] = d.mia;
    dj["asr"] = num(d.asr);
    j["diff"] = dj;
  }
  return j;
}

std::optional<double> opt_num(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<double>();
}

// Named accessors over the diff fields, in table column order.
struct DiffField {
  const char* name;
  std::optional<double> (*get)(const metrics::MetricsReport::Diffs&);
};

const std::vector<DiffField>& diff_fields() {
  using D = metrics::MetricsReport::Diffs;
  static const std::vector<DiffField> fields{
      {"da", [](const D& d) -> std::optional<double> { return d.da; }},
      {"lp_forget", [](const D& d) -> std::optional<double> { return d.lp_forget; }},
      {"lp_retain", [](const D& d) -> std::optional<double> { return d.lp_retain; }},
      {"lp_sub", [](const D& d) { return d.lp_sub; }},
      {"f1", [](const D& d) -> std::optional<double> { return d.f1; }},
      {"nmi", [](const D& d) -> std::optional<double> { return d.nmi; }},
      {"acc_forget", [](const D& d) -> std::optional<double> { return d.acc_forget; }},
      {"acc_retain", [](const D& d) -> std::optional<double> { return d.acc_retain; }},
      {"mia", [](const D& d) -> std::optional<double> { return d.mia; }},
      {"asr", [](const D& d) { return d.asr; }},
  };
  return fields;
}

bool is_reference(const std::string& method) {
  return method == "original" || method == "retrained";
}

// Mean of the present values; nullopt when none.
std::optional<double> mean_of(const std::vector<std::optional<double>>& values) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

metrics::MetricsReport named(metrics::MetricsReport r, const std::string& name, std::uint64_t seed) {
  r.method = name;
  r.seed = seed;
  return r;
}

metrics::MetricsReport failed_row(const std::string& name, std::uint64_t seed) {
  metrics::MetricsReport r;
  r.method = name;
  r.seed = seed;
  r.failed = true;
  return r;
}

metrics::EvalConfig eval_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  metrics::EvalConfig e = cfg.eval;
  e.kmeans_seed += seed;
  e.probe.seed += seed;
  e.mia.seed += seed;
  return e;
}

void flush(const ExperimentConfig& cfg, const ComparisonTable& table) {
  write_text(cfg.output_dir, "table.csv", table.to_csv());
  write_text(cfg.output_dir, "table.json", table.to_json().dump(1) + "\n");
}

// Shared pipeline of run_experiment and run_backdoor.
ComparisonTable run_pipeline(const ExperimentConfig& cfg, bool poisoned) {
  cfg.validate();
  std::filesystem::create_directories(cfg.output_dir);
  const auto dims = cfg.layer_dims();
  ComparisonTable table;
  for (std::size_t pos = 0; pos < cfg.seeds.size(); ++pos) {
    const SeedSetup setup = prepare_seed(cfg, pos, poisoned);
    const std::uint64_t seed = setup.seed;
    const data::DataBundle& bundle = setup.bundle;
    const metrics::EvalConfig ecfg = eval_for(cfg, seed);
    const std::string tag = std::to_string(seed);

    const nnet::MlpModel original = unlearn::train_original(bundle, dims, cfg.train, init_seed(seed));
    const unlearn::UnlearnResult retrained =
        unlearn::retrain_oracle(bundle, dims, cfg.train, init_seed(seed));
    const metrics::MetricsReport ref =
        named(metrics::evaluate_model(retrained.model, bundle, std::nullopt, ecfg), "retrained", seed);
    table.rows.push_back(
        named(metrics::evaluate_model(original, bundle, ref, ecfg), "original", seed));
    table.rows.push_back(ref);
    if (cfg.emit_features) {
      write_text(cfg.output_dir, "features_original_" + tag + ".csv", features_csv(original, bundle));
      write_text(cfg.output_dir, "features_retrained_" + tag + ".csv",
                 features_csv(retrained.model, bundle));
    }

    for (const MethodEntry& m : cfg.methods) {
      if (m.cfg.method == unlearn::Method::kRetrain) {
        table.rows.push_back(named(metrics::evaluate_model(retrained.model, bundle, ref, ecfg), m.name, seed));
        continue;
      }
      try {
        const unlearn::UnlearnResult res = unlearn::run_method(original, bundle, seeded_method(seed, m));
        write_text(cfg.output_dir, "trace_" + m.name + "_" + tag + ".csv", res.trace.to_csv());
        if (!res.model.all_finite()) throw Error(ErrorCode::kNonFinite, "parameters diverged");
        table.rows.push_back(named(metrics::evaluate_model(res.model, bundle, ref, ecfg), m.name, seed));
        if (cfg.emit_features) {
          write_text(cfg.output_dir, "features_" + m.name + "_" + tag + ".csv",
                     features_csv(res.model, bundle));
        }
      } catch (const std::exception&) {
        table.rows.push_back(failed_row(m.name, seed));
      }
    }
    table = compare_to_retrained(std::move(table));
    flush(cfg, table);
  }
  return table;
}

}  // namespace

// --- config ------------------------------------------------------------------------

std::vector<std::size_t> ExperimentConfig::layer_dims() const {
  std::vector<std::size_t> dims{data.dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(data.num_classes);
  return dims;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) invalid("at least one seed is required");
  if (methods.empty()) invalid("at least one method is required");
  if (hidden.empty()) invalid("model needs at least one hidden layer");
  for (std::size_t h : hidden) {
    if (h == 0) invalid("hidden widths must be >= 1");
  }
  if (data.num_classes < 2) invalid("num_classes must be >= 2");
  if (data.subclasses_per_class < 1 || data.dim < 1 || data.n_per_subclass < 2) {
    invalid("data sizes must be positive");
  }
  if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) invalid("test_fraction must be in (0,1)");
  if (!(data.spread > 0.0)) invalid("spread must be > 0");
  if (!(data.subclass_offset >= 0.0)) invalid("subclass_offset must be >= 0");
  if (train.epochs == 0 || train.batch_size == 0) invalid("train epochs and batch_size must be >= 1");
  try {
    train.sgd.validate();
  } catch (const Error& e) {
    invalid(std::string("train: ") + e.what());
  }
  const std::size_t layers = hidden.size() + 1;
  std::set<std::string> names;
  for (const MethodEntry& m : methods) {
    if (m.name.empty()) invalid("method names must be non-empty");
    if (is_reference(m.name)) invalid("method name '" + m.name + "' is reserved");
    if (!names.insert(m.name).second) invalid("duplicate method name '" + m.name + "'");
    if (m.name.find_first_of("/\\ ") != std::string::npos) invalid("method name has a path character");
    try {
      m.cfg.validate(layers);
    } catch (const Error& e) {
      invalid(m.name + ": " + e.what());
    }
  }
  if (forget.mode == data::ForgetMode::kClass && forget.target >= static_cast<int>(data.num_classes)) {
    invalid("forget target out of range");
  }
  if (forget.mode == data::ForgetMode::kSubclass &&
      forget.target >= static_cast<int>(data.num_classes * data.subclasses_per_class)) {
    invalid("forget target out of range");
  }
  if (!(backdoor.fraction > 0.0 && backdoor.fraction < 1.0)) invalid("backdoor fraction must be in (0,1)");
  for (std::size_t d : backdoor.trigger_dims) {
    if (d >= data.dim) invalid("backdoor trigger dim out of range");
  }
  if (backdoor.target_label >= static_cast<int>(data.num_classes)) invalid("backdoor target out of range");
  if (stability.sample_every == 0) invalid("stability sample_every must be >= 1");
  if (stability.budget_multipliers.empty()) invalid("stability needs a budget multiplier");
  for (std::size_t mul : stability.budget_multipliers) {
    if (mul == 0) invalid("budget multipliers must be >= 1");
  }
  if (output_dir.empty()) invalid("output_dir must be set");
}

const MethodEntry& ExperimentConfig::method(const std::string& name) const {
  for (const MethodEntry& m : methods) {
    if (m.name == name) return m;
  }
  invalid("no method named '" + name + "'");
}

ExperimentConfig default_config() {
  using unlearn::Method;
  ExperimentConfig cfg;
  cfg.methods.push_back(entry("muda", Method::kMuda, 0.1, 200));
  cfg.methods.push_back(entry("ft", Method::kFt, 0.1, 200));
  cfg.methods.push_back(entry("neggrad", Method::kNegGrad, 0.01, 200));
  cfg.methods.push_back(entry("neggrad_ft", Method::kNegGradFt, 0.01, 200));
  MethodEntry eu = entry("eu_k", Method::kEuK, 0.1, 200);
  eu.cfg.k_layers = 2;
  cfg.methods.push_back(eu);
  MethodEntry cf = entry("cf_k", Method::kCfK, 0.01, 200);
  cf.cfg.k_layers = 2;
  cfg.methods.push_back(cf);
  // Weight decay is what lets the forget-class weights fade without forget data.
  MethodEntry head = entry("ft_classifier_only", Method::kFtClassifierOnly, 0.1, 200);
  head.cfg.sgd.weight_decay = 0.2;
  cfg.methods.push_back(head);
  return cfg;
}

ExperimentConfig config_from_json(const json& doc) {
  check_keys(doc, "config",
             {"data", "model", "train", "forget", "methods", "seeds", "eval", "backdoor", "stability",
              "output_dir", "emit_features", "run_backdoor", "run_stability"});
  ExperimentConfig cfg = default_config();
  if (auto it = doc.find("data"); it != doc.end()) {
    check_keys(*it, "data",
               {"num_classes", "subclasses_per_class", "dim", "n_per_subclass", "spread",
                "subclass_offset", "test_fraction"});
    read(*it, "num_classes", cfg.data.num_classes);
    read(*it, "subclasses_per_class", cfg.data.subclasses_per_class);
    read(*it, "dim", cfg.data.dim);
    read(*it, "n_per_subclass", cfg.data.n_per_subclass);
    read(*it, "spread", cfg.data.spread);
    read(*it, "subclass_offset", cfg.data.subclass_offset);
    read(*it, "test_fraction", cfg.data.test_fraction);
  }
  if (auto it = doc.find("model"); it != doc.end()) {
    check_keys(*it, "model", {"hidden"});
    read(*it, "hidden", cfg.hidden);
  }
  if (auto it = doc.find("train"); it != doc.end()) {
    check_keys(*it, "train",
               {"learning_rate", "weight_decay", "lr_decay", "momentum", "epochs", "batch_size"});
    read_sgd(*it, cfg.train.sgd);
    read(*it, "epochs", cfg.train.epochs);
    read(*it, "batch_size", cfg.train.batch_size);
  }
  if (auto it = doc.find("forget"); it != doc.end()) {
    check_keys(*it, "forget", {"mode", "target"});
    std::string mode = data::to_string(cfg.forget.mode);
    read(*it, "mode", mode);
    try {
      cfg.forget.mode = data::forget_mode_from_string(mode);
    } catch (const Error& e) {
      invalid(e.what());
    }
    if (cfg.forget.mode == data::ForgetMode::kPoisoned) invalid("use the backdoor pipeline for poisoned mode");
    read(*it, "target", cfg.forget.target);
  }
  if (auto it = doc.find("methods"); it != doc.end()) {
    if (!it->is_array()) invalid("methods must be an array");
    cfg.methods.clear();
    for (const json& m : *it) cfg.methods.push_back(method_from_json(m));
  }
  read(doc, "seeds", cfg.seeds);
  if (auto it = doc.find("eval"); it != doc.end()) {
    check_keys(*it, "eval",
               {"probe_steps", "probe_learning_rate", "mia_steps", "mia_learning_rate", "kmeans_seed"});
    read(*it, "probe_steps", cfg.eval.probe.steps);
    read(*it, "probe_learning_rate", cfg.eval.probe.learning_rate);
    read(*it, "mia_steps", cfg.eval.mia.steps);
    read(*it, "mia_learning_rate", cfg.eval.mia.learning_rate);
    read(*it, "kmeans_seed", cfg.eval.kmeans_seed);
  }
  if (auto it = doc.find("backdoor"); it != doc.end()) {
    check_keys(*it, "backdoor", {"trigger_dims", "trigger_value", "target_label", "fraction"});
    read(*it, "trigger_dims", cfg.backdoor.trigger_dims);
    read(*it, "trigger_value", cfg.backdoor.trigger_value);
    read(*it, "target_label", cfg.backdoor.target_label);
    read(*it, "fraction", cfg.backdoor.fraction);
  }
  if (auto it = doc.find("stability"); it != doc.end()) {
    check_keys(*it, "stability", {"budget_multipliers", "sample_every", "methods"});
    read(*it, "budget_multipliers", cfg.stability.budget_multipliers);
    read(*it, "sample_every", cfg.stability.sample_every);
    read(*it, "methods", cfg.stability.methods);
  }
  std::string out = cfg.output_dir.string();
  read(doc, "output_dir", out);
  cfg.output_dir = out;
  read(doc, "emit_features", cfg.emit_features);
  read(doc, "run_backdoor", cfg.run_backdoor);
  read(doc, "run_stability", cfg.run_stability);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const Error& e) {
    invalid(e.what());
  }
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    invalid(std::string("config parse error: ") + e.what());
  }
  return config_from_json(doc);
}

ordered_json config_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["data"] = {{"num_classes", cfg.data.num_classes},
               {"subclasses_per_class", cfg.data.subclasses_per_class},
               {"dim", cfg.data.dim},
               {"n_per_subclass", cfg.data.n_per_subclass},
               {"spread", cfg.data.spread},
               {"subclass_offset", cfg.data.subclass_offset},
               {"test_fraction", cfg.data.test_fraction}};
  j["model"]["hidden"] = cfg.hidden;
  ordered_json train = sgd_json(cfg.train.sgd);
  train["epochs"] = cfg.train.epochs;
  train["batch_size"] = cfg.train.batch_size;
  j["train"] = train;
  j["forget"] = {{"mode", data::to_string(cfg.forget.mode)}, {"target", cfg.forget.target}};
  j["methods"] = ordered_json::array();
  for (const MethodEntry& m : cfg.methods) j["methods"].push_back(method_json(m));
  j["seeds"] = cfg.seeds;
  j["eval"] = {{"probe_steps", cfg.eval.probe.steps},
               {"probe_learning_rate", cfg.eval.probe.learning_rate},
               {"mia_steps", cfg.eval.mia.steps},
               {"mia_learning_rate", cfg.eval.mia.learning_rate},
               {"kmeans_seed", cfg.eval.kmeans_seed}};
  j["backdoor"] = {{"trigger_dims", cfg.backdoor.trigger_dims},
                   {"trigger_value", cfg.backdoor.trigger_value},
                   {"target_label", cfg.backdoor.target_label},
                   {"fraction", cfg.backdoor.fraction}};
  j["stability"] = {{"budget_multipliers", cfg.stability.budget_multipliers},
                    {"sample_every", cfg.stability.sample_every},
                    {"methods", cfg.stability.methods}};
  j["output_dir"] = cfg.output_dir.string();
  j["emit_features"] = cfg.emit_features;
  j["run_backdoor"] = cfg.run_backdoor;
  j["run_stability"] = cfg.run_stability;
  return j;
}

// --- seeds and data ------------------------------------------------------------------

std::uint64_t init_seed(std::uint64_t seed) { return seed * 1000003ULL + 2; }

unlearn::UnlearnConfig seeded_method(std::uint64_t seed, const MethodEntry& entry) {
  unlearn::UnlearnConfig c = entry.cfg;
  c.seed = seed * 1000003ULL + 3 + entry.cfg.seed * 7919ULL;
  return c;
}

SeedSetup prepare_seed(const ExperimentConfig& cfg, std::size_t position, bool poisoned) {
  if (position >= cfg.seeds.size()) throw Error(ErrorCode::kInvalidArgument, "seed position out of range");
  SeedSetup s;
  s.seed = cfg.seeds[position];
  data::DataBundle bundle = data::gen_blobs(cfg.data, s.seed);
  if (poisoned) {
    int target = cfg.backdoor.target_label;
    if (target < 0) target = static_cast<int>((2 * position + 1) % cfg.data.num_classes);
    s.bundle = data::poison_backdoor(std::move(bundle), cfg.backdoor.trigger_dims,
                                     cfg.backdoor.trigger_value, target, cfg.backdoor.fraction,
                                     s.seed + 1);
  } else {
    data::ForgetSpec spec = cfg.forget;
    if (spec.target < 0) {
      const std::size_t n = spec.mode == data::ForgetMode::kSubclass ? bundle.num_subclasses()
                                                                     : bundle.num_classes;
      spec.target = static_cast<int>(position % n);
    }
    s.bundle = data::split_forget_retain(std::move(bundle), spec, s.seed + 1);
  }
  return s;
}

std::string features_csv(const nnet::MlpModel& model, const data::DataBundle& bundle) {
  std::vector<char> forget(bundle.num_train(), 0), prime(bundle.num_train(), 0);
  for (std::size_t i : bundle.forget) forget[i] = 1;
  for (std::size_t i : bundle.retain_prime) prime[i] = 1;
  std::ostringstream os;
  const std::size_t c = model.feature_dim();
  os << "sample_id,split,partition";
  for (std::size_t j = 0; j < c; ++j) os << ",f_" << j;
  os << "\n";
  auto emit = [&](const Matrix& f, std::size_t i, std::size_t id, const char* split, const char* part) {
    os << id << "," << split << "," << part;
    for (std::size_t j = 0; j < c; ++j) os << "," << format_double(f(i, j));
    os << "\n";
  };
  const Matrix train_f = nnet::features(model, bundle.train_x);
  for (std::size_t i = 0; i < bundle.num_train(); ++i) {
    const char* part = forget[i] ? "forget" : (prime[i] ? "retain_prime" : "retain");
    emit(train_f, i, i, "train", part);
  }
  const Matrix test_f = nnet::features(model, bundle.test_x);
  const auto forget_test = bundle.forget_test_indices();
  std::vector<char> ft(bundle.num_test(), 0);
  for (std::size_t i : forget_test) ft[i] = 1;
  for (std::size_t i = 0; i < bundle.num_test(); ++i) {
    emit(test_f, i, bundle.num_train() + i, "test", ft[i] ? "forget" : "retain");
  }
  return os.str();
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// --- tables ----------------------------------------------------------------------------

std::string ComparisonTable::to_csv() const {
  std::ostringstream os;
  os << "method,seed,da,lp_forget,lp_retain,lp_sub,f1,nmi,acc_forget,acc_retain,mia,asr";
  for (const DiffField& f : diff_fields()) os << ",diff_" << f.name;
  os << ",mia_soft\n";
  auto values = [&](const metrics::MetricsReport& r) {
    if (r.failed) {
      os << ",,,,,,,,,,";
      return;
    }
    os << "," << cell(r.da) << "," << cell(r.lp_forget) << "," << cell(r.lp_retain) << ","
       << cell(r.lp_sub) << "," << cell(r.f1) << "," << cell(r.nmi) << "," << cell(r.acc_forget)
       << "," << cell(r.acc_retain) << "," << cell(r.mia) << "," << cell(r.asr);
  };
  auto diffs = [&](const std::optional<metrics::MetricsReport::Diffs>& d) {
    for (const DiffField& f : diff_fields()) os << "," << (d ? cell(f.get(*d)) : std::string());
  };
  for (const auto& r : rows) {
    os << r.method << "," << r.seed;
    values(r);
    diffs(r.failed ? std::nullopt : r.diffs);
    os << "," << (r.failed ? std::string() : cell(r.mia_soft)) << "\n";
  }
  for (const auto& s : summaries) {
    os << s.method << ",mean";
    values(s.mean);
    diffs(s.seeds ? std::optional(s.mean_diff) : std::nullopt);
    os << "," << (s.seeds ? cell(s.mean.mia_soft) : std::string()) << "\n";
  }
  return os.str();
}

ordered_json ComparisonTable::to_json() const {
  ordered_json doc;
  doc["methods"] = ordered_json::object();
  auto& methods = doc["methods"];
  for (const auto& r : rows) {
    methods[r.method]["seeds"][std::to_string(r.seed)] = report_json(r);
  }
  for (const auto& s : summaries) {
    auto& m = methods[s.method];
    m["num_seeds"] = s.seeds;
    if (s.seeds) {
      ordered_json mean = report_json(s.mean);
      mean.erase("failed");
      mean.erase("diff");
      m["mean"] = mean;
      ordered_json md;
      for (const DiffField& f : diff_fields()) {
        auto v = f.get(s.mean_diff);
        md[f.name] = v ? ordered_json(*v) : ordered_json(nullptr);
      }
      m["mean_diff"] = md;
      m["feature_level_gap"] = feature_level_gap(s);
    }
    m["winners"] = s.winners;
  }
  return doc;
}

std::vector<const metrics::MetricsReport*> ComparisonTable::rows_of(const std::string& method) const {
  std::vector<const metrics::MetricsReport*> out;
  for (const auto& r : rows) {
    if (r.method == method) out.push_back(&r);
  }
  return out;
}

const ComparisonTable::Summary* ComparisonTable::summary(const std::string& method) const {
  for (const auto& s : summaries) {
    if (s.method == method) return &s;
  }
  return nullptr;
}

ComparisonTable table_from_json(const json& doc) {
  ComparisonTable t;
  try {
    for (auto& [name, m] : doc.at("methods").items()) {
      for (auto& [seed, r] : m.at("seeds").items()) {
        metrics::MetricsReport rep;
        rep.method = name;
        rep.seed = std::stoull(seed);
        rep.failed = r.at("failed").get<bool>();
        if (!rep.failed) {
          rep.da = r.at("da").get<double>();
          rep.lp_forget = r.at("lp_forget").get<double>();
          rep.lp_retain = r.at("lp_retain").get<double>();
          rep.lp_sub = opt_num(r, "lp_sub");
          rep.f1 = r.at("f1").get<double>();
          rep.nmi = r.at("nmi").get<double>();
          rep.acc_forget = r.at("acc_forget").get<double>();
          rep.acc_retain = r.at("acc_retain").get<double>();
          rep.mia = r.at("mia").get<double>();
          rep.mia_soft = r.at("mia_soft").get<double>();
          rep.asr = opt_num(r, "asr");
          if (auto d = r.find("diff"); d != r.end()) {
            metrics::MetricsReport::Diffs diff;
            diff.da = d->at("da").get<double>();
            diff.lp_forget = d->at("lp_forget").get<double>();
            diff.lp_retain = d->at("lp_retain").get<double>();
            diff.lp_sub = opt_num(*d, "lp_sub");
            diff.f1 = d->at("f1").get<double>();
            diff.nmi = d->at("nmi").get<double>();
            diff.acc_forget = d->at("acc_forget").get<double>();
            diff.acc_retain = d->at("acc_retain").get<double>();
            diff.mia = d->at("mia").get<double>();
            diff.asr = opt_num(*d, "asr");
            rep.diffs = diff;
          }
        }
        rep.check_ranges();
        t.rows.push_back(std::move(rep));
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorruptPayload, std::string("table: ") + e.what());
  } catch (const std::logic_error& e) {
    throw Error(ErrorCode::kCorruptPayload, std::string("table: ") + e.what());
  }
  return t;
}

ComparisonTable compare_to_retrained(ComparisonTable table) {
  std::map<std::uint64_t, const metrics::MetricsReport*> refs;
  for (const auto& r : table.rows) {
    if (r.method == "retrained" && !r.failed) refs[r.seed] = &r;
  }
  std::vector<std::string> order;
  for (auto& r : table.rows) {
    if (std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);
    auto it = refs.find(r.seed);
    if (r.failed || it == refs.end()) {
      r.diffs.reset();
      continue;
    }
    r.fill_diffs(*it->second);
  }

  table.summaries.clear();
  for (const std::string& name : order) {
    ComparisonTable::Summary s;
    s.method = name;
    std::vector<const metrics::MetricsReport*> ok;
    for (const auto& r : table.rows) {
      if (r.method == name && !r.failed && r.diffs) ok.push_back(&r);
    }
    s.seeds = ok.size();
    s.mean.method = name;
    if (!ok.empty()) {
      auto avg = [&](auto get) {
        std::vector<std::optional<double>> v;
        for (const auto* r : ok) v.push_back(get(*r));
        return mean_of(v);
      };
      using R = metrics::MetricsReport;
      s.mean.da = *avg([](const R& r) -> std::optional<double> { return r.da; });
      s.mean.lp_forget = *avg([](const R& r) -> std::optional<double> { return r.lp_forget; });
      s.mean.lp_retain = *avg([](const R& r) -> std::optional<double> { return r.lp_retain; });
      s.mean.lp_sub = avg([](const R& r) { return r.lp_sub; });
      s.mean.f1 = *avg([](const R& r) -> std::optional<double> { return r.f1; });
      s.mean.nmi = *avg([](const R& r) -> std::optional<double> { return r.nmi; });
      s.mean.acc_forget = *avg([](const R& r) -> std::optional<double> { return r.acc_forget; });
      s.mean.acc_retain = *avg([](const R& r) -> std::optional<double> { return r.acc_retain; });
      s.mean.mia = *avg([](const R& r) -> std::optional<double> { return r.mia; });
      s.mean.mia_soft = *avg([](const R& r) -> std::optional<double> { return r.mia_soft; });
      s.mean.asr = avg([](const R& r) { return r.asr; });
      auto davg = [&](const DiffField& f) {
        std::vector<std::optional<double>> v;
        for (const auto* r : ok) v.push_back(f.get(*r->diffs));
        return mean_of(v);
      };
      auto& d = s.mean_diff;
      const auto& fs = diff_fields();
      d.da = *davg(fs[0]);
      d.lp_forget = *davg(fs[1]);
      d.lp_retain = *davg(fs[2]);
      d.lp_sub = davg(fs[3]);
      d.f1 = *davg(fs[4]);
      d.nmi = *davg(fs[5]);
      d.acc_forget = *davg(fs[6]);
      d.acc_retain = *davg(fs[7]);
      d.mia = *davg(fs[8]);
      d.asr = davg(fs[9]);
    }
    table.summaries.push_back(std::move(s));
  }

  // Winners among the compared methods (references excluded), ties joint.
  constexpr double kTie = 1e-12;
  for (const DiffField& f : diff_fields()) {
    std::optional<double> best;
    for (const auto& s : table.summaries) {
      if (is_reference(s.method) || s.seeds == 0) continue;
      if (auto v = f.get(s.mean_diff); v && (!best || *v < *best)) best = *v;
    }
    if (!best) continue;
    for (auto& s : table.summaries) {
      if (is_reference(s.method) || s.seeds == 0) continue;
      if (auto v = f.get(s.mean_diff); v && *v <= *best + kTie) s.winners.push_back(f.name);
    }
  }
  return table;
}

double feature_level_gap(const ComparisonTable::Summary& s) {
  const auto& d = s.mean_diff;
  return (d.da + d.lp_forget + d.f1 + d.nmi) / 4.0;
}

// --- pipelines ---------------------------------------------------------------------------

ComparisonTable run_experiment(const ExperimentConfig& cfg) { return run_pipeline(cfg, false); }

ComparisonTable run_backdoor(const ExperimentConfig& cfg) { return run_pipeline(cfg, true); }

std::string StabilityCurve::to_csv() const {
  std::ostringstream os;
  os << "iteration,lp_retain,lp_forget\n";
  for (const CurvePoint& p : points) {
    os << p.iteration << "," << format_double(p.lp_retain) << "," << format_double(p.lp_forget) << "\n";
  }
  return os.str();
}

const CurvePoint& StabilityCurve::at(std::size_t iteration) const {
  if (points.empty()) throw Error(ErrorCode::kInvalidArgument, "empty curve");
  const CurvePoint* best = &points.front();
  for (const CurvePoint& p : points) {
    if (p.iteration <= iteration) best = &p;
  }
  return *best;
}

std::vector<StabilityCurve> run_stability(const ExperimentConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.output_dir);
  const auto dims = cfg.layer_dims();
  const std::size_t max_mul =
      *std::max_element(cfg.stability.budget_multipliers.begin(), cfg.stability.budget_multipliers.end());
  std::vector<StabilityCurve> curves;
  for (std::size_t pos = 0; pos < cfg.seeds.size(); ++pos) {
    const SeedSetup setup = prepare_seed(cfg, pos);
    const metrics::EvalConfig ecfg = eval_for(cfg, setup.seed);
    const nnet::MlpModel original =
        unlearn::train_original(setup.bundle, dims, cfg.train, init_seed(setup.seed));
    for (const std::string& name : cfg.stability.methods) {
      const MethodEntry& m = cfg.method(name);
      if (m.cfg.method == unlearn::Method::kRetrain) invalid("retrain has no stability curve");
      StabilityCurve curve;
      curve.method = name;
      curve.seed = setup.seed;
      curve.base_iterations = m.cfg.total_iterations;
      unlearn::UnlearnConfig run = seeded_method(setup.seed, m);
      run.total_iterations = m.cfg.total_iterations * max_mul;
      auto sample = [&](std::size_t step, const nnet::MlpModel& model) {
        const metrics::ProbePair lp = metrics::probe_pair(model, setup.bundle, ecfg.probe);
        curve.points.push_back({step, lp.lp_retain, lp.lp_forget});
      };
      sample(0, original);
      const std::size_t every = cfg.stability.sample_every;
      unlearn::run_method(original, setup.bundle, run, [&](std::size_t step, const nnet::MlpModel& model) {
        if (step % every == 0 || step == run.total_iterations) sample(step, model);
      });
      write_text(cfg.output_dir, "stability_" + name + "_" + std::to_string(setup.seed) + ".csv",
                 curve.to_csv());
      curves.push_back(std::move(curve));
    }
  }
  return curves;
}

}  // namespace muda::harness
