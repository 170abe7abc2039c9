#include "epep/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <type_traits>

#include "epep/error.hpp"

namespace epep {

namespace {

using json = nlohmann::json;

// Reads fields of one JSON object and remembers which ones were consumed, so
// anything left over can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }
  ObjectReader(const ObjectReader&) = delete;
  ObjectReader& operator=(const ObjectReader&) = delete;

  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown field '" + field(key) + "'");
    }
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, int& out, int lo = std::numeric_limits<int>::min()) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
      const auto x = v->get<long long>();
      if (x < lo || x > std::numeric_limits<int>::max()) {
        throw ConfigError(field(key) + ": value " + std::to_string(x) + " out of range");
      }
      out = static_cast<int>(x);
    }
  }

  template <class U>
    requires std::is_unsigned_v<U> && (!std::is_same_v<U, bool>)
  void read(const std::string& key, U& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) {
        throw ConfigError(field(key) + ": expected a non-negative integer");
      }
      out = v->get<U>();
    }
  }

  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(field(key) + ": expected a number");
      out = v->get<double>();
    }
  }

  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }

  void read(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.clear();
        return;
      }
      if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }

  // Parses a string field through fn, prefixing its errors with the field path.
  template <class T, class Fn>
  void read_enum(const std::string& key, T& out, Fn fn) {
    std::string s;
    read(key, s);
    if (find(key) == nullptr) return;
    try {
      out = fn(s);
    } catch (const Error& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

MissingProtocol read_protocol(const json& j, const std::string& path) {
  MissingProtocol p{{1.0, 1.0}};
  ObjectReader r(j, path);
  r.read("text", p.availability[0]);
  r.read("image", p.availability[1]);
  return p;
}

json protocol_json(const MissingProtocol& p) {
  return {{"text", p.availability.at(0)}, {"image", p.availability.at(1)}};
}

std::string source_name(DataSource s) { return s == DataSource::Synthetic ? "synthetic" : "jsonl"; }

DataSource parse_source(const std::string& s) {
  if (s == "synthetic") return DataSource::Synthetic;
  if (s == "jsonl") return DataSource::Jsonl;
  throw ConfigError("unknown source '" + s + "' (expected synthetic|jsonl)");
}

std::string policy_name(const std::optional<CompleteSamplePolicy>& p) {
  return p ? to_string(*p) : "auto";
}

std::optional<CompleteSamplePolicy> parse_optional_policy(const std::string& s) {
  if (s == "auto") return std::nullopt;
  return parse_policy(s);
}

void check_file(const std::string& path, const std::string& field) {
  if (path.empty()) throw ConfigError(field + ": required when data.source is jsonl");
  std::ifstream in(path);
  if (!in) throw ConfigError(field + ": cannot open '" + path + "'");
}

}  // namespace

void RunConfig::validate() const {
  train.validate();
  if (output_dir.empty()) throw ConfigError("output.dir must not be empty");
  auto check_protocol = [](const MissingProtocol& p, const std::string& field) {
    if (p.availability.size() != 2) throw ConfigError(field + ": needs text and image entries");
    try {
      p.validate();
    } catch (const ProtocolError& e) {
      throw ConfigError(field + ": " + e.what());
    }
  };
  check_protocol(data.train_protocol, "data.train_protocol");
  check_protocol(data.test_protocol, "data.test_protocol");
  if (data.source == DataSource::Synthetic) {
    const SyntheticTask t = task();
    try {
      t.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("data.task: ") + e.what());
    }
    if (train.model.text_vocab < t.required_vocab()) {
      throw ConfigError("model.text_vocab: the synthetic task needs at least " +
                        std::to_string(t.required_vocab()) + " tokens");
    }
    if (data.n_train == 0) throw ConfigError("data.n_train must be positive");
    if (data.n_test == 0) throw ConfigError("data.n_test must be positive");
  } else {
    check_file(data.train_path, "data.train_path");
    check_file(data.test_path, "data.test_path");
  }
}

SyntheticTask RunConfig::task() const {
  SyntheticTask t = data.task;
  t.num_classes = train.model.num_classes;
  t.tokens_per_modality = train.model.tokens_per_modality;
  t.patch_dim = train.model.patch_dim;
  return t;
}

SampleShape RunConfig::sample_shape() const {
  return {train.model.tokens_per_modality, train.model.patch_dim, train.model.num_classes};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  TrainConfig& t = c.train;
  ObjectReader root(j, "");
  root.read("seed", t.seed);

  if (const json* m = root.find("model")) {
    ObjectReader r(*m, "model");
    auto& mc = t.model;
    r.read("modalities", mc.modalities);
    r.read("d_model", mc.d_model);
    r.read("layers", mc.layers);
    r.read("heads", mc.heads);
    r.read("ffn_dim", mc.ffn_dim);
    r.read("tokens_per_modality", mc.tokens_per_modality);
    r.read("patch_dim", mc.patch_dim);
    r.read("text_vocab", mc.text_vocab);
    r.read("prompt_len", mc.prompt_len);
    r.read("prompt_inject_layers", mc.prompt_inject_layers);
    r.read("num_classes", mc.num_classes);
  }
  if (const json* p = root.find("prompt")) {
    ObjectReader r(*p, "prompt");
    r.read_enum("method", t.method, parse_method);
    r.read("rank", t.rank);
    r.read("per_layer_banks", t.per_layer_banks);
    r.read_enum("policy", t.policy, parse_optional_policy);
  }
  if (const json* l = root.find("loss")) {
    ObjectReader r(*l, "loss");
    r.read_enum("kind", t.loss, parse_loss);
    r.read("lambda", t.lambda);
  }
  if (const json* o = root.find("optimizer")) {
    ObjectReader r(*o, "optimizer");
    r.read("lr", t.optimizer.lr);
    r.read("beta1", t.optimizer.beta1);
    r.read("beta2", t.optimizer.beta2);
    r.read("eps", t.optimizer.eps);
    r.read("weight_decay", t.optimizer.weight_decay);
  }
  if (const json* tr = root.find("training")) {
    ObjectReader r(*tr, "training");
    r.read("epochs", t.epochs);
    r.read("batch_size", t.batch_size);
    r.read("reinit_classifier", t.reinit_classifier);
    r.read("eval_train", t.eval_train);
  }
  if (const json* w = root.find("warmup")) {
    ObjectReader r(*w, "warmup");
    r.read("epochs", t.warmup.epochs);
    r.read("batch_size", t.warmup.batch_size);
    r.read("lr", t.warmup.lr);
    r.read("weight_decay", t.warmup.weight_decay);
  }
  if (const json* d = root.find("data")) {
    ObjectReader r(*d, "data");
    auto& dc = c.data;
    r.read_enum("source", dc.source, parse_source);
    r.read("train_path", dc.train_path);
    r.read("test_path", dc.test_path);
    r.read("n_warmup", dc.n_warmup);
    r.read("n_train", dc.n_train);
    r.read("n_test", dc.n_test);
    if (const json* p = r.find("train_protocol")) {
      dc.train_protocol = read_protocol(*p, "data.train_protocol");
    }
    if (const json* p = r.find("test_protocol")) {
      dc.test_protocol = read_protocol(*p, "data.test_protocol");
    }
    if (const json* tk = r.find("task")) {
      ObjectReader tr(*tk, "data.task");
      tr.read("levels", dc.task.levels);
      tr.read("text_signal", dc.task.text_signal);
      tr.read("image_signal", dc.task.image_signal);
      tr.read("noise", dc.task.noise);
    }
  }
  if (const json* o = root.find("output")) {
    ObjectReader r(*o, "output");
    r.read("dir", c.output_dir);
  }
  return c;
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

json to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  const auto& mc = t.model;
  const auto& o = t.optimizer;
  const auto& w = t.warmup;
  const auto& d = c.data;
  return {
      {"seed", t.seed},
      {"model",
       {{"modalities", mc.modalities},
        {"d_model", mc.d_model},
        {"layers", mc.layers},
        {"heads", mc.heads},
        {"ffn_dim", mc.ffn_dim},
        {"tokens_per_modality", mc.tokens_per_modality},
        {"patch_dim", mc.patch_dim},
        {"text_vocab", mc.text_vocab},
        {"prompt_len", mc.prompt_len},
        {"prompt_inject_layers", mc.prompt_inject_layers},
        {"num_classes", mc.num_classes}}},
      {"prompt",
       {{"method", to_string(t.method)},
        {"rank", t.rank},
        {"per_layer_banks", t.per_layer_banks},
        {"policy", policy_name(t.policy)}}},
      {"loss", {{"kind", to_string(t.loss)}, {"lambda", t.lambda}}},
      {"optimizer",
       {{"lr", o.lr},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"eps", o.eps},
        {"weight_decay", o.weight_decay}}},
      {"training",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"reinit_classifier", t.reinit_classifier},
        {"eval_train", t.eval_train}}},
      {"warmup",
       {{"epochs", w.epochs},
        {"batch_size", w.batch_size},
        {"lr", w.lr},
        {"weight_decay", w.weight_decay}}},
      {"data",
       {{"source", source_name(d.source)},
        {"train_path", d.train_path},
        {"test_path", d.test_path},
        {"n_warmup", d.n_warmup},
        {"n_train", d.n_train},
        {"n_test", d.n_test},
        {"train_protocol", protocol_json(d.train_protocol)},
        {"test_protocol", protocol_json(d.test_protocol)},
        {"task",
         {{"levels", d.task.levels},
          {"text_signal", d.task.text_signal},
          {"image_signal", d.task.image_signal},
          {"noise", d.task.noise}}}}},
      {"output", {{"dir", c.output_dir}}},
  };
}

std::vector<Sample> make_synthetic_split(const RunConfig& config, const std::string& split) {
  std::size_t n;
  const MissingProtocol* protocol = nullptr;
  if (split == "warmup") {
    n = config.data.n_warmup;
  } else if (split == "train") {
    n = config.data.n_train;
    protocol = &config.data.train_protocol;
  } else if (split == "test") {
    n = config.data.n_test;
    protocol = &config.data.test_protocol;
  } else {
    throw ConfigError("unknown split '" + split + "' (expected warmup|train|test)");
  }
  const std::uint64_t seed = config.train.seed;
  Rng data_rng(derive_seed(seed, "data." + split));
  auto samples = generate_task(config.task(), n, data_rng);
  if (!protocol) return samples;
  Rng pattern_rng(derive_seed(seed, "patterns." + split));
  return apply_patterns(std::move(samples), sample_pattern(*protocol, n, pattern_rng));
}

Datasets load_datasets(const RunConfig& config) {
  config.validate();
  Datasets ds;
  if (config.data.source == DataSource::Synthetic) {
    ds.warmup = make_synthetic_split(config, "warmup");
    ds.train = make_synthetic_split(config, "train");
    ds.test = make_synthetic_split(config, "test");
    return ds;
  }
  const SampleShape shape = config.sample_shape();
  ds.train = load_jsonl(config.data.train_path, shape);
  ds.test = load_jsonl(config.data.test_path, shape);
  if (ds.train.empty()) throw ConfigError("data.train_path: dataset is empty");
  if (ds.test.empty()) throw ConfigError("data.test_path: dataset is empty");
  for (const auto& s : ds.train) {
    if (s.pattern.empty()) ds.warmup.push_back(s);
  }
  return ds;
}

}  // namespace epep
