#include "epep/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>

#include "epep/error.hpp"

namespace epep {

namespace {

using json = nlohmann::json;

constexpr const char* kCheckpointFormat = "epep-checkpoint";
constexpr const char* kPromptBankFormat = "epep-prompt-bank";

const json& require(const json& j, const std::string& key, const std::string& what) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(what + ": missing '" + key + "'");
  return j.at(key);
}

int require_int(const json& j, const std::string& key, const std::string& what) {
  const json& v = require(j, key, what);
  if (!v.is_number_integer()) throw FormatError(what + ": '" + key + "' must be an integer");
  return v.get<int>();
}

std::string require_string(const json& j, const std::string& key, const std::string& what) {
  const json& v = require(j, key, what);
  if (!v.is_string()) throw FormatError(what + ": '" + key + "' must be a string");
  return v.get<std::string>();
}

void check_header(const json& j, const char* format, int version, const std::string& what) {
  if (!j.is_object()) throw FormatError(what + ": expected a JSON object");
  const std::string f = require_string(j, "format", what);
  if (f != format) {
    throw FormatError(what + ": format is '" + f + "', expected '" + format + "'");
  }
  const int v = require_int(j, "format_version", what);
  if (v != version) {
    throw FormatError(what + ": format_version " + std::to_string(v) +
                      " is not supported (this build reads version " + std::to_string(version) +
                      ")");
  }
}

// Copies every named parameter from the JSON map into the visited matrices,
// insisting on an exact one-to-one match of names and shapes.
class ParameterFiller {
 public:
  explicit ParameterFiller(const json& params) : params_(params) {
    if (!params_.is_object()) throw FormatError("checkpoint: 'parameters' must be an object");
  }

  ParamVisitor visitor() {
    return [this](const std::string& name, Matrix& m) {
      if (!params_.contains(name)) throw FormatError("checkpoint: missing parameter '" + name + "'");
      Matrix loaded = matrix_from_json(params_.at(name), "parameter '" + name + "'");
      if (loaded.rows() != m.rows() || loaded.cols() != m.cols()) {
        throw FormatError("checkpoint: parameter '" + name + "' is " +
                          std::to_string(loaded.rows()) + "x" + std::to_string(loaded.cols()) +
                          ", the config implies " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()));
      }
      m = std::move(loaded);
      used_.insert(name);
    };
  }

  void check_all_used() const {
    for (const auto& [name, _] : params_.items()) {
      if (!used_.count(name)) throw FormatError("checkpoint: unknown parameter '" + name + "'");
    }
  }

 private:
  const json& params_;
  std::set<std::string> used_;
};

}  // namespace

json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

Matrix matrix_from_json(const json& j, const std::string& what) {
  const int r = require_int(j, "rows", what);
  const int c = require_int(j, "cols", what);
  if (r < 0 || c < 0) throw FormatError(what + ": negative dimensions");
  const json& data = require(j, "data", what);
  if (!data.is_array()) throw FormatError(what + ": 'data' must be an array");
  std::vector<double> values;
  values.reserve(data.size());
  for (const auto& v : data) {
    if (!v.is_number()) throw FormatError(what + ": non-numeric entry");
    values.push_back(v.get<double>());
  }
  try {
    return Matrix(static_cast<std::size_t>(r), static_cast<std::size_t>(c), std::move(values));
  } catch (const Error& e) {
    throw FormatError(what + ": " + e.what());
  }
}

json prompt_bank_to_json(const PromptBank& bank) {
  bank.validate();
  json weights = json::array();
  for (const auto& w : bank.weights) weights.push_back(matrix_to_json(w));
  json factors = json::array();
  for (const auto& f : bank.comprehensive.factors()) {
    factors.push_back({{"u", matrix_to_json(f.u)}, {"v", matrix_to_json(f.v)}});
  }
  const auto& part = bank.partition();
  return {{"format", kPromptBankFormat},
          {"format_version", kPromptBankVersion},
          {"m", part.m()},
          {"d", part.d()},
          {"l", part.l()},
          {"r", bank.comprehensive.rank()},
          {"policy", to_string(bank.policy)},
          {"weights", std::move(weights)},
          {"factors", std::move(factors)}};
}

PromptBank prompt_bank_from_json(const json& j) {
  const std::string what = "prompt bank";
  check_header(j, kPromptBankFormat, kPromptBankVersion, what);
  const int m = require_int(j, "m", what);
  const int d = require_int(j, "d", what);
  const int l = require_int(j, "l", what);
  const int r = require_int(j, "r", what);
  PromptBank bank = [&] {
    try {
      return PromptBank{{}, LowRankPrompt(BlockPartition(m, d, l), r), CompleteSamplePolicy::ZeroPrompt};
    } catch (const ShapeError& e) {
      throw FormatError(what + ": " + e.what());
    }
  }();
  try {
    bank.policy = parse_policy(require_string(j, "policy", what));
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }
  const json& weights = require(j, "weights", what);
  if (!weights.is_array()) throw FormatError(what + ": 'weights' must be an array");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    bank.weights.push_back(matrix_from_json(weights[i], what + " weight " + std::to_string(i)));
  }
  const json& factors = require(j, "factors", what);
  auto& dst = bank.comprehensive.factors();
  if (!factors.is_array() || factors.size() != dst.size()) {
    throw FormatError(what + ": expected " + std::to_string(dst.size()) + " factor pairs");
  }
  for (std::size_t k = 0; k < dst.size(); ++k) {
    const std::string tag = what + " factor " + std::to_string(k);
    Matrix u = matrix_from_json(require(factors[k], "u", tag), tag + " u");
    Matrix v = matrix_from_json(require(factors[k], "v", tag), tag + " v");
    if (u.rows() != dst[k].u.rows() || u.cols() != dst[k].u.cols() ||
        v.rows() != dst[k].v.rows() || v.cols() != dst[k].v.cols()) {
      throw FormatError(tag + ": shape does not match m, d, l, r");
    }
    dst[k].u = std::move(u);
    dst[k].v = std::move(v);
  }
  try {
    bank.validate();
  } catch (const Error& e) {
    throw FormatError(what + ": " + e.what());
  }
  return bank;
}

Checkpoint make_checkpoint(const RunConfig& config, const TrainResult& result) {
  return {config, result.encoder, result.prompts, result.policy, result.epochs_trained};
}

json checkpoint_to_json(const Checkpoint& ck) {
  // for_each_parameter needs mutable access; serialize from a copy.
  Checkpoint copy = ck;
  json params = json::object();
  auto put = [&params](const std::string& name, Matrix& m) { params[name] = matrix_to_json(m); };
  copy.encoder.backbone().for_each_parameter(put);
  copy.encoder.head().for_each_parameter(put);
  copy.prompts.for_each_parameter(put);
  return {{"format", kCheckpointFormat},
          {"format_version", kCheckpointVersion},
          {"config", to_json(ck.config)},
          {"prompt_method", to_string(ck.prompts.method())},
          {"policy", to_string(ck.policy)},
          {"epochs_trained", ck.epochs_trained},
          {"parameters", std::move(params)}};
}

Checkpoint checkpoint_from_json(const json& j) {
  const std::string what = "checkpoint";
  check_header(j, kCheckpointFormat, kCheckpointVersion, what);
  RunConfig config;
  CompleteSamplePolicy policy;
  try {
    config = run_config_from_json(require(j, "config", what));
    config.train.validate();
    policy = parse_policy(require_string(j, "policy", what));
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }
  const std::string method = require_string(j, "prompt_method", what);
  if (method != to_string(config.train.method)) {
    throw FormatError(what + ": prompt_method '" + method + "' disagrees with the config");
  }
  const int epochs = require_int(j, "epochs_trained", what);

  // Build the parameter layout from the config, then overwrite every value.
  Rng scratch(0);
  MultimodalEncoder enc(config.train.model, scratch);
  PromptModule prompts = make_prompt_module(config.train, policy);
  ParameterFiller filler(require(j, "parameters", what));
  const ParamVisitor fill = filler.visitor();
  enc.backbone().for_each_parameter(fill);
  enc.head().for_each_parameter(fill);
  prompts.for_each_parameter(fill);
  filler.check_all_used();
  return {std::move(config), std::move(enc), std::move(prompts), policy, epochs};
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_json(ck).dump() << "\n";
  if (!out) throw FormatError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace epep
