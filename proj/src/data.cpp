#include "epep/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>

#include "epep/error.hpp"

namespace epep {

namespace {

using json = nlohmann::json;

std::size_t quota(std::size_t n, double fraction) {
  // The epsilon absorbs binary rounding, e.g. 0.3 * 1000 = 299.99999999999994.
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction + 1e-9));
}

[[noreturn]] void fail(std::string_view source, std::size_t line, const std::string& field,
                       const std::string& message) {
  throw ParseError(std::string(source) + ":" + std::to_string(line) + ": field '" + field +
                   "': " + message);
}

}  // namespace

// ---------------------------------------------------------------------------
// Missing protocol

void MissingProtocol::validate() const {
  if (availability.empty()) throw ProtocolError("protocol needs at least one modality");
  if (availability.size() > static_cast<std::size_t>(kMaxModalities)) {
    throw ProtocolError("too many modalities in protocol");
  }
  double missing = 0.0;
  for (double a : availability) {
    if (!(a >= 0.0 && a <= 1.0)) {
      throw ProtocolError("availability " + std::to_string(a) + " outside [0, 1]");
    }
    missing += 1.0 - a;
  }
  if (missing > 1.0 + 1e-9) {
    throw ProtocolError("missing fractions sum to " + std::to_string(missing) +
                        " > 1; disjoint quotas are infeasible");
  }
  if (availability.size() == 1 && availability[0] < 1.0) {
    throw ProtocolError("a single-modality protocol cannot drop its only modality");
  }
}

double MissingProtocol::missing_rate() const {
  double missing = 0.0;
  for (double a : availability) missing += 1.0 - a;
  return missing;
}

std::vector<std::size_t> MissingProtocol::missing_quotas(std::size_t n) const {
  validate();
  std::vector<std::size_t> q;
  for (double a : availability) q.push_back(quota(n, 1.0 - a));
  if (std::accumulate(q.begin(), q.end(), std::size_t{0}) > n) {
    throw ProtocolError("missing quotas exceed the sample count");
  }
  return q;
}

std::vector<MissingPattern> sample_pattern(const MissingProtocol& protocol, std::size_t n,
                                           Rng& rng) {
  const auto quotas = protocol.missing_quotas(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<MissingPattern> patterns(n);
  std::size_t cursor = 0;
  for (std::size_t mod = 0; mod < quotas.size(); ++mod) {
    for (std::size_t k = 0; k < quotas[mod]; ++k) {
      patterns[order[cursor++]] = MissingPattern::of({static_cast<int>(mod)});
    }
  }
  return patterns;
}

// ---------------------------------------------------------------------------
// Synthetic task

void SyntheticTask::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("SyntheticTask: " + what);
  };
  require(num_classes >= 2, "num_classes must be at least 2");
  require(levels >= 1, "levels must be at least 1");
  require(text_signal >= 0.0 && text_signal <= 1.0, "text_signal must lie in [0, 1]");
  require(image_signal >= 0.0, "image_signal must be non-negative");
  require(noise >= 0.0 && noise <= 1.0, "noise must lie in [0, 1]");
  require(tokens_per_modality >= num_classes, "need at least one token per class");
  require(patch_dim >= num_classes * (2 * levels + 1), "patch_dim too small for the image code");
}

int SyntheticTask::required_vocab() const { return 1 + num_classes * (2 * levels + 1); }

std::vector<Sample> generate_task(const SyntheticTask& task, std::size_t n, Rng& rng) {
  task.validate();
  const auto k = static_cast<std::size_t>(task.num_classes);
  const int span = 2 * task.levels + 1;
  const auto t = static_cast<std::size_t>(task.tokens_per_modality);
  const auto p = static_cast<std::size_t>(task.patch_dim);
  const int vocab = task.required_vocab();

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % k);
  rng.shuffle(std::span<int>(labels));

  std::vector<Sample> samples;
  samples.reserve(n);
  std::vector<int> a(k), b(k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto want = static_cast<std::size_t>(labels[i]);
    // Rejection sampling: draw latents until their unique argmax is the quota label.
    for (;;) {
      for (std::size_t c = 0; c < k; ++c) {
        a[c] = static_cast<int>(rng.below(static_cast<std::uint64_t>(span))) - task.levels;
        b[c] = static_cast<int>(rng.below(static_cast<std::uint64_t>(span))) - task.levels;
      }
      std::size_t best = 0;
      int best_val = a[0] + b[0];
      bool tie = false;
      for (std::size_t c = 1; c < k; ++c) {
        const int v = a[c] + b[c];
        if (v > best_val) {
          best = c;
          best_val = v;
          tie = false;
        } else if (v == best_val) {
          tie = true;
        }
      }
      if (!tie && best == want) break;
    }

    Sample s;
    s.labels = {labels[i]};
    s.text_tokens.resize(t);
    for (std::size_t j = 0; j < t; ++j) {
      const std::size_t c = j % k;
      const int code = 1 + static_cast<int>(c) * span + (a[c] + task.levels);
      const bool informative = rng.uniform() < task.text_signal * (1.0 - task.noise);
      s.text_tokens[j] =
          informative ? code : 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - 1)));
    }
    s.image_patches = Matrix(t, p);
    for (std::size_t j = 0; j < t; ++j) {
      const std::size_t c = j % k;
      auto row = s.image_patches.row(j);
      for (std::size_t q = 0; q < p; ++q) row[q] = task.noise * rng.normal();
      row[c * static_cast<std::size_t>(span) + static_cast<std::size_t>(b[c] + task.levels)] +=
          task.image_signal;
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<Sample> apply_patterns(std::vector<Sample> samples,
                                   const std::vector<MissingPattern>& patterns) {
  if (samples.size() != patterns.size()) {
    throw ShapeError("apply_patterns: " + std::to_string(samples.size()) + " samples vs " +
                     std::to_string(patterns.size()) + " patterns");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].pattern = patterns[i];
    samples[i] = substitute_dummy(std::move(samples[i]));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// JSONL

std::vector<Sample> parse_jsonl(std::istream& in, const SampleShape& shape,
                                std::string_view source) {
  const auto t = static_cast<std::size_t>(shape.tokens_per_modality);
  const auto p = static_cast<std::size_t>(shape.patch_dim);
  std::vector<Sample> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(source, lineno, "<line>", std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) fail(source, lineno, "<line>", "expected a JSON object");
    for (const auto& [key, _] : obj.items()) {
      if (key != "text_tokens" && key != "image_patches" && key != "label") {
        fail(source, lineno, key, "unknown field");
      }
    }

    Sample s;
    std::vector<int> missing;
    if (!obj.contains("text_tokens")) fail(source, lineno, "text_tokens", "missing field");
    if (!obj.contains("image_patches")) fail(source, lineno, "image_patches", "missing field");
    if (!obj.contains("label")) fail(source, lineno, "label", "missing field");

    const json& text = obj["text_tokens"];
    if (text.is_null()) {
      missing.push_back(kTextModality);
      s.text_tokens.assign(t, kPadToken);
    } else {
      if (!text.is_array() || text.size() != t) {
        fail(source, lineno, "text_tokens", "expected an array of " + std::to_string(t) + " ints");
      }
      for (const auto& v : text) {
        if (!v.is_number_integer()) fail(source, lineno, "text_tokens", "non-integer token");
        s.text_tokens.push_back(v.get<int>());
      }
    }

    const json& image = obj["image_patches"];
    s.image_patches = Matrix(t, p);
    if (image.is_null()) {
      missing.push_back(kImageModality);
    } else {
      if (!image.is_array() || image.size() != t) {
        fail(source, lineno, "image_patches",
             "expected an array of " + std::to_string(t) + " patches");
      }
      for (std::size_t j = 0; j < t; ++j) {
        const json& row = image[j];
        if (!row.is_array() || row.size() != p) {
          fail(source, lineno, "image_patches",
               "patch " + std::to_string(j) + " must hold " + std::to_string(p) + " numbers");
        }
        for (std::size_t q = 0; q < p; ++q) {
          if (!row[q].is_number()) fail(source, lineno, "image_patches", "non-numeric value");
          const double v = row[q].get<double>();
          if (!std::isfinite(v)) fail(source, lineno, "image_patches", "non-finite value");
          s.image_patches(j, q) = v;
        }
      }
    }
    if (missing.size() == 2) {
      throw ProtocolError(std::string(source) + ":" + std::to_string(lineno) +
                          ": both modalities are null; every sample needs one present modality");
    }

    const json& label = obj["label"];
    if (label.is_number_integer()) {
      s.labels.push_back(label.get<int>());
    } else if (label.is_array() && !label.empty()) {
      for (const auto& v : label) {
        if (!v.is_number_integer()) fail(source, lineno, "label", "non-integer class");
        s.labels.push_back(v.get<int>());
      }
    } else {
      fail(source, lineno, "label", "expected an int or a non-empty int array");
    }
    for (int c : s.labels) {
      if (c < 0 || c >= shape.num_classes) {
        fail(source, lineno, "label",
             "class " + std::to_string(c) + " outside [0, " + std::to_string(shape.num_classes) +
                 ")");
      }
    }
    s.pattern = MissingPattern::from_indices(missing);
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<Sample> load_jsonl(const std::string& path, const SampleShape& shape) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset '" + path + "'");
  return parse_jsonl(in, shape, path);
}

void write_jsonl(std::ostream& out, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    json obj = json::object();
    if (s.pattern.contains(kTextModality)) {
      obj["text_tokens"] = nullptr;
    } else {
      obj["text_tokens"] = s.text_tokens;
    }
    if (s.pattern.contains(kImageModality)) {
      obj["image_patches"] = nullptr;
    } else {
      json rows = json::array();
      for (std::size_t j = 0; j < s.image_patches.rows(); ++j) {
        auto r = s.image_patches.row(j);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
      }
      obj["image_patches"] = std::move(rows);
    }
    if (s.labels.size() == 1) {
      obj["label"] = s.labels.front();
    } else {
      obj["label"] = s.labels;
    }
    out << obj.dump() << "\n";
  }
}

void save_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write dataset '" + path + "'");
  write_jsonl(out, samples);
}

}  // namespace epep
