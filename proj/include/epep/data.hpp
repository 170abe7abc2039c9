#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "epep/model.hpp"
#include "epep/numerics.hpp"
#include "epep/prompting.hpp"

namespace epep {

/// Per-modality availability, e.g. {1.0, 0.5} for "text 100% / image 50%".
///
/// Missing quotas are exact: floor(n · (1 − availability)) samples miss each
/// modality, and different modalities go missing on disjoint samples, so no
/// sample loses every modality.
struct MissingProtocol {
  std::vector<double> availability;

  void validate() const;
  // Fraction of samples missing at least one modality.
  double missing_rate() const;
  std::vector<std::size_t> missing_quotas(std::size_t n) const;
  bool operator==(const MissingProtocol&) const = default;
};

std::vector<MissingPattern> sample_pattern(const MissingProtocol& protocol, std::size_t n,
                                           Rng& rng);

/// Two-modality classification task whose label depends on both modalities.
///
/// Each sample draws integer latents a, b ∈ {−levels..levels}^K and its class
/// is argmax(a + b) (ties are redrawn). Text tokens spell out a, image
/// patches one-hot encode b, so either modality alone only sees half of the
/// evidence.
struct SyntheticTask {
  int num_classes = 2;
  int levels = 2;
  double text_signal = 1.0;   // fraction of text tokens carrying the code
  double image_signal = 1.0;  // amplitude of the image code
  double noise = 0.3;         // token corruption probability / patch noise std
  int tokens_per_modality = 16;
  int patch_dim = 16;

  void validate() const;
  // Smallest text vocabulary that holds every code token plus padding.
  int required_vocab() const;
  bool operator==(const SyntheticTask&) const = default;
};

// n complete samples with exact per-class quotas.
std::vector<Sample> generate_task(const SyntheticTask& task, std::size_t n, Rng& rng);

// Attaches patterns and substitutes dummy inputs for the missing modalities.
std::vector<Sample> apply_patterns(std::vector<Sample> samples,
                                   const std::vector<MissingPattern>& patterns);

struct SampleShape {
  int tokens_per_modality = 16;
  int patch_dim = 16;
  int num_classes = 2;
};

// JSON Lines, one sample per line:
//   {"text_tokens": [int...] | null, "image_patches": [[float...]...] | null,
//    "label": int | [int...]}
std::vector<Sample> load_jsonl(const std::string& path, const SampleShape& shape);
std::vector<Sample> parse_jsonl(std::istream& in, const SampleShape& shape,
                                std::string_view source = "<stream>");
void write_jsonl(std::ostream& out, const std::vector<Sample>& samples);
void save_jsonl(const std::string& path, const std::vector<Sample>& samples);

}  // namespace epep
