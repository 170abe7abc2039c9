#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "epep/bkm.hpp"
#include "epep/numerics.hpp"

namespace epep {

inline constexpr int kMaxModalities = 16;

/// The set of modality indices absent from one sample, held as a bitmask.
class MissingPattern {
 public:
  MissingPattern() = default;

  static MissingPattern none() { return {}; }
  static MissingPattern of(std::initializer_list<int> indices);
  static MissingPattern from_indices(std::span<const int> indices);
  static MissingPattern from_mask(std::uint32_t mask);
  static MissingPattern all(int m);

  bool empty() const { return mask_ == 0; }
  bool contains(int modality) const;
  int count() const;
  std::uint32_t mask() const { return mask_; }
  std::vector<int> indices() const;

  // Throws PatternError if any index is >= m.
  void validate(int m) const;

  bool operator==(const MissingPattern&) const = default;

 private:
  std::uint32_t mask_ = 0;
};

std::string to_string(const MissingPattern& p);

/// What a complete sample (nothing missing) receives as its prompt.
enum class CompleteSamplePolicy {
  ZeroPrompt,  // an all-zero prompt is still injected
  SkipPrompt,  // no prompt tokens at all
  AllWeights,  // treated as if every modality were missing
};

std::string to_string(CompleteSamplePolicy policy);
CompleteSamplePolicy parse_policy(std::string_view name);
// ZeroPrompt at training missing rates of 30% and above, SkipPrompt below.
CompleteSamplePolicy default_policy(double training_missing_rate);

enum class PromptMethod { EPEP, MAP, MSP, NoPrompt };

std::string to_string(PromptMethod method);
PromptMethod parse_method(std::string_view name);

using ParamVisitor = std::function<void(const std::string& name, Matrix& value)>;

/// One m×m weight matrix per modality plus the shared low-rank comprehensive prompt.
struct PromptBank {
  std::vector<Matrix> weights;
  LowRankPrompt comprehensive;
  CompleteSamplePolicy policy = CompleteSamplePolicy::ZeroPrompt;

  // Weight matrices start at identity plus N(0, 0.02) noise.
  static PromptBank create(BlockPartition partition, int rank, CompleteSamplePolicy policy,
                           Rng& rng);

  int m() const { return comprehensive.partition().m(); }
  const BlockPartition& partition() const { return comprehensive.partition(); }
  void validate() const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor& visit);
  std::int64_t parameter_count() const;
};

// Σ over missing modalities of their weight matrices (zero for an empty pattern).
Matrix assemble_weight(const PromptBank& bank, const MissingPattern& pattern);

// assemble_weight ⊛ materialize(comprehensive), with the bank's policy for complete samples.
std::optional<Matrix> assemble_prompt(const PromptBank& bank, const MissingPattern& pattern);

/// Adds the gradient of ⟨upstream, assemble_prompt(bank, pattern)⟩ into grad,
/// which must have the bank's shape (see PromptBank::for_each_parameter).
void accumulate_bank_gradients(const PromptBank& bank, const MissingPattern& pattern,
                               const Matrix& upstream, PromptBank& grad);

/// Dense MAP (one prompt per non-empty missing case) or MSP (one per modality) prompts.
struct BaselinePromptSet {
  PromptMethod kind = PromptMethod::MAP;
  int m = 0;
  std::vector<Matrix> prompts;
  CompleteSamplePolicy policy = CompleteSamplePolicy::ZeroPrompt;

  static BaselinePromptSet create(PromptMethod kind, int m, int d, int l,
                                  CompleteSamplePolicy policy, Rng& rng);
  static std::size_t prompt_count(PromptMethod kind, int m);

  void validate() const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor& visit);
  std::int64_t parameter_count() const;
};

// MAP: the prompt of the exact missing case. MSP: sum over missing modalities.
std::optional<Matrix> baseline_prompt(const BaselinePromptSet& set, const MissingPattern& pattern);

void accumulate_baseline_gradients(const BaselinePromptSet& set, const MissingPattern& pattern,
                                   const Matrix& upstream, BaselinePromptSet& grad);

// Trainable prompt parameter counts. EPEP uses the tabulated (d + l)·r + m³.
std::int64_t param_count(int m, int d, int l, int r, PromptMethod method);
// The count implied by per-block factors: (d + l)·r·m + m³.
std::int64_t param_count_blockwise(int m, int d, int l, int r);

struct ParamRow {
  PromptMethod method;
  std::optional<std::int64_t> count;  // empty when the configuration is invalid
  std::string complexity;
  std::string error;
};

struct ParamReport {
  int m, d, l, r;
  std::vector<ParamRow> rows;  // MAP, MSP, EPEP
  std::optional<std::int64_t> epep_blockwise;
  bool ordered() const;  // EPEP < MSP < MAP
};

ParamReport param_report(int m, int d, int l, int r);
void print_param_report(const ParamReport& report, std::ostream& out);

/// Prompt machinery attached to a model: nothing, EPE-P banks, or a baseline set.
///
/// Either one bank (shared by every injected layer) or one bank per injected
/// layer. A gradient is held in an object of identical shape.
class PromptModule {
 public:
  PromptModule() = default;

  static PromptModule none();
  static PromptModule epep(int m, int d, int l, int rank, int banks, CompleteSamplePolicy policy,
                           Rng& rng);
  static PromptModule baseline(PromptMethod kind, int m, int d, int l, int banks,
                               CompleteSamplePolicy policy, Rng& rng);

  PromptMethod method() const { return method_; }
  std::size_t num_banks() const;
  CompleteSamplePolicy policy() const;

  std::vector<PromptBank>& epep_banks() { return epep_; }
  const std::vector<PromptBank>& epep_banks() const { return epep_; }
  std::vector<BaselinePromptSet>& baseline_sets() { return baseline_; }
  const std::vector<BaselinePromptSet>& baseline_sets() const { return baseline_; }

  // One d×l prompt per bank, or an empty vector when the sample gets no prompt.
  std::vector<Matrix> prompts(const MissingPattern& pattern) const;

  // False when the sample's prompt (if any) does not depend on a trainable
  // parameter: no prompting, a skipped prompt, or an all-zero prompt.
  bool depends_on_parameters(const MissingPattern& pattern) const;

  // upstream holds one d×l gradient per bank.
  void accumulate(const MissingPattern& pattern, std::span<const Matrix> upstream,
                  PromptModule& grad) const;

  PromptModule zeros_like() const;
  void for_each_parameter(const ParamVisitor& visit);
  std::int64_t parameter_count() const;

 private:
  PromptMethod method_ = PromptMethod::NoPrompt;
  std::vector<PromptBank> epep_;
  std::vector<BaselinePromptSet> baseline_;
};

}  // namespace epep
