#include "epep/prompting.hpp"

#include <bit>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "epep/error.hpp"

namespace epep {

namespace {

void check_index(int modality) {
  if (modality < 0 || modality >= kMaxModalities) {
    throw PatternError("modality index " + std::to_string(modality) + " out of range");
  }
}

// The pattern whose prompt a sample receives, or nullopt for no prompt.
// Complete samples map to the zero pattern under ZeroPrompt (an empty sum).
std::optional<MissingPattern> effective_pattern(const MissingPattern& pattern,
                                                CompleteSamplePolicy policy, int m) {
  pattern.validate(m);
  if (!pattern.empty()) return pattern;
  switch (policy) {
    case CompleteSamplePolicy::SkipPrompt:
      return std::nullopt;
    case CompleteSamplePolicy::AllWeights:
      return MissingPattern::all(m);
    case CompleteSamplePolicy::ZeroPrompt:
      break;
  }
  return pattern;
}

void check_dims(int m, int d, int l) {
  if (m < 1 || d < 1 || l < 1) {
    throw ConfigError("dimensions must be positive (m=" + std::to_string(m) +
                      ", d=" + std::to_string(d) + ", l=" + std::to_string(l) + ")");
  }
  if (m > kMaxModalities) {
    throw ConfigError("at most " + std::to_string(kMaxModalities) + " modalities supported");
  }
}

void check_epep_dims(int m, int d, int l, int r) {
  check_dims(m, d, l);
  if (d % m != 0 || l % m != 0) {
    throw ConfigError("EPEP requires m to divide d and l (m=" + std::to_string(m) + ", d=" +
                      std::to_string(d) + ", l=" + std::to_string(l) + ")");
  }
  if (r < 1 || r > std::min(d / m, l / m)) {
    throw ConfigError("rank r=" + std::to_string(r) + " outside [1, min(d/m, l/m)]");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// MissingPattern

MissingPattern MissingPattern::of(std::initializer_list<int> indices) {
  return from_indices(std::span<const int>(indices.begin(), indices.size()));
}

MissingPattern MissingPattern::from_indices(std::span<const int> indices) {
  MissingPattern p;
  for (int i : indices) {
    check_index(i);
    p.mask_ |= 1u << i;
  }
  return p;
}

MissingPattern MissingPattern::from_mask(std::uint32_t mask) {
  if (mask >> kMaxModalities) throw PatternError("pattern mask out of range");
  MissingPattern p;
  p.mask_ = mask;
  return p;
}

MissingPattern MissingPattern::all(int m) {
  check_index(m - 1);
  return from_mask((1u << m) - 1u);
}

bool MissingPattern::contains(int modality) const {
  return modality >= 0 && modality < kMaxModalities && ((mask_ >> modality) & 1u);
}

int MissingPattern::count() const { return std::popcount(mask_); }

std::vector<int> MissingPattern::indices() const {
  std::vector<int> out;
  for (int i = 0; i < kMaxModalities; ++i)
    if (contains(i)) out.push_back(i);
  return out;
}

void MissingPattern::validate(int m) const {
  if (m < 1 || m > kMaxModalities) throw PatternError("invalid modality count");
  if (mask_ >> m) {
    throw PatternError("pattern " + to_string(*this) + " names a modality >= m=" +
                       std::to_string(m));
  }
}

std::string to_string(const MissingPattern& p) {
  std::string s = "{";
  bool first = true;
  for (int i : p.indices()) {
    if (!first) s += ",";
    s += std::to_string(i);
    first = false;
  }
  return s + "}";
}

// ---------------------------------------------------------------------------
// Enums

std::string to_string(CompleteSamplePolicy policy) {
  switch (policy) {
    case CompleteSamplePolicy::ZeroPrompt:
      return "zero";
    case CompleteSamplePolicy::SkipPrompt:
      return "skip";
    case CompleteSamplePolicy::AllWeights:
      return "all_weights";
  }
  return "?";
}

CompleteSamplePolicy parse_policy(std::string_view name) {
  if (name == "zero" || name == "ZeroPrompt") return CompleteSamplePolicy::ZeroPrompt;
  if (name == "skip" || name == "SkipPrompt") return CompleteSamplePolicy::SkipPrompt;
  if (name == "all_weights" || name == "AllWeights") return CompleteSamplePolicy::AllWeights;
  throw ConfigError("unknown complete-sample policy '" + std::string(name) + "'");
}

CompleteSamplePolicy default_policy(double training_missing_rate) {
  return training_missing_rate >= 0.3 ? CompleteSamplePolicy::ZeroPrompt
                                      : CompleteSamplePolicy::SkipPrompt;
}

std::string to_string(PromptMethod method) {
  switch (method) {
    case PromptMethod::EPEP:
      return "EPEP";
    case PromptMethod::MAP:
      return "MAP";
    case PromptMethod::MSP:
      return "MSP";
    case PromptMethod::NoPrompt:
      return "NoPrompt";
  }
  return "?";
}

PromptMethod parse_method(std::string_view name) {
  if (name == "EPEP" || name == "EPE-P") return PromptMethod::EPEP;
  if (name == "MAP") return PromptMethod::MAP;
  if (name == "MSP") return PromptMethod::MSP;
  if (name == "NoPrompt") return PromptMethod::NoPrompt;
  throw ConfigError("unknown prompt method '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// PromptBank

PromptBank PromptBank::create(BlockPartition partition, int rank, CompleteSamplePolicy policy,
                              Rng& rng) {
  const auto m = static_cast<std::size_t>(partition.m());
  std::vector<Matrix> weights;
  weights.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    Matrix a = Matrix::identity(m);
    for (double& v : a.data()) v += rng.normal(0.0, 0.02);
    weights.push_back(std::move(a));
  }
  LowRankPrompt b = LowRankPrompt::random(partition, rank, rng);
  return PromptBank{std::move(weights), std::move(b), policy};
}

void PromptBank::validate() const {
  const auto mm = static_cast<std::size_t>(m());
  if (weights.size() != mm) {
    throw ShapeError("PromptBank: expected " + std::to_string(mm) + " weight matrices, got " +
                     std::to_string(weights.size()));
  }
  for (const auto& a : weights) {
    if (a.rows() != mm || a.cols() != mm) throw ShapeError("PromptBank: weight matrix not m×m");
  }
}

void PromptBank::for_each_parameter(const std::string& prefix, const ParamVisitor& visit) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    visit(prefix + "A" + std::to_string(i), weights[i]);
  }
  const int mm = m();
  for (int i = 0; i < mm; ++i) {
    for (int j = 0; j < mm; ++j) {
      auto& f = comprehensive.block(i, j);
      const std::string tag = std::to_string(i) + "_" + std::to_string(j);
      visit(prefix + "u" + tag, f.u);
      visit(prefix + "v" + tag, f.v);
    }
  }
}

std::int64_t PromptBank::parameter_count() const {
  const std::int64_t mm = m();
  return mm * mm * mm + comprehensive.parameter_count();
}

Matrix assemble_weight(const PromptBank& bank, const MissingPattern& pattern) {
  bank.validate();
  pattern.validate(bank.m());
  const auto mm = static_cast<std::size_t>(bank.m());
  Matrix a(mm, mm);
  for (int i : pattern.indices()) a += bank.weights[static_cast<std::size_t>(i)];
  return a;
}

std::optional<Matrix> assemble_prompt(const PromptBank& bank, const MissingPattern& pattern) {
  const auto eff = effective_pattern(pattern, bank.policy, bank.m());
  if (!eff) return std::nullopt;
  const auto& part = bank.partition();
  if (eff->empty()) {
    return Matrix(static_cast<std::size_t>(part.d()), static_cast<std::size_t>(part.l()));
  }
  return bkm_multiply(assemble_weight(bank, *eff), materialize(bank.comprehensive), part);
}

void accumulate_bank_gradients(const PromptBank& bank, const MissingPattern& pattern,
                               const Matrix& upstream, PromptBank& grad) {
  const auto eff = effective_pattern(pattern, bank.policy, bank.m());
  // An absent or all-zero prompt does not depend on any parameter.
  if (!eff || eff->empty()) return;
  const Matrix a = assemble_weight(bank, *eff);
  BkmGradients g = bkm_gradients(a, bank.comprehensive, upstream);
  for (int i : eff->indices()) grad.weights[static_cast<std::size_t>(i)] += g.grad_a;
  auto& dst = grad.comprehensive.factors();
  for (std::size_t k = 0; k < dst.size(); ++k) {
    dst[k].u += g.grad_factors[k].u;
    dst[k].v += g.grad_factors[k].v;
  }
}

// ---------------------------------------------------------------------------
// Baselines

std::size_t BaselinePromptSet::prompt_count(PromptMethod kind, int m) {
  switch (kind) {
    case PromptMethod::MAP:
      return (std::size_t{1} << m) - 1;
    case PromptMethod::MSP:
      return static_cast<std::size_t>(m);
    default:
      throw ConfigError("baseline prompt sets are MAP or MSP, not " + to_string(kind));
  }
}

BaselinePromptSet BaselinePromptSet::create(PromptMethod kind, int m, int d, int l,
                                            CompleteSamplePolicy policy, Rng& rng) {
  check_dims(m, d, l);
  BaselinePromptSet set{kind, m, {}, policy};
  const std::size_t count = prompt_count(kind, m);
  set.prompts.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Matrix p(static_cast<std::size_t>(d), static_cast<std::size_t>(l));
    for (double& v : p.data()) v = rng.normal(0.0, 1.0);
    set.prompts.push_back(std::move(p));
  }
  return set;
}

void BaselinePromptSet::validate() const {
  if (prompts.size() != prompt_count(kind, m)) {
    throw ShapeError("BaselinePromptSet: " + to_string(kind) + " with m=" + std::to_string(m) +
                     " needs " + std::to_string(prompt_count(kind, m)) + " prompts, got " +
                     std::to_string(prompts.size()));
  }
  for (const auto& p : prompts) {
    if (!p.same_shape(prompts.front())) throw ShapeError("BaselinePromptSet: ragged prompts");
  }
}

void BaselinePromptSet::for_each_parameter(const std::string& prefix, const ParamVisitor& visit) {
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    visit(prefix + "P" + std::to_string(k), prompts[k]);
  }
}

std::int64_t BaselinePromptSet::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : prompts) total += static_cast<std::int64_t>(p.size());
  return total;
}

std::optional<Matrix> baseline_prompt(const BaselinePromptSet& set, const MissingPattern& pattern) {
  set.validate();
  const auto eff = effective_pattern(pattern, set.policy, set.m);
  if (!eff) return std::nullopt;
  const Matrix& shape = set.prompts.front();
  if (eff->empty()) return Matrix(shape.rows(), shape.cols());
  if (set.kind == PromptMethod::MAP) return set.prompts[eff->mask() - 1];
  Matrix sum(shape.rows(), shape.cols());
  for (int i : eff->indices()) sum += set.prompts[static_cast<std::size_t>(i)];
  return sum;
}

void accumulate_baseline_gradients(const BaselinePromptSet& set, const MissingPattern& pattern,
                                   const Matrix& upstream, BaselinePromptSet& grad) {
  const auto eff = effective_pattern(pattern, set.policy, set.m);
  if (!eff || eff->empty()) return;
  if (set.kind == PromptMethod::MAP) {
    grad.prompts[eff->mask() - 1] += upstream;
    return;
  }
  for (int i : eff->indices()) grad.prompts[static_cast<std::size_t>(i)] += upstream;
}

// ---------------------------------------------------------------------------
// Parameter accounting

std::int64_t param_count(int m, int d, int l, int r, PromptMethod method) {
  const std::int64_t dl = static_cast<std::int64_t>(d) * l;
  switch (method) {
    case PromptMethod::MAP:
      check_dims(m, d, l);
      return ((std::int64_t{1} << m) - 1) * dl;
    case PromptMethod::MSP:
      check_dims(m, d, l);
      return m * dl;
    case PromptMethod::EPEP: {
      check_epep_dims(m, d, l, r);
      const std::int64_t mm = m;
      return (static_cast<std::int64_t>(d) + l) * r + mm * mm * mm;
    }
    case PromptMethod::NoPrompt:
      return 0;
  }
  return 0;
}

std::int64_t param_count_blockwise(int m, int d, int l, int r) {
  check_epep_dims(m, d, l, r);
  const std::int64_t mm = m;
  return (static_cast<std::int64_t>(d) + l) * r * mm + mm * mm * mm;
}

bool ParamReport::ordered() const {
  std::optional<std::int64_t> map, msp, epep;
  for (const auto& row : rows) {
    if (row.method == PromptMethod::MAP) map = row.count;
    if (row.method == PromptMethod::MSP) msp = row.count;
    if (row.method == PromptMethod::EPEP) epep = row.count;
  }
  return map && msp && epep && *epep < *msp && *msp < *map;
}

ParamReport param_report(int m, int d, int l, int r) {
  ParamReport report{m, d, l, r, {}, std::nullopt};
  const std::pair<PromptMethod, const char*> methods[] = {
      {PromptMethod::MAP, "O(d*l)"}, {PromptMethod::MSP, "O(d*l)"}, {PromptMethod::EPEP, "O(d+l)"}};
  for (const auto& [method, complexity] : methods) {
    ParamRow row{method, std::nullopt, complexity, {}};
    try {
      row.count = param_count(m, d, l, r, method);
    } catch (const ConfigError& e) {
      row.error = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  try {
    report.epep_blockwise = param_count_blockwise(m, d, l, r);
  } catch (const ConfigError&) {
  }
  return report;
}

void print_param_report(const ParamReport& report, std::ostream& out) {
  out << "m=" << report.m << " d=" << report.d << " l=" << report.l << " r=" << report.r << "\n";
  out << std::left << std::setw(8) << "method" << std::setw(14) << "params" << "complexity\n";
  for (const auto& row : report.rows) {
    out << std::left << std::setw(8) << to_string(row.method);
    if (row.count) {
      out << std::setw(14) << *row.count << row.complexity << "\n";
    } else {
      out << std::setw(14) << "error" << row.error << "\n";
    }
  }
  if (report.epep_blockwise) {
    out << "note: per-block factors of rank r over m*m blocks hold (d+l)*r*m + m^3 = "
        << *report.epep_blockwise << " parameters; the EPEP row uses (d+l)*r + m^3\n";
  }
  out << "ordering EPEP < MSP < MAP: " << (report.ordered() ? "yes" : "no") << "\n";
}

// ---------------------------------------------------------------------------
// PromptModule

PromptModule PromptModule::none() { return {}; }

PromptModule PromptModule::epep(int m, int d, int l, int rank, int banks,
                                CompleteSamplePolicy policy, Rng& rng) {
  if (banks < 1) throw ConfigError("PromptModule: need at least one bank");
  PromptModule pm;
  pm.method_ = PromptMethod::EPEP;
  for (int b = 0; b < banks; ++b) {
    pm.epep_.push_back(PromptBank::create(BlockPartition(m, d, l), rank, policy, rng));
  }
  return pm;
}

PromptModule PromptModule::baseline(PromptMethod kind, int m, int d, int l, int banks,
                                    CompleteSamplePolicy policy, Rng& rng) {
  if (banks < 1) throw ConfigError("PromptModule: need at least one bank");
  PromptModule pm;
  pm.method_ = kind;
  for (int b = 0; b < banks; ++b) {
    pm.baseline_.push_back(BaselinePromptSet::create(kind, m, d, l, policy, rng));
  }
  return pm;
}

std::size_t PromptModule::num_banks() const {
  return method_ == PromptMethod::EPEP ? epep_.size() : baseline_.size();
}

CompleteSamplePolicy PromptModule::policy() const {
  if (!epep_.empty()) return epep_.front().policy;
  if (!baseline_.empty()) return baseline_.front().policy;
  return CompleteSamplePolicy::SkipPrompt;
}

std::vector<Matrix> PromptModule::prompts(const MissingPattern& pattern) const {
  std::vector<Matrix> out;
  if (method_ == PromptMethod::NoPrompt) return out;
  for (std::size_t b = 0; b < num_banks(); ++b) {
    auto p = method_ == PromptMethod::EPEP ? assemble_prompt(epep_[b], pattern)
                                           : baseline_prompt(baseline_[b], pattern);
    if (!p) return {};
    out.push_back(std::move(*p));
  }
  return out;
}

bool PromptModule::depends_on_parameters(const MissingPattern& pattern) const {
  if (method_ == PromptMethod::NoPrompt || num_banks() == 0) return false;
  const int m = method_ == PromptMethod::EPEP ? epep_.front().m() : baseline_.front().m;
  const auto eff = effective_pattern(pattern, policy(), m);
  return eff && !eff->empty();
}

void PromptModule::accumulate(const MissingPattern& pattern, std::span<const Matrix> upstream,
                              PromptModule& grad) const {
  if (method_ == PromptMethod::NoPrompt) return;
  if (upstream.size() != num_banks()) {
    throw ShapeError("PromptModule::accumulate: expected " + std::to_string(num_banks()) +
                     " upstream gradients, got " + std::to_string(upstream.size()));
  }
  for (std::size_t b = 0; b < num_banks(); ++b) {
    if (method_ == PromptMethod::EPEP) {
      accumulate_bank_gradients(epep_[b], pattern, upstream[b], grad.epep_[b]);
    } else {
      accumulate_baseline_gradients(baseline_[b], pattern, upstream[b], grad.baseline_[b]);
    }
  }
}

PromptModule PromptModule::zeros_like() const {
  PromptModule z = *this;
  z.for_each_parameter([](const std::string&, Matrix& m) { m.fill(0.0); });
  return z;
}

void PromptModule::for_each_parameter(const ParamVisitor& visit) {
  for (std::size_t b = 0; b < epep_.size(); ++b) {
    epep_[b].for_each_parameter("prompt.bank" + std::to_string(b) + ".", visit);
  }
  for (std::size_t b = 0; b < baseline_.size(); ++b) {
    baseline_[b].for_each_parameter("prompt.bank" + std::to_string(b) + ".", visit);
  }
}

std::int64_t PromptModule::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& b : epep_) total += b.parameter_count();
  for (const auto& b : baseline_) total += b.parameter_count();
  return total;
}

}  // namespace epep
