#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace epep {

struct CheckResult {
  std::string operation;
  bool passed = false;
  std::string detail;
};

struct SuiteResult {
  std::string name;
  std::vector<CheckResult> checks;
  bool passed() const;
};

struct VerifyOptions {
  std::uint64_t seed = 20240611;
  // Test hook: perturbs the named operation's output inside the suite so the
  // failure report can be checked. Empty in normal runs.
  std::string inject_fault;
};

// numerics, bkm, evidential, metrics, protocol, params, model
const std::vector<std::string>& verify_suite_names();

// Throws ConfigError for an unknown suite name.
SuiteResult run_verify_suite(const std::string& name, const VerifyOptions& options);

// Runs the suites (all when empty), prints one line per check and one per
// suite, and returns 0 only if everything passed.
int run_verify(std::ostream& out, const std::vector<std::string>& suites,
               const VerifyOptions& options);

}  // namespace epep
