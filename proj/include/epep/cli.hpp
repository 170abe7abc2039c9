#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace epep {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // a verification or training failure
inline constexpr int kExitUsage = 2;    // bad arguments, config, data or files

struct TrainArgs {
  std::string config_path;  // empty: built-in defaults
  std::optional<std::string> output_dir;
  std::optional<std::string> method;
  std::optional<std::string> loss;
  std::optional<std::string> policy;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> warmup_epochs;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;  // empty: the checkpoint config's test split
  std::string split = "test";
  std::string report_path;  // empty: JSON to stdout
  std::string csv_path;     // empty: CSV to stdout
};

struct SynthArgs {
  std::string out;
  std::string config_path;
  std::string split = "train";
  std::optional<std::size_t> n;
  std::optional<double> text;
  std::optional<double> image;
  std::optional<std::uint64_t> seed;
};

struct ParamsArgs {
  int m = 2, d = 768, l = 16, r = 4;
};

struct VerifyArgs {
  std::vector<std::string> suites;
  std::string inject_fault;
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_synth(const SynthArgs& args, std::ostream& out, std::ostream& err);
int cmd_params(const ParamsArgs& args, std::ostream& out, std::ostream& err);
int cmd_verify(const VerifyArgs& args, std::ostream& out, std::ostream& err);

// Parses argv (argv[0] is the program name) and dispatches to a subcommand.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace epep
