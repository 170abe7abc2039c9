#pragma once

#include <nlohmann/json_fwd.hpp>

#include <string>

#include "epep/config.hpp"
#include "epep/model.hpp"
#include "epep/prompting.hpp"
#include "epep/training.hpp"

namespace epep {

inline constexpr int kCheckpointVersion = 1;
inline constexpr int kPromptBankVersion = 1;

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j, const std::string& what);

// Standalone prompt bank: m, d, l, r, policy, weight matrices and factors.
nlohmann::json prompt_bank_to_json(const PromptBank& bank);
PromptBank prompt_bank_from_json(const nlohmann::json& j);

struct Checkpoint {
  RunConfig config;
  MultimodalEncoder encoder;
  PromptModule prompts;
  CompleteSamplePolicy policy;
  int epochs_trained = 0;
};

Checkpoint make_checkpoint(const RunConfig& config, const TrainResult& result);

// Throws FormatError on a foreign format tag, a different format_version, or
// parameters that are missing, unknown or misshapen.
nlohmann::json checkpoint_to_json(const Checkpoint& ck);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace epep
