#pragma once

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qdfl/io.hpp"
#include "qdfl/reid.hpp"

namespace qdfl {

// Process exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDivergence = 4;
inline constexpr int kExitProtocol = 5;
inline constexpr int kExitGradcheck = 6;

int exit_code_for(const std::exception& e);

struct TrainSummary {
    std::filesystem::path model_path;
    std::filesystem::path trace_path;
    std::size_t steps = 0;  // per branch
    std::map<char, double> final_loss;
};

/// Reads the config, trains, writes the model file and the loss trace.
TrainSummary cmd_train(const std::filesystem::path& config_path, std::ostream& log);

struct ExtractSummary {
    std::size_t succeeded = 0;
    std::vector<std::string> failed;  // "sample_id: reason"
    std::size_t descriptor_length = 0;
};

/// One descriptor per manifest record. Records whose image cannot be read are
/// reported and skipped.
ExtractSummary cmd_extract(const std::filesystem::path& model_path, const std::filesystem::path& manifest_path,
                           const std::filesystem::path& out_path, std::ostream& log);

/// Prints the summary line and writes the CMC curve to cmc_csv (when given).
EvalReport cmd_eval(const std::filesystem::path& features_path, const std::filesystem::path& manifest_path,
                    Protocol protocol, std::ostream& out, const std::optional<std::filesystem::path>& cmc_csv);

Manifest cmd_synth(const SynthOptions& opts, const std::filesystem::path& out_dir, std::ostream& log);

/// Layer and toy-network gradient checks. Returns true when every case passes.
bool cmd_gradcheck(const std::string& profile, std::optional<double> tolerance, std::size_t n_probes,
                   std::uint64_t seed, std::ostream& out);

}  // namespace qdfl
