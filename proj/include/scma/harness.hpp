#pragma once

// Run configuration, artifact layout and the subcommands behind the `scma`
// command-line tool. Kept in a library so tests can drive every command.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "scma/adaptation.hpp"
#include "scma/env.hpp"
#include "scma/policy.hpp"
#include "scma/world_model.hpp"

namespace scma::harness {

struct RunConfig {
    std::string run_id = "default";
    std::string mode = "pretrain";  // verify-exact | pretrain | adapt | eval | render
    std::string preset = "desk";
    std::uint64_t seed = 0;

    env::EnvConfig env;
    env::NoiseSpec noise;
    wm::PretrainConfig pretrain;  // world-model dims, learning rate and budget
    adapt::AdaptConfig adapt;
    policy::PolicySpec collect_policy = adapt::default_collect_policy();
    policy::PolicySpec eval_policy;  // scripted greedy
    int eval_episodes = 20;
    std::uint64_t eval_first_seed = 1000000;
    int render_frames = 8;

    // verify-exact
    std::size_t exact_max_n = 6;          // counting-formula grid
    std::size_t exact_theorem_max_n = 4;  // brute-force solution sets
    std::int64_t exact_denominator = 8;

    struct Paths {
        std::string root = "runs";
        std::string world_model;  // empty: <root>/<run_id>/pretrain/world_model.bin
        std::string denoiser;     // empty: none for eval, <root>/<run_id>/adapt/denoiser.bin for render
    } paths;
};

/// "desk" (defaults tuned for one CPU core) or "paper" (recorded large-scale values).
RunConfig preset(const std::string& name);

nlohmann::json to_json(const RunConfig& c);
/// Overlays the fields present in `j` onto `base`; unknown keys are rejected.
RunConfig from_json(const nlohmann::json& j, RunConfig base);

/// FNV-1a over the canonical JSON of every field that can change numbers
/// (run_id, paths and mode excluded).
std::string config_hash(const RunConfig& c);

class UsageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

std::filesystem::path output_root(const RunConfig& c);  // honours SCMA_OUT_DIR
std::filesystem::path command_dir(const RunConfig& c, const std::string& command);
std::filesystem::path world_model_path(const RunConfig& c);
std::optional<std::filesystem::path> denoiser_path(const RunConfig& c, bool required);

/// Compile-time `git describe` of the source tree, or "unknown".
std::string git_describe();

struct CommandOptions {
    bool force = false;
    bool corrupt_formula = false;  // test hook for verify-exact
    std::ostream* log = nullptr;
};

// Each returns a process exit code; 0 is success.
int cmd_verify_exact(const RunConfig& c, const CommandOptions& o);
int cmd_pretrain(const RunConfig& c, const CommandOptions& o);
int cmd_adapt(const RunConfig& c, const CommandOptions& o);
int cmd_eval(const RunConfig& c, const CommandOptions& o);
int cmd_render(const RunConfig& c, const CommandOptions& o);

int run_command(const RunConfig& c, const CommandOptions& o);

/// Concatenates per-seed CSVs, prefixing a seed column.
void merge_csvs(const std::vector<std::pair<std::uint64_t, std::filesystem::path>>& inputs,
                const std::filesystem::path& output);

}  // namespace scma::harness
