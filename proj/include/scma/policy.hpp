#pragma once

// Scripted policies that read agent and goal positions from pixels. They are
// never trained, so any change in behaviour under a distractor comes from the
// observations they are fed.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "scma/env.hpp"

namespace scma::policy {

enum class PolicyVariant { ScriptedGreedy, EpsilonGreedy, Random };

std::string to_string(PolicyVariant v);
PolicyVariant policy_variant_from_string(const std::string& s);

struct PolicySpec {
    PolicyVariant variant = PolicyVariant::ScriptedGreedy;
    double epsilon = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
    /// Stable FNV-1a digest of the spec, used to prove adaptation leaves it alone.
    std::uint64_t hash() const;
};

/// Max per-channel distance between a cell's mean color and a reserved color
/// for the cell to count as showing it.
inline constexpr double kDecodeTolerance = 0.25;

struct Decoded {
    std::optional<env::Cell> agent;
    std::optional<env::Cell> goal;
};

Decoded decode(const env::Observation& obs, int grid_size);

/// Greedy move toward the goal, horizontal first.
int greedy_action(const env::Cell& agent, const env::Cell& goal);

class Policy {
   public:
    Policy(PolicySpec spec, int grid_size);

    int act(const env::Observation& obs);

    const PolicySpec& spec() const { return spec_; }
    std::uint64_t steps() const { return steps_; }
    std::uint64_t blind_steps() const { return blind_steps_; }

   private:
    int random_action();

    PolicySpec spec_;
    int grid_size_;
    std::mt19937_64 rng_;
    std::uint64_t steps_ = 0;
    std::uint64_t blind_steps_ = 0;
};

using Denoiser = std::function<env::Observation(const env::Observation&)>;

struct EvalReport {
    int episodes = 0;
    double mean_return = 0.0;
    double std_return = 0.0;
    double blind_step_rate = 0.0;
    /// Mean per-pixel MSE of what the policy saw against the clean frame.
    double oracle_mse = 0.0;
    std::vector<double> returns;
    std::vector<std::uint64_t> episode_seeds;
};

/// Episode i is reset with seed `first_episode_seed + i`, independent of the
/// denoiser, so runs with and without one face identical start states.
EvalReport evaluate(const PolicySpec& spec, const env::EnvConfig& config, const env::NoiseSpec& noise,
                    const Denoiser& denoiser, int episodes, std::uint64_t first_episode_seed);

}  // namespace scma::policy
