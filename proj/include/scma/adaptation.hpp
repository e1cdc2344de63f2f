#pragma once

// Self-consistent model-based adaptation: a denoiser m_de and a noisy model
// m_n trained against a frozen world model from cluttered data only.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "scma/env.hpp"
#include "scma/nn.hpp"
#include "scma/policy.hpp"
#include "scma/replay.hpp"
#include "scma/world_model.hpp"

namespace scma::adapt {

enum class DenoiserArch { Generic, MaskBias };

std::string to_string(DenoiserArch a);
DenoiserArch denoiser_arch_from_string(const std::string& s);

/// conv3x3 -> relu -> conv1x1 -> relu -> conv1x1 over [features; input].
/// The generic head is a residual in logit space, sigmoid(logit(x) + head);
/// the mask/bias head emits a [0,1] mask per channel and one unbounded bias
/// plane. Fresh nets start at (or next to) the identity map; `init_gain` > 0
/// adds N(0, gain^2) to the head's input weights and N(0, gain^2/4) to its
/// bias, i.e. a random per-pixel colour map in logit units.
class ImageNet {
   public:
    static ImageNet create(ParamSet& params, const std::string& prefix, DenoiserArch arch, std::size_t width,
                           Rng& rng, double init_gain = 0.0);
    static ImageNet bind(ParamSet& params, const std::string& prefix, DenoiserArch arch);
    Tensor operator()(const Tensor& x) const;

   private:
    DenoiserArch arch_ = DenoiserArch::Generic;
    Conv2d c1_, c2_, head_;
};

/// Applies mask * x + bias with the bias plane shared by all channels, then
/// clamps to [0,1]. mask is [B,3,H,W], bias is [B,1,H,W].
Tensor compose_mask_bias(const Tensor& x, const Tensor& mask, const Tensor& bias);

class DenoiserPair {
   public:
    static DenoiserPair create(DenoiserArch arch, std::size_t width, std::uint64_t seed, double init_gain = 0.0);
    static DenoiserPair load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    DenoiserArch arch() const { return arch_; }
    std::size_t width() const { return width_; }
    ParamSet& denoiser_params() { return de_params_; }
    ParamSet& noisy_params() { return n_params_; }
    const ParamSet& denoiser_params() const { return de_params_; }
    const ParamSet& noisy_params() const { return n_params_; }
    std::size_t parameter_count() const { return de_params_.parameter_count() + n_params_.parameter_count(); }

    /// m_de on a [B,3,H,W] batch.
    Tensor denoise(const Tensor& cluttered) const { return de_(cluttered); }
    /// m_n on a [B,3,H,W] batch.
    Tensor renoise(const Tensor& clean) const { return n_(clean); }
    /// Single frame, no gradient bookkeeping kept.
    env::Observation denoise(const env::Observation& cluttered) const;

    DenoiserPair(DenoiserPair&&) = default;
    DenoiserPair& operator=(DenoiserPair&&) = default;
    DenoiserPair(const DenoiserPair&) = delete;
    DenoiserPair& operator=(const DenoiserPair&) = delete;

    /// Deep copy with independent storage.
    DenoiserPair clone() const;

   private:
    DenoiserPair() = default;
    void bind();

    DenoiserArch arch_ = DenoiserArch::Generic;
    std::size_t width_ = 8;
    ParamSet de_params_, n_params_;
    ImageNet de_, n_;
};

class ContractError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

/// Names of every term the adaptation objective may contain. There is
/// deliberately no posterior/prior KL term.
const std::vector<std::string>& loss_registry();

struct LossWeights {
    double sc = 1.0;
    double n = 1.0;
    double rew = 1.0;
};

struct LossToggles {
    bool sc = true;
    bool n = true;
    bool rew = true;
};

/// Each term is a mean over batch and time of a per-frame Gaussian NLL with
/// unit std, summed over pixels.
Tensor loss_sc(const DenoiserPair& pair, const wm::WorldModel& model, const wm::SequenceBatch& chunk, Rng& rng,
               wm::SampleMode mode = wm::SampleMode::Sample);
Tensor loss_n(const DenoiserPair& pair, const wm::SequenceBatch& chunk);
Tensor loss_rew(const DenoiserPair& pair, const wm::WorldModel& model, const wm::SequenceBatch& chunk, Rng& rng,
                wm::SampleMode mode = wm::SampleMode::Sample);

struct LossTerms {
    std::map<std::string, Tensor> terms;  // keys drawn from loss_registry()
    Tensor total;
};

/// Builds the enabled terms sharing one filtering pass.
LossTerms scma_loss(const DenoiserPair& pair, const wm::WorldModel& model, const wm::SequenceBatch& chunk,
                    const LossToggles& use, const LossWeights& weights, Rng& rng,
                    wm::SampleMode mode = wm::SampleMode::Sample);

struct AdaptConfig {
    DenoiserArch arch = DenoiserArch::Generic;
    std::size_t width = 8;
    double denoise_lr = 1e-4;
    std::size_t batch_size = 16;
    std::size_t chunk_length = 20;
    std::size_t iterations = 40;
    std::size_t update_steps = 50;       // gradient steps per iteration
    std::size_t collect_interval = 100;  // environment steps per iteration
    std::size_t warmup_episodes = 5;
    std::size_t replay_capacity = 10000;
    LossToggles use;
    LossWeights weights;
    wm::SampleMode state_sampling = wm::SampleMode::Sample;
    // Multi-start: with restarts > 1, that many fresh pairs (head gain
    // init_gain) each train for restart_steps gradient steps; the one with the
    // lowest objective on a fixed batch of random-action cluttered chunks
    // seeds the main run of `iterations`.
    std::size_t restarts = 1;
    std::size_t restart_steps = 1000;
    double init_gain = 0.0;
    std::size_t selection_episodes = 16;
    std::size_t selection_chunks = 32;
    std::size_t eval_every = 10;  // iterations; 0 disables periodic evaluation
    double divergence_threshold = 1e7;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AdaptMetrics {
    std::size_t iteration = 0;
    double loss_sc = 0.0;
    double loss_n = 0.0;
    double loss_rew = 0.0;
    double loss_total = 0.0;
    std::optional<double> eval_return_mean;
    std::optional<double> oracle_denoise_mse;
    std::optional<double> blind_step_rate;
};

struct EvalSummary {
    double return_mean = 0.0;
    double oracle_mse = 0.0;
    double blind_step_rate = 0.0;
};

/// Evaluation phase run between iterations. Its render_pair calls are
/// accounted separately from the adaptation path.
using Evaluator = std::function<EvalSummary(const DenoiserPair&)>;

class DivergenceError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct AdaptResult {
    DenoiserPair pair;
    std::vector<AdaptMetrics> metrics;
    std::uint64_t render_pair_calls_in_adapt = 0;
    std::uint64_t render_pair_calls_in_eval = 0;
    std::size_t gradient_steps = 0;  // candidates included
    std::size_t environment_steps = 0;
    std::vector<double> candidate_scores;  // empty without multi-start
    std::size_t selected_candidate = 0;
};

/// Default collection policy: epsilon-greedy(0.3) acting on denoised frames.
inline policy::PolicySpec default_collect_policy(std::uint64_t seed = 0) {
    return {policy::PolicyVariant::EpsilonGreedy, 0.3, seed};
}

/// Algorithm 1. `collect_policy` acts on denoised frames to gather data; it is
/// only read. The world model must be frozen. `last_good` (optional) is
/// where the most recent finite denoiser is written before a divergence
/// error is raised. `initial` (optional) warm-starts from an existing pair
/// instead of a fresh one and skips the multi-start phase.
AdaptResult adapt(const AdaptConfig& config, const wm::WorldModel& model, const policy::PolicySpec& collect_policy,
                  const env::EnvConfig& env_config, const env::NoiseSpec& noise, const Evaluator& evaluator = {},
                  const std::function<void(const AdaptMetrics&)>& on_metrics = {},
                  const std::optional<std::filesystem::path>& last_good = std::nullopt,
                  const DenoiserPair* initial = nullptr);

/// Standard evaluation: `spec` acting on denoised frames, plus oracle MSE.
Evaluator make_evaluator(const policy::PolicySpec& spec, const env::EnvConfig& env_config,
                         const env::NoiseSpec& noise, int episodes, std::uint64_t first_episode_seed);

/// Fixed evaluation frames: paired (clean, cluttered) frames along random-policy
/// episodes. Independent of any denoiser, so MSEs are comparable across runs.
std::vector<env::FramePair> oracle_frames(const env::EnvConfig& env_config, const env::NoiseSpec& noise, int episodes,
                                          std::uint64_t first_episode_seed);

/// Mean per-pixel MSE between m_de(cluttered) and clean over `frames`.
double oracle_denoise_mse(const DenoiserPair& pair, const std::vector<env::FramePair>& frames);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<AdaptMetrics>& rows);

}  // namespace scma::adapt
