#pragma once

// Small recurrent state-space world model: a GRU belief, a diagonal Gaussian
// stochastic state, a conv encoder, a sigmoid pixel decoder and a reward head.
// Trained on clean trajectories by the ELBO, then frozen.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "scma/env.hpp"
#include "scma/nn.hpp"
#include "scma/policy.hpp"
#include "scma/tensor.hpp"

namespace scma::wm {

struct WorldModelConfig {
    std::size_t belief = 32;
    std::size_t stochastic = 8;
    std::size_t embedding = 64;
    std::size_t hidden = 64;
    std::size_t conv_channels = 4;
    std::size_t obs_size = 16;
    std::size_t actions = env::kNumActions;
    double min_std = 1e-4;
    double free_nats = 3.0;
    double kl_scale = 1.0;

    /// Desk scale: wider encoder and hidden layers, KL scaled to a 16 px frame.
    static WorldModelConfig desk() {
        WorldModelConfig c;
        c.conv_channels = 8;
        c.hidden = 128;
        c.kl_scale = 1.0 / 16.0;
        return c;
    }
    /// Recorded large-scale dimensions. Far too slow for a desk CPU.
    static WorldModelConfig paper();
    void validate() const;
    std::size_t pixels() const { return 3 * obs_size * obs_size; }
};

struct Gaussian {
    Tensor mean;
    Tensor std;
};

/// One filtering step. `belief` is deterministic; `stochastic` is a sample
/// (or the posterior mean when sampling is off).
struct RSSMState {
    Tensor belief;
    Tensor stochastic;
    Gaussian posterior;
    Gaussian prior;
};

class WorldModel {
   public:
    static WorldModel create(const WorldModelConfig& config, std::uint64_t seed);
    /// Rebuilds from a checkpoint written by `save`.
    static WorldModel load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    const WorldModelConfig& config() const { return config_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    void freeze() { params_.freeze(); }
    bool frozen() const { return params_.frozen(); }
    std::uint64_t checksum() const { return params_.checksum(); }

    /// [B,3,H,W] -> [B,embedding]
    Tensor encode(const Tensor& obs) const;
    /// [B,belief+stochastic] -> [B,3,H,W] in (0,1)
    Tensor decode(const Tensor& features) const;
    /// [B,belief+stochastic] -> [B,1]
    Tensor predict_reward(const Tensor& features) const;

    Tensor transition(const Tensor& belief, const Tensor& stochastic, const Tensor& action) const;
    Gaussian prior(const Tensor& belief) const;
    Gaussian posterior(const Tensor& belief, const Tensor& embedding) const;

    WorldModel(WorldModel&&) = default;
    WorldModel& operator=(WorldModel&&) = default;
    // Copies would alias parameter storage.
    WorldModel(const WorldModel&) = delete;
    WorldModel& operator=(const WorldModel&) = delete;

   private:
    WorldModel() = default;
    void bind();

    WorldModelConfig config_;
    ParamSet params_;
    Conv2d enc_conv_;
    Linear enc_fc_, trans_in_, gru_z_, gru_r_, gru_n_, prior_fc_, prior_out_, post_fc_, post_out_, dec_fc_, dec_out_,
        rew_fc_, rew_out_;
};

enum class SampleMode { Sample, Mean };

/// Filters a sequence. observations[t] is [B,3,H,W]; actions[t] is the
/// one-hot [B,A] action that led to observations[t]. Initial state is zero.
std::vector<RSSMState> observe(const WorldModel& model, const std::vector<Tensor>& observations,
                               const std::vector<Tensor>& actions, Rng& rng, SampleMode mode = SampleMode::Sample);

inline Tensor features(const RSSMState& s) { return concat({s.belief, s.stochastic}, 1); }

/// Equal-length chunks stacked per time step.
struct SequenceBatch {
    std::vector<Tensor> observations;  // T x [B,3,H,W]
    std::vector<Tensor> actions;       // T x [B,A]
    std::vector<Tensor> rewards;       // T x [B,1]

    std::size_t length() const { return observations.size(); }
    std::size_t batch() const { return observations.empty() ? 0 : observations.front().dim(0); }
};

SequenceBatch make_batch(const std::vector<env::Trajectory>& chunks, std::size_t num_actions = env::kNumActions);
Tensor observation_tensor(const std::vector<const env::Observation*>& frames);
env::Observation to_observation(const Tensor& batch, std::size_t index, env::ObsKind kind);
Tensor one_hot(const std::vector<int>& actions, std::size_t num_actions);

struct ElboTerms {
    Tensor total;
    Tensor j_o;
    Tensor j_kl;
    Tensor j_rew;
};

/// Per-sequence means over batch and time; J_o and J_rew sum over pixels.
/// J_kl clamps each step's summed KL below at free_nats.
ElboTerms elbo_loss(const WorldModel& model, const SequenceBatch& batch, Rng& rng);

/// Per-pixel MSE of posterior-mean reconstructions over whole episodes.
double reconstruction_mse(const WorldModel& model, const std::vector<env::Trajectory>& episodes);

struct PretrainConfig {
    WorldModelConfig model;
    env::EnvConfig env;
    policy::PolicySpec collect_policy{policy::PolicyVariant::EpsilonGreedy, 0.7, 0};
    std::size_t seed_episodes = 20;
    std::size_t iterations = 30;
    std::size_t collect_interval = 100;  // gradient steps per iteration
    std::size_t episodes_per_iteration = 2;
    std::size_t batch_size = 16;
    std::size_t chunk_length = 20;
    std::size_t holdout_episodes = 8;
    std::size_t replay_capacity = 10000;
    double model_lr = 1e-3;
    double divergence_threshold = 1e6;
    std::uint64_t seed = 0;
};

struct PretrainMetrics {
    std::size_t step = 0;
    double j_o = 0.0;
    double j_kl = 0.0;
    double j_rew = 0.0;
    double total = 0.0;
    double holdout_recon_mse = 0.0;
};

class DivergenceError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct PretrainResult {
    WorldModel model;  // frozen
    std::vector<PretrainMetrics> metrics;
    double holdout_recon_mse = 0.0;
};

/// Collect-then-train loop on the clean environment. Reports one metrics row
/// per iteration through `on_metrics` as it goes.
PretrainResult pretrain(const PretrainConfig& config,
                        const std::function<void(const PretrainMetrics&)>& on_metrics = {});

void write_metrics_csv(const std::filesystem::path& path, const std::vector<PretrainMetrics>& rows);

/// Rolls out `episodes` episodes of `spec` on the clean environment.
std::vector<env::Trajectory> collect_clean_episodes(const env::EnvConfig& config, const policy::PolicySpec& spec,
                                                    std::size_t episodes, std::uint64_t first_seed);

}  // namespace scma::wm
