#pragma once

// Deterministic pixel gridworld with a library of visual distractors.
//
// Observations are CHW float images in [0,1]. The agent and goal are drawn in
// reserved colors that no distractor ever produces. `DistractingEnv` is the
// only interface the adaptation loop sees: it hands out cluttered frames and
// rewards. Clean frames come from `render_pair`, which counts its calls so
// tests can prove the adaptation path never touches paired data.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace scma::env {

struct Cell {
    int x = 0;
    int y = 0;
    auto operator<=>(const Cell&) const = default;
};

enum class Action : int { Up = 0, Down = 1, Left = 2, Right = 3, Stay = 4 };
inline constexpr int kNumActions = 5;

using Color = std::array<double, 3>;
inline constexpr Color kAgentColor{0.9, 0.2, 0.2};
inline constexpr Color kGoalColor{0.2, 0.9, 0.2};
inline constexpr Color kBackgroundColor{0.3, 0.3, 0.3};

struct EnvConfig {
    int grid_width = 8;
    int grid_height = 8;
    int obs_size = 16;
    int episode_length = 100;
    Cell goal{5, 6};
    double discount = 0.99;  // recorded only
    std::uint64_t seed = 0;

    int cell_pixels() const { return obs_size / grid_width; }
    /// Throws std::invalid_argument on inconsistent settings.
    void validate() const;
};

struct EnvState {
    Cell agent;
    int step_index = 0;
    std::uint64_t distractor_phase = 0;
};

enum class ObsKind { Clean, Cluttered };

struct Observation {
    int size = 0;
    std::vector<double> pixels;  // [3][size][size]
    ObsKind kind = ObsKind::Clean;

    double& at(int c, int y, int x) { return pixels[static_cast<std::size_t>((c * size + y) * size + x)]; }
    double at(int c, int y, int x) const { return pixels[static_cast<std::size_t>((c * size + y) * size + x)]; }
    Color color(int y, int x) const { return {at(0, y, x), at(1, y, x), at(2, y, x)}; }
    bool operator==(const Observation&) const = default;
};

double mse(const Observation& a, const Observation& b);

/// Record t holds o_t, the action that led to it, and the reward received on
/// arriving. The first record of an episode uses Stay and reward 0.
struct Trajectory {
    std::vector<Observation> observations;
    std::vector<int> actions;
    std::vector<double> rewards;
    /// Evaluation-only pairing; never filled on a training path.
    std::optional<std::vector<Observation>> clean_observations;

    std::size_t size() const { return observations.size(); }
    void push(Observation obs, int action, double reward);
    /// Throws std::invalid_argument if the parallel arrays disagree.
    void validate() const;
    Trajectory slice(std::size_t start, std::size_t length) const;
};

// ------------------------------------------------------------------ noise

enum class NoiseVariant { None, ColorPermutation, FixedBackground, Occlusion, LightingBias, VideoBackground };

std::string to_string(NoiseVariant v);
NoiseVariant noise_variant_from_string(const std::string& s);

struct PixelRect {
    int x = 0, y = 0, width = 0, height = 0;
};

struct NoiseSpec {
    NoiseVariant variant = NoiseVariant::None;
    /// color_permutation: out = M * in + offset, row-major M.
    std::array<double, 9> color_matrix{0, -1, 0, 0, 0, -1, -1, 0, 0};
    std::array<double, 3> color_offset{1, 1, 1};
    /// fixed_background / video_background pattern seed.
    std::uint64_t texture_seed = 7;
    /// occlusion rectangle; defaults to the top-left quarter of the frame.
    std::optional<PixelRect> occlusion;
    double occlusion_value = 0.5;
    /// lighting_bias additive shift.
    double bias = 0.1;
    /// video_background phase speed.
    double pattern_speed = 0.35;

    /// Throws std::invalid_argument if the spec breaks its invariants.
    void validate() const;
    PixelRect occlusion_rect(int obs_size) const;
    /// Strict variants are deterministic functions of the clean frame alone.
    bool is_strict() const { return variant != NoiseVariant::VideoBackground; }
};

Observation apply_noise(const Observation& clean, const NoiseSpec& spec, std::uint64_t phase);

/// Exact inverse of the color_permutation transform (no clamping needed on
/// reachable frames).
Observation invert_color_permutation(const Observation& cluttered, const NoiseSpec& spec);

// ---------------------------------------------------------- environment

Observation render(const EnvConfig& config, const EnvState& state);
std::pair<EnvState, Observation> reset(const EnvConfig& config, std::uint64_t seed);

struct StepResult {
    EnvState state;
    Observation observation;
    double reward = 0.0;
    bool done = false;
};

StepResult step(const EnvConfig& config, const EnvState& state, int action);

inline constexpr double kGoalReward = 1.0;
inline constexpr double kStepReward = -0.01;

struct FramePair {
    Observation clean;
    Observation cluttered;
};

/// Evaluation oracle. Every call increments a process-wide counter.
FramePair render_pair(const EnvConfig& config, const EnvState& state, const NoiseSpec& spec);
std::uint64_t render_pair_calls();

/// Training-facing environment: cluttered observations and rewards only.
class DistractingEnv {
   public:
    DistractingEnv(EnvConfig config, NoiseSpec spec);

    Observation reset(std::uint64_t seed);
    struct Step {
        Observation observation;
        double reward = 0.0;
        bool done = false;
    };
    Step step(int action);

    const EnvConfig& config() const { return config_; }
    const NoiseSpec& noise() const { return spec_; }
    bool episode_over() const { return done_; }

   private:
    friend class OracleProbe;
    EnvConfig config_;
    NoiseSpec spec_;
    EnvState state_;
    bool done_ = true;
};

/// Evaluation-only access to the clean frame behind a DistractingEnv.
class OracleProbe {
   public:
    static FramePair current_pair(const DistractingEnv& env);
    static const EnvState& state(const DistractingEnv& env) { return env.state_; }
};

// ------------------------------------------------------------ frame dumps

/// Binary P6, 8-bit. Values are clamped to [0,1] and rounded.
void write_ppm(const std::filesystem::path& path, const Observation& obs);
/// Several frames side by side.
void write_ppm_strip(const std::filesystem::path& path, const std::vector<Observation>& frames);
Observation read_ppm(const std::filesystem::path& path);
/// {root}/{run_id}/{track}/{step:06}.ppm
std::filesystem::path frame_path(const std::filesystem::path& root, const std::string& run_id,
                                 const std::string& track, std::uint64_t step);

}  // namespace scma::env
