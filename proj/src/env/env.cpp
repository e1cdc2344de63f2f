#include "scma/env.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace scma::env {

namespace {

std::atomic<std::uint64_t> g_render_pair_calls{0};

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double unit_hash(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    const std::uint64_t h = splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

bool same_color(const Color& a, const Color& b) { return a[0] == b[0] && a[1] == b[1] && a[2] == b[2]; }

bool is_reserved(const Color& c) { return same_color(c, kAgentColor) || same_color(c, kGoalColor); }

// Background distractors draw from a blue-heavy palette: red and green stay
// at or below 0.5 and blue at or above 0.4, so neither reserved color (which
// has one channel at 0.9 and blue at 0.2) can ever appear.
Color safe_palette(double u, double v, double w) { return {0.05 + 0.45 * u, 0.05 + 0.45 * v, 0.4 + 0.6 * w}; }

void set_color(Observation& obs, int y, int x, const Color& c) {
    for (int ch = 0; ch < 3; ++ch) obs.at(ch, y, x) = c[static_cast<std::size_t>(ch)];
}

void fill_cell(Observation& obs, const Cell& cell, int px, const Color& c) {
    for (int y = cell.y * px; y < (cell.y + 1) * px; ++y)
        for (int x = cell.x * px; x < (cell.x + 1) * px; ++x) set_color(obs, y, x, c);
}

std::array<double, 9> invert3(const std::array<double, 9>& m) {
    const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
                       m[2] * (m[3] * m[7] - m[4] * m[6]);
    if (std::abs(det) < 1e-9) throw std::invalid_argument("color_permutation matrix is singular");
    const double s = 1.0 / det;
    return {(m[4] * m[8] - m[5] * m[7]) * s, (m[2] * m[7] - m[1] * m[8]) * s, (m[1] * m[5] - m[2] * m[4]) * s,
            (m[5] * m[6] - m[3] * m[8]) * s, (m[0] * m[8] - m[2] * m[6]) * s, (m[2] * m[3] - m[0] * m[5]) * s,
            (m[3] * m[7] - m[4] * m[6]) * s, (m[1] * m[6] - m[0] * m[7]) * s, (m[0] * m[4] - m[1] * m[3]) * s};
}

Color affine(const std::array<double, 9>& m, const std::array<double, 3>& c, const Color& in) {
    Color out{};
    for (std::size_t r = 0; r < 3; ++r) out[r] = m[r * 3] * in[0] + m[r * 3 + 1] * in[1] + m[r * 3 + 2] * in[2] + c[r];
    return out;
}

// Every clean pixel lies in this box, so validating its corners is enough.
constexpr double kPaletteLow = 0.1;
constexpr double kPaletteHigh = 0.9;

double plasma(const NoiseSpec& spec, int y, int x, std::uint64_t phase) {
    const double fx = 0.25 + 0.35 * unit_hash(spec.texture_seed, 1, 0);
    const double fy = 0.25 + 0.35 * unit_hash(spec.texture_seed, 2, 0);
    const double fd = 0.15 + 0.25 * unit_hash(spec.texture_seed, 3, 0);
    const double t = static_cast<double>(phase % 1000000) * spec.pattern_speed;
    const double v = std::sin(fx * x + t) + std::sin(fy * y - 0.7 * t) + std::sin(fd * (x + y) + 1.3 * t);
    return (v + 3.0) / 6.0;
}

}  // namespace

void EnvConfig::validate() const {
    if (grid_width <= 0 || grid_height <= 0) throw std::invalid_argument("grid dimensions must be positive");
    if (grid_width != grid_height) throw std::invalid_argument("only square grids are rendered");
    if (obs_size <= 0 || obs_size % grid_width != 0)
        throw std::invalid_argument("obs_size must be a positive multiple of grid_width");
    if (episode_length <= 0) throw std::invalid_argument("episode_length must be positive");
    if (goal.x < 0 || goal.x >= grid_width || goal.y < 0 || goal.y >= grid_height)
        throw std::invalid_argument("goal outside grid");
    if (!(discount > 0.0 && discount <= 1.0)) throw std::invalid_argument("discount must lie in (0,1]");
}

double mse(const Observation& a, const Observation& b) {
    if (a.size != b.size || a.pixels.size() != b.pixels.size()) throw std::invalid_argument("mse: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = a.pixels[i] - b.pixels[i];
        s += d * d;
    }
    return s / static_cast<double>(a.pixels.size());
}

void Trajectory::push(Observation obs, int action, double reward) {
    observations.push_back(std::move(obs));
    actions.push_back(action);
    rewards.push_back(reward);
}

void Trajectory::validate() const {
    if (actions.size() != observations.size() || rewards.size() != observations.size())
        throw std::invalid_argument("trajectory arrays have different lengths");
    if (clean_observations && clean_observations->size() != observations.size())
        throw std::invalid_argument("clean observations do not align with observations");
    for (int a : actions)
        if (a < 0 || a >= kNumActions) throw std::invalid_argument("trajectory holds an invalid action");
}

Trajectory Trajectory::slice(std::size_t start, std::size_t length) const {
    if (start + length > size()) throw std::out_of_range("trajectory slice out of range");
    Trajectory t;
    const auto b = static_cast<std::ptrdiff_t>(start), e = static_cast<std::ptrdiff_t>(start + length);
    t.observations.assign(observations.begin() + b, observations.begin() + e);
    t.actions.assign(actions.begin() + b, actions.begin() + e);
    t.rewards.assign(rewards.begin() + b, rewards.begin() + e);
    if (clean_observations) t.clean_observations.emplace(clean_observations->begin() + b, clean_observations->begin() + e);
    return t;
}

// ------------------------------------------------------------------ noise

std::string to_string(NoiseVariant v) {
    switch (v) {
        case NoiseVariant::None: return "none";
        case NoiseVariant::ColorPermutation: return "color_permutation";
        case NoiseVariant::FixedBackground: return "fixed_background";
        case NoiseVariant::Occlusion: return "occlusion";
        case NoiseVariant::LightingBias: return "lighting_bias";
        case NoiseVariant::VideoBackground: return "video_background";
    }
    return "unknown";
}

NoiseVariant noise_variant_from_string(const std::string& s) {
    for (auto v : {NoiseVariant::None, NoiseVariant::ColorPermutation, NoiseVariant::FixedBackground,
                   NoiseVariant::Occlusion, NoiseVariant::LightingBias, NoiseVariant::VideoBackground})
        if (to_string(v) == s) return v;
    throw std::invalid_argument("unknown noise variant '" + s + "'");
}

PixelRect NoiseSpec::occlusion_rect(int obs_size) const {
    if (occlusion) return *occlusion;
    return {0, 0, obs_size / 2, obs_size / 2};
}

void NoiseSpec::validate() const {
    switch (variant) {
        case NoiseVariant::ColorPermutation: {
            invert3(color_matrix);
            for (int corner = 0; corner < 8; ++corner) {
                Color in{};
                for (int c = 0; c < 3; ++c) in[static_cast<std::size_t>(c)] = (corner >> c) & 1 ? kPaletteHigh : kPaletteLow;
                for (double v : affine(color_matrix, color_offset, in))
                    if (v < 0.0 || v > 1.0)
                        throw std::invalid_argument("color_permutation leaves [0,1] on the clean palette");
            }
            for (const Color& c : {kAgentColor, kGoalColor})
                if (is_reserved(affine(color_matrix, color_offset, c)))
                    throw std::invalid_argument("color_permutation maps onto a reserved color");
            break;
        }
        case NoiseVariant::Occlusion:
            if (occlusion && (occlusion->width <= 0 || occlusion->height <= 0 || occlusion->x < 0 || occlusion->y < 0))
                throw std::invalid_argument("occlusion rectangle must be non-empty and non-negative");
            if (occlusion_value != 0.5) throw std::invalid_argument("occlusion fill is fixed at mid-gray 0.5");
            break;
        case NoiseVariant::LightingBias:
            if (!(bias > 0.0 && bias <= kPaletteLow) && !(bias < 0.0 && bias >= -kPaletteLow))
                throw std::invalid_argument("lighting bias must be nonzero with |bias| <= 0.1");
            break;
        case NoiseVariant::VideoBackground:
            if (!(pattern_speed > 0.0)) throw std::invalid_argument("pattern_speed must be positive");
            break;
        default: break;
    }
}

Observation apply_noise(const Observation& clean, const NoiseSpec& spec, std::uint64_t phase) {
    if (clean.kind != ObsKind::Clean) throw std::invalid_argument("apply_noise expects a clean observation");
    spec.validate();
    Observation out = clean;
    out.kind = ObsKind::Cluttered;
    const int n = clean.size;
    switch (spec.variant) {
        case NoiseVariant::None: break;
        case NoiseVariant::ColorPermutation:
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x) set_color(out, y, x, affine(spec.color_matrix, spec.color_offset, clean.color(y, x)));
            break;
        case NoiseVariant::FixedBackground:
        case NoiseVariant::VideoBackground: {
            const bool video = spec.variant == NoiseVariant::VideoBackground;
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x) {
                    if (is_reserved(clean.color(y, x))) continue;
                    const auto cell = static_cast<std::uint64_t>(y * n + x);
                    if (video) {
                        const double v = plasma(spec, y, x, phase);
                        set_color(out, y, x, safe_palette(v, 1.0 - v, 0.5 + 0.5 * v));
                    } else {
                        set_color(out, y, x,
                                  safe_palette(unit_hash(spec.texture_seed, cell, 0), unit_hash(spec.texture_seed, cell, 1),
                                               unit_hash(spec.texture_seed, cell, 2)));
                    }
                }
            break;
        }
        case NoiseVariant::Occlusion: {
            const PixelRect r = spec.occlusion_rect(n);
            for (int y = r.y; y < std::min(n, r.y + r.height); ++y)
                for (int x = r.x; x < std::min(n, r.x + r.width); ++x)
                    set_color(out, y, x, {spec.occlusion_value, spec.occlusion_value, spec.occlusion_value});
            break;
        }
        case NoiseVariant::LightingBias:
            for (double& v : out.pixels) v = std::clamp(v + spec.bias, 0.0, 1.0);
            break;
    }
    return out;
}

Observation invert_color_permutation(const Observation& cluttered, const NoiseSpec& spec) {
    if (spec.variant != NoiseVariant::ColorPermutation) throw std::invalid_argument("spec is not color_permutation");
    const auto inv = invert3(spec.color_matrix);
    Observation out = cluttered;
    out.kind = ObsKind::Clean;
    for (int y = 0; y < cluttered.size; ++y)
        for (int x = 0; x < cluttered.size; ++x) {
            Color c = cluttered.color(y, x);
            for (std::size_t k = 0; k < 3; ++k) c[k] -= spec.color_offset[k];
            Color back = affine(inv, {0, 0, 0}, c);
            // Snap to the reserved palette so downstream exact-color decoding
            // sees the original values rather than a 1-ulp neighbour.
            for (const Color& ref : {kAgentColor, kGoalColor, kBackgroundColor}) {
                bool near = true;
                for (std::size_t k = 0; k < 3; ++k) near = near && std::abs(back[k] - ref[k]) <= 1e-9;
                if (near) back = ref;
            }
            set_color(out, y, x, back);
        }
    return out;
}

// ---------------------------------------------------------- environment

Observation render(const EnvConfig& config, const EnvState& state) {
    const int n = config.obs_size;
    Observation obs;
    obs.size = n;
    obs.kind = ObsKind::Clean;
    obs.pixels.assign(static_cast<std::size_t>(3 * n * n), 0.0);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) set_color(obs, y, x, kBackgroundColor);
    const int px = config.cell_pixels();
    fill_cell(obs, config.goal, px, kGoalColor);
    fill_cell(obs, state.agent, px, kAgentColor);
    return obs;
}

std::pair<EnvState, Observation> reset(const EnvConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const int cells = config.grid_width * config.grid_height;
    const int goal_index = config.goal.y * config.grid_width + config.goal.x;
    int idx = std::uniform_int_distribution<int>(0, cells - 2)(rng);
    if (idx >= goal_index) ++idx;
    EnvState s;
    s.agent = {idx % config.grid_width, idx / config.grid_width};
    s.step_index = 0;
    s.distractor_phase = splitmix64(seed) % 4096;
    return {s, render(config, s)};
}

StepResult step(const EnvConfig& config, const EnvState& state, int action) {
    if (action < 0 || action >= kNumActions) throw std::invalid_argument("action must lie in 0..4");
    EnvState next = state;
    switch (static_cast<Action>(action)) {
        case Action::Up: next.agent.y = std::max(0, next.agent.y - 1); break;
        case Action::Down: next.agent.y = std::min(config.grid_height - 1, next.agent.y + 1); break;
        case Action::Left: next.agent.x = std::max(0, next.agent.x - 1); break;
        case Action::Right: next.agent.x = std::min(config.grid_width - 1, next.agent.x + 1); break;
        case Action::Stay: break;
    }
    next.step_index = std::min(state.step_index + 1, config.episode_length);
    next.distractor_phase = state.distractor_phase + 1;
    const bool at_goal = next.agent == config.goal;
    StepResult r;
    r.state = next;
    r.observation = render(config, next);
    r.reward = at_goal ? kGoalReward : kStepReward;
    r.done = at_goal || next.step_index >= config.episode_length;
    return r;
}

FramePair render_pair(const EnvConfig& config, const EnvState& state, const NoiseSpec& spec) {
    g_render_pair_calls.fetch_add(1, std::memory_order_relaxed);
    FramePair p;
    p.clean = render(config, state);
    p.cluttered = apply_noise(p.clean, spec, state.distractor_phase);
    return p;
}

std::uint64_t render_pair_calls() { return g_render_pair_calls.load(std::memory_order_relaxed); }

DistractingEnv::DistractingEnv(EnvConfig config, NoiseSpec spec) : config_(config), spec_(std::move(spec)) {
    config_.validate();
    spec_.validate();
}

Observation DistractingEnv::reset(std::uint64_t seed) {
    auto [s, clean] = env::reset(config_, seed);
    state_ = s;
    done_ = false;
    return apply_noise(clean, spec_, state_.distractor_phase);
}

DistractingEnv::Step DistractingEnv::step(int action) {
    if (done_) throw std::logic_error("step called on a finished episode; call reset first");
    auto r = env::step(config_, state_, action);
    state_ = r.state;
    done_ = r.done;
    return {apply_noise(r.observation, spec_, state_.distractor_phase), r.reward, r.done};
}

FramePair OracleProbe::current_pair(const DistractingEnv& env) { return render_pair(env.config_, env.state_, env.spec_); }

// ------------------------------------------------------------ frame dumps

namespace {

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_ppm_strip(const std::filesystem::path& path, const std::vector<Observation>& frames) {
    if (frames.empty()) throw std::invalid_argument("write_ppm_strip: no frames");
    const int h = frames.front().size;
    for (const auto& f : frames)
        if (f.size != h) throw std::invalid_argument("write_ppm_strip: frame sizes differ");
    const int w = h * static_cast<int>(frames.size());
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "P6\n" << w << " " << h << "\n255\n";
    std::string row;
    for (int y = 0; y < h; ++y) {
        row.clear();
        for (const auto& f : frames)
            for (int x = 0; x < h; ++x)
                for (int c = 0; c < 3; ++c) row.push_back(static_cast<char>(to_byte(f.at(c, y, x))));
        out.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_ppm(const std::filesystem::path& path, const Observation& obs) { write_ppm_strip(path, {obs}); }

Observation read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    in.get();
    if (magic != "P6" || w != h || w <= 0 || maxval != 255) throw std::runtime_error(path.string() + ": unsupported PPM");
    std::vector<unsigned char> bytes(static_cast<std::size_t>(3 * w * h));
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw std::runtime_error(path.string() + ": truncated PPM");
    Observation obs;
    obs.size = w;
    obs.pixels.resize(bytes.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) obs.at(c, y, x) = bytes[static_cast<std::size_t>((y * w + x) * 3 + c)] / 255.0;
    return obs;
}

std::filesystem::path frame_path(const std::filesystem::path& root, const std::string& run_id, const std::string& track,
                                 std::uint64_t step) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << step << ".ppm";
    return root / run_id / track / name.str();
}

}  // namespace scma::env
