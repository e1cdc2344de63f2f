#include "scma/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace scma::policy {

std::string to_string(PolicyVariant v) {
    switch (v) {
        case PolicyVariant::ScriptedGreedy: return "scripted_greedy";
        case PolicyVariant::EpsilonGreedy: return "epsilon_greedy";
        case PolicyVariant::Random: return "random";
    }
    return "unknown";
}

PolicyVariant policy_variant_from_string(const std::string& s) {
    for (auto v : {PolicyVariant::ScriptedGreedy, PolicyVariant::EpsilonGreedy, PolicyVariant::Random})
        if (to_string(v) == s) return v;
    throw std::invalid_argument("unknown policy variant '" + s + "'");
}

void PolicySpec::validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must lie in [0,1]");
}

std::uint64_t PolicySpec::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
    };
    const int v = static_cast<int>(variant);
    mix(&v, sizeof v);
    mix(&epsilon, sizeof epsilon);
    mix(&seed, sizeof seed);
    return h;
}

Decoded decode(const env::Observation& obs, int grid_size) {
    if (grid_size <= 0 || obs.size % grid_size != 0) throw std::invalid_argument("decode: grid does not tile the frame");
    const int px = obs.size / grid_size;
    double best_agent = kDecodeTolerance, best_goal = kDecodeTolerance;
    Decoded out;
    for (int cy = 0; cy < grid_size; ++cy)
        for (int cx = 0; cx < grid_size; ++cx) {
            env::Color mean{0, 0, 0};
            for (int y = cy * px; y < (cy + 1) * px; ++y)
                for (int x = cx * px; x < (cx + 1) * px; ++x)
                    for (int c = 0; c < 3; ++c) mean[static_cast<std::size_t>(c)] += obs.at(c, y, x);
            for (double& m : mean) m /= px * px;
            auto dist = [&mean](const env::Color& ref) {
                double d = 0.0;
                for (std::size_t c = 0; c < 3; ++c) d = std::max(d, std::abs(mean[c] - ref[c]));
                return d;
            };
            const double da = dist(env::kAgentColor), dg = dist(env::kGoalColor);
            if (da <= best_agent) {
                best_agent = da;
                out.agent = env::Cell{cx, cy};
            }
            if (dg <= best_goal) {
                best_goal = dg;
                out.goal = env::Cell{cx, cy};
            }
        }
    return out;
}

int greedy_action(const env::Cell& agent, const env::Cell& goal) {
    if (goal.x > agent.x) return static_cast<int>(env::Action::Right);
    if (goal.x < agent.x) return static_cast<int>(env::Action::Left);
    if (goal.y > agent.y) return static_cast<int>(env::Action::Down);
    if (goal.y < agent.y) return static_cast<int>(env::Action::Up);
    return static_cast<int>(env::Action::Stay);
}

Policy::Policy(PolicySpec spec, int grid_size) : spec_(spec), grid_size_(grid_size), rng_(spec.seed) {
    spec_.validate();
}

int Policy::random_action() { return std::uniform_int_distribution<int>(0, env::kNumActions - 1)(rng_); }

int Policy::act(const env::Observation& obs) {
    ++steps_;
    if (spec_.variant == PolicyVariant::Random) return random_action();
    if (spec_.variant == PolicyVariant::EpsilonGreedy &&
        std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < spec_.epsilon)
        return random_action();
    const Decoded d = decode(obs, grid_size_);
    if (!d.agent) {
        ++blind_steps_;
        return random_action();
    }
    // The agent is drawn over the goal, so a visible agent with no visible
    // goal means it is standing on it.
    if (!d.goal) return static_cast<int>(env::Action::Stay);
    return greedy_action(*d.agent, *d.goal);
}

EvalReport evaluate(const PolicySpec& spec, const env::EnvConfig& config, const env::NoiseSpec& noise,
                    const Denoiser& denoiser, int episodes, std::uint64_t first_episode_seed) {
    if (episodes < 1) throw std::invalid_argument("evaluate needs at least one episode");
    EvalReport report;
    report.episodes = episodes;
    std::uint64_t steps = 0, blind = 0, mse_count = 0;
    double mse_sum = 0.0;
    for (int i = 0; i < episodes; ++i) {
        const std::uint64_t seed = first_episode_seed + static_cast<std::uint64_t>(i);
        PolicySpec episode_spec = spec;
        episode_spec.seed = spec.seed * 0x9e3779b97f4a7c15ULL + seed;
        Policy pi(episode_spec, config.grid_width);
        env::DistractingEnv e(config, noise);
        env::Observation obs = e.reset(seed);
        double ret = 0.0;
        while (true) {
            env::Observation seen = denoiser ? denoiser(obs) : obs;
            const auto pair = env::OracleProbe::current_pair(e);
            mse_sum += env::mse(seen, pair.clean);
            ++mse_count;
            const auto r = e.step(pi.act(seen));
            ret += r.reward;
            obs = r.observation;
            if (r.done) break;
        }
        steps += pi.steps();
        blind += pi.blind_steps();
        report.returns.push_back(ret);
        report.episode_seeds.push_back(seed);
    }
    double mean = 0.0;
    for (double r : report.returns) mean += r;
    mean /= episodes;
    double var = 0.0;
    for (double r : report.returns) var += (r - mean) * (r - mean);
    report.mean_return = mean;
    report.std_return = episodes > 1 ? std::sqrt(var / (episodes - 1)) : 0.0;
    report.blind_step_rate = steps ? static_cast<double>(blind) / static_cast<double>(steps) : 0.0;
    report.oracle_mse = mse_count ? mse_sum / static_cast<double>(mse_count) : 0.0;
    return report;
}

}  // namespace scma::policy
