#include "scma/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>

namespace scma::adapt {

namespace {

constexpr const char* kMetaName = "meta.denoiser";
constexpr double kLogitEps = 1e-4;
constexpr double kOpenMask = 6.0;  // sigmoid(6) ~ 0.9975

std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t index) {
    return run_seed * 1000003ULL + 300000021ULL + index;
}

// Shared forward pass for the three terms.
struct Forward {
    Tensor observed;  // [T*B,3,H,W] cluttered
    Tensor denoised;  // m_de(observed)
    Tensor feats;     // [T*B, belief+stoch], empty when filtering is skipped
};

Forward run_forward(const DenoiserPair& pair, const wm::WorldModel* model, const wm::SequenceBatch& chunk, Rng& rng,
                    wm::SampleMode mode) {
    const std::size_t T = chunk.length(), B = chunk.batch();
    if (T == 0) throw std::invalid_argument("adaptation loss: empty chunk");
    Forward f;
    f.observed = T == 1 ? chunk.observations.front() : concat(chunk.observations, 0);
    f.denoised = pair.denoise(f.observed);
    if (model) {
        if (!model->frozen()) throw ContractError("adaptation losses require a frozen world model");
        std::vector<Tensor> frames;
        frames.reserve(T);
        for (std::size_t t = 0; t < T; ++t) frames.push_back(T == 1 ? f.denoised : slice(f.denoised, 0, t * B, B));
        const auto states = wm::observe(*model, frames, chunk.actions, rng, mode);
        std::vector<Tensor> feats;
        feats.reserve(T);
        for (const auto& s : states) feats.push_back(wm::features(s));
        f.feats = T == 1 ? feats.front() : concat(feats, 0);
    }
    return f;
}

double norm(const wm::SequenceBatch& chunk) { return 1.0 / static_cast<double>(chunk.length() * chunk.batch()); }

Tensor sc_term(const Forward& f, const wm::WorldModel& model, double k) {
    return scale(gaussian_nll(f.denoised, model.decode(f.feats), 1.0), k);
}

Tensor n_term(const DenoiserPair& pair, const Forward& f, double k) {
    return scale(gaussian_nll(f.observed, pair.renoise(f.denoised), 1.0), k);
}

Tensor rew_term(const Forward& f, const wm::WorldModel& model, const wm::SequenceBatch& chunk, double k) {
    if (chunk.rewards.size() != chunk.length()) throw std::invalid_argument("loss_rew: chunk carries no rewards");
    const Tensor r = chunk.length() == 1 ? chunk.rewards.front() : concat(chunk.rewards, 0);
    return scale(gaussian_nll(r, model.predict_reward(f.feats), 1.0), k);
}

bool finite(const ParamSet& p) {
    for (const auto& [name, t] : p.entries())
        for (double v : t.data())
            if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

std::string to_string(DenoiserArch a) { return a == DenoiserArch::Generic ? "generic" : "mask_bias"; }

DenoiserArch denoiser_arch_from_string(const std::string& s) {
    if (s == "generic") return DenoiserArch::Generic;
    if (s == "mask_bias") return DenoiserArch::MaskBias;
    throw std::invalid_argument("unknown denoiser architecture: " + s);
}

// ------------------------------------------------------------------ networks

ImageNet ImageNet::create(ParamSet& params, const std::string& prefix, DenoiserArch arch, std::size_t width,
                          Rng& rng, double init_gain) {
    if (width == 0) throw std::invalid_argument("denoiser width must be positive");
    if (!std::isfinite(init_gain) || init_gain < 0.0) throw std::invalid_argument("init_gain must be >= 0");
    Conv2d::create(params, prefix + "c1", 3, width, 3, rng);
    Conv2d::create(params, prefix + "c2", width, width, 1, rng);
    Conv2d::create(params, prefix + "head", width + 3, arch == DenoiserArch::Generic ? 3 : 4, 1, rng);
    // A zero head makes a fresh net the identity map (mask ~ 1 for mask_bias),
    // so adaptation starts from the observation rather than from gray.
    for (double& w : params.get(prefix + "head.weight").mutable_data()) w = 0.0;
    auto bias = params.get(prefix + "head.bias").mutable_data();
    for (std::size_t c = 0; c < bias.size(); ++c) bias[c] = arch == DenoiserArch::MaskBias && c < 3 ? kOpenMask : 0.0;
    if (init_gain > 0.0) {
        std::normal_distribution<double> n(0.0, 1.0);
        auto w = params.get(prefix + "head.weight").mutable_data();
        const std::size_t in = width + 3;
        for (std::size_t o = 0; o < bias.size(); ++o) {
            for (std::size_t c = width; c < in; ++c) w[o * in + c] += init_gain * n(rng);
            bias[o] += 0.5 * init_gain * n(rng);
        }
    }
    return bind(params, prefix, arch);
}

ImageNet ImageNet::bind(ParamSet& params, const std::string& prefix, DenoiserArch arch) {
    ImageNet n;
    n.arch_ = arch;
    n.c1_ = Conv2d::bind(params, prefix + "c1");
    n.c2_ = Conv2d::bind(params, prefix + "c2");
    n.head_ = Conv2d::bind(params, prefix + "head");
    return n;
}

Tensor ImageNet::operator()(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("image net expects [B,3,H,W], got " + scma::to_string(x.shape()));
    const Tensor h = relu(c2_(relu(c1_(x))));
    const Tensor out = head_(concat({h, x}, 1));
    if (arch_ == DenoiserArch::Generic) {
        // Residual in logit space: sigmoid(logit(x) + head).
        const Tensor xc = clamp(x, kLogitEps, 1.0 - kLogitEps);
        return sigmoid(add(out, sub(log(xc), log(add_scalar(scale(xc, -1.0), 1.0)))));
    }
    return compose_mask_bias(x, sigmoid(slice(out, 1, 0, 3)), slice(out, 1, 3, 1));
}

Tensor compose_mask_bias(const Tensor& x, const Tensor& mask, const Tensor& bias) {
    if (mask.shape() != x.shape()) throw ShapeError("mask must match the input shape");
    if (bias.rank() != 4 || bias.dim(1) != 1 || bias.dim(0) != x.dim(0) || bias.dim(2) != x.dim(2) ||
        bias.dim(3) != x.dim(3))
        throw ShapeError("bias must be [B,1,H,W]");
    return clamp(mask * x + concat({bias, bias, bias}, 1), 0.0, 1.0);
}

DenoiserPair DenoiserPair::create(DenoiserArch arch, std::size_t width, std::uint64_t seed, double init_gain) {
    DenoiserPair p;
    p.arch_ = arch;
    p.width_ = width;
    Rng rng(seed);
    ImageNet::create(p.de_params_, "de.", arch, width, rng, init_gain);
    ImageNet::create(p.n_params_, "n.", arch, width, rng, init_gain);
    p.bind();
    return p;
}

void DenoiserPair::bind() {
    de_ = ImageNet::bind(de_params_, "de.", arch_);
    n_ = ImageNet::bind(n_params_, "n.", arch_);
}

void DenoiserPair::save(const std::filesystem::path& path) const {
    ParamSet out;
    out.add(kMetaName, Tensor({2}, {arch_ == DenoiserArch::Generic ? 0.0 : 1.0, static_cast<double>(width_)}));
    for (const auto* set : {&de_params_, &n_params_})
        for (const auto& [name, t] : set->entries()) out.add(name, t.detach());
    save_checkpoint(path, out);
}

DenoiserPair DenoiserPair::load(const std::filesystem::path& path) {
    const ParamSet in = load_checkpoint(path);
    if (!in.contains(kMetaName)) throw CheckpointError(path.string() + " is not a denoiser checkpoint");
    const Tensor& meta = in.get(kMetaName);
    if (meta.size() != 2 || (meta[0] != 0.0 && meta[0] != 1.0) || meta[1] < 1.0)
        throw CheckpointError(path.string() + ": malformed denoiser metadata");
    DenoiserPair p = create(meta[0] == 0.0 ? DenoiserArch::Generic : DenoiserArch::MaskBias,
                            static_cast<std::size_t>(meta[1]), 0);
    p.de_params_.load_values(in);
    p.n_params_.load_values(in);
    return p;
}

DenoiserPair DenoiserPair::clone() const {
    DenoiserPair p = create(arch_, width_, 0);
    p.de_params_.load_values(de_params_);
    p.n_params_.load_values(n_params_);
    return p;
}

env::Observation DenoiserPair::denoise(const env::Observation& cluttered) const {
    const Tensor out = de_(wm::observation_tensor({&cluttered})).detach();
    for (double v : out.data())
        if (!std::isfinite(v)) throw NonFiniteError("denoiser produced a non-finite pixel");
    return wm::to_observation(out, 0, env::ObsKind::Clean);
}

// -------------------------------------------------------------------- losses

const std::vector<std::string>& loss_registry() {
    static const std::vector<std::string> names{"sc", "n", "rew"};
    return names;
}

Tensor loss_sc(const DenoiserPair& pair, const wm::WorldModel& model, const wm::SequenceBatch& chunk, Rng& rng,
               wm::SampleMode mode) {
    return sc_term(run_forward(pair, &model, chunk, rng, mode), model, norm(chunk));
}

Tensor loss_n(const DenoiserPair& pair, const wm::SequenceBatch& chunk) {
    Rng unused(0);
    return n_term(pair, run_forward(pair, nullptr, chunk, unused, wm::SampleMode::Mean), norm(chunk));
}

Tensor loss_rew(const DenoiserPair& pair, const wm::WorldModel& model, const wm::SequenceBatch& chunk, Rng& rng,
                wm::SampleMode mode) {
    return rew_term(run_forward(pair, &model, chunk, rng, mode), model, chunk, norm(chunk));
}

LossTerms scma_loss(const DenoiserPair& pair, const wm::WorldModel& model, const wm::SequenceBatch& chunk,
                    const LossToggles& use, const LossWeights& weights, Rng& rng, wm::SampleMode mode) {
    if (!use.sc && !use.n && !use.rew) throw std::invalid_argument("at least one adaptation loss must be enabled");
    if (!model.frozen()) throw ContractError("adaptation losses require a frozen world model");
    const bool filter = use.sc || use.rew;
    const Forward f = run_forward(pair, filter ? &model : nullptr, chunk, rng, mode);
    const double k = norm(chunk);
    LossTerms out;
    if (use.sc) out.terms.emplace("sc", sc_term(f, model, k));
    if (use.n) out.terms.emplace("n", n_term(pair, f, k));
    if (use.rew) out.terms.emplace("rew", rew_term(f, model, chunk, k));
    const std::map<std::string, double> w{{"sc", weights.sc}, {"n", weights.n}, {"rew", weights.rew}};
    bool first = true;
    for (const auto& [name, t] : out.terms) {
        const Tensor term = scale(t, w.at(name));
        out.total = first ? term : out.total + term;
        first = false;
    }
    return out;
}

// ---------------------------------------------------------------- adaptation

void AdaptConfig::validate() const {
    if (!use.sc && !use.n && !use.rew) throw std::invalid_argument("at least one adaptation loss must be enabled");
    if (width == 0 || batch_size == 0 || chunk_length == 0 || replay_capacity == 0)
        throw std::invalid_argument("width, batch_size, chunk_length and replay_capacity must be positive");
    if (!(denoise_lr > 0.0)) throw std::invalid_argument("denoise_lr must be positive");
    for (double w : {weights.sc, weights.n, weights.rew})
        if (!std::isfinite(w) || w < 0.0) throw std::invalid_argument("loss weights must be finite and >= 0");
    if (restarts == 0) throw std::invalid_argument("restarts must be >= 1");
    if (restarts > 1 && (restart_steps == 0 || update_steps == 0 || selection_episodes == 0 || selection_chunks == 0))
        throw std::invalid_argument("multi-start needs positive restart_steps, update_steps and selection sizes");
    if (!std::isfinite(init_gain) || init_gain < 0.0) throw std::invalid_argument("init_gain must be >= 0");
}

namespace {

// Trains config.restarts short candidates and returns the one scoring lowest
// on a fixed batch of random-action cluttered chunks (posterior mean, so the
// score is deterministic). Counters and scores go into `into`.
DenoiserPair select_candidate(const AdaptConfig& config, const wm::WorldModel& model,
                              const policy::PolicySpec& collect_policy, const env::EnvConfig& env_config,
                              const env::NoiseSpec& noise, const std::optional<std::filesystem::path>& last_good,
                              AdaptResult& into) {
    Rng rng(config.seed ^ 0x5851f42d4c957f2dULL);
    ReplayBuffer episodes(config.replay_capacity);
    env::DistractingEnv environment(env_config, noise);
    std::uniform_int_distribution<int> action(0, env::kNumActions - 1);
    for (std::size_t i = 0; i < config.selection_episodes || episodes.eligible(config.chunk_length) == 0; ++i) {
        env::Trajectory traj;
        traj.push(environment.reset(episode_seed(config.seed, 700000000ULL + i)), static_cast<int>(env::Action::Stay),
                  0.0);
        while (!environment.episode_over()) {
            const int a = action(rng);
            auto r = environment.step(a);
            traj.push(std::move(r.observation), a, r.reward);
            ++into.environment_steps;
        }
        episodes.add_episode(std::move(traj));
    }
    const auto batch =
        wm::make_batch(episodes.sample(config.selection_chunks, config.chunk_length, rng), model.config().actions);

    AdaptConfig sub = config;
    sub.restarts = 1;
    sub.iterations = (config.restart_steps + config.update_steps - 1) / config.update_steps;
    sub.eval_every = 0;
    std::optional<DenoiserPair> best;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < config.restarts; ++r) {
        sub.seed = config.seed * 0x9e3779b97f4a7c15ULL + r + 1;
        double score = std::numeric_limits<double>::infinity();
        try {
            AdaptResult cand = adapt(sub, model, collect_policy, env_config, noise, {}, {}, last_good);
            into.gradient_steps += cand.gradient_steps;
            into.environment_steps += cand.environment_steps;
            Rng unused(0);
            score = scma_loss(cand.pair, model, batch, config.use, config.weights, unused, wm::SampleMode::Mean)
                        .total.item();
            if (std::isfinite(score) && score < best_score) {
                best_score = score;
                best = std::move(cand.pair);
                into.selected_candidate = r;
            }
        } catch (const DivergenceError&) {
            // A diverged candidate simply loses.
        }
        into.candidate_scores.push_back(score);
    }
    if (!best) throw DivergenceError("every multi-start candidate diverged");
    return std::move(*best);
}

}  // namespace

AdaptResult adapt(const AdaptConfig& config, const wm::WorldModel& model, const policy::PolicySpec& collect_policy,
                  const env::EnvConfig& env_config, const env::NoiseSpec& noise, const Evaluator& evaluator,
                  const std::function<void(const AdaptMetrics&)>& on_metrics,
                  const std::optional<std::filesystem::path>& last_good, const DenoiserPair* initial) {
    config.validate();
    collect_policy.validate();
    if (!model.frozen()) throw ContractError("adapt requires a frozen world model");
    if (model.config().obs_size != static_cast<std::size_t>(env_config.obs_size))
        throw std::invalid_argument("world model and environment disagree on the observation size");

    const std::uint64_t calls_at_start = env::render_pair_calls();
    AdaptResult result{
        DenoiserPair::create(config.arch, config.width, config.seed ^ 0xd1b54a32d192ed03ULL, config.init_gain), {}, 0, 0,
        0, 0, {}, 0};
    DenoiserPair& pair = result.pair;
    std::optional<DenoiserPair> best;
    if (config.restarts > 1 && !initial) {
        best = select_candidate(config, model, collect_policy, env_config, noise, last_good, result);
        initial = &*best;
    }
    if (initial) {
        if (initial->arch() != config.arch || initial->width() != config.width)
            throw std::invalid_argument("initial denoiser does not match the configured architecture");
        pair = initial->clone();
    }
    Adam opt({&pair.denoiser_params(), &pair.noisy_params()}, AdamConfig{.lr = config.denoise_lr});
    Rng rng(config.seed ^ 0x2545f4914f6cdd1dULL);
    ReplayBuffer buffer(config.replay_capacity);
    env::DistractingEnv environment(env_config, noise);
    std::uint64_t next_episode = 0;

    // One whole episode with the policy acting on m_de(o^n).
    auto collect_episode = [&] {
        const std::uint64_t seed = episode_seed(config.seed, next_episode++);
        policy::PolicySpec ps = collect_policy;
        ps.seed = collect_policy.seed * 0x9e3779b97f4a7c15ULL + seed;
        policy::Policy pi(ps, env_config.grid_width);
        env::Trajectory traj;
        traj.push(environment.reset(seed), static_cast<int>(env::Action::Stay), 0.0);
        while (!environment.episode_over()) {
            const int a = pi.act(pair.denoise(traj.observations.back()));
            auto r = environment.step(a);
            traj.push(std::move(r.observation), a, r.reward);
            ++result.environment_steps;
        }
        const std::size_t n = traj.size() - 1;
        buffer.add_episode(std::move(traj));
        return n;
    };

    auto run_evaluator = [&](AdaptMetrics& row) {
        const std::uint64_t before = env::render_pair_calls();
        const EvalSummary s = evaluator(pair);
        result.render_pair_calls_in_eval += env::render_pair_calls() - before;
        row.eval_return_mean = s.return_mean;
        row.oracle_denoise_mse = s.oracle_mse;
        row.blind_step_rate = s.blind_step_rate;
    };

    for (std::size_t i = 0; i < config.warmup_episodes; ++i) collect_episode();
    while (buffer.eligible(config.chunk_length) == 0) collect_episode();

    DenoiserPair good = pair.clone();
    for (std::size_t it = 0; it < config.iterations; ++it) {
        AdaptMetrics row;
        row.iteration = it + 1;
        for (std::size_t k = 0; k < config.update_steps; ++k) {
            const auto chunk = wm::make_batch(buffer.sample(config.batch_size, config.chunk_length, rng),
                                              model.config().actions);
            const LossTerms loss = scma_loss(pair, model, chunk, config.use, config.weights, rng, config.state_sampling);
            const double total = loss.total.item();
            if (!std::isfinite(total) || total > config.divergence_threshold) {
                if (last_good) good.save(*last_good);
                throw DivergenceError("adaptation diverged at gradient step " + std::to_string(result.gradient_steps) +
                                      ": loss " + std::to_string(total));
            }
            backward(loss.total);
            opt.step();
            ++result.gradient_steps;
            if (loss.terms.count("sc")) row.loss_sc += loss.terms.at("sc").item();
            if (loss.terms.count("n")) row.loss_n += loss.terms.at("n").item();
            if (loss.terms.count("rew")) row.loss_rew += loss.terms.at("rew").item();
            row.loss_total += total;
        }
        if (config.update_steps) {
            const double inv = 1.0 / static_cast<double>(config.update_steps);
            row.loss_sc *= inv;
            row.loss_n *= inv;
            row.loss_rew *= inv;
            row.loss_total *= inv;
        }
        if (!finite(pair.denoiser_params()) || !finite(pair.noisy_params())) {
            if (last_good) good.save(*last_good);
            throw DivergenceError("adaptation produced non-finite parameters in iteration " + std::to_string(it + 1));
        }
        good = pair.clone();

        std::size_t collected = 0;
        while (collected < config.collect_interval) collected += collect_episode();

        const bool last = it + 1 == config.iterations;
        if (evaluator && ((config.eval_every && (it + 1) % config.eval_every == 0) || last)) run_evaluator(row);
        result.metrics.push_back(row);
        if (on_metrics) on_metrics(row);
    }
    result.render_pair_calls_in_adapt = env::render_pair_calls() - calls_at_start - result.render_pair_calls_in_eval;
    return result;
}

// ---------------------------------------------------------------- evaluation

std::vector<env::FramePair> oracle_frames(const env::EnvConfig& env_config, const env::NoiseSpec& noise, int episodes,
                                          std::uint64_t first_episode_seed) {
    std::vector<env::FramePair> out;
    for (int i = 0; i < episodes; ++i) {
        const std::uint64_t seed = first_episode_seed + static_cast<std::uint64_t>(i);
        policy::Policy pi({policy::PolicyVariant::Random, 0.0, seed}, env_config.grid_width);
        env::DistractingEnv e(env_config, noise);
        env::Observation obs = e.reset(seed);
        while (true) {
            out.push_back(env::OracleProbe::current_pair(e));
            const auto r = e.step(pi.act(obs));
            if (r.done) break;
            obs = r.observation;
        }
    }
    return out;
}

double oracle_denoise_mse(const DenoiserPair& pair, const std::vector<env::FramePair>& frames) {
    if (frames.empty()) throw std::invalid_argument("oracle_denoise_mse: no frames");
    double sum = 0.0;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < frames.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, frames.size() - start);
        std::vector<const env::Observation*> in, clean;
        for (std::size_t i = start; i < start + n; ++i) {
            in.push_back(&frames[i].cluttered);
            clean.push_back(&frames[i].clean);
        }
        const Tensor out = pair.denoise(wm::observation_tensor(in)).detach();
        const Tensor target = wm::observation_tensor(clean);
        double sq = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) sq += (out[i] - target[i]) * (out[i] - target[i]);
        sum += sq / static_cast<double>(out.size() / n);
    }
    return sum / static_cast<double>(frames.size());
}

Evaluator make_evaluator(const policy::PolicySpec& spec, const env::EnvConfig& env_config,
                         const env::NoiseSpec& noise, int episodes, std::uint64_t first_episode_seed) {
    return [=](const DenoiserPair& pair) {
        const auto frames = oracle_frames(env_config, noise, episodes, first_episode_seed);
        const auto report = policy::evaluate(
            spec, env_config, noise, [&](const env::Observation& o) { return pair.denoise(o); }, episodes,
            first_episode_seed);
        return EvalSummary{report.mean_return, oracle_denoise_mse(pair, frames), report.blind_step_rate};
    };
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<AdaptMetrics>& rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out.precision(17);
    out << "iteration,loss_sc,loss_n,loss_rew,loss_total,eval_return_mean,oracle_denoise_mse,blind_step_rate\n";
    auto opt = [&](const std::optional<double>& v) {
        if (v) out << *v;
    };
    for (const auto& r : rows) {
        out << r.iteration << ',' << r.loss_sc << ',' << r.loss_n << ',' << r.loss_rew << ',' << r.loss_total << ',';
        opt(r.eval_return_mean);
        out << ',';
        opt(r.oracle_denoise_mse);
        out << ',';
        opt(r.blind_step_rate);
        out << '\n';
    }
}

}  // namespace scma::adapt
