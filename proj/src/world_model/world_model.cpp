#include "scma/world_model.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "scma/replay.hpp"

namespace scma::wm {

namespace {

// Stored alongside the weights so a checkpoint is self-describing.
constexpr const char* kMetaName = "meta.world_model";

Gaussian split_gaussian(const Tensor& raw, std::size_t n, double min_std) {
    return {slice(raw, 1, 0, n), add_scalar(softplus(slice(raw, 1, n, n)), min_std)};
}

Tensor row_sums(const Tensor& x) { return matmul(x, Tensor::full({x.dim(1), 1}, 1.0)); }

Tensor standard_normal(std::size_t rows, std::size_t cols, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(rows * cols);
    for (double& x : v) x = n(rng);
    return Tensor({rows, cols}, std::move(v));
}

std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t stream, std::uint64_t index) {
    return run_seed * 1000003ULL + stream * 100000007ULL + index;
}

}  // namespace

WorldModelConfig WorldModelConfig::paper() {
    WorldModelConfig c;
    c.belief = 200;
    c.stochastic = 30;
    c.embedding = 1024;
    c.hidden = 200;
    c.conv_channels = 32;
    return c;
}

void WorldModelConfig::validate() const {
    if (belief == 0 || stochastic == 0 || embedding == 0 || hidden == 0 || conv_channels == 0 || obs_size == 0 ||
        actions == 0)
        throw std::invalid_argument("world model dimensions must be positive");
    if (!(min_std > 0.0)) throw std::invalid_argument("min_std must be positive");
    if (!(free_nats >= 0.0) || !(kl_scale >= 0.0)) throw std::invalid_argument("free_nats and kl_scale must be >= 0");
}

WorldModel WorldModel::create(const WorldModelConfig& config, std::uint64_t seed) {
    config.validate();
    WorldModel m;
    m.config_ = config;
    Rng rng(seed);
    auto& p = m.params_;
    const auto& c = config;
    const std::size_t feat = c.belief + c.stochastic;
    Conv2d::create(p, "enc.conv", 3, c.conv_channels, 3, rng);
    Linear::create(p, "enc.fc", c.conv_channels * c.obs_size * c.obs_size, c.embedding, rng);
    Linear::create(p, "trans.in", c.stochastic + c.actions, c.hidden, rng);
    Linear::create(p, "gru.z", c.hidden + c.belief, c.belief, rng);
    Linear::create(p, "gru.r", c.hidden + c.belief, c.belief, rng);
    Linear::create(p, "gru.n", c.hidden + c.belief, c.belief, rng);
    Linear::create(p, "prior.fc", c.belief, c.hidden, rng);
    Linear::create(p, "prior.out", c.hidden, 2 * c.stochastic, rng);
    Linear::create(p, "post.fc", c.belief + c.embedding, c.hidden, rng);
    Linear::create(p, "post.out", c.hidden, 2 * c.stochastic, rng);
    Linear::create(p, "dec.fc", feat, c.hidden, rng);
    Linear::create(p, "dec.out", c.hidden, c.pixels(), rng);
    Linear::create(p, "rew.fc", feat, c.hidden, rng);
    Linear::create(p, "rew.out", c.hidden, 1, rng);
    m.bind();
    return m;
}

void WorldModel::bind() {
    enc_conv_ = Conv2d::bind(params_, "enc.conv");
    enc_fc_ = Linear::bind(params_, "enc.fc");
    trans_in_ = Linear::bind(params_, "trans.in");
    gru_z_ = Linear::bind(params_, "gru.z");
    gru_r_ = Linear::bind(params_, "gru.r");
    gru_n_ = Linear::bind(params_, "gru.n");
    prior_fc_ = Linear::bind(params_, "prior.fc");
    prior_out_ = Linear::bind(params_, "prior.out");
    post_fc_ = Linear::bind(params_, "post.fc");
    post_out_ = Linear::bind(params_, "post.out");
    dec_fc_ = Linear::bind(params_, "dec.fc");
    dec_out_ = Linear::bind(params_, "dec.out");
    rew_fc_ = Linear::bind(params_, "rew.fc");
    rew_out_ = Linear::bind(params_, "rew.out");
}

void WorldModel::save(const std::filesystem::path& path) const {
    ParamSet out;
    const auto& c = config_;
    out.add(kMetaName, Tensor({11}, {static_cast<double>(c.belief), static_cast<double>(c.stochastic),
                                     static_cast<double>(c.embedding), static_cast<double>(c.hidden),
                                     static_cast<double>(c.conv_channels), static_cast<double>(c.obs_size),
                                     static_cast<double>(c.actions), c.min_std, c.free_nats, c.kl_scale,
                                     frozen() ? 1.0 : 0.0}));
    for (const auto& [name, t] : params_.entries()) out.add(name, t.detach());
    save_checkpoint(path, out);
}

WorldModel WorldModel::load(const std::filesystem::path& path) {
    const ParamSet in = load_checkpoint(path);
    if (!in.contains(kMetaName)) throw CheckpointError(path.string() + " is not a world-model checkpoint");
    const Tensor& meta = in.get(kMetaName);
    if (meta.size() != 11) throw CheckpointError(path.string() + ": malformed world-model metadata");
    WorldModelConfig c;
    c.belief = static_cast<std::size_t>(meta[0]);
    c.stochastic = static_cast<std::size_t>(meta[1]);
    c.embedding = static_cast<std::size_t>(meta[2]);
    c.hidden = static_cast<std::size_t>(meta[3]);
    c.conv_channels = static_cast<std::size_t>(meta[4]);
    c.obs_size = static_cast<std::size_t>(meta[5]);
    c.actions = static_cast<std::size_t>(meta[6]);
    c.min_std = meta[7];
    c.free_nats = meta[8];
    c.kl_scale = meta[9];
    WorldModel m = create(c, 0);
    m.params_.load_values(in);
    if (meta[10] != 0.0) m.freeze();
    return m;
}

Tensor WorldModel::encode(const Tensor& obs) const {
    Tensor h = relu(enc_conv_(obs));
    return elu(enc_fc_(reshape(h, {obs.dim(0), h.size() / obs.dim(0)})));
}

Tensor WorldModel::decode(const Tensor& feat) const {
    const std::size_t n = config_.obs_size;
    Tensor out = sigmoid(dec_out_(elu(dec_fc_(feat))));
    return reshape(out, {feat.dim(0), 3, n, n});
}

Tensor WorldModel::predict_reward(const Tensor& feat) const { return rew_out_(elu(rew_fc_(feat))); }

Tensor WorldModel::transition(const Tensor& belief, const Tensor& stochastic, const Tensor& action) const {
    Tensor x = elu(trans_in_(concat({stochastic, action}, 1)));
    Tensor xh = concat({x, belief}, 1);
    Tensor z = sigmoid(gru_z_(xh));
    Tensor r = sigmoid(gru_r_(xh));
    Tensor n = tanh(gru_n_(concat({x, r * belief}, 1)));
    // h' = (1 - z) * n + z * h
    return n + z * (belief - n);
}

Gaussian WorldModel::prior(const Tensor& belief) const {
    return split_gaussian(prior_out_(elu(prior_fc_(belief))), config_.stochastic, config_.min_std);
}

Gaussian WorldModel::posterior(const Tensor& belief, const Tensor& embedding) const {
    return split_gaussian(post_out_(elu(post_fc_(concat({belief, embedding}, 1)))), config_.stochastic,
                          config_.min_std);
}

std::vector<RSSMState> observe(const WorldModel& model, const std::vector<Tensor>& observations,
                               const std::vector<Tensor>& actions, Rng& rng, SampleMode mode) {
    if (observations.empty()) throw std::invalid_argument("observe: empty sequence");
    if (actions.size() != observations.size()) throw std::invalid_argument("observe: actions and observations differ in length");
    const auto& c = model.config();
    const std::size_t T = observations.size(), B = observations.front().dim(0);
    // One encoder pass over every frame.
    const Tensor embedded = model.encode(T == 1 ? observations.front() : concat(observations, 0));
    Tensor belief = Tensor::zeros({B, c.belief});
    Tensor stoch = Tensor::zeros({B, c.stochastic});
    std::vector<RSSMState> out;
    out.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        if (observations[t].dim(0) != B || actions[t].shape() != Shape{B, c.actions})
            throw ShapeError("observe: inconsistent batch at step " + std::to_string(t));
        belief = model.transition(belief, stoch, actions[t]);
        RSSMState s;
        s.belief = belief;
        s.prior = model.prior(belief);
        s.posterior = model.posterior(belief, T == 1 ? embedded : slice(embedded, 0, t * B, B));
        s.stochastic = mode == SampleMode::Mean
                           ? s.posterior.mean
                           : s.posterior.mean + s.posterior.std * standard_normal(B, c.stochastic, rng);
        stoch = s.stochastic;
        out.push_back(std::move(s));
    }
    return out;
}

Tensor one_hot(const std::vector<int>& actions, std::size_t num_actions) {
    std::vector<double> v(actions.size() * num_actions, 0.0);
    for (std::size_t i = 0; i < actions.size(); ++i) {
        if (actions[i] < 0 || static_cast<std::size_t>(actions[i]) >= num_actions)
            throw std::invalid_argument("one_hot: action out of range");
        v[i * num_actions + static_cast<std::size_t>(actions[i])] = 1.0;
    }
    return Tensor({actions.size(), num_actions}, std::move(v));
}

Tensor observation_tensor(const std::vector<const env::Observation*>& frames) {
    if (frames.empty()) throw std::invalid_argument("observation_tensor: no frames");
    const auto n = static_cast<std::size_t>(frames.front()->size);
    std::vector<double> v;
    v.reserve(frames.size() * 3 * n * n);
    for (const auto* f : frames) {
        if (static_cast<std::size_t>(f->size) != n) throw ShapeError("observation_tensor: frame sizes differ");
        v.insert(v.end(), f->pixels.begin(), f->pixels.end());
    }
    return Tensor({frames.size(), 3, n, n}, std::move(v));
}

env::Observation to_observation(const Tensor& batch, std::size_t index, env::ObsKind kind) {
    if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != batch.dim(3)) throw ShapeError("to_observation: expected [B,3,H,H]");
    const std::size_t per = 3 * batch.dim(2) * batch.dim(3);
    env::Observation o;
    o.size = static_cast<int>(batch.dim(2));
    o.kind = kind;
    const auto d = batch.data();
    o.pixels.assign(d.begin() + static_cast<std::ptrdiff_t>(index * per), d.begin() + static_cast<std::ptrdiff_t>((index + 1) * per));
    return o;
}

SequenceBatch make_batch(const std::vector<env::Trajectory>& chunks, std::size_t num_actions) {
    if (chunks.empty()) throw std::invalid_argument("make_batch: no chunks");
    const std::size_t T = chunks.front().size();
    SequenceBatch b;
    for (const auto& c : chunks) {
        c.validate();
        if (c.size() != T || T == 0) throw std::invalid_argument("make_batch: chunks must share a positive length");
    }
    for (std::size_t t = 0; t < T; ++t) {
        std::vector<const env::Observation*> frames;
        std::vector<int> acts;
        std::vector<double> rews;
        for (const auto& c : chunks) {
            frames.push_back(&c.observations[t]);
            acts.push_back(c.actions[t]);
            rews.push_back(c.rewards[t]);
        }
        b.observations.push_back(observation_tensor(frames));
        b.actions.push_back(one_hot(acts, num_actions));
        b.rewards.push_back(Tensor({chunks.size(), 1}, std::move(rews)));
    }
    return b;
}

ElboTerms elbo_loss(const WorldModel& model, const SequenceBatch& batch, Rng& rng) {
    const auto& c = model.config();
    const std::size_t T = batch.length(), B = batch.batch();
    if (T == 0) throw std::invalid_argument("elbo_loss: empty batch");
    const auto states = observe(model, batch.observations, batch.actions, rng);
    std::vector<Tensor> feats, kls;
    for (const auto& s : states) {
        feats.push_back(features(s));
        Tensor kl = row_sums(gaussian_kl(s.posterior.mean, s.posterior.std, s.prior.mean, s.prior.std));
        kls.push_back(clamp(kl, c.free_nats, std::numeric_limits<double>::infinity()));
    }
    const Tensor all_feats = concat(feats, 0);
    const double norm = 1.0 / static_cast<double>(T * B);
    ElboTerms e;
    e.j_o = scale(gaussian_nll(concat(batch.observations, 0), model.decode(all_feats), 1.0), norm);
    e.j_rew = scale(gaussian_nll(concat(batch.rewards, 0), model.predict_reward(all_feats), 1.0), norm);
    e.j_kl = scale(sum(concat(kls, 0)), norm);
    e.total = e.j_o + e.j_rew + scale(e.j_kl, c.kl_scale);
    for (const auto& [name, t] : {std::pair{"J_o", e.j_o}, {"J_kl", e.j_kl}, {"J_rew", e.j_rew}})
        if (!std::isfinite(t.item())) throw NonFiniteError(std::string("elbo_loss: ") + name + " is not finite");
    return e;
}

double reconstruction_mse(const WorldModel& model, const std::vector<env::Trajectory>& episodes) {
    double sq = 0.0;
    std::size_t count = 0;
    Rng unused(0);
    for (const auto& ep : episodes) {
        const SequenceBatch b = make_batch({ep}, model.config().actions);
        const auto states = observe(model, b.observations, b.actions, unused, SampleMode::Mean);
        std::vector<Tensor> feats;
        for (const auto& s : states) feats.push_back(features(s));
        const Tensor recon = model.decode(concat(feats, 0));
        const Tensor target = concat(b.observations, 0);
        for (std::size_t i = 0; i < recon.size(); ++i) {
            const double d = recon[i] - target[i];
            sq += d * d;
        }
        count += recon.size();
    }
    return count ? sq / static_cast<double>(count) : 0.0;
}

std::vector<env::Trajectory> collect_clean_episodes(const env::EnvConfig& config, const policy::PolicySpec& spec,
                                                    std::size_t episodes, std::uint64_t first_seed) {
    std::vector<env::Trajectory> out;
    env::DistractingEnv e(config, env::NoiseSpec{});
    for (std::size_t i = 0; i < episodes; ++i) {
        const std::uint64_t seed = first_seed + i;
        policy::PolicySpec ps = spec;
        ps.seed = spec.seed * 0x9e3779b97f4a7c15ULL + seed;
        policy::Policy pi(ps, config.grid_width);
        env::Trajectory traj;
        traj.push(e.reset(seed), static_cast<int>(env::Action::Stay), 0.0);
        while (!e.episode_over()) {
            const int a = pi.act(traj.observations.back());
            auto r = e.step(a);
            traj.push(std::move(r.observation), a, r.reward);
        }
        out.push_back(std::move(traj));
    }
    return out;
}

PretrainResult pretrain(const PretrainConfig& config, const std::function<void(const PretrainMetrics&)>& on_metrics) {
    if (config.batch_size == 0 || config.chunk_length == 0 || config.collect_interval == 0)
        throw std::invalid_argument("pretrain: batch_size, chunk_length and collect_interval must be positive");
    PretrainResult result{WorldModel::create(config.model, config.seed), {}, 0.0};
    WorldModel& m = result.model;
    Rng rng(config.seed ^ 0x5bd1e995ULL);
    ReplayBuffer buffer(config.replay_capacity);
    const auto holdout =
        collect_clean_episodes(config.env, config.collect_policy, config.holdout_episodes, episode_seed(config.seed, 2, 0));
    std::uint64_t next_episode = 0;
    auto collect = [&](std::size_t n) {
        for (auto& ep : collect_clean_episodes(config.env, config.collect_policy, n,
                                               episode_seed(config.seed, 1, next_episode)))
            buffer.add_episode(std::move(ep));
        next_episode += n;
    };
    collect(config.seed_episodes);
    while (buffer.eligible(config.chunk_length) == 0) collect(1);

    Adam opt({&m.params()}, AdamConfig{.lr = config.model_lr});
    std::size_t step = 0;
    for (std::size_t it = 0; it < config.iterations; ++it) {
        PretrainMetrics row;
        for (std::size_t k = 0; k < config.collect_interval; ++k) {
            const auto batch = make_batch(buffer.sample(config.batch_size, config.chunk_length, rng), config.model.actions);
            const ElboTerms e = elbo_loss(m, batch, rng);
            if (e.total.item() > config.divergence_threshold)
                throw DivergenceError("pretrain diverged at step " + std::to_string(step) + ": loss " +
                                      std::to_string(e.total.item()));
            backward(e.total);
            opt.step();
            ++step;
            row.j_o += e.j_o.item();
            row.j_kl += e.j_kl.item();
            row.j_rew += e.j_rew.item();
            row.total += e.total.item();
        }
        const double inv = 1.0 / static_cast<double>(config.collect_interval);
        row.step = step;
        row.j_o *= inv;
        row.j_kl *= inv;
        row.j_rew *= inv;
        row.total *= inv;
        row.holdout_recon_mse = reconstruction_mse(m, holdout);
        result.metrics.push_back(row);
        if (on_metrics) on_metrics(row);
        collect(config.episodes_per_iteration);
    }
    result.holdout_recon_mse = result.metrics.empty() ? reconstruction_mse(m, holdout) : result.metrics.back().holdout_recon_mse;
    m.freeze();
    return result;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<PretrainMetrics>& rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out.precision(17);
    out << "step,j_o,j_kl,j_rew,total,holdout_recon_mse\n";
    for (const auto& r : rows)
        out << r.step << ',' << r.j_o << ',' << r.j_kl << ',' << r.j_rew << ',' << r.total << ',' << r.holdout_recon_mse
            << '\n';
}

}  // namespace scma::wm
