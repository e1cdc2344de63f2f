#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include "scma/exact.hpp"
#include "scma/harness.hpp"

namespace scma::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::ostream& out(const CommandOptions& o) { return o.log ? *o.log : std::cout; }

class Stopwatch {
   public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

   private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Creates the command directory, refusing to clobber a finished run.
fs::path prepare(const RunConfig& c, const std::string& command, bool force) {
    const fs::path dir = command_dir(c, command);
    if (fs::exists(dir / "manifest.json")) {
        if (!force)
            throw UsageError(dir.string() + " already holds a finished " + command + " run; pass --force to overwrite");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    return dir;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << j.dump(2) << '\n';
}

void write_manifest(const fs::path& dir, const RunConfig& c, const std::string& command, double seconds,
                    json extra) {
    json m = {{"command", command},
              {"run_id", c.run_id},
              {"config_hash", config_hash(c)},
              {"seeds", {c.seed}},
              {"git_describe", git_describe()},
              {"wall_time_seconds", seconds},
              {"config", to_json(c)}};
    m.update(extra);
    write_json(dir / "manifest.json", m);
}

std::string vec_string(const std::vector<std::size_t>& v) {
    std::ostringstream s;
    s << '[';
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    s << ']';
    return s.str();
}

std::string maps_string(const std::vector<exact::DiracMap>& maps) {
    std::string s;
    for (const auto& m : maps) s += (s.empty() ? "" : " ") + vec_string(m.mapping());
    return s;
}

wm::WorldModel load_world_model(const RunConfig& c) {
    const fs::path path = world_model_path(c);
    if (!fs::exists(path))
        throw UsageError("world-model checkpoint not found at " + path.string() +
                         " (run `scma pretrain --run-id " + c.run_id + "` first or set paths.world_model)");
    return wm::WorldModel::load(path);
}

adapt::DenoiserPair load_denoiser(const fs::path& path) {
    if (!fs::exists(path)) throw UsageError("denoiser checkpoint not found at " + path.string());
    return adapt::DenoiserPair::load(path);
}

}  // namespace

// --------------------------------------------------------------- verify-exact

int cmd_verify_exact(const RunConfig& c, const CommandOptions& o) {
    constexpr std::size_t kEnumerationLimit = 8, kBruteForceLimit = 5;
    if (c.exact_max_n > kEnumerationLimit || c.exact_theorem_max_n > kBruteForceLimit)
        throw exact::BudgetExceeded("requested N up to " + std::to_string(std::max(c.exact_max_n, c.exact_theorem_max_n)) +
                                    "; enumeration is limited to N <= " + std::to_string(kEnumerationLimit) +
                                    " and brute-force solution sets to N <= " + std::to_string(kBruteForceLimit));
    if (c.exact_max_n < 2 || c.exact_denominator < 2) throw UsageError("exact grid needs max_n >= 2 and denominator >= 2");
    const Stopwatch clock;
    const fs::path dir = prepare(c, "verify-exact", o.force);
    bool ok = true;
    json failures = json::array();

    json theorem = json::array();
    for (std::size_t n = 2; n <= c.exact_theorem_max_n; ++n)
        for (const auto& p : exact::rational_grid(n, c.exact_denominator))
            for (const auto& f_n : exact::all_noise_functions(n)) {
                const auto mins = exact::minimizing_pairs(p, f_n);
                const auto sols = exact::solution_set(p, f_n);
                const auto predicted = exact::predicted_solution_set(p, f_n);
                bool injective = true;
                for (const auto& [q_de, q_n] : mins.pairs) injective &= q_de.is_injective() && q_n.is_injective();
                const bool match = sols == predicted && mins.global_minimum == 0.0;
                json row = {{"n", n},
                            {"p", p.to_string()},
                            {"f_n", vec_string(f_n.mapping())},
                            {"solution_set_size", sols.size()},
                            {"homogeneous_count", predicted.size()},
                            {"minimizing_pairs", mins.pairs.size()},
                            {"match", match},
                            {"injective", injective}};
                if (!match || !injective) {
                    ok = false;
                    row["solution_set"] = maps_string(sols);
                    row["predicted"] = maps_string(predicted);
                    failures.push_back(row);
                }
                theorem.push_back(std::move(row));
            }

    json counting = json::array();
    for (std::size_t n = 2; n <= c.exact_max_n; ++n) {
        const auto fs_all = exact::all_noise_functions(n);
        for (const auto& p : exact::rational_grid(n, c.exact_denominator)) {
            std::uint64_t formula = exact::homogeneous_count_formula(p);
            if (o.corrupt_formula) formula += 1;
            std::size_t lo = SIZE_MAX, hi = 0;
            for (const auto& f_n : fs_all) {
                const std::size_t k = exact::enumerate_homogeneous(p, f_n).size();
                lo = std::min(lo, k);
                hi = std::max(hi, k);
            }
            const bool match = lo == hi && lo == formula;
            json row = {{"n", n}, {"p", p.to_string()}, {"formula", formula}, {"count_min", lo}, {"count_max", hi},
                        {"noise_functions", fs_all.size()}, {"match", match}};
            if (!match) {
                ok = false;
                failures.push_back(row);
            }
            counting.push_back(std::move(row));
        }
    }

    const auto demo = exact::reward_homogeneity_demo();
    const bool demo_ok = demo.observation_only_count == 2 && demo.with_reward_count == 1 &&
                         demo.swap_homogeneous_without_rewards && !demo.swap_homogeneous_with_rewards;
    json reward = {{"observation_only_count", demo.observation_only_count},
                   {"with_reward_count", demo.with_reward_count},
                   {"mirrored_observation_only_count", demo.mirrored_observation_only_count},
                   {"mirrored_with_reward_count", demo.mirrored_with_reward_count},
                   {"match", demo_ok}};
    if (!demo_ok) {
        ok = false;
        failures.push_back(reward);
    }

    const json report = {{"passed", ok},        {"theorem", theorem}, {"counting", counting},
                         {"reward_demo", reward}, {"failures", failures}};
    write_json(dir / "report.json", report);
    write_manifest(dir, c, "verify-exact", clock.seconds(), {{"passed", ok}});
    out(o) << "verify-exact: " << theorem.size() << " theorem instances, " << counting.size()
           << " counting instances, reward demo " << (demo_ok ? "ok" : "FAILED") << " -> "
           << (ok ? "PASS" : "FAIL") << '\n';
    if (!ok) out(o) << "first failure: " << failures.front().dump() << '\n';
    return ok ? 0 : 1;
}

// ------------------------------------------------------------------- pretrain

int cmd_pretrain(const RunConfig& c, const CommandOptions& o) {
    const Stopwatch clock;
    const fs::path dir = prepare(c, "pretrain", o.force);
    wm::PretrainConfig pc = c.pretrain;
    pc.env = c.env;
    pc.seed = c.seed;
    auto result = wm::pretrain(pc, [&](const wm::PretrainMetrics& m) {
        out(o) << "pretrain step " << m.step << " total " << m.total << " holdout_mse " << m.holdout_recon_mse << '\n';
    });
    result.model.save(dir / "world_model.bin");
    wm::write_metrics_csv(dir / "metrics.csv", result.metrics);
    write_manifest(dir, c, "pretrain", clock.seconds(),
                   {{"holdout_recon_mse", result.holdout_recon_mse},
                    {"world_model_checksum", result.model.checksum()},
                    {"gradient_steps", result.metrics.empty() ? 0 : result.metrics.back().step}});
    out(o) << "pretrain done: holdout reconstruction MSE " << result.holdout_recon_mse << '\n';
    return 0;
}

// ---------------------------------------------------------------------- adapt

int cmd_adapt(const RunConfig& c, const CommandOptions& o) {
    const Stopwatch clock;
    auto model = load_world_model(c);
    if (!model.frozen()) model.freeze();
    const fs::path dir = prepare(c, "adapt", o.force);
    adapt::AdaptConfig ac = c.adapt;
    ac.seed = c.seed;
    const auto wm_before = model.checksum();
    const auto policy_before = c.collect_policy.hash();
    const auto evaluator = adapt::make_evaluator(c.eval_policy, c.env, c.noise, c.eval_episodes, c.eval_first_seed);
    adapt::AdaptResult result = [&] {
        try {
            return adapt::adapt(ac, model, c.collect_policy, c.env, c.noise, evaluator,
                                [&](const adapt::AdaptMetrics& m) {
                                    out(o) << "adapt iteration " << m.iteration << " loss " << m.loss_total;
                                    if (m.oracle_denoise_mse) out(o) << " oracle_mse " << *m.oracle_denoise_mse;
                                    if (m.eval_return_mean) out(o) << " return " << *m.eval_return_mean;
                                    out(o) << '\n';
                                },
                                dir / "denoiser.last_good.bin");
        } catch (const adapt::DivergenceError& e) {
            throw std::runtime_error(std::string(e.what()) + "; last good denoiser at " +
                                     (dir / "denoiser.last_good.bin").string());
        }
    }();
    result.pair.save(dir / "denoiser.bin");
    adapt::write_metrics_csv(dir / "metrics.csv", result.metrics);
    write_manifest(dir, c, "adapt", clock.seconds(),
                   {{"world_model", world_model_path(c).string()},
                    {"world_model_checksum_before", wm_before},
                    {"world_model_checksum_after", model.checksum()},
                    {"policy_hash_before", policy_before},
                    {"policy_hash_after", c.collect_policy.hash()},
                    {"render_pair_calls_in_adapt", result.render_pair_calls_in_adapt},
                    {"render_pair_calls_in_eval", result.render_pair_calls_in_eval},
                    {"gradient_steps", result.gradient_steps},
                    {"environment_steps", result.environment_steps},
                    {"candidate_scores", result.candidate_scores},
                    {"selected_candidate", result.selected_candidate},
                    {"loss_registry", adapt::loss_registry()}});
    out(o) << "adapt done: " << result.gradient_steps << " gradient steps, render_pair calls inside adapt "
           << result.render_pair_calls_in_adapt << '\n';
    return 0;
}

// ----------------------------------------------------------------------- eval

int cmd_eval(const RunConfig& c, const CommandOptions& o) {
    const Stopwatch clock;
    std::optional<adapt::DenoiserPair> pair;
    if (const auto path = denoiser_path(c, false)) pair = load_denoiser(*path);
    const fs::path dir = prepare(c, "eval", o.force);
    std::ofstream csv(dir / "eval.csv");
    csv.precision(17);
    csv << "condition,episodes,mean_return,std_return,blind_step_rate,oracle_mse,episode_seeds\n";
    auto row = [&](const std::string& name, const policy::Denoiser& d) {
        const auto r = policy::evaluate(c.eval_policy, c.env, c.noise, d, c.eval_episodes, c.eval_first_seed);
        std::string seeds;
        for (auto s : r.episode_seeds) seeds += (seeds.empty() ? "" : ";") + std::to_string(s);
        csv << name << ',' << r.episodes << ',' << r.mean_return << ',' << r.std_return << ',' << r.blind_step_rate
            << ',' << r.oracle_mse << ',' << seeds << '\n';
        out(o) << "eval " << name << ": mean return " << r.mean_return << ", blind rate " << r.blind_step_rate
               << ", oracle MSE " << r.oracle_mse << '\n';
    };
    row("none", {});
    if (pair) row("denoiser", [&](const env::Observation& obs) { return pair->denoise(obs); });
    csv.close();
    write_manifest(dir, c, "eval", clock.seconds(),
                   {{"denoiser", pair ? denoiser_path(c, false)->string() : std::string()}});
    return 0;
}

// --------------------------------------------------------------------- render

int cmd_render(const RunConfig& c, const CommandOptions& o) {
    if (c.render_frames < 0) throw UsageError("render frames must be >= 0");
    if (c.render_frames == 0) return 0;
    const Stopwatch clock;
    const auto pair = load_denoiser(*denoiser_path(c, true));
    const fs::path dir = prepare(c, "render", o.force);
    env::DistractingEnv e(c.env, c.noise);
    std::uint64_t episode = 0;
    policy::Policy pi({c.eval_policy.variant, c.eval_policy.epsilon, c.eval_policy.seed}, c.env.grid_width);
    env::Observation obs = e.reset(c.eval_first_seed);
    for (int k = 0; k < c.render_frames; ++k) {
        const env::Observation denoised = pair.denoise(obs);
        const auto frames = env::OracleProbe::current_pair(e);
        env::write_ppm_strip(env::frame_path(output_root(c), c.run_id, "render", static_cast<std::uint64_t>(k)),
                             {obs, denoised, frames.clean});
        const auto r = e.step(pi.act(denoised));
        obs = r.observation;
        if (r.done) obs = e.reset(c.eval_first_seed + ++episode);
    }
    write_manifest(dir, c, "render", clock.seconds(),
                   {{"frames", c.render_frames}, {"layout", "cluttered | denoised | clean"}});
    out(o) << "render: wrote " << c.render_frames << " triptychs to " << dir.string() << '\n';
    return 0;
}

int run_command(const RunConfig& c, const CommandOptions& o) {
    if (c.mode == "verify-exact") return cmd_verify_exact(c, o);
    if (c.mode == "pretrain") return cmd_pretrain(c, o);
    if (c.mode == "adapt") return cmd_adapt(c, o);
    if (c.mode == "eval") return cmd_eval(c, o);
    if (c.mode == "render") return cmd_render(c, o);
    throw UsageError("unknown mode '" + c.mode + "'");
}

void merge_csvs(const std::vector<std::pair<std::uint64_t, fs::path>>& inputs, const fs::path& output) {
    if (output.has_parent_path()) fs::create_directories(output.parent_path());
    std::ofstream merged(output);
    if (!merged) throw std::runtime_error("cannot write " + output.string());
    bool header_written = false;
    std::string expected_header;
    for (const auto& [seed, path] : inputs) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("missing per-seed CSV " + path.string());
        std::string line;
        std::getline(in, line);
        if (!header_written) {
            expected_header = line;
            merged << "seed," << line << '\n';
            header_written = true;
        } else if (line != expected_header) {
            throw std::runtime_error("CSV header mismatch in " + path.string());
        }
        while (std::getline(in, line))
            if (!line.empty()) merged << seed << ',' << line << '\n';
    }
}

}  // namespace scma::harness
