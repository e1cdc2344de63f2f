// scma: exact verification, pretraining, adaptation, evaluation and frame export.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "scma/exact.hpp"
#include "scma/harness.hpp"

extern char** environ;

namespace {

using scma::harness::RunConfig;
namespace fs = std::filesystem;

struct Flags {
    std::string config_path, run_id, preset, noise, denoiser, world_model, seeds;
    std::optional<std::uint64_t> seed;
    std::optional<int> episodes, frames, iterations;
    std::optional<std::size_t> max_n;
    bool force = false;
    bool corrupt_formula = false;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--run-id", f.run_id, "Run identifier (artifact directory name)");
    cmd->add_option("--seed", f.seed, "Run seed");
    cmd->add_option("--seeds", f.seeds, "Comma-separated seeds; runs one process per seed and merges CSVs");
    cmd->add_option("--preset", f.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_flag("--force", f.force, "Overwrite an existing run");
    cmd->add_option("--noise", f.noise, "Distractor variant");
}

RunConfig build_config(const std::string& mode, const Flags& f) {
    // Precedence: flags > config file > preset defaults.
    nlohmann::json file;
    if (!f.config_path.empty()) {
        std::ifstream in(f.config_path);
        try {
            file = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw scma::harness::UsageError(f.config_path + ": " + e.what());
        }
    }
    std::string preset = "desk";
    if (!f.preset.empty())
        preset = f.preset;
    else if (file.contains("preset"))
        preset = file.at("preset").get<std::string>();
    RunConfig c = scma::harness::preset(preset);
    if (!file.is_null()) {
        file["preset"] = preset;
        c = scma::harness::from_json(file, c);
    }
    c.mode = mode;
    if (!f.run_id.empty()) c.run_id = f.run_id;
    if (f.seed) c.seed = *f.seed;
    if (!f.noise.empty()) c.noise.variant = scma::env::noise_variant_from_string(f.noise);
    if (!f.denoiser.empty()) c.paths.denoiser = f.denoiser;
    if (!f.world_model.empty()) c.paths.world_model = f.world_model;
    if (f.episodes) c.eval_episodes = *f.episodes;
    if (f.frames) c.render_frames = *f.frames;
    if (f.max_n) c.exact_max_n = *f.max_n;
    if (f.iterations) {
        if (mode == "pretrain") c.pretrain.iterations = static_cast<std::size_t>(*f.iterations);
        if (mode == "adapt") c.adapt.iterations = static_cast<std::size_t>(*f.iterations);
    }
    c.env.validate();
    c.noise.validate();
    return c;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        const auto v = std::stoull(item, &used);
        if (used != item.size()) throw scma::harness::UsageError("bad seed '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw scma::harness::UsageError("--seeds needs at least one seed");
    return out;
}

std::string seed_run_id(const std::string& run_id, std::uint64_t seed) { return run_id + "-s" + std::to_string(seed); }

// Re-invokes this binary once per seed, all at once, then merges their CSVs.
int fan_out(int argc, char** argv, const RunConfig& c, const std::vector<std::uint64_t>& seeds) {
    std::vector<std::string> base;
    for (int i = 0; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--seeds" || a == "--seed" || a == "--run-id") {
            ++i;
            continue;
        }
        if (a.rfind("--seeds=", 0) == 0 || a.rfind("--seed=", 0) == 0 || a.rfind("--run-id=", 0) == 0) continue;
        base.push_back(a);
    }
    std::vector<pid_t> children;
    for (auto seed : seeds) {
        std::vector<std::string> args = base;
        args.insert(args.end(), {"--seed", std::to_string(seed), "--run-id", seed_run_id(c.run_id, seed)});
        std::vector<char*> cargs;
        for (auto& a : args) cargs.push_back(a.data());
        cargs.push_back(nullptr);
        pid_t pid = 0;
        if (posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, cargs.data(), environ) != 0)
            throw std::runtime_error("failed to spawn the per-seed process");
        children.push_back(pid);
    }
    int worst = 0;
    for (pid_t pid : children) {
        int status = 0;
        waitpid(pid, &status, 0);
        const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 128;
        worst = std::max(worst, code);
    }
    if (worst != 0) return worst;
    const std::string csv = c.mode == "eval" ? "eval.csv" : c.mode == "verify-exact" || c.mode == "render" ? "" : "metrics.csv";
    if (!csv.empty()) {
        std::vector<std::pair<std::uint64_t, fs::path>> inputs;
        for (auto seed : seeds) {
            RunConfig child = c;
            child.run_id = seed_run_id(c.run_id, seed);
            inputs.emplace_back(seed, scma::harness::command_dir(child, c.mode) / csv);
        }
        const fs::path merged = scma::harness::command_dir(c, c.mode) / ("merged_" + csv);
        scma::harness::merge_csvs(inputs, merged);
        std::cout << "merged " << seeds.size() << " seeds into " << merged.string() << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SCMA toolkit: exact checks, world-model pretraining, denoiser adaptation, evaluation"};
    app.require_subcommand(1);
    Flags f;
    const std::vector<std::pair<std::string, std::string>> commands{
        {"verify-exact", "Exhaustively verify the distribution-matching theory on small alphabets"},
        {"pretrain", "Train and freeze the world model on clean episodes"},
        {"adapt", "Adapt a denoiser to a distractor against the frozen world model"},
        {"eval", "Evaluate the scripted policy with and without a denoiser"},
        {"render", "Write (cluttered, denoised, clean) frame triptychs"}};
    for (const auto& [name, help] : commands) {
        auto* cmd = app.add_subcommand(name, help);
        add_common(cmd, f);
        if (name == "verify-exact") {
            cmd->add_option("--max-n", f.max_n, "Largest alphabet for the counting grid (<= 8)");
            cmd->add_flag("--corrupt-formula-for-testing", f.corrupt_formula)->group("");
        }
        if (name == "adapt" || name == "eval" || name == "render")
            cmd->add_option("--world-model", f.world_model, "World-model checkpoint");
        if (name == "eval" || name == "render") cmd->add_option("--denoiser", f.denoiser, "Denoiser checkpoint");
        if (name == "eval") cmd->add_option("--episodes", f.episodes, "Evaluation episodes");
        if (name == "render") cmd->add_option("--frames", f.frames, "Number of triptychs");
        if (name == "pretrain" || name == "adapt")
            cmd->add_option("--iterations", f.iterations, "Collect/update iterations");
    }
    CLI11_PARSE(app, argc, argv);
    const std::string mode = app.get_subcommands().front()->get_name();
    try {
        const RunConfig c = build_config(mode, f);
        if (!f.seeds.empty()) return fan_out(argc, argv, c, parse_seeds(f.seeds));
        scma::harness::CommandOptions o;
        o.force = f.force;
        o.corrupt_formula = f.corrupt_formula;
        return scma::harness::run_command(c, o);
    } catch (const scma::exact::BudgetExceeded& e) {
        std::cerr << "scma " << mode << ": budget exceeded: " << e.what() << '\n';
        return 2;
    } catch (const scma::harness::UsageError& e) {
        std::cerr << "scma " << mode << ": " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "scma " << mode << ": error: " << e.what() << '\n';
        return 1;
    }
}
