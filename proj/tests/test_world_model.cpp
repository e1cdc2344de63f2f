#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "scma/world_model.hpp"
#include "support/loss_cases.hpp"

using namespace scma;
using scma::testing::random_chunk;
using scma::testing::tiny_world_model_config;

namespace {

wm::PretrainConfig tiny_pretrain(std::uint64_t seed) {
    wm::PretrainConfig c;
    c.model = tiny_world_model_config();
    c.env.obs_size = 4;
    c.env.grid_width = c.env.grid_height = 4;
    c.env.goal = {3, 2};
    c.env.episode_length = 12;
    c.seed_episodes = 3;
    c.iterations = 2;
    c.collect_interval = 3;
    c.episodes_per_iteration = 1;
    c.batch_size = 2;
    c.chunk_length = 3;
    c.holdout_episodes = 1;
    c.seed = seed;
    return c;
}

}  // namespace

TEST_CASE("observe on a length-1 sequence gives one state of the right shape") {
    auto m = wm::WorldModel::create(tiny_world_model_config(), 3);
    std::mt19937_64 rng(1);
    const auto chunk = random_chunk(2, 1, 4, rng);
    Rng a(9), b(9);
    const auto s1 = wm::observe(m, chunk.observations, chunk.actions, a);
    const auto s2 = wm::observe(m, chunk.observations, chunk.actions, b);
    REQUIRE(s1.size() == 1);
    CHECK(s1[0].belief.shape() == Shape{2, 5});
    CHECK(s1[0].stochastic.shape() == Shape{2, 3});
    CHECK(wm::features(s1[0]).shape() == Shape{2, 8});
    for (std::size_t i = 0; i < s1[0].stochastic.size(); ++i) CHECK(s1[0].stochastic[i] == s2[0].stochastic[i]);
    CHECK(m.decode(wm::features(s1[0])).shape() == Shape{2, 3, 4, 4});
}

TEST_CASE("observe rejects mismatched sequences") {
    auto m = wm::WorldModel::create(tiny_world_model_config(), 3);
    std::mt19937_64 rng(1);
    auto chunk = random_chunk(2, 2, 4, rng);
    chunk.actions.pop_back();
    Rng r(0);
    CHECK_THROWS(wm::observe(m, chunk.observations, chunk.actions, r));
    CHECK_THROWS(wm::observe(m, {}, {}, r));
}

TEST_CASE("fresh models produce finite decodes and positive stds over 100 seeds") {
    std::mt19937_64 rng(5);
    const auto chunk = random_chunk(2, 3, 4, rng);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto m = wm::WorldModel::create(tiny_world_model_config(), seed);
        Rng r(seed);
        const auto states = wm::observe(m, chunk.observations, chunk.actions, r);
        for (const auto& s : states) {
            const Tensor d = m.decode(wm::features(s));
            for (double v : d.data()) REQUIRE((v > 0.0 && v < 1.0));
            for (double v : s.posterior.std.data()) REQUIRE(v >= 1e-4);
            for (double v : s.prior.std.data()) REQUIRE(v >= 1e-4);
        }
    }
}

TEST_CASE("posterior-mean filtering is independent of the rng") {
    auto m = wm::WorldModel::create(tiny_world_model_config(), 4);
    std::mt19937_64 rng(2);
    const auto chunk = random_chunk(3, 3, 4, rng);
    Rng a(1), b(2);
    const auto s1 = wm::observe(m, chunk.observations, chunk.actions, a, wm::SampleMode::Mean);
    const auto s2 = wm::observe(m, chunk.observations, chunk.actions, b, wm::SampleMode::Mean);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t i = 0; i < s1[t].belief.size(); ++i) CHECK(s1[t].belief[i] == s2[t].belief[i]);
}

TEST_CASE("ELBO terms match central finite differences over 20 seeds") {
    for (const auto& c : scma::testing::composite_loss_cases()) {
        if (c.name.rfind("J_", 0) != 0) continue;
        double worst = 0.0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) worst = std::max(worst, c.relative_error(seed));
        INFO(c.name << " worst relative error " << worst);
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("free nats clamp the KL term from below") {
    auto cfg = tiny_world_model_config();
    cfg.free_nats = 50.0;
    auto m = wm::WorldModel::create(cfg, 1);
    std::mt19937_64 rng(3);
    const auto chunk = random_chunk(2, 2, 4, rng);
    Rng r(0);
    const auto e = wm::elbo_loss(m, chunk, r);
    CHECK(e.j_kl.item() == doctest::Approx(50.0));
    CHECK(e.total.item() == doctest::Approx(e.j_o.item() + e.j_rew.item() + 50.0));
}

TEST_CASE("J_o on a perfect reconstruction sits at the unit-std NLL floor") {
    // gaussian_nll with zero residual is 0.5*log(2*pi) per element.
    const Tensor x = Tensor::full({2, 3, 4, 4}, 0.5);
    const double floor = gaussian_nll(x, x, 1.0).item();
    CHECK(floor == doctest::Approx(96 * 0.5 * std::log(2.0 * M_PI)).epsilon(1e-12));
}

TEST_CASE("a frozen model takes no gradients and refuses optimizer steps") {
    auto m = wm::WorldModel::create(tiny_world_model_config(), 2);
    m.freeze();
    std::mt19937_64 rng(1);
    const auto chunk = random_chunk(2, 2, 4, rng);
    Rng r(0);
    backward(wm::elbo_loss(m, chunk, r).total);
    for (const auto& [name, t] : m.params().entries()) CHECK_MESSAGE(!t.has_grad(), name);
    CHECK_THROWS_AS(Adam({&m.params()}, AdamConfig{}).step(), FrozenParamsError);
}

TEST_CASE("checkpoint round trip keeps weights, config and the frozen flag") {
    const auto path = std::filesystem::temp_directory_path() / "scma_test_wm.bin";
    auto m = wm::WorldModel::create(tiny_world_model_config(), 11);
    m.freeze();
    m.save(path);
    const auto back = wm::WorldModel::load(path);
    CHECK(back.checksum() == m.checksum());
    CHECK(back.frozen());
    CHECK(back.config().belief == 5);
    CHECK(back.config().obs_size == 4);
    std::filesystem::remove(path);
}

TEST_CASE("pretraining is deterministic for a fixed seed and freezes the model") {
    auto a = wm::pretrain(tiny_pretrain(4));
    auto b = wm::pretrain(tiny_pretrain(4));
    CHECK(a.model.frozen());
    REQUIRE(a.metrics.size() == 2);
    CHECK(a.model.checksum() == b.model.checksum());
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
        CHECK(a.metrics[i].total == b.metrics[i].total);
        CHECK(a.metrics[i].holdout_recon_mse == b.metrics[i].holdout_recon_mse);
    }
    auto c = wm::pretrain(tiny_pretrain(5));
    CHECK(c.model.checksum() != a.model.checksum());
}

TEST_CASE("metrics CSV has the documented header") {
    const auto path = std::filesystem::temp_directory_path() / "scma_test_wm.csv";
    wm::write_metrics_csv(path, {wm::PretrainMetrics{1, 2, 3, 4, 9, 0.5}});
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "step,j_o,j_kl,j_rew,total,holdout_recon_mse");
    std::filesystem::remove(path);
}
