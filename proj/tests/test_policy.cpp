#include <doctest.h>

#include "scma/policy.hpp"

using namespace scma;
using namespace scma::policy;

namespace {

env::Observation frame_with_agent(env::Cell agent) {
    env::EnvState s;
    s.agent = agent;
    return env::render(env::EnvConfig{}, s);
}

env::NoiseSpec noise(env::NoiseVariant v) {
    env::NoiseSpec s;
    s.variant = v;
    return s;
}

}  // namespace

TEST_CASE("greedy moves horizontally first and stays on the goal") {
    Policy pi({PolicyVariant::ScriptedGreedy, 0.0, 1}, 8);
    CHECK(pi.act(frame_with_agent({2, 6})) == static_cast<int>(env::Action::Right));
    CHECK(pi.act(frame_with_agent({7, 6})) == static_cast<int>(env::Action::Left));
    CHECK(pi.act(frame_with_agent({0, 0})) == static_cast<int>(env::Action::Right));
    CHECK(pi.act(frame_with_agent({5, 0})) == static_cast<int>(env::Action::Down));
    CHECK(pi.act(frame_with_agent({5, 7})) == static_cast<int>(env::Action::Up));
    CHECK(pi.act(frame_with_agent({5, 6})) == static_cast<int>(env::Action::Stay));
    CHECK(pi.blind_steps() == 0);
}

TEST_CASE("decode finds both reserved cells") {
    const auto d = decode(frame_with_agent({1, 3}), 8);
    REQUIRE(d.agent);
    REQUIRE(d.goal);
    CHECK(*d.agent == env::Cell{1, 3});
    CHECK(*d.goal == env::Cell{5, 6});
}

TEST_CASE("hidden agent falls back to a random action and counts a blind step") {
    env::EnvState s;
    s.agent = {1, 1};
    const auto pair = env::render_pair(env::EnvConfig{}, s, noise(env::NoiseVariant::Occlusion));
    Policy pi({PolicyVariant::ScriptedGreedy, 0.0, 3}, 8);
    const int a = pi.act(pair.cluttered);
    CHECK((a >= 0 && a < env::kNumActions));
    CHECK(pi.blind_steps() == 1);
}

TEST_CASE("spec validation and hashing") {
    CHECK_THROWS(Policy({PolicyVariant::EpsilonGreedy, 1.5, 0}, 8));
    PolicySpec a{PolicyVariant::EpsilonGreedy, 0.3, 1};
    PolicySpec b = a;
    CHECK(a.hash() == b.hash());
    b.epsilon = 0.31;
    CHECK(a.hash() != b.hash());
    CHECK(policy_variant_from_string("epsilon_greedy") == PolicyVariant::EpsilonGreedy);
}

TEST_CASE("scripted greedy solves the clean grid and beats random") {
    env::EnvConfig cfg;
    const auto greedy = evaluate({PolicyVariant::ScriptedGreedy, 0.0, 1}, cfg, noise(env::NoiseVariant::None), {}, 20, 100);
    const auto random = evaluate({PolicyVariant::Random, 0.0, 1}, cfg, noise(env::NoiseVariant::None), {}, 20, 100);
    CHECK(greedy.mean_return > 0.0);
    CHECK(greedy.blind_step_rate == 0.0);
    CHECK(greedy.oracle_mse == 0.0);
    CHECK(random.mean_return < greedy.mean_return);
    CHECK(greedy.episode_seeds == random.episode_seeds);
}

TEST_CASE("color permutation blinds the policy and the exact inverse restores it") {
    env::EnvConfig cfg;
    const auto perm = noise(env::NoiseVariant::ColorPermutation);
    const PolicySpec spec{PolicyVariant::ScriptedGreedy, 0.0, 2};
    const auto clean = evaluate(spec, cfg, noise(env::NoiseVariant::None), {}, 20, 500);
    const auto blind = evaluate(spec, cfg, perm, {}, 20, 500);
    const auto oracle = evaluate(
        spec, cfg, perm, [&](const env::Observation& o) { return env::invert_color_permutation(o, perm); }, 20, 500);
    CHECK(blind.blind_step_rate == doctest::Approx(1.0));
    CHECK(blind.mean_return < clean.mean_return);
    CHECK(oracle.mean_return == clean.mean_return);
    CHECK(oracle.returns == clean.returns);
    CHECK(oracle.oracle_mse <= 1e-18);
}

TEST_CASE("lighting bias stays decodable") {
    env::EnvConfig cfg;
    const auto r = evaluate({PolicyVariant::ScriptedGreedy, 0.0, 2}, cfg, noise(env::NoiseVariant::LightingBias), {}, 5, 0);
    CHECK(r.blind_step_rate == 0.0);
}
