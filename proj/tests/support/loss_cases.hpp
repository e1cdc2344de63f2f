#pragma once

// Finite-difference cases for the composite losses: the world-model ELBO
// terms and the three adaptation terms, each on a random 2-step chunk with
// tiny networks so every case runs in milliseconds.

#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "kernel_cases.hpp"
#include "scma/adaptation.hpp"
#include "scma/world_model.hpp"

namespace scma::testing {

inline wm::WorldModelConfig tiny_world_model_config() {
    wm::WorldModelConfig c;
    c.belief = 5;
    c.stochastic = 3;
    c.embedding = 6;
    c.hidden = 7;
    c.conv_channels = 2;
    c.obs_size = 4;
    c.free_nats = 0.0;  // keeps the KL clamp inactive so J_kl is smooth
    return c;
}

inline wm::SequenceBatch random_chunk(std::size_t batch, std::size_t length, std::size_t obs_size,
                                      std::mt19937_64& rng) {
    wm::SequenceBatch b;
    std::uniform_int_distribution<int> act(0, env::kNumActions - 1);
    for (std::size_t t = 0; t < length; ++t) {
        b.observations.push_back(random_tensor({batch, 3, obs_size, obs_size}, rng, 0.05, 0.95, false));
        std::vector<int> a(batch);
        for (auto& x : a) x = act(rng);
        b.actions.push_back(wm::one_hot(a, env::kNumActions));
        b.rewards.push_back(random_tensor({batch, 1}, rng, -1.0, 1.0, false));
    }
    return b;
}

inline std::vector<Tensor> param_tensors(const ParamSet& p) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : p.entries()) out.push_back(t);
    return out;
}

inline double elbo_term_error(std::uint64_t seed, Tensor wm::ElboTerms::*term) {
    std::mt19937_64 rng(seed);
    auto model = wm::WorldModel::create(tiny_world_model_config(), seed);
    const auto chunk = random_chunk(2, 2, 4, rng);
    auto loss = [&] {
        Rng noise(seed * 31 + 7);  // same reparameterisation noise for every evaluation
        return wm::elbo_loss(model, chunk, noise).*term;
    };
    return check_gradients(loss, param_tensors(model.params()), rng, 4).relative_error;
}

enum class AdaptTerm { Sc, N, Rew };

inline double adapt_term_error(std::uint64_t seed, AdaptTerm term) {
    std::mt19937_64 rng(seed);
    auto model = wm::WorldModel::create(tiny_world_model_config(), seed);
    model.freeze();
    const auto pair = adapt::DenoiserPair::create(adapt::DenoiserArch::Generic, 3, seed + 100);
    const auto chunk = random_chunk(2, 2, 4, rng);
    auto loss = [&] {
        Rng noise(seed * 31 + 7);
        switch (term) {
            case AdaptTerm::Sc: return adapt::loss_sc(pair, model, chunk, noise);
            case AdaptTerm::N: return adapt::loss_n(pair, chunk);
            case AdaptTerm::Rew: return adapt::loss_rew(pair, model, chunk, noise);
        }
        return Tensor();
    };
    auto leaves = param_tensors(pair.denoiser_params());
    if (term == AdaptTerm::N)
        for (auto& t : param_tensors(pair.noisy_params())) leaves.push_back(t);
    return check_gradients(loss, leaves, rng, 4).relative_error;
}

inline std::vector<GradCase> composite_loss_cases() {
    return {
        {"J_o", [](std::uint64_t s) { return elbo_term_error(s, &wm::ElboTerms::j_o); }},
        {"J_kl", [](std::uint64_t s) { return elbo_term_error(s, &wm::ElboTerms::j_kl); }},
        {"J_rew", [](std::uint64_t s) { return elbo_term_error(s, &wm::ElboTerms::j_rew); }},
        {"L_sc", [](std::uint64_t s) { return adapt_term_error(s, AdaptTerm::Sc); }},
        {"L_n", [](std::uint64_t s) { return adapt_term_error(s, AdaptTerm::N); }},
        {"L_rew", [](std::uint64_t s) { return adapt_term_error(s, AdaptTerm::Rew); }},
    };
}

}  // namespace scma::testing
