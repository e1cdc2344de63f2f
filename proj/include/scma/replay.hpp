#pragma once

#include <cstddef>
#include <deque>
#include <random>
#include <vector>

#include "scma/env.hpp"

namespace scma {

/// Episode-structured FIFO of cluttered steps. Whole episodes are evicted,
/// oldest first, once the step count exceeds capacity.
class ReplayBuffer {
   public:
    explicit ReplayBuffer(std::size_t capacity_steps);

    /// Rejects clean frames and trajectories carrying a clean pairing.
    void add_episode(env::Trajectory episode);

    std::size_t episodes() const { return episodes_.size(); }
    std::size_t steps() const { return steps_; }
    std::size_t capacity() const { return capacity_; }
    const env::Trajectory& episode(std::size_t i) const { return episodes_[i]; }

    /// Number of episodes long enough to yield a chunk of `length`.
    std::size_t eligible(std::size_t length) const;

    /// Uniform over all length-`length` windows inside single episodes.
    std::vector<env::Trajectory> sample(std::size_t batch, std::size_t length, std::mt19937_64& rng) const;

   private:
    std::size_t capacity_;
    std::size_t steps_ = 0;
    std::deque<env::Trajectory> episodes_;
};

}  // namespace scma
