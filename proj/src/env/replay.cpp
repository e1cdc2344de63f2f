#include "scma/replay.hpp"

#include <stdexcept>

namespace scma {

ReplayBuffer::ReplayBuffer(std::size_t capacity_steps) : capacity_(capacity_steps) {
    if (capacity_ == 0) throw std::invalid_argument("replay capacity must be positive");
}

void ReplayBuffer::add_episode(env::Trajectory episode) {
    episode.validate();
    if (episode.size() == 0) throw std::invalid_argument("empty episode");
    if (episode.clean_observations) throw std::invalid_argument("replay buffer refuses paired clean frames");
    for (const auto& o : episode.observations)
        if (o.kind != env::ObsKind::Cluttered) throw std::invalid_argument("replay buffer stores cluttered frames only");
    steps_ += episode.size();
    episodes_.push_back(std::move(episode));
    while (steps_ > capacity_ && episodes_.size() > 1) {
        steps_ -= episodes_.front().size();
        episodes_.pop_front();
    }
}

std::size_t ReplayBuffer::eligible(std::size_t length) const {
    std::size_t n = 0;
    for (const auto& e : episodes_) n += e.size() >= length;
    return n;
}

std::vector<env::Trajectory> ReplayBuffer::sample(std::size_t batch, std::size_t length, std::mt19937_64& rng) const {
    if (length == 0) throw std::invalid_argument("chunk length must be positive");
    // Window counts per episode define the sampling weights.
    std::vector<std::size_t> windows;
    std::size_t total = 0;
    for (const auto& e : episodes_) {
        const std::size_t w = e.size() >= length ? e.size() - length + 1 : 0;
        windows.push_back(w);
        total += w;
    }
    if (total == 0) throw std::runtime_error("no episode is long enough for the requested chunk length");
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    std::vector<env::Trajectory> out;
    out.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t k = pick(rng);
        std::size_t i = 0;
        while (k >= windows[i]) k -= windows[i++];
        out.push_back(episodes_[i].slice(k, length));
    }
    return out;
}

}  // namespace scma
