#pragma once

// Enumeration-based checks of unsupervised distribution matching on finite
// observation alphabets: pushforwards, homogeneous noise functions, the exact
// KL matching objective over Dirac denoising/noisy maps, and its minimisers.

#include <boost/rational.hpp>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scma::exact {

using Rational = boost::rational<std::int64_t>;

class BudgetExceeded : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Strictly positive distribution over {0..N-1}. Exact when built from ratios.
class ProbVector {
   public:
    static ProbVector from_ratios(std::vector<Rational> probs);
    static ProbVector from_doubles(std::vector<double> probs);
    /// counts[i] / sum(counts), exact.
    static ProbVector from_counts(const std::vector<std::int64_t>& counts);
    static ProbVector uniform(std::size_t n);

    std::size_t size() const { return values_.size(); }
    bool is_exact() const { return exact_.has_value(); }
    double operator[](std::size_t i) const { return values_[i]; }
    const std::vector<double>& values() const { return values_; }
    const std::vector<Rational>& ratios() const { return *exact_; }

    /// Equality of entries i and j (exact, or within 1e-12 for floats).
    bool entry_equal(std::size_t i, const ProbVector& other, std::size_t j) const;
    bool operator==(const ProbVector& other) const;

    std::string to_string() const;

   private:
    std::vector<double> values_;
    std::optional<std::vector<Rational>> exact_;
};

/// Total function on {0..N-1}; a hypothesis for q(o|o^n) or q(o^n|o).
class DiracMap {
   public:
    DiracMap() = default;
    explicit DiracMap(std::vector<std::size_t> mapping);
    static DiracMap identity(std::size_t n);

    std::size_t size() const { return mapping_.size(); }
    std::size_t operator()(std::size_t o) const { return mapping_[o]; }
    const std::vector<std::size_t>& mapping() const { return mapping_; }
    bool is_injective() const;

    auto operator<=>(const DiracMap&) const = default;
    std::string to_string() const;

   private:
    std::vector<std::size_t> mapping_;
};

/// Bijective noise function: clean index -> cluttered index.
class NoiseFunction {
   public:
    explicit NoiseFunction(std::vector<std::size_t> mapping);
    static NoiseFunction identity(std::size_t n);

    std::size_t size() const { return mapping_.size(); }
    std::size_t operator()(std::size_t o) const { return mapping_[o]; }
    const std::vector<std::size_t>& mapping() const { return mapping_; }
    NoiseFunction inverse() const;
    DiracMap as_map() const { return DiracMap(mapping_); }

    auto operator<=>(const NoiseFunction&) const = default;
    std::string to_string() const;

   private:
    std::vector<std::size_t> mapping_;
};

/// result[f(o)] = p[o]
ProbVector pushforward(const ProbVector& p, const NoiseFunction& f);

bool is_homogeneous(const ProbVector& p, const NoiseFunction& f1, const NoiseFunction& f2);

/// All noise functions homogeneous to f_n under p, in lexicographic order. N <= 8.
std::vector<NoiseFunction> enumerate_homogeneous(const ProbVector& p, const NoiseFunction& f_n);

/// prod_j K_j! over the multiplicities K_j of equal entries of p.
std::uint64_t homogeneous_count_formula(const ProbVector& p);

/// Dirac posterior of a bijective noise function: its inverse.
DiracMap posterior_denoise(const NoiseFunction& f_n);

/// KL( p_n(o^n) q_de(o|o^n) || p(o) q_n(o^n|o) ) for Dirac maps; +inf on support mismatch.
double exact_lkl(const ProbVector& p, const NoiseFunction& f_n, const DiracMap& q_de, const DiracMap& q_n);

/// Exact zero test for exact_lkl: both Dirac-coupled joints coincide.
bool lkl_is_zero(const ProbVector& p, const NoiseFunction& f_n, const DiracMap& q_de, const DiracMap& q_n);

struct MinimizerSet {
    double global_minimum = 0.0;
    std::vector<std::pair<DiracMap, DiracMap>> pairs;  // (q_de, q_n), sorted
};

/// Brute force over every (q_de, q_n) pair of total maps. N <= 5.
MinimizerSet minimizing_pairs(const ProbVector& p, const NoiseFunction& f_n);

/// Distinct q_de among the minimising pairs, sorted. N <= 5.
std::vector<DiracMap> solution_set(const ProbVector& p, const NoiseFunction& f_n);

/// Theorem-side prediction: posterior_denoise(f) for every homogeneous f, sorted.
std::vector<DiracMap> predicted_solution_set(const ProbVector& p, const NoiseFunction& f_n);

// ------------------------------------------------------------ with rewards

/// Joint table p(o, r), rows = observations, columns = rewards.
class RewardedProbVector {
   public:
    explicit RewardedProbVector(std::vector<std::vector<Rational>> joint);

    std::size_t observations() const { return joint_.size(); }
    std::size_t rewards() const { return joint_.front().size(); }
    const Rational& at(std::size_t o, std::size_t r) const { return joint_[o][r]; }
    ProbVector observation_marginal() const;
    bool operator==(const RewardedProbVector& other) const { return joint_ == other.joint_; }

   private:
    std::vector<std::vector<Rational>> joint_;
};

/// result[f(o), r] = p[o, r]; noise acts on observations only.
RewardedProbVector pushforward(const RewardedProbVector& p, const NoiseFunction& f);
bool is_homogeneous(const RewardedProbVector& p, const NoiseFunction& f1, const NoiseFunction& f2);
std::vector<NoiseFunction> enumerate_homogeneous(const RewardedProbVector& p, const NoiseFunction& f_n);

struct RewardDemoReport {
    std::size_t observation_only_count = 0;
    std::size_t with_reward_count = 0;
    bool swap_homogeneous_without_rewards = false;
    bool swap_homogeneous_with_rewards = false;
    // Same scenario with the reward pairing mirrored.
    std::size_t mirrored_observation_only_count = 0;
    std::size_t mirrored_with_reward_count = 0;
};

/// Two observations, two rewards, p(o1,r1) = p(o2,r2) = 1/2, f_n = identity.
RewardDemoReport reward_homogeneity_demo();

// -------------------------------------------------------------- utilities

/// Every permutation of {0..n-1} in lexicographic order.
std::vector<NoiseFunction> all_noise_functions(std::size_t n);

/// Every distribution over n symbols with entries k/denominator, k >= 1.
std::vector<ProbVector> rational_grid(std::size_t n, std::int64_t denominator);

}  // namespace scma::exact
