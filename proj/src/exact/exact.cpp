#include "scma/exact.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace scma::exact {

namespace {

constexpr double kFloatTolerance = 1e-12;
constexpr std::size_t kMaxHomogeneousN = 8;
constexpr std::size_t kMaxSolutionN = 5;

double to_double(const Rational& r) {
    return static_cast<double>(r.numerator()) / static_cast<double>(r.denominator());
}

void require_same_size(std::size_t a, std::size_t b, const char* op) {
    if (a != b)
        throw std::invalid_argument(std::string(op) + ": alphabet size mismatch " + std::to_string(a) + " vs " +
                                    std::to_string(b));
}

std::string join(const std::vector<std::size_t>& v) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << ']';
    return os.str();
}

std::uint64_t ipow(std::uint64_t base, std::size_t exp) {
    std::uint64_t r = 1;
    for (std::size_t i = 0; i < exp; ++i) r *= base;
    return r;
}

// Decodes map number `code` (base-n digits, least significant = symbol 0).
void decode_map(std::uint64_t code, std::size_t n, std::vector<std::size_t>& out) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<std::size_t>(code % n);
        code /= n;
    }
}

}  // namespace

// -------------------------------------------------------------- ProbVector

ProbVector ProbVector::from_ratios(std::vector<Rational> probs) {
    if (probs.empty()) throw std::invalid_argument("empty probability vector");
    Rational total = 0;
    for (const auto& r : probs) {
        if (r <= Rational(0)) throw std::invalid_argument("probabilities must be strictly positive");
        total += r;
    }
    if (total != Rational(1)) throw std::invalid_argument("probabilities must sum to 1");
    ProbVector p;
    for (const auto& r : probs) p.values_.push_back(to_double(r));
    p.exact_ = std::move(probs);
    return p;
}

ProbVector ProbVector::from_doubles(std::vector<double> probs) {
    if (probs.empty()) throw std::invalid_argument("empty probability vector");
    double total = 0.0;
    for (double v : probs) {
        if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("probabilities must be strictly positive");
        total += v;
    }
    if (std::abs(total - 1.0) > kFloatTolerance) throw std::invalid_argument("probabilities must sum to 1");
    ProbVector p;
    p.values_ = std::move(probs);
    return p;
}

ProbVector ProbVector::from_counts(const std::vector<std::int64_t>& counts) {
    const std::int64_t total = std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
    std::vector<Rational> r;
    for (auto c : counts) r.emplace_back(c, total > 0 ? total : 1);
    return from_ratios(std::move(r));
}

ProbVector ProbVector::uniform(std::size_t n) {
    return from_counts(std::vector<std::int64_t>(n, 1));
}

bool ProbVector::entry_equal(std::size_t i, const ProbVector& other, std::size_t j) const {
    if (is_exact() && other.is_exact()) return (*exact_)[i] == (*other.exact_)[j];
    return std::abs(values_[i] - other.values_[j]) <= kFloatTolerance;
}

bool ProbVector::operator==(const ProbVector& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
        if (!entry_equal(i, other, i)) return false;
    return true;
}

std::string ProbVector::to_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < size(); ++i) {
        if (i) os << ',';
        if (is_exact())
            os << (*exact_)[i].numerator() << '/' << (*exact_)[i].denominator();
        else
            os << values_[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------- maps

DiracMap::DiracMap(std::vector<std::size_t> mapping) : mapping_(std::move(mapping)) {
    for (auto v : mapping_)
        if (v >= mapping_.size()) throw std::invalid_argument("map value outside the alphabet: " + join(mapping_));
}

DiracMap DiracMap::identity(std::size_t n) {
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), std::size_t{0});
    return DiracMap(std::move(m));
}

bool DiracMap::is_injective() const {
    std::vector<bool> seen(mapping_.size(), false);
    for (auto v : mapping_) {
        if (seen[v]) return false;
        seen[v] = true;
    }
    return true;
}

std::string DiracMap::to_string() const { return join(mapping_); }

NoiseFunction::NoiseFunction(std::vector<std::size_t> mapping) : mapping_(std::move(mapping)) {
    if (!DiracMap(mapping_).is_injective()) throw std::invalid_argument("noise function is not a bijection: " + join(mapping_));
}

NoiseFunction NoiseFunction::identity(std::size_t n) { return NoiseFunction(DiracMap::identity(n).mapping()); }

NoiseFunction NoiseFunction::inverse() const {
    std::vector<std::size_t> inv(mapping_.size());
    for (std::size_t o = 0; o < mapping_.size(); ++o) inv[mapping_[o]] = o;
    return NoiseFunction(std::move(inv));
}

std::string NoiseFunction::to_string() const { return join(mapping_); }

// ------------------------------------------------------------ homogeneity

ProbVector pushforward(const ProbVector& p, const NoiseFunction& f) {
    require_same_size(p.size(), f.size(), "pushforward");
    if (p.is_exact()) {
        std::vector<Rational> out(p.size());
        for (std::size_t o = 0; o < p.size(); ++o) out[f(o)] = p.ratios()[o];
        return ProbVector::from_ratios(std::move(out));
    }
    std::vector<double> out(p.size());
    for (std::size_t o = 0; o < p.size(); ++o) out[f(o)] = p[o];
    return ProbVector::from_doubles(std::move(out));
}

bool is_homogeneous(const ProbVector& p, const NoiseFunction& f1, const NoiseFunction& f2) {
    require_same_size(f1.size(), f2.size(), "is_homogeneous");
    return pushforward(p, f1) == pushforward(p, f2);
}

std::vector<NoiseFunction> all_noise_functions(std::size_t n) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::vector<NoiseFunction> out;
    do {
        out.emplace_back(perm);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return out;
}

std::vector<NoiseFunction> enumerate_homogeneous(const ProbVector& p, const NoiseFunction& f_n) {
    require_same_size(p.size(), f_n.size(), "enumerate_homogeneous");
    if (p.size() > kMaxHomogeneousN)
        throw BudgetExceeded("enumerate_homogeneous: N = " + std::to_string(p.size()) + " exceeds the budget of " +
                             std::to_string(kMaxHomogeneousN));
    const ProbVector target = pushforward(p, f_n);
    std::vector<NoiseFunction> out;
    for (auto& f : all_noise_functions(p.size()))
        if (pushforward(p, f) == target) out.push_back(std::move(f));
    return out;
}

std::uint64_t homogeneous_count_formula(const ProbVector& p) {
    std::vector<bool> grouped(p.size(), false);
    std::uint64_t count = 1;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (grouped[i]) continue;
        std::uint64_t k = 0;
        for (std::size_t j = i; j < p.size(); ++j)
            if (!grouped[j] && p.entry_equal(i, p, j)) {
                grouped[j] = true;
                ++k;
            }
        for (std::uint64_t f = 2; f <= k; ++f) count *= f;
    }
    return count;
}

DiracMap posterior_denoise(const NoiseFunction& f_n) { return f_n.inverse().as_map(); }

// ---------------------------------------------------------------- L_KL

namespace {

// Shared by the public entry points and the brute-force search; works on raw
// mappings so the inner loop does not allocate.
double lkl_value(const ProbVector& p, const ProbVector& p_n, const std::vector<std::size_t>& q_de,
                 const std::vector<std::size_t>& q_n) {
    double total = 0.0;
    for (std::size_t on = 0; on < p.size(); ++on) {
        const std::size_t o = q_de[on];
        if (q_n[o] != on) return std::numeric_limits<double>::infinity();
        total += p_n[on] * std::log(p_n[on] / p[o]);
    }
    return total;
}

bool lkl_zero(const ProbVector& p, const ProbVector& p_n, const std::vector<std::size_t>& q_de,
              const std::vector<std::size_t>& q_n) {
    for (std::size_t on = 0; on < p.size(); ++on) {
        const std::size_t o = q_de[on];
        if (q_n[o] != on || !p.entry_equal(o, p_n, on)) return false;
    }
    return true;
}

void check_lkl_args(const ProbVector& p, const NoiseFunction& f_n, const DiracMap& q_de, const DiracMap& q_n) {
    require_same_size(p.size(), f_n.size(), "exact_lkl");
    require_same_size(p.size(), q_de.size(), "exact_lkl");
    require_same_size(p.size(), q_n.size(), "exact_lkl");
}

}  // namespace

double exact_lkl(const ProbVector& p, const NoiseFunction& f_n, const DiracMap& q_de, const DiracMap& q_n) {
    check_lkl_args(p, f_n, q_de, q_n);
    return lkl_value(p, pushforward(p, f_n), q_de.mapping(), q_n.mapping());
}

bool lkl_is_zero(const ProbVector& p, const NoiseFunction& f_n, const DiracMap& q_de, const DiracMap& q_n) {
    check_lkl_args(p, f_n, q_de, q_n);
    return lkl_zero(p, pushforward(p, f_n), q_de.mapping(), q_n.mapping());
}

MinimizerSet minimizing_pairs(const ProbVector& p, const NoiseFunction& f_n) {
    require_same_size(p.size(), f_n.size(), "minimizing_pairs");
    const std::size_t n = p.size();
    if (n > kMaxSolutionN)
        throw BudgetExceeded("solution_set: N = " + std::to_string(n) + " exceeds the budget of " +
                             std::to_string(kMaxSolutionN));
    const std::uint64_t maps = ipow(n, n);
    const ProbVector p_n = pushforward(p, f_n);

    // Per-q_de results, gathered in index order afterwards for deterministic output.
    std::vector<std::vector<std::uint64_t>> zero_partners(maps);
    std::vector<double> best(maps, std::numeric_limits<double>::infinity());
    const auto total = static_cast<std::int64_t>(maps);
#pragma omp parallel for schedule(dynamic, 16)
    for (std::int64_t de_code = 0; de_code < total; ++de_code) {
        const auto idx = static_cast<std::size_t>(de_code);
        std::vector<std::size_t> de, qn;
        decode_map(idx, n, de);
        for (std::uint64_t n_code = 0; n_code < maps; ++n_code) {
            decode_map(n_code, n, qn);
            const double v = lkl_value(p, p_n, de, qn);
            best[idx] = std::min(best[idx], v);
            if (std::isfinite(v) && lkl_zero(p, p_n, de, qn)) zero_partners[idx].push_back(n_code);
        }
    }
    MinimizerSet result;
    result.global_minimum = *std::min_element(best.begin(), best.end());
    std::vector<std::size_t> de, qn;
    for (std::uint64_t de_code = 0; de_code < maps; ++de_code)
        for (auto n_code : zero_partners[de_code]) {
            decode_map(de_code, n, de);
            decode_map(n_code, n, qn);
            result.pairs.emplace_back(DiracMap(de), DiracMap(qn));
        }
    std::sort(result.pairs.begin(), result.pairs.end());
    return result;
}

std::vector<DiracMap> solution_set(const ProbVector& p, const NoiseFunction& f_n) {
    const auto mins = minimizing_pairs(p, f_n);
    if (mins.global_minimum != 0.0)
        throw std::logic_error("L_KL minimum is " + std::to_string(mins.global_minimum) + ", expected 0");
    std::vector<DiracMap> out;
    for (const auto& [q_de, q_n] : mins.pairs) out.push_back(q_de);
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<DiracMap> predicted_solution_set(const ProbVector& p, const NoiseFunction& f_n) {
    std::vector<DiracMap> out;
    for (const auto& f : enumerate_homogeneous(p, f_n)) out.push_back(posterior_denoise(f));
    std::sort(out.begin(), out.end());
    return out;
}

// ------------------------------------------------------------- rewards

RewardedProbVector::RewardedProbVector(std::vector<std::vector<Rational>> joint) : joint_(std::move(joint)) {
    if (joint_.empty() || joint_.front().empty()) throw std::invalid_argument("empty joint table");
    Rational total = 0;
    for (const auto& row : joint_) {
        if (row.size() != joint_.front().size()) throw std::invalid_argument("ragged joint table");
        for (const auto& v : row) {
            if (v < Rational(0)) throw std::invalid_argument("negative joint probability");
            total += v;
        }
    }
    if (total != Rational(1)) throw std::invalid_argument("joint probabilities must sum to 1");
}

ProbVector RewardedProbVector::observation_marginal() const {
    std::vector<Rational> m;
    for (const auto& row : joint_) m.push_back(std::accumulate(row.begin(), row.end(), Rational(0)));
    return ProbVector::from_ratios(std::move(m));
}

RewardedProbVector pushforward(const RewardedProbVector& p, const NoiseFunction& f) {
    require_same_size(p.observations(), f.size(), "pushforward");
    std::vector<std::vector<Rational>> out(p.observations(), std::vector<Rational>(p.rewards()));
    for (std::size_t o = 0; o < p.observations(); ++o)
        for (std::size_t r = 0; r < p.rewards(); ++r) out[f(o)][r] = p.at(o, r);
    return RewardedProbVector(std::move(out));
}

bool is_homogeneous(const RewardedProbVector& p, const NoiseFunction& f1, const NoiseFunction& f2) {
    return pushforward(p, f1) == pushforward(p, f2);
}

std::vector<NoiseFunction> enumerate_homogeneous(const RewardedProbVector& p, const NoiseFunction& f_n) {
    require_same_size(p.observations(), f_n.size(), "enumerate_homogeneous");
    if (p.observations() > kMaxHomogeneousN) throw BudgetExceeded("enumerate_homogeneous: alphabet too large");
    const auto target = pushforward(p, f_n);
    std::vector<NoiseFunction> out;
    for (auto& f : all_noise_functions(p.observations()))
        if (pushforward(p, f) == target) out.push_back(std::move(f));
    return out;
}

RewardDemoReport reward_homogeneity_demo() {
    const Rational half(1, 2);
    const RewardedProbVector paired({{half, 0}, {0, half}});
    const RewardedProbVector mirrored({{0, half}, {half, 0}});
    const auto f_n = NoiseFunction::identity(2);
    const NoiseFunction swap({1, 0});

    RewardDemoReport r;
    r.observation_only_count = enumerate_homogeneous(paired.observation_marginal(), f_n).size();
    r.with_reward_count = enumerate_homogeneous(paired, f_n).size();
    r.swap_homogeneous_without_rewards = is_homogeneous(paired.observation_marginal(), swap, f_n);
    r.swap_homogeneous_with_rewards = is_homogeneous(paired, swap, f_n);
    r.mirrored_observation_only_count = enumerate_homogeneous(mirrored.observation_marginal(), f_n).size();
    r.mirrored_with_reward_count = enumerate_homogeneous(mirrored, f_n).size();
    return r;
}

// ------------------------------------------------------------------- grid

std::vector<ProbVector> rational_grid(std::size_t n, std::int64_t denominator) {
    std::vector<ProbVector> out;
    if (n == 0 || static_cast<std::int64_t>(n) > denominator) return out;
    std::vector<std::int64_t> parts(n, 1);
    // Enumerate compositions of `denominator` into n positive parts, lexicographically.
    auto recurse = [&](auto&& self, std::size_t i, std::int64_t remaining) -> void {
        if (i + 1 == n) {
            parts[i] = remaining;
            std::vector<Rational> r;
            for (auto k : parts) r.emplace_back(k, denominator);
            out.push_back(ProbVector::from_ratios(std::move(r)));
            return;
        }
        const auto left = static_cast<std::int64_t>(n - i - 1);
        for (std::int64_t k = 1; k <= remaining - left; ++k) {
            parts[i] = k;
            self(self, i + 1, remaining - k);
        }
    };
    recurse(recurse, 0, denominator);
    return out;
}

}  // namespace scma::exact
