#include "scma/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace scma {

// ---------------------------------------------------------------- ParamSet

Tensor& ParamSet::add(std::string name, Tensor t) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    t.set_requires_grad(!frozen_);
    entries_.emplace_back(std::move(name), std::move(t));
    return entries_.back().second;
}

const Tensor& ParamSet::get(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return t;
    throw std::out_of_range("no parameter named " + name);
}

Tensor& ParamSet::get(const std::string& name) {
    for (auto& [n, t] : entries_)
        if (n == name) return t;
    throw std::out_of_range("no parameter named " + name);
}

bool ParamSet::contains(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return true;
    return false;
}

std::size_t ParamSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
}

std::vector<Tensor> ParamSet::tensors() const {
    std::vector<Tensor> out;
    for (const auto& [n, t] : entries_) out.push_back(t);
    return out;
}

void ParamSet::freeze() {
    frozen_ = true;
    for (auto& [n, t] : entries_) t.set_requires_grad(false);
}

void ParamSet::unfreeze() {
    frozen_ = false;
    for (auto& [n, t] : entries_) t.set_requires_grad(true);
}

void ParamSet::zero_grad() {
    for (auto& [n, t] : entries_) t.zero_grad();
}

std::uint64_t ParamSet::checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t len) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, t] : entries_) {
        mix(name.data(), name.size());
        for (auto d : t.shape()) {
            const std::uint64_t d64 = d;
            mix(&d64, sizeof d64);
        }
        mix(t.data().data(), t.size() * sizeof(double));
    }
    return h;
}

void ParamSet::load_values(const ParamSet& other) {
    for (auto& [name, t] : entries_) {
        const Tensor& src = other.get(name);
        if (src.shape() != t.shape())
            throw ShapeError("parameter " + name + ": checkpoint shape " + to_string(src.shape()) +
                             " vs model shape " + to_string(t.shape()));
        auto dst = t.mutable_data();
        std::copy(src.data().begin(), src.data().end(), dst.begin());
    }
}

// ------------------------------------------------------------------ layers

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

}  // namespace

Linear Linear::create(ParamSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    params.add(name + ".weight", uniform_tensor({in, out}, bound, rng));
    params.add(name + ".bias", uniform_tensor({out}, bound, rng));
    return bind(params, name);
}

Linear Linear::bind(ParamSet& params, const std::string& name) {
    return Linear{params.get(name + ".weight"), params.get(name + ".bias")};
}

Conv2d Conv2d::create(ParamSet& params, const std::string& name, std::size_t in, std::size_t out,
                      std::size_t kernel, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    params.add(name + ".weight", uniform_tensor({out, in, kernel, kernel}, bound, rng));
    params.add(name + ".bias", uniform_tensor({out}, bound, rng));
    return bind(params, name);
}

Conv2d Conv2d::bind(ParamSet& params, const std::string& name) {
    Conv2d c{params.get(name + ".weight"), params.get(name + ".bias"), 0};
    c.padding = c.weight.dim(2) / 2;
    return c;
}

// -------------------------------------------------------------------- Adam

Adam::Adam(std::vector<ParamSet*> groups, AdamConfig config) : groups_(std::move(groups)), config_(config) {
    for (auto* g : groups_)
        for (const auto& [name, t] : g->entries()) {
            m_.emplace_back(t.size(), 0.0);
            v_.emplace_back(t.size(), 0.0);
        }
}

double Adam::step() {
    for (auto* g : groups_)
        if (g->frozen()) throw FrozenParamsError("optimizer step on a frozen parameter set");
    double sq = 0.0;
    for (auto* g : groups_)
        for (const auto& [name, t] : g->entries())
            for (double v : t.grad()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NonFiniteError("adam: non-finite gradient norm");
    const double clip = (config_.grad_clip_norm > 0.0 && norm > config_.grad_clip_norm)
                            ? config_.grad_clip_norm / norm
                            : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto* g : groups_) {
        for (const auto& entry : g->entries()) {
            Tensor t = entry.second;  // shares the parameter's storage
            auto& m = m_[k];
            auto& v = v_[k];
            ++k;
            if (!t.has_grad()) continue;
            auto grad = t.grad();
            auto data = t.mutable_data();
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double gi = grad[i] * clip;
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
                data[i] -= config_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.epsilon);
            }
            t.zero_grad();
        }
    }
    return norm;
}

// ------------------------------------------------------------- checkpoints

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;

    bool done() const { return pos == bytes.size(); }
    void need(std::size_t n) const {
        if (bytes.size() - pos < n) throw CheckpointError("truncated checkpoint");
    }
    std::uint64_t uint(int width) {
        need(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * i);
        return v;
    }
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params) {
    std::vector<std::uint8_t> out{'S', 'C', 'M', 'A'};
    put_u32(out, kCheckpointVersion);
    for (const auto& [name, t] : params.entries()) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put_u64(out, d);
        for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

ParamSet decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "SCMA", 4) != 0)
        throw CheckpointError("missing SCMA magic");
    Reader r{bytes, 4};
    const auto version = r.uint(4);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    ParamSet params;
    while (!r.done()) {
        const auto len = static_cast<std::size_t>(r.uint(4));
        r.need(len);
        std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + len));
        r.pos += len;
        const auto rank = r.uint(4);
        if (rank == 0 || rank > 8) throw CheckpointError("bad rank for " + name);
        Shape shape;
        for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.uint(8)));
        const auto n = numel(shape);
        r.need(n * 8);
        std::vector<double> values(n);
        for (auto& v : values) v = std::bit_cast<double>(r.uint(8));
        params.add(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    return params;
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
    const auto bytes = encode_checkpoint(params);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint not found: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace scma
