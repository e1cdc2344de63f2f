#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "scma/tensor.hpp"

namespace scma {

using Rng = std::mt19937_64;

/// Ordered, named collection of trainable tensors.
class ParamSet {
   public:
    Tensor& add(std::string name, Tensor t);
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    bool contains(const std::string& name) const;

    std::size_t size() const { return entries_.size(); }
    std::size_t parameter_count() const;
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::vector<Tensor> tensors() const;

    /// A frozen set refuses optimizer steps and stops requesting gradients.
    void freeze();
    void unfreeze();
    bool frozen() const { return frozen_; }

    void zero_grad();
    /// FNV-1a over names, shapes and raw value bytes.
    std::uint64_t checksum() const;

    /// Copies values from `other` by name; shapes must match.
    void load_values(const ParamSet& other);

   private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    bool frozen_ = false;
};

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]

    static Linear create(ParamSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
    static Linear bind(ParamSet& params, const std::string& name);
    Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

struct Conv2d {
    Tensor weight;  // [out, in, k, k]
    Tensor bias;    // [out]
    std::size_t padding = 0;

    static Conv2d create(ParamSet& params, const std::string& name, std::size_t in, std::size_t out,
                         std::size_t kernel, Rng& rng);
    static Conv2d bind(ParamSet& params, const std::string& name);
    Tensor operator()(const Tensor& x) const { return add_bias(conv2d(x, weight, padding), bias); }
};

class FrozenParamsError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;
    double grad_clip_norm = 100.0;  // <= 0 disables clipping
};

/// Adam over one or more parameter sets. `step` applies the update and then
/// zeroes every gradient it consumed.
class Adam {
   public:
    Adam(std::vector<ParamSet*> groups, AdamConfig config);

    /// Returns the global gradient norm before clipping.
    double step();
    std::size_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return config_; }

   private:
    std::vector<ParamSet*> groups_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// ------------------------------------------------------------- checkpoints
//
// Layout (little-endian):
//   "SCMA" | u32 version
//   repeated: u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 values[prod(dims)]

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params);
ParamSet decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace scma
