#pragma once

// Versioned binary checkpoint:
//   magic "ORBSEGCK", u32 version, u64 config fingerprint, model config,
//   metadata, network tensors, optional discriminator tensors, optimizer
//   moments, then a u64 FNV-1a checksum of every preceding byte.
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "orbitseg/model.hpp"
#include "orbitseg/optimizer.hpp"

namespace orbitseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

struct OptimizerState {
    std::string label;
    std::uint64_t steps = 0;
    std::vector<NamedTensor> m, v;

    static OptimizerState capture(const std::string& label, const Adam<float>& opt);
    // Matches moments to slots by name; throws ConfigMismatchError on a mismatch.
    void restore(Adam<float>& opt) const;
};

struct Checkpoint {
    ModelConfig model;
    SeqUnet<float> net;
    std::optional<Discriminator<float>> disc;
    std::vector<OptimizerState> optimizers;
    std::string method;  // pretrain, adapt, finetune, scratch
    int epoch = 0;
    double loss = 0.0;

    Checkpoint() = default;
    Checkpoint(const ModelConfig& cfg, std::uint64_t seed) : model(cfg), net(cfg, seed) {}
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

// With `expected` set, a checkpoint built for a different architecture is
// rejected with ConfigMismatchError.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace orbitseg
