#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cal3/config.hpp"
#include "cal3/tensor.hpp"

namespace cal3 {

// Single-file checkpoint container: magic "CAL3", a u32 format version, a
// length-prefixed JSON header (phase, step, config, vocabulary, tensor
// directory), then raw little-endian f32 tensor payloads in directory order.
// Serialization is canonical, so save -> load -> save is byte-identical.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::string phase = "align";  // "align" or "pretrain"
    std::int64_t step = 0;
    TrainConfig config;
    std::vector<std::string> vocab_words;
    std::vector<std::pair<std::string, Tensor>> tensors;  // directory order

    std::vector<std::uint8_t> to_bytes() const;
    static Checkpoint from_bytes(const std::vector<std::uint8_t>& bytes);

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    const Tensor* find(const std::string& name) const;
};

}  // namespace cal3
