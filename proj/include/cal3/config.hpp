#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cal3/synthdata.hpp"

namespace cal3 {

using ordered_json = nlohmann::ordered_json;

// All hyperparameters of one training run. Every field is serialized into
// each checkpoint so runs are reproducible from the artifact alone.
struct TrainConfig {
    std::int64_t steps = 2000;
    std::int64_t warmup_steps = 100;
    double lr_vision = 1e-3;
    double lr_text = 1e-4;  // vision tower runs an order of magnitude hotter
    int batch_size = 8;
    int accum_freq = 8;
    double tau0 = 1.351;
    int embed_dim = 64;
    double weight_decay = 0.01;
    std::uint64_t seed = 7;
    int patch_size = 16;
    int max_tokens = 64;
    int text_width = 32;
    std::vector<int> image_channels = {8, 16, 32};
    bool temperature_learnable = true;
    std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only
    // masked-autoencoder pretraining mode
    double mask_ratio = 0.6;
    int mask_block = 4;
    AugmentConfig augment;

    ordered_json to_json() const;
    static TrainConfig from_json(const ordered_json& j);
    static TrainConfig from_json(const ordered_json& j, const TrainConfig& base);
    void validate() const;

    bool operator==(const TrainConfig& other) const { return to_json() == other.to_json(); }
};

// Synthetic data generation section of the run config.
struct DataConfig {
    int cases = 80;
    GenConfig gen;

    ordered_json to_json() const;
    static DataConfig from_json(const ordered_json& j);
};

struct EvalConfig {
    int seeds = 1;
    int baseline_repeats = 100;
    bool export_embeddings = false;

    ordered_json to_json() const;
    static EvalConfig from_json(const ordered_json& j);
};

// Rejects keys that are not in the allowed set; strict parsing keeps typos
// from silently running a different experiment.
void require_known_keys(const ordered_json& j, const std::vector<std::string>& allowed,
                        const std::string& context);

}  // namespace cal3
