#include "cal3/config.hpp"

#include "cal3/errors.hpp"

namespace cal3 {

void require_known_keys(const ordered_json& j, const std::vector<std::string>& allowed,
                        const std::string& context) {
    if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const auto& k : allowed)
            if (it.key() == k) known = true;
        if (!known) throw ConfigError(context + ": unknown key '" + it.key() + "'");
    }
}

namespace {

template <typename T>
void read(const ordered_json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

ordered_json augment_to_json(const AugmentConfig& a) {
    ordered_json j;
    j["p_rotate"] = a.p_rotate;
    j["p_scale"] = a.p_scale;
    j["p_noise"] = a.p_noise;
    j["p_flip"] = a.p_flip;
    j["scale_lo"] = a.scale_lo;
    j["scale_hi"] = a.scale_hi;
    j["noise_sigma_max"] = a.noise_sigma_max;
    j["full_geometric"] = a.full_geometric;
    return j;
}

AugmentConfig augment_from_json(const ordered_json& j) {
    require_known_keys(j,
                       {"p_rotate", "p_scale", "p_noise", "p_flip", "scale_lo", "scale_hi",
                        "noise_sigma_max", "full_geometric"},
                       "augment");
    AugmentConfig a;
    read(j, "p_rotate", a.p_rotate);
    read(j, "p_scale", a.p_scale);
    read(j, "p_noise", a.p_noise);
    read(j, "p_flip", a.p_flip);
    read(j, "scale_lo", a.scale_lo);
    read(j, "scale_hi", a.scale_hi);
    read(j, "noise_sigma_max", a.noise_sigma_max);
    read(j, "full_geometric", a.full_geometric);
    return a;
}

}  // namespace

ordered_json TrainConfig::to_json() const {
    ordered_json j;
    j["steps"] = steps;
    j["warmup_steps"] = warmup_steps;
    j["lr_vision"] = lr_vision;
    j["lr_text"] = lr_text;
    j["batch_size"] = batch_size;
    j["accum_freq"] = accum_freq;
    j["tau0"] = tau0;
    j["embed_dim"] = embed_dim;
    j["weight_decay"] = weight_decay;
    j["seed"] = seed;
    j["patch_size"] = patch_size;
    j["max_tokens"] = max_tokens;
    j["text_width"] = text_width;
    j["image_channels"] = image_channels;
    j["temperature_learnable"] = temperature_learnable;
    j["checkpoint_every"] = checkpoint_every;
    j["mask_ratio"] = mask_ratio;
    j["mask_block"] = mask_block;
    j["augment"] = augment_to_json(augment);
    return j;
}

TrainConfig TrainConfig::from_json(const ordered_json& j) { return from_json(j, TrainConfig()); }

TrainConfig TrainConfig::from_json(const ordered_json& j, const TrainConfig& base) {
    require_known_keys(j,
                       {"steps", "warmup_steps", "lr_vision", "lr_text", "batch_size", "accum_freq",
                        "tau0", "embed_dim", "weight_decay", "seed", "patch_size", "max_tokens",
                        "text_width", "image_channels", "temperature_learnable", "checkpoint_every",
                        "mask_ratio", "mask_block", "augment"},
                       "train");
    TrainConfig c = base;
    read(j, "steps", c.steps);
    read(j, "warmup_steps", c.warmup_steps);
    read(j, "lr_vision", c.lr_vision);
    read(j, "lr_text", c.lr_text);
    read(j, "batch_size", c.batch_size);
    read(j, "accum_freq", c.accum_freq);
    read(j, "tau0", c.tau0);
    read(j, "embed_dim", c.embed_dim);
    read(j, "weight_decay", c.weight_decay);
    read(j, "seed", c.seed);
    read(j, "patch_size", c.patch_size);
    read(j, "max_tokens", c.max_tokens);
    read(j, "text_width", c.text_width);
    read(j, "image_channels", c.image_channels);
    read(j, "temperature_learnable", c.temperature_learnable);
    read(j, "checkpoint_every", c.checkpoint_every);
    read(j, "mask_ratio", c.mask_ratio);
    read(j, "mask_block", c.mask_block);
    if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (steps > 0 && (warmup_steps < 0 || warmup_steps >= steps))
        throw ConfigError("train: need 0 <= warmup_steps < steps");
    if (batch_size < 1 || accum_freq < 1) throw ConfigError("train: batch_size and accum_freq must be >= 1");
    if (batch_size * accum_freq < 2)
        throw ConfigError("train: effective batch B*N must be >= 2, the loss needs a negative pair");
    if (tau0 <= 0) throw ConfigError("train: tau0 must be positive");
    if (embed_dim < 1 || patch_size < 1 || text_width < 1 || max_tokens < 1)
        throw ConfigError("train: dimensions must be positive");
    if (image_channels.empty()) throw ConfigError("train: image_channels must not be empty");
    int s = patch_size;
    for (std::size_t i = 0; i < image_channels.size(); ++i) s = (s - 1) / 2 + 1;
    if (s < 1) throw ConfigError("train: patch_size too small for the conv stage count");
    if (mask_ratio < 0.0 || mask_ratio > 1.0) throw ConfigError("train: mask_ratio must be in [0, 1]");
    if (mask_block < 1 || patch_size % mask_block != 0)
        throw ConfigError("train: mask_block must divide patch_size");
}

ordered_json DataConfig::to_json() const {
    ordered_json j;
    j["cases"] = cases;
    j["volume_size"] = gen.volume_size;
    j["min_lesions"] = gen.min_lesions;
    j["max_lesions"] = gen.max_lesions;
    j["intensity_lo"] = gen.intensity_lo;
    j["intensity_hi"] = gen.intensity_hi;
    j["repeat_region_prob"] = gen.repeat_region_prob;
    j["background_cosines"] = gen.background_cosines;
    j["background_amplitude"] = gen.background_amplitude;
    j["background_noise_sigma"] = gen.background_noise_sigma;
    j["background_freq_lo"] = gen.background_freq_lo;
    j["background_freq_hi"] = gen.background_freq_hi;
    j["background_wave_seed"] = gen.background_wave_seed;
    j["age_lo"] = gen.age_lo;
    j["age_hi"] = gen.age_hi;
    return j;
}

DataConfig DataConfig::from_json(const ordered_json& j) {
    require_known_keys(j,
                       {"cases", "volume_size", "min_lesions", "max_lesions", "intensity_lo",
                        "intensity_hi", "repeat_region_prob", "background_cosines",
                        "background_amplitude", "background_noise_sigma", "background_freq_lo",
                        "background_freq_hi", "background_wave_seed", "age_lo", "age_hi"},
                       "data");
    DataConfig c;
    read(j, "cases", c.cases);
    read(j, "volume_size", c.gen.volume_size);
    read(j, "min_lesions", c.gen.min_lesions);
    read(j, "max_lesions", c.gen.max_lesions);
    read(j, "intensity_lo", c.gen.intensity_lo);
    read(j, "intensity_hi", c.gen.intensity_hi);
    read(j, "repeat_region_prob", c.gen.repeat_region_prob);
    read(j, "background_cosines", c.gen.background_cosines);
    read(j, "background_amplitude", c.gen.background_amplitude);
    read(j, "background_noise_sigma", c.gen.background_noise_sigma);
    read(j, "background_freq_lo", c.gen.background_freq_lo);
    read(j, "background_freq_hi", c.gen.background_freq_hi);
    read(j, "background_wave_seed", c.gen.background_wave_seed);
    read(j, "age_lo", c.gen.age_lo);
    read(j, "age_hi", c.gen.age_hi);
    if (c.cases < 5) throw ConfigError("data: need at least 5 cases for the 80/20 split");
    if (c.gen.volume_size < 8) throw ConfigError("data: volume_size must be >= 8");
    if (c.gen.min_lesions < 0 || c.gen.max_lesions < c.gen.min_lesions)
        throw ConfigError("data: bad lesion count range");
    return c;
}

ordered_json EvalConfig::to_json() const {
    ordered_json j;
    j["seeds"] = seeds;
    j["baseline_repeats"] = baseline_repeats;
    j["export_embeddings"] = export_embeddings;
    return j;
}

EvalConfig EvalConfig::from_json(const ordered_json& j) {
    require_known_keys(j, {"seeds", "baseline_repeats", "export_embeddings"}, "eval");
    EvalConfig c;
    read(j, "seeds", c.seeds);
    read(j, "baseline_repeats", c.baseline_repeats);
    read(j, "export_embeddings", c.export_embeddings);
    if (c.seeds < 1) throw ConfigError("eval: seeds must be >= 1");
    if (c.baseline_repeats < 1) throw ConfigError("eval: baseline_repeats must be >= 1");
    return c;
}

}  // namespace cal3
