#include "cal3/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "cal3/errors.hpp"
#include "cal3/rng.hpp"

namespace cal3 {

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kTrainStream = 0x7217;
constexpr std::uint64_t kPretrainStream = 0x3A37;
constexpr double kPi = 3.14159265358979323846;

}  // namespace

double lr_schedule(std::int64_t step, const TrainConfig& config, Tower tower) {
    double base = tower == Tower::vision ? config.lr_vision : config.lr_text;
    if (config.warmup_steps > 0 && step < config.warmup_steps)
        return base * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
    double span = static_cast<double>(config.steps - config.warmup_steps);
    if (span <= 0) return base;
    double progress = static_cast<double>(step - config.warmup_steps) / span;
    return base * 0.5 * (1.0 + std::cos(kPi * progress));
}

void adamw_step(const std::string& name, Tensor& param, std::vector<float>& m, std::vector<float>& v,
                std::int64_t t, double lr, double weight_decay, double beta1, double beta2, double eps) {
    auto& theta = param.mutable_data();
    if (m.empty()) m.assign(theta.size(), 0.0f);
    if (v.empty()) v.assign(theta.size(), 0.0f);
    const float* grad = nullptr;
    if (param.has_grad()) {
        grad = param.grad().data();
        for (std::size_t i = 0; i < theta.size(); ++i)
            if (!std::isfinite(grad[i]))
                throw DivergedError("adamw_step: non-finite gradient in parameter '" + name + "'");
    }

    const float b1 = static_cast<float>(beta1), b2 = static_cast<float>(beta2);
    const float bc1 = static_cast<float>(1.0 - std::pow(beta1, static_cast<double>(t)));
    const float bc2 = static_cast<float>(1.0 - std::pow(beta2, static_cast<double>(t)));
    const float flr = static_cast<float>(lr);
    const float decay = static_cast<float>(lr * weight_decay);
    const float feps = static_cast<float>(eps);

    for (std::size_t i = 0; i < theta.size(); ++i) {
        float g = grad ? grad[i] : 0.0f;
        m[i] = b1 * m[i] + (1.0f - b1) * g;
        v[i] = b2 * v[i] + (1.0f - b2) * g * g;
        float m_hat = m[i] / bc1;
        float v_hat = v[i] / bc2;
        theta[i] -= decay * theta[i];  // decoupled decay
        theta[i] -= flr * m_hat / (std::sqrt(v_hat) + feps);
    }
}

std::vector<std::pair<std::string, Tensor>> ModelState::named_params() const {
    auto out = image.named_tensors("image");
    auto txt = text.named_tensors("text");
    out.insert(out.end(), txt.begin(), txt.end());
    out.emplace_back("temperature.log_scale", temperature.log_scale);
    return out;
}

void ModelState::zero_grads() {
    for (auto& [name, t] : named_params()) t.zero_grad();
}

Vocabulary build_training_vocab() {
    auto corpus = template_closure_corpus();
    for (Region r : all_regions()) corpus.push_back(region_prompt(r));
    return build_vocab(corpus);
}

ModelState init_model(const TrainConfig& config) {
    ModelState model;
    model.config = config;
    model.vocab = build_training_vocab();

    ImageEncoderConfig img_cfg{config.patch_size, config.image_channels, config.embed_dim};
    TextEncoderConfig txt_cfg{model.vocab.total_ids(), config.text_width, config.embed_dim};

    Rng rng(mix_seed(config.seed, kInitStream));
    model.image = init_image_encoder<float>(rng, img_cfg);
    model.text = init_text_encoder<float>(rng, txt_cfg);
    model.temperature = TemperatureT<float>::init(static_cast<float>(config.tau0));
    return model;
}

namespace {

void copy_named_into(ModelState& model, const Checkpoint& ckpt, const std::string& prefix,
                     bool require_all) {
    for (auto& [name, t] : model.named_params()) {
        if (name.rfind(prefix, 0) != 0) continue;
        const Tensor* src = ckpt.find(name);
        if (!src) {
            if (require_all) throw LoadError("checkpoint is missing tensor '" + name + "'");
            continue;
        }
        if (src->shape() != t.shape())
            throw LoadError("checkpoint tensor '" + name + "' has shape " + shape_str(src->shape()) +
                            ", expected " + shape_str(t.shape()));
        t.mutable_data() = src->data();
    }
}

}  // namespace

ModelState model_from_checkpoint(const Checkpoint& ckpt) {
    ModelState model;
    model.config = ckpt.config;
    model.vocab = Vocabulary(ckpt.vocab_words);

    ImageEncoderConfig img_cfg{ckpt.config.patch_size, ckpt.config.image_channels, ckpt.config.embed_dim};
    TextEncoderConfig txt_cfg{model.vocab.total_ids(), ckpt.config.text_width, ckpt.config.embed_dim};
    Rng rng(mix_seed(ckpt.config.seed, kInitStream));
    model.image = init_image_encoder<float>(rng, img_cfg);
    model.text = init_text_encoder<float>(rng, txt_cfg);
    model.temperature = TemperatureT<float>::init(static_cast<float>(ckpt.config.tau0));

    copy_named_into(model, ckpt, "image", true);
    if (ckpt.phase == "align") {
        copy_named_into(model, ckpt, "text", true);
        copy_named_into(model, ckpt, "temperature", true);
    }
    return model;
}

namespace {

struct StepBatches {
    // [accum_freq][batch_size]
    std::vector<std::vector<Tensor>> patches;
    std::vector<std::vector<TokenSequence>> tokens;
};

std::vector<Volume> preprocess_all(const Dataset& dataset) {
    std::vector<Volume> out;
    out.reserve(dataset.cases.size());
    for (const auto& c : dataset.cases) out.push_back(preprocess(c.volume));
    return out;
}

StepBatches draw_step_batches(const ModelState& model, const Dataset& dataset,
                              const std::vector<Volume>& prep, std::int64_t step) {
    const TrainConfig& cfg = model.config;
    if (dataset.train_indices.empty()) throw ContractError("train: dataset has no training split");

    Rng rng(mix_seed(mix_seed(cfg.seed, kTrainStream), static_cast<std::uint64_t>(step)));

    // Each step draws its N*B cases without replacement (cycling the split
    // only when the effective batch exceeds it): duplicated cases inside one
    // effective batch would pair identical sentences as mutual negatives.
    const std::size_t need = static_cast<std::size_t>(cfg.accum_freq) * static_cast<std::size_t>(cfg.batch_size);
    std::vector<int> pool;
    pool.reserve(((need / dataset.train_indices.size()) + 1) * dataset.train_indices.size());
    while (pool.size() < need)
        pool.insert(pool.end(), dataset.train_indices.begin(), dataset.train_indices.end());
    for (std::size_t i = pool.size() - 1; i > 0; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i + 1));
        std::swap(pool[i], pool[j]);
    }

    StepBatches out;
    out.patches.resize(static_cast<std::size_t>(cfg.accum_freq));
    out.tokens.resize(static_cast<std::size_t>(cfg.accum_freq));
    std::size_t draw = 0;
    for (int j = 0; j < cfg.accum_freq; ++j) {
        for (int b = 0; b < cfg.batch_size; ++b) {
            int idx = pool[draw++];
            const auto& record = dataset.cases[static_cast<std::size_t>(idx)].record;
            auto augmented = augment(prep[static_cast<std::size_t>(idx)], record.lesions, rng, cfg.augment);
            out.patches[static_cast<std::size_t>(j)].push_back(
                extract_patch(augmented.volume, cfg.patch_size, &rng));
            TabularRecord aug_record{record.age_at_diagnosis, record.gender, augmented.lesions};
            out.tokens[static_cast<std::size_t>(j)].push_back(
                tokenize(record_to_sentence(aug_record), model.vocab, cfg.max_tokens));
        }
    }
    return out;
}

double run_accumulated_step(ModelState& model, const StepBatches& batches) {
    auto res = accumulated_step<float>(
        model.config.accum_freq,
        [&](int j) { return encode_image_batch(batches.patches[static_cast<std::size_t>(j)], model.image); },
        [&](int j) { return encode_text_batch(batches.tokens[static_cast<std::size_t>(j)], model.text); },
        model.temperature);
    return static_cast<double>(res.loss);
}

struct Moments {
    std::vector<std::string> names;
    std::vector<std::vector<float>> m, v;

    void init(const std::vector<std::pair<std::string, Tensor>>& params) {
        for (const auto& [name, t] : params) {
            names.push_back(name);
            m.emplace_back();
            v.emplace_back();
        }
    }
    void load_from(const Checkpoint& ckpt) {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (const Tensor* tm = ckpt.find("opt.m." + names[i])) m[i] = tm->data();
            if (const Tensor* tv = ckpt.find("opt.v." + names[i])) v[i] = tv->data();
        }
    }
};

Checkpoint make_checkpoint(const ModelState& model, std::int64_t step, const Moments& moments,
                           const std::string& phase) {
    Checkpoint ckpt;
    ckpt.phase = phase;
    ckpt.step = step;
    ckpt.config = model.config;
    ckpt.vocab_words = model.vocab.words();
    auto params = model.named_params();
    for (const auto& [name, t] : params) ckpt.tensors.emplace_back(name, t.detach());
    for (std::size_t i = 0; i < moments.names.size(); ++i) {
        if (moments.m[i].empty()) continue;
        const Tensor& p = params[i].second;
        ckpt.tensors.emplace_back("opt.m." + moments.names[i], Tensor::from_data(p.shape(), moments.m[i]));
        ckpt.tensors.emplace_back("opt.v." + moments.names[i], Tensor::from_data(p.shape(), moments.v[i]));
    }
    return ckpt;
}

void dump_diverged(const ModelState& model, std::int64_t step, const Moments& moments,
                   const std::string& checkpoint_path) {
    if (checkpoint_path.empty()) return;
    make_checkpoint(model, step, moments, "align").save(checkpoint_path + ".diverged");
}

}  // namespace

double compute_step_gradients(ModelState& model, const Dataset& dataset, std::int64_t step) {
    auto prep = preprocess_all(dataset);
    auto batches = draw_step_batches(model, dataset, prep, step);
    model.zero_grads();
    return run_accumulated_step(model, batches);
}

TrainResult train(const TrainConfig& config, const Dataset& dataset, const TrainOptions& options) {
    config.validate();
    if (config.patch_size > (dataset.cases.empty() ? config.patch_size : dataset.cases[0].volume.size))
        throw ContractError("train: patch_size exceeds dataset volume size");

    ModelState model;
    std::int64_t start_step = 0;
    if (options.resume_from) {
        const Checkpoint& ckpt = *options.resume_from;
        if (ckpt.phase != "align") throw LoadError("resume: checkpoint phase is '" + ckpt.phase + "'");
        if (!(ckpt.config == config)) throw LoadError("resume: checkpoint config differs from the run config");
        model = model_from_checkpoint(ckpt);
        start_step = ckpt.step;
    } else {
        model = init_model(config);
        if (options.init_image_from) {
            const Checkpoint& ckpt = *options.init_image_from;
            if (ckpt.config.patch_size != config.patch_size ||
                ckpt.config.image_channels != config.image_channels ||
                ckpt.config.embed_dim != config.embed_dim)
                throw LoadError("init-image-encoder: image tower configuration mismatch");
            copy_named_into(model, ckpt, "image", true);
        }
    }

    auto params = model.named_params();
    Moments moments;
    moments.init(params);
    if (options.resume_from) moments.load_from(*options.resume_from);

    auto prep = preprocess_all(dataset);
    std::int64_t end_step = config.steps;
    if (options.stop_after_steps > 0) end_step = std::min(end_step, options.stop_after_steps);

    TrainResult result;
    for (std::int64_t step = start_step; step < end_step; ++step) {
        auto batches = draw_step_batches(model, dataset, prep, step);
        model.zero_grads();
        double loss;
        try {
            loss = run_accumulated_step(model, batches);
        } catch (const DivergedError&) {
            dump_diverged(model, step, moments, options.checkpoint_path);
            throw;
        }
        if (!std::isfinite(loss)) {
            dump_diverged(model, step, moments, options.checkpoint_path);
            throw DivergedError("train: non-finite loss at step " + std::to_string(step));
        }

        double lr_v = lr_schedule(step, config, Tower::vision);
        double lr_t = lr_schedule(step, config, Tower::text);
        std::int64_t t = step + 1;
        try {
            for (std::size_t i = 0; i < params.size(); ++i) {
                const std::string& name = moments.names[i];
                Tensor& p = params[i].second;
                if (name == "temperature.log_scale") {
                    if (config.temperature_learnable)
                        adamw_step(name, p, moments.m[i], moments.v[i], t, lr_t, 0.0);
                } else if (name.rfind("image", 0) == 0) {
                    adamw_step(name, p, moments.m[i], moments.v[i], t, lr_v, config.weight_decay);
                } else {
                    adamw_step(name, p, moments.m[i], moments.v[i], t, lr_t, config.weight_decay);
                }
            }
        } catch (const DivergedError&) {
            dump_diverged(model, step, moments, options.checkpoint_path);
            throw;
        }
        model.temperature.clamp();

        result.log.push_back({step, loss, static_cast<double>(model.temperature.value()), lr_v, lr_t});
        if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
            !options.checkpoint_path.empty() && step + 1 < end_step)
            make_checkpoint(model, step + 1, moments, "align").save(options.checkpoint_path);
    }

    result.checkpoint = make_checkpoint(model, end_step, moments, "align");
    if (!options.checkpoint_path.empty()) result.checkpoint.save(options.checkpoint_path);
    return result;
}

namespace {

struct MaskedPatch {
    Tensor input;  // masked voxels zeroed
    Tensor target;
    Tensor mask;  // 1 on voxels that enter the loss
    double masked_count = 0;
};

MaskedPatch mask_patch(const Tensor& patch, int block, double ratio, Rng& rng) {
    const int p = patch.dim(1);
    const int nb = p / block;
    const int total = nb * nb * nb;
    int n_masked = static_cast<int>(std::llround(ratio * total));

    std::vector<int> order(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = total - 1; i > 0; --i) {
        int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    std::vector<float> masked = patch.data();
    // a 0% ratio degenerates to plain full reconstruction
    std::vector<float> mask(masked.size(), n_masked == 0 ? 1.0f : 0.0f);
    for (int k = 0; k < n_masked; ++k) {
        int b = order[static_cast<std::size_t>(k)];
        int bz = b / (nb * nb), by = (b / nb) % nb, bx = b % nb;
        for (int z = bz * block; z < (bz + 1) * block; ++z)
            for (int y = by * block; y < (by + 1) * block; ++y)
                for (int x = bx * block; x < (bx + 1) * block; ++x) {
                    std::size_t idx = (static_cast<std::size_t>(z) * p + y) * p + x;
                    masked[idx] = 0.0f;
                    mask[idx] = 1.0f;
                }
    }

    MaskedPatch out;
    out.masked_count = n_masked == 0 ? static_cast<double>(mask.size())
                                     : static_cast<double>(n_masked) * block * block * block;
    out.input = Tensor::from_data(patch.shape(), std::move(masked));
    out.target = patch;
    out.mask = Tensor::from_data(patch.shape(), std::move(mask));
    return out;
}

}  // namespace

TrainResult pretrain_mae(const TrainConfig& config, const Dataset& dataset, const TrainOptions& options) {
    config.validate();
    if (dataset.train_indices.empty()) throw ContractError("pretrain: dataset has no training split");

    ModelState model;
    model.config = config;
    model.vocab = build_training_vocab();
    ImageEncoderConfig img_cfg{config.patch_size, config.image_channels, config.embed_dim};
    Rng init_rng(mix_seed(config.seed, kInitStream));
    model.image = init_image_encoder<float>(init_rng, img_cfg);
    model.text = init_text_encoder<float>(init_rng, {model.vocab.total_ids(), config.text_width,
                                                     config.embed_dim});
    model.temperature = TemperatureT<float>::init(static_cast<float>(config.tau0));

    Rng dec_rng(mix_seed(config.seed, kPretrainStream));
    auto decoder = init_mae_decoder<float>(dec_rng, img_cfg);

    // only the conv trunk and the decoder learn; the projection head is
    // untouched by the reconstruction path
    std::vector<std::pair<std::string, Tensor>> params;
    for (std::size_t i = 0; i < model.image.stages.size(); ++i) {
        params.emplace_back("image.stage" + std::to_string(i) + ".weight", model.image.stages[i].weight);
        params.emplace_back("image.stage" + std::to_string(i) + ".bias", model.image.stages[i].bias);
    }
    auto dec_named = decoder.named_tensors("mae");
    params.insert(params.end(), dec_named.begin(), dec_named.end());

    Moments moments;
    moments.init(params);
    auto prep = preprocess_all(dataset);

    TrainResult result;
    for (std::int64_t step = 0; step < config.steps; ++step) {
        Rng rng(mix_seed(mix_seed(config.seed, kPretrainStream), static_cast<std::uint64_t>(step)));

        std::vector<TensorT<float>> losses;
        for (int b = 0; b < config.batch_size; ++b) {
            int idx = dataset.train_indices[static_cast<std::size_t>(rng.below(dataset.train_indices.size()))];
            auto patch = extract_patch(prep[static_cast<std::size_t>(idx)], config.patch_size, &rng);
            auto mp = mask_patch(patch, config.mask_block, config.mask_ratio, rng);
            auto rec = decode_mae(image_trunk(mp.input, model.image), decoder);
            auto diff = mul(sub(rec, mp.target), mp.mask);
            losses.push_back(scale(sum(mul(diff, diff)), static_cast<float>(1.0 / mp.masked_count)));
        }
        TensorT<float> total = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
        auto loss_t = scale(total, 1.0f / static_cast<float>(config.batch_size));

        for (auto& [name, t] : params) t.zero_grad();
        loss_t.backward();
        double loss = static_cast<double>(loss_t.item());
        if (!std::isfinite(loss)) throw DivergedError("pretrain: non-finite loss at step " + std::to_string(step));

        double lr = lr_schedule(step, config, Tower::vision);
        for (std::size_t i = 0; i < params.size(); ++i)
            adamw_step(moments.names[i], params[i].second, moments.m[i], moments.v[i], step + 1, lr,
                       config.weight_decay);

        result.log.push_back({step, loss, 0.0, lr, 0.0});
    }

    result.checkpoint.phase = "pretrain";
    result.checkpoint.step = config.steps;
    result.checkpoint.config = config;
    result.checkpoint.vocab_words = model.vocab.words();
    for (const auto& [name, t] : model.image.named_tensors("image"))
        result.checkpoint.tensors.emplace_back(name, t.detach());
    if (!options.checkpoint_path.empty()) result.checkpoint.save(options.checkpoint_path);
    return result;
}

std::string metrics_csv(const std::vector<StepLog>& log) {
    std::ostringstream os;
    os << "step,loss,temperature,lr_vision,lr_text\n";
    char buf[160];
    for (std::size_t i = 0; i < log.size(); ++i) {
        if (log[i].step % 10 != 0 && i + 1 != log.size()) continue;
        std::snprintf(buf, sizeof(buf), "%lld,%.8g,%.8g,%.8g,%.8g\n",
                      static_cast<long long>(log[i].step), log[i].loss, log[i].temperature,
                      log[i].lr_vision, log[i].lr_text);
        os << buf;
    }
    return os.str();
}

}  // namespace cal3
