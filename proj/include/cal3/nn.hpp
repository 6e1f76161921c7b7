#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cal3/errors.hpp"
#include "cal3/rng.hpp"
#include "cal3/tensor.hpp"
#include "cal3/text.hpp"

namespace cal3 {

// ---------------------------------------------------------------------------
// Two deterministic encoders that map their modality to unit-norm vectors in
// a shared D-dimensional space: a small strided 3D CNN over cubic patches and
// a token-embedding + masked-mean-pool + MLP over token sequences. There is
// deliberately no dropout and no batch statistics anywhere: forward passes
// must be value-identical across repeated evaluations of the same input.
// ---------------------------------------------------------------------------

struct ImageEncoderConfig {
    int patch_size = 16;
    std::vector<int> channels = {8, 16, 32};
    int embed_dim = 64;
};

struct TextEncoderConfig {
    int vocab_ids = 2;  // total id count including pad/unk
    int width = 32;
    int embed_dim = 64;
};

template <typename T>
struct ConvStageT {
    TensorT<T> weight;  // [out_c, in_c, 3, 3, 3]
    TensorT<T> bias;    // [out_c]
};

template <typename T>
struct ImageEncoderT {
    ImageEncoderConfig config;
    std::vector<ConvStageT<T>> stages;
    TensorT<T> proj_weight;  // [hidden, D]
    TensorT<T> proj_bias;    // [1, D]

    std::vector<std::pair<std::string, TensorT<T>>> named_tensors(const std::string& prefix) const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            out.emplace_back(prefix + ".stage" + std::to_string(i) + ".weight", stages[i].weight);
            out.emplace_back(prefix + ".stage" + std::to_string(i) + ".bias", stages[i].bias);
        }
        out.emplace_back(prefix + ".proj.weight", proj_weight);
        out.emplace_back(prefix + ".proj.bias", proj_bias);
        return out;
    }
};

template <typename T>
struct TextEncoderT {
    TextEncoderConfig config;
    TensorT<T> embedding;  // [V, e]
    TensorT<T> h1_weight, h1_bias;  // [e, e], [1, e]
    TensorT<T> h2_weight, h2_bias;
    TensorT<T> proj_weight, proj_bias;  // [e, D], [1, D]

    std::vector<std::pair<std::string, TensorT<T>>> named_tensors(const std::string& prefix) const {
        return {{prefix + ".embedding", embedding},
                {prefix + ".h1.weight", h1_weight},
                {prefix + ".h1.bias", h1_bias},
                {prefix + ".h2.weight", h2_weight},
                {prefix + ".h2.bias", h2_bias},
                {prefix + ".proj.weight", proj_weight},
                {prefix + ".proj.bias", proj_bias}};
    }
};

// Mirrored transposed-conv decoder used only by masked-autoencoder
// pretraining; discarded afterwards.
template <typename T>
struct MaeDecoderT {
    std::vector<ConvStageT<T>> stages;  // weight [in_c, out_c, 3, 3, 3]

    std::vector<std::pair<std::string, TensorT<T>>> named_tensors(const std::string& prefix) const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            out.emplace_back(prefix + ".stage" + std::to_string(i) + ".weight", stages[i].weight);
            out.emplace_back(prefix + ".stage" + std::to_string(i) + ".bias", stages[i].bias);
        }
        return out;
    }
};

namespace detail {

template <typename T>
TensorT<T> glorot_uniform(Rng& rng, std::vector<int> shape, std::int64_t fan_in, std::int64_t fan_out) {
    double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = static_cast<T>(rng.uniform(-a, a));
    return TensorT<T>::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

}  // namespace detail

// Weights uniform in (-a, a) with a = sqrt(6 / (fan_in + fan_out)), biases
// zero. Draw order is fixed so one seed gives one bit-exact initialization.
template <typename T>
ImageEncoderT<T> init_image_encoder(Rng& rng, const ImageEncoderConfig& config) {
    ImageEncoderT<T> enc;
    enc.config = config;
    int in_c = 1;
    for (int out_c : config.channels) {
        ConvStageT<T> stage;
        stage.weight = detail::glorot_uniform<T>(rng, {out_c, in_c, 3, 3, 3},
                                                 static_cast<std::int64_t>(in_c) * 27,
                                                 static_cast<std::int64_t>(out_c) * 27);
        stage.bias = TensorT<T>::zeros({out_c}, true);
        enc.stages.push_back(stage);
        in_c = out_c;
    }
    enc.proj_weight = detail::glorot_uniform<T>(rng, {in_c, config.embed_dim}, in_c, config.embed_dim);
    enc.proj_bias = TensorT<T>::zeros({1, config.embed_dim}, true);
    return enc;
}

template <typename T>
TextEncoderT<T> init_text_encoder(Rng& rng, const TextEncoderConfig& config) {
    TextEncoderT<T> enc;
    enc.config = config;
    int v = config.vocab_ids, e = config.width, d = config.embed_dim;
    enc.embedding = detail::glorot_uniform<T>(rng, {v, e}, v, e);
    enc.h1_weight = detail::glorot_uniform<T>(rng, {e, e}, e, e);
    enc.h1_bias = TensorT<T>::zeros({1, e}, true);
    enc.h2_weight = detail::glorot_uniform<T>(rng, {e, e}, e, e);
    enc.h2_bias = TensorT<T>::zeros({1, e}, true);
    enc.proj_weight = detail::glorot_uniform<T>(rng, {e, d}, e, d);
    enc.proj_bias = TensorT<T>::zeros({1, d}, true);
    return enc;
}

template <typename T>
MaeDecoderT<T> init_mae_decoder(Rng& rng, const ImageEncoderConfig& config) {
    MaeDecoderT<T> dec;
    std::vector<int> chain = {1};
    chain.insert(chain.end(), config.channels.begin(), config.channels.end());
    // mirror the encoder: e.g. 32 -> 16 -> 8 -> 1
    for (std::size_t i = chain.size() - 1; i >= 1; --i) {
        int in_c = chain[i], out_c = chain[i - 1];
        ConvStageT<T> stage;
        stage.weight = detail::glorot_uniform<T>(rng, {in_c, out_c, 3, 3, 3},
                                                 static_cast<std::int64_t>(in_c) * 27,
                                                 static_cast<std::int64_t>(out_c) * 27);
        stage.bias = TensorT<T>::zeros({out_c}, true);
        dec.stages.push_back(stage);
    }
    return dec;
}

// Convolution trunk only, spatial feature map out; shared by the embedding
// head and the autoencoder path.
template <typename T>
TensorT<T> image_trunk(const TensorT<T>& patch, const ImageEncoderT<T>& enc) {
    int p = enc.config.patch_size;
    if (patch.rank() != 4 || patch.dim(0) != 1 || patch.dim(1) != p || patch.dim(2) != p || patch.dim(3) != p)
        throw DimensionError("encode_image: expected patch [1x" + std::to_string(p) + "x" + std::to_string(p) +
                             "x" + std::to_string(p) + "], got " + shape_str(patch.shape()));
    TensorT<T> x = patch;
    for (const auto& stage : enc.stages) x = relu(conv3d(x, stage.weight, stage.bias));
    return x;
}

// [1, P, P, P] -> unit-norm [1, D]
template <typename T>
TensorT<T> encode_image(const TensorT<T>& patch, const ImageEncoderT<T>& enc) {
    TensorT<T> x = image_trunk(patch, enc);
    int c = x.dim(0);
    int cells = x.dim(1) * x.dim(2) * x.dim(3);
    auto pooled = reshape(mean(reshape(x, {c, cells}), 1), {1, c});
    auto out = add(matmul(pooled, enc.proj_weight), enc.proj_bias);
    return l2_normalize_rows(out);
}

// TokenSequence -> unit-norm [1, D]; padding positions contribute nothing to
// the mean pool. An all-padding sequence pools to the zero vector.
template <typename T>
TensorT<T> encode_text(const TokenSequence& tokens, const TextEncoderT<T>& enc) {
    int e = enc.config.width;
    TensorT<T> pooled;
    if (tokens.length == 0) {
        pooled = TensorT<T>::zeros({1, e});
    } else {
        std::vector<int> ids(tokens.ids.begin(), tokens.ids.begin() + tokens.length);
        auto emb = embedding_lookup(enc.embedding, ids);
        pooled = reshape(scale(sum(emb, 0), T(1) / static_cast<T>(tokens.length)), {1, e});
    }
    auto h1 = relu(add(matmul(pooled, enc.h1_weight), enc.h1_bias));
    auto h2 = relu(add(matmul(h1, enc.h2_weight), enc.h2_bias));
    auto out = add(matmul(h2, enc.proj_weight), enc.proj_bias);
    return l2_normalize_rows(out);
}

// feature map [C, g, g, g] -> reconstruction [1, P, P, P]; relu between
// stages, linear output.
template <typename T>
TensorT<T> decode_mae(const TensorT<T>& features, const MaeDecoderT<T>& dec) {
    TensorT<T> x = features;
    for (std::size_t i = 0; i < dec.stages.size(); ++i) {
        x = conv3d_transpose(x, dec.stages[i].weight, dec.stages[i].bias);
        if (i + 1 < dec.stages.size()) x = relu(x);
    }
    return x;
}

template <typename T>
TensorT<T> encode_image_batch(const std::vector<TensorT<T>>& patches, const ImageEncoderT<T>& enc) {
    std::vector<TensorT<T>> rows;
    rows.reserve(patches.size());
    for (const auto& p : patches) rows.push_back(encode_image(p, enc));
    return concat_rows(rows);
}

template <typename T>
TensorT<T> encode_text_batch(const std::vector<TokenSequence>& batch, const TextEncoderT<T>& enc) {
    std::vector<TensorT<T>> rows;
    rows.reserve(batch.size());
    for (const auto& t : batch) rows.push_back(encode_text(t, enc));
    return concat_rows(rows);
}

}  // namespace cal3
