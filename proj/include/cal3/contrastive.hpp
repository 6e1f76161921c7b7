#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cal3/errors.hpp"
#include "cal3/tensor.hpp"

namespace cal3 {

// ---------------------------------------------------------------------------
// Symmetric contrastive loss over paired unit-norm embeddings, with a
// learnable clamped temperature, plus a two-pass cross-batch accumulation
// procedure: pass 1 caches detached embeddings for all N batches, pass 2
// re-encodes one batch at a time with gradients and splices it into the
// cached concatenation, so the full N*B-batch gradient is recovered while
// only O(B) activations are ever graph-tracked.
// ---------------------------------------------------------------------------

// Logits are cosine similarities multiplied by scale = exp(log_scale); the
// scale is the inverse of the conventional softmax temperature, so an initial
// temperature tau0 means exp(log_scale) = 1 / tau0.
template <typename T>
struct TemperatureT {
    TensorT<T> log_scale;  // scalar leaf, learnable
    T min_scale = static_cast<T>(0.01);
    T max_scale = static_cast<T>(100);

    static TemperatureT init(T tau0) {
        TemperatureT temp;
        temp.log_scale = TensorT<T>::scalar(std::log(T(1) / tau0), /*requires_grad=*/true);
        return temp;
    }

    // graph-tracked multiplicative scale
    TensorT<T> scale_tensor() const { return exp(log_scale); }

    // clamped plain value
    T value() const {
        T s = std::exp(log_scale.item());
        return std::min(max_scale, std::max(min_scale, s));
    }

    // applied to the raw parameter after each optimizer step
    void clamp() {
        T lo = std::log(min_scale), hi = std::log(max_scale);
        T& v = log_scale.mutable_data()[0];
        v = std::min(hi, std::max(lo, v));
    }
};

// Mean of the row-wise and column-wise cross entropies of the scaled
// similarity matrix, diagonal entries being the positive pairs.
template <typename T>
TensorT<T> clip_loss(const TensorT<T>& img, const TensorT<T>& txt, const TemperatureT<T>& temp) {
    if (img.rank() != 2 || txt.rank() != 2 || img.dim(1) != txt.dim(1) || img.dim(0) != txt.dim(0))
        throw DimensionError("clip_loss: embedding shapes disagree: " + shape_str(img.shape()) + " vs " +
                             shape_str(txt.shape()));
    if (img.dim(0) == 0) throw ContractError("clip_loss: empty batch");

    auto logits = mul(matmul(img, transpose2d(txt)), temp.scale_tensor());
    auto row_ce = softmax_cross_entropy_rows(logits);
    auto col_ce = softmax_cross_entropy_rows(transpose2d(logits));
    return scale(add(row_ce, col_ce), T(0.5));
}

template <typename T>
struct AccumulatedStepResult {
    T loss = T(0);  // loss sum over the N spliced passes divided by N
};

// Encoder callbacks receive the batch index and return the [B, D] embedding
// matrix for that batch; they are invoked once under a no-grad guard and once
// tracked. Gradients accumulate into the encoder parameters; the optimizer is
// not touched here. A cached-vs-recomputed embedding mismatch beyond
// `determinism_tol` means the encoder is not deterministic, which silently
// breaks the whole procedure, so it is a hard error naming the batch.
template <typename T>
AccumulatedStepResult<T> accumulated_step(int n_batches,
                                          const std::function<TensorT<T>(int)>& encode_image_batch,
                                          const std::function<TensorT<T>(int)>& encode_text_batch,
                                          TemperatureT<T>& temperature,
                                          T determinism_tol = static_cast<T>(1e-6)) {
    if (n_batches < 1) throw ContractError("accumulated_step: accumulation frequency must be >= 1");

    // pass 1: cache detached embeddings for every batch
    std::vector<TensorT<T>> cached_img, cached_txt;
    cached_img.reserve(static_cast<std::size_t>(n_batches));
    cached_txt.reserve(static_cast<std::size_t>(n_batches));
    {
        NoGradGuard guard;
        for (int j = 0; j < n_batches; ++j) {
            cached_img.push_back(encode_image_batch(j).detach());
            cached_txt.push_back(encode_text_batch(j).detach());
        }
    }
    int rows = cached_img[0].dim(0);
    for (int j = 0; j < n_batches; ++j) {
        if (cached_img[static_cast<std::size_t>(j)].dim(0) != rows ||
            cached_txt[static_cast<std::size_t>(j)].dim(0) != rows)
            throw DimensionError("accumulated_step: batch " + std::to_string(j) +
                                 " row count differs from batch 0");
    }

    auto check_match = [&](const TensorT<T>& live, const TensorT<T>& cached, int j, const char* which) {
        T worst = T(0);
        for (std::size_t i = 0; i < live.data().size(); ++i)
            worst = std::max(worst, std::abs(live.data()[i] - cached.data()[i]));
        if (worst > determinism_tol)
            throw ContractError(std::string("accumulated_step: ") + which +
                                " encoder nondeterministic on batch " + std::to_string(j) +
                                " (max deviation " + std::to_string(static_cast<double>(worst)) + ")");
    };

    // pass 2: re-encode one batch tracked, splice into the cache, backward
    T loss_sum = T(0);
    for (int j = 0; j < n_batches; ++j) {
        auto live_img = encode_image_batch(j);
        auto live_txt = encode_text_batch(j);
        check_match(live_img, cached_img[static_cast<std::size_t>(j)], j, "image");
        check_match(live_txt, cached_txt[static_cast<std::size_t>(j)], j, "text");

        std::vector<TensorT<T>> img_parts, txt_parts;
        for (int k = 0; k < n_batches; ++k) {
            img_parts.push_back(k == j ? live_img : cached_img[static_cast<std::size_t>(k)]);
            txt_parts.push_back(k == j ? live_txt : cached_txt[static_cast<std::size_t>(k)]);
        }
        auto loss = clip_loss(concat_rows(img_parts), concat_rows(txt_parts), temperature);
        loss.backward();
        loss_sum += loss.item();
    }

    // The temperature is live in every spliced pass while each encoder
    // parameter is live in exactly one, so its accumulated gradient is N
    // times the full-batch one; rescale to restore exact equivalence.
    if (temperature.log_scale.has_grad()) {
        for (auto& g : temperature.log_scale.mutable_grad()) g /= static_cast<T>(n_batches);
    }

    return {loss_sum / static_cast<T>(n_batches)};
}

}  // namespace cal3
