#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cal3/checkpoint.hpp"
#include "cal3/config.hpp"
#include "cal3/contrastive.hpp"
#include "cal3/nn.hpp"
#include "cal3/synthdata.hpp"
#include "cal3/text.hpp"

namespace cal3 {

enum class Tower { vision, text };

// Linear warm-up from zero, then cosine annealing to zero at the final step.
// The vision tower runs at lr_vision, the text tower (and temperature) at
// lr_text; the two schedules stay exactly proportional.
double lr_schedule(std::int64_t step, const TrainConfig& config, Tower tower);

// Decoupled-weight-decay Adam update of one named tensor. The decay is
// applied separately from the adaptive step; moments are bias-corrected with
// timestep t (1-based). A non-finite gradient aborts, naming the parameter.
void adamw_step(const std::string& name, Tensor& param, std::vector<float>& m, std::vector<float>& v,
                std::int64_t t, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

// Everything trainable plus the vocabulary, rebuildable from a checkpoint.
struct ModelState {
    TrainConfig config;
    Vocabulary vocab;
    ImageEncoderT<float> image;
    TextEncoderT<float> text;
    TemperatureT<float> temperature;

    std::vector<std::pair<std::string, Tensor>> named_params() const;
    void zero_grads();
};

// Vocabulary used for alignment training: the closed template language plus
// the five region prompts used at evaluation time.
Vocabulary build_training_vocab();

ModelState init_model(const TrainConfig& config);
ModelState model_from_checkpoint(const Checkpoint& ckpt);

struct StepLog {
    std::int64_t step = 0;
    double loss = 0;
    double temperature = 0;
    double lr_vision = 0;
    double lr_text = 0;
};

struct TrainOptions {
    const Checkpoint* init_image_from = nullptr;  // pretrained image tower
    const Checkpoint* resume_from = nullptr;
    std::int64_t stop_after_steps = 0;  // 0 = run to config.steps
    std::string checkpoint_path;        // optional on-disk saves
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<StepLog> log;  // one entry per optimizer step
};

TrainResult train(const TrainConfig& config, const Dataset& dataset, const TrainOptions& options = {});

// Masked-autoencoder pretraining of the image tower: random cubic blocks of
// each patch are zeroed, the mirrored decoder reconstructs them, and only the
// masked voxels enter the squared error. The decoder is discarded; the saved
// checkpoint holds the image encoder weights.
TrainResult pretrain_mae(const TrainConfig& config, const Dataset& dataset,
                         const TrainOptions& options = {});

// Gradients of one optimizer step without applying the update; returns the
// step loss. Exposed so persistence tests can compare resumed gradients.
double compute_step_gradients(ModelState& model, const Dataset& dataset, std::int64_t step);

// CSV with header step,loss,temperature,lr_vision,lr_text; every 10th step
// plus the final one.
std::string metrics_csv(const std::vector<StepLog>& log);

}  // namespace cal3
