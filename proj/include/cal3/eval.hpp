#pragma once

#include <array>
#include <string>
#include <vector>

#include "cal3/rng.hpp"
#include "cal3/synthdata.hpp"
#include "cal3/trainer.hpp"

namespace cal3 {

// ---------------------------------------------------------------------------
// Zero-shot evaluation: classification scores are cosine similarities between
// image embeddings and the five region-prompt embeddings; retrieval ranks
// cases by Euclidean distance to a prompt embedding. Metrics are one-vs-rest
// AUC (ties count one half) and MRR / mAP / top-1 accuracy, reported per
// region and as unweighted means over the evaluable regions.
// ---------------------------------------------------------------------------

struct Embeddings {
    int dim = 0;
    std::vector<std::vector<float>> image;     // one per evaluated case, unit norm
    std::vector<std::vector<float>> sentence;  // record sentences, same order
    std::array<std::vector<float>, kNumRegions> prompts;
};

// Deterministic center patches of the preprocessed test volumes. A nonzero
// aug_seed instead embeds a seeded augmented variant of each volume, which
// gives the multi-seed evaluation its spread.
Embeddings embed_cases(const ModelState& model, const Dataset& dataset, const std::vector<int>& indices,
                       std::uint64_t aug_seed = 0);

struct ScoreMatrix {
    int rows = 0;
    std::vector<std::array<double, kNumRegions>> scores;  // cosine, [-1, 1]
};

ScoreMatrix classify_zero_shot(const Embeddings& embeddings);

struct AucResult {
    std::array<double, kNumRegions> per_region{};  // NaN when skipped
    double average = 0;
    std::vector<Region> skipped;  // regions lacking a positive or a negative
};

AucResult auc_ovr(const ScoreMatrix& scores, const std::vector<std::vector<Region>>& labels);

struct Ranking {
    Region query;
    std::vector<int> order;       // case positions by ascending distance
    std::vector<char> relevant;   // aligned with `order`
};

Ranking retrieve(Region query, const Embeddings& embeddings,
                 const std::vector<std::vector<Region>>& labels);

struct RetrievalMetrics {
    double mrr = 0, map = 0, accuracy = 0;
    std::array<double, kNumRegions> per_rr{}, per_ap{}, per_acc{};
    std::vector<Region> skipped;  // regions with no relevant case
};

RetrievalMetrics retrieval_metrics(const std::vector<Ranking>& rankings);

struct MeanSem {
    double mean = 0, sem = 0;
};

struct RandomBaseline {
    MeanSem auc, mrr, map, accuracy;
    int repeats = 0;
};

// Same metrics on i.i.d. uniform scores, averaged over `repeats` draws with
// the standard error of the mean.
RandomBaseline random_baseline(const std::vector<std::vector<Region>>& labels, Rng& rng, int repeats);

// CSV with header case_id,modality,label_set,e_0..e_{D-1}; one image row and
// one sentence row per case.
std::string embeddings_csv(const Embeddings& embeddings, const std::vector<int>& indices,
                           const std::vector<std::vector<Region>>& labels);

std::vector<std::vector<Region>> label_sets(const Dataset& dataset, const std::vector<int>& indices);

}  // namespace cal3
