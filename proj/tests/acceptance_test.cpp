// Acceptance suite: one test case per criterion, each printing a PASS/FAIL
// line. Expensive training runs are cached and shared between criteria.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cal3/contrastive.hpp"
#include "cal3/eval.hpp"
#include "cal3/rng.hpp"
#include "cal3/tensor.hpp"
#include "cal3/trainer.hpp"
#include "support/test_util.hpp"

using namespace cal3;

namespace {

struct CriterionLine {
    std::string name;
    bool passed = false;
    explicit CriterionLine(std::string n) : name(std::move(n)) {}
    ~CriterionLine() {
        std::printf("[%s] %s\n", passed ? "PASS" : "FAIL", name.c_str());
        std::fflush(stdout);
    }
};

constexpr std::uint64_t kDataSeed = 42;

const Dataset& shared_dataset() {
    static Dataset ds = generate_dataset(kDataSeed, 80, GenConfig());
    return ds;
}

TrainConfig desk_config(std::uint64_t seed) {
    TrainConfig cfg;  // desk-scale defaults: D=64, B=8, N=8, 16^3 patches, 2000 steps
    cfg.seed = seed;
    return cfg;
}

double eval_auc(const Checkpoint& ckpt, const Dataset& ds) {
    auto model = model_from_checkpoint(ckpt);
    auto labels = label_sets(ds, ds.test_indices);
    auto emb = embed_cases(model, ds, ds.test_indices);
    return auc_ovr(classify_zero_shot(emb), labels).average;
}

struct AlignOutcome {
    double auc = 0;
    std::vector<double> losses;
};

// keyed by (accum_freq, steps, seed, pretrained)
const AlignOutcome& aligned_run(int accum_freq, std::int64_t steps, std::uint64_t seed,
                                const Checkpoint* init_image) {
    static std::map<std::string, AlignOutcome> cache;
    std::string key = std::to_string(accum_freq) + "/" + std::to_string(steps) + "/" +
                      std::to_string(seed) + "/" + (init_image ? "pre" : "rand");
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    TrainConfig cfg = desk_config(seed);
    cfg.accum_freq = accum_freq;
    cfg.steps = steps;
    if (cfg.warmup_steps >= steps) cfg.warmup_steps = steps / 20;
    TrainOptions options;
    options.init_image_from = init_image;
    auto result = train(cfg, shared_dataset(), options);

    AlignOutcome out;
    out.auc = eval_auc(result.checkpoint, shared_dataset());
    for (const auto& entry : result.log) out.losses.push_back(entry.loss);
    return cache.emplace(key, std::move(out)).first->second;
}

struct NullCalibration {
    double auc_mean = 0;
    double accuracy_mean = 0;
};

// untrained encoders over 200 synthetic cases, 20 seeds
const NullCalibration& null_calibration() {
    static NullCalibration result = [] {
        Dataset ds;
        ds.cases = generate_cases(kDataSeed + 1, 200, GenConfig());
        std::vector<int> indices(ds.cases.size());
        std::iota(indices.begin(), indices.end(), 0);
        auto labels = label_sets(ds, indices);

        double auc_sum = 0, acc_sum = 0;
        const int n_seeds = 20;
        for (int s = 0; s < n_seeds; ++s) {
            auto model = init_model(desk_config(1000 + static_cast<std::uint64_t>(s)));
            auto emb = embed_cases(model, ds, indices);
            auc_sum += auc_ovr(classify_zero_shot(emb), labels).average;
            std::vector<Ranking> rankings;
            for (Region r : all_regions()) rankings.push_back(retrieve(r, emb, labels));
            acc_sum += retrieval_metrics(rankings).accuracy;
        }
        return NullCalibration{auc_sum / n_seeds, acc_sum / n_seeds};
    }();
    return result;
}

double variance_of_differences(const std::vector<double>& xs, std::size_t from) {
    std::vector<double> diffs;
    for (std::size_t i = from; i + 1 < xs.size(); ++i) diffs.push_back(xs[i + 1] - xs[i]);
    double mean = 0;
    for (double d : diffs) mean += d;
    mean /= static_cast<double>(diffs.size());
    double var = 0;
    for (double d : diffs) var += (d - mean) * (d - mean);
    return var / static_cast<double>(diffs.size());
}

// two-layer linear micro encoder in double precision
struct MicroEncoder {
    TensorD w1, w2;
    static MicroEncoder init(Rng& rng, int in_dim, int hidden, int out_dim) {
        auto draw = [&](int r, int c) {
            std::vector<double> v(static_cast<std::size_t>(r) * c);
            for (auto& x : v) x = rng.uniform(-0.8, 0.8);
            return TensorD::from_data({r, c}, std::move(v), true);
        };
        return {draw(in_dim, hidden), draw(hidden, out_dim)};
    }
    TensorD forward(const TensorD& x) const { return l2_normalize_rows(matmul(relu(matmul(x, w1)), w2)); }
};

}  // namespace

TEST_CASE("criterion 1: gradient-cache accumulation equals full-batch gradients") {
    CriterionLine line("criterion 1: gradient-cache equivalence (1e-8 grads, 1e-10 loss)");
    for (int n : {2, 4}) {
        for (int b : {2, 3}) {
            for (int d : {4, 8}) {
                Rng rng(7000 + static_cast<std::uint64_t>(n * 100 + b * 10 + d));
                const int in_dim = 6;
                auto img_enc = MicroEncoder::init(rng, in_dim, 5, d);
                auto txt_enc = MicroEncoder::init(rng, in_dim, 5, d);
                std::vector<TensorD> xi, xt;
                for (int j = 0; j < n; ++j) {
                    xi.push_back(TensorD::from_data({b, in_dim}, testutil::random_vec(rng, static_cast<std::size_t>(b) * in_dim)));
                    xt.push_back(TensorD::from_data({b, in_dim}, testutil::random_vec(rng, static_cast<std::size_t>(b) * in_dim)));
                }
                auto temp = TemperatureT<double>::init(1.351);

                std::vector<TensorD> all_i, all_t;
                for (int j = 0; j < n; ++j) {
                    all_i.push_back(img_enc.forward(xi[static_cast<std::size_t>(j)]));
                    all_t.push_back(txt_enc.forward(xt[static_cast<std::size_t>(j)]));
                }
                auto full = clip_loss(concat_rows(all_i), concat_rows(all_t), temp);
                full.backward();
                double full_loss = full.item();
                std::vector<std::vector<double>> full_grads = {img_enc.w1.grad(), img_enc.w2.grad(),
                                                               txt_enc.w1.grad(), txt_enc.w2.grad(),
                                                               temp.log_scale.grad()};
                for (auto* t : {&img_enc.w1, &img_enc.w2, &txt_enc.w1, &txt_enc.w2, &temp.log_scale})
                    t->zero_grad();

                auto res = accumulated_step<double>(
                    n, [&](int j) { return img_enc.forward(xi[static_cast<std::size_t>(j)]); },
                    [&](int j) { return txt_enc.forward(xt[static_cast<std::size_t>(j)]); }, temp);

                REQUIRE(std::fabs(res.loss - full_loss) <= 1e-10 * std::fabs(full_loss));
                std::vector<std::vector<double>> acc_grads = {img_enc.w1.grad(), img_enc.w2.grad(),
                                                              txt_enc.w1.grad(), txt_enc.w2.grad(),
                                                              temp.log_scale.grad()};
                for (std::size_t k = 0; k < full_grads.size(); ++k)
                    REQUIRE(testutil::max_rel_err(acc_grads[k], full_grads[k]) <= 1e-8);
            }
        }
    }
    line.passed = true;
}

TEST_CASE("criterion 2: autodiff matches central finite differences") {
    CriterionLine line("criterion 2: autodiff soundness (50 seeded inputs per op, 1e-5 relative)");

    auto sweep = [](auto make_loss, int numel, double lo, double hi) {
        for (int seed = 0; seed < 50; ++seed) {
            Rng rng(9000 + static_cast<std::uint64_t>(seed) * 131);
            auto x0 = testutil::random_vec(rng, static_cast<std::size_t>(numel), lo, hi);
            auto eval = [&](const std::vector<double>& x, std::vector<double>* grad) {
                // fresh identically seeded stream per call: auxiliary draws
                // inside make_loss stay constant across the FD evaluations
                Rng aux(77000 + static_cast<std::uint64_t>(seed) * 577);
                auto t = TensorD::from_data({numel}, x, true);
                auto loss = make_loss(t, aux);
                if (grad) {
                    loss.backward();
                    *grad = t.grad();
                }
                return loss.item();
            };
            REQUIRE(testutil::check_gradient(eval, x0).max_rel < 1e-5);
        }
    };

    // matmul
    sweep([](TensorD t, Rng& rng) {
        auto b = TensorD::from_data({4, 2}, testutil::random_vec(rng, 8));
        return sum(matmul(reshape(t, {3, 4}), b));
    }, 12, -1, 1);
    // elementwise family
    sweep([](TensorD t, Rng&) { return sum(exp(t)); }, 6, -1, 1);
    sweep([](TensorD t, Rng&) { return sum(log(t)); }, 6, 0.2, 3);
    sweep([](TensorD t, Rng&) { return sum(mul(t, t)); }, 6, -1, 1);
    sweep([](TensorD t, Rng&) { return sum(sub(add(t, t), scale(t, 0.3))); }, 6, -1, 1);
    sweep([](TensorD t, Rng&) { return sum(negate(t)); }, 6, -1, 1);
    sweep([](TensorD t, Rng&) { return sum(relu(t)); }, 6, 0.1, 1.5);  // away from the kink
    // reductions
    sweep([](TensorD t, Rng&) { return sum(mean(reshape(t, {2, 3}), 1)); }, 6, -1, 1);
    sweep([](TensorD t, Rng&) { return sum(mul(sum(reshape(t, {2, 3}), 0), sum(reshape(t, {2, 3}), 0))); }, 6, -1, 1);
    sweep([](TensorD t, Rng&) { return max(t); }, 6, -1, 1);
    // structural
    sweep([](TensorD t, Rng& rng) {
        auto other = TensorD::from_data({2, 3}, testutil::random_vec(rng, 6));
        return sum(mul(concat_rows<double>({reshape(t, {2, 3}), other}),
                       concat_rows<double>({other, reshape(t, {2, 3})})));
    }, 6, -1, 1);
    sweep([](TensorD t, Rng& rng) {
        auto w = TensorD::from_data({3, 2}, testutil::random_vec(rng, 6));
        return sum(mul(transpose2d(reshape(t, {2, 3})), w));
    }, 6, -1, 1);
    // normalized / softmax ops
    sweep([](TensorD t, Rng& rng) {
        auto w = TensorD::from_data({2, 3}, testutil::random_vec(rng, 6));
        return sum(mul(l2_normalize_rows(reshape(t, {2, 3})), w));
    }, 6, 0.3, 2);
    sweep([](TensorD t, Rng& rng) {
        auto w = TensorD::from_data({3, 3}, testutil::random_vec(rng, 9));
        return sum(mul(softmax_rows(reshape(t, {3, 3})), w));
    }, 9, -2, 2);
    sweep([](TensorD t, Rng&) { return softmax_cross_entropy_rows(reshape(t, {3, 3})); }, 9, -2, 2);
    // embedding gather
    sweep([](TensorD t, Rng&) {
        std::vector<int> ids = {2, 0, 2, 1};
        return sum(mul(embedding_lookup(reshape(t, {3, 2}), ids),
                       embedding_lookup(reshape(t, {3, 2}), ids)));
    }, 6, -1, 1);
    // convolutions (input gradient)
    sweep([](TensorD t, Rng& rng) {
        auto w = TensorD::from_data({2, 1, 3, 3, 3}, testutil::random_vec(rng, 54, -0.4, 0.4));
        auto b = TensorD::from_data({2}, testutil::random_vec(rng, 2));
        return sum(mul(conv3d(reshape(t, {1, 4, 4, 4}), w, b), conv3d(reshape(t, {1, 4, 4, 4}), w, b)));
    }, 64, -1, 1);
    // convolutions (weight gradient) and transposed decoding path
    sweep([](TensorD t, Rng& rng) {
        auto x = TensorD::from_data({1, 4, 4, 4}, testutil::random_vec(rng, 64));
        auto b = TensorD::from_data({2}, testutil::random_vec(rng, 2));
        return sum(mul(conv3d(x, reshape(t, {2, 1, 3, 3, 3}), b), conv3d(x, reshape(t, {2, 1, 3, 3, 3}), b)));
    }, 54, -0.5, 0.5);
    sweep([](TensorD t, Rng& rng) {
        auto w = TensorD::from_data({2, 1, 3, 3, 3}, testutil::random_vec(rng, 54, -0.4, 0.4));
        auto b = TensorD::from_data({1}, testutil::random_vec(rng, 1));
        auto y = conv3d_transpose(reshape(t, {2, 2, 2, 2}), w, b);
        return sum(mul(y, y));
    }, 16, -1, 1);

    line.passed = true;
}

TEST_CASE("criterion 3: metric implementations match exhaustive oracles exactly") {
    CriterionLine line("criterion 3: metric oracles (AUC pair counting, brute-force MRR/mAP/accuracy)");
    Rng rng(4444);

    // AUC: rank statistic vs exhaustive concordant-pair counting
    for (int instance = 0; instance < 200; ++instance) {
        int n = 3 + static_cast<int>(rng.below(48));
        ScoreMatrix scores;
        scores.rows = n;
        scores.scores.resize(static_cast<std::size_t>(n));
        std::vector<std::vector<Region>> labels(static_cast<std::size_t>(n));
        bool usable = false;
        for (int i = 0; i < n; ++i) {
            for (int r = 0; r < kNumRegions; ++r) {
                scores.scores[static_cast<std::size_t>(i)][static_cast<std::size_t>(r)] =
                    std::floor(rng.uniform() * 6.0) / 6.0;  // quantized: ties are common
                if (rng.below(3) == 0)
                    labels[static_cast<std::size_t>(i)].push_back(static_cast<Region>(r));
            }
        }
        for (int r = 0; r < kNumRegions && !usable; ++r) {
            long long p = 0;
            for (const auto& set : labels)
                p += std::find(set.begin(), set.end(), static_cast<Region>(r)) != set.end() ? 1 : 0;
            if (p > 0 && p < n) usable = true;
        }
        if (!usable) continue;

        auto res = auc_ovr(scores, labels);
        for (int r = 0; r < kNumRegions; ++r) {
            std::vector<char> pos;
            long long p = 0;
            for (const auto& set : labels) {
                bool in = std::find(set.begin(), set.end(), static_cast<Region>(r)) != set.end();
                pos.push_back(in ? 1 : 0);
                p += in ? 1 : 0;
            }
            if (p == 0 || p == n) continue;
            double num = 0;
            for (int i = 0; i < n; ++i) {
                if (!pos[static_cast<std::size_t>(i)]) continue;
                for (int j = 0; j < n; ++j) {
                    if (pos[static_cast<std::size_t>(j)]) continue;
                    double si = scores.scores[static_cast<std::size_t>(i)][static_cast<std::size_t>(r)];
                    double sj = scores.scores[static_cast<std::size_t>(j)][static_cast<std::size_t>(r)];
                    num += si > sj ? 1.0 : si == sj ? 0.5 : 0.0;
                }
            }
            double oracle = num / (static_cast<double>(p) * static_cast<double>(n - p));
            REQUIRE(res.per_region[static_cast<std::size_t>(r)] == oracle);
        }
    }

    // retrieval metrics: brute-force definitions on random rankings
    for (int instance = 0; instance < 200; ++instance) {
        int n = 2 + static_cast<int>(rng.below(30));
        Ranking r;
        r.query = static_cast<Region>(rng.below(kNumRegions));
        r.order.resize(n);
        std::iota(r.order.begin(), r.order.end(), 0);
        bool any = false;
        for (int i = 0; i < n; ++i) {
            char rel = rng.below(4) == 0 ? 1 : 0;
            any |= rel == 1;
            r.relevant.push_back(rel);
        }
        if (!any) r.relevant[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n)))] = 1;

        auto m = retrieval_metrics({r});

        int first_relevant = -1;
        for (int k = 0; k < n; ++k)
            if (r.relevant[static_cast<std::size_t>(k)]) {
                first_relevant = k;
                break;
            }
        double rr = 1.0 / static_cast<double>(first_relevant + 1);
        long long hits = 0, total_rel = 0;
        double ap = 0;
        for (int k = 0; k < n; ++k) total_rel += r.relevant[static_cast<std::size_t>(k)] ? 1 : 0;
        for (int k = 0; k < n; ++k) {
            if (!r.relevant[static_cast<std::size_t>(k)]) continue;
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
        ap /= static_cast<double>(total_rel);
        double acc = r.relevant[0] ? 1.0 : 0.0;

        REQUIRE(m.mrr == rr);
        REQUIRE(m.map == ap);
        REQUIRE(m.accuracy == acc);
    }

    line.passed = true;
}

TEST_CASE("criterion 4: untrained encoders sit at chance") {
    CriterionLine line("criterion 4: null calibration (AUC in [0.45,0.55], accuracy in [0.12,0.28])");
    const auto& null = null_calibration();
    MESSAGE("null auc mean = " << null.auc_mean << ", retrieval accuracy mean = " << null.accuracy_mean);
    REQUIRE(null.auc_mean >= 0.45);
    REQUIRE(null.auc_mean <= 0.55);
    REQUIRE(null.accuracy_mean >= 0.12);
    REQUIRE(null.accuracy_mean <= 0.28);
    line.passed = true;
}

TEST_CASE("criterion 5: desk-scale alignment clears 0.80 zero-shot AUC") {
    CriterionLine line("criterion 5: end-to-end alignment (mean AUC >= 0.80, >= null + 0.25, 3 seeds)");
    double auc_sum = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        double auc = aligned_run(8, 2000, seed, nullptr).auc;
        MESSAGE("seed " << seed << " auc = " << auc);
        auc_sum += auc;
    }
    double mean_auc = auc_sum / 3.0;
    double null_auc = null_calibration().auc_mean;
    MESSAGE("mean auc = " << mean_auc << " vs null " << null_auc);
    REQUIRE(mean_auc >= 0.80);
    REQUIRE(mean_auc - null_auc >= 0.25);
    line.passed = true;
}

TEST_CASE("criterion 6: accumulation at N=8 holds AUC and stabilizes the loss") {
    CriterionLine line("criterion 6: accumulation ablation (N=8 vs N=1, AUC and loss variance)");
    double auc_n8 = 0, auc_n1 = 0, var_n8 = 0, var_n1 = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto& big = aligned_run(8, 2000, seed, nullptr);
        const auto& small = aligned_run(1, 2000, seed, nullptr);
        auc_n8 += big.auc;
        auc_n1 += small.auc;
        var_n8 += variance_of_differences(big.losses, big.losses.size() * 3 / 4);
        var_n1 += variance_of_differences(small.losses, small.losses.size() * 3 / 4);
    }
    auc_n8 /= 3.0;
    auc_n1 /= 3.0;
    MESSAGE("mean auc: N=8 " << auc_n8 << ", N=1 " << auc_n1);
    MESSAGE("loss variance (last quarter): N=8 " << var_n8 / 3.0 << ", N=1 " << var_n1 / 3.0);
    REQUIRE(auc_n8 >= auc_n1 - 0.02);
    REQUIRE(var_n8 <= var_n1);
    line.passed = true;
}

TEST_CASE("criterion 7: masked-autoencoder pretraining does not hurt alignment") {
    CriterionLine line("criterion 7: pretraining ablation (MAE init >= random init, 3 paired seeds)");
    double pre_sum = 0, rand_sum = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        TrainConfig pre_cfg = desk_config(seed + 100);
        pre_cfg.steps = 500;
        pre_cfg.warmup_steps = 50;
        pre_cfg.accum_freq = 1;
        auto pre = pretrain_mae(pre_cfg, shared_dataset());

        double with_pre = aligned_run(4, 600, seed, &pre.checkpoint).auc;
        double without = aligned_run(4, 600, seed, nullptr).auc;
        MESSAGE("seed " << seed << ": pretrained " << with_pre << ", random " << without);
        pre_sum += with_pre;
        rand_sum += without;
    }
    MESSAGE("mean auc: pretrained " << pre_sum / 3.0 << ", random " << rand_sum / 3.0);
    REQUIRE(pre_sum / 3.0 >= rand_sum / 3.0);
    line.passed = true;
}

TEST_CASE("criterion 8: determinism and persistence") {
    CriterionLine line("criterion 8: determinism, bit-exact resume, byte-stable serialization");
    TrainConfig cfg;
    cfg.steps = 8;
    cfg.warmup_steps = 2;
    cfg.batch_size = 2;
    cfg.accum_freq = 2;
    cfg.embed_dim = 16;
    cfg.patch_size = 8;
    cfg.image_channels = {2, 4};
    cfg.text_width = 8;
    cfg.seed = 77;
    GenConfig gen;
    gen.volume_size = 16;
    auto ds = generate_dataset(kDataSeed + 2, 10, gen);

    // identical inputs give bit-identical checkpoints
    auto r1 = train(cfg, ds);
    auto r2 = train(cfg, ds);
    REQUIRE(r1.checkpoint.to_bytes() == r2.checkpoint.to_bytes());

    // save -> load -> save is byte-identical
    auto bytes = r1.checkpoint.to_bytes();
    REQUIRE(Checkpoint::from_bytes(bytes).to_bytes() == bytes);

    // interrupted-and-resumed equals uninterrupted, byte for byte
    TrainOptions stop;
    stop.stop_after_steps = 4;
    auto half = train(cfg, ds, stop);
    TrainOptions resume;
    resume.resume_from = &half.checkpoint;
    auto resumed = train(cfg, ds, resume);
    REQUIRE(resumed.checkpoint.to_bytes() == r1.checkpoint.to_bytes());

    // reloading reproduces the next step's gradients bit-exactly
    auto ma = model_from_checkpoint(half.checkpoint);
    auto mb = model_from_checkpoint(half.checkpoint);
    REQUIRE(compute_step_gradients(ma, ds, half.checkpoint.step) ==
            compute_step_gradients(mb, ds, half.checkpoint.step));
    auto pa = ma.named_params();
    auto pb = mb.named_params();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].second.has_grad() == pb[i].second.has_grad());
        if (pa[i].second.has_grad()) REQUIRE(pa[i].second.grad() == pb[i].second.grad());
    }
    line.passed = true;
}

TEST_CASE("criterion 9: template fidelity") {
    CriterionLine line("criterion 9: sentence template and prompt strings, character for character");
    TabularRecord r{57, Gender::female, {Region::frontal, Region::occipital}};
    REQUIRE(record_to_sentence(r) ==
            "The age of the subject is 57. The gender of the patient is female. "
            "A tumor has been identified in the frontal area of the brain. "
            "Additionally, a lesion is present in the occipital area.");
    REQUIRE(region_prompt(Region::frontal) == "There is a lesion in the frontal section");
    REQUIRE(region_prompt(Region::parietal) == "There is a lesion in the parietal section");
    REQUIRE(region_prompt(Region::temporal) == "There is a lesion in the temporal section");
    REQUIRE(region_prompt(Region::occipital) == "There is a lesion in the occipital section");
    REQUIRE(region_prompt(Region::cerebellar) == "There is a lesion in the cerebellar section");
    line.passed = true;
}
