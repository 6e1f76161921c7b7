#include "cal3/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "cal3/errors.hpp"
#include "cal3/io.hpp"

namespace cal3 {

std::vector<std::vector<Region>> label_sets(const Dataset& dataset, const std::vector<int>& indices) {
    std::vector<std::vector<Region>> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(dataset.cases[static_cast<std::size_t>(i)].record.lesions);
    return out;
}

Embeddings embed_cases(const ModelState& model, const Dataset& dataset, const std::vector<int>& indices,
                       std::uint64_t aug_seed) {
    NoGradGuard guard;
    Embeddings out;
    out.dim = model.config.embed_dim;

    for (Region r : all_regions()) {
        auto seq = tokenize(region_prompt(r), model.vocab, model.config.max_tokens);
        out.prompts[static_cast<std::size_t>(r)] = encode_text(seq, model.text).data();
    }

    for (int idx : indices) {
        const Case& c = dataset.cases[static_cast<std::size_t>(idx)];
        Volume v = preprocess(c.volume);
        if (aug_seed != 0) {
            Rng rng(mix_seed(aug_seed, static_cast<std::uint64_t>(idx)));
            v = augment(v, c.record.lesions, rng, model.config.augment).volume;
        }
        auto patch = extract_patch(v, model.config.patch_size, nullptr);
        out.image.push_back(encode_image(patch, model.image).data());
        auto seq = tokenize(record_to_sentence(c.record), model.vocab, model.config.max_tokens);
        out.sentence.push_back(encode_text(seq, model.text).data());
    }
    return out;
}

ScoreMatrix classify_zero_shot(const Embeddings& embeddings) {
    ScoreMatrix out;
    out.rows = static_cast<int>(embeddings.image.size());
    out.scores.resize(embeddings.image.size());
    for (std::size_t i = 0; i < embeddings.image.size(); ++i) {
        for (int r = 0; r < kNumRegions; ++r) {
            const auto& img = embeddings.image[i];
            const auto& prompt = embeddings.prompts[static_cast<std::size_t>(r)];
            double dot = 0;
            for (std::size_t k = 0; k < img.size(); ++k)
                dot += static_cast<double>(img[k]) * static_cast<double>(prompt[k]);
            out.scores[i][static_cast<std::size_t>(r)] = dot;
        }
    }
    return out;
}

namespace {

bool has_region(const std::vector<Region>& set, Region r) {
    return std::find(set.begin(), set.end(), r) != set.end();
}

// Mann-Whitney AUC through midranks; ties contribute one half.
double rank_auc(const std::vector<double>& scores, const std::vector<char>& positive) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
    });

    long long p = 0, n = 0;
    for (char c : positive) (c ? p : n) += 1;
    double rank_sum_pos = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() &&
               scores[static_cast<std::size_t>(order[j + 1])] == scores[static_cast<std::size_t>(order[i])])
            ++j;
        double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k)
            if (positive[static_cast<std::size_t>(order[k])]) rank_sum_pos += midrank;
        i = j + 1;
    }
    double pd = static_cast<double>(p), nd = static_cast<double>(n);
    return (rank_sum_pos - pd * (pd + 1.0) / 2.0) / (pd * nd);
}

}  // namespace

AucResult auc_ovr(const ScoreMatrix& scores, const std::vector<std::vector<Region>>& labels) {
    if (scores.rows != static_cast<int>(labels.size()))
        throw DimensionError("auc_ovr: score rows and label sets disagree");

    AucResult out;
    double sum = 0;
    int evaluable = 0;
    for (int r = 0; r < kNumRegions; ++r) {
        std::vector<double> col(static_cast<std::size_t>(scores.rows));
        std::vector<char> pos(static_cast<std::size_t>(scores.rows));
        long long p = 0;
        for (int i = 0; i < scores.rows; ++i) {
            col[static_cast<std::size_t>(i)] = scores.scores[static_cast<std::size_t>(i)][static_cast<std::size_t>(r)];
            pos[static_cast<std::size_t>(i)] = has_region(labels[static_cast<std::size_t>(i)], static_cast<Region>(r));
            p += pos[static_cast<std::size_t>(i)] ? 1 : 0;
        }
        if (p == 0 || p == scores.rows) {
            out.per_region[static_cast<std::size_t>(r)] = std::numeric_limits<double>::quiet_NaN();
            out.skipped.push_back(static_cast<Region>(r));
            continue;
        }
        double auc = rank_auc(col, pos);
        out.per_region[static_cast<std::size_t>(r)] = auc;
        sum += auc;
        ++evaluable;
    }
    if (evaluable == 0) throw ContractError("auc_ovr: no region has both a positive and a negative case");
    out.average = sum / static_cast<double>(evaluable);
    return out;
}

Ranking retrieve(Region query, const Embeddings& embeddings,
                 const std::vector<std::vector<Region>>& labels) {
    const auto& prompt = embeddings.prompts[static_cast<std::size_t>(query)];
    std::vector<double> dist(embeddings.image.size());
    for (std::size_t i = 0; i < embeddings.image.size(); ++i) {
        double d2 = 0;
        for (std::size_t k = 0; k < prompt.size(); ++k) {
            double d = static_cast<double>(prompt[k]) - static_cast<double>(embeddings.image[i][k]);
            d2 += d * d;
        }
        dist[i] = std::sqrt(d2);
    }

    Ranking out;
    out.query = query;
    out.order.resize(static_cast<int>(dist.size()));
    std::iota(out.order.begin(), out.order.end(), 0);
    std::sort(out.order.begin(), out.order.end(), [&](int a, int b) {
        double da = dist[static_cast<std::size_t>(a)], db = dist[static_cast<std::size_t>(b)];
        if (da != db) return da < db;
        return a < b;  // stable tie-break by case position
    });
    out.relevant.reserve(out.order.size());
    for (int i : out.order)
        out.relevant.push_back(has_region(labels[static_cast<std::size_t>(i)], query) ? 1 : 0);
    return out;
}

RetrievalMetrics retrieval_metrics(const std::vector<Ranking>& rankings) {
    RetrievalMetrics out;
    double rr_sum = 0, ap_sum = 0, acc_sum = 0;
    int evaluable = 0;
    for (const auto& ranking : rankings) {
        std::size_t r = static_cast<std::size_t>(ranking.query);
        long long relevant_total = 0;
        for (char c : ranking.relevant) relevant_total += c ? 1 : 0;
        if (relevant_total == 0) {
            out.per_rr[r] = out.per_ap[r] = out.per_acc[r] = std::numeric_limits<double>::quiet_NaN();
            out.skipped.push_back(ranking.query);
            continue;
        }
        double rr = 0, ap = 0;
        long long hits = 0;
        for (std::size_t k = 0; k < ranking.relevant.size(); ++k) {
            if (!ranking.relevant[k]) continue;
            ++hits;
            if (hits == 1) rr = 1.0 / static_cast<double>(k + 1);
            ap += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
        ap /= static_cast<double>(relevant_total);
        double acc = ranking.relevant[0] ? 1.0 : 0.0;

        out.per_rr[r] = rr;
        out.per_ap[r] = ap;
        out.per_acc[r] = acc;
        rr_sum += rr;
        ap_sum += ap;
        acc_sum += acc;
        ++evaluable;
    }
    if (evaluable == 0) throw ContractError("retrieval_metrics: no ranking has a relevant case");
    out.mrr = rr_sum / static_cast<double>(evaluable);
    out.map = ap_sum / static_cast<double>(evaluable);
    out.accuracy = acc_sum / static_cast<double>(evaluable);
    return out;
}

namespace {

MeanSem summarize(const std::vector<double>& xs) {
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) return {mean, 0.0};
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size() - 1);
    return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

}  // namespace

RandomBaseline random_baseline(const std::vector<std::vector<Region>>& labels, Rng& rng, int repeats) {
    const int n = static_cast<int>(labels.size());
    std::vector<double> aucs, mrrs, maps, accs;
    for (int rep = 0; rep < repeats; ++rep) {
        ScoreMatrix scores;
        scores.rows = n;
        scores.scores.resize(static_cast<std::size_t>(n));
        for (auto& row : scores.scores)
            for (auto& v : row) v = rng.uniform();
        aucs.push_back(auc_ovr(scores, labels).average);

        std::vector<Ranking> rankings;
        for (int r = 0; r < kNumRegions; ++r) {
            Ranking ranking;
            ranking.query = static_cast<Region>(r);
            ranking.order.resize(n);
            std::iota(ranking.order.begin(), ranking.order.end(), 0);
            std::sort(ranking.order.begin(), ranking.order.end(), [&](int a, int b) {
                double sa = scores.scores[static_cast<std::size_t>(a)][static_cast<std::size_t>(r)];
                double sb = scores.scores[static_cast<std::size_t>(b)][static_cast<std::size_t>(r)];
                if (sa != sb) return sa > sb;
                return a < b;
            });
            for (int i : ranking.order)
                ranking.relevant.push_back(
                    std::find(labels[static_cast<std::size_t>(i)].begin(), labels[static_cast<std::size_t>(i)].end(),
                              static_cast<Region>(r)) != labels[static_cast<std::size_t>(i)].end()
                        ? 1
                        : 0);
            rankings.push_back(std::move(ranking));
        }
        auto rm = retrieval_metrics(rankings);
        mrrs.push_back(rm.mrr);
        maps.push_back(rm.map);
        accs.push_back(rm.accuracy);
    }

    RandomBaseline out;
    out.auc = summarize(aucs);
    out.mrr = summarize(mrrs);
    out.map = summarize(maps);
    out.accuracy = summarize(accs);
    out.repeats = repeats;
    return out;
}

std::string embeddings_csv(const Embeddings& embeddings, const std::vector<int>& indices,
                           const std::vector<std::vector<Region>>& labels) {
    std::ostringstream os;
    os << "case_id,modality,label_set";
    for (int k = 0; k < embeddings.dim; ++k) os << ",e_" << k;
    os << "\n";

    auto label_str = [](const std::vector<Region>& set) {
        std::string s;
        for (std::size_t i = 0; i < set.size(); ++i) {
            if (i) s += ";";
            s += region_name(set[i]);
        }
        return s;
    };
    char buf[32];
    auto write_row = [&](const std::string& id, const char* modality, const std::string& label,
                         const std::vector<float>& e) {
        os << id << "," << modality << "," << label;
        for (float v : e) {
            std::snprintf(buf, sizeof(buf), ",%.8g", static_cast<double>(v));
            os << buf;
        }
        os << "\n";
    };

    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::string id = case_id(indices[i]);
        std::string label = label_str(labels[i]);
        write_row(id, "image", label, embeddings.image[i]);
        write_row(id, "sentence", label, embeddings.sentence[i]);
    }
    return os.str();
}

}  // namespace cal3
