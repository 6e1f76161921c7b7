#include "cal3/synthdata.hpp"

#include <algorithm>
#include <cmath>

#include "cal3/errors.hpp"

namespace cal3 {

std::vector<ZoneBox> zone_boxes(Region region, int s) {
    const int third = s / 3, two_thirds = (2 * s) / 3;
    const int half = s / 2, quarter = s / 4, three_quarters = (3 * s) / 4;
    switch (region) {
        case Region::frontal:  // anterior third
            return {{{0, 0, 0}, {third, s, s}}};
        case Region::parietal:  // middle third, superior third
            return {{{third, 0, 0}, {two_thirds, third, s}}};
        case Region::temporal:  // middle third, inferior lateral quarters
            return {{{third, half, 0}, {two_thirds, s, quarter}},
                    {{third, half, three_quarters}, {two_thirds, s, s}}};
        case Region::occipital:  // posterior third, superior half
            return {{{two_thirds, 0, 0}, {s, half, s}}};
        case Region::cerebellar:  // posterior third, inferior third
            return {{{two_thirds, two_thirds, 0}, {s, s, s}}};
    }
    throw DomainError("zone_boxes: bad region");
}

bool zone_contains(Region region, int s, int z, int y, int x) {
    for (const auto& box : zone_boxes(region, s))
        if (box.contains(z, y, x)) return true;
    return false;
}

namespace {

struct Cosine {
    double fz, fy, fx, phase;
};

Region pick_region(Rng& rng, const std::vector<Region>& used, double repeat_prob) {
    if (!used.empty() && rng.uniform() < repeat_prob)
        return used[static_cast<std::size_t>(rng.below(used.size()))];
    std::vector<Region> unused;
    for (Region r : all_regions())
        if (std::find(used.begin(), used.end(), r) == used.end()) unused.push_back(r);
    if (unused.empty()) return used[static_cast<std::size_t>(rng.below(used.size()))];
    return unused[static_cast<std::size_t>(rng.below(unused.size()))];
}

}  // namespace

Case generate_case(Rng& rng, const GenConfig& config, std::vector<LesionBlob>* blobs_out) {
    const int s = config.volume_size;
    Case out;
    out.volume.size = s;
    out.volume.voxels.assign(static_cast<std::size_t>(s) * s * s, 0.0f);

    // smooth low-frequency background plus white noise
    std::vector<Cosine> waves;
    {
        Rng wave_rng(config.background_wave_seed);
        Rng& source = config.background_wave_seed == 0 ? rng : wave_rng;
        for (int i = 0; i < config.background_cosines; ++i)
            waves.push_back({source.uniform(config.background_freq_lo, config.background_freq_hi),
                             source.uniform(config.background_freq_lo, config.background_freq_hi),
                             source.uniform(config.background_freq_lo, config.background_freq_hi),
                             source.uniform(0.0, 2.0 * 3.14159265358979323846)});
    }
    constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
    std::size_t idx = 0;
    for (int z = 0; z < s; ++z)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x, ++idx) {
                double v = 0.0;
                for (const auto& w : waves)
                    v += config.background_amplitude *
                         std::cos(kTwoPi * (w.fz * z + w.fy * y + w.fx * x) / s + w.phase);
                v += rng.gauss(0.0, config.background_noise_sigma);
                out.volume.voxels[idx] = static_cast<float>(v);
            }

    // lesions: additive isotropic Gaussian blobs inside their zone boxes
    int count = rng.uniform_int(config.min_lesions, config.max_lesions);
    std::vector<Region> used;
    for (int l = 0; l < count; ++l) {
        Region region = pick_region(rng, used, config.repeat_region_prob);
        if (std::find(used.begin(), used.end(), region) == used.end()) used.push_back(region);

        auto boxes = zone_boxes(region, s);
        const ZoneBox& box = boxes[static_cast<std::size_t>(rng.below(boxes.size()))];
        double sigma = rng.uniform(config.sigma_lo(), config.sigma_hi());
        std::array<double, 3> center;
        for (int a = 0; a < 3; ++a) {
            double lo = box.lo[static_cast<std::size_t>(a)] + 2.0 * sigma;
            double hi = box.hi[static_cast<std::size_t>(a)] - 2.0 * sigma;
            // boxes narrower than 4 sigma collapse to their midline
            center[static_cast<std::size_t>(a)] =
                hi > lo ? rng.uniform(lo, hi)
                        : (box.lo[static_cast<std::size_t>(a)] + box.hi[static_cast<std::size_t>(a)]) / 2.0;
        }
        double intensity = rng.uniform(config.intensity_lo, config.intensity_hi);
        if (blobs_out) blobs_out->push_back({region, center, sigma, intensity});

        int reach = static_cast<int>(std::ceil(3.0 * sigma));
        int z0 = std::max(0, static_cast<int>(std::floor(center[0])) - reach);
        int z1 = std::min(s - 1, static_cast<int>(std::ceil(center[0])) + reach);
        int y0 = std::max(0, static_cast<int>(std::floor(center[1])) - reach);
        int y1 = std::min(s - 1, static_cast<int>(std::ceil(center[1])) + reach);
        int x0 = std::max(0, static_cast<int>(std::floor(center[2])) - reach);
        int x1 = std::min(s - 1, static_cast<int>(std::ceil(center[2])) + reach);
        double inv = 1.0 / (2.0 * sigma * sigma);
        for (int z = z0; z <= z1; ++z)
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    double dz = z - center[0], dy = y - center[1], dx = x - center[2];
                    double r2 = dz * dz + dy * dy + dx * dx;
                    out.volume.at(z, y, x) += static_cast<float>(intensity * std::exp(-r2 * inv));
                }
    }

    out.record.age_at_diagnosis = rng.uniform_int(config.age_lo, config.age_hi);
    out.record.gender = rng.below(2) == 0 ? Gender::male : Gender::female;
    out.record.lesions = used;
    return out;
}

std::vector<Case> generate_cases(std::uint64_t seed, int count, const GenConfig& config) {
    GenConfig effective = config;
    if (effective.background_wave_seed == 0)
        effective.background_wave_seed = mix_seed(seed, 0xBA5Eull);
    std::vector<Case> cases;
    cases.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        cases.push_back(generate_case(rng, effective));
    }
    return cases;
}

Volume preprocess(const Volume& v) {
    double sum = 0.0;
    for (float x : v.voxels) sum += x;
    double mean = sum / static_cast<double>(v.voxels.size());
    double sq = 0.0;
    for (float x : v.voxels) {
        double d = x - mean;
        sq += d * d;
    }
    double std_dev = std::sqrt(sq / static_cast<double>(v.voxels.size()));

    Volume out;
    out.size = v.size;
    out.voxels.resize(v.voxels.size());
    double inv = 1.0 / (std_dev + 1e-8);
    for (std::size_t i = 0; i < v.voxels.size(); ++i)
        out.voxels[i] = static_cast<float>((v.voxels[i] - mean) * inv);
    return out;
}

Tensor extract_patch(const Volume& v, int patch_size, Rng* rng) {
    const int s = v.size, p = patch_size;
    if (p > s)
        throw DimensionError("extract_patch: patch size " + std::to_string(p) + " exceeds volume size " +
                             std::to_string(s));
    int cz, cy, cx;
    if (rng) {
        cz = static_cast<int>(rng->below(static_cast<std::uint64_t>(s - p + 1)));
        cy = static_cast<int>(rng->below(static_cast<std::uint64_t>(s - p + 1)));
        cx = static_cast<int>(rng->below(static_cast<std::uint64_t>(s - p + 1)));
    } else {
        cz = cy = cx = (s - p) / 2;
    }
    std::vector<float> data(static_cast<std::size_t>(p) * p * p);
    std::size_t i = 0;
    for (int z = 0; z < p; ++z)
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x, ++i) data[i] = v.at(cz + z, cy + y, cx + x);
    return Tensor::from_data({1, p, p, p}, std::move(data));
}

namespace {

// index transform (axis permutation plus per-axis mirror) for the geometric
// augmentations; maps source index -> destination index
struct IndexMap {
    std::array<int, 3> perm{0, 1, 2};
    std::array<bool, 3> flip{false, false, false};

    std::array<int, 3> apply(std::array<int, 3> p, int s) const {
        std::array<int, 3> q{};
        for (int a = 0; a < 3; ++a) {
            int v = p[static_cast<std::size_t>(perm[static_cast<std::size_t>(a)])];
            q[static_cast<std::size_t>(a)] = flip[static_cast<std::size_t>(a)] ? s - 1 - v : v;
        }
        return q;
    }
    std::array<double, 3> apply(std::array<double, 3> p, int s) const {
        std::array<double, 3> q{};
        for (int a = 0; a < 3; ++a) {
            double v = p[static_cast<std::size_t>(perm[static_cast<std::size_t>(a)])];
            q[static_cast<std::size_t>(a)] = flip[static_cast<std::size_t>(a)] ? s - 1 - v : v;
        }
        return q;
    }
};

// quarter-turn about `axis`: in the plane of the other two axes,
// (u, w) -> (w, S-1-u), applied k times
IndexMap quarter_turns(int axis, int k) {
    IndexMap m;
    int u = (axis + 1) % 3, w = (axis + 2) % 3;
    for (int t = 0; t < k; ++t) {
        IndexMap step;
        step.perm[static_cast<std::size_t>(u)] = w;
        step.perm[static_cast<std::size_t>(w)] = u;
        step.flip[static_cast<std::size_t>(w)] = true;
        // compose: m = step after m
        IndexMap combined;
        for (int a = 0; a < 3; ++a) {
            int src = step.perm[static_cast<std::size_t>(a)];
            combined.perm[static_cast<std::size_t>(a)] = m.perm[static_cast<std::size_t>(src)];
            combined.flip[static_cast<std::size_t>(a)] =
                m.flip[static_cast<std::size_t>(src)] != step.flip[static_cast<std::size_t>(a)];
        }
        m = combined;
    }
    return m;
}

Volume apply_index_map(const Volume& v, const IndexMap& m) {
    Volume out;
    out.size = v.size;
    out.voxels.resize(v.voxels.size());
    const int s = v.size;
    for (int z = 0; z < s; ++z)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                auto q = m.apply(std::array<int, 3>{z, y, x}, s);
                out.at(q[0], q[1], q[2]) = v.at(z, y, x);
            }
    return out;
}

// Labels follow the transformed zone geometry: each zone box center is
// mapped through the transform and assigned to the zone containing it, or
// the nearest zone box center when the transform moves it off the taxonomy.
Region remap_region(Region region, const IndexMap& m, int s) {
    auto boxes = zone_boxes(region, s);
    auto moved = m.apply(boxes[0].center(), s);
    for (Region r : all_regions())
        for (const auto& box : zone_boxes(r, s))
            if (box.contains(moved[0], moved[1], moved[2])) return r;
    Region best = region;
    double best_d = 1e30;
    for (Region r : all_regions())
        for (const auto& box : zone_boxes(r, s)) {
            auto c = box.center();
            double d = 0;
            for (int a = 0; a < 3; ++a) {
                double diff = c[static_cast<std::size_t>(a)] - moved[static_cast<std::size_t>(a)];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = r;
            }
        }
    return best;
}

}  // namespace

AugmentedCase augment(const Volume& v, const std::vector<Region>& lesions, Rng& rng,
                      const AugmentConfig& config) {
    AugmentedCase out{v, lesions};

    if (config.full_geometric && rng.uniform() < config.p_rotate) {
        int axis = static_cast<int>(rng.below(3));
        int k = 1 + static_cast<int>(rng.below(3));
        auto m = quarter_turns(axis, k);
        out.volume = apply_index_map(out.volume, m);
        for (auto& r : out.lesions) r = remap_region(r, m, v.size);
    }

    if (rng.uniform() < config.p_scale) {
        float factor = static_cast<float>(rng.uniform(config.scale_lo, config.scale_hi));
        for (auto& x : out.volume.voxels) x *= factor;
    }

    if (rng.uniform() < config.p_noise) {
        double sigma = rng.uniform(0.0, config.noise_sigma_max);
        for (auto& x : out.volume.voxels) x += static_cast<float>(rng.gauss(0.0, sigma));
    }

    if (rng.uniform() < config.p_flip) {
        // the left-right mirror preserves every zone; other axes only in
        // full-geometric mode
        int axis = config.full_geometric ? static_cast<int>(rng.below(3)) : 2;
        IndexMap m;
        m.flip[static_cast<std::size_t>(axis)] = true;
        out.volume = apply_index_map(out.volume, m);
        if (config.full_geometric)
            for (auto& r : out.lesions) r = remap_region(r, m, v.size);
    }

    return out;
}

void split_dataset(Dataset& dataset, Rng& rng) {
    const int n = static_cast<int>(dataset.cases.size());
    if (n < 5) throw ContractError("split_dataset: need at least 5 cases, got " + std::to_string(n));
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
        int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    int n_train = (n * 8) / 10;
    dataset.train_indices.assign(order.begin(), order.begin() + n_train);
    dataset.test_indices.assign(order.begin() + n_train, order.end());
    // canonical ascending order so a reloaded dataset samples identically
    std::sort(dataset.train_indices.begin(), dataset.train_indices.end());
    std::sort(dataset.test_indices.begin(), dataset.test_indices.end());
}

Dataset generate_dataset(std::uint64_t seed, int count, const GenConfig& config) {
    Dataset ds;
    ds.cases = generate_cases(seed, count, config);
    Rng split_rng(mix_seed(seed, 0x5eedULL));
    split_dataset(ds, split_rng);
    return ds;
}

}  // namespace cal3
