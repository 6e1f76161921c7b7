#pragma once

#include <array>
#include <vector>

#include "cal3/rng.hpp"
#include "cal3/tensor.hpp"
#include "cal3/text.hpp"

namespace cal3 {

// ---------------------------------------------------------------------------
// Synthetic volumetric cases: cubic volumes with additive Gaussian-blob
// lesions placed in five disjoint anatomically inspired zones, paired with
// tabular records. Everything is reproducible from (seed, config).
// Axis convention: index order [z][y][x] with z anterior->posterior,
// y superior->inferior, x left->right.
// ---------------------------------------------------------------------------

struct Volume {
    int size = 0;
    std::vector<float> voxels;  // row-major [z][y][x]

    float at(int z, int y, int x) const {
        return voxels[(static_cast<std::size_t>(z) * size + y) * size + x];
    }
    float& at(int z, int y, int x) {
        return voxels[(static_cast<std::size_t>(z) * size + y) * size + x];
    }
};

// Half-open voxel ranges; a zone is one or two axis-aligned boxes (the
// temporal zone covers both lateral quarters).
struct ZoneBox {
    std::array<int, 3> lo;
    std::array<int, 3> hi;

    bool contains(double z, double y, double x) const {
        return z >= lo[0] && z < hi[0] && y >= lo[1] && y < hi[1] && x >= lo[2] && x < hi[2];
    }
    std::array<double, 3> center() const {
        return {(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0};
    }
};

std::vector<ZoneBox> zone_boxes(Region region, int s);
bool zone_contains(Region region, int s, int z, int y, int x);

struct GenConfig {
    int volume_size = 32;
    int min_lesions = 1;
    int max_lesions = 3;
    double intensity_lo = 2.0;
    double intensity_hi = 4.0;
    // probability that a lesion after the first lands in an already-used
    // region (recurrences cluster; keeps most records single-region)
    double repeat_region_prob = 0.9;
    int background_cosines = 3;
    double background_amplitude = 0.3;
    double background_noise_sigma = 0.1;
    // cycles per volume edge; kept low so the background stays smooth at
    // patch scale
    double background_freq_lo = 0.5;
    double background_freq_hi = 2.0;
    // The cosine background plays the role of shared anatomy: all cases of a
    // dataset draw the same waves from this seed, so volume position stays
    // readable from local context and cases differ only by lesions and
    // noise. 0 = draw waves from the per-case stream instead.
    std::uint64_t background_wave_seed = 0;
    int age_lo = 23;
    int age_hi = 77;

    double sigma_lo() const { return volume_size / 16.0; }
    double sigma_hi() const { return volume_size / 10.0; }
};

struct LesionBlob {
    Region region;
    std::array<double, 3> center;
    double sigma = 0;
    double intensity = 0;
};

struct Case {
    Volume volume;
    TabularRecord record;
};

Case generate_case(Rng& rng, const GenConfig& config, std::vector<LesionBlob>* blobs_out = nullptr);

// Per-case seed streams derived from (seed, index).
std::vector<Case> generate_cases(std::uint64_t seed, int count, const GenConfig& config);

// z-normalization with population std; constant input maps to all zeros.
Volume preprocess(const Volume& v);

// Random axis-aligned cube, or the centered cube when rng is null
// (evaluation mode).
Tensor extract_patch(const Volume& v, int patch_size, Rng* rng);

struct AugmentConfig {
    double p_rotate = 0.5;
    double p_scale = 0.5;
    double p_noise = 0.5;
    double p_flip = 0.5;
    double scale_lo = 0.9;
    double scale_hi = 1.1;
    double noise_sigma_max = 0.1;
    // false restricts geometry to the label-preserving subgroup: no
    // rotations, flips along the left-right axis only
    bool full_geometric = false;
};

struct AugmentedCase {
    Volume volume;
    std::vector<Region> lesions;
};

AugmentedCase augment(const Volume& v, const std::vector<Region>& lesions, Rng& rng,
                      const AugmentConfig& config);

struct Dataset {
    std::vector<Case> cases;
    std::vector<int> train_indices;
    std::vector<int> test_indices;
};

// Seeded shuffle, first 80% train. Requires at least 5 cases.
void split_dataset(Dataset& dataset, Rng& rng);

Dataset generate_dataset(std::uint64_t seed, int count, const GenConfig& config);

}  // namespace cal3
