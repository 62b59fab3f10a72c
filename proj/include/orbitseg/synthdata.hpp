#pragma once

// Two-domain synthetic phantoms with analytic masks. Source style: bright,
// nearly round blobs on a flat background. Target style: faint, elongated
// blobs on a background with slowly varying texture.

#include <cstdint>
#include <filesystem>
#include <utility>

#include "orbitseg/volume.hpp"

namespace orbitseg {

enum class SynthStyle { Source, Target };

struct SynthSpec {
    SynthStyle style = SynthStyle::Source;
    Dims shape{16, 64, 64};
    int blobs_min = 1;
    int blobs_max = 2;
    double radius_min = 5.0;  // in-plane semi-axis range, voxels
    double radius_max = 10.0;
    double depth_radius_min = 3.0;  // semi-axis along z, voxels
    double depth_radius_max = 6.0;
    double aspect_min = 0.8;  // minor / major in-plane semi-axis
    double aspect_max = 1.0;
    double background = 0.3;
    double contrast = 0.5;
    double noise_sigma = 0.05;
    bool texture = false;
    double texture_amplitude = 0.06;
    std::uint64_t seed = 1;

    static SynthSpec source_style(std::uint64_t seed, Dims shape = {16, 64, 64});
    static SynthSpec target_style(std::uint64_t seed, Dims shape = {16, 64, 64});
    void validate() const;
};

// One ellipsoid: centre, semi-axes (z, major, minor) and in-plane rotation.
struct Ellipsoid {
    double cz = 0, cy = 0, cx = 0;
    double rz = 1, ra = 1, rb = 1;
    double angle = 0;
    bool contains(int z, int y, int x) const;
};

struct SynthCase {
    CtVolume volume;
    SegmentationMask mask;
    std::vector<Ellipsoid> blobs;
};

SynthCase generate_volume(const SynthSpec& spec);

struct BenchmarkFiles {
    std::filesystem::path source_manifest;
    std::filesystem::path target_manifest;
    std::filesystem::path target_test_manifest;  // empty when n_target_test == 0
};

// Writes <dir>/source/*.vox, <dir>/target/*.vox and the manifests source.tsv,
// target.tsv (and target_test.tsv). Each volume's seed derives from `seed`,
// its domain and its index.
BenchmarkFiles generate_benchmark(int n_source, int n_target, std::uint64_t seed, const std::filesystem::path& dir,
                                  int n_target_test = 0, Dims shape = {16, 64, 64});

}  // namespace orbitseg
