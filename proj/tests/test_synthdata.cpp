#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "doctest.h"
#include "orbitseg/synthdata.hpp"
#include "test_util.hpp"

using namespace orbitseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("a single noiseless sphere matches a lattice count") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        SynthSpec s;
        s.shape = {20, 32, 32};
        s.blobs_min = s.blobs_max = 1;
        s.radius_min = s.radius_max = 5;
        s.depth_radius_min = s.depth_radius_max = 5;
        s.aspect_min = s.aspect_max = 1;
        s.noise_sigma = 0;
        s.seed = seed;
        const SynthCase c = generate_volume(s);
        REQUIRE(c.blobs.size() == 1);
        const Ellipsoid& e = c.blobs[0];
        std::size_t expect = 0;
        for (int z = 0; z < 20; ++z)
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    const double r2 = (z - e.cz) * (z - e.cz) + (y - e.cy) * (y - e.cy) + (x - e.cx) * (x - e.cx);
                    const bool in = r2 <= 25.0;
                    expect += in;
                    CHECK(c.mask.at(z, y, x) == in);
                    CHECK(c.volume.at(z, y, x) == doctest::Approx(in ? 0.8 : 0.3).epsilon(1e-6));
                }
        CHECK(c.mask.foreground() == expect);
        // Away from the z faces the count approaches the ball volume.
        if (e.cz >= 5 && e.cz <= 14) CHECK(std::abs(static_cast<double>(expect) - 4.0 / 3.0 * std::numbers::pi * 125) < 40);
        CHECK(expect > 0);
        CHECK(c.volume.stage == Stage::Normalized);
    }
}

TEST_CASE("generation is deterministic in the seed") {
    const SynthCase a = generate_volume(SynthSpec::target_style(9));
    const SynthCase b = generate_volume(SynthSpec::target_style(9));
    const SynthCase c = generate_volume(SynthSpec::target_style(10));
    CHECK(a.volume.voxels == b.volume.voxels);
    CHECK(a.mask.voxels == b.mask.voxels);
    CHECK(a.volume.voxels != c.volume.voxels);
    for (float v : a.volume.voxels) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK(a.mask.foreground() > 0);
}

TEST_CASE("source and target styles differ in appearance") {
    const SynthSpec s = SynthSpec::source_style(1), t = SynthSpec::target_style(1);
    CHECK_FALSE(s.texture);
    CHECK(t.texture);
    CHECK(s.style == SynthStyle::Source);
    CHECK(t.style == SynthStyle::Target);
    CHECK((s.background != t.background || s.contrast != t.contrast || s.noise_sigma != t.noise_sigma));
}

TEST_CASE("specification validation") {
    SynthSpec s;
    s.radius_max = 40;
    CHECK_THROWS(generate_volume(s));
    s = {};
    s.blobs_min = 3;
    s.blobs_max = 2;
    CHECK_THROWS(generate_volume(s));
}

TEST_CASE("benchmark layout") {
    const auto dir = testutil::scratch("bench");
    const BenchmarkFiles f = generate_benchmark(2, 1, 7, dir / "a", 0, {6, 24, 24});
    const DatasetManifest src = load_manifest(f.source_manifest);
    const DatasetManifest tgt = load_manifest(f.target_manifest);
    CHECK(f.target_test_manifest.empty());
    REQUIRE(src.entries.size() == 2);
    REQUIRE(tgt.entries.size() == 1);
    for (const auto& e : src.entries) CHECK(e.domain == Domain::Source);
    CHECK(tgt.entries[0].domain == Domain::Target);
    std::size_t volumes = 0;
    for (const auto& p : fs::recursive_directory_iterator(dir / "a"))
        if (p.path().extension() == ".vox" && p.path().stem().string().find("_mask") == std::string::npos) ++volumes;
    CHECK(volumes == 3);
    const CtVolume v = load_volume(src.entries[0].volume);
    CHECK(v.dims == Dims{6, 24, 24});

    const BenchmarkFiles g = generate_benchmark(2, 1, 7, dir / "b", 0, {6, 24, 24});
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(slurp(src.entries[i].volume) == slurp(load_manifest(g.source_manifest).entries[i].volume));
        CHECK(slurp(src.entries[i].mask) == slurp(load_manifest(g.source_manifest).entries[i].mask));
    }
    const BenchmarkFiles h = generate_benchmark(2, 1, 8, dir / "c", 0, {6, 24, 24});
    CHECK(slurp(src.entries[0].volume) != slurp(load_manifest(h.source_manifest).entries[0].volume));

    const BenchmarkFiles t = generate_benchmark(1, 2, 7, dir / "d", 3, {6, 24, 24});
    const DatasetManifest test = load_manifest(t.target_test_manifest);
    CHECK(test.entries.size() == 3);
    for (const auto& e : test.entries) CHECK(load_manifest(t.target_manifest).find(e.subject) == nullptr);
    CHECK_THROWS(generate_benchmark(0, 1, 7, dir / "e"));
}

TEST_CASE("noiseless foreground lies inside the bright region") {
    SynthSpec s = SynthSpec::source_style(21);
    s.noise_sigma = 0;
    const SynthCase c = generate_volume(s);
    for (std::size_t i = 0; i < c.mask.voxels.size(); ++i) {
        if (c.mask.voxels[i]) CHECK(c.volume.voxels[i] > s.background);
        else CHECK(c.volume.voxels[i] == doctest::Approx(s.background));
    }
}

TEST_CASE("source and target foreground intensities are separated") {
    auto stats = [](const SynthCase& c) {
        double sum = 0, sq = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < c.mask.voxels.size(); ++i)
            if (c.mask.voxels[i]) {
                sum += c.volume.voxels[i];
                sq += static_cast<double>(c.volume.voxels[i]) * c.volume.voxels[i];
                ++n;
            }
        const double mean = sum / n;
        return std::pair{mean, sq / n - mean * mean};
    };
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto [ms, vs] = stats(generate_volume(SynthSpec::source_style(seed)));
        const auto [mt, vt] = stats(generate_volume(SynthSpec::target_style(seed)));
        CAPTURE(seed);
        CHECK(std::abs(ms - mt) > 3 * std::sqrt((vs + vt) / 2));
    }
}
