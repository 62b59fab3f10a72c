#include "orbitseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>
#include <string>

#include "orbitseg/errors.hpp"
#include "orbitseg/random.hpp"

namespace fs = std::filesystem;

namespace orbitseg {

SynthSpec SynthSpec::source_style(std::uint64_t seed, Dims shape) {
    SynthSpec s;
    s.style = SynthStyle::Source;
    s.shape = shape;
    s.seed = seed;
    return s;
}

SynthSpec SynthSpec::target_style(std::uint64_t seed, Dims shape) {
    SynthSpec s;
    s.style = SynthStyle::Target;
    s.shape = shape;
    s.contrast = 0.2;
    s.aspect_min = 0.45;
    s.aspect_max = 0.7;
    s.texture = true;
    s.seed = seed;
    return s;
}

void SynthSpec::validate() const {
    if (shape.depth < 1 || shape.height < 1 || shape.width < 1) throw std::invalid_argument("synth shape must be positive");
    if (blobs_min < 1 || blobs_max < blobs_min) throw std::invalid_argument("blob count range invalid");
    if (!(radius_min > 0 && radius_max >= radius_min)) throw std::invalid_argument("radius range invalid");
    if (!(depth_radius_min > 0 && depth_radius_max >= depth_radius_min))
        throw std::invalid_argument("depth radius range invalid");
    if (2 * radius_max > std::min(shape.height, shape.width))
        throw std::invalid_argument("blob radius does not fit inside the slice");
    if (!(aspect_min > 0 && aspect_max >= aspect_min && aspect_max <= 1)) throw std::invalid_argument("aspect range invalid");
    if (!(noise_sigma >= 0)) throw std::invalid_argument("noise sigma must be non-negative");
    if (!(texture_amplitude >= 0)) throw std::invalid_argument("texture amplitude must be non-negative");
}

bool Ellipsoid::contains(int z, int y, int x) const {
    const double dz = z - cz, dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return (dz / rz) * (dz / rz) + (u / ra) * (u / ra) + (v / rb) * (v / rb) <= 1.0;
}

namespace {

Ellipsoid draw_blob(const SynthSpec& s, Rng& rng) {
    Ellipsoid e;
    e.ra = rng.uniform(s.radius_min, s.radius_max);
    e.rb = e.ra * rng.uniform(s.aspect_min, s.aspect_max);
    e.rz = rng.uniform(s.depth_radius_min, s.depth_radius_max);
    e.angle = rng.uniform(0.0, std::numbers::pi);
    // Keep the in-plane footprint inside the slice; the centre slice may sit anywhere.
    const double m = e.ra + 1;
    e.cy = rng.uniform(m, s.shape.height - 1 - m);
    e.cx = rng.uniform(m, s.shape.width - 1 - m);
    e.cz = rng.uniform(0.0, s.shape.depth - 1.0);
    return e;
}

// Sum of three random low-frequency plane waves scaled to +-amplitude.
std::vector<double> texture_field(const SynthSpec& s, Rng& rng) {
    struct Wave {
        double kz, ky, kx, phase;
    };
    Wave waves[3];
    for (auto& w : waves) {
        const double period = rng.uniform(16.0, 40.0);
        const double theta = rng.uniform(0.0, 2 * std::numbers::pi);
        w.ky = 2 * std::numbers::pi / period * std::sin(theta);
        w.kx = 2 * std::numbers::pi / period * std::cos(theta);
        w.kz = 2 * std::numbers::pi / rng.uniform(24.0, 64.0);
        w.phase = rng.uniform(0.0, 2 * std::numbers::pi);
    }
    std::vector<double> f(s.shape.voxels());
    std::size_t i = 0;
    for (int z = 0; z < s.shape.depth; ++z)
        for (int y = 0; y < s.shape.height; ++y)
            for (int x = 0; x < s.shape.width; ++x) {
                double v = 0;
                for (const auto& w : waves) v += std::sin(w.kz * z + w.ky * y + w.kx * x + w.phase);
                f[i++] = s.texture_amplitude * v / 3.0;
            }
    return f;
}

std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

SynthCase generate_volume(const SynthSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    SynthCase out;
    out.mask = SegmentationMask(spec.shape);
    const Dims& d = spec.shape;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        out.blobs.clear();
        const int count = rng.uniform_int(spec.blobs_min, spec.blobs_max);
        for (int b = 0; b < count; ++b) out.blobs.push_back(draw_blob(spec, rng));
        std::fill(out.mask.voxels.begin(), out.mask.voxels.end(), 0);
        for (int z = 0; z < d.depth; ++z)
            for (int y = 0; y < d.height; ++y)
                for (int x = 0; x < d.width; ++x)
                    for (const auto& e : out.blobs)
                        if (e.contains(z, y, x)) {
                            out.mask.at(z, y, x) = 1;
                            break;
                        }
        if (out.mask.foreground() > 0) break;
    }
    if (out.mask.foreground() == 0) throw std::runtime_error("synthetic generator could not place a blob");

    std::vector<double> tex;
    if (spec.texture && spec.texture_amplitude > 0) tex = texture_field(spec, rng);
    out.volume = CtVolume(d, {1.0, 1.0, 1.0}, Stage::Normalized);
    for (std::size_t i = 0; i < d.voxels(); ++i) {
        double v = spec.background + (out.mask.voxels[i] ? spec.contrast : 0.0);
        if (!tex.empty()) v += tex[i];
        if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.normal();
        out.volume.voxels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

BenchmarkFiles generate_benchmark(int n_source, int n_target, std::uint64_t seed, const fs::path& dir, int n_target_test,
                                  Dims shape) {
    if (n_source < 1 || n_target < 1 || n_target_test < 0) throw std::invalid_argument("benchmark counts must be positive");
    std::error_code ec;
    fs::create_directories(dir / "source", ec);
    fs::create_directories(dir / "target", ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    auto write_set = [&](const char* prefix, const fs::path& sub, int count, int offset, SynthStyle style,
                         const fs::path& manifest_path) {
        DatasetManifest m;
        for (int i = 0; i < count; ++i) {
            const int index = offset + i;
            const std::uint64_t vseed = mix(seed ^ mix((style == SynthStyle::Source ? 0x50ull : 0x54ull) << 32 | static_cast<std::uint64_t>(index)));
            const SynthSpec spec =
                style == SynthStyle::Source ? SynthSpec::source_style(vseed, shape) : SynthSpec::target_style(vseed, shape);
            const SynthCase c = generate_volume(spec);
            char id[32];
            std::snprintf(id, sizeof id, "%s%03d", prefix, index);
            const fs::path vol = dir / sub / (std::string(id) + ".vox");
            const fs::path mask = dir / sub / (std::string(id) + "_mask.vox");
            save_volume(c.volume, vol);
            save_mask(c.mask, mask);
            m.entries.push_back({id, style == SynthStyle::Source ? Domain::Source : Domain::Target, vol, mask});
        }
        save_manifest(m, manifest_path);
    };

    BenchmarkFiles files;
    files.source_manifest = dir / "source.tsv";
    files.target_manifest = dir / "target.tsv";
    write_set("src", "source", n_source, 0, SynthStyle::Source, files.source_manifest);
    write_set("tgt", "target", n_target, 0, SynthStyle::Target, files.target_manifest);
    if (n_target_test > 0) {
        files.target_test_manifest = dir / "target_test.tsv";
        write_set("tgt", "target", n_target_test, n_target, SynthStyle::Target, files.target_test_manifest);
    }
    return files;
}

}  // namespace orbitseg
