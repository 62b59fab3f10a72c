#pragma once

// Volumetric containers and the on-disk format.
//
// A volume `<name>.vox` is a raw little-endian float32 stream in z, y, x
// order; `<name>.vox.meta` is a JSON sidecar with keys "shape" ([z, y, x]),
// "spacing" ([sx, sy, sz] in mm) and "stage". Masks use the same container
// with values restricted to {0, 1}.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace orbitseg {

struct Spacing {
    double x = 1.0;
    double y = 1.0;
    double z = 1.0;
    bool operator==(const Spacing&) const = default;
};

enum class Stage { RawHu, Equalized, Windowed, Normalized };

const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);

struct Dims {
    int depth = 0;
    int height = 0;
    int width = 0;
    std::size_t voxels() const { return static_cast<std::size_t>(depth) * height * width; }
    std::size_t slice() const { return static_cast<std::size_t>(height) * width; }
    bool operator==(const Dims&) const = default;
};

std::string dims_string(const Dims& d);

template <typename V>
struct Grid {
    Dims dims;
    Spacing spacing;
    std::vector<V> voxels;

    Grid() = default;
    explicit Grid(Dims d, Spacing s = {}) : dims(d), spacing(s), voxels(d.voxels()) {}

    int depth() const { return dims.depth; }
    int height() const { return dims.height; }
    int width() const { return dims.width; }
    std::size_t index(int z, int y, int x) const {
        return (static_cast<std::size_t>(z) * dims.height + y) * dims.width + x;
    }
    V& at(int z, int y, int x) { return voxels[index(z, y, x)]; }
    const V& at(int z, int y, int x) const { return voxels[index(z, y, x)]; }
    V* slice(int z) { return voxels.data() + static_cast<std::size_t>(z) * dims.slice(); }
    const V* slice(int z) const { return voxels.data() + static_cast<std::size_t>(z) * dims.slice(); }
};

struct CtVolume : Grid<float> {
    Stage stage = Stage::RawHu;

    CtVolume() = default;
    CtVolume(Dims d, Spacing s, Stage st) : Grid<float>(d, s), stage(st) {}

    // Throws DataError on non-finite values, bad spacing, or out-of-range normalized data.
    void validate() const;
};

struct SegmentationMask : Grid<std::uint8_t> {
    SegmentationMask() = default;
    explicit SegmentationMask(Dims d, Spacing s = {}) : Grid<std::uint8_t>(d, s) {}
    std::size_t foreground() const;
};

enum class Domain { Source, Target };

const char* domain_name(Domain d);
Domain parse_domain(const std::string& s);

struct ManifestEntry {
    std::string subject;
    Domain domain = Domain::Source;
    std::filesystem::path volume;
    std::filesystem::path mask;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> with_domain(Domain d) const;
    const ManifestEntry* find(const std::string& subject) const;
};

struct VolumeHeader {
    Dims dims;
    Spacing spacing;
    Stage stage = Stage::RawHu;
};

std::filesystem::path sidecar_path(const std::filesystem::path& volume);

VolumeHeader read_header(const std::filesystem::path& path);
CtVolume load_volume(const std::filesystem::path& path);
void save_volume(const CtVolume& volume, const std::filesystem::path& path);

SegmentationMask load_mask(const std::filesystem::path& path);
void save_mask(const SegmentationMask& mask, const std::filesystem::path& path);

// Tab-separated: subject, domain, volume path, mask path. Relative paths are
// resolved against the manifest's directory. Blank lines and lines starting
// with '#' are ignored.
DatasetManifest load_manifest(const std::filesystem::path& path);
// Paths are written relative to the manifest directory when possible.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace orbitseg
