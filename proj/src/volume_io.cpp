#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "orbitseg/errors.hpp"
#include "orbitseg/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace orbitseg {

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::RawHu: return "RAW_HU";
        case Stage::Equalized: return "EQUALIZED";
        case Stage::Windowed: return "WINDOWED";
        case Stage::Normalized: return "NORMALIZED";
    }
    return "?";
}

Stage parse_stage(const std::string& s) {
    if (s == "RAW_HU") return Stage::RawHu;
    if (s == "EQUALIZED") return Stage::Equalized;
    if (s == "WINDOWED") return Stage::Windowed;
    if (s == "NORMALIZED") return Stage::Normalized;
    throw FormatError("unknown stage '" + s + "'");
}

const char* domain_name(Domain d) { return d == Domain::Source ? "SOURCE" : "TARGET"; }

Domain parse_domain(const std::string& s) {
    if (s == "SOURCE") return Domain::Source;
    if (s == "TARGET") return Domain::Target;
    throw FormatError("unknown domain tag '" + s + "'");
}

std::string dims_string(const Dims& d) {
    return std::to_string(d.depth) + "x" + std::to_string(d.height) + "x" + std::to_string(d.width);
}

void CtVolume::validate() const {
    if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) throw DataError("spacing components must be positive");
    if (voxels.size() != dims.voxels()) throw DataError("voxel count does not match shape " + dims_string(dims));
    for (std::size_t i = 0; i < voxels.size(); ++i) {
        const float v = voxels[i];
        if (!std::isfinite(v)) throw DataError("non-finite voxel at flat index " + std::to_string(i));
        if (stage == Stage::Normalized && (v < 0.0f || v > 1.0f))
            throw DataError("normalized volume has value outside [0,1] at flat index " + std::to_string(i));
    }
}

std::size_t SegmentationMask::foreground() const {
    std::size_t n = 0;
    for (auto v : voxels) n += v;
    return n;
}

std::vector<ManifestEntry> DatasetManifest::with_domain(Domain d) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.domain == d) out.push_back(e);
    return out;
}

const ManifestEntry* DatasetManifest::find(const std::string& subject) const {
    for (const auto& e : entries)
        if (e.subject == subject) return &e;
    return nullptr;
}

fs::path sidecar_path(const fs::path& volume) { return fs::path(volume.string() + ".meta"); }

namespace {

std::uint32_t to_little(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

void write_raw(const std::vector<float>& values, const VolumeHeader& h, const fs::path& path) {
    if (path.has_parent_path() && !fs::exists(path.parent_path()))
        throw IoError("parent directory does not exist: " + path.parent_path().string());
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path.string());
        std::vector<std::uint32_t> buf(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) buf[i] = to_little(std::bit_cast<std::uint32_t>(values[i]));
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        if (!out) throw IoError("write failed: " + path.string());
    }
    json meta;
    meta["shape"] = {h.dims.depth, h.dims.height, h.dims.width};
    meta["spacing"] = {h.spacing.x, h.spacing.y, h.spacing.z};
    meta["stage"] = stage_name(h.stage);
    const fs::path side = sidecar_path(path);
    std::ofstream out(side, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + side.string());
    out << meta.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + side.string());
}

std::vector<float> read_raw(const fs::path& path, const VolumeHeader& h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open volume: " + path.string());
    const std::size_t expected = h.dims.voxels() * 4;
    const auto size = fs::file_size(path);
    if (size != expected)
        throw FormatError(path.string() + ": file holds " + std::to_string(size) + " bytes, shape " +
                          dims_string(h.dims) + " needs " + std::to_string(expected));
    std::vector<std::uint32_t> buf(h.dims.voxels());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
    if (!in) throw IoError("read failed: " + path.string());
    std::vector<float> out(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) out[i] = std::bit_cast<float>(to_little(buf[i]));
    return out;
}

}  // namespace

VolumeHeader read_header(const fs::path& path) {
    const fs::path side = sidecar_path(path);
    std::ifstream in(side);
    if (!in) throw FormatError("missing sidecar metadata: " + side.string());
    VolumeHeader h;
    try {
        const json meta = json::parse(in);
        const auto& shape = meta.at("shape");
        const auto& spacing = meta.at("spacing");
        if (shape.size() != 3 || spacing.size() != 3) throw FormatError("shape and spacing need three entries");
        h.dims = {shape[0].get<int>(), shape[1].get<int>(), shape[2].get<int>()};
        h.spacing = {spacing[0].get<double>(), spacing[1].get<double>(), spacing[2].get<double>()};
        h.stage = parse_stage(meta.at("stage").get<std::string>());
    } catch (const json::exception& e) {
        throw FormatError(side.string() + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(side.string() + ": " + e.what());
    }
    if (h.dims.depth < 0 || h.dims.height < 0 || h.dims.width < 0)
        throw FormatError(side.string() + ": negative shape");
    return h;
}

CtVolume load_volume(const fs::path& path) {
    const VolumeHeader h = read_header(path);
    CtVolume v;
    v.dims = h.dims;
    v.spacing = h.spacing;
    v.stage = h.stage;
    v.voxels = read_raw(path, h);
    try {
        v.validate();
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return v;
}

void save_volume(const CtVolume& volume, const fs::path& path) {
    write_raw(volume.voxels, {volume.dims, volume.spacing, volume.stage}, path);
}

SegmentationMask load_mask(const fs::path& path) {
    const VolumeHeader h = read_header(path);
    const std::vector<float> raw = read_raw(path, h);
    SegmentationMask m(h.dims, h.spacing);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] == 0.0f) m.voxels[i] = 0;
        else if (raw[i] == 1.0f) m.voxels[i] = 1;
        else throw DataError(path.string() + ": mask value not binary at flat index " + std::to_string(i));
    }
    return m;
}

void save_mask(const SegmentationMask& mask, const fs::path& path) {
    std::vector<float> raw(mask.voxels.begin(), mask.voxels.end());
    write_raw(raw, {mask.dims, mask.spacing, Stage::Normalized}, path);
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path.string());
    const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
    DatasetManifest m;
    std::set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (fields.size() != 4) throw FormatError(where + ": expected 4 tab-separated fields");
        ManifestEntry e;
        e.subject = fields[0];
        try {
            e.domain = parse_domain(fields[1]);
        } catch (const FormatError& err) {
            throw FormatError(where + ": " + err.what());
        }
        e.volume = fs::path(fields[2]).is_absolute() ? fs::path(fields[2]) : base / fields[2];
        e.mask = fs::path(fields[3]).is_absolute() ? fs::path(fields[3]) : base / fields[3];
        if (!seen.insert(e.subject).second) throw FormatError(where + ": duplicate subject id '" + e.subject + "'");
        if (!fs::exists(e.volume)) throw IoError(where + ": volume not found: " + e.volume.string());
        if (!fs::exists(e.mask)) throw IoError(where + ": mask not found: " + e.mask.string());
        const Dims dv = read_header(e.volume).dims;
        const Dims dm = read_header(e.mask).dims;
        if (!(dv == dm))
            throw ShapeError("subject '" + e.subject + "': mask shape " + dims_string(dm) +
                             " differs from volume shape " + dims_string(dv));
        m.entries.push_back(std::move(e));
    }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
    const fs::path base = fs::absolute(path.has_parent_path() ? path.parent_path() : fs::path("."));
    auto rel = [&](const fs::path& p) {
        const fs::path r = fs::absolute(p).lexically_relative(base);
        return r.empty() ? p.string() : r.string();
    };
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const auto& e : manifest.entries)
        out << e.subject << '\t' << domain_name(e.domain) << '\t' << rel(e.volume) << '\t' << rel(e.mask) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace orbitseg
