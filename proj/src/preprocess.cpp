#include "orbitseg/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "orbitseg/errors.hpp"

namespace orbitseg {

bool Voi::valid() const {
    return 0 <= z0 && z0 < z1 && z1 <= parent.depth && 0 <= y0 && y0 < y1 && y1 <= parent.height && 0 <= x0 &&
           x0 < x1 && x1 <= parent.width;
}

std::size_t SliceSequence::foreground() const {
    std::size_t n = 0;
    for (auto v : mask) n += v;
    return n;
}

namespace {

void require_finite(const CtVolume& v, const char* op) {
    for (float x : v.voxels)
        if (!std::isfinite(x)) throw DataError(std::string(op) + ": non-finite voxel");
}

// Linear interpolation weights along one axis.
struct AxisSample {
    int lo = 0, hi = 0;
    double t = 0.0;
};

std::vector<AxisSample> axis_samples(int n_old, int n_new, double ratio) {
    std::vector<AxisSample> s(static_cast<std::size_t>(n_new));
    for (int i = 0; i < n_new; ++i) {
        double u = (i + 0.5) * ratio - 0.5;
        u = std::clamp(u, 0.0, static_cast<double>(n_old - 1));
        const int lo = static_cast<int>(std::floor(u));
        s[i].lo = lo;
        s[i].hi = std::min(lo + 1, n_old - 1);
        s[i].t = u - lo;
    }
    return s;
}

// Ratios are old steps per new step along (z, y, x).
std::vector<double> trilinear(const std::vector<double>& src, const Dims& from, const Dims& to,
                              const std::array<double, 3>& ratio) {
    const auto sz = axis_samples(from.depth, to.depth, ratio[0]);
    const auto sy = axis_samples(from.height, to.height, ratio[1]);
    const auto sx = axis_samples(from.width, to.width, ratio[2]);
    auto at = [&](int z, int y, int x) {
        return src[(static_cast<std::size_t>(z) * from.height + y) * from.width + x];
    };
    std::vector<double> out(to.voxels());
    std::size_t i = 0;
    for (int z = 0; z < to.depth; ++z)
        for (int y = 0; y < to.height; ++y)
            for (int x = 0; x < to.width; ++x) {
                const auto& a = sz[z];
                const auto& b = sy[y];
                const auto& c = sx[x];
                auto plane = [&](int zz) {
                    const double r0 = at(zz, b.lo, c.lo) * (1 - c.t) + at(zz, b.lo, c.hi) * c.t;
                    const double r1 = at(zz, b.hi, c.lo) * (1 - c.t) + at(zz, b.hi, c.hi) * c.t;
                    return r0 * (1 - b.t) + r1 * b.t;
                };
                out[i++] = plane(a.lo) * (1 - a.t) + plane(a.hi) * a.t;
            }
    return out;
}

Dims isotropic_shape(const Dims& d, const Spacing& s, double target) {
    auto axis = [&](int n, double sp) { return std::max(1, static_cast<int>(std::lround(n * sp / target))); };
    return {axis(d.depth, s.z), axis(d.height, s.y), axis(d.width, s.x)};
}

void check_target(double target) {
    if (!(target > 0) || !std::isfinite(target)) throw std::invalid_argument("target spacing must be positive");
}

template <typename G>
void require_nonempty(const G& g, const char* op) {
    if (g.dims.voxels() == 0) throw ShapeError(std::string(op) + ": empty volume");
}

std::vector<double> widen(const std::vector<float>& v) { return {v.begin(), v.end()}; }
std::vector<double> widen(const std::vector<std::uint8_t>& v) { return {v.begin(), v.end()}; }

CtVolume from_doubles(const std::vector<double>& v, const Dims& d, const Spacing& s, Stage st) {
    CtVolume out(d, s, st);
    for (std::size_t i = 0; i < v.size(); ++i) out.voxels[i] = static_cast<float>(v[i]);
    return out;
}

SegmentationMask threshold_mask(const std::vector<double>& v, const Dims& d, const Spacing& s) {
    SegmentationMask out(d, s);
    for (std::size_t i = 0; i < v.size(); ++i) out.voxels[i] = v[i] >= 0.5 ? 1 : 0;
    return out;
}

template <typename G>
G crop_grid(const G& src, const Voi& box) {
    if (!box.valid()) throw ShapeError("crop box outside volume");
    if (!(box.parent == src.dims)) throw ShapeError("crop box belongs to a volume of another shape");
    G out;
    out.dims = {box.depth(), box.height(), box.width()};
    out.spacing = src.spacing;
    out.voxels.resize(out.dims.voxels());
    std::size_t i = 0;
    for (int z = box.z0; z < box.z1; ++z)
        for (int y = box.y0; y < box.y1; ++y)
            for (int x = box.x0; x < box.x1; ++x) out.voxels[i++] = src.at(z, y, x);
    return out;
}

template <typename G>
G crop_center_grid(const G& src, const Index3& c, int height, int width, int z0, int z1) {
    require_nonempty(src, "crop_center");
    if (z1 < 0) z1 = src.depth();
    if (height <= 0 || width <= 0) throw ShapeError("crop_center: size must be positive");
    if (height > 2 * src.height() || width > 2 * src.width())
        throw ShapeError("crop_center: crop " + std::to_string(height) + "x" + std::to_string(width) +
                         " exceeds twice the volume extent " + dims_string(src.dims));
    if (c.y < 0 || c.y >= src.height() || c.x < 0 || c.x >= src.width() || c.z < 0 || c.z >= src.depth())
        throw ShapeError("crop_center: center outside volume");
    if (z0 < 0 || z1 > src.depth() || z0 >= z1) throw ShapeError("crop_center: invalid slice range");
    G out;
    out.dims = {z1 - z0, height, width};
    out.spacing = src.spacing;
    out.voxels.assign(out.dims.voxels(), 0);
    const int ys = c.y - height / 2;
    const int xs = c.x - width / 2;
    for (int z = z0; z < z1; ++z)
        for (int y = 0; y < height; ++y) {
            const int sy = ys + y;
            if (sy < 0 || sy >= src.height()) continue;
            for (int x = 0; x < width; ++x) {
                const int sx = xs + x;
                if (sx < 0 || sx >= src.width()) continue;
                out.at(z - z0, y, x) = src.at(z, sy, sx);
            }
        }
    return out;
}

}  // namespace

CtVolume resample_isotropic(const CtVolume& volume, double target_spacing) {
    check_target(target_spacing);
    if (volume.stage != Stage::RawHu && volume.stage != Stage::Equalized)
        throw DataError("resample_isotropic expects a RAW_HU or EQUALIZED volume");
    require_nonempty(volume, "resample_isotropic");
    const Dims to = isotropic_shape(volume.dims, volume.spacing, target_spacing);
    const std::array<double, 3> ratio{target_spacing / volume.spacing.z, target_spacing / volume.spacing.y,
                                      target_spacing / volume.spacing.x};
    return from_doubles(trilinear(widen(volume.voxels), volume.dims, to, ratio), to,
                        {target_spacing, target_spacing, target_spacing}, volume.stage);
}

SegmentationMask resample_isotropic(const SegmentationMask& mask, double target_spacing) {
    check_target(target_spacing);
    require_nonempty(mask, "resample_isotropic");
    const Dims to = isotropic_shape(mask.dims, mask.spacing, target_spacing);
    const std::array<double, 3> ratio{target_spacing / mask.spacing.z, target_spacing / mask.spacing.y,
                                      target_spacing / mask.spacing.x};
    return threshold_mask(trilinear(widen(mask.voxels), mask.dims, to, ratio), to,
                          {target_spacing, target_spacing, target_spacing});
}

namespace {
std::array<double, 3> shape_ratio(const Dims& from, const Dims& to) {
    return {static_cast<double>(from.depth) / to.depth, static_cast<double>(from.height) / to.height,
            static_cast<double>(from.width) / to.width};
}
Spacing scaled_spacing(const Spacing& s, const std::array<double, 3>& r) { return {s.x * r[2], s.y * r[1], s.z * r[0]}; }
}  // namespace

CtVolume resample_to(const CtVolume& volume, const Dims& shape) {
    require_nonempty(volume, "resample_to");
    if (shape.voxels() == 0) throw ShapeError("resample_to: empty target shape");
    if (shape == volume.dims) return volume;
    const auto r = shape_ratio(volume.dims, shape);
    return from_doubles(trilinear(widen(volume.voxels), volume.dims, shape, r), shape,
                        scaled_spacing(volume.spacing, r), volume.stage);
}

SegmentationMask resample_to(const SegmentationMask& mask, const Dims& shape) {
    require_nonempty(mask, "resample_to");
    if (shape.voxels() == 0) throw ShapeError("resample_to: empty target shape");
    if (shape == mask.dims) return mask;
    const auto r = shape_ratio(mask.dims, shape);
    return threshold_mask(trilinear(widen(mask.voxels), mask.dims, shape, r), shape, scaled_spacing(mask.spacing, r));
}

CtVolume equalize_histogram(const CtVolume& volume) {
    require_finite(volume, "equalize_histogram");
    constexpr int bins = 256;
    CtVolume out(volume.dims, volume.spacing, Stage::Equalized);
    if (volume.voxels.empty()) return out;
    const auto [mn, mx] = std::minmax_element(volume.voxels.begin(), volume.voxels.end());
    const double lo = *mn, hi = *mx;
    if (!(hi > lo)) return out;
    auto bin_of = [&](float v) {
        const int b = static_cast<int>((v - lo) / (hi - lo) * bins);
        return std::clamp(b, 0, bins - 1);
    };
    std::array<std::size_t, bins> hist{};
    for (float v : volume.voxels) ++hist[bin_of(v)];
    std::array<double, bins> cdf{};
    std::size_t run = 0;
    const double n = static_cast<double>(volume.voxels.size());
    for (int b = 0; b < bins; ++b) {
        run += hist[b];
        cdf[b] = run / n;
    }
    for (std::size_t i = 0; i < volume.voxels.size(); ++i)
        out.voxels[i] = static_cast<float>(cdf[bin_of(volume.voxels[i])]);
    return out;
}

CtVolume window_clip(const CtVolume& volume, double level, double width) {
    if (!(width > 0)) throw std::invalid_argument("window width must be positive");
    if (volume.stage != Stage::RawHu) throw DataError("window_clip expects a RAW_HU volume");
    require_finite(volume, "window_clip");
    const double lo = level - width / 2;
    CtVolume out(volume.dims, volume.spacing, Stage::Windowed);
    for (std::size_t i = 0; i < volume.voxels.size(); ++i) {
        const double v = std::clamp(static_cast<double>(volume.voxels[i]), lo, lo + width);
        out.voxels[i] = static_cast<float>((v - lo) / width);
    }
    return out;
}

Voi largest_bright_component(const CtVolume& volume) {
    require_finite(volume, "extract_head_voi");
    const auto& v = volume.voxels;
    if (v.empty()) throw ExtractionError("empty volume");
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    if (!(*mx > *mn)) throw ExtractionError("no foreground: volume is constant");

    // 1D k-means with k = 2, seeded at the intensity extremes.
    double c0 = *mn, c1 = *mx;
    std::vector<std::uint8_t> fg(v.size(), 0);
    for (int iter = 0; iter < 100; ++iter) {
        const double split = 0.5 * (c0 + c1);
        double s0 = 0, s1 = 0;
        std::size_t n0 = 0, n1 = 0;
        bool changed = false;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const std::uint8_t f = v[i] > split ? 1 : 0;
            changed |= f != fg[i];
            fg[i] = f;
            if (f) {
                s1 += v[i];
                ++n1;
            } else {
                s0 += v[i];
                ++n0;
            }
        }
        if (n0 == 0 || n1 == 0) break;
        c0 = s0 / n0;
        c1 = s1 / n1;
        if (!changed && iter > 0) break;
    }

    const Dims d = volume.dims;
    std::vector<int> label(v.size(), 0);
    std::vector<std::size_t> stack;
    std::size_t best_size = 0;
    Voi best;
    int next = 0;
    for (std::size_t seed = 0; seed < v.size(); ++seed) {
        if (!fg[seed] || label[seed]) continue;
        ++next;
        label[seed] = next;
        stack.assign(1, seed);
        std::size_t size = 0;
        Voi box{d.depth, -1, d.height, -1, d.width, -1, d};
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            ++size;
            const int x = static_cast<int>(i % d.width);
            const int y = static_cast<int>((i / d.width) % d.height);
            const int z = static_cast<int>(i / d.slice());
            box.z0 = std::min(box.z0, z), box.z1 = std::max(box.z1, z + 1);
            box.y0 = std::min(box.y0, y), box.y1 = std::max(box.y1, y + 1);
            box.x0 = std::min(box.x0, x), box.x1 = std::max(box.x1, x + 1);
            auto visit = [&](bool inside, std::size_t j) {
                if (inside && fg[j] && !label[j]) {
                    label[j] = next;
                    stack.push_back(j);
                }
            };
            visit(x > 0, i - 1);
            visit(x + 1 < d.width, i + 1);
            visit(y > 0, i - d.width);
            visit(y + 1 < d.height, i + d.width);
            visit(z > 0, i - d.slice());
            visit(z + 1 < d.depth, i + d.slice());
        }
        if (size > best_size) {
            best_size = size;
            best = box;
        }
    }
    if (best_size == 0) throw ExtractionError("no foreground component");
    return best;
}

Voi extract_head_voi(const CtVolume& volume) {
    Voi box = largest_bright_component(volume);
    box.z0 = 0;
    box.z1 = volume.depth();
    return box;
}

std::pair<Voi, Voi> orbital_vois(const Voi& head) {
    if (!head.valid()) throw ShapeError("invalid head box");
    const int h = head.height(), w = head.width();
    if (h < 2 || w < 2) throw ShapeError("degenerate head box " + std::to_string(h) + "x" + std::to_string(w));
    const int s = std::max(h / 2, w / 2);
    const Dims& p = head.parent;
    if (s > p.height || s > p.width) throw ShapeError("orbital crop side exceeds the volume");
    const int y0 = std::clamp(head.y0, 0, p.height - s);
    Voi left{head.z0, head.z1, y0, y0 + s, 0, 0, p};
    Voi right = left;
    left.x0 = std::clamp(head.x0, 0, p.width - s);
    left.x1 = left.x0 + s;
    right.x1 = std::clamp(head.x1, s, p.width);
    right.x0 = right.x1 - s;
    return {left, right};
}

std::pair<CtVolume, CtVolume> crop_orbital_vois(const CtVolume& volume, const Voi& head) {
    const auto [l, r] = orbital_vois(head);
    return {crop(volume, l), crop(volume, r)};
}

CtVolume crop(const CtVolume& volume, const Voi& box) {
    CtVolume out;
    static_cast<Grid<float>&>(out) = crop_grid(static_cast<const Grid<float>&>(volume), box);
    out.stage = volume.stage;
    return out;
}

SegmentationMask crop(const SegmentationMask& mask, const Voi& box) {
    SegmentationMask out;
    static_cast<Grid<std::uint8_t>&>(out) = crop_grid(static_cast<const Grid<std::uint8_t>&>(mask), box);
    return out;
}

CtVolume crop_center(const CtVolume& volume, const Index3& center, int height, int width, int z0, int z1) {
    CtVolume out;
    static_cast<Grid<float>&>(out) =
        crop_center_grid(static_cast<const Grid<float>&>(volume), center, height, width, z0, z1);
    out.stage = volume.stage;
    return out;
}

SegmentationMask crop_center(const SegmentationMask& mask, const Index3& center, int height, int width, int z0,
                             int z1) {
    SegmentationMask out;
    static_cast<Grid<std::uint8_t>&>(out) =
        crop_center_grid(static_cast<const Grid<std::uint8_t>&>(mask), center, height, width, z0, z1);
    return out;
}

CtVolume normalize_intensity(const CtVolume& volume) {
    require_finite(volume, "normalize_intensity");
    CtVolume out(volume.dims, volume.spacing, Stage::Normalized);
    if (volume.voxels.empty()) return out;
    const auto [mn, mx] = std::minmax_element(volume.voxels.begin(), volume.voxels.end());
    const double lo = *mn, hi = *mx;
    if (!(hi > lo)) return out;
    for (std::size_t i = 0; i < volume.voxels.size(); ++i)
        out.voxels[i] = static_cast<float>(std::clamp((volume.voxels[i] - lo) / (hi - lo), 0.0, 1.0));
    return out;
}

std::vector<SliceSequence> bind_sequences(const CtVolume& volume, const SegmentationMask& mask,
                                          const std::string& subject, int seq_len) {
    if (volume.stage != Stage::Normalized) throw DataError("bind_sequences expects a NORMALIZED volume");
    if (volume.dims.voxels() == 0) throw ShapeError("bind_sequences: empty volume");
    if (!(mask.dims == volume.dims))
        throw ShapeError("bind_sequences: mask shape " + dims_string(mask.dims) + " differs from volume " +
                         dims_string(volume.dims));
    if (seq_len < 1 || seq_len % 2 == 0) throw std::invalid_argument("sequence length must be odd and positive");
    const int depth = volume.depth();
    const std::size_t plane = volume.dims.slice();
    const int half = seq_len / 2;
    std::vector<SliceSequence> out(static_cast<std::size_t>(depth));
    for (int c = 0; c < depth; ++c) {
        SliceSequence& s = out[c];
        s.seq_len = seq_len;
        s.height = volume.height();
        s.width = volume.width();
        s.subject = subject;
        s.center = c;
        s.slices.resize(plane * seq_len);
        for (int t = 0; t < seq_len; ++t) {
            const int z = std::clamp(c - half + t, 0, depth - 1);
            std::copy_n(volume.slice(z), plane, s.slices.begin() + static_cast<std::ptrdiff_t>(t * plane));
        }
        s.mask.assign(mask.slice(c), mask.slice(c) + plane);
    }
    return out;
}

Recipe parse_recipe(const std::string& name) {
    if (name == "lidc") return Recipe::Lidc;
    if (name == "pddca") return Recipe::Pddca;
    if (name == "orbit") return Recipe::Orbit;
    if (name == "synth") return Recipe::Synth;
    throw std::invalid_argument("unknown recipe '" + name + "' (expected lidc, pddca, orbit or synth)");
}

const char* recipe_name(Recipe r) {
    switch (r) {
        case Recipe::Lidc: return "lidc";
        case Recipe::Pddca: return "pddca";
        case Recipe::Orbit: return "orbit";
        case Recipe::Synth: return "synth";
    }
    return "?";
}

namespace {

PreprocessedCase finish(std::string subject, std::string part, const CtVolume& v, const SegmentationMask& m,
                        int input_size) {
    const Dims to{v.depth(), input_size, input_size};
    return {std::move(subject), std::move(part), normalize_intensity(resample_to(v, to)), resample_to(m, to)};
}

// Mask centroid and occupied slice range.
struct MaskExtent {
    Index3 centroid;
    int z0 = 0, z1 = 0;
};

MaskExtent mask_extent(const SegmentationMask& m) {
    double sz = 0, sy = 0, sx = 0;
    std::size_t n = 0;
    int z0 = m.depth(), z1 = 0;
    for (int z = 0; z < m.depth(); ++z)
        for (int y = 0; y < m.height(); ++y)
            for (int x = 0; x < m.width(); ++x)
                if (m.at(z, y, x)) {
                    sz += z, sy += y, sx += x;
                    ++n;
                    z0 = std::min(z0, z);
                    z1 = std::max(z1, z + 1);
                }
    if (n == 0) throw DataError("mask is empty; cannot locate the lesion");
    return {{static_cast<int>(std::lround(sz / n)), static_cast<int>(std::lround(sy / n)),
             static_cast<int>(std::lround(sx / n))},
            z0,
            z1};
}

}  // namespace

std::vector<PreprocessedCase> apply_recipe(Recipe recipe, const CtVolume& volume, const SegmentationMask& mask,
                                           const std::string& subject, int input_size) {
    if (!(mask.dims == volume.dims))
        throw ShapeError("subject '" + subject + "': mask shape " + dims_string(mask.dims) +
                         " differs from volume shape " + dims_string(volume.dims));
    if (input_size <= 0) throw std::invalid_argument("input size must be positive");
    std::vector<PreprocessedCase> out;
    switch (recipe) {
        case Recipe::Lidc: {
            const CtVolume iso = equalize_histogram(resample_isotropic(volume, 1.0));
            const SegmentationMask iso_mask = resample_isotropic(mask, 1.0);
            const MaskExtent e = mask_extent(iso_mask);
            constexpr int crop_mm = 64;
            out.push_back(finish(subject, "", crop_center(iso, e.centroid, crop_mm, crop_mm, e.z0, e.z1),
                                 crop_center(iso_mask, e.centroid, crop_mm, crop_mm, e.z0, e.z1), input_size));
            break;
        }
        case Recipe::Pddca: {
            const CtVolume iso = equalize_histogram(resample_isotropic(volume, 1.0));
            out.push_back(finish(subject, "", iso, resample_isotropic(mask, 1.0), input_size));
            break;
        }
        case Recipe::Orbit: {
            const CtVolume win = window_clip(volume);
            const auto [left, right] = orbital_vois(extract_head_voi(win));
            const std::pair<const char*, Voi> sides[] = {{"L", left}, {"R", right}};
            for (const auto& [tag, box] : sides) {
                SegmentationMask m = crop(mask, box);
                if (m.foreground() == 0) continue;
                out.push_back(finish(subject, tag, crop(win, box), m, input_size));
            }
            break;
        }
        case Recipe::Synth:
            out.push_back(finish(subject, "", volume, mask, input_size));
            break;
    }
    return out;
}

}  // namespace orbitseg
