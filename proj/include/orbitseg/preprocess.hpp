#pragma once

// Preprocessing chains that turn raw scans into normalized slice sequences.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "orbitseg/volume.hpp"

namespace orbitseg {

// Half-open voxel box [z0, z1) x [y0, y1) x [x0, x1) inside a parent volume.
struct Voi {
    int z0 = 0, z1 = 0;
    int y0 = 0, y1 = 0;
    int x0 = 0, x1 = 0;
    Dims parent;

    int depth() const { return z1 - z0; }
    int height() const { return y1 - y0; }
    int width() const { return x1 - x0; }
    bool valid() const;
    bool operator==(const Voi&) const = default;
};

struct Index3 {
    int z = 0, y = 0, x = 0;
};

// Trilinear resampling to an isotropic grid. Sample i of the new grid sits at
// source coordinate (i + 0.5) * target / spacing - 0.5, clamped to the grid.
CtVolume resample_isotropic(const CtVolume& volume, double target_spacing);
SegmentationMask resample_isotropic(const SegmentationMask& mask, double target_spacing);

// Trilinear resampling to an explicit shape; spacing scales accordingly.
// Masks are interpolated and re-thresholded at 0.5.
CtVolume resample_to(const CtVolume& volume, const Dims& shape);
SegmentationMask resample_to(const SegmentationMask& mask, const Dims& shape);

// Whole-volume equalization over 256 bins: each voxel maps to the cumulative
// fraction of voxels in its bin or below. A constant volume maps to zeros.
CtVolume equalize_histogram(const CtVolume& volume);

// Clamp to [level - width/2, level + width/2] and map affinely to [0, 1].
CtVolume window_clip(const CtVolume& volume, double level = 48.0, double width = 400.0);

// Two-cluster k-means on intensity; returns the tight box of the largest
// 6-connected component of the brighter cluster.
Voi largest_bright_component(const CtVolume& volume);

// Head box: the in-plane extent of largest_bright_component, all slices in depth.
Voi extract_head_voi(const CtVolume& volume);

// Square s x s crops over all slices, s = max(h/2, w/2) of the head box. The
// first is anchored at the box's top-left corner, the second at its top-right.
std::pair<Voi, Voi> orbital_vois(const Voi& head);
std::pair<CtVolume, CtVolume> crop_orbital_vois(const CtVolume& volume, const Voi& head);

CtVolume crop(const CtVolume& volume, const Voi& box);
SegmentationMask crop(const SegmentationMask& mask, const Voi& box);

// Axial height x width window centred on (center.y, center.x) over slices
// [z0, z1) (z1 < 0 means the last slice). Outside the volume is zero.
CtVolume crop_center(const CtVolume& volume, const Index3& center, int height, int width, int z0 = 0, int z1 = -1);
SegmentationMask crop_center(const SegmentationMask& mask, const Index3& center, int height, int width, int z0 = 0,
                             int z1 = -1);

// Per-volume min-max scaling to [0, 1]; a constant volume maps to zeros.
CtVolume normalize_intensity(const CtVolume& volume);

// seq_len consecutive slices around a centre slice plus the centre mask.
struct SliceSequence {
    int seq_len = 3;
    int height = 0;
    int width = 0;
    std::vector<float> slices;          // seq_len x height x width
    std::vector<std::uint8_t> mask;     // height x width
    std::string subject;
    int center = 0;

    std::size_t foreground() const;
};

// One sequence per slice, neighbours edge-replicated at the volume ends.
std::vector<SliceSequence> bind_sequences(const CtVolume& volume, const SegmentationMask& mask,
                                          const std::string& subject = {}, int seq_len = 3);

enum class Recipe { Lidc, Pddca, Orbit, Synth };

Recipe parse_recipe(const std::string& name);
const char* recipe_name(Recipe r);

struct PreprocessedCase {
    std::string subject;  // manifest subject id
    std::string part;     // "L" / "R" for orbital crops, empty otherwise
    CtVolume volume;
    SegmentationMask mask;

    std::string name() const { return part.empty() ? subject : subject + "_" + part; }
};

// Runs a full chain on one (volume, mask) pair, ending in `input_size` x
// `input_size` normalized slices:
//   lidc   resample to 1 mm, equalize, 64 mm crop around the mask centroid over
//          the slices the mask occupies, normalize
//   pddca  resample to 1 mm, equalize, normalize
//   orbit  window clip, head box, both orbital crops (only those containing
//          foreground are kept), normalize
//   synth  normalize
// The (volume, mask) pair is resized in-plane to input_size at the end.
std::vector<PreprocessedCase> apply_recipe(Recipe recipe, const CtVolume& volume, const SegmentationMask& mask,
                                           const std::string& subject, int input_size);

}  // namespace orbitseg
