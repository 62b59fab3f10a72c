#include "orbitseg/overlay.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>

#include "orbitseg/errors.hpp"

namespace fs = std::filesystem;

namespace orbitseg {

std::array<std::uint8_t, 3> RgbImage::at(int y, int x) const {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
}

namespace {

// Foreground pixels with a background 4-neighbour; the image border counts as background.
std::vector<std::uint8_t> contour(const SegmentationMask& m, int z) {
    const int h = m.height(), w = m.width();
    std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w, 0);
    auto fg = [&](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w && m.at(z, y, x) != 0; };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)))
                out[static_cast<std::size_t>(y) * w + x] = 1;
    return out;
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace

RgbImage render_overlay(const CtVolume& volume, const SegmentationMask& truth, const SegmentationMask& pred, int slice) {
    if (!(truth.dims == volume.dims) || !(pred.dims == volume.dims))
        throw ShapeError("overlay: masks must match the volume shape " + dims_string(volume.dims));
    if (slice < 0 || slice >= volume.depth())
        throw std::out_of_range("overlay: slice " + std::to_string(slice) + " outside [0, " +
                                std::to_string(volume.depth()) + ")");
    RgbImage img;
    img.height = volume.height();
    img.width = volume.width();
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    const float* s = volume.slice(slice);
    const std::size_t n = volume.dims.slice();
    float lo = 0.0f, hi = 1.0f;
    if (volume.stage != Stage::Normalized && n > 0) {
        const auto [a, b] = std::minmax_element(s, s + n);
        lo = *a;
        hi = *b > *a ? *b : *a + 1.0f;
    }
    const auto ct = contour(truth, slice);
    const auto cp = contour(pred, slice);
    for (std::size_t i = 0; i < n; ++i) {
        std::array<std::uint8_t, 3> c;
        if (ct[i] && cp[i]) c = kOverlapColor;
        else if (ct[i]) c = kTruthColor;
        else if (cp[i]) c = kPredColor;
        else {
            const float g = std::clamp((s[i] - lo) / (hi - lo), 0.0f, 1.0f);
            const auto v = static_cast<std::uint8_t>(g * 255.0f + 0.5f);
            c = {v, v, v};
        }
        std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(i * 3));
    }
    return img;
}

void write_png(const RgbImage& img, const fs::path& path) {
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.string().c_str(), "wb"));
    if (!f) throw IoError("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng initialisation failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encoding failed: " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

RgbImage read_png(const fs::path& path) {
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.string().c_str(), "rb"));
    if (!f) throw IoError("cannot open image: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng initialisation failed");
    png_infop info = png_create_info_struct(png);
    RgbImage img;
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("PNG decoding failed: " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB || png_get_bit_depth(png, info) != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("expected an 8-bit RGB PNG: " + path.string());
    }
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y)
        png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void emit_overlay(const CtVolume& volume, const SegmentationMask& truth, const SegmentationMask& pred, int slice,
                  const fs::path& path) {
    write_png(render_overlay(volume, truth, pred, slice), path);
}

}  // namespace orbitseg
