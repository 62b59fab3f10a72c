#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "orbitseg/overlay.hpp"
#include "orbitseg/report.hpp"
#include "test_util.hpp"

using namespace orbitseg;

namespace {

SegmentationMask square(Dims d, int z, int y0, int x0, int side) {
    SegmentationMask m(d);
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) m.at(z, y, x) = 1;
    return m;
}

int count(const RgbImage& img, std::array<std::uint8_t, 3> c) {
    int n = 0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) n += img.at(y, x) == c;
    return n;
}

}  // namespace

TEST_CASE("overlay contour colours") {
    const Dims d{3, 12, 12};
    CtVolume v(d, {}, Stage::Normalized);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = 0.5f;
    const SegmentationMask truth = square(d, 1, 3, 3, 4);
    // A 4x4 square has 12 boundary pixels.
    SUBCASE("perfect prediction is purple only") {
        const RgbImage img = render_overlay(v, truth, truth, 1);
        CHECK(count(img, kOverlapColor) == 12);
        CHECK(count(img, kTruthColor) == 0);
        CHECK(count(img, kPredColor) == 0);
        CHECK(img.at(4, 4) == std::array<std::uint8_t, 3>{128, 128, 128});
        CHECK(img.at(0, 0) == std::array<std::uint8_t, 3>{128, 128, 128});
    }
    SUBCASE("empty prediction is blue only") {
        const RgbImage img = render_overlay(v, truth, SegmentationMask(d), 1);
        CHECK(count(img, kTruthColor) == 12);
        CHECK(count(img, kOverlapColor) == 0);
        CHECK(count(img, kPredColor) == 0);
    }
    SUBCASE("disjoint prediction is red and blue") {
        const RgbImage img = render_overlay(v, truth, square(d, 1, 8, 8, 3), 1);
        CHECK(count(img, kTruthColor) == 12);
        CHECK(count(img, kPredColor) == 8);
    }
    SUBCASE("other slices carry no contours") {
        const RgbImage img = render_overlay(v, truth, truth, 0);
        CHECK(count(img, kOverlapColor) == 0);
        CHECK(count(img, kTruthColor) == 0);
    }
    SUBCASE("invalid requests") {
        CHECK_THROWS_AS(render_overlay(v, truth, truth, 3), std::out_of_range);
        CHECK_THROWS_AS(render_overlay(v, truth, truth, -1), std::out_of_range);
        CHECK_THROWS_AS(render_overlay(v, SegmentationMask({3, 12, 11}), truth, 0), ShapeError);
    }
}

TEST_CASE("PNG round trip") {
    const auto dir = testutil::scratch("png");
    const Dims d{1, 9, 7};
    CtVolume v(d, {}, Stage::RawHu);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i) - 20.0f;
    const SegmentationMask m = square(d, 0, 2, 2, 3);
    const RgbImage img = render_overlay(v, m, SegmentationMask(d), 0);
    // Unnormalized volumes are windowed to the slice range.
    CHECK(img.at(0, 0) == std::array<std::uint8_t, 3>{0, 0, 0});
    CHECK(img.at(8, 6) == std::array<std::uint8_t, 3>{255, 255, 255});
    write_png(img, dir / "o.png");
    const RgbImage back = read_png(dir / "o.png");
    CHECK(back.width == 7);
    CHECK(back.height == 9);
    CHECK(back.pixels == img.pixels);

    emit_overlay(v, m, m, 0, dir / "e.png");
    CHECK(count(read_png(dir / "e.png"), kOverlapColor) == 8);
    std::ofstream(dir / "junk.png") << "not a png";
    CHECK_THROWS_AS(read_png(dir / "junk.png"), FormatError);
    CHECK_THROWS_AS(read_png(dir / "absent.png"), IoError);
}

TEST_CASE("report round trip") {
    const auto dir = testutil::scratch("report");
    FoldReport r;
    r.dice = {60, 70};
    r.vs = {80, 90};
    r.sensitivity = {0.5, 0.7};
    r.specificity = {0.99, 0.97};
    const ReportRow row = ReportRow::from_summary("SEQ-UNET+DA", "synthetic", aggregate_cv(r));
    CHECK(row.dice_mean == 65.0);
    CHECK(row.sensitivity == doctest::Approx(0.6));
    ReportRow other = row;
    other.method = "SEQ-UNET";
    other.dice_mean = 1.0 / 3.0;
    write_report({row, other}, dir / "r.csv");

    std::ifstream in(dir / "r.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == kReportHeader);

    const auto back = read_report(dir / "r.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].method == "SEQ-UNET+DA");
    CHECK(back[0].dataset == "synthetic");
    // Values are written with four decimals.
    CHECK(std::abs(back[0].dice_std - row.dice_std) < 1e-4);
    CHECK(std::abs(back[1].dice_mean - 1.0 / 3.0) < 1e-4);
    CHECK(back[0].specificity == doctest::Approx(0.98).epsilon(1e-9));

    std::ostringstream table;
    print_report(back, table);
    CHECK(table.str().find("SEQ-UNET+DA") != std::string::npos);
    CHECK(table.str().find("65.00") != std::string::npos);
}

TEST_CASE("malformed reports") {
    const auto dir = testutil::scratch("report_bad");
    std::ofstream(dir / "h.csv") << "method,dice\nA,1\n";
    CHECK_THROWS_AS(read_report(dir / "h.csv"), FormatError);
    std::ofstream(dir / "c.csv") << kReportHeader << "\nA,B,1,2,3\n";
    CHECK_THROWS_AS(read_report(dir / "c.csv"), FormatError);
    std::ofstream(dir / "n.csv") << kReportHeader << "\nA,B,1,2,x,4,0.5,0.5\n";
    CHECK_THROWS_AS(read_report(dir / "n.csv"), FormatError);
    std::ofstream(dir / "e.csv") << kReportHeader << "\n";
    CHECK(read_report(dir / "e.csv").empty());
}
