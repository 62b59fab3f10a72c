#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "json.hpp"
#include "orbitseg/volume.hpp"
#include "test_util.hpp"

using namespace orbitseg;
namespace fs = std::filesystem;

namespace {

void write_raw(const fs::path& path, const std::vector<float>& values, Dims d, const char* stage = "RAW_HU") {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
    nlohmann::json meta = {{"shape", {d.depth, d.height, d.width}}, {"spacing", {1.0, 1.0, 1.0}}, {"stage", stage}};
    std::ofstream(sidecar_path(path)) << meta.dump();
}

CtVolume ramp(Dims d) {
    CtVolume v(d, {0.5, 0.75, 2.0}, Stage::RawHu);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i) * 0.25f - 3.0f;
    return v;
}

}  // namespace

TEST_CASE("zero volume round trip") {
    const auto dir = testutil::scratch("zero");
    write_raw(dir / "z.vox", std::vector<float>(64, 0.0f), {4, 4, 4});
    const CtVolume v = load_volume(dir / "z.vox");
    CHECK(v.dims == Dims{4, 4, 4});
    CHECK(v.stage == Stage::RawHu);
    CHECK(v.spacing == Spacing{1, 1, 1});
    for (float x : v.voxels) CHECK(x == 0.0f);
}

TEST_CASE("save then load is bit-identical") {
    const auto dir = testutil::scratch("roundtrip");
    CtVolume v = ramp({3, 5, 7});
    v.voxels[4] = -0.0f;
    v.voxels[5] = std::numeric_limits<float>::denorm_min();
    save_volume(v, dir / "r.vox");
    CHECK(fs::file_size(dir / "r.vox") == 4 * v.voxels.size());
    const CtVolume w = load_volume(dir / "r.vox");
    CHECK(w.dims == v.dims);
    CHECK(w.spacing == v.spacing);
    CHECK(w.stage == v.stage);
    REQUIRE(w.voxels.size() == v.voxels.size());
    CHECK(std::memcmp(w.voxels.data(), v.voxels.data(), 4 * v.voxels.size()) == 0);
    const VolumeHeader h = read_header(dir / "r.vox");
    CHECK(h.dims == v.dims);
}

TEST_CASE("zero volume file size is four bytes per voxel") {
    const auto dir = testutil::scratch("size");
    save_volume(CtVolume({2, 3, 4}, {}, Stage::RawHu), dir / "s.vox");
    CHECK(fs::file_size(dir / "s.vox") == 96);
}

TEST_CASE("format and data errors") {
    const auto dir = testutil::scratch("errors");
    SUBCASE("missing sidecar") {
        std::ofstream(dir / "a.vox", std::ios::binary) << std::string(16, '\0');
        CHECK_THROWS_AS(load_volume(dir / "a.vox"), FormatError);
    }
    SUBCASE("wrong byte count") {
        write_raw(dir / "b.vox", std::vector<float>(7, 0.0f), {2, 2, 2});
        CHECK_THROWS_AS(load_volume(dir / "b.vox"), FormatError);
    }
    SUBCASE("NaN voxel is a data error naming the file") {
        std::vector<float> vals(8, 1.0f);
        vals[3] = std::nanf("");
        write_raw(dir / "c.vox", vals, {2, 2, 2});
        try {
            load_volume(dir / "c.vox");
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("c.vox") != std::string::npos);
        }
    }
    SUBCASE("infinite voxel") {
        std::vector<float> vals(8, 1.0f);
        vals[0] = std::numeric_limits<float>::infinity();
        write_raw(dir / "d.vox", vals, {2, 2, 2});
        CHECK_THROWS_AS(load_volume(dir / "d.vox"), DataError);
    }
    SUBCASE("malformed sidecar") {
        std::ofstream(dir / "e.vox", std::ios::binary) << std::string(32, '\0');
        std::ofstream(sidecar_path(dir / "e.vox")) << "{not json";
        CHECK_THROWS_AS(load_volume(dir / "e.vox"), FormatError);
    }
    SUBCASE("missing file") { CHECK_THROWS(load_volume(dir / "nothing.vox")); }
}

TEST_CASE("masks must be binary") {
    const auto dir = testutil::scratch("masks");
    SegmentationMask m({2, 2, 2});
    m.voxels[1] = m.voxels[6] = 1;
    save_mask(m, dir / "m.vox");
    const SegmentationMask back = load_mask(dir / "m.vox");
    CHECK(back.voxels == m.voxels);
    CHECK(back.foreground() == 2);

    std::vector<float> vals(8, 0.0f);
    vals[2] = 0.5f;
    write_raw(dir / "bad.vox", vals, {2, 2, 2});
    CHECK_THROWS_AS(load_mask(dir / "bad.vox"), DataError);
}

TEST_CASE("manifests") {
    const auto dir = testutil::scratch("manifest");
    const Dims d{2, 3, 3};
    save_volume(CtVolume(d, {}, Stage::RawHu), dir / "a.vox");
    save_mask(SegmentationMask(d), dir / "a_mask.vox");
    save_volume(CtVolume(d, {}, Stage::RawHu), dir / "b.vox");
    save_mask(SegmentationMask(d), dir / "b_mask.vox");
    save_volume(CtVolume(d, {}, Stage::RawHu), dir / "c.vox");
    save_mask(SegmentationMask(d), dir / "c_mask.vox");

    SUBCASE("two source and one target entry") {
        std::ofstream(dir / "m.tsv") << "# subject\tdomain\tvolume\tmask\n"
                                     << "a\tSOURCE\ta.vox\ta_mask.vox\n\n"
                                     << "b\tSOURCE\tb.vox\tb_mask.vox\n"
                                     << "c\tTARGET\tc.vox\tc_mask.vox\n";
        const DatasetManifest m = load_manifest(dir / "m.tsv");
        REQUIRE(m.entries.size() == 3);
        CHECK(m.with_domain(Domain::Source).size() == 2);
        CHECK(m.with_domain(Domain::Target).size() == 1);
        CHECK(m.find("c")->domain == Domain::Target);
        CHECK(m.find("zzz") == nullptr);
        CHECK(fs::equivalent(m.find("a")->volume, dir / "a.vox"));

        save_manifest(m, dir / "copy.tsv");
        const DatasetManifest again = load_manifest(dir / "copy.tsv");
        REQUIRE(again.entries.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(again.entries[i].subject == m.entries[i].subject);
            CHECK(again.entries[i].domain == m.entries[i].domain);
            CHECK(fs::equivalent(again.entries[i].mask, m.entries[i].mask));
        }
    }
    SUBCASE("empty manifest is valid") {
        std::ofstream(dir / "empty.tsv") << "# nothing here\n";
        CHECK(load_manifest(dir / "empty.tsv").entries.empty());
    }
    SUBCASE("mask shape mismatch names the subject") {
        save_mask(SegmentationMask({2, 3, 4}), dir / "wrong_mask.vox");
        std::ofstream(dir / "bad.tsv") << "patient7\tTARGET\ta.vox\twrong_mask.vox\n";
        try {
            load_manifest(dir / "bad.tsv");
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            CHECK(std::string(e.what()).find("patient7") != std::string::npos);
        }
    }
    SUBCASE("duplicate subject and unknown domain") {
        std::ofstream(dir / "dup.tsv") << "a\tSOURCE\ta.vox\ta_mask.vox\na\tTARGET\tb.vox\tb_mask.vox\n";
        CHECK_THROWS_AS(load_manifest(dir / "dup.tsv"), FormatError);
        std::ofstream(dir / "tag.tsv") << "a\tELSEWHERE\ta.vox\ta_mask.vox\n";
        CHECK_THROWS_AS(load_manifest(dir / "tag.tsv"), FormatError);
        std::ofstream(dir / "cols.tsv") << "a\tSOURCE\ta.vox\n";
        CHECK_THROWS_AS(load_manifest(dir / "cols.tsv"), FormatError);
    }
}

TEST_CASE("domain and stage names") {
    CHECK(parse_domain("SOURCE") == Domain::Source);
    CHECK(std::string(domain_name(Domain::Target)) == "TARGET");
    CHECK_THROWS(parse_domain("source?"));
    CHECK(std::string(stage_name(Stage::Normalized)) == "NORMALIZED");
}
