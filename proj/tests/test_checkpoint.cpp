#include <fstream>
#include <iterator>

#include "doctest.h"
#include "orbitseg/checkpoint.hpp"
#include "test_util.hpp"

using namespace orbitseg;
namespace fs = std::filesystem;

namespace {

const ModelConfig kTiny{16, 3, 16};

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Standard 64-bit FNV-1a.
std::uint64_t fnv1a(const char* p, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(p[i]);
        h *= 0x100000001b3ull;
    }
    return h;
}

void reseal(std::vector<char>& bytes) {
    const std::size_t body = bytes.size() - 8;
    const std::uint64_t h = fnv1a(bytes.data(), body);
    for (int i = 0; i < 8; ++i) bytes[body + i] = static_cast<char>((h >> (8 * i)) & 0xff);
}

Checkpoint sample(bool with_disc) {
    Checkpoint ck(kTiny, 11);
    ck.method = "adapt";
    ck.epoch = 42;
    ck.loss = 0.123456789;
    Adam<float> opt(AdamConfig{1e-3});
    opt.add_all(ck.net.params(), [](ParamGroup g) { return !in_extractor(g); });
    Rng rng(3);
    ck.net.params().for_each([&](const std::string&, ParamGroup, Weight<float>& w) {
        for (auto& g : w.grad.vec()) g = static_cast<float>(rng.uniform(-1, 1));
    });
    opt.step();
    opt.step();
    ck.optimizers.push_back(OptimizerState::capture("seg", opt));
    if (with_disc) ck.disc.emplace(kTiny, 12);
    return ck;
}

}  // namespace

TEST_CASE("round trip reproduces the network bit-for-bit") {
    const auto dir = testutil::scratch("ck_roundtrip");
    const Checkpoint ck = sample(true);
    save_checkpoint(ck, dir / "a.ck");
    const Checkpoint back = load_checkpoint(dir / "a.ck", &kTiny);
    CHECK(back.method == "adapt");
    CHECK(back.epoch == 42);
    CHECK(back.loss == ck.loss);
    CHECK(back.model.width_divisor == 16);
    REQUIRE(back.disc.has_value());

    std::vector<const Tensor<float>*> a, b;
    ck.net.params().for_each([&](const std::string&, ParamGroup, const Weight<float>& w) { a.push_back(&w.value); });
    back.net.params().for_each([&](const std::string&, ParamGroup, const Weight<float>& w) { b.push_back(&w.value); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->vec() == b[i]->vec());

    Rng rng(5);
    const auto x = testutil::random_tensor<float>({6, 1, 16, 16}, rng, 0, 1);
    SeqUnetCache<float> c1, c2;
    ck.net.forward(x, 2, c1);
    back.net.forward(x, 2, c2);
    CHECK(c1.prob.vec() == c2.prob.vec());
    DiscriminatorCache<float> d1, d2;
    ck.disc->forward(c1.bottleneck, 2, d1);
    back.disc->forward(c2.bottleneck, 2, d2);
    CHECK(d1.logits.vec() == d2.logits.vec());

    // Saving the loaded checkpoint reproduces the file exactly.
    save_checkpoint(back, dir / "b.ck");
    CHECK(slurp(dir / "a.ck") == slurp(dir / "b.ck"));
}

TEST_CASE("optimizer state survives a round trip") {
    const auto dir = testutil::scratch("ck_opt");
    Checkpoint ck = sample(false);
    save_checkpoint(ck, dir / "o.ck");
    Checkpoint back = load_checkpoint(dir / "o.ck");
    CHECK_FALSE(back.disc.has_value());
    REQUIRE(back.optimizers.size() == 1);
    const OptimizerState& s = back.optimizers[0];
    CHECK(s.label == "seg");
    CHECK(s.steps == 2);
    const OptimizerState& orig = ck.optimizers[0];
    REQUIRE(s.m.size() == orig.m.size());
    for (std::size_t i = 0; i < s.m.size(); ++i) {
        CHECK(s.m[i].name == orig.m[i].name);
        CHECK(s.m[i].value.vec() == orig.m[i].value.vec());
        CHECK(s.v[i].value.vec() == orig.v[i].value.vec());
    }

    Adam<float> fresh(AdamConfig{1e-3});
    fresh.add_all(back.net.params(), [](ParamGroup g) { return !in_extractor(g); });
    s.restore(fresh);
    CHECK(fresh.steps() == 2);
    Adam<float> wrong(AdamConfig{1e-3});
    wrong.add_all(back.net.params(), [](ParamGroup) { return true; });
    CHECK_THROWS_AS(s.restore(wrong), ConfigMismatchError);
}

TEST_CASE("damaged checkpoints are rejected") {
    const auto dir = testutil::scratch("ck_damage");
    save_checkpoint(sample(true), dir / "good.ck");
    const auto good = slurp(dir / "good.ck");

    SUBCASE("truncated") {
        for (std::size_t keep : {std::size_t{0}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
            spill(dir / "t.ck", std::vector<char>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(keep)));
            CAPTURE(keep);
            CHECK_THROWS_AS(load_checkpoint(dir / "t.ck"), CorruptionError);
        }
    }
    SUBCASE("flipped payload byte") {
        auto bad = good;
        bad[bad.size() / 2] ^= 0x10;
        spill(dir / "f.ck", bad);
        CHECK_THROWS_AS(load_checkpoint(dir / "f.ck"), CorruptionError);
    }
    SUBCASE("wrong magic") {
        auto bad = good;
        bad[0] = 'X';
        spill(dir / "m.ck", bad);
        CHECK_THROWS_AS(load_checkpoint(dir / "m.ck"), CorruptionError);
    }
    SUBCASE("future version") {
        auto bad = good;
        bad[8] = 2;
        spill(dir / "v.ck", bad);
        CHECK_THROWS_AS(load_checkpoint(dir / "v.ck"), VersionError);
    }
    SUBCASE("inconsistent fingerprint with a valid checksum") {
        auto bad = good;
        bad[12] ^= 0x01;
        reseal(bad);
        spill(dir / "p.ck", bad);
        CHECK_THROWS_AS(load_checkpoint(dir / "p.ck"), CorruptionError);
    }
    SUBCASE("trailing bytes with a valid checksum") {
        auto bad = good;
        bad.insert(bad.end() - 8, 'z');
        reseal(bad);
        spill(dir / "x.ck", bad);
        CHECK_THROWS_AS(load_checkpoint(dir / "x.ck"), CorruptionError);
    }
    SUBCASE("missing file and missing directory") {
        CHECK_THROWS_AS(load_checkpoint(dir / "absent.ck"), IoError);
        CHECK_THROWS_AS(save_checkpoint(sample(false), dir / "no" / "such" / "a.ck"), IoError);
    }
}

TEST_CASE("architecture mismatch") {
    const auto dir = testutil::scratch("ck_mismatch");
    save_checkpoint(sample(false), dir / "c.ck");
    const ModelConfig other{16, 3, 8};
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ck", &other), ConfigMismatchError);
    const ModelConfig bigger{32, 3, 16};
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ck", &bigger), ConfigMismatchError);
    CHECK_NOTHROW(load_checkpoint(dir / "c.ck", &kTiny));
}
