#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "r2bd/array_io.hpp"
#include "r2bd/checkpoint.hpp"
#include "r2bd/error.hpp"
#include "r2bd/image_io.hpp"
#include "r2bd/manifest.hpp"
#include "r2bd/rng.hpp"

using namespace r2bd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("r2bd_io_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ManifestEntry entry(std::string id, std::string label, std::string family, std::string method, std::string split) {
    return {.id = id,
            .path = "images/" + id + ".png",
            .label = std::move(label),
            .generator_family = std::move(family),
            .method_name = std::move(method),
            .split = std::move(split),
            .hash = "0"};
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
    Rng rng(1);
    Checkpoint ck;
    ck.kind = "test";
    ck.config = {{"a", 1}, {"nested", {{"b", "x"}}}};
    Tensor special({4}, std::vector<double>{0.1, -0.0, std::numeric_limits<double>::denorm_min(), 1e308});
    ck.arrays = {{"p.one", rng.normal_tensor({3, 4})}, {"p.two", special}, {"q", Tensor({1}, 7.0)}};
    const auto dir = temp_dir("ckpt");
    save_checkpoint(ck, dir / "c.ckpt");
    const Checkpoint back = load_checkpoint(dir / "c.ckpt");
    EXPECT_EQ(back.kind, "test");
    EXPECT_EQ(back.config, ck.config);
    ASSERT_EQ(back.arrays.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back.arrays[i].first, ck.arrays[i].first);
        EXPECT_EQ(back.arrays[i].second.shape(), ck.arrays[i].second.shape());
        EXPECT_EQ(std::memcmp(back.arrays[i].second.data(), ck.arrays[i].second.data(),
                              ck.arrays[i].second.size() * sizeof(double)),
                  0);
    }
    EXPECT_EQ(back.group("p").size(), 2u);
    EXPECT_TRUE(back.has("q"));
    EXPECT_THROW(back.array("missing"), ValidationError);
}

TEST(Checkpoint, RejectsGarbageAndTruncation) {
    const auto dir = temp_dir("bad");
    {
        std::ofstream(dir / "garbage.ckpt") << "not a checkpoint at all";
    }
    EXPECT_THROW(load_checkpoint(dir / "garbage.ckpt"), ValidationError);
    Checkpoint ck;
    ck.kind = "k";
    ck.arrays = {{"a", Tensor({100}, 1.0)}};
    save_checkpoint(ck, dir / "full.ckpt");
    fs::copy_file(dir / "full.ckpt", dir / "cut.ckpt");
    fs::resize_file(dir / "cut.ckpt", fs::file_size(dir / "full.ckpt") - 17);
    EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), ValidationError);
}

TEST(ArrayIo, Float32RoundTripAndHeader) {
    Rng rng(2);
    const Tensor t = rng.normal_tensor({2, 3, 5});
    const auto dir = temp_dir("array");
    write_array_f32(dir / "a.r2ba", t);
    const Tensor back = read_array_f32(dir / "a.r2ba");
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(back.storage(), round_to_float(t).storage());
    EXPECT_EQ(fs::file_size(dir / "a.r2ba"), 8u + 4u + 3u * 4u + 30u * 4u);
    std::ifstream in(dir / "a.r2ba", std::ios::binary);
    char head[8];
    in.read(head, 8);
    EXPECT_EQ(std::string(head, 4), "R2BA");
    EXPECT_EQ(head[5], 'L');
    EXPECT_EQ(head[6], 'f');
    EXPECT_EQ(file_hash(dir / "a.r2ba"), file_hash(dir / "a.r2ba"));
}

TEST(ImageIo, PngRoundTripIsExactOnTheByteGrid) {
    Rng rng(3);
    Tensor img = rng.uniform_tensor({3, 7, 9}, -1.0, 1.0);
    // Quantize to the 8-bit grid first; then the PNG round trip must be exact.
    img = from_rgb8(to_rgb8(img));
    const auto dir = temp_dir("png");
    write_png(dir / "x.png", img);
    const Tensor back = read_png(dir / "x.png");
    EXPECT_EQ(back.shape(), (Shape{3, 7, 9}));
    EXPECT_EQ(back.storage(), img.storage());
    EXPECT_NO_THROW(validate_image(back, 7, 9));
    EXPECT_THROW(validate_image(back, 8, 9), ValidationError);
    EXPECT_THROW(validate_image(Tensor({3, 7, 9}, 1.5), 7, 9), ValidationError);
}

TEST(ImageIo, QuantizationClampsAndRounds) {
    const Tensor img({3, 1, 2}, std::vector<double>{-2.0, 2.0, 0.0, 1.0, -1.0, 0.5});
    const Rgb8 r = to_rgb8(img);
    EXPECT_EQ(r.pixels[0], 0);    // clamped
    EXPECT_EQ(r.pixels[3], 255);  // clamped, second pixel channel 0
    EXPECT_EQ(r.pixels[1], 128);  // 0.0 -> 127.5 rounds to 128
    EXPECT_THROW(read_png(temp_dir("missing") / "none.png"), std::exception);
}

TEST(Manifest, JsonlRoundTripAndFilters) {
    DatasetManifest m;
    m.entries = {entry("r1", "real", "none", "procedural", "train"), entry("f1", "fake", "gan", "gan_a", "train"),
                 entry("f2", "fake", "pixeldm", "pixeldm_b", "cross_test")};
    ASSERT_NO_THROW(validate_manifest(m));
    const auto dir = temp_dir("manifest");
    write_manifest(m, dir / "m.jsonl");
    const DatasetManifest back = read_manifest(dir / "m.jsonl");
    ASSERT_EQ(back.size(), 3u);
    EXPECT_EQ(back.entries[2].method_name, "pixeldm_b");
    EXPECT_EQ(back.filter_split("train").size(), 2u);
    EXPECT_EQ(back.filter([](const ManifestEntry& e) { return e.is_fake(); }).size(), 2u);
}

TEST(Manifest, ValidationRejectsInconsistentEntries) {
    auto bad = [](ManifestEntry e) {
        DatasetManifest m;
        m.entries = {entry("ok", "real", "none", "procedural", "train"), std::move(e)};
        return m;
    };
    EXPECT_THROW(validate_manifest(bad(entry("ok", "fake", "gan", "g", "train"))), ValidationError);
    EXPECT_THROW(validate_manifest(bad(entry("x", "maybe", "gan", "g", "train"))), ValidationError);
    EXPECT_THROW(validate_manifest(bad(entry("x", "fake", "vae", "g", "train"))), ValidationError);
    EXPECT_THROW(validate_manifest(bad(entry("x", "real", "gan", "g", "train"))), ValidationError);
    EXPECT_THROW(validate_manifest(bad(entry("x", "fake", "none", "g", "train"))), ValidationError);
    EXPECT_THROW(validate_manifest(bad(entry("x", "fake", "gan", "g", "validation"))), ValidationError);
}
