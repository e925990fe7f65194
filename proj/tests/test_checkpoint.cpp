#include "radiance/checkpoint.hpp"
#include "radiance/ldm.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace radiance;

namespace {

ldm::LdmConfig tiny() {
    ldm::LdmConfig c;
    c.hidden_size = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.cross_heads = 2;
    c.n_rbf = 4;
    c.prompt_dim = 4;
    c.time_features = 4;
    c.position_features = 4;
    return c;
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresRoundedWeights) {
    const ldm::Denoiser a(tiny(), 1);
    ckpt::Archive ar;
    ar.add_section("ldm", a.params(), nlohmann::json(a.config()));
    const auto back = ckpt::deserialize(ckpt::serialize(ar));
    ldm::Denoiser b(back.section_config("ldm").get<ldm::LdmConfig>(), 2);
    back.restore("ldm", b.params());
    for (const auto& [name, v] : a.params().all()) {
        const ag::Matrix expected = v.value().cast<float>().cast<double>();
        EXPECT_EQ(b.params().at(name).value(), expected) << name;
    }
}

TEST(Checkpoint, FileRoundTrip) {
    const ldm::Denoiser a(tiny(), 3);
    ckpt::Archive ar;
    ar.add_section("ldm", a.params(), nlohmann::json(a.config()));
    ar.manifest["note"] = "x";
    const auto path = std::filesystem::temp_directory_path() / "radiance_ckpt_test.bin";
    ckpt::save(ar, path.string());
    const auto back = ckpt::load(path.string());
    std::filesystem::remove(path);
    EXPECT_EQ(back.manifest["note"], "x");
    EXPECT_EQ(back.tensors.size(), ar.tensors.size());
}

TEST(Checkpoint, CorruptionDetected) {
    const ldm::Denoiser a(tiny(), 4);
    ckpt::Archive ar;
    ar.add_section("ldm", a.params(), {});
    std::string bytes = ckpt::serialize(ar);
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    EXPECT_THROW(ckpt::deserialize(flipped), std::runtime_error);
    EXPECT_THROW(ckpt::deserialize("NOPE" + bytes.substr(4)), std::runtime_error);
    EXPECT_THROW(ckpt::deserialize(bytes.substr(0, 10)), std::runtime_error);
}

TEST(Checkpoint, ShapeOrNameMismatchRejected) {
    const ldm::Denoiser a(tiny(), 5);
    ckpt::Archive ar;
    ar.add_section("ldm", a.params(), {});
    auto cfg = tiny();
    cfg.n_layers = 2;
    ldm::Denoiser bigger(cfg, 5);
    EXPECT_THROW(ar.restore("ldm", bigger.params()), std::runtime_error);
    EXPECT_THROW(ar.section_config("vae"), std::runtime_error);
}

TEST(Checkpoint, CopySection) {
    const ldm::Denoiser a(tiny(), 6);
    ckpt::Archive src;
    src.add_section("ldm", a.params(), {{"k", 1}});
    ckpt::Archive dst;
    dst.copy_section(src, "ldm");
    EXPECT_EQ(dst.section_config("ldm")["k"], 1);
    EXPECT_EQ(dst.tensors.size(), src.tensors.size());
}
