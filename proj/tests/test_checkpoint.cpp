#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fdsl/checkpoint.hpp"

using namespace fdsl;

namespace {

ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.image_h = cfg.image_w = 16;
    cfg.channels = 1;
    cfg.patch = 8;
    cfg.dim = 12;
    cfg.heads = 3;
    cfg.head_dim = 4;
    cfg.layers = 2;
    cfg.classes = 5;
    cfg.mlp_hidden = 24;
    return cfg;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    const ModelConfig cfg = small_cfg();
    const VitParams<float> params = init_vit_params<float>(cfg, 77);
    const auto dir = std::filesystem::temp_directory_path() / "fdsl_ckpt_test";
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "a.fdsl", params, cfg);
    auto [loaded, loaded_cfg] = load_checkpoint(dir / "a.fdsl");
    save_checkpoint(dir / "b.fdsl", loaded, loaded_cfg);
    EXPECT_EQ(slurp(dir / "a.fdsl"), slurp(dir / "b.fdsl"));
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, EncodedLayoutStartsWithMagicAndVersion) {
    const ModelConfig cfg = small_cfg();
    const std::string bytes = encode_checkpoint(init_vit_params<float>(cfg, 1), cfg);
    ASSERT_GE(bytes.size(), 8u);
    EXPECT_EQ(bytes.substr(0, 4), "FDSL");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 0);
    EXPECT_EQ(bytes[6], 0);
    EXPECT_EQ(bytes[7], 0);
}

TEST(Checkpoint, RoundTripPreservesConfigAndValues) {
    const ModelConfig cfg = small_cfg();
    const VitParams<float> params = init_vit_params<float>(cfg, 31);
    const auto dir = std::filesystem::temp_directory_path() / "fdsl_ckpt_rt";
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "c.fdsl", params, cfg);
    auto [loaded, loaded_cfg] = load_checkpoint(dir / "c.fdsl");
    EXPECT_EQ(loaded_cfg.dim, cfg.dim);
    EXPECT_EQ(loaded_cfg.classes, cfg.classes);
    EXPECT_EQ(loaded_cfg.layers, cfg.layers);
    EXPECT_EQ(loaded.pos_embed.data, params.pos_embed.data);
    EXPECT_EQ(loaded.layers[1].mlp_w2.data, params.layers[1].mlp_w2.data);
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ExpectedConfigMismatchThrows) {
    const ModelConfig cfg = small_cfg();
    const auto dir = std::filesystem::temp_directory_path() / "fdsl_ckpt_mm";
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "d.fdsl", init_vit_params<float>(cfg, 3), cfg);
    ModelConfig other = cfg;
    other.classes = 7;
    EXPECT_THROW(load_checkpoint(dir / "d.fdsl", other), shape_error);
    EXPECT_NO_THROW(load_checkpoint(dir / "d.fdsl", cfg));
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsGarbageAndTruncation) {
    const auto dir = std::filesystem::temp_directory_path() / "fdsl_ckpt_bad";
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "bad.fdsl", std::ios::binary);
        out << "NOPE1234";
    }
    EXPECT_THROW(load_checkpoint(dir / "bad.fdsl"), io_error);
    {
        const ModelConfig cfg = small_cfg();
        const std::string bytes = encode_checkpoint(init_vit_params<float>(cfg, 5), cfg);
        std::ofstream out(dir / "trunc.fdsl", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    EXPECT_THROW(load_checkpoint(dir / "trunc.fdsl"), io_error);
    std::filesystem::remove_all(dir);
}
