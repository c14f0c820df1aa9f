#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "fdsl/image.hpp"
#include "fdsl/rng.hpp"

using namespace fdsl;

namespace {

Image make_2x2() {
    Image img(2, 2, 1);
    img.at(0, 0) = 1;
    img.at(1, 0) = 2;
    img.at(0, 1) = 3;
    img.at(1, 1) = 4;
    return img;
}

Image random_image(int w, int h, int c, std::uint64_t seed) {
    Image img(w, h, c);
    Rng rng(seed);
    for (std::uint8_t& p : img.pixels) p = static_cast<std::uint8_t>(rng.index(256));
    return img;
}

} // namespace

TEST(Flip, IdentityLeavesImageUnchanged) {
    const Image img = make_2x2();
    EXPECT_EQ(apply_flip(img, 0).pixels, img.pixels);
}

TEST(Flip, HorizontalMirrorsColumns) {
    const Image out = apply_flip(make_2x2(), 1);
    EXPECT_EQ(out.at(0, 0), 2);
    EXPECT_EQ(out.at(1, 0), 1);
    EXPECT_EQ(out.at(0, 1), 4);
    EXPECT_EQ(out.at(1, 1), 3);
}

TEST(Flip, VerticalMirrorsRows) {
    const Image out = apply_flip(make_2x2(), 2);
    EXPECT_EQ(out.at(0, 0), 3);
    EXPECT_EQ(out.at(1, 0), 4);
    EXPECT_EQ(out.at(0, 1), 1);
    EXPECT_EQ(out.at(1, 1), 2);
}

TEST(Flip, BothTwiceIsInvolution) {
    const Image img = random_image(7, 5, 3, 99);
    EXPECT_EQ(apply_flip(apply_flip(img, 3), 3).pixels, img.pixels);
}

TEST(Flip, RejectsBadCode) { EXPECT_THROW(apply_flip(make_2x2(), 4), shape_error); }

TEST(Pnm, RoundTripGrayAndColor) {
    for (const int channels : {1, 3}) {
        for (std::uint64_t seed = 0; seed < 8; ++seed) {
            const Image img = random_image(13, 9, channels, seed);
            std::istringstream in(encode_pnm(img));
            const Image back = decode_pnm(in);
            EXPECT_EQ(back.width, img.width);
            EXPECT_EQ(back.height, img.height);
            EXPECT_EQ(back.channels, img.channels);
            EXPECT_EQ(back.pixels, img.pixels);
        }
    }
}

TEST(Pnm, HeaderCommentsAreSkipped) {
    std::istringstream in("P5\n# a comment\n2 1\n255\n\x0a\x14");
    const Image back = decode_pnm(in);
    EXPECT_EQ(back.at(0, 0), 10);
    EXPECT_EQ(back.at(1, 0), 20);
}

TEST(Pnm, RejectsBadMagicAndTruncation) {
    std::istringstream bad("P7\n2 2\n255\n....");
    EXPECT_THROW(decode_pnm(bad), io_error);
    std::istringstream truncated("P5\n4 4\n255\nxx");
    EXPECT_THROW(decode_pnm(truncated), io_error);
}

TEST(Pnm, AtomicWriteLeavesNoTempFile) {
    const auto dir = std::filesystem::temp_directory_path() / "fdsl_image_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "img.pgm";
    const Image img = random_image(8, 8, 1, 5);
    write_pnm(path, img);
    EXPECT_TRUE(std::filesystem::exists(path));
    EXPECT_FALSE(std::filesystem::exists(dir / "img.pgm.tmp"));
    const Image back = read_pnm(path);
    EXPECT_EQ(back.pixels, img.pixels);
    std::filesystem::remove_all(dir);
}
