#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fdsl/common.hpp"

namespace fdsl {

// 8-bit image, row-major, channels interleaved. channels is 1 (gray) or 3.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c) : width(w), height(h), channels(c) {
        pixels.assign(static_cast<std::size_t>(w) * h * c, 0);
    }

    std::uint8_t& at(int x, int y, int c = 0) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int x, int y, int c = 0) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool empty() const { return pixels.empty(); }
};

// flip codes: 0 = none, 1 = horizontal mirror, 2 = vertical mirror, 3 = both
inline Image apply_flip(const Image& img, int flip) {
    if (flip < 0 || flip > 3) throw shape_error("apply_flip: flip must be 0..3");
    if (flip == 0) return img;
    Image out(img.width, img.height, img.channels);
    const bool h = flip & 1, v = flip & 2;
    for (int y = 0; y < img.height; ++y) {
        const int sy = v ? img.height - 1 - y : y;
        for (int x = 0; x < img.width; ++x) {
            const int sx = h ? img.width - 1 - x : x;
            for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(sx, sy, c);
        }
    }
    return out;
}

// --- binary PGM (P5) / PPM (P6), maxval 255 ---

inline std::string encode_pnm(const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw io_error("encode_pnm: only 1- or 3-channel images");
    std::ostringstream os;
    os << (img.channels == 1 ? "P5" : "P6") << "\n"
       << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size()));
    return os.str();
}

namespace detail {
inline int next_pnm_int(std::istream& in) {
    // Skips whitespace and '#' comments between header fields.
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = in.get();
    }
    if (ch == EOF || !std::isdigit(ch)) throw io_error("pnm: malformed header");
    int value = 0;
    while (ch != EOF && std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        ch = in.get();
    }
    return value;
}
} // namespace detail

inline Image decode_pnm(std::istream& in) {
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || (m1 != '5' && m1 != '6')) throw io_error("pnm: bad magic (want P5/P6)");
    const int channels = (m1 == '5') ? 1 : 3;
    const int w = detail::next_pnm_int(in);
    const int h = detail::next_pnm_int(in);
    const int maxval = detail::next_pnm_int(in);
    if (w <= 0 || h <= 0) throw io_error("pnm: bad dimensions");
    if (maxval != 255) throw io_error("pnm: only maxval 255 supported");
    // Exactly one whitespace byte separates the header from the raster; the
    // header parser has already consumed it.
    Image img(w, h, channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw io_error("pnm: truncated raster");
    return img;
}

inline Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    return decode_pnm(in);
}

// Atomic write: stage to a sibling temp file, then rename into place, so a
// crashed run never leaves a truncated image behind.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot create " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw io_error("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw io_error("rename failed for " + path.string() + ": " + ec.message());
}

inline void write_pnm(const std::filesystem::path& path, const Image& img) {
    write_file_atomic(path, encode_pnm(img));
}

} // namespace fdsl
