#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ctf/error.hpp"

namespace ctf {

// Interleaved RGB, floats in [0,1], row-major.
struct Image {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<float> pixels;  // height * width * 3

    Image() = default;
    Image(int64_t h, int64_t w) : height(h), width(w), pixels(static_cast<size_t>(h * w * 3), 0.f) {}

    float& at(int64_t y, int64_t x, int64_t c) {
        return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
    }
    float at(int64_t y, int64_t x, int64_t c) const {
        return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
    }

    void clamp01() {
        for (float& v : pixels) v = std::min(1.0f, std::max(0.0f, v));
    }
};

inline double mean_squared_error(const Image& a, const Image& b) {
    check(a.height == b.height && a.width == b.width, ErrKind::shape,
          "mse: image dimensions differ");
    double acc = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.pixels.size());
}

// ------------------------------------------------------------------ PPM (P6)

inline void write_ppm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), ErrKind::io, "cannot open for writing: " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.pixels.size());
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, img.pixels[i]));
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    check(out.good(), ErrKind::io, "short write: " + path);
}

namespace detail {

// whitespace-delimited ASCII token, tracking the byte offset for error reports
inline std::string ppm_token(std::istream& in, size_t& offset) {
    std::string tok;
    int ch = in.get();
    ++offset;
    while (in.good() && (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n')) {
        ch = in.get();
        ++offset;
    }
    while (in.good() && ch != ' ' && ch != '\t' && ch != '\r' && ch != '\n' && ch != EOF) {
        tok.push_back(static_cast<char>(ch));
        ch = in.get();
        ++offset;
    }
    return tok;
}

}  // namespace detail

inline Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), ErrKind::io, "cannot open for reading: " + path);
    size_t offset = 0;
    const std::string magic = detail::ppm_token(in, offset);
    check(magic == "P6", ErrKind::format,
          "not a binary PPM (want magic P6) at byte 0 in " + path);
    auto parse_int = [&](const char* what) {
        const size_t at = offset;
        const std::string tok = detail::ppm_token(in, offset);
        check(!tok.empty() && tok.find_first_not_of("0123456789") == std::string::npos,
              ErrKind::format,
              std::string("bad ") + what + " field at byte " + std::to_string(at) + " in " + path);
        return static_cast<int64_t>(std::stoll(tok));
    };
    const int64_t width = parse_int("width");
    const int64_t height = parse_int("height");
    const size_t maxval_at = offset;
    const int64_t maxval = parse_int("maxval");
    check(width > 0 && height > 0, ErrKind::format, "non-positive dimensions in " + path);
    check(maxval == 255, ErrKind::format,
          "unsupported maxval " + std::to_string(maxval) + " at byte " +
              std::to_string(maxval_at) + " in " + path + " (only 255)");

    const size_t expect = static_cast<size_t>(width * height * 3);
    std::vector<unsigned char> bytes(expect);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expect));
    const size_t got = static_cast<size_t>(in.gcount());
    check(got == expect, ErrKind::format,
          "truncated pixel payload at byte " + std::to_string(offset + got) + " in " + path +
              " (expected " + std::to_string(expect) + " bytes, got " + std::to_string(got) + ")");

    Image img(height, width);
    for (size_t i = 0; i < expect; ++i) {
        img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
    }
    return img;
}

// Horizontal strip of equally sized images with a 1px white gutter, for
// side-by-side comparison sheets.
inline Image compose_row(const std::vector<Image>& images) {
    check(!images.empty(), ErrKind::param, "compose_row needs at least one image");
    const int64_t h = images[0].height, w = images[0].width;
    for (const Image& im : images) {
        check(im.height == h && im.width == w, ErrKind::shape, "compose_row: size mismatch");
    }
    const int64_t n = static_cast<int64_t>(images.size());
    Image out(h, n * w + (n - 1));
    for (float& v : out.pixels) v = 1.0f;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t x0 = i * (w + 1);
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                for (int64_t c = 0; c < 3; ++c) {
                    out.at(y, x0 + x, c) = images[static_cast<size_t>(i)].at(y, x, c);
                }
            }
        }
    }
    return out;
}

inline Image compose_grid(const std::vector<Image>& rows_of_images, int64_t columns) {
    check(columns > 0, ErrKind::param, "compose_grid: columns must be positive");
    std::vector<Image> rows;
    for (size_t i = 0; i < rows_of_images.size(); i += static_cast<size_t>(columns)) {
        std::vector<Image> row(rows_of_images.begin() + static_cast<int64_t>(i),
                               rows_of_images.begin() +
                                   std::min(rows_of_images.size(),
                                            i + static_cast<size_t>(columns)));
        rows.push_back(compose_row(row));
    }
    check(!rows.empty(), ErrKind::param, "compose_grid needs at least one image");
    int64_t wmax = 0;
    for (const Image& r : rows) wmax = std::max(wmax, r.width);
    const int64_t h = rows[0].height;
    Image out(static_cast<int64_t>(rows.size()) * (h + 1) - 1, wmax);
    for (float& v : out.pixels) v = 1.0f;
    for (size_t r = 0; r < rows.size(); ++r) {
        const int64_t y0 = static_cast<int64_t>(r) * (h + 1);
        for (int64_t y = 0; y < rows[r].height; ++y) {
            for (int64_t x = 0; x < rows[r].width; ++x) {
                for (int64_t c = 0; c < 3; ++c) {
                    out.at(y0 + y, x, c) = rows[r].at(y, x, c);
                }
            }
        }
    }
    return out;
}

}  // namespace ctf
