#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "tilewise/errors.hpp"
#include "tilewise/tensor.hpp"

namespace tilewise {

namespace detail {

inline unsigned char to_byte(double v) {
    return static_cast<unsigned char>(std::clamp(std::round(v), 0.0, 255.0));
}

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};

}  // namespace detail

/// Write an H x W (grayscale) or H x W x 3 (RGB) tensor as an 8-bit PNG.
/// Values are rounded and clamped to [0,255].
inline void write_png(const std::filesystem::path& path, const Tensor& image) {
    const bool rgb = image.rank() == 3 && image.extent(2) == 3;
    if (!rgb && image.rank() != 2) throw shape_error("write_png expects H x W or H x W x 3");
    const auto h = image.extent(0), w = image.extent(1);
    const std::size_t channels = rgb ? 3 : 1;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw io_error("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw io_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw io_error("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 rgb ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(w * channels);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t i = 0; i < w * channels; ++i) row[i] = detail::to_byte(image[y * w * channels + i]);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Read an 8-bit PNG as H x W x 3 (RGB); grayscale images are expanded.
inline Tensor read_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw io_error("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw io_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw io_error("libpng failed reading " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const auto w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    const auto rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != static_cast<std::size_t>(w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw io_error("unsupported PNG layout in " + path.string());
    }
    std::vector<unsigned char> buf(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (std::size_t y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    Tensor out({h, w, 3});
    for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i];
    return out;
}

/// Binary (P5) 8-bit PGM of an H x W tensor; values rounded and clamped.
inline void write_pgm(const std::filesystem::path& path, const Tensor& gray) {
    if (gray.rank() != 2) throw shape_error("write_pgm expects H x W");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open " + path.string() + " for writing");
    out << "P5\n" << gray.extent(1) << ' ' << gray.extent(0) << "\n255\n";
    std::vector<unsigned char> bytes(gray.size());
    for (std::size_t i = 0; i < gray.size(); ++i) bytes[i] = detail::to_byte(gray[i]);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("failed writing " + path.string());
}

inline Tensor read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic;
    auto skip_comments = [&] {
        in >> std::ws;
        while (in.peek() == '#') {
            std::string line;
            std::getline(in, line);
            in >> std::ws;
        }
    };
    skip_comments();
    in >> w;
    skip_comments();
    in >> h;
    skip_comments();
    in >> maxval;
    in.get();
    if (magic != "P5" || w == 0 || h == 0 || maxval != 255) throw io_error("unsupported PGM " + path.string());
    std::vector<unsigned char> bytes(w * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw io_error("truncated PGM " + path.string());
    Tensor out({h, w});
    for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = bytes[i];
    return out;
}

}  // namespace tilewise
