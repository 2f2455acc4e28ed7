#pragma once

#include <cfenv>
#include <cstdio>
#include <filesystem>
#include <vector>

#include <png.h>

#include "core.hpp"

namespace oneclip {

namespace detail {

// [-1,1] -> [0,255] affine with round-half-even.
inline unsigned char to_byte(double v) {
    double scaled = (v + 1.0) * 0.5 * 255.0;
    double rounded = std::nearbyint(scaled);  // default FE_TONEAREST rounds half to even
    if (rounded < 0.0) rounded = 0.0;
    if (rounded > 255.0) rounded = 255.0;
    return static_cast<unsigned char>(rounded);
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace detail

// Write one image of the batch as an 8-bit RGB PNG.
inline void write_png(const std::filesystem::path& path, const ImageBatch& images, int index = 0) {
    if (images.data.rank() != 4 || images.channels() != 3) throw ShapeError("write_png: expected [N,3,H,W]");
    if (index < 0 || index >= images.count()) throw ArgumentError("write_png: index out of range");
    int H = images.height(), W = images.width();

    std::vector<unsigned char> rows(static_cast<std::size_t>(H) * W * 3);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                rows[(static_cast<std::size_t>(y) * W + x) * 3 + c] = detail::to_byte(images.data.at(index, c, y, x));

    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path.string() + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failure writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < H; ++y) png_write_row(png, rows.data() + static_cast<std::size_t>(y) * W * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Read an 8-bit PNG into a single-image batch, mapping [0,255] -> [-1,1].
// Gray and alpha variants are expanded/stripped to RGB.
inline ImageBatch read_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());

    unsigned char header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw ParseError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<unsigned char> pixels;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError("libpng failure reading " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    png_uint_32 W = png_get_image_width(png, info);
    png_uint_32 H = png_get_image_height(png, info);
    if (png_get_channels(png, info) != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError("unsupported PNG channel layout: " + path.string());
    }

    pixels.resize(static_cast<std::size_t>(H) * W * 3);
    row_ptrs.resize(H);
    for (png_uint_32 y = 0; y < H; ++y) row_ptrs[y] = pixels.data() + static_cast<std::size_t>(y) * W * 3;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    ImageBatch out(1, static_cast<int>(H), static_cast<int>(W));
    for (png_uint_32 y = 0; y < H; ++y)
        for (png_uint_32 x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                out.data.at(0, c, static_cast<int>(y), static_cast<int>(x)) =
                    pixels[(static_cast<std::size_t>(y) * W + x) * 3 + static_cast<std::size_t>(c)] / 255.0 * 2.0 - 1.0;
    return out;
}

// Bilinear resize helper for adapting external target images to the
// generator resolution.
inline ImageBatch resize_images(const ImageBatch& images, int height, int width) {
    Tape tape(false);
    Ref out = tape.resize_bilinear(tape.constant(images.data), height, width);
    return ImageBatch{tape.val(out)};
}

}  // namespace oneclip
