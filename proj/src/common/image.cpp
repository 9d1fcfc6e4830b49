#include "rswm/common/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "rswm/common/errors.hpp"

namespace rswm {

std::vector<std::uint8_t> to_rgb8(const Image& image) {
    std::vector<std::uint8_t> out(image.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
        out[i] = static_cast<std::uint8_t>(std::floor(v * 255.0f + 0.5f));
    }
    return out;
}

Image from_rgb8(int height, int width, std::span<const std::uint8_t> rgb) {
    require(rgb.size() == static_cast<std::size_t>(height) * width * 3, "rgb8 buffer size mismatch");
    Image image(height, width);
    for (std::size_t i = 0; i < rgb.size(); ++i) {
        image.pixels[i] = static_cast<float>(rgb[i]) / 255.0f;
    }
    return image;
}

Image quantize_rgb8(const Image& image) {
    const auto rgb = to_rgb8(image);
    return from_rgb8(image.height, image.width, rgb);
}

double mean_squared_error(const Image& a, const Image& b) {
    require(a.height == b.height && a.width == b.width, "image size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        acc += d * d;
    }
    return a.pixels.empty() ? 0.0 : acc / static_cast<double>(a.pixels.size());
}

void write_png(const std::filesystem::path& path, const Image& image) {
    std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!file) throw std::runtime_error("cannot open " + path.string() + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng failed writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto rgb = to_rgb8(image);
    for (int row = 0; row < image.height; ++row) {
        png_write_row(png, rgb.data() + static_cast<std::size_t>(row) * image.width * 3);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace rswm
