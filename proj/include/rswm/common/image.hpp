#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace rswm {

/// Row-major RGB image, channel-interleaved, values nominally in [0, 1].
/// Row 0 is the northern edge, column 0 the western edge.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels; // height * width * 3

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

    float& at(int row, int col, int channel) {
        return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
    }
    float at(int row, int col, int channel) const {
        return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
    }
    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

    bool operator==(const Image&) const = default;
};

/// 8-bit quantization with round-half-up, clamped to [0, 255].
std::vector<std::uint8_t> to_rgb8(const Image& image);
Image from_rgb8(int height, int width, std::span<const std::uint8_t> rgb);

/// Returns `image` snapped to the 8-bit grid (value k/255).
Image quantize_rgb8(const Image& image);

double mean_squared_error(const Image& a, const Image& b);

void write_png(const std::filesystem::path& path, const Image& image);

} // namespace rswm
