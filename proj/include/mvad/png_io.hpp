// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mvad/core.hpp"

namespace mvad {

inline std::uint8_t quantize_u8(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Decodes an 8-bit PNG into [0,1] floats. Gray sources are replicated when
/// three channels are requested; color sources are reduced with Rec.601 luma
/// when one channel is requested.
inline Frame read_png(const std::filesystem::path& path, int channels) {
    if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3, got " + std::to_string(channels));
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.string().c_str()))
        throw IoError("cannot read PNG " + path.string() + ": " + image.message);
    const bool source_gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
    image.format = source_gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    const int src_c = source_gray ? 1 : 3;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot decode PNG " + path.string() + ": " + msg);
    }
    const int h = static_cast<int>(image.height);
    const int w = static_cast<int>(image.width);
    Frame out(h, w, channels);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const png_byte* px = &buf[(static_cast<std::size_t>(y) * w + x) * src_c];
            if (src_c == channels) {
                for (int c = 0; c < channels; ++c) out.at(y, x, c) = px[c] / 255.0f;
            } else if (src_c == 1) {
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = px[0] / 255.0f;
            } else {
                out.at(y, x, 0) = static_cast<float>((0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]) / 255.0);
            }
        }
    }
    return out;
}

/// Writes an 8-bit gray or RGB PNG with libpng default encoder settings.
template <typename T>
void write_png(const std::filesystem::path& path, const Image<T>& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ShapeError("PNG output needs 1 or 3 channels, got " + std::to_string(img.channels));
    std::vector<png_byte> buf(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) buf[i] = quantize_u8(static_cast<double>(img.data[i]));
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path.string() + ": " + image.message);
}

/// Bilinear resize with half-pixel centers (edge-clamped).
inline Frame resize_bilinear(const Frame& src, int out_h, int out_w) {
    if (src.height == out_h && src.width == out_w) return src;
    Frame dst(out_h, out_w, src.channels);
    const double sy = static_cast<double>(src.height) / out_h;
    const double sx = static_cast<double>(src.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < src.channels; ++c) {
                const double top = (1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c);
                const double bot = (1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c);
                dst.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bot);
            }
        }
    }
    return dst;
}

}  // namespace mvad
