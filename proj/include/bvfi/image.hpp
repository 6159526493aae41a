#pragma once

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include "bvfi/tensor.hpp"

namespace bvfi {

/// Ordered frames with timing metadata. Frames are 3×H×W float tensors in
/// [0,1]; values get clamped on 8-bit export.
struct FrameSequence {
    std::vector<Tensor<float>> frames;
    double fps = 30.0;
    std::vector<double> timestamps;

    void validate() const {
        for (const auto& f : frames) {
            check(f.ndim() == 3 && f.dim(0) == 3, "frame must be 3×H×W RGB");
            check(f.shape() == frames.front().shape(), "all frames must share one shape");
        }
    }
};

inline uint8_t to_u8(float v) {
    float c = std::min(1.0f, std::max(0.0f, v));
    return (uint8_t)std::lround(c * 255.0f);
}

/// Writes an 8-bit RGB PNG from a 3×H×W tensor in [0,1].
inline void write_png(const std::string& path, const Tensor<float>& img) {
    check(img.ndim() == 3 && img.dim(0) == 3, "write_png: expected 3×H×W tensor");
    int H = img.dim(1), W = img.dim(2);
    FILE* fp = std::fopen(path.c_str(), "wb");
    check(fp != nullptr, "write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("write_png: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<uint8_t> row((size_t)W * 3);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) row[(size_t)x * 3 + c] = to_u8(img.ptr()[((size_t)c * H + y) * W + x]);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

/// Reads an 8-bit RGB PNG into a 3×H×W tensor in [0,1]. Grayscale, palette
/// and alpha variants are expanded/stripped to plain RGB.
inline Tensor<float> read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    check(fp != nullptr, "read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    int W = (int)png_get_image_width(png, info);
    int H = (int)png_get_image_height(png, info);
    check((int)png_get_channels(png, info) == 3, "read_png: expected RGB after expansion");
    std::vector<uint8_t> row((size_t)W * 3);
    auto img = Tensor<float>::zeros({3, H, W});
    for (int y = 0; y < H; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                img.data()[((size_t)c * H + y) * W + x] = row[(size_t)x * 3 + c] / 255.0f;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

inline std::string frame_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%06d.png", index);
    return buf;
}

/// Reads every frame_*.png in a directory, sorted by name.
inline FrameSequence read_frame_dir(const std::string& dir, double fps = 30.0) {
    namespace fs = std::filesystem;
    check(fs::is_directory(dir), "not a directory: " + dir);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") names.push_back(e.path().string());
    std::sort(names.begin(), names.end());
    check(!names.empty(), "no .png frames in " + dir);
    FrameSequence seq;
    seq.fps = fps;
    for (size_t i = 0; i < names.size(); ++i) {
        seq.frames.push_back(read_png(names[i]));
        seq.timestamps.push_back((double)i / fps);
    }
    seq.validate();
    return seq;
}

inline void write_frame_dir(const std::string& dir, const FrameSequence& seq) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (size_t i = 0; i < seq.frames.size(); ++i) write_png(dir + "/" + frame_name((int)i), seq.frames[i]);
}

}  // namespace bvfi
