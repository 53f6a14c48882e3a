#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "photodoodle/errors.hpp"
#include "photodoodle/tensor.hpp"

namespace photodoodle {

// Images are Tensor<float> [H×W×3] in [0,1]; masks are [H×W] with values 0/1.
// On disk: binary PPM (P6, maxval 255) and binary PGM (P5).

using Image = Tensor<float>;
using Mask = Tensor<float>;

inline uint8_t quantize8(float v) {
    float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(c * 255.0f));
}

/// snap an image to its 8-bit representation (what a disk round trip yields)
inline Image quantize_image(const Image& img) {
    Image out = img;
    for (auto& v : out.data) v = static_cast<float>(quantize8(v)) / 255.0f;
    return out;
}

inline void write_ppm(const std::string& path, const Image& img) {
    if (img.rank() != 3 || img.shape[2] != 3)
        throw shape_error("write_ppm expects [HxWx3], got " + Tensor<float>::shape_str(img.shape));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("cannot open for writing: " + path);
    int h = img.shape[0], w = img.shape[1];
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> buf(img.data.size());
    for (size_t i = 0; i < img.data.size(); ++i) buf[i] = quantize8(img.data[i]);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw data_error("write failed: " + path);
}

inline void write_pgm(const std::string& path, const Mask& mask) {
    if (mask.rank() != 2)
        throw shape_error("write_pgm expects [HxW], got " + Tensor<float>::shape_str(mask.shape));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("cannot open for writing: " + path);
    int h = mask.shape[0], w = mask.shape[1];
    os << "P5\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> buf(mask.data.size());
    for (size_t i = 0; i < mask.data.size(); ++i) buf[i] = quantize8(mask.data[i]);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw data_error("write failed: " + path);
}

namespace detail {
inline void read_pnm_header(std::ifstream& is, const std::string& path, const char* magic, int& w,
                            int& h) {
    std::string m;
    is >> m;
    if (m != magic) throw data_error(path + ": expected " + magic + " header, got '" + m + "'");
    int maxval = 0;
    is >> w >> h >> maxval;
    if (!is || w <= 0 || h <= 0) throw data_error(path + ": malformed PNM dimensions");
    if (maxval != 255) throw data_error(path + ": unsupported maxval " + std::to_string(maxval));
    is.get();  // single whitespace before binary payload
}
}  // namespace detail

inline Image read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path);
    int w, h;
    detail::read_pnm_header(is, path, "P6", w, h);
    std::vector<uint8_t> buf(static_cast<size_t>(w) * h * 3);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw data_error(path + ": truncated PPM payload");
    Image img({h, w, 3});
    for (size_t i = 0; i < buf.size(); ++i) img.data[i] = static_cast<float>(buf[i]) / 255.0f;
    return img;
}

inline Mask read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path);
    int w, h;
    detail::read_pnm_header(is, path, "P5", w, h);
    std::vector<uint8_t> buf(static_cast<size_t>(w) * h);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw data_error(path + ": truncated PGM payload");
    Mask mask({h, w});
    for (size_t i = 0; i < buf.size(); ++i) mask.data[i] = buf[i] >= 128 ? 1.0f : 0.0f;
    return mask;
}

}  // namespace photodoodle
