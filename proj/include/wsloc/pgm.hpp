#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "wsloc/tensor.hpp"

namespace wsloc {

struct PgmImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

/// Binary 8-bit PGM (P5, maxval 255).
inline void write_pgm(const std::filesystem::path& path, const PgmImage& img) {
    if (img.pixels.size() != img.width * img.height)
        throw std::invalid_argument("pgm pixel count does not match dimensions");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size()));
}

inline PgmImage read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    is >> magic;
    if (magic != "P5") throw std::runtime_error(path.string() + ": not a binary PGM");

    auto next_token = [&is, &path]() {
        std::string tok;
        while (is >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(is, rest);
                continue;
            }
            return tok;
        }
        throw std::runtime_error(path.string() + ": truncated PGM header");
    };
    const std::size_t width = std::stoul(next_token());
    const std::size_t height = std::stoul(next_token());
    const unsigned long maxval = std::stoul(next_token());
    if (maxval != 255) throw std::runtime_error(path.string() + ": only maxval 255 supported");
    is.get();  // single whitespace after maxval

    PgmImage img;
    img.width = width;
    img.height = height;
    img.pixels.resize(width * height);
    if (!is.read(reinterpret_cast<char*>(img.pixels.data()),
                 static_cast<std::streamsize>(img.pixels.size())))
        throw std::runtime_error(path.string() + ": truncated PGM data");
    return img;
}

/// round(255 * v) per pixel; expects values in [0, 1].
inline PgmImage gray8_from_map(const Tensor& map) {
    if (map.rank() != 2) throw std::invalid_argument("expected a (H, W) map");
    PgmImage img;
    img.height = map.shape[0];
    img.width = map.shape[1];
    img.pixels.resize(map.numel());
    for (std::size_t i = 0; i < map.numel(); ++i) {
        const double v = std::clamp(map.data[i], 0.0, 1.0);
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
    return img;
}

inline Tensor map_from_gray8(const PgmImage& img) {
    Tensor t({img.height, img.width});
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        t.data[i] = static_cast<double>(img.pixels[i]) / 255.0;
    return t;
}

}  // namespace wsloc
