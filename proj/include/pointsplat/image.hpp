#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pointsplat {

struct Image {
    int height = 0, width = 0, channels = 0;
    std::vector<float> data;  // row-major (y, x, c)

    Image() = default;
    Image(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, 0.f) {}

    float& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
    size_t size() const { return data.size(); }
};

namespace detail {

inline void put_u32be(std::vector<unsigned char>& v, uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

inline void png_chunk(std::ofstream& out, const char type[4], const std::vector<unsigned char>& body) {
    std::vector<unsigned char> len;
    put_u32be(len, static_cast<uint32_t>(body.size()));
    out.write(reinterpret_cast<const char*>(len.data()), 4);
    out.write(type, 4);
    if (!body.empty()) out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
    if (!body.empty()) crc = crc32(crc, body.data(), static_cast<uInt>(body.size()));
    std::vector<unsigned char> crcb;
    put_u32be(crcb, static_cast<uint32_t>(crc));
    out.write(reinterpret_cast<const char*>(crcb.data()), 4);
}

inline uint32_t get_u32be(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) << 24 | static_cast<uint32_t>(p[1]) << 16 |
           static_cast<uint32_t>(p[2]) << 8 | static_cast<uint32_t>(p[3]);
}

}  // namespace detail

/// 8-bit RGB PNG, filter 0 on every row. Values are clamped to [0,1] and
/// rounded to the nearest of 256 levels.
inline void write_png(const Image& img, const std::string& path) {
    if (img.channels != 3) throw std::runtime_error("write_png: need a 3-channel image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");

    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<unsigned char> ihdr;
    detail::put_u32be(ihdr, static_cast<uint32_t>(img.width));
    detail::put_u32be(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // truecolor
    ihdr.push_back(0);   // deflate
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    detail::png_chunk(out, "IHDR", ihdr);

    std::vector<unsigned char> raw;
    raw.reserve(static_cast<size_t>(img.height) * (1 + static_cast<size_t>(img.width) * 3));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter type
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = std::clamp(img.at(y, x, c), 0.f, 1.f);
                raw.push_back(static_cast<unsigned char>(std::lround(v * 255.f)));
            }
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(bound);
    if (compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png deflate failure");
    comp.resize(bound);
    detail::png_chunk(out, "IDAT", comp);
    detail::png_chunk(out, "IEND", {});
    if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

/// Reads PNGs in the exact form write_png emits (8-bit RGB, filter 0).
inline Image read_png(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 + 25 || bytes[1] != 'P' || bytes[2] != 'N' || bytes[3] != 'G')
        throw std::runtime_error("'" + path + "' is not a PNG");

    size_t pos = 8;
    int w = 0, h = 0;
    std::vector<unsigned char> idat;
    while (pos + 8 <= bytes.size()) {
        uint32_t len = detail::get_u32be(&bytes[pos]);
        std::string type(reinterpret_cast<const char*>(&bytes[pos + 4]), 4);
        if (pos + 12 + len > bytes.size()) throw std::runtime_error("truncated PNG '" + path + "'");
        const unsigned char* body = &bytes[pos + 8];
        if (type == "IHDR") {
            w = static_cast<int>(detail::get_u32be(body));
            h = static_cast<int>(detail::get_u32be(body + 4));
            if (body[8] != 8 || body[9] != 2)
                throw std::runtime_error("unsupported PNG layout in '" + path + "' (need 8-bit RGB)");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), body, body + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0 || idat.empty()) throw std::runtime_error("malformed PNG '" + path + "'");

    size_t raw_size = static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * 3);
    std::vector<unsigned char> raw(raw_size);
    uLongf got = static_cast<uLongf>(raw_size);
    if (uncompress(raw.data(), &got, idat.data(), static_cast<uLong>(idat.size())) != Z_OK || got != raw_size)
        throw std::runtime_error("png inflate failure in '" + path + "'");

    Image img(h, w, 3);
    for (int y = 0; y < h; ++y) {
        const unsigned char* row = &raw[static_cast<size_t>(y) * (1 + static_cast<size_t>(w) * 3)];
        if (row[0] != 0) throw std::runtime_error("unsupported PNG row filter in '" + path + "'");
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(row[1 + x * 3 + c]) / 255.f;
    }
    return img;
}

// Lossless float dump: magic "PSPLTF32", then height, width, channels as
// little-endian uint32, then row-major float32 LE payload.
inline constexpr char kFloatDumpMagic[8] = {'P', 'S', 'P', 'L', 'T', 'F', '3', '2'};

inline void write_f32(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(kFloatDumpMagic, 8);
    uint32_t dims[3] = {static_cast<uint32_t>(img.height), static_cast<uint32_t>(img.width),
                        static_cast<uint32_t>(img.channels)};
    for (uint32_t d : dims) {
        unsigned char b[4] = {static_cast<unsigned char>(d), static_cast<unsigned char>(d >> 8),
                              static_cast<unsigned char>(d >> 16), static_cast<unsigned char>(d >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size() * 4));
    if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

inline Image read_f32(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, kFloatDumpMagic, 8) != 0)
        throw std::runtime_error("'" + path + "' is not a float dump");
    uint32_t dims[3];
    for (auto& d : dims) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        d = static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
            static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
    }
    Image img(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
    in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size() * 4));
    if (static_cast<size_t>(in.gcount()) != img.data.size() * 4)
        throw std::runtime_error("truncated float dump '" + path + "'");
    return img;
}

}  // namespace pointsplat
