#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pointsplat/gaussian.hpp"

namespace pointsplat {

struct PlyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> expected_properties(int degree) {
    std::vector<std::string> p = {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"};
    int rest = (sh_coeff_count(degree) - 1) * 3;
    for (int i = 0; i < rest; ++i) p.push_back("f_rest_" + std::to_string(i));
    p.push_back("opacity");
    for (int i = 0; i < 3; ++i) p.push_back("scale_" + std::to_string(i));
    for (int i = 0; i < 4; ++i) p.push_back("rot_" + std::to_string(i));
    return p;
}

inline int degree_from_rest_count(size_t rest) {
    for (int l = 0; l <= 3; ++l)
        if (rest == static_cast<size_t>((sh_coeff_count(l) - 1) * 3)) return l;
    return -1;
}

inline float load_f32le(const unsigned char* p) {
    uint32_t u = static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
                 static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
    return std::bit_cast<float>(u);
}

inline void store_f32le(unsigned char* p, float f) {
    uint32_t u = std::bit_cast<uint32_t>(f);
    p[0] = static_cast<unsigned char>(u & 0xff);
    p[1] = static_cast<unsigned char>((u >> 8) & 0xff);
    p[2] = static_cast<unsigned char>((u >> 16) & 0xff);
    p[3] = static_cast<unsigned char>((u >> 24) & 0xff);
}

}  // namespace detail

// Binary little-endian PLY in the de facto 3DGS export layout. Per vertex:
//   x y z, nx ny nz, f_dc_0..2, f_rest_0..(3(L+1)^2 - 4), opacity,
//   scale_0..2, rot_0..3, every property a 32-bit float.
// f_rest is channel-planar: f_rest[c*(K-1) + (k-1)] is coefficient k of
// channel c, with K = (L+1)^2. Values are preserved bit-exactly.
inline GaussianCloud read_ply(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PlyError("cannot open '" + path + "'");

    std::string line;
    auto next_line = [&]() -> std::string {
        if (!std::getline(in, line)) throw PlyError("truncated header in '" + path + "'");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
    };

    if (next_line() != "ply") throw PlyError("missing 'ply' magic in '" + path + "'");
    if (next_line() != "format binary_little_endian 1.0")
        throw PlyError("unsupported format (binary little-endian 1.0 required) in '" + path + "'");

    size_t vertex_count = 0;
    bool saw_element = false;
    std::vector<std::string> props;
    for (;;) {
        std::string l = next_line();
        if (l == "end_header") break;
        std::istringstream ls(l);
        std::string tok;
        ls >> tok;
        if (tok == "comment") continue;
        if (tok == "element") {
            std::string name;
            ls >> name >> vertex_count;
            if (name != "vertex" || saw_element)
                throw PlyError("expected a single 'element vertex' in '" + path + "'");
            saw_element = true;
        } else if (tok == "property") {
            std::string type, name;
            ls >> type >> name;
            if (type != "float") throw PlyError("property '" + name + "' is not float in '" + path + "'");
            props.push_back(name);
        } else {
            throw PlyError("unexpected header line '" + l + "' in '" + path + "'");
        }
    }
    if (!saw_element) throw PlyError("missing 'element vertex' in '" + path + "'");

    if (props.size() < 17) throw PlyError("too few vertex properties in '" + path + "'");
    size_t rest = props.size() - 17;
    int degree = detail::degree_from_rest_count(rest);
    if (degree < 0) throw PlyError("f_rest count does not match any SH degree <= 3 in '" + path + "'");
    if (props != detail::expected_properties(degree))
        throw PlyError("vertex property names/order mismatch in '" + path + "'");

    size_t floats_per_vertex = props.size();
    size_t header_end = static_cast<size_t>(in.tellg());
    std::vector<unsigned char> payload(vertex_count * floats_per_vertex * 4);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (static_cast<size_t>(in.gcount()) != payload.size())
        throw PlyError("truncated payload in '" + path + "': expected " +
                       std::to_string(payload.size()) + " bytes after offset " +
                       std::to_string(header_end));

    GaussianCloud cloud;
    cloud.sh_degree = degree;
    cloud.gaussians.resize(vertex_count);
    int coeffs = sh_coeff_count(degree);
    for (size_t i = 0; i < vertex_count; ++i) {
        const unsigned char* base = payload.data() + i * floats_per_vertex * 4;
        std::vector<float> v(floats_per_vertex);
        for (size_t j = 0; j < floats_per_vertex; ++j) {
            v[j] = detail::load_f32le(base + j * 4);
            if (!std::isfinite(v[j]))
                throw PlyError("non-finite value in '" + path + "' at byte offset " +
                               std::to_string(header_end + (i * floats_per_vertex + j) * 4));
        }
        Gaussian& g = cloud.gaussians[i];
        g.sh_degree = degree;
        g.position = {v[0], v[1], v[2]};
        // v[3..5] are normals; discarded.
        g.sh_coeffs.assign(static_cast<size_t>(coeffs) * 3, 0.f);
        for (int c = 0; c < 3; ++c) g.sh_coeffs[static_cast<size_t>(c)] = v[6 + c];
        for (int c = 0; c < 3; ++c)
            for (int k = 1; k < coeffs; ++k)
                g.sh_coeffs[static_cast<size_t>(k) * 3 + c] = v[9 + c * (coeffs - 1) + (k - 1)];
        size_t o = 9 + static_cast<size_t>(coeffs - 1) * 3;
        g.opacity_logit = v[o];
        g.log_scale = {v[o + 1], v[o + 2], v[o + 3]};
        for (int c = 0; c < 4; ++c) g.rotation_raw[c] = v[o + 4 + c];
        float qn = 0.f;
        for (float q : g.rotation_raw) qn += q * q;
        if (!(qn > 0.f))
            throw PlyError("zero-norm quaternion in '" + path + "' at vertex " + std::to_string(i));
    }
    return cloud;
}

inline void write_ply(const GaussianCloud& cloud, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw PlyError("cannot open '" + path + "' for writing");

    int coeffs = sh_coeff_count(cloud.sh_degree);
    std::ostringstream header;
    header << "ply\nformat binary_little_endian 1.0\nelement vertex " << cloud.size() << "\n";
    for (const auto& p : detail::expected_properties(cloud.sh_degree))
        header << "property float " << p << "\n";
    header << "end_header\n";
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));

    size_t floats_per_vertex = 14 + static_cast<size_t>(coeffs) * 3;
    std::vector<unsigned char> row(floats_per_vertex * 4);
    for (const Gaussian& g : cloud.gaussians) {
        size_t j = 0;
        auto put = [&](float f) { detail::store_f32le(row.data() + (j++) * 4, f); };
        put(g.position.x);
        put(g.position.y);
        put(g.position.z);
        put(0.f);
        put(0.f);
        put(0.f);
        for (int c = 0; c < 3; ++c) put(g.sh_coeffs[static_cast<size_t>(c)]);
        for (int c = 0; c < 3; ++c)
            for (int k = 1; k < coeffs; ++k) put(g.sh_coeffs[static_cast<size_t>(k) * 3 + c]);
        put(g.opacity_logit);
        put(g.log_scale.x);
        put(g.log_scale.y);
        put(g.log_scale.z);
        for (int c = 0; c < 4; ++c) put(g.rotation_raw[c]);
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw PlyError("write failure on '" + path + "'");
}

}  // namespace pointsplat
