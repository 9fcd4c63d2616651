#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pointsplat/math.hpp"

namespace pointsplat {

/// Pinhole camera with a rigid world-to-camera transform:
/// p_cam = R p_world + t, pixel u = fx x/z + cx, v = fy y/z + cy.
struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
    Mat3<double> rotation = Mat3<double>::identity();  // world -> camera
    Vec3<double> translation{};
    double near = 0.05, far = 100.0;

    Vec3<double> to_camera(const Vec3<double>& p) const { return rotation * p + translation; }
    Vec3<double> center() const {
        Vec3<double> t = translation;
        return rotation.transpose() * Vec3<double>{-t.x, -t.y, -t.z};
    }

    void validate() const {
        if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("camera: fx, fy must be > 0");
        if (!(near > 0) || !(near < far)) throw std::invalid_argument("camera: need 0 < near < far");
        Mat3<double> rrt = rotation * rotation.transpose();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double want = i == j ? 1.0 : 0.0;
                if (std::abs(rrt.at(i, j) - want) > 1e-6)
                    throw std::invalid_argument("camera: rotation is not orthonormal");
            }
    }
};

struct TaggedCamera {
    Camera camera;
    bool is_test = false;
};

// Camera rig file: one line per camera,
//   fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz tag
// with tag "train" or "test". near/far are render policy, not rig data; the
// loader applies the library defaults unless overridden by the caller.
inline std::vector<TaggedCamera> load_cameras(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open camera file '" + path + "'");
    std::vector<TaggedCamera> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        TaggedCamera tc;
        Camera& c = tc.camera;
        std::string tag;
        if (!(ls >> c.fx >> c.fy >> c.cx >> c.cy >> c.width >> c.height))
            throw std::runtime_error("bad camera line in '" + path + "': " + line);
        for (int i = 0; i < 9; ++i)
            if (!(ls >> c.rotation.m[i])) throw std::runtime_error("bad camera pose in '" + path + "'");
        if (!(ls >> c.translation.x >> c.translation.y >> c.translation.z >> tag))
            throw std::runtime_error("bad camera pose in '" + path + "'");
        if (tag != "train" && tag != "test")
            throw std::runtime_error("bad camera split tag '" + tag + "' in '" + path + "'");
        tc.is_test = tag == "test";
        c.validate();
        out.push_back(tc);
    }
    if (out.empty()) throw std::runtime_error("no cameras in '" + path + "'");
    return out;
}

inline void save_cameras(const std::vector<TaggedCamera>& cams, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.precision(17);
    for (const auto& tc : cams) {
        const Camera& c = tc.camera;
        out << c.fx << ' ' << c.fy << ' ' << c.cx << ' ' << c.cy << ' ' << c.width << ' '
            << c.height;
        for (int i = 0; i < 9; ++i) out << ' ' << c.rotation.m[i];
        out << ' ' << c.translation.x << ' ' << c.translation.y << ' ' << c.translation.z << ' '
            << (tc.is_test ? "test" : "train") << '\n';
    }
    if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

}  // namespace pointsplat
