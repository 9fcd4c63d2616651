#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pointsplat/camera.hpp"
#include "pointsplat/config.hpp"
#include "pointsplat/gaussian.hpp"
#include "pointsplat/rng.hpp"

namespace pointsplat {

/// Deterministic synthetic scene recipe. All sampling flows through fixed
/// xoshiro256** streams (one per parameter family), so a given spec always
/// produces bit-identical scenes.
struct SceneSpec {
    uint64_t seed = 42;
    int n_gaussians = 500;
    Vec3<double> box_min{-1.0, -1.0, -1.0};
    Vec3<double> box_max{1.0, 1.0, 1.0};
    double opacity_logit_min = -1.0, opacity_logit_max = 3.0;
    double log_scale_min = -3.2, log_scale_max = -1.8;
    int sh_degree = 1;
    double dc_min = -1.2, dc_max = 1.2;
    double rest_amp = 0.15;
    int camera_count = 20;
    int image_width = 48, image_height = 48;
    double orbit_radius = 3.0;
    double fov_deg = 55.0;

    void validate() const {
        if (n_gaussians < 1 || camera_count < 1 || image_width < 1 || image_height < 1)
            throw std::invalid_argument("scene spec: counts must be positive");
        if (!(box_min.x < box_max.x && box_min.y < box_max.y && box_min.z < box_max.z))
            throw std::invalid_argument("scene spec: degenerate bounding box");
        if (sh_degree < 0 || sh_degree > 3) throw std::invalid_argument("scene spec: sh_degree in [0,3]");
        if (!(orbit_radius > 0) || !(fov_deg > 1) || fov_deg >= 179)
            throw std::invalid_argument("scene spec: bad camera parameters");
    }

    static SceneSpec from_kv(const KeyValues& kv) {
        SceneSpec s;
        s.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<long long>(s.seed)));
        s.n_gaussians = static_cast<int>(kv.get_int("n_gaussians", s.n_gaussians));
        s.box_min = {kv.get_double("box_min_x", s.box_min.x), kv.get_double("box_min_y", s.box_min.y),
                     kv.get_double("box_min_z", s.box_min.z)};
        s.box_max = {kv.get_double("box_max_x", s.box_max.x), kv.get_double("box_max_y", s.box_max.y),
                     kv.get_double("box_max_z", s.box_max.z)};
        s.opacity_logit_min = kv.get_double("opacity_logit_min", s.opacity_logit_min);
        s.opacity_logit_max = kv.get_double("opacity_logit_max", s.opacity_logit_max);
        s.log_scale_min = kv.get_double("log_scale_min", s.log_scale_min);
        s.log_scale_max = kv.get_double("log_scale_max", s.log_scale_max);
        s.sh_degree = static_cast<int>(kv.get_int("sh_degree", s.sh_degree));
        s.dc_min = kv.get_double("dc_min", s.dc_min);
        s.dc_max = kv.get_double("dc_max", s.dc_max);
        s.rest_amp = kv.get_double("rest_amp", s.rest_amp);
        s.camera_count = static_cast<int>(kv.get_int("camera_count", s.camera_count));
        s.image_width = static_cast<int>(kv.get_int("image_width", s.image_width));
        s.image_height = static_cast<int>(kv.get_int("image_height", s.image_height));
        s.orbit_radius = kv.get_double("orbit_radius", s.orbit_radius);
        s.fov_deg = kv.get_double("fov_deg", s.fov_deg);
        s.validate();
        return s;
    }
};

struct Scene {
    GaussianCloud cloud;
    std::vector<TaggedCamera> cameras;

    std::vector<int> test_views() const {
        std::vector<int> v;
        for (size_t i = 0; i < cameras.size(); ++i)
            if (cameras[i].is_test) v.push_back(static_cast<int>(i));
        return v;
    }
    std::vector<int> train_views() const {
        std::vector<int> v;
        for (size_t i = 0; i < cameras.size(); ++i)
            if (!cameras[i].is_test) v.push_back(static_cast<int>(i));
        return v;
    }
};

namespace detail {

inline Camera look_at_camera(const Vec3<double>& eye, const Vec3<double>& target, int width,
                             int height, double fov_deg) {
    Vec3<double> fwd = (target - eye).normalized();
    Vec3<double> up{0.0, 0.0, 1.0};
    if (std::abs(fwd.dot(up)) > 0.999) up = {0.0, 1.0, 0.0};
    auto cross = [](const Vec3<double>& a, const Vec3<double>& b) {
        return Vec3<double>{a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
    };
    Vec3<double> right = cross(fwd, up).normalized();
    Vec3<double> down = cross(fwd, right);  // completes a right-handed x-right, y-down, z-forward frame
    Camera cam;
    cam.width = width;
    cam.height = height;
    double f = 0.5 * width / std::tan(0.5 * fov_deg * 3.14159265358979323846 / 180.0);
    cam.fx = cam.fy = f;
    cam.cx = width / 2.0;
    cam.cy = height / 2.0;
    cam.rotation.m = {right.x, right.y, right.z, down.x, down.y, down.z, fwd.x, fwd.y, fwd.z};
    Vec3<double> t = cam.rotation * eye;
    cam.translation = {-t.x, -t.y, -t.z};
    cam.validate();
    return cam;
}

}  // namespace detail

/// Cameras on an orbit around the box center with a golden-angle elevation
/// wobble; every 10th view (starting at 0) is tagged as a test view.
inline std::vector<TaggedCamera> orbit_cameras(const SceneSpec& spec) {
    Vec3<double> center = (spec.box_min + spec.box_max) * 0.5;
    std::vector<TaggedCamera> cams;
    for (int i = 0; i < spec.camera_count; ++i) {
        double az = 2.0 * 3.14159265358979323846 * i / spec.camera_count;
        double elev = 0.35 + 0.25 * std::sin(2.39996322972865332 * i);
        Vec3<double> eye = center + Vec3<double>{std::cos(az) * std::cos(elev),
                                                 std::sin(az) * std::cos(elev), std::sin(elev)} *
                                        spec.orbit_radius;
        TaggedCamera tc;
        tc.camera = detail::look_at_camera(eye, center, spec.image_width, spec.image_height,
                                           spec.fov_deg);
        tc.is_test = (i % 10) == 0;
        cams.push_back(tc);
    }
    return cams;
}

inline Scene generate(const SceneSpec& spec) {
    spec.validate();
    Scene scene;
    scene.cloud.sh_degree = spec.sh_degree;
    int coeffs = sh_coeff_count(spec.sh_degree);
    Rng pos_rng(spec.seed, 1), rot_rng(spec.seed, 2), scale_rng(spec.seed, 3);
    Rng op_rng(spec.seed, 4), sh_rng(spec.seed, 5);
    for (int i = 0; i < spec.n_gaussians; ++i) {
        Gaussian g;
        g.sh_degree = spec.sh_degree;
        g.position = {static_cast<float>(pos_rng.uniform(spec.box_min.x, spec.box_max.x)),
                      static_cast<float>(pos_rng.uniform(spec.box_min.y, spec.box_max.y)),
                      static_cast<float>(pos_rng.uniform(spec.box_min.z, spec.box_max.z))};
        Quat<double> q = rot_rng.unit_quaternion();
        g.rotation_raw = {static_cast<float>(q.w), static_cast<float>(q.x),
                          static_cast<float>(q.y), static_cast<float>(q.z)};
        g.log_scale = {static_cast<float>(scale_rng.uniform(spec.log_scale_min, spec.log_scale_max)),
                       static_cast<float>(scale_rng.uniform(spec.log_scale_min, spec.log_scale_max)),
                       static_cast<float>(scale_rng.uniform(spec.log_scale_min, spec.log_scale_max))};
        g.opacity_logit =
            static_cast<float>(op_rng.uniform(spec.opacity_logit_min, spec.opacity_logit_max));
        g.sh_coeffs.assign(static_cast<size_t>(coeffs) * 3, 0.f);
        for (int c = 0; c < 3; ++c)
            g.sh_coeffs[static_cast<size_t>(c)] = static_cast<float>(sh_rng.uniform(spec.dc_min, spec.dc_max));
        for (int k = 1; k < coeffs; ++k)
            for (int c = 0; c < 3; ++c)
                g.sh_coeffs[static_cast<size_t>(k) * 3 + c] =
                    static_cast<float>(sh_rng.uniform(-spec.rest_amp, spec.rest_amp));
        scene.cloud.gaussians.push_back(std::move(g));
    }
    scene.cameras = orbit_cameras(spec);
    return scene;
}

/// Two labeled sub-populations for pruning analysis: small high-opacity
/// Gaussians (label 0) and large low-opacity ones with a heavy-tailed volume
/// distribution (label 1).
struct MixtureSpec {
    uint64_t seed = 7;
    int n_total = 400;
    double small_fraction = 0.65;
    Vec3<double> box_min{-1.0, -1.0, -1.0};
    Vec3<double> box_max{1.0, 1.0, 1.0};
    // Small/opaque population.
    double small_log_scale_min = std::log(0.02), small_log_scale_max = std::log(0.05);
    double small_logit_min = 1.0, small_logit_max = 3.0;
    // Large/transparent population; log-uniform scales spanning decades.
    double large_log_scale_min = std::log(0.08), large_log_scale_max = std::log(2.0);
    double large_logit_min = -3.0, large_logit_max = -1.0;
    int sh_degree = 0;
    double dc_min = -1.2, dc_max = 1.2;
};

struct MixtureCloud {
    GaussianCloud cloud;
    std::vector<int> labels;  // 0 = small/opaque, 1 = large/transparent
};

inline MixtureCloud mixture_cloud(const MixtureSpec& spec) {
    if (spec.n_total < 2 || !(spec.small_fraction > 0.0 && spec.small_fraction < 1.0))
        throw std::invalid_argument("mixture spec: need n_total >= 2 and fraction in (0,1)");
    MixtureCloud out;
    out.cloud.sh_degree = spec.sh_degree;
    int coeffs = sh_coeff_count(spec.sh_degree);
    int n_small = static_cast<int>(std::llround(spec.small_fraction * spec.n_total));
    n_small = std::clamp(n_small, 1, spec.n_total - 1);
    Rng pos_rng(spec.seed, 11), rot_rng(spec.seed, 12), scale_rng(spec.seed, 13);
    Rng op_rng(spec.seed, 14), sh_rng(spec.seed, 15);
    for (int i = 0; i < spec.n_total; ++i) {
        bool small = i < n_small;
        Gaussian g;
        g.sh_degree = spec.sh_degree;
        g.position = {static_cast<float>(pos_rng.uniform(spec.box_min.x, spec.box_max.x)),
                      static_cast<float>(pos_rng.uniform(spec.box_min.y, spec.box_max.y)),
                      static_cast<float>(pos_rng.uniform(spec.box_min.z, spec.box_max.z))};
        Quat<double> q = rot_rng.unit_quaternion();
        g.rotation_raw = {static_cast<float>(q.w), static_cast<float>(q.x),
                          static_cast<float>(q.y), static_cast<float>(q.z)};
        double lo = small ? spec.small_log_scale_min : spec.large_log_scale_min;
        double hi = small ? spec.small_log_scale_max : spec.large_log_scale_max;
        g.log_scale = {static_cast<float>(scale_rng.uniform(lo, hi)),
                       static_cast<float>(scale_rng.uniform(lo, hi)),
                       static_cast<float>(scale_rng.uniform(lo, hi))};
        g.opacity_logit = static_cast<float>(
            small ? op_rng.uniform(spec.small_logit_min, spec.small_logit_max)
                  : op_rng.uniform(spec.large_logit_min, spec.large_logit_max));
        g.sh_coeffs.assign(static_cast<size_t>(coeffs) * 3, 0.f);
        for (int c = 0; c < 3; ++c)
            g.sh_coeffs[static_cast<size_t>(c)] = static_cast<float>(sh_rng.uniform(spec.dc_min, spec.dc_max));
        out.cloud.gaussians.push_back(std::move(g));
        out.labels.push_back(small ? 0 : 1);
    }
    return out;
}

}  // namespace pointsplat
