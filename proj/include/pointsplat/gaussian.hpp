#pragma once

#include <cstdint>
#include <vector>

#include "pointsplat/math.hpp"

namespace pointsplat {

/// Number of SH coefficients per color channel at a given degree.
inline int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

/// One anisotropic 3D Gaussian. All parameters are stored raw
/// (pre-activation), exactly as they appear on disk: scale activates with
/// exp, opacity with sigmoid, and the quaternion is normalized at point of
/// use. Keeping the unconstrained parametrization makes residual updates and
/// round-trip I/O trivial.
struct Gaussian {
    Vec3<float> position{};
    // (w, x, y, z), possibly unnormalized, exactly the rot_0..3 disk values.
    std::array<float, 4> rotation_raw{1.f, 0.f, 0.f, 0.f};
    Vec3<float> log_scale{};
    float opacity_logit = 0.f;
    // 3*(L+1)^2 values, coefficient-major: [k0 rgb, k1 rgb, ...], DC first.
    std::vector<float> sh_coeffs;
    int sh_degree = 0;

    double opacity() const { return sigmoid(opacity_logit); }
    Vec3<double> scale() const {
        return {std::exp(static_cast<double>(log_scale.x)),
                std::exp(static_cast<double>(log_scale.y)),
                std::exp(static_cast<double>(log_scale.z))};
    }
    Quat<double> rotation() const {
        return {static_cast<double>(rotation_raw[0]), static_cast<double>(rotation_raw[1]),
                static_cast<double>(rotation_raw[2]), static_cast<double>(rotation_raw[3])};
    }
};

struct GaussianCloud {
    std::vector<Gaussian> gaussians;
    int sh_degree = 0;

    size_t size() const { return gaussians.size(); }
};

/// World-space covariance Sigma = R S S^T R^T with R from the normalized
/// quaternion and S = diag(exp(log_scale)).
inline Mat3<double> covariance(const Gaussian& g) {
    Mat3<double> rot = quat_to_rotation(g.rotation());  // rejects zero quaternions
    Vec3<double> s = g.scale();
    double d[3] = {s.x * s.x, s.y * s.y, s.z * s.z};
    Mat3<double> cov;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += rot.at(i, k) * d[k] * rot.at(j, k);
            cov.at(i, j) = acc;
        }
    return cov;
}

}  // namespace pointsplat
