#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>

#include "pointsplat/gaussian.hpp"

namespace pointsplat {

// Real SH polynomial constants, graphics convention (Condon–Shortley folded
// into the coefficients), hard-coded through degree 3.
inline constexpr double kShC0 = 0.28209479177387814;
inline constexpr double kShC1 = 0.4886025119029199;
inline constexpr double kShC2[5] = {1.0925484305920792, -1.0925484305920792,
                                    0.31539156525252005, -1.0925484305920792,
                                    0.5462742152960396};
inline constexpr double kShC3[7] = {-0.5900435899266435, 2.890611442640554,
                                    -0.4570457994644658, 0.3731763325901154,
                                    -0.4570457994644658, 1.445305721320277,
                                    -0.5900435899266435};

/// Real SH basis values for a unit direction, bands 0..L, L <= 3.
template <class T>
inline std::array<T, 16> sh_basis(const Vec3<T>& v, int degree) {
    if (degree < 0 || degree > 3) throw std::invalid_argument("sh_basis: degree must be in [0,3]");
    std::array<T, 16> b{};
    b[0] = T(kShC0);
    if (degree < 1) return b;
    T x = v.x, y = v.y, z = v.z;
    b[1] = T(-kShC1) * y;
    b[2] = T(kShC1) * z;
    b[3] = T(-kShC1) * x;
    if (degree < 2) return b;
    T xx = x * x, yy = y * y, zz = z * z;
    b[4] = T(kShC2[0]) * x * y;
    b[5] = T(kShC2[1]) * y * z;
    b[6] = T(kShC2[2]) * (2 * zz - xx - yy);
    b[7] = T(kShC2[3]) * x * z;
    b[8] = T(kShC2[4]) * (xx - yy);
    if (degree < 3) return b;
    b[9] = T(kShC3[0]) * y * (3 * xx - yy);
    b[10] = T(kShC3[1]) * x * y * z;
    b[11] = T(kShC3[2]) * y * (4 * zz - xx - yy);
    b[12] = T(kShC3[3]) * z * (2 * zz - 3 * xx - 3 * yy);
    b[13] = T(kShC3[4]) * x * (4 * zz - xx - yy);
    b[14] = T(kShC3[5]) * z * (xx - yy);
    b[15] = T(kShC3[6]) * x * (xx - 3 * yy);
    return b;
}

/// d(basis_k)/d(v) for each basis value; used by the rasterizer backward.
template <class T>
inline std::array<Vec3<T>, 16> sh_basis_gradient(const Vec3<T>& v, int degree) {
    if (degree < 0 || degree > 3)
        throw std::invalid_argument("sh_basis_gradient: degree must be in [0,3]");
    std::array<Vec3<T>, 16> g{};
    if (degree < 1) return g;
    T x = v.x, y = v.y, z = v.z;
    g[1] = {0, T(-kShC1), 0};
    g[2] = {0, 0, T(kShC1)};
    g[3] = {T(-kShC1), 0, 0};
    if (degree < 2) return g;
    T c20 = T(kShC2[0]), c21 = T(kShC2[1]), c22 = T(kShC2[2]), c23 = T(kShC2[3]), c24 = T(kShC2[4]);
    g[4] = {c20 * y, c20 * x, 0};
    g[5] = {0, c21 * z, c21 * y};
    g[6] = {-2 * c22 * x, -2 * c22 * y, 4 * c22 * z};
    g[7] = {c23 * z, 0, c23 * x};
    g[8] = {2 * c24 * x, -2 * c24 * y, 0};
    if (degree < 3) return g;
    T xx = x * x, yy = y * y, zz = z * z;
    T c30 = T(kShC3[0]), c31 = T(kShC3[1]), c32 = T(kShC3[2]), c33 = T(kShC3[3]);
    T c34 = T(kShC3[4]), c35 = T(kShC3[5]), c36 = T(kShC3[6]);
    g[9] = {6 * c30 * x * y, c30 * (3 * xx - 3 * yy), 0};
    g[10] = {c31 * y * z, c31 * x * z, c31 * x * y};
    g[11] = {-2 * c32 * x * y, c32 * (4 * zz - xx - 3 * yy), 8 * c32 * y * z};
    g[12] = {-6 * c33 * x * z, -6 * c33 * y * z, c33 * (6 * zz - 3 * xx - 3 * yy)};
    g[13] = {c34 * (4 * zz - 3 * xx - yy), -2 * c34 * x * y, 8 * c34 * x * z};
    g[14] = {2 * c35 * x * z, -2 * c35 * y * z, c35 * (xx - yy)};
    g[15] = {c36 * (3 * xx - 3 * yy), -6 * c36 * x * y, 0};
    return g;
}

/// Pre-clamp color: sum of coeff * basis per channel, plus the 0.5 DC shift.
/// sh is coefficient-major (k,c) as stored in Gaussian::sh_coeffs.
template <class T>
inline Vec3<T> sh_color_raw(std::span<const T> sh, int degree, const Vec3<T>& dir) {
    auto basis = sh_basis<T>(dir, degree);
    int coeffs = sh_coeff_count(degree);
    Vec3<T> c{};
    for (int k = 0; k < coeffs; ++k) {
        c.x += sh[static_cast<size_t>(k) * 3 + 0] * basis[k];
        c.y += sh[static_cast<size_t>(k) * 3 + 1] * basis[k];
        c.z += sh[static_cast<size_t>(k) * 3 + 2] * basis[k];
    }
    return {c.x + T(0.5), c.y + T(0.5), c.z + T(0.5)};
}

template <class T>
inline Vec3<T> sh_color_clamped(std::span<const T> sh, int degree, const Vec3<T>& dir) {
    Vec3<T> c = sh_color_raw<T>(sh, degree, dir);
    return {std::clamp(c.x, T(0), T(1)), std::clamp(c.y, T(0), T(1)), std::clamp(c.z, T(0), T(1))};
}

inline Vec3<double> sh_color(const Gaussian& g, const Vec3<double>& dir) {
    std::vector<double> sh(g.sh_coeffs.begin(), g.sh_coeffs.end());
    return sh_color_clamped<double>(sh, g.sh_degree, dir);
}

/// Peak-normalized density exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)); the
/// proportionality constant is fixed to 1 as in splatting practice.
inline double gaussian_density(const Gaussian& g, const Vec3<double>& x) {
    Mat3<double> cov = covariance(g);
    double d = cov.det();
    if (!(std::abs(d) > 1e-300)) {
        for (int i = 0; i < 3; ++i) cov.at(i, i) += 1e-8;
    }
    Mat3<double> inv = cov.inverse();
    Vec3<double> r = x - Vec3<double>{g.position.x, g.position.y, g.position.z};
    double q = r.dot(inv * r);
    return std::exp(-0.5 * q);
}

}  // namespace pointsplat
