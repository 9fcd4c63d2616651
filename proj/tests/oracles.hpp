// Independent reference implementations used as test oracles. These must not
// share code paths with the library implementations they check.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "pointsplat/camera.hpp"
#include "pointsplat/gaussian.hpp"
#include "pointsplat/rasterizer.hpp"

namespace oracles {

// ---------------------------------------------------------------------------
// Real spherical harmonics via the associated Legendre recurrence
// (Condon-Shortley folded into P), Sloan's real-basis convention.
inline double legendre_p(int l, int m, double x) {
    double pmm = 1.0;
    if (m > 0) {
        double somx2 = std::sqrt((1.0 - x) * (1.0 + x));
        double fact = 1.0;
        for (int i = 1; i <= m; ++i) {
            pmm *= -fact * somx2;
            fact += 2.0;
        }
    }
    if (l == m) return pmm;
    double pmmp1 = x * (2.0 * m + 1.0) * pmm;
    if (l == m + 1) return pmmp1;
    double pll = 0.0;
    for (int ll = m + 2; ll <= l; ++ll) {
        pll = ((2.0 * ll - 1.0) * x * pmmp1 - (ll + m - 1.0) * pmm) / (ll - m);
        pmm = pmmp1;
        pmmp1 = pll;
    }
    return pll;
}

inline double sh_k(int l, int m) {
    double num = (2.0 * l + 1.0);
    for (int i = l - m + 1; i <= l + m; ++i) num /= i;
    return std::sqrt(num / (4.0 * 3.14159265358979323846));
}

inline double ref_sh(int l, int m, const pointsplat::Vec3<double>& v) {
    double theta_cos = v.z;
    double phi = std::atan2(v.y, v.x);
    if (m == 0) return sh_k(l, 0) * legendre_p(l, 0, theta_cos);
    if (m > 0)
        return std::sqrt(2.0) * sh_k(l, m) * std::cos(m * phi) * legendre_p(l, m, theta_cos);
    return std::sqrt(2.0) * sh_k(l, -m) * std::sin(-m * phi) * legendre_p(l, -m, theta_cos);
}

inline std::vector<double> ref_sh_basis(const pointsplat::Vec3<double>& v, int degree) {
    std::vector<double> out;
    for (int l = 0; l <= degree; ++l)
        for (int m = -l; m <= l; ++m) out.push_back(ref_sh(l, m, v));
    return out;
}

// ---------------------------------------------------------------------------
// Quaternion-to-covariance through Eigen.
inline Eigen::Matrix3d ref_covariance(const pointsplat::Gaussian& g) {
    Eigen::Quaterniond q(g.rotation_raw[0], g.rotation_raw[1], g.rotation_raw[2], g.rotation_raw[3]);
    q.normalize();
    Eigen::Matrix3d r = q.toRotationMatrix();
    Eigen::Vector3d s(std::exp(static_cast<double>(g.log_scale.x)),
                      std::exp(static_cast<double>(g.log_scale.y)),
                      std::exp(static_cast<double>(g.log_scale.z)));
    Eigen::Matrix3d d = s.cwiseProduct(s).asDiagonal();
    return r * d * r.transpose();
}

// ---------------------------------------------------------------------------
// Pruning score recomputed with plain sequential loops.
inline std::vector<double> ref_zscore(const std::vector<double>& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    double sd = std::sqrt(var);
    std::vector<double> out(v.size(), 0.0);
    if (sd > 0)
        for (size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) / sd;
    return out;
}

inline std::vector<size_t> ref_top_k(const std::vector<double>& scores, size_t k) {
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

inline std::vector<size_t> ref_prune_selection(const pointsplat::GaussianCloud& cloud,
                                               double lambda, size_t k) {
    std::vector<double> alphas, vols;
    for (const auto& g : cloud.gaussians) {
        alphas.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(g.opacity_logit))));
        double ls = static_cast<double>(g.log_scale.x) + g.log_scale.y + g.log_scale.z;
        vols.push_back(4.0 / 3.0 * 3.14159265358979323846 * std::exp(ls));
    }
    auto za = ref_zscore(alphas), zv = ref_zscore(vols);
    std::vector<double> score(alphas.size());
    for (size_t i = 0; i < score.size(); ++i) score[i] = lambda * za[i] + (1.0 - lambda) * zv[i];
    return ref_top_k(score, k);
}

// ---------------------------------------------------------------------------
// Naive rasterizer: every projected splat evaluated at every pixel in global
// depth order, no tiles, no footprint boxes. Shares only the per-splat
// projection/shading with the library (the contract under test is tiling).
template <class T>
pointsplat::RenderBuffers<T> naive_rasterize(const pointsplat::SplatParams<T>& params,
                                             const pointsplat::Camera& cam) {
    using namespace pointsplat;
    struct S {
        int index;
        T depth, mx, my, pxx, pxy, pyy, alpha;
        T color[3];
    };
    std::vector<S> splats;
    Vec3<double> cc = cam.center();
    int k3 = 3 * params.coeffs();
    for (size_t i = 0; i < params.count; ++i) {
        auto pr = pointsplat::detail::project_core<T>(&params.pos[3 * i], &params.rot[4 * i],
                                                      &params.log_scale[3 * i], cam);
        if (pr.culled) continue;
        T alpha = T(1) / (T(1) + std::exp(-params.opacity_logit[i]));
        if (!(alpha >= T(pointsplat::kAlphaSkip))) continue;
        T det = pr.cxx * pr.cyy - pr.cxy * pr.cxy;
        if (!(det > T(0))) continue;
        S s;
        s.index = static_cast<int>(i);
        s.depth = pr.depth;
        s.mx = pr.mx;
        s.my = pr.my;
        s.pxx = pr.cyy / det;
        s.pxy = -pr.cxy / det;
        s.pyy = pr.cxx / det;
        s.alpha = alpha;
        Vec3<T> dir = (Vec3<T>{params.pos[3 * i], params.pos[3 * i + 1], params.pos[3 * i + 2]} -
                       Vec3<T>{T(cc.x), T(cc.y), T(cc.z)})
                          .normalized();
        Vec3<T> col = sh_color_clamped<T>(
            std::span<const T>(&params.sh[i * static_cast<size_t>(k3)], static_cast<size_t>(k3)),
            params.sh_degree, dir);
        s.color[0] = col.x;
        s.color[1] = col.y;
        s.color[2] = col.z;
        splats.push_back(s);
    }
    std::sort(splats.begin(), splats.end(), [](const S& a, const S& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.index < b.index;
    });

    RenderBuffers<T> out(cam.height, cam.width);
    for (int py = 0; py < cam.height; ++py)
        for (int px = 0; px < cam.width; ++px) {
            T trans = T(1);
            T rgb[3] = {T(0), T(0), T(0)};
            int od = 0;
            for (const S& s : splats) {
                T dx = T(px) + T(0.5) - s.mx;
                T dy = T(py) + T(0.5) - s.my;
                T power = T(-0.5) * (s.pxx * dx * dx + s.pyy * dy * dy) - s.pxy * dx * dy;
                if (power > T(0)) continue;
                T a = s.alpha * std::exp(power);
                if (a > T(pointsplat::kAlphaClamp)) a = T(pointsplat::kAlphaClamp);
                if (a < T(pointsplat::kAlphaSkip)) continue;
                for (int c = 0; c < 3; ++c) rgb[c] += s.color[c] * a * trans;
                ++od;
                trans *= T(1) - a;
                if (trans < T(pointsplat::kTransmittanceCutoff)) break;
            }
            size_t pix = static_cast<size_t>(py) * cam.width + px;
            for (int c = 0; c < 3; ++c) out.rgb[pix * 3 + c] = rgb[c];
            out.overdraw[pix] = od;
            out.alpha[pix] = T(1) - trans;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Central finite differences on a scalar function of a parameter vector.
inline std::vector<double> fd_gradient(std::function<double(const std::vector<double>&)> f,
                                       std::vector<double> x, double eps) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        double orig = x[i];
        x[i] = orig + eps;
        double hi = f(x);
        x[i] = orig - eps;
        double lo = f(x);
        x[i] = orig;
        g[i] = (hi - lo) / (2.0 * eps);
    }
    return g;
}

inline bool grad_close(double analytic, double fd, double rtol, double atol) {
    return std::abs(analytic - fd) <= atol + rtol * std::max(std::abs(analytic), std::abs(fd));
}

}  // namespace oracles
