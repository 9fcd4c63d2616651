#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "pointsplat/camera.hpp"
#include "pointsplat/gaussian.hpp"
#include "pointsplat/image.hpp"
#include "pointsplat/shading.hpp"

namespace pointsplat {

// Splatting constants, common practice for 3DGS-style rasterizers. The
// contribution of a splat at a pixel is alpha' = min(0.99, alpha * g) with
// g = exp(-1/2 d^T cov2d^-1 d); contributions below 1/255 are skipped and
// compositing stops once transmittance falls under 1e-4. Pixel (ix, iy)
// samples at (ix + 0.5, iy + 0.5).
inline constexpr double kAlphaClamp = 0.99;
inline constexpr double kAlphaSkip = 1.0 / 255.0;
inline constexpr double kTransmittanceCutoff = 1e-4;
inline constexpr double kCovDilation = 0.3;
inline constexpr double kCullSigma = 3.0;
// Pixel-footprint radius used for tile binning. Any radius >= 3.326 marginal
// sigmas guarantees alpha' < 1/255 outside the box, which keeps tiled output
// bit-identical to full per-pixel evaluation.
inline constexpr double kFootprintSigma = 3.5;

inline constexpr int kTileSize = 16;

/// Raw Gaussian parameters as structure-of-arrays in precision T. Training
/// runs the rasterizer directly on these, so no float32 round-trip happens
/// inside the differentiable path.
template <class T>
struct SplatParams {
    int sh_degree = 0;
    size_t count = 0;
    std::vector<T> pos;            // 3N
    std::vector<T> rot;            // 4N, (w,x,y,z) raw
    std::vector<T> log_scale;      // 3N
    std::vector<T> opacity_logit;  // N
    std::vector<T> sh;             // N * 3 * (L+1)^2, coefficient-major

    int coeffs() const { return sh_coeff_count(sh_degree); }

    static SplatParams from_cloud(const GaussianCloud& cloud) {
        SplatParams p;
        p.sh_degree = cloud.sh_degree;
        p.count = cloud.size();
        size_t n = p.count;
        int k = p.coeffs();
        p.pos.resize(3 * n);
        p.rot.resize(4 * n);
        p.log_scale.resize(3 * n);
        p.opacity_logit.resize(n);
        p.sh.resize(n * static_cast<size_t>(3 * k));
        for (size_t i = 0; i < n; ++i) {
            const Gaussian& g = cloud.gaussians[i];
            p.pos[3 * i] = T(g.position.x);
            p.pos[3 * i + 1] = T(g.position.y);
            p.pos[3 * i + 2] = T(g.position.z);
            for (int c = 0; c < 4; ++c) p.rot[4 * i + c] = T(g.rotation_raw[c]);
            p.log_scale[3 * i] = T(g.log_scale.x);
            p.log_scale[3 * i + 1] = T(g.log_scale.y);
            p.log_scale[3 * i + 2] = T(g.log_scale.z);
            p.opacity_logit[i] = T(g.opacity_logit);
            for (int j = 0; j < 3 * k; ++j) p.sh[i * static_cast<size_t>(3 * k) + j] = T(g.sh_coeffs[j]);
        }
        return p;
    }

    GaussianCloud to_cloud() const {
        GaussianCloud cloud;
        cloud.sh_degree = sh_degree;
        cloud.gaussians.resize(count);
        int k = coeffs();
        for (size_t i = 0; i < count; ++i) {
            Gaussian& g = cloud.gaussians[i];
            g.sh_degree = sh_degree;
            g.position = {float(pos[3 * i]), float(pos[3 * i + 1]), float(pos[3 * i + 2])};
            for (int c = 0; c < 4; ++c) g.rotation_raw[c] = float(rot[4 * i + c]);
            g.log_scale = {float(log_scale[3 * i]), float(log_scale[3 * i + 1]), float(log_scale[3 * i + 2])};
            g.opacity_logit = float(opacity_logit[i]);
            g.sh_coeffs.resize(static_cast<size_t>(3 * k));
            for (int j = 0; j < 3 * k; ++j) g.sh_coeffs[j] = float(sh[i * static_cast<size_t>(3 * k) + j]);
        }
        return cloud;
    }
};

template <class T>
struct RenderBuffers {
    int height = 0, width = 0;
    std::vector<T> rgb;        // h*w*3
    std::vector<int> overdraw; // h*w, splats blended per pixel
    std::vector<T> alpha;      // h*w accumulated opacity

    RenderBuffers() = default;
    RenderBuffers(int h, int w)
        : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, T(0)),
          overdraw(static_cast<size_t>(h) * w, 0), alpha(static_cast<size_t>(h) * w, T(0)) {}
};

struct RenderOutput {
    Image rgb;                  // in [0,1]
    std::vector<int> overdraw;  // h*w
    Image alpha;                // single channel

    double mean_overdraw() const {
        if (overdraw.empty()) return 0.0;
        long long s = std::accumulate(overdraw.begin(), overdraw.end(), 0LL);
        return static_cast<double>(s) / static_cast<double>(overdraw.size());
    }
};

template <class T>
struct SplatGrads {
    std::vector<T> pos, rot, log_scale, opacity_logit, sh;

    explicit SplatGrads(const SplatParams<T>& p)
        : pos(p.pos.size(), T(0)), rot(p.rot.size(), T(0)), log_scale(p.log_scale.size(), T(0)),
          opacity_logit(p.opacity_logit.size(), T(0)), sh(p.sh.size(), T(0)) {}
};

namespace detail {

template <class T>
struct Projected {
    bool culled = true;
    T mx = 0, my = 0;              // mean2d
    T cxx = 0, cxy = 0, cyy = 0;   // cov2d (dilated)
    T depth = 0;
    Vec3<T> p_cam{};
    Mat3<T> cov3{};
};

template <class T>
Projected<T> project_core(const T* pos, const T* rot, const T* log_scale, const Camera& cam) {
    Projected<T> out;
    Mat3<T> w;
    for (int i = 0; i < 9; ++i) w.m[i] = T(cam.rotation.m[i]);
    Vec3<T> p = w * Vec3<T>{pos[0], pos[1], pos[2]} +
                Vec3<T>{T(cam.translation.x), T(cam.translation.y), T(cam.translation.z)};
    out.p_cam = p;
    out.depth = p.z;
    if (!(p.z > T(cam.near)) || !(p.z < T(cam.far))) return out;

    Quat<T> q{rot[0], rot[1], rot[2], rot[3]};
    Mat3<T> r = quat_to_rotation(q);
    T s0 = std::exp(log_scale[0]), s1 = std::exp(log_scale[1]), s2 = std::exp(log_scale[2]);
    T d[3] = {s0 * s0, s1 * s1, s2 * s2};
    Mat3<T>& cov3 = out.cov3;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            T acc = 0;
            for (int k = 0; k < 3; ++k) acc += r.at(i, k) * d[k] * r.at(j, k);
            cov3.at(i, j) = acc;
        }

    T fx = T(cam.fx), fy = T(cam.fy);
    T z = p.z, zz = z * z;
    // M = J W, J the perspective Jacobian at the splat center (2x3).
    T j00 = fx / z, j02 = -fx * p.x / zz;
    T j11 = fy / z, j12 = -fy * p.y / zz;
    T m0[3], m1[3];
    for (int c = 0; c < 3; ++c) {
        m0[c] = j00 * w.at(0, c) + j02 * w.at(2, c);
        m1[c] = j11 * w.at(1, c) + j12 * w.at(2, c);
    }
    auto quad = [&](const T* a, const T* b) {
        T acc = 0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) acc += a[i] * cov3.at(i, j) * b[j];
        return acc;
    };
    out.cxx = quad(m0, m0) + T(kCovDilation);
    out.cxy = quad(m0, m1);
    out.cyy = quad(m1, m1) + T(kCovDilation);
    out.mx = fx * p.x / z + T(cam.cx);
    out.my = fy * p.y / z + T(cam.cy);

    T rx = T(kCullSigma) * std::sqrt(out.cxx);
    T ry = T(kCullSigma) * std::sqrt(out.cyy);
    if (out.mx + rx < T(0) || out.mx - rx > T(cam.width) || out.my + ry < T(0) ||
        out.my - ry > T(cam.height))
        return out;

    out.culled = false;
    return out;
}

template <class T>
struct Prepared {
    int index = 0;
    T depth = 0;
    T mx = 0, my = 0;
    T pxx = 0, pxy = 0, pyy = 0;  // inverse cov2d
    T alpha = 0;
    T color[3] = {0, 0, 0};       // clamped
    int x0 = 0, x1 = 0, y0 = 0, y1 = 0;
};

// Projects, shades and depth-sorts the visible splats. Shared by forward and
// backward so both see the same order.
template <class T>
std::vector<Prepared<T>> prepare_splats(const SplatParams<T>& params, const Camera& cam) {
    std::vector<Prepared<T>> out;
    out.reserve(params.count);
    Vec3<double> cd = cam.center();
    Vec3<T> cam_center{T(cd.x), T(cd.y), T(cd.z)};
    int k3 = 3 * params.coeffs();
    for (size_t i = 0; i < params.count; ++i) {
        Projected<T> pr = project_core<T>(&params.pos[3 * i], &params.rot[4 * i],
                                          &params.log_scale[3 * i], cam);
        if (pr.culled) continue;
        T alpha = T(1) / (T(1) + std::exp(-params.opacity_logit[i]));
        if (!(alpha >= T(kAlphaSkip))) continue;  // can never contribute
        T det = pr.cxx * pr.cyy - pr.cxy * pr.cxy;
        if (!(det > T(0))) continue;

        Prepared<T> s;
        s.index = static_cast<int>(i);
        s.depth = pr.depth;
        s.mx = pr.mx;
        s.my = pr.my;
        s.pxx = pr.cyy / det;
        s.pxy = -pr.cxy / det;
        s.pyy = pr.cxx / det;
        s.alpha = alpha;

        Vec3<T> dir = (Vec3<T>{params.pos[3 * i], params.pos[3 * i + 1], params.pos[3 * i + 2]} -
                       cam_center)
                          .normalized();
        Vec3<T> col = sh_color_clamped<T>(
            std::span<const T>(&params.sh[i * static_cast<size_t>(k3)], static_cast<size_t>(k3)),
            params.sh_degree, dir);
        s.color[0] = col.x;
        s.color[1] = col.y;
        s.color[2] = col.z;

        T rx = T(kFootprintSigma) * std::sqrt(pr.cxx);
        T ry = T(kFootprintSigma) * std::sqrt(pr.cyy);
        s.x0 = std::max(0, static_cast<int>(std::floor(pr.mx - rx)));
        s.x1 = std::min(cam.width, static_cast<int>(std::ceil(pr.mx + rx)));
        s.y0 = std::max(0, static_cast<int>(std::floor(pr.my - ry)));
        s.y1 = std::min(cam.height, static_cast<int>(std::ceil(pr.my + ry)));
        if (s.x1 <= s.x0 || s.y1 <= s.y0) continue;
        out.push_back(s);
    }
    std::sort(out.begin(), out.end(), [](const Prepared<T>& a, const Prepared<T>& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.index < b.index;
    });
    return out;
}

template <class T>
std::vector<std::vector<int>> bin_tiles(const std::vector<Prepared<T>>& splats, int w, int h,
                                        int& tiles_x, int& tiles_y) {
    tiles_x = (w + kTileSize - 1) / kTileSize;
    tiles_y = (h + kTileSize - 1) / kTileSize;
    std::vector<std::vector<int>> tiles(static_cast<size_t>(tiles_x) * tiles_y);
    for (size_t si = 0; si < splats.size(); ++si) {
        const Prepared<T>& s = splats[si];
        int tx0 = s.x0 / kTileSize, tx1 = (s.x1 - 1) / kTileSize;
        int ty0 = s.y0 / kTileSize, ty1 = (s.y1 - 1) / kTileSize;
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                tiles[static_cast<size_t>(ty) * tiles_x + tx].push_back(static_cast<int>(si));
    }
    return tiles;
}

}  // namespace detail

/// Projection of one Gaussian: 2D mean, dilated 2D covariance and depth, or
/// nullopt when the splat is culled (behind near/far or off-frame by 3 sigma).
struct ProjectResult {
    Vec2<double> mean2d;
    double cov2d[3];  // xx, xy, yy
    double depth;
};

inline std::optional<ProjectResult> project(const Gaussian& g, const Camera& cam) {
    SplatParams<double> p;
    double pos[3] = {g.position.x, g.position.y, g.position.z};
    double rot[4] = {g.rotation_raw[0], g.rotation_raw[1], g.rotation_raw[2], g.rotation_raw[3]};
    double ls[3] = {g.log_scale.x, g.log_scale.y, g.log_scale.z};
    auto pr = detail::project_core<double>(pos, rot, ls, cam);
    if (pr.culled) return std::nullopt;
    ProjectResult r;
    r.mean2d = {pr.mx, pr.my};
    r.cov2d[0] = pr.cxx;
    r.cov2d[1] = pr.cxy;
    r.cov2d[2] = pr.cyy;
    r.depth = pr.depth;
    return r;
}

/// Tile-based forward splatting with front-to-back alpha compositing over a
/// black background. Splats are globally depth-sorted (ties by index), so the
/// output is independent of tiling.
template <class T>
RenderBuffers<T> rasterize(const SplatParams<T>& params, const Camera& cam) {
    cam.validate();
    RenderBuffers<T> out(cam.height, cam.width);
    auto splats = detail::prepare_splats<T>(params, cam);
    if (splats.empty()) return out;
    int tiles_x = 0, tiles_y = 0;
    auto tiles = detail::bin_tiles<T>(splats, cam.width, cam.height, tiles_x, tiles_y);

    for (int ty = 0; ty < tiles_y; ++ty)
        for (int tx = 0; tx < tiles_x; ++tx) {
            const auto& list = tiles[static_cast<size_t>(ty) * tiles_x + tx];
            if (list.empty()) continue;
            int px0 = tx * kTileSize, px1 = std::min(cam.width, px0 + kTileSize);
            int py0 = ty * kTileSize, py1 = std::min(cam.height, py0 + kTileSize);
            for (int py = py0; py < py1; ++py)
                for (int px = px0; px < px1; ++px) {
                    T trans = T(1);
                    T rgb[3] = {T(0), T(0), T(0)};
                    int od = 0;
                    for (int si : list) {
                        const detail::Prepared<T>& s = splats[static_cast<size_t>(si)];
                        T dx = T(px) + T(0.5) - s.mx;
                        T dy = T(py) + T(0.5) - s.my;
                        T power = T(-0.5) * (s.pxx * dx * dx + s.pyy * dy * dy) - s.pxy * dx * dy;
                        if (power > T(0)) continue;
                        T a = s.alpha * std::exp(power);
                        if (a > T(kAlphaClamp)) a = T(kAlphaClamp);
                        if (a < T(kAlphaSkip)) continue;
                        for (int c = 0; c < 3; ++c) rgb[c] += s.color[c] * a * trans;
                        ++od;
                        trans *= T(1) - a;
                        if (trans < T(kTransmittanceCutoff)) break;
                    }
                    size_t pix = static_cast<size_t>(py) * cam.width + px;
                    for (int c = 0; c < 3; ++c) out.rgb[pix * 3 + c] = rgb[c];
                    out.overdraw[pix] = od;
                    out.alpha[pix] = T(1) - trans;
                }
        }
    return out;
}

inline RenderOutput rasterize(const GaussianCloud& cloud, const Camera& cam) {
    auto buf = rasterize<float>(SplatParams<float>::from_cloud(cloud), cam);
    RenderOutput out;
    out.rgb = Image(cam.height, cam.width, 3);
    out.rgb.data.assign(buf.rgb.begin(), buf.rgb.end());
    out.overdraw = std::move(buf.overdraw);
    out.alpha = Image(cam.height, cam.width, 1);
    out.alpha.data.assign(buf.alpha.begin(), buf.alpha.end());
    return out;
}

/// Exact reverse-mode gradients of the compositing equation with respect to
/// the raw parameters, chaining through sigmoid, exp, quaternion
/// normalization and the SH view dependence. The depth order is treated as
/// constant. Per-pixel contribution lists are recomputed rather than stored.
template <class T>
SplatGrads<T> rasterize_backward(const SplatParams<T>& params, const Camera& cam,
                                 std::span<const T> upstream_rgb) {
    cam.validate();
    if (upstream_rgb.size() != static_cast<size_t>(cam.height) * cam.width * 3)
        throw std::invalid_argument("rasterize_backward: upstream gradient shape mismatch");
    SplatGrads<T> grads(params);
    auto splats = detail::prepare_splats<T>(params, cam);
    if (splats.empty()) return grads;
    int tiles_x = 0, tiles_y = 0;
    auto tiles = detail::bin_tiles<T>(splats, cam.width, cam.height, tiles_x, tiles_y);

    // Stage 1: accumulate gradients w.r.t. per-splat screen-space quantities.
    struct ScreenGrad {
        T mx = 0, my = 0;          // d/d mean2d
        T pxx = 0, pxy = 0, pyy = 0;  // d/d inverse-cov (symmetric storage)
        T alpha = 0;               // d/d activated opacity
        T color[3] = {0, 0, 0};    // d/d clamped color
    };
    std::vector<ScreenGrad> sg(splats.size());

    struct Entry {
        int si;
        T a, g, dx, dy, trans;
        bool clamped;
    };
    std::vector<Entry> entries;
    entries.reserve(64);

    for (int ty = 0; ty < tiles_y; ++ty)
        for (int tx = 0; tx < tiles_x; ++tx) {
            const auto& list = tiles[static_cast<size_t>(ty) * tiles_x + tx];
            if (list.empty()) continue;
            int px0 = tx * kTileSize, px1 = std::min(cam.width, px0 + kTileSize);
            int py0 = ty * kTileSize, py1 = std::min(cam.height, py0 + kTileSize);
            for (int py = py0; py < py1; ++py)
                for (int px = px0; px < px1; ++px) {
                    size_t pix = static_cast<size_t>(py) * cam.width + px;
                    const T* up = &upstream_rgb[pix * 3];
                    if (up[0] == T(0) && up[1] == T(0) && up[2] == T(0)) continue;
                    entries.clear();
                    T trans = T(1);
                    for (int si : list) {
                        const detail::Prepared<T>& s = splats[static_cast<size_t>(si)];
                        T dx = T(px) + T(0.5) - s.mx;
                        T dy = T(py) + T(0.5) - s.my;
                        T power = T(-0.5) * (s.pxx * dx * dx + s.pyy * dy * dy) - s.pxy * dx * dy;
                        if (power > T(0)) continue;
                        T g = std::exp(power);
                        T a = s.alpha * g;
                        bool clamped = a > T(kAlphaClamp);
                        if (clamped) a = T(kAlphaClamp);
                        if (a < T(kAlphaSkip)) continue;
                        entries.push_back({si, a, g, dx, dy, trans, clamped});
                        trans *= T(1) - a;
                        if (trans < T(kTransmittanceCutoff)) break;
                    }
                    T s_after[3] = {T(0), T(0), T(0)};
                    for (size_t e = entries.size(); e-- > 0;) {
                        const Entry& en = entries[e];
                        const detail::Prepared<T>& s = splats[static_cast<size_t>(en.si)];
                        ScreenGrad& gr = sg[static_cast<size_t>(en.si)];
                        T dl_da = 0;
                        for (int c = 0; c < 3; ++c) {
                            T w = en.a * en.trans;
                            gr.color[c] += up[c] * w;
                            dl_da += up[c] * (s.color[c] * en.trans - s_after[c] / (T(1) - en.a));
                            s_after[c] += s.color[c] * w;
                        }
                        if (en.clamped) continue;  // flat region of min()
                        gr.alpha += dl_da * en.g;
                        T dl_dpower = dl_da * s.alpha * en.g;
                        gr.mx += dl_dpower * (s.pxx * en.dx + s.pxy * en.dy);
                        gr.my += dl_dpower * (s.pyy * en.dy + s.pxy * en.dx);
                        gr.pxx += dl_dpower * T(-0.5) * en.dx * en.dx;
                        gr.pyy += dl_dpower * T(-0.5) * en.dy * en.dy;
                        gr.pxy += dl_dpower * (-en.dx * en.dy);
                    }
                }
        }

    // Stage 2: chain screen-space gradients back to the raw parameters.
    Mat3<T> w;
    for (int i = 0; i < 9; ++i) w.m[i] = T(cam.rotation.m[i]);
    Vec3<double> cd = cam.center();
    Vec3<T> cam_center{T(cd.x), T(cd.y), T(cd.z)};
    T fx = T(cam.fx), fy = T(cam.fy);
    int k3 = 3 * params.coeffs();

    for (size_t si = 0; si < splats.size(); ++si) {
        const detail::Prepared<T>& s = splats[si];
        const ScreenGrad& gr = sg[si];
        size_t i = static_cast<size_t>(s.index);

        auto pr = detail::project_core<T>(&params.pos[3 * i], &params.rot[4 * i],
                                          &params.log_scale[3 * i], cam);

        // inverse-cov -> cov2d: dC = -P G P with G the full symmetric grad.
        T gf_xx = gr.pxx, gf_yy = gr.pyy, gf_xy = gr.pxy / T(2);
        T pxx = s.pxx, pxy = s.pxy, pyy = s.pyy;
        // A = P * Gfull
        T a00 = pxx * gf_xx + pxy * gf_xy, a01 = pxx * gf_xy + pxy * gf_yy;
        T a10 = pxy * gf_xx + pyy * gf_xy, a11 = pxy * gf_xy + pyy * gf_yy;
        // Gc = -(A * P)
        T gc00 = -(a00 * pxx + a01 * pxy);
        T gc01 = -(a00 * pxy + a01 * pyy);
        T gc10 = -(a10 * pxx + a11 * pxy);
        T gc11 = -(a10 * pxy + a11 * pyy);

        // cov2d = M cov3 M^T + dilation; M = J W.
        T z = pr.p_cam.z, zz = z * z;
        T j00 = fx / z, j02 = -fx * pr.p_cam.x / zz;
        T j11 = fy / z, j12 = -fy * pr.p_cam.y / zz;
        T m0[3], m1[3];
        for (int c = 0; c < 3; ++c) {
            m0[c] = j00 * w.at(0, c) + j02 * w.at(2, c);
            m1[c] = j11 * w.at(1, c) + j12 * w.at(2, c);
        }
        // dL/dcov3 = M^T Gc M
        Mat3<T> g3;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                g3.at(r, c) = m0[r] * (gc00 * m0[c] + gc01 * m1[c]) +
                              m1[r] * (gc10 * m0[c] + gc11 * m1[c]);
        // dL/dM = (Gc + Gc^T) M cov3
        T sym00 = gc00 + gc00, sym01 = gc01 + gc10, sym11 = gc11 + gc11;
        T mc0[3], mc1[3];  // rows of M * cov3
        for (int c = 0; c < 3; ++c) {
            mc0[c] = m0[0] * pr.cov3.at(0, c) + m0[1] * pr.cov3.at(1, c) + m0[2] * pr.cov3.at(2, c);
            mc1[c] = m1[0] * pr.cov3.at(0, c) + m1[1] * pr.cov3.at(1, c) + m1[2] * pr.cov3.at(2, c);
        }
        T dm0[3], dm1[3];
        for (int c = 0; c < 3; ++c) {
            dm0[c] = sym00 * mc0[c] + sym01 * mc1[c];
            dm1[c] = sym01 * mc0[c] + sym11 * mc1[c];
        }
        // dL/dJ = dM W^T (only entries 00, 02, 11, 12 exist)
        T dj00 = 0, dj02 = 0, dj11 = 0, dj12 = 0;
        for (int c = 0; c < 3; ++c) {
            dj00 += dm0[c] * w.at(0, c);
            dj02 += dm0[c] * w.at(2, c);
            dj11 += dm1[c] * w.at(1, c);
            dj12 += dm1[c] * w.at(2, c);
        }
        // J and mean2d depend on p_cam.
        Vec3<T> dp{};
        T zzz = zz * z;
        dp.x += dj02 * (-fx / zz);
        dp.y += dj12 * (-fy / zz);
        dp.z += dj00 * (-fx / zz) + dj02 * (T(2) * fx * pr.p_cam.x / zzz) +
                dj11 * (-fy / zz) + dj12 * (T(2) * fy * pr.p_cam.y / zzz);
        dp.x += gr.mx * (fx / z);
        dp.y += gr.my * (fy / z);
        dp.z += -gr.mx * fx * pr.p_cam.x / zz - gr.my * fy * pr.p_cam.y / zz;
        // dL/dmu += W^T dp
        Vec3<T> dmu = w.transpose() * dp;

        // cov3 = R D R^T with D = diag(exp(2 l)).
        Quat<T> q{params.rot[4 * i], params.rot[4 * i + 1], params.rot[4 * i + 2],
                  params.rot[4 * i + 3]};
        T qn = q.norm();
        Quat<T> qh{q.w / qn, q.x / qn, q.y / qn, q.z / qn};
        Mat3<T> r = quat_to_rotation(q);
        T e2l[3] = {std::exp(T(2) * params.log_scale[3 * i]),
                    std::exp(T(2) * params.log_scale[3 * i + 1]),
                    std::exp(T(2) * params.log_scale[3 * i + 2])};
        for (int k = 0; k < 3; ++k) {
            T rk[3] = {r.at(0, k), r.at(1, k), r.at(2, k)};
            T quad = 0;
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) quad += rk[a] * g3.at(a, b) * rk[b];
            grads.log_scale[3 * i + k] += T(2) * e2l[k] * quad;
        }
        // dL/dR = (G3 + G3^T) R D
        Mat3<T> dr;
        for (int a = 0; a < 3; ++a)
            for (int k = 0; k < 3; ++k) {
                T acc = 0;
                for (int b = 0; b < 3; ++b) acc += (g3.at(a, b) + g3.at(b, a)) * r.at(b, k);
                dr.at(a, k) = acc * e2l[k];
            }
        // dR/d(qhat), rotation matrix built from the normalized quaternion.
        T qw = qh.w, qx = qh.x, qy = qh.y, qz = qh.z;
        T dqh[4] = {0, 0, 0, 0};
        auto acc = [&](int comp, T d00, T d01, T d02, T d10, T d11, T d12, T d20, T d21, T d22) {
            dqh[comp] += dr.at(0, 0) * d00 + dr.at(0, 1) * d01 + dr.at(0, 2) * d02 +
                         dr.at(1, 0) * d10 + dr.at(1, 1) * d11 + dr.at(1, 2) * d12 +
                         dr.at(2, 0) * d20 + dr.at(2, 1) * d21 + dr.at(2, 2) * d22;
        };
        acc(0, 0, -2 * qz, 2 * qy, 2 * qz, 0, -2 * qx, -2 * qy, 2 * qx, 0);
        acc(1, 0, 2 * qy, 2 * qz, 2 * qy, -4 * qx, -2 * qw, 2 * qz, 2 * qw, -4 * qx);
        acc(2, -4 * qy, 2 * qx, 2 * qw, 2 * qx, 0, 2 * qz, -2 * qw, 2 * qz, -4 * qy);
        acc(3, -4 * qz, -2 * qw, 2 * qx, 2 * qw, -4 * qz, 2 * qy, 2 * qx, 2 * qy, 0);
        // through normalization: dq = (I - qh qh^T)/|q| dqh
        T qdot = qw * dqh[0] + qx * dqh[1] + qy * dqh[2] + qz * dqh[3];
        T qhv[4] = {qw, qx, qy, qz};
        for (int c = 0; c < 4; ++c) grads.rot[4 * i + c] += (dqh[c] - qhv[c] * qdot) / qn;

        // Color: clamp passes gradient strictly inside (0,1); SH view
        // direction depends on the position.
        Vec3<T> mu{params.pos[3 * i], params.pos[3 * i + 1], params.pos[3 * i + 2]};
        Vec3<T> rel = mu - cam_center;
        T dist = rel.norm();
        Vec3<T> dir = {rel.x / dist, rel.y / dist, rel.z / dist};
        auto basis = sh_basis<T>(dir, params.sh_degree);
        auto bgrad = sh_basis_gradient<T>(dir, params.sh_degree);
        const T* shp = &params.sh[i * static_cast<size_t>(k3)];
        Vec3<T> raw = sh_color_raw<T>(std::span<const T>(shp, static_cast<size_t>(k3)),
                                      params.sh_degree, dir);
        T rawv[3] = {raw.x, raw.y, raw.z};
        Vec3<T> dv{};
        int kc = params.coeffs();
        for (int c = 0; c < 3; ++c) {
            if (!(rawv[c] > T(0) && rawv[c] < T(1))) continue;
            T gc = gr.color[c];
            if (gc == T(0)) continue;
            for (int k = 0; k < kc; ++k) {
                grads.sh[i * static_cast<size_t>(k3) + static_cast<size_t>(k) * 3 + c] +=
                    gc * basis[static_cast<size_t>(k)];
                dv = dv + bgrad[static_cast<size_t>(k)] * (gc * shp[static_cast<size_t>(k) * 3 + c]);
            }
        }
        T vdot = dir.dot(dv);
        dmu = dmu + (dv - dir * vdot) * (T(1) / dist);

        grads.pos[3 * i] += dmu.x;
        grads.pos[3 * i + 1] += dmu.y;
        grads.pos[3 * i + 2] += dmu.z;

        grads.opacity_logit[i] += gr.alpha * s.alpha * (T(1) - s.alpha);
    }
    return grads;
}

}  // namespace pointsplat
