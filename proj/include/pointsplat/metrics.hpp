#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pointsplat/image.hpp"
#include "pointsplat/math.hpp"
#include "pointsplat/pruner.hpp"

namespace pointsplat {

inline constexpr double kPsnrCap = 99.0;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {
inline void require_same_shape(const Image& a, const Image& b, const char* op) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels)
        throw std::invalid_argument(std::string(op) + ": image shape mismatch");
}

inline std::vector<double> ssim_kernel() {
    std::vector<double> k(kSsimWindow * kSsimWindow);
    double sum = 0.0;
    int half = kSsimWindow / 2;
    for (int y = 0; y < kSsimWindow; ++y)
        for (int x = 0; x < kSsimWindow; ++x) {
            double dy = y - half, dx = x - half;
            double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kSsimSigma * kSsimSigma));
            k[static_cast<size_t>(y) * kSsimWindow + x] = v;
            sum += v;
        }
    for (double& v : k) v /= sum;
    return k;
}

inline std::vector<double> to_gray(const Image& img) {
    std::vector<double> g(static_cast<size_t>(img.height) * img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double s = 0.0;
            for (int c = 0; c < img.channels; ++c) s += img.at(y, x, c);
            g[static_cast<size_t>(y) * img.width + x] = s / img.channels;
        }
    return g;
}
}  // namespace detail

/// 10 log10(1 / MSE) for images in [0,1]; identical images report the 99 dB
/// sentinel and nothing exceeds it.
inline double psnr(const Image& a, const Image& b) {
    detail::require_same_shape(a, b, "psnr");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    double mse = acc / static_cast<double>(a.data.size());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// Standard windowed SSIM: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2, grayscale = channel mean, averaged over valid windows.
inline double ssim(const Image& a, const Image& b) {
    detail::require_same_shape(a, b, "ssim");
    if (a.height < kSsimWindow || a.width < kSsimWindow)
        throw std::invalid_argument("ssim: image smaller than the 11x11 window");
    static const std::vector<double> kernel = detail::ssim_kernel();
    std::vector<double> x = detail::to_gray(a), y = detail::to_gray(b);
    int h = a.height, w = a.width;
    int vh = h - kSsimWindow + 1, vw = w - kSsimWindow + 1;
    double total = 0.0;
    for (int wy = 0; wy < vh; ++wy)
        for (int wx = 0; wx < vw; ++wx) {
            double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
            for (int ky = 0; ky < kSsimWindow; ++ky)
                for (int kx = 0; kx < kSsimWindow; ++kx) {
                    double kv = kernel[static_cast<size_t>(ky) * kSsimWindow + kx];
                    double xv = x[static_cast<size_t>(wy + ky) * w + (wx + kx)];
                    double yv = y[static_cast<size_t>(wy + ky) * w + (wx + kx)];
                    mx += kv * xv;
                    my += kv * yv;
                    mxx += kv * xv * xv;
                    myy += kv * yv * yv;
                    mxy += kv * xv * yv;
                }
            double vx = mxx - mx * mx, vy = myy - my * my, vxy = mxy - mx * my;
            double num = (2 * mx * my + kSsimC1) * (2 * vxy + kSsimC2);
            double den = (mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2);
            total += num / den;
        }
    return total / (static_cast<double>(vh) * vw);
}

struct MetricReport {
    double psnr = 0.0;
    double ssim = 0.0;
    struct View {
        std::string name;
        double psnr = 0.0, ssim = 0.0;
    };
    std::vector<View> views;

    std::string to_text() const {
        std::ostringstream os;
        os.precision(10);
        for (const auto& v : views)
            os << v.name << " psnr=" << v.psnr << " ssim=" << v.ssim << '\n';
        os << "mean psnr=" << psnr << " ssim=" << ssim << '\n';
        return os.str();
    }
};

inline MetricReport evaluate_views(const std::vector<std::string>& names,
                                   const std::vector<Image>& renders,
                                   const std::vector<Image>& targets) {
    if (renders.size() != targets.size() || renders.size() != names.size())
        throw std::invalid_argument("evaluate_views: count mismatch");
    MetricReport rep;
    for (size_t i = 0; i < renders.size(); ++i) {
        MetricReport::View v;
        v.name = names[i];
        v.psnr = psnr(renders[i], targets[i]);
        v.ssim = ssim(renders[i], targets[i]);
        rep.views.push_back(v);
        rep.psnr += v.psnr;
        rep.ssim += v.ssim;
    }
    if (!rep.views.empty()) {
        rep.psnr /= static_cast<double>(rep.views.size());
        rep.ssim /= static_cast<double>(rep.views.size());
    }
    return rep;
}

struct Histogram {
    double lo = 0.0, hi = 1.0;
    std::vector<long long> counts;  // fixed 50 bins

    void add(double v) {
        if (counts.empty()) counts.assign(50, 0);
        int bin = static_cast<int>((v - lo) / (hi - lo) * 50.0);
        bin = std::clamp(bin, 0, 49);
        ++counts[static_cast<size_t>(bin)];
    }
};

struct DistributionStats {
    Histogram selected_opacity, rejected_opacity;
    Histogram selected_log_volume, rejected_log_volume;
    double selected_median_opacity = 0.0, rejected_median_opacity = 0.0;
    double selected_median_log_volume = 0.0, rejected_median_log_volume = 0.0;
    size_t selected_count = 0, rejected_count = 0;
};

/// Opacity / log10-volume distributions of selected vs rejected Gaussians,
/// with fixed binning: opacity over [0,1], log-volume over the observed
/// range of the whole cloud.
inline DistributionStats distribution_stats(const GaussianCloud& cloud,
                                            std::span<const size_t> selected) {
    size_t n = cloud.size();
    std::vector<char> sel(n, 0);
    for (size_t i : selected) {
        if (i >= n) throw std::invalid_argument("distribution_stats: index out of range");
        sel[i] = 1;
    }
    double lo = 0.0, hi = 1.0;
    if (n > 0) {
        lo = hi = log10_volume(cloud.gaussians[0]);
        for (size_t i = 1; i < n; ++i) {
            double v = log10_volume(cloud.gaussians[i]);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi <= lo) hi = lo + 1.0;
    }
    DistributionStats st;
    st.selected_opacity = {0.0, 1.0, std::vector<long long>(50, 0)};
    st.rejected_opacity = {0.0, 1.0, std::vector<long long>(50, 0)};
    st.selected_log_volume = {lo, hi, std::vector<long long>(50, 0)};
    st.rejected_log_volume = {lo, hi, std::vector<long long>(50, 0)};
    std::vector<double> sel_op, rej_op, sel_lv, rej_lv;
    for (size_t i = 0; i < n; ++i) {
        double op = cloud.gaussians[i].opacity();
        double lv = log10_volume(cloud.gaussians[i]);
        if (sel[i]) {
            st.selected_opacity.add(op);
            st.selected_log_volume.add(lv);
            sel_op.push_back(op);
            sel_lv.push_back(lv);
        } else {
            st.rejected_opacity.add(op);
            st.rejected_log_volume.add(lv);
            rej_op.push_back(op);
            rej_lv.push_back(lv);
        }
    }
    st.selected_count = sel_op.size();
    st.rejected_count = rej_op.size();
    st.selected_median_opacity = median_of(sel_op);
    st.rejected_median_opacity = median_of(rej_op);
    st.selected_median_log_volume = median_of(sel_lv);
    st.rejected_median_log_volume = median_of(rej_lv);
    return st;
}

inline void write_distribution_csv(const DistributionStats& st, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.precision(10);
    out << "quantity,bin_lo,bin_hi,selected,rejected\n";
    auto dump = [&](const char* name, const Histogram& s, const Histogram& r) {
        for (int b = 0; b < 50; ++b) {
            double blo = s.lo + (s.hi - s.lo) * b / 50.0;
            double bhi = s.lo + (s.hi - s.lo) * (b + 1) / 50.0;
            out << name << ',' << blo << ',' << bhi << ',' << s.counts[static_cast<size_t>(b)]
                << ',' << r.counts[static_cast<size_t>(b)] << '\n';
        }
    };
    dump("opacity", st.selected_opacity, st.rejected_opacity);
    dump("log10_volume", st.selected_log_volume, st.rejected_log_volume);
}

}  // namespace pointsplat
