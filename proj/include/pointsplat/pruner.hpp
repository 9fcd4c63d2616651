#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pointsplat/gaussian.hpp"

namespace pointsplat {

enum class VolumeSpace { raw, log };

struct PruneConfig {
    double lambda_alpha = 0.3;
    std::optional<double> keep_fraction;  // exactly one of fraction/count set
    std::optional<size_t> keep_count;
    VolumeSpace volume_space = VolumeSpace::raw;

    size_t resolve_k(size_t n) const {
        if (keep_fraction.has_value() == keep_count.has_value())
            throw std::invalid_argument("prune config: set exactly one of keep_fraction, keep_count");
        if (!(lambda_alpha >= 0.0 && lambda_alpha <= 1.0))
            throw std::invalid_argument("prune config: lambda_alpha must be in [0,1]");
        size_t k;
        if (keep_fraction) {
            if (!(*keep_fraction > 0.0 && *keep_fraction <= 1.0))
                throw std::invalid_argument("prune config: keep_fraction must be in (0,1]");
            k = static_cast<size_t>(std::llround(*keep_fraction * static_cast<double>(n)));
            k = std::clamp<size_t>(k, 1, n);
        } else {
            k = *keep_count;
            if (k < 1 || k > n) throw std::invalid_argument("prune config: keep_count out of [1,N]");
        }
        return k;
    }
};

struct GroupStats {
    double mean_opacity = 0.0, median_opacity = 0.0;
    double mean_log10_volume = 0.0, median_log10_volume = 0.0;
    size_t count = 0;
};

struct ScoreReport {
    std::vector<double> score;        // per Gaussian
    std::vector<size_t> selected;     // ascending indices, |selected| = K
    GroupStats selected_stats, rejected_stats;
};

/// z-score normalization with population statistics. Zero-variance input
/// maps to all zeros so the degenerate term is neutral in the score.
inline std::vector<double> zscore(std::span<const double> values) {
    MeanStd st = population_stats(values);
    std::vector<double> out(values.size(), 0.0);
    if (st.std > 0.0)
        for (size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - st.mean) / st.std;
    return out;
}

/// Ellipsoid volume (4/3) pi sx sy sz from the activated scales.
inline double volume(const Gaussian& g) {
    double s = static_cast<double>(g.log_scale.x) + static_cast<double>(g.log_scale.y) +
               static_cast<double>(g.log_scale.z);
    return (4.0 / 3.0) * 3.14159265358979323846 * std::exp(s);
}

/// log10 of the ellipsoid volume, computed without forming the raw value.
inline double log10_volume(const Gaussian& g) {
    double s = static_cast<double>(g.log_scale.x) + static_cast<double>(g.log_scale.y) +
               static_cast<double>(g.log_scale.z);
    return std::log10(4.0 / 3.0 * 3.14159265358979323846) + s / std::log(10.0);
}

/// score_i = lambda * zscore(alpha_i) + (1 - lambda) * zscore(volume_i),
/// on pre-extracted activated opacities and volumes.
inline std::vector<double> score_values(std::span<const double> alphas,
                                        std::span<const double> volumes, double lambda_alpha) {
    if (alphas.size() != volumes.size())
        throw std::invalid_argument("score: opacity/volume length mismatch");
    std::vector<double> za = zscore(alphas);
    std::vector<double> zv = zscore(volumes);
    std::vector<double> out(alphas.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = lambda_alpha * za[i] + (1.0 - lambda_alpha) * zv[i];
    return out;
}

inline std::vector<double> score(const GaussianCloud& cloud, const PruneConfig& cfg) {
    if (cloud.size() == 0) throw std::invalid_argument("score: empty cloud");
    size_t n = cloud.size();
    std::vector<double> alphas(n), volumes(n);
    for (size_t i = 0; i < n; ++i) {
        const Gaussian& g = cloud.gaussians[i];
        alphas[i] = g.opacity();
        double ls = static_cast<double>(g.log_scale.x) + static_cast<double>(g.log_scale.y) +
                    static_cast<double>(g.log_scale.z);
        volumes[i] = cfg.volume_space == VolumeSpace::raw
                         ? (4.0 / 3.0) * 3.14159265358979323846 * std::exp(ls)
                         : std::log(4.0 / 3.0 * 3.14159265358979323846) + ls;
    }
    return score_values(alphas, volumes, cfg.lambda_alpha);
}

namespace detail {

inline GroupStats group_stats(const GaussianCloud& cloud, std::span<const size_t> idx) {
    GroupStats st;
    st.count = idx.size();
    if (idx.empty()) return st;
    std::vector<double> op(idx.size()), lv(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        op[i] = cloud.gaussians[idx[i]].opacity();
        lv[i] = log10_volume(cloud.gaussians[idx[i]]);
    }
    st.mean_opacity = pairwise_sum(op) / static_cast<double>(op.size());
    st.mean_log10_volume = pairwise_sum(lv) / static_cast<double>(lv.size());
    st.median_opacity = median_of(op);
    st.median_log10_volume = median_of(lv);
    return st;
}

}  // namespace detail

/// Indices of the K largest scores; equal scores resolve to the lower index.
inline std::vector<size_t> select_top_k(std::span<const double> scores, size_t k) {
    size_t n = scores.size();
    if (k < 1 || k > n) throw std::invalid_argument("select_top_k: K out of [1,N]");
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

inline ScoreReport make_report(const GaussianCloud& cloud, std::vector<double> scores, size_t k) {
    ScoreReport rep;
    rep.selected = select_top_k(scores, k);
    rep.score = std::move(scores);
    std::vector<char> is_sel(cloud.size(), 0);
    for (size_t i : rep.selected) is_sel[i] = 1;
    std::vector<size_t> rejected;
    rejected.reserve(cloud.size() - k);
    for (size_t i = 0; i < cloud.size(); ++i)
        if (!is_sel[i]) rejected.push_back(i);
    rep.selected_stats = detail::group_stats(cloud, rep.selected);
    rep.rejected_stats = detail::group_stats(cloud, rejected);
    return rep;
}

/// Keeps the top-K Gaussians by the geometry-driven score, preserving their
/// relative order. The input cloud is untouched.
inline std::pair<GaussianCloud, ScoreReport> prune(const GaussianCloud& cloud,
                                                   const PruneConfig& cfg) {
    size_t k = cfg.resolve_k(cloud.size());
    ScoreReport rep = make_report(cloud, score(cloud, cfg), k);
    GaussianCloud out;
    out.sh_degree = cloud.sh_degree;
    out.gaussians.reserve(k);
    for (size_t i : rep.selected) out.gaussians.push_back(cloud.gaussians[i]);
    return {std::move(out), std::move(rep)};
}

inline void write_score_csv(const GaussianCloud& cloud, const ScoreReport& rep,
                            const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.precision(12);
    std::vector<char> is_sel(cloud.size(), 0);
    for (size_t i : rep.selected) is_sel[i] = 1;
    out << "index,score,opacity,log10_volume,selected\n";
    for (size_t i = 0; i < cloud.size(); ++i)
        out << i << ',' << rep.score[i] << ',' << cloud.gaussians[i].opacity() << ','
            << log10_volume(cloud.gaussians[i]) << ',' << int(is_sel[i]) << '\n';
}

inline std::string report_summary(const ScoreReport& rep) {
    std::ostringstream os;
    os.precision(12);
    os << "selected_count=" << rep.selected_stats.count << '\n'
       << "rejected_count=" << rep.rejected_stats.count << '\n'
       << "selected_mean_opacity=" << rep.selected_stats.mean_opacity << '\n'
       << "selected_median_opacity=" << rep.selected_stats.median_opacity << '\n'
       << "selected_mean_log10_volume=" << rep.selected_stats.mean_log10_volume << '\n'
       << "selected_median_log10_volume=" << rep.selected_stats.median_log10_volume << '\n'
       << "rejected_mean_opacity=" << rep.rejected_stats.mean_opacity << '\n'
       << "rejected_median_opacity=" << rep.rejected_stats.median_opacity << '\n'
       << "rejected_mean_log10_volume=" << rep.rejected_stats.mean_log10_volume << '\n'
       << "rejected_median_log10_volume=" << rep.rejected_stats.median_log10_volume << '\n';
    return os.str();
}

}  // namespace pointsplat
