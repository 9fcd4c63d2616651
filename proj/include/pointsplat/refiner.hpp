#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "pointsplat/camera.hpp"
#include "pointsplat/encoder.hpp"
#include "pointsplat/metrics.hpp"
#include "pointsplat/pruner.hpp"
#include "pointsplat/rasterizer.hpp"

namespace pointsplat {

struct ResidualScales {
    // mu is normalized by the scene extent at apply time.
    double mu = 0.01;
    double rotation = 0.01;
    double log_scale = 0.01;
    double opacity = 0.1;
    double sh = 0.1;
};

struct RefinerConfig {
    // (block_count, downsample_ratio); the ratio says how much the point set
    // shrinks entering that stage, so the first stage's ratio is ignored.
    std::vector<std::pair<int, int>> stages{{2, 1}, {2, 4}};
    int knn_k = 16;
    int heads = 4;
    int feature_width = 64;
    int ffn_hidden = 128;
    int head_hidden = 64;
    ResidualScales residual_scales;

    // Full-scale stage layout; the two-stage preset above is the desk default.
    static std::vector<std::pair<int, int>> paper_stages() {
        return {{2, 1}, {2, 4}, {2, 4}, {4, 4}, {2, 4}};
    }

    void validate() const {
        if (knn_k < 1) throw std::invalid_argument("refiner: knn_k must be >= 1");
        if (feature_width % heads != 0)
            throw std::invalid_argument("refiner: feature_width must divide by heads");
        for (auto [b, r] : stages)
            if (b < 1 || r < 1) throw std::invalid_argument("refiner: block counts and ratios must be >= 1");
    }
};

struct TrainConfig {
    int iterations = 10000;
    double lr = 1e-5;
    int lr_drop_iter = 6000;
    double lr_drop_factor = 10.0;
    double perceptual_weight = 0.1;
    int views_per_step = 2;
    uint64_t seed = 0;

    void validate() const {
        if (!(lr > 0)) throw std::invalid_argument("train: lr must be > 0");
        if (perceptual_weight < 0) throw std::invalid_argument("train: perceptual_weight must be >= 0");
        if (iterations < 0 || views_per_step < 1) throw std::invalid_argument("train: bad counts");
    }
};

inline double lr_at(const TrainConfig& cfg, int iter) {
    return iter >= cfg.lr_drop_iter ? cfg.lr / cfg.lr_drop_factor : cfg.lr;
}

/// k nearest neighbors by Euclidean distance, self first, distance ties by
/// lower index. Rows are always k wide; when fewer neighbors exist the row is
/// padded with the self index.
inline std::vector<int> knn_graph(std::span<const Vec3<double>> positions, int k) {
    int n = static_cast<int>(positions.size());
    if (n < 1 || k < 1) throw std::invalid_argument("knn_graph: need N >= 1 and k >= 1");
    std::vector<int> out(static_cast<size_t>(n) * k);
    std::vector<std::pair<double, int>> cand;
    for (int i = 0; i < n; ++i) {
        cand.clear();
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            Vec3<double> d = positions[static_cast<size_t>(j)] - positions[static_cast<size_t>(i)];
            cand.push_back({d.dot(d), j});
        }
        int take = std::min(k - 1, static_cast<int>(cand.size()));
        std::partial_sort(cand.begin(), cand.begin() + take, cand.end());
        int* row = &out[static_cast<size_t>(i) * k];
        row[0] = i;
        for (int t = 0; t < k - 1; ++t) row[1 + t] = t < take ? cand[static_cast<size_t>(t)].second : i;
    }
    return out;
}

struct PoolMap {
    std::vector<int> cell_of_point;
    std::vector<int> counts;
    int n_cells = 0;
};

struct LevelPlan {
    std::vector<Vec3<double>> positions;
    std::vector<int> nbr;    // N*k
    std::vector<int> owner;  // N*k
    PoolMap pool;            // towards the next (coarser) level
};

namespace detail {

/// Deterministic voxel-grid pooling: the grid resolution targets
/// ceil(N/ratio) occupied-or-not cells; occupied cells are numbered in
/// ascending linear-index order.
inline PoolMap grid_pool(std::span<const Vec3<double>> pos, int ratio) {
    int n = static_cast<int>(pos.size());
    PoolMap pm;
    pm.cell_of_point.resize(static_cast<size_t>(n));
    int64_t target = (n + ratio - 1) / ratio;
    int g = std::max(1, static_cast<int>(std::ceil(std::cbrt(static_cast<double>(target)))));
    Vec3<double> lo = pos[0], hi = pos[0];
    for (const auto& p : pos) {
        lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
        hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
    Vec3<double> ext = {std::max(hi.x - lo.x, 1e-9), std::max(hi.y - lo.y, 1e-9),
                        std::max(hi.z - lo.z, 1e-9)};
    std::vector<int64_t> linear(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& p = pos[static_cast<size_t>(i)];
        int ix = std::clamp(static_cast<int>((p.x - lo.x) / ext.x * g), 0, g - 1);
        int iy = std::clamp(static_cast<int>((p.y - lo.y) / ext.y * g), 0, g - 1);
        int iz = std::clamp(static_cast<int>((p.z - lo.z) / ext.z * g), 0, g - 1);
        linear[static_cast<size_t>(i)] = (static_cast<int64_t>(ix) * g + iy) * g + iz;
    }
    std::vector<int64_t> occupied = linear;
    std::sort(occupied.begin(), occupied.end());
    occupied.erase(std::unique(occupied.begin(), occupied.end()), occupied.end());
    pm.n_cells = static_cast<int>(occupied.size());
    pm.counts.assign(static_cast<size_t>(pm.n_cells), 0);
    for (int i = 0; i < n; ++i) {
        int cell = static_cast<int>(std::lower_bound(occupied.begin(), occupied.end(),
                                                     linear[static_cast<size_t>(i)]) -
                                    occupied.begin());
        pm.cell_of_point[static_cast<size_t>(i)] = cell;
        ++pm.counts[static_cast<size_t>(cell)];
    }
    return pm;
}

}  // namespace detail

inline std::vector<LevelPlan> build_refiner_plan(std::span<const Vec3<double>> positions,
                                                 const RefinerConfig& cfg) {
    cfg.validate();
    std::vector<LevelPlan> plans;
    std::vector<Vec3<double>> pos(positions.begin(), positions.end());
    for (size_t s = 0; s < cfg.stages.size(); ++s) {
        LevelPlan plan;
        plan.positions = pos;
        int n = static_cast<int>(pos.size());
        plan.nbr = knn_graph(plan.positions, cfg.knn_k);
        plan.owner.resize(static_cast<size_t>(n) * cfg.knn_k);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < cfg.knn_k; ++j)
                plan.owner[static_cast<size_t>(i) * cfg.knn_k + j] = i;
        if (s + 1 < cfg.stages.size()) {
            plan.pool = detail::grid_pool(plan.positions, cfg.stages[s + 1].second);
            std::vector<Vec3<double>> coarse(static_cast<size_t>(plan.pool.n_cells), Vec3<double>{});
            for (int i = 0; i < n; ++i) {
                int c = plan.pool.cell_of_point[static_cast<size_t>(i)];
                coarse[static_cast<size_t>(c)] =
                    coarse[static_cast<size_t>(c)] + plan.positions[static_cast<size_t>(i)];
            }
            for (int c = 0; c < plan.pool.n_cells; ++c)
                coarse[static_cast<size_t>(c)] =
                    coarse[static_cast<size_t>(c)] * (1.0 / plan.pool.counts[static_cast<size_t>(c)]);
            pos = std::move(coarse);
        }
        plans.push_back(std::move(plan));
    }
    return plans;
}

inline void init_refiner_params(ParamStore& store, const RefinerConfig& cfg, Rng& rng) {
    cfg.validate();
    int c = cfg.feature_width;
    for (size_t s = 0; s < cfg.stages.size(); ++s)
        for (int b = 0; b < cfg.stages[s].first; ++b) {
            std::string pre = "ref.s" + std::to_string(s) + ".b" + std::to_string(b);
            for (const char* lin : {".wq", ".wk", ".wv", ".wo"}) {
                std::string name = pre + lin;
                nn::init_linear(store, name, c, c, rng);
            }
            store.add(pre + ".ln1_g", Shape{c}, std::vector<float>(static_cast<size_t>(c), 1.f));
            store.add(pre + ".ln1_b", Shape{c}, std::vector<float>(static_cast<size_t>(c), 0.f));
            nn::init_linear(store, pre + ".ffn1", c, cfg.ffn_hidden, rng);
            nn::init_linear(store, pre + ".ffn2", cfg.ffn_hidden, c, rng);
            store.add(pre + ".ln2_g", Shape{c}, std::vector<float>(static_cast<size_t>(c), 1.f));
            store.add(pre + ".ln2_b", Shape{c}, std::vector<float>(static_cast<size_t>(c), 0.f));
        }
    nn::init_linear(store, "ref.head_p", c, c, rng);
    nn::init_linear(store, "ref.head_a", c, c, rng);
    // Delta heads start at zero so refinement begins as the identity.
    nn::init_mlp(store, "ref.delta_p", c, cfg.head_hidden, 10, rng, /*zero_output=*/true);
    nn::init_mlp(store, "ref.delta_a", c, cfg.head_hidden, 1 + kShInputDim, rng, /*zero_output=*/true);
}

inline ParamStore init_model_params(const EncoderConfig& enc, const RefinerConfig& ref,
                                    uint64_t seed) {
    ParamStore store;
    Rng enc_rng(seed, 101), ref_rng(seed, 102);
    init_encoder_params(store, enc, enc_rng);
    init_refiner_params(store, ref, ref_rng);
    return store;
}

/// Multi-head scaled dot-product attention restricted to each row's k
/// neighbors (no residual/norm; see attention_block).
template <class T>
TensorT<T> local_attention(Binder<T>& p, const std::string& prefix, TensorT<T> x,
                           const std::vector<int>& nbr, const std::vector<int>& owner, int heads) {
    using namespace ops;
    int n = x.shape().dims[0], c = x.shape().dims[1];
    int k = static_cast<int>(nbr.size()) / n;
    int dh = c / heads;
    TensorT<T> q = nn::apply_linear<T>(p, prefix + ".wq", x);
    TensorT<T> key = nn::apply_linear<T>(p, prefix + ".wk", x);
    TensorT<T> v = nn::apply_linear<T>(p, prefix + ".wv", x);
    TensorT<T> qg = gather_rows(q, owner);
    TensorT<T> kg = gather_rows(key, nbr);
    TensorT<T> vg = gather_rows(v, nbr);
    TensorT<T> qk = mul(qg, kg);
    TensorT<T> scores = sum_axis(reshape(qk, Shape{n * k, heads, dh}), 2);
    scores = mul_scalar(scores, T(1.0 / std::sqrt(static_cast<double>(dh))));
    TensorT<T> attn = softmax(reshape(scores, Shape{n, k, heads}), 1);
    TensorT<T> attn_c = repeat_cols(reshape(attn, Shape{n * k, heads}), dh);
    TensorT<T> ctx = scatter_add_rows(mul(attn_c, vg), owner, n);
    return nn::apply_linear<T>(p, prefix + ".wo", ctx);
}

/// Post-norm transformer block: attention and feed-forward sub-layers, each
/// wrapped in residual + layer_norm.
template <class T>
TensorT<T> attention_block(Binder<T>& p, const std::string& prefix, TensorT<T> x,
                           const LevelPlan& plan, int heads) {
    using namespace ops;
    TensorT<T> attn = local_attention<T>(p, prefix, x, plan.nbr, plan.owner, heads);
    x = layer_norm(add(x, attn), p(prefix + ".ln1_g"), p(prefix + ".ln1_b"));
    TensorT<T> h = relu(nn::apply_linear<T>(p, prefix + ".ffn1", x));
    TensorT<T> ff = nn::apply_linear<T>(p, prefix + ".ffn2", h);
    return layer_norm(add(x, ff), p(prefix + ".ln2_g"), p(prefix + ".ln2_b"));
}

/// Hierarchical trunk: attention blocks per stage with grid-pool downsampling
/// between stages and nearest-cell unpooling plus skip connections on the way
/// back up. Two linear heads split the trunk into geometry/appearance
/// feature updates.
template <class T>
std::pair<TensorT<T>, TensorT<T>> refiner_forward(Binder<T>& p, const RefinerConfig& cfg,
                                                  const std::vector<LevelPlan>& plans,
                                                  TensorT<T> features) {
    using namespace ops;
    Tape<T>& tape = *features.tape;
    TensorT<T> f = features;
    std::vector<TensorT<T>> skips;
    for (size_t s = 0; s < plans.size(); ++s) {
        for (int b = 0; b < cfg.stages[s].first; ++b)
            f = attention_block<T>(p, "ref.s" + std::to_string(s) + ".b" + std::to_string(b), f,
                                   plans[s], cfg.heads);
        if (s + 1 < plans.size()) {
            skips.push_back(f);
            const PoolMap& pm = plans[s].pool;
            TensorT<T> pooled = scatter_add_rows(f, pm.cell_of_point, pm.n_cells);
            std::vector<T> inv(static_cast<size_t>(pm.n_cells));
            for (int cidx = 0; cidx < pm.n_cells; ++cidx)
                inv[static_cast<size_t>(cidx)] = T(1) / T(pm.counts[static_cast<size_t>(cidx)]);
            f = scale_rows(pooled, tape.constant(Shape{pm.n_cells}, std::move(inv)));
        }
    }
    for (size_t s = plans.size() - 1; s-- > 0;)
        f = add(skips[s], gather_rows(f, plans[s].pool.cell_of_point));
    return {nn::apply_linear<T>(p, "ref.head_p", f), nn::apply_linear<T>(p, "ref.head_a", f)};
}

inline double scene_extent(const GaussianCloud& cloud) {
    if (cloud.size() == 0) return 1.0;
    Vec3<float> lo = cloud.gaussians[0].position, hi = lo;
    for (const auto& g : cloud.gaussians) {
        lo = {std::min(lo.x, g.position.x), std::min(lo.y, g.position.y), std::min(lo.z, g.position.z)};
        hi = {std::max(hi.x, g.position.x), std::max(hi.y, g.position.y), std::max(hi.z, g.position.z)};
    }
    Vec3<double> d{double(hi.x) - lo.x, double(hi.y) - lo.y, double(hi.z) - lo.z};
    return std::max(d.norm(), 1e-6);
}

template <class T>
struct RefinedParams {
    TensorT<T> pos, rot, log_scale, opacity, sh;
};

/// Adds per-group-scaled deltas (dp: N x 10 for mu|q|log_scale, da: N x 49
/// for opacity|sh) onto the original raw parameters. Quaternions stay in the
/// raw (unnormalized) space; normalization happens at point of use, so a zero
/// delta reproduces the input bit-for-bit.
template <class T>
RefinedParams<T> apply_deltas(Tape<T>& tape, const RefinerConfig& cfg, const GaussianCloud& subset,
                              TensorT<T> dp, TensorT<T> da, double extent) {
    using namespace ops;
    int n = static_cast<int>(subset.size());
    int k3 = 3 * sh_coeff_count(subset.sh_degree);
    std::vector<T> pos0(static_cast<size_t>(n) * 3), rot0(static_cast<size_t>(n) * 4);
    std::vector<T> ls0(static_cast<size_t>(n) * 3), op0(static_cast<size_t>(n));
    std::vector<T> sh0(static_cast<size_t>(n) * k3);
    for (int i = 0; i < n; ++i) {
        const Gaussian& g = subset.gaussians[static_cast<size_t>(i)];
        pos0[static_cast<size_t>(i) * 3] = T(g.position.x);
        pos0[static_cast<size_t>(i) * 3 + 1] = T(g.position.y);
        pos0[static_cast<size_t>(i) * 3 + 2] = T(g.position.z);
        for (int j = 0; j < 4; ++j) rot0[static_cast<size_t>(i) * 4 + j] = T(g.rotation_raw[static_cast<size_t>(j)]);
        ls0[static_cast<size_t>(i) * 3] = T(g.log_scale.x);
        ls0[static_cast<size_t>(i) * 3 + 1] = T(g.log_scale.y);
        ls0[static_cast<size_t>(i) * 3 + 2] = T(g.log_scale.z);
        op0[static_cast<size_t>(i)] = T(g.opacity_logit);
        for (int j = 0; j < k3; ++j)
            sh0[static_cast<size_t>(i) * k3 + j] = T(g.sh_coeffs[static_cast<size_t>(j)]);
    }
    const ResidualScales& rs = cfg.residual_scales;
    RefinedParams<T> out;
    out.pos = add(tape.constant(Shape{n, 3}, std::move(pos0)),
                  mul_scalar(slice(dp, 1, 0, 3), T(rs.mu * extent)));
    out.rot = add(tape.constant(Shape{n, 4}, std::move(rot0)),
                  mul_scalar(slice(dp, 1, 3, 4), T(rs.rotation)));
    out.log_scale = add(tape.constant(Shape{n, 3}, std::move(ls0)),
                        mul_scalar(slice(dp, 1, 7, 3), T(rs.log_scale)));
    out.opacity = add(tape.constant(Shape{n, 1}, std::move(op0)),
                      mul_scalar(slice(da, 1, 0, 1), T(rs.opacity)));
    out.sh = add(tape.constant(Shape{n, k3}, std::move(sh0)),
                 mul_scalar(slice(da, 1, 1, k3), T(rs.sh)));
    return out;
}

/// The delta heads map feature updates to per-parameter residuals, then the
/// residuals are applied onto the original raw parameters.
template <class T>
RefinedParams<T> residual_update(Tape<T>& tape, Binder<T>& p, const RefinerConfig& cfg,
                                 const GaussianCloud& subset, TensorT<T> fp_upd, TensorT<T> fa_upd,
                                 double extent) {
    TensorT<T> dp = nn::apply_mlp<T>(p, "ref.delta_p", fp_upd);  // (N, 10)
    TensorT<T> da = nn::apply_mlp<T>(p, "ref.delta_a", fa_upd);  // (N, 49)
    return apply_deltas<T>(tape, cfg, subset, dp, da, extent);
}

template <class T>
GaussianCloud refined_to_cloud(const RefinedParams<T>& rp, int sh_degree) {
    SplatParams<T> sp;
    sp.sh_degree = sh_degree;
    sp.count = static_cast<size_t>(rp.pos.shape().dims[0]);
    sp.pos.assign(rp.pos.val().begin(), rp.pos.val().end());
    sp.rot.assign(rp.rot.val().begin(), rp.rot.val().end());
    sp.log_scale.assign(rp.log_scale.val().begin(), rp.log_scale.val().end());
    sp.opacity_logit.assign(rp.opacity.val().begin(), rp.opacity.val().end());
    sp.sh.assign(rp.sh.val().begin(), rp.sh.val().end());
    return sp.to_cloud();
}

/// Standalone residual application on precomputed feature updates.
inline GaussianCloud apply_residual(const GaussianCloud& subset, std::span<const float> fp_upd,
                                    std::span<const float> fa_upd, const RefinerConfig& cfg,
                                    const ParamStore& params) {
    Tape<float> tape;
    Binder<float> p{&tape, &params};
    int n = static_cast<int>(subset.size());
    auto fp = tape.constant(Shape{n, cfg.feature_width}, std::vector<float>(fp_upd.begin(), fp_upd.end()));
    auto fa = tape.constant(Shape{n, cfg.feature_width}, std::vector<float>(fa_upd.begin(), fa_upd.end()));
    auto refined = residual_update<float>(tape, p, cfg, subset, fp, fa, scene_extent(subset));
    return refined_to_cloud(refined, subset.sh_degree);
}

/// Differentiable rasterization node: forward renders, backward is the
/// analytic rasterizer gradient.
template <class T>
TensorT<T> render_node(Tape<T>& tape, const RefinedParams<T>& rp, int sh_degree,
                       const Camera& cam) {
    int n = rp.pos.shape().dims[0];
    int k3 = 3 * sh_coeff_count(sh_degree);
    auto pack = [n, k3, sh_degree](const std::vector<std::span<const T>>& in) {
        SplatParams<T> sp;
        sp.sh_degree = sh_degree;
        sp.count = static_cast<size_t>(n);
        sp.pos.assign(in[0].begin(), in[0].end());
        sp.rot.assign(in[1].begin(), in[1].end());
        sp.log_scale.assign(in[2].begin(), in[2].end());
        sp.opacity_logit.assign(in[3].begin(), in[3].end());
        sp.sh.assign(in[4].begin(), in[4].end());
        return sp;
    };
    return ops::custom_node<T>(
        tape, {rp.pos, rp.rot, rp.log_scale, rp.opacity, rp.sh},
        Shape{cam.height, cam.width, 3},
        [pack, cam](const std::vector<std::span<const T>>& in) {
            return rasterize<T>(pack(in), cam).rgb;
        },
        [pack, cam](std::span<const T> up, const std::vector<std::span<const T>>& in,
                    const std::vector<std::vector<T>*>& gr) {
            SplatGrads<T> g = rasterize_backward<T>(pack(in), cam, up);
            auto accum = [](std::vector<T>* dst, const std::vector<T>& src) {
                if (!dst) return;
                for (size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
            };
            accum(gr[0], g.pos);
            accum(gr[1], g.rot);
            accum(gr[2], g.log_scale);
            accum(gr[3], g.opacity_logit);
            accum(gr[4], g.sh);
        });
}

/// Valid-region correlation with the fixed 11x11 SSIM window. Linear, so the
/// backward is correlation with the flipped kernel.
template <class T>
TensorT<T> ssim_blur(TensorT<T> x) {
    Tape<T>& tape = *x.tape;
    int h = x.shape().dims[0], w = x.shape().dims[1];
    int vh = h - kSsimWindow + 1, vw = w - kSsimWindow + 1;
    if (vh < 1 || vw < 1) throw std::invalid_argument("ssim_blur: image smaller than window");
    static const std::vector<double> kernel = detail::ssim_kernel();
    return ops::custom_node<T>(
        tape, {x}, Shape{vh, vw},
        [h, w, vh, vw](const std::vector<std::span<const T>>& in) {
            std::vector<T> out(static_cast<size_t>(vh) * vw, T(0));
            for (int y = 0; y < vh; ++y)
                for (int xx = 0; xx < vw; ++xx) {
                    T acc = 0;
                    for (int ky = 0; ky < kSsimWindow; ++ky)
                        for (int kx = 0; kx < kSsimWindow; ++kx)
                            acc += T(kernel[static_cast<size_t>(ky) * kSsimWindow + kx]) *
                                   in[0][static_cast<size_t>(y + ky) * w + (xx + kx)];
                    out[static_cast<size_t>(y) * vw + xx] = acc;
                }
            return out;
        },
        [h, w, vh, vw](std::span<const T> up, const std::vector<std::span<const T>>&,
                       const std::vector<std::vector<T>*>& gr) {
            if (!gr[0]) return;
            auto& gx = *gr[0];
            for (int y = 0; y < vh; ++y)
                for (int xx = 0; xx < vw; ++xx) {
                    T u = up[static_cast<size_t>(y) * vw + xx];
                    if (u == T(0)) continue;
                    for (int ky = 0; ky < kSsimWindow; ++ky)
                        for (int kx = 0; kx < kSsimWindow; ++kx)
                            gx[static_cast<size_t>(y + ky) * w + (xx + kx)] +=
                                u * T(kernel[static_cast<size_t>(ky) * kSsimWindow + kx]);
                }
        });
}

/// Differentiable SSIM on grayscale (H, W) tensors; same constants and valid
/// windowing as metrics::ssim.
template <class T>
TensorT<T> ssim_graph(TensorT<T> x, TensorT<T> y) {
    using namespace ops;
    TensorT<T> mx = ssim_blur(x), my = ssim_blur(y);
    TensorT<T> mxx = mul(mx, mx), myy = mul(my, my), mxy = mul(mx, my);
    TensorT<T> vx = sub(ssim_blur(mul(x, x)), mxx);
    TensorT<T> vy = sub(ssim_blur(mul(y, y)), myy);
    TensorT<T> vxy = sub(ssim_blur(mul(x, y)), mxy);
    TensorT<T> num = mul(add_scalar(mul_scalar(mxy, T(2)), T(kSsimC1)),
                         add_scalar(mul_scalar(vxy, T(2)), T(kSsimC2)));
    TensorT<T> den = mul(add_scalar(add(mxx, myy), T(kSsimC1)),
                         add_scalar(add(vx, vy), T(kSsimC2)));
    return mean(div(num, den));
}

template <class T>
TensorT<T> to_gray_graph(TensorT<T> img) {
    using namespace ops;
    int h = img.shape().dims[0], w = img.shape().dims[1];
    TensorT<T> flat = reshape(img, Shape{h * w, 3});
    return reshape(mul_scalar(sum_axis(flat, 1), T(1.0 / 3.0)), Shape{h, w});
}

template <class T>
struct LossTerms {
    TensorT<T> l1, perceptual, total;
};

/// L1 + weight * (1 - SSIM) between a rendered (H, W, 3) tensor and a target
/// image.
template <class T>
LossTerms<T> loss_graph(Tape<T>& tape, TensorT<T> render, const Image& target, double weight) {
    using namespace ops;
    if (render.shape().dims[0] != target.height || render.shape().dims[1] != target.width)
        throw std::invalid_argument("loss_graph: render/target shape mismatch");
    std::vector<T> tv(target.data.begin(), target.data.end());
    TensorT<T> tgt = tape.constant(render.shape(), std::move(tv));
    LossTerms<T> lt;
    lt.l1 = mean(abs(sub(render, tgt)));
    TensorT<T> s = ssim_graph(to_gray_graph(render), to_gray_graph(tgt));
    lt.perceptual = add_scalar(mul_scalar(s, T(-1)), T(1));
    lt.total = add(lt.l1, mul_scalar(lt.perceptual, T(weight)));
    return lt;
}

struct LossBreakdown {
    double l1 = 0.0, perceptual = 0.0, total = 0.0;
};

/// Evaluation-path loss on concrete images: mean absolute error plus the
/// weighted structural-dissimilarity term.
inline LossBreakdown compute_loss(const Image& render, const Image& target, double weight) {
    detail::require_same_shape(render, target, "loss");
    double acc = 0.0;
    for (size_t i = 0; i < render.data.size(); ++i)
        acc += std::abs(static_cast<double>(render.data[i]) - static_cast<double>(target.data[i]));
    LossBreakdown lb;
    lb.l1 = acc / static_cast<double>(render.data.size());
    lb.perceptual = 1.0 - ssim(render, target);
    lb.total = lb.l1 + weight * lb.perceptual;
    return lb;
}

inline LossBreakdown compute_loss(const RenderOutput& render, const Image& target, double weight) {
    return compute_loss(render.rgb, target, weight);
}

struct TrainingDiverged : std::runtime_error {
    int iteration;
    explicit TrainingDiverged(int iter)
        : std::runtime_error("training diverged (non-finite loss) at iteration " +
                             std::to_string(iter)),
          iteration(iter) {}
};

struct AdamState {
    std::vector<std::vector<float>> m, v;
    long long t = 0;
};

inline void adam_step(ParamStore& store, const std::vector<std::vector<float>>& grads,
                      AdamState& state, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    if (state.m.empty()) {
        state.m.resize(store.entries.size());
        state.v.resize(store.entries.size());
        for (size_t i = 0; i < store.entries.size(); ++i) {
            state.m[i].assign(store.entries[i].data.size(), 0.f);
            state.v[i].assign(store.entries[i].data.size(), 0.f);
        }
    }
    ++state.t;
    double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (size_t i = 0; i < store.entries.size(); ++i) {
        auto& data = store.entries[i].data;
        for (size_t j = 0; j < data.size(); ++j) {
            double g = grads[i][j];
            double m = b1 * state.m[i][j] + (1.0 - b1) * g;
            double v = b2 * state.v[i][j] + (1.0 - b2) * g * g;
            state.m[i][j] = static_cast<float>(m);
            state.v[i][j] = static_cast<float>(v);
            data[j] -= static_cast<float>(lr * (m / c1) / (std::sqrt(v / c2) + eps));
        }
    }
}

struct SceneData {
    GaussianCloud dense;
    std::vector<TaggedCamera> cameras;
    std::vector<Image> targets;  // one per camera
};

struct TrainLogEntry {
    int iter = 0;
    double lr = 0, l1 = 0, perceptual = 0, total = 0;
};

struct TrainResult {
    ParamStore params;
    std::vector<TrainLogEntry> log;
    std::vector<GaussianCloud> pruned;  // per scene, after prune_cfg
};

namespace detail {

struct PreparedScene {
    GaussianCloud pruned;
    std::vector<LevelPlan> plans;
    double extent = 1.0;
    std::vector<int> train_views;
};

}  // namespace detail

/// Joint training over scenes: each iteration samples one scene and
/// views_per_step random train views, runs encode -> refine -> residual ->
/// rasterize, and takes one Adam step on L1 + weighted (1 - SSIM).
/// Deterministic under the config seed.
inline TrainResult train(const std::vector<SceneData>& scenes, const PruneConfig& prune_cfg,
                         const EncoderConfig& enc_cfg, const RefinerConfig& ref_cfg,
                         const TrainConfig& train_cfg, std::ostream* log_stream = nullptr) {
    train_cfg.validate();
    if (scenes.empty()) throw std::invalid_argument("train: no scenes");
    if (enc_cfg.feature_width != ref_cfg.feature_width)
        throw std::invalid_argument("train: encoder/refiner feature widths differ");

    std::vector<detail::PreparedScene> prep;
    for (const auto& sd : scenes) {
        detail::PreparedScene ps;
        ps.pruned = prune(sd.dense, prune_cfg).first;
        std::vector<Vec3<double>> pos;
        for (const auto& g : ps.pruned.gaussians)
            pos.push_back({g.position.x, g.position.y, g.position.z});
        ps.plans = build_refiner_plan(pos, ref_cfg);
        ps.extent = scene_extent(ps.pruned);
        for (size_t v = 0; v < sd.cameras.size(); ++v)
            if (!sd.cameras[v].is_test) ps.train_views.push_back(static_cast<int>(v));
        if (ps.train_views.empty()) throw std::invalid_argument("train: a scene has no train views");
        prep.push_back(std::move(ps));
    }

    TrainResult result;
    result.params = init_model_params(enc_cfg, ref_cfg, train_cfg.seed);
    for (auto& ps : prep) result.pruned.push_back(ps.pruned);

    AdamState adam;
    Rng sampler(train_cfg.seed, 7);
    for (int iter = 0; iter < train_cfg.iterations; ++iter) {
        size_t si = static_cast<size_t>(sampler.below(scenes.size()));
        const auto& sd = scenes[si];
        auto& ps = prep[si];
        std::vector<int> pool = ps.train_views;
        int nv = std::min<int>(train_cfg.views_per_step, static_cast<int>(pool.size()));
        std::vector<int> views;
        for (int j = 0; j < nv; ++j) {
            size_t pick = static_cast<size_t>(sampler.below(pool.size()));
            views.push_back(pool[pick]);
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        }

        Tape<float> tape;
        Binder<float> bind{&tape, &result.params};
        auto enc_in = make_encoder_inputs<float>(tape, ps.pruned);
        auto features = encoder_forward<float>(bind, enc_cfg, enc_in);
        auto [fp_upd, fa_upd] = refiner_forward<float>(bind, ref_cfg, ps.plans, features);
        auto refined = residual_update<float>(tape, bind, ref_cfg, ps.pruned, fp_upd, fa_upd, ps.extent);

        TensorT<float> total;
        double l1_log = 0, perc_log = 0;
        for (int v : views) {
            auto img = render_node<float>(tape, refined, ps.pruned.sh_degree,
                                          sd.cameras[static_cast<size_t>(v)].camera);
            auto lt = loss_graph<float>(tape, img, sd.targets[static_cast<size_t>(v)],
                                        train_cfg.perceptual_weight);
            l1_log += lt.l1.val()[0];
            perc_log += lt.perceptual.val()[0];
            total = total.defined() ? ops::add(total, lt.total) : lt.total;
        }
        total = ops::mul_scalar(total, 1.f / static_cast<float>(views.size()));
        double loss_val = total.val()[0];
        if (!std::isfinite(loss_val)) throw TrainingDiverged(iter);

        tape.backward(total);
        double lr = lr_at(train_cfg, iter);
        adam_step(result.params, bind.read_grads(), adam, lr);

        TrainLogEntry e{iter, lr, l1_log / views.size(), perc_log / views.size(), loss_val};
        result.log.push_back(e);
        if (log_stream)
            (*log_stream) << "iter=" << e.iter << " lr=" << e.lr << " l1=" << e.l1
                          << " perc=" << e.perceptual << " total=" << e.total << '\n';
    }
    return result;
}

/// Inference: encode, refine and apply residuals to a pruned cloud.
inline GaussianCloud refine_cloud(const GaussianCloud& pruned, const EncoderConfig& enc_cfg,
                                  const RefinerConfig& ref_cfg, const ParamStore& params) {
    if (pruned.size() == 0) return pruned;
    Tape<float> tape;
    Binder<float> bind{&tape, &params};
    std::vector<Vec3<double>> pos;
    for (const auto& g : pruned.gaussians) pos.push_back({g.position.x, g.position.y, g.position.z});
    auto plans = build_refiner_plan(pos, ref_cfg);
    auto enc_in = make_encoder_inputs<float>(tape, pruned);
    auto features = encoder_forward<float>(bind, enc_cfg, enc_in);
    auto [fp_upd, fa_upd] = refiner_forward<float>(bind, ref_cfg, plans, features);
    auto refined = residual_update<float>(tape, bind, ref_cfg, pruned, fp_upd, fa_upd,
                                          scene_extent(pruned));
    return refined_to_cloud(refined, pruned.sh_degree);
}

// Model configuration <-> checkpoint config block.
inline KeyValues model_config_to_kv(const EncoderConfig& enc, const RefinerConfig& ref) {
    KeyValues kv;
    kv.set("version", "1");
    kv.set("feature_width", std::to_string(enc.feature_width));
    kv.set("sh_reduced_dim", std::to_string(enc.sh_reduced_dim));
    kv.set("mlp_hidden", std::to_string(enc.mlp_hidden));
    kv.set("use_appearance_gate", enc.use_appearance_gate ? "1" : "0");
    kv.set("use_positional_encoding", enc.use_positional_encoding ? "1" : "0");
    kv.set("gate_axis", enc.gate_axis == GateAxis::channels ? "channels" : "gaussians");
    std::ostringstream st;
    for (size_t i = 0; i < ref.stages.size(); ++i)
        st << (i ? "," : "") << ref.stages[i].first << 'x' << ref.stages[i].second;
    kv.set("stages", st.str());
    kv.set("knn_k", std::to_string(ref.knn_k));
    kv.set("heads", std::to_string(ref.heads));
    kv.set("ffn_hidden", std::to_string(ref.ffn_hidden));
    kv.set("head_hidden", std::to_string(ref.head_hidden));
    kv.set("scale_mu", std::to_string(ref.residual_scales.mu));
    kv.set("scale_rotation", std::to_string(ref.residual_scales.rotation));
    kv.set("scale_log_scale", std::to_string(ref.residual_scales.log_scale));
    kv.set("scale_opacity", std::to_string(ref.residual_scales.opacity));
    kv.set("scale_sh", std::to_string(ref.residual_scales.sh));
    return kv;
}

inline std::vector<std::pair<int, int>> parse_stages(const std::string& s) {
    std::vector<std::pair<int, int>> stages;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        size_t x = item.find('x');
        if (x == std::string::npos) throw ConfigError("bad stages spec '" + s + "'");
        stages.push_back({std::stoi(item.substr(0, x)), std::stoi(item.substr(x + 1))});
    }
    if (stages.empty()) throw ConfigError("bad stages spec '" + s + "'");
    return stages;
}

inline void model_config_from_kv(const KeyValues& kv, EncoderConfig& enc, RefinerConfig& ref) {
    enc.feature_width = static_cast<int>(kv.get_int("feature_width", enc.feature_width));
    enc.sh_reduced_dim = static_cast<int>(kv.get_int("sh_reduced_dim", enc.sh_reduced_dim));
    enc.mlp_hidden = static_cast<int>(kv.get_int("mlp_hidden", enc.mlp_hidden));
    enc.use_appearance_gate = kv.get_bool("use_appearance_gate", enc.use_appearance_gate);
    enc.use_positional_encoding = kv.get_bool("use_positional_encoding", enc.use_positional_encoding);
    enc.gate_axis = kv.get_string("gate_axis", "channels") == "gaussians" ? GateAxis::gaussians
                                                                          : GateAxis::channels;
    if (kv.has("stages")) ref.stages = parse_stages(kv.get_string("stages", ""));
    ref.knn_k = static_cast<int>(kv.get_int("knn_k", ref.knn_k));
    ref.heads = static_cast<int>(kv.get_int("heads", ref.heads));
    ref.feature_width = enc.feature_width;
    ref.ffn_hidden = static_cast<int>(kv.get_int("ffn_hidden", ref.ffn_hidden));
    ref.head_hidden = static_cast<int>(kv.get_int("head_hidden", ref.head_hidden));
    ref.residual_scales.mu = kv.get_double("scale_mu", ref.residual_scales.mu);
    ref.residual_scales.rotation = kv.get_double("scale_rotation", ref.residual_scales.rotation);
    ref.residual_scales.log_scale = kv.get_double("scale_log_scale", ref.residual_scales.log_scale);
    ref.residual_scales.opacity = kv.get_double("scale_opacity", ref.residual_scales.opacity);
    ref.residual_scales.sh = kv.get_double("scale_sh", ref.residual_scales.sh);
}

}  // namespace pointsplat
