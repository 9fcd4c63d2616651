#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pointsplat/checkpoint.hpp"
#include "pointsplat/gaussian.hpp"
#include "pointsplat/rng.hpp"
#include "pointsplat/tensor.hpp"

namespace pointsplat {

inline constexpr int kShInputDim = 48;      // degree-3 coefficient count
inline constexpr int kGeometryInputDim = 10;  // mu | q | s

enum class GateAxis { channels, gaussians };

struct EncoderConfig {
    int feature_width = 64;   // C
    int sh_reduced_dim = 16;  // d_a
    int mlp_hidden = 64;
    // Ablation switches: the full model uses both; geometry-only variants
    // drop the softmax gate and/or the positional encoding.
    bool use_appearance_gate = true;
    bool use_positional_encoding = true;
    GateAxis gate_axis = GateAxis::channels;
};

/// Geometry branch input [mu, q/|q|, exp(log_scale)] and appearance branch
/// input [sigmoid(opacity), sh coefficients zero-padded to 48].
inline std::pair<std::array<float, 10>, std::array<float, 49>> branch_features(const Gaussian& g) {
    std::array<float, 10> fp{};
    fp[0] = g.position.x;
    fp[1] = g.position.y;
    fp[2] = g.position.z;
    Quat<double> q = g.rotation();
    double n = q.norm();
    if (!(n > 0.0)) throw std::invalid_argument("branch_features: zero-norm quaternion");
    fp[3] = static_cast<float>(q.w / n);
    fp[4] = static_cast<float>(q.x / n);
    fp[5] = static_cast<float>(q.y / n);
    fp[6] = static_cast<float>(q.z / n);
    Vec3<double> s = g.scale();
    fp[7] = static_cast<float>(s.x);
    fp[8] = static_cast<float>(s.y);
    fp[9] = static_cast<float>(s.z);

    std::array<float, 49> fa{};
    fa[0] = static_cast<float>(g.opacity());
    size_t count = std::min<size_t>(g.sh_coeffs.size(), kShInputDim);
    for (size_t i = 0; i < count; ++i) fa[1 + i] = g.sh_coeffs[i];
    return {fp, fa};
}

namespace nn {

/// Parameter layout of a 2-layer MLP: linear -> layer_norm -> relu -> linear.
/// Weights start uniform in +-sqrt(1/fan_in); biases at zero; norm affine at
/// identity. zero_output forces the last linear to zero so the module starts
/// as the constant-zero map.
inline void init_mlp(ParamStore& store, const std::string& prefix, int in, int hidden, int out,
                     Rng& rng, bool zero_output = false) {
    auto uniform_init = [&](int fan_in, size_t n) {
        double bound = std::sqrt(1.0 / fan_in);
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
        return v;
    };
    store.add(prefix + ".w1", Shape{in, hidden}, uniform_init(in, static_cast<size_t>(in) * hidden));
    store.add(prefix + ".b1", Shape{hidden}, std::vector<float>(hidden, 0.f));
    store.add(prefix + ".ln_g", Shape{hidden}, std::vector<float>(hidden, 1.f));
    store.add(prefix + ".ln_b", Shape{hidden}, std::vector<float>(hidden, 0.f));
    store.add(prefix + ".w2", Shape{hidden, out},
              zero_output ? std::vector<float>(static_cast<size_t>(hidden) * out, 0.f)
                          : uniform_init(hidden, static_cast<size_t>(hidden) * out));
    store.add(prefix + ".b2", Shape{out}, std::vector<float>(out, 0.f));
}

template <class T>
TensorT<T> apply_mlp(Binder<T>& p, const std::string& prefix, TensorT<T> x) {
    using namespace ops;
    auto h = add_bias(matmul(x, p(prefix + ".w1")), p(prefix + ".b1"));
    h = layer_norm(h, p(prefix + ".ln_g"), p(prefix + ".ln_b"));
    h = relu(h);
    return add_bias(matmul(h, p(prefix + ".w2")), p(prefix + ".b2"));
}

inline void init_linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng,
                        bool zero = false) {
    std::vector<float> w(static_cast<size_t>(in) * out, 0.f);
    if (!zero) {
        double bound = std::sqrt(1.0 / in);
        for (auto& x : w) x = static_cast<float>(rng.uniform(-bound, bound));
    }
    store.add(prefix + ".w", Shape{in, out}, std::move(w));
    store.add(prefix + ".b", Shape{out}, std::vector<float>(out, 0.f));
}

template <class T>
TensorT<T> apply_linear(Binder<T>& p, const std::string& prefix, TensorT<T> x) {
    return ops::add_bias(ops::matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

}  // namespace nn

/// Per-Gaussian constant inputs of the encoder graph.
template <class T>
struct EncoderInputs {
    TensorT<T> f_p;    // (N, 10)
    TensorT<T> alpha;  // (N, 1)
    TensorT<T> gamma;  // (N, 48)
    TensorT<T> mu;     // (N, 3)
    int count = 0;
};

template <class T>
EncoderInputs<T> make_encoder_inputs(Tape<T>& tape, const GaussianCloud& cloud) {
    int n = static_cast<int>(cloud.size());
    std::vector<T> fp(static_cast<size_t>(n) * 10), al(static_cast<size_t>(n));
    std::vector<T> ga(static_cast<size_t>(n) * kShInputDim), mu(static_cast<size_t>(n) * 3);
    for (int i = 0; i < n; ++i) {
        auto [p, a] = branch_features(cloud.gaussians[static_cast<size_t>(i)]);
        for (int j = 0; j < 10; ++j) fp[static_cast<size_t>(i) * 10 + j] = T(p[static_cast<size_t>(j)]);
        al[static_cast<size_t>(i)] = T(a[0]);
        for (int j = 0; j < kShInputDim; ++j)
            ga[static_cast<size_t>(i) * kShInputDim + j] = T(a[static_cast<size_t>(j) + 1]);
        for (int j = 0; j < 3; ++j) mu[static_cast<size_t>(i) * 3 + j] = T(p[static_cast<size_t>(j)]);
    }
    EncoderInputs<T> in;
    in.count = n;
    in.f_p = tape.constant(Shape{n, 10}, std::move(fp));
    in.alpha = tape.constant(Shape{n, 1}, std::move(al));
    in.gamma = tape.constant(Shape{n, kShInputDim}, std::move(ga));
    in.mu = tape.constant(Shape{n, 3}, std::move(mu));
    return in;
}

inline void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    nn::init_mlp(store, "enc.phi", kShInputDim, cfg.mlp_hidden, cfg.sh_reduced_dim, rng);
    nn::init_mlp(store, "enc.phi_p", kGeometryInputDim, cfg.mlp_hidden, cfg.feature_width, rng);
    nn::init_mlp(store, "enc.phi_a", 1 + cfg.sh_reduced_dim, cfg.mlp_hidden, cfg.feature_width, rng);
    nn::init_mlp(store, "enc.psi", 3, cfg.mlp_hidden, cfg.feature_width, rng);
}

/// Fused per-Gaussian features: a softmax gate from the appearance branch
/// modulates the geometry branch, both shifted by the positional encoding.
template <class T>
TensorT<T> encoder_forward(Binder<T>& p, const EncoderConfig& cfg, const EncoderInputs<T>& in) {
    using namespace ops;
    TensorT<T> geo = nn::apply_mlp<T>(p, "enc.phi_p", in.f_p);
    TensorT<T> delta;
    if (cfg.use_positional_encoding) {
        delta = nn::apply_mlp<T>(p, "enc.psi", in.mu);
        geo = add(geo, delta);
    }
    if (!cfg.use_appearance_gate) return geo;
    TensorT<T> reduced = nn::apply_mlp<T>(p, "enc.phi", in.gamma);
    TensorT<T> fa = concat(in.alpha, reduced, 1);
    TensorT<T> app = nn::apply_mlp<T>(p, "enc.phi_a", fa);
    if (cfg.use_positional_encoding) app = add(app, delta);
    TensorT<T> gate = softmax(app, cfg.gate_axis == GateAxis::channels ? 1 : 0);
    return mul(gate, geo);
}

/// Fused features plus the retained branch inputs.
struct EncodedFeatures {
    int count = 0;
    int feature_width = 0;
    std::vector<float> fused;       // (N, C)
    std::vector<float> f_p;         // (N, 10)
    std::vector<float> f_a;         // (N, 1 + d_a); zeros when the gate is off
    std::vector<float> gate;        // (N, C); zeros when the gate is off
};

inline EncodedFeatures encode(const GaussianCloud& cloud, const EncoderConfig& cfg,
                              const ParamStore& params) {
    if (!params.has("enc.phi_p.w1")) throw std::invalid_argument("encode: uninitialized parameters");
    Tape<float> tape;
    Binder<float> p{&tape, &params};
    auto in = make_encoder_inputs<float>(tape, cloud);
    using namespace ops;

    EncodedFeatures out;
    out.count = in.count;
    out.feature_width = cfg.feature_width;
    TensorT<float> fused = encoder_forward<float>(p, cfg, in);
    out.fused.assign(fused.val().begin(), fused.val().end());
    out.f_p.assign(in.f_p.val().begin(), in.f_p.val().end());
    out.f_a.assign(static_cast<size_t>(in.count) * (1 + cfg.sh_reduced_dim), 0.f);
    out.gate.assign(static_cast<size_t>(in.count) * cfg.feature_width, 0.f);
    if (cfg.use_appearance_gate) {
        TensorT<float> reduced = nn::apply_mlp<float>(p, "enc.phi", in.gamma);
        TensorT<float> fa = concat(in.alpha, reduced, 1);
        out.f_a.assign(fa.val().begin(), fa.val().end());
        TensorT<float> app = nn::apply_mlp<float>(p, "enc.phi_a", fa);
        if (cfg.use_positional_encoding)
            app = add(app, nn::apply_mlp<float>(p, "enc.psi", in.mu));
        TensorT<float> gate = softmax(app, cfg.gate_axis == GateAxis::channels ? 1 : 0);
        out.gate.assign(gate.val().begin(), gate.val().end());
    }
    return out;
}

}  // namespace pointsplat
