#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "pointsplat/encoder.hpp"
#include "pointsplat/rng.hpp"
#include "pointsplat/synthscene.hpp"

using namespace pointsplat;

namespace {

GaussianCloud small_cloud(uint64_t seed, int n, int degree = 1) {
    SceneSpec spec;
    spec.seed = seed;
    spec.n_gaussians = n;
    spec.camera_count = 1;
    spec.sh_degree = degree;
    return generate(spec).cloud;
}

// Straight-line reimplementation of the MLP chain on plain double rows.
std::vector<double> ref_mlp_row(const ParamStore& ps, const std::string& prefix,
                                const std::vector<double>& x) {
    const auto& w1 = ps.at(prefix + ".w1");
    const auto& b1 = ps.at(prefix + ".b1");
    const auto& g = ps.at(prefix + ".ln_g");
    const auto& b = ps.at(prefix + ".ln_b");
    const auto& w2 = ps.at(prefix + ".w2");
    const auto& b2 = ps.at(prefix + ".b2");
    int in = w1.shape.dims[0], hidden = w1.shape.dims[1], out = w2.shape.dims[1];
    REQUIRE(static_cast<int>(x.size()) == in);
    std::vector<double> h(static_cast<size_t>(hidden), 0.0);
    for (int j = 0; j < hidden; ++j) {
        double acc = b1.data[size_t(j)];
        for (int i = 0; i < in; ++i) acc += x[size_t(i)] * w1.data[size_t(i) * hidden + size_t(j)];
        h[size_t(j)] = acc;
    }
    double mean = 0;
    for (double v : h) mean += v;
    mean /= hidden;
    double var = 0;
    for (double v : h) var += (v - mean) * (v - mean);
    var /= hidden;
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < hidden; ++j) {
        double xh = (h[size_t(j)] - mean) * inv;
        h[size_t(j)] = std::max(0.0, double(g.data[size_t(j)]) * xh + b.data[size_t(j)]);
    }
    std::vector<double> y(static_cast<size_t>(out), 0.0);
    for (int j = 0; j < out; ++j) {
        double acc = b2.data[size_t(j)];
        for (int i = 0; i < hidden; ++i) acc += h[size_t(i)] * w2.data[size_t(i) * out + size_t(j)];
        y[size_t(j)] = acc;
    }
    return y;
}

std::vector<double> ref_encode_row(const ParamStore& ps, const EncoderConfig& cfg,
                                   const Gaussian& g) {
    auto [fp, fa_in] = branch_features(g);
    std::vector<double> fp_d(fp.begin(), fp.end());
    std::vector<double> mu{fp[0], fp[1], fp[2]};
    std::vector<double> gamma(fa_in.begin() + 1, fa_in.end());

    auto geo = ref_mlp_row(ps, "enc.phi_p", fp_d);
    std::vector<double> delta(geo.size(), 0.0);
    if (cfg.use_positional_encoding) delta = ref_mlp_row(ps, "enc.psi", mu);
    for (size_t i = 0; i < geo.size(); ++i) geo[i] += delta[i];
    if (!cfg.use_appearance_gate) return geo;

    auto red = ref_mlp_row(ps, "enc.phi", gamma);
    std::vector<double> fa{double(fa_in[0])};
    fa.insert(fa.end(), red.begin(), red.end());
    auto app = ref_mlp_row(ps, "enc.phi_a", fa);
    for (size_t i = 0; i < app.size(); ++i) app[i] += delta[i];
    double mx = app[0];
    for (double v : app) mx = std::max(mx, v);
    double sum = 0;
    for (double& v : app) {
        v = std::exp(v - mx);
        sum += v;
    }
    std::vector<double> out(geo.size());
    for (size_t i = 0; i < geo.size(); ++i) out[i] = app[i] / sum * geo[i];
    return out;
}

}  // namespace

TEST_CASE("branch features examples") {
    Gaussian g;
    g.sh_degree = 3;
    g.position = {0, 0, 0};
    g.rotation_raw = {1, 0, 0, 0};
    g.log_scale = {0, 0, 0};
    g.opacity_logit = 0.f;
    g.sh_coeffs.assign(48, 0.f);
    auto [fp, fa] = branch_features(g);
    std::array<float, 10> want_fp{0, 0, 0, 1, 0, 0, 0, 1, 1, 1};
    REQUIRE(fp == want_fp);
    REQUIRE(fa[0] == 0.5f);  // sigmoid(0)
}

TEST_CASE("branch features concatenation order matches a field oracle") {
    Rng rng(61);
    for (int t = 0; t < 20; ++t) {
        Gaussian g;
        g.sh_degree = 2;
        g.position = {float(rng.uniform(-2, 2)), float(rng.uniform(-2, 2)), float(rng.uniform(-2, 2))};
        Quat<double> q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
        g.rotation_raw = {float(q.w), float(q.x), float(q.y), float(q.z)};
        g.log_scale = {float(rng.uniform(-2, 1)), float(rng.uniform(-2, 1)), float(rng.uniform(-2, 1))};
        g.opacity_logit = float(rng.uniform(-3, 3));
        g.sh_coeffs.resize(27);
        for (auto& c : g.sh_coeffs) c = float(rng.uniform(-1, 1));

        auto [fp, fa] = branch_features(g);
        REQUIRE(fp[0] == g.position.x);
        REQUIRE(fp[1] == g.position.y);
        REQUIRE(fp[2] == g.position.z);
        double n = g.rotation().norm();
        REQUIRE(fp[3] == Catch::Approx(g.rotation_raw[0] / n).margin(1e-6));
        REQUIRE(fp[6] == Catch::Approx(g.rotation_raw[3] / n).margin(1e-6));
        REQUIRE(fp[7] == Catch::Approx(std::exp(double(g.log_scale.x))).epsilon(1e-6));
        REQUIRE(fa[0] == Catch::Approx(g.opacity()).margin(1e-7));
        for (size_t i = 0; i < 27; ++i) REQUIRE(fa[1 + i] == g.sh_coeffs[i]);
        for (size_t i = 28; i < 49; ++i) REQUIRE(fa[i] == 0.f);  // zero padding beyond degree 2
    }
}

TEST_CASE("all-zero parameters give a uniform gate and zero features") {
    EncoderConfig cfg;
    ParamStore zeros;
    Rng rng(1);
    init_encoder_params(zeros, cfg, rng);
    for (auto& e : zeros.entries)
        for (auto& v : e.data) v = 0.f;

    auto cloud = small_cloud(5, 6);
    auto enc = encode(cloud, cfg, zeros);
    for (float v : enc.fused) REQUIRE(v == 0.f);
    for (float v : enc.gate) REQUIRE(v == Catch::Approx(1.0 / cfg.feature_width).margin(1e-7));
}

TEST_CASE("identical gaussians produce identical feature rows") {
    EncoderConfig cfg;
    ParamStore ps;
    Rng rng(2);
    init_encoder_params(ps, cfg, rng);

    auto cloud = small_cloud(6, 1);
    cloud.gaussians.push_back(cloud.gaussians[0]);  // duplicate
    auto enc = encode(cloud, cfg, ps);
    size_t c = static_cast<size_t>(cfg.feature_width);
    size_t last = cloud.size() - 1;
    for (size_t j = 0; j < c; ++j) REQUIRE(enc.fused[last * c + j] == enc.fused[j]);
}

TEST_CASE("encode matches the straight-line oracle") {
    for (bool gate : {true, false})
        for (bool pos : {true, false}) {
            EncoderConfig cfg;
            cfg.use_appearance_gate = gate;
            cfg.use_positional_encoding = pos;
            ParamStore ps;
            Rng rng(gate ? 3 : 4);
            init_encoder_params(ps, cfg, rng);

            auto cloud = small_cloud(7, 8, 3);
            // double-precision graph against the plain-double oracle
            Tape<double> tape;
            Binder<double> bind{&tape, &ps};
            auto in = make_encoder_inputs<double>(tape, cloud);
            auto feat = encoder_forward<double>(bind, cfg, in);
            for (size_t i = 0; i < cloud.size(); ++i) {
                auto want = ref_encode_row(ps, cfg, cloud.gaussians[i]);
                for (size_t j = 0; j < want.size(); ++j)
                    REQUIRE(feat.val()[i * want.size() + j] ==
                            Catch::Approx(want[j]).epsilon(1e-9).margin(1e-12));
            }
        }
}

TEST_CASE("encoder is permutation equivariant") {
    EncoderConfig cfg;
    ParamStore ps;
    Rng rng(5);
    init_encoder_params(ps, cfg, rng);
    auto cloud = small_cloud(8, 10);
    auto enc = encode(cloud, cfg, ps);

    std::vector<size_t> perm(cloud.size());
    std::iota(perm.begin(), perm.end(), size_t{0});
    Rng prng(6);
    for (size_t i = perm.size(); i-- > 1;) std::swap(perm[i], perm[prng.below(i + 1)]);
    GaussianCloud shuffled;
    shuffled.sh_degree = cloud.sh_degree;
    for (size_t i : perm) shuffled.gaussians.push_back(cloud.gaussians[i]);
    auto enc2 = encode(shuffled, cfg, ps);

    size_t c = static_cast<size_t>(cfg.feature_width);
    for (size_t i = 0; i < perm.size(); ++i)
        for (size_t j = 0; j < c; ++j)
            REQUIRE(enc2.fused[i * c + j] == enc.fused[perm[i] * c + j]);
}

TEST_CASE("gate rows sum to one") {
    EncoderConfig cfg;
    ParamStore ps;
    Rng rng(7);
    init_encoder_params(ps, cfg, rng);
    auto cloud = small_cloud(9, 12);
    auto enc = encode(cloud, cfg, ps);
    size_t c = static_cast<size_t>(cfg.feature_width);
    for (size_t i = 0; i < cloud.size(); ++i) {
        double sum = 0;
        for (size_t j = 0; j < c; ++j) sum += enc.gate[i * c + j];
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("huge appearance magnitudes stay bounded by the geometry branch") {
    EncoderConfig cfg;
    ParamStore ps;
    Rng rng(8);
    init_encoder_params(ps, cfg, rng);
    auto cloud = small_cloud(10, 8, 3);
    for (auto& g : cloud.gaussians)
        for (auto& coeff : g.sh_coeffs) coeff *= 1000.f;

    // |f|_inf <= |phi_p(f_p) + delta|_inf because gate entries are in (0,1)
    Tape<float> tape;
    Binder<float> bind{&tape, &ps};
    auto in = make_encoder_inputs<float>(tape, cloud);
    auto geo = nn::apply_mlp<float>(bind, "enc.phi_p", in.f_p);
    geo = ops::add(geo, nn::apply_mlp<float>(bind, "enc.psi", in.mu));
    auto fused = encoder_forward<float>(bind, cfg, in);
    size_t c = static_cast<size_t>(cfg.feature_width);
    for (size_t i = 0; i < cloud.size(); ++i) {
        float geo_inf = 0, f_inf = 0;
        for (size_t j = 0; j < c; ++j) {
            geo_inf = std::max(geo_inf, std::abs(geo.val()[i * c + j]));
            f_inf = std::max(f_inf, std::abs(fused.val()[i * c + j]));
        }
        REQUIRE(f_inf <= geo_inf * (1 + 1e-6f));
    }
}

TEST_CASE("encoder gradient matches finite differences on sampled parameters") {
    EncoderConfig cfg;
    cfg.feature_width = 16;
    cfg.mlp_hidden = 12;
    cfg.sh_reduced_dim = 6;
    ParamStore ps;
    Rng rng(9);
    init_encoder_params(ps, cfg, rng);
    auto cloud = small_cloud(11, 5, 1);

    auto loss_value = [&](const ParamStore& store) {
        Tape<double> tape;
        Binder<double> bind{&tape, &store};
        auto in = make_encoder_inputs<double>(tape, cloud);
        auto f = encoder_forward<double>(bind, cfg, in);
        // deterministic pseudo-random weighting
        std::vector<double> w(f.val().size());
        Rng wr(123);
        for (auto& v : w) v = wr.uniform(-1, 1);
        auto loss = ops::sum(ops::mul(f, tape.constant(f.shape(), w)));
        return loss.val()[0];
    };

    Tape<double> tape;
    Binder<double> bind{&tape, &ps};
    auto in = make_encoder_inputs<double>(tape, cloud);
    auto f = encoder_forward<double>(bind, cfg, in);
    std::vector<double> w(f.val().size());
    Rng wr(123);
    for (auto& v : w) v = wr.uniform(-1, 1);
    auto loss = ops::sum(ops::mul(f, tape.constant(f.shape(), w)));
    tape.backward(loss);
    auto grads = bind.read_grads();

    Rng pick(10);
    const double eps = 1e-5;
    for (int trial = 0; trial < 60; ++trial) {
        size_t ei = pick.below(ps.entries.size());
        size_t j = pick.below(ps.entries[ei].data.size());
        float orig = ps.entries[ei].data[j];
        float fhi = float(orig + eps), flo = float(orig - eps);
        ps.entries[ei].data[j] = fhi;
        double hi = loss_value(ps);
        ps.entries[ei].data[j] = flo;
        double lo = loss_value(ps);
        ps.entries[ei].data[j] = orig;
        double fd = (hi - lo) / (double(fhi) - double(flo));  // realized step
        REQUIRE(oracles::grad_close(grads[ei][j], fd, 1e-4, 1e-8));
    }
}

TEST_CASE("gaussian-axis gate normalizes across the cloud instead") {
    EncoderConfig cfg;
    cfg.gate_axis = GateAxis::gaussians;
    ParamStore ps;
    Rng rng(11);
    init_encoder_params(ps, cfg, rng);
    auto cloud = small_cloud(13, 9);
    auto enc = encode(cloud, cfg, ps);
    size_t c = static_cast<size_t>(cfg.feature_width);
    for (size_t j = 0; j < c; ++j) {
        double col = 0;
        for (size_t i = 0; i < cloud.size(); ++i) col += enc.gate[i * c + j];
        REQUIRE(col == Catch::Approx(1.0).margin(1e-5));
    }
}

TEST_CASE("uninitialized parameters are rejected") {
    EncoderConfig cfg;
    ParamStore empty;
    auto cloud = small_cloud(12, 3);
    REQUIRE_THROWS_AS(encode(cloud, cfg, empty), std::invalid_argument);
}
