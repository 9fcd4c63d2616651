#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "oracles.hpp"
#include "pointsplat/pruner.hpp"
#include "pointsplat/rng.hpp"
#include "pointsplat/synthscene.hpp"

using namespace pointsplat;

namespace {
GaussianCloud random_cloud(Rng& rng, int n) {
    GaussianCloud cloud;
    cloud.sh_degree = 0;
    for (int i = 0; i < n; ++i) {
        Gaussian g;
        g.sh_degree = 0;
        g.position = {float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))};
        Quat<double> q = rng.unit_quaternion();
        g.rotation_raw = {float(q.w), float(q.x), float(q.y), float(q.z)};
        g.log_scale = {float(rng.uniform(-4, 1)), float(rng.uniform(-4, 1)), float(rng.uniform(-4, 1))};
        g.opacity_logit = float(rng.uniform(-5, 5));
        g.sh_coeffs.assign(3, 0.f);
        cloud.gaussians.push_back(g);
    }
    return cloud;
}
}  // namespace

TEST_CASE("zscore examples") {
    std::vector<double> same{1, 1, 1};
    auto z = zscore(same);
    REQUIRE(z == std::vector<double>{0, 0, 0});

    std::vector<double> two{0, 2};
    z = zscore(two);
    REQUIRE(z[0] == Catch::Approx(-1.0));
    REQUIRE(z[1] == Catch::Approx(1.0));
}

TEST_CASE("zscore postconditions on random input") {
    Rng rng(21);
    std::vector<double> v(1000);
    for (auto& x : v) x = rng.uniform(-3, 7);
    auto z = zscore(v);

    auto rz = oracles::ref_zscore(v);
    for (size_t i = 0; i < v.size(); ++i) REQUIRE(z[i] == Catch::Approx(rz[i]).margin(1e-9));

    double mean = 0;
    for (double x : z) mean += x;
    REQUIRE(std::abs(mean) < 1e-9 * double(v.size()));
    double var = 0;
    for (double x : z) var += x * x;
    REQUIRE(std::sqrt(var / double(v.size())) == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("volume closed forms and oracle") {
    Gaussian g;
    g.log_scale = {0, 0, 0};
    REQUIRE(volume(g) == Catch::Approx(4.18879020478639).epsilon(1e-10));
    g.log_scale = {float(std::log(2.0)), float(std::log(2.0)), float(std::log(2.0))};
    REQUIRE(volume(g) == Catch::Approx(33.5103216382911).epsilon(1e-6));

    Rng rng(22);
    for (int t = 0; t < 100; ++t) {
        Gaussian h;
        h.log_scale = {float(rng.uniform(-6, 2)), float(rng.uniform(-6, 2)), float(rng.uniform(-6, 2))};
        long double want = 4.0L / 3.0L * 3.14159265358979323846L *
                           std::exp(static_cast<long double>(h.log_scale.x) +
                                    static_cast<long double>(h.log_scale.y) +
                                    static_cast<long double>(h.log_scale.z));
        REQUIRE(volume(h) == Catch::Approx(static_cast<double>(want)).epsilon(1e-12));
        REQUIRE(volume(h) > 0.0);
        REQUIRE(log10_volume(h) == Catch::Approx(std::log10(volume(h))).margin(1e-10));
    }
}

TEST_CASE("degenerate lambda reduces to single-signal ranking") {
    Rng rng(23);
    auto cloud = random_cloud(rng, 40);

    PruneConfig cfg;
    cfg.keep_count = 10;

    cfg.lambda_alpha = 1.0;
    auto s1 = score(cloud, cfg);
    std::vector<double> alphas;
    for (const auto& g : cloud.gaussians) alphas.push_back(g.opacity());
    auto rank_of = [](const std::vector<double>& s) {
        std::vector<size_t> order(s.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return s[a] > s[b]; });
        return order;
    };
    REQUIRE(rank_of(s1) == rank_of(alphas));

    cfg.lambda_alpha = 0.0;
    auto s0 = score(cloud, cfg);
    std::vector<double> vols;
    for (const auto& g : cloud.gaussians) vols.push_back(volume(g));
    REQUIRE(rank_of(s0) == rank_of(vols));
}

TEST_CASE("selection matches the brute-force oracle") {
    Rng rng(24);
    PruneConfig cfg;
    cfg.lambda_alpha = 0.3;
    for (int trial = 0; trial < 50; ++trial) {
        int n = 20;
        auto cloud = random_cloud(rng, n);
        size_t k = 1 + rng.below(static_cast<uint64_t>(n));
        cfg.keep_count = k;
        auto scores = score(cloud, cfg);
        auto selected = select_top_k(scores, k);
        REQUIRE(selected == oracles::ref_prune_selection(cloud, 0.3, k));
    }
}

TEST_CASE("select_top_k examples") {
    std::vector<double> s{3, 1, 2};
    REQUIRE(select_top_k(s, 2) == std::vector<size_t>{0, 2});

    std::vector<double> eq{5, 5, 5, 5};
    REQUIRE(select_top_k(eq, 2) == std::vector<size_t>{0, 1});

    REQUIRE_THROWS_AS(select_top_k(s, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(select_top_k(s, 4), std::invalid_argument);

    Rng rng(25);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(30);
        for (auto& x : v) x = double(rng.below(6));  // many duplicates
        size_t k = 1 + rng.below(30);
        REQUIRE(select_top_k(v, k) == oracles::ref_top_k(v, k));
    }
}

TEST_CASE("prune keeps order and never mutates") {
    Rng rng(26);
    auto cloud = random_cloud(rng, 30);
    PruneConfig cfg;
    cfg.lambda_alpha = 0.3;

    SECTION("keep_fraction 1.0 is identity") {
        cfg.keep_fraction = 1.0;
        auto [out, rep] = prune(cloud, cfg);
        REQUIRE(out.size() == cloud.size());
        for (size_t i = 0; i < cloud.size(); ++i)
            REQUIRE(out.gaussians[i].opacity_logit == cloud.gaussians[i].opacity_logit);
    }
    SECTION("keep_count N is identity") {
        cfg.keep_count = cloud.size();
        auto [out, rep] = prune(cloud, cfg);
        REQUIRE(out.size() == cloud.size());
    }
    SECTION("survivors keep relative order and exact parameters") {
        cfg.keep_fraction = 0.4;
        auto snapshot = cloud;
        auto [out, rep] = prune(cloud, cfg);
        REQUIRE(out.size() == rep.selected.size());
        REQUIRE(std::is_sorted(rep.selected.begin(), rep.selected.end()));
        for (size_t i = 0; i < rep.selected.size(); ++i) {
            const Gaussian& a = out.gaussians[i];
            const Gaussian& b = cloud.gaussians[rep.selected[i]];
            REQUIRE(a.position.x == b.position.x);
            REQUIRE(a.opacity_logit == b.opacity_logit);
            REQUIRE(a.rotation_raw == b.rotation_raw);
        }
        // input untouched
        for (size_t i = 0; i < cloud.size(); ++i)
            REQUIRE(cloud.gaussians[i].opacity_logit == snapshot.gaussians[i].opacity_logit);
    }
}

TEST_CASE("mixture pruning shifts medians toward small opaque") {
    MixtureSpec ms;
    auto mix = mixture_cloud(ms);
    PruneConfig cfg;
    cfg.lambda_alpha = 0.3;
    cfg.keep_fraction = 0.5;
    auto [out, rep] = prune(mix.cloud, cfg);
    REQUIRE(rep.selected_stats.median_opacity > rep.rejected_stats.median_opacity);
    REQUIRE(rep.selected_stats.median_log10_volume < rep.rejected_stats.median_log10_volume);
}

TEST_CASE("score is monotone in opacity and volume") {
    Rng rng(27);
    auto cloud = random_cloud(rng, 25);
    PruneConfig cfg;
    cfg.lambda_alpha = 0.3;
    cfg.keep_count = 10;
    auto base = score(cloud, cfg);
    auto rank = [&](const std::vector<double>& s, size_t i) {
        size_t r = 0;
        for (size_t j = 0; j < s.size(); ++j)
            if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++r;
        return r;
    };
    for (int trial = 0; trial < 10; ++trial) {
        size_t i = rng.below(cloud.size());
        size_t before = rank(base, i);

        auto bumped_op = cloud;
        bumped_op.gaussians[i].opacity_logit += 0.5f;
        REQUIRE(rank(score(bumped_op, cfg), i) <= before);

        auto bumped_vol = cloud;
        bumped_vol.gaussians[i].log_scale.x += 0.5f;
        REQUIRE(rank(score(bumped_vol, cfg), i) <= before);
    }
}

TEST_CASE("score is permutation equivariant") {
    Rng rng(28);
    auto cloud = random_cloud(rng, 24);
    PruneConfig cfg;
    cfg.lambda_alpha = 0.3;
    cfg.keep_count = 5;
    auto s = score(cloud, cfg);

    std::vector<size_t> perm(cloud.size());
    std::iota(perm.begin(), perm.end(), size_t{0});
    for (size_t i = perm.size(); i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);

    GaussianCloud shuffled;
    shuffled.sh_degree = cloud.sh_degree;
    for (size_t i : perm) shuffled.gaussians.push_back(cloud.gaussians[i]);
    auto s2 = score(shuffled, cfg);
    for (size_t i = 0; i < perm.size(); ++i) REQUIRE(s2[i] == Catch::Approx(s[perm[i]]).margin(1e-12));
}

TEST_CASE("selection is invariant to constant opacity shifts") {
    Rng rng(29);
    std::vector<double> alphas(50), vols(50);
    for (auto& a : alphas) a = rng.uniform(0.01, 0.99);
    for (auto& v : vols) v = std::exp(rng.uniform(-8, 1));
    auto s1 = score_values(alphas, vols, 0.3);
    auto sel1 = select_top_k(s1, 20);

    for (auto& a : alphas) a += 3.25;
    auto s2 = score_values(alphas, vols, 0.3);
    REQUIRE(select_top_k(s2, 20) == sel1);
}

TEST_CASE("log volume space ranks by log volume") {
    Rng rng(30);
    auto cloud = random_cloud(rng, 40);
    PruneConfig cfg;
    cfg.lambda_alpha = 0.3;
    cfg.keep_count = 15;
    cfg.volume_space = VolumeSpace::log;
    auto s = score(cloud, cfg);

    std::vector<double> alphas, logvols;
    for (const auto& g : cloud.gaussians) {
        alphas.push_back(g.opacity());
        logvols.push_back(std::log(volume(g)));
    }
    auto za = oracles::ref_zscore(alphas);
    auto zv = oracles::ref_zscore(logvols);
    for (size_t i = 0; i < s.size(); ++i)
        REQUIRE(s[i] == Catch::Approx(0.3 * za[i] + 0.7 * zv[i]).margin(1e-9));

    // raw and log spaces genuinely disagree on this cloud
    cfg.volume_space = VolumeSpace::raw;
    REQUIRE(select_top_k(score(cloud, cfg), 15) != select_top_k(s, 15));
}

TEST_CASE("prune config validation") {
    PruneConfig cfg;
    REQUIRE_THROWS_AS(cfg.resolve_k(10), std::invalid_argument);  // neither set
    cfg.keep_fraction = 0.5;
    cfg.keep_count = 5;
    REQUIRE_THROWS_AS(cfg.resolve_k(10), std::invalid_argument);  // both set
    cfg.keep_count.reset();
    cfg.lambda_alpha = 1.5;
    REQUIRE_THROWS_AS(cfg.resolve_k(10), std::invalid_argument);
}
