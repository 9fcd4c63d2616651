#include <catch2/catch_amalgamated.hpp>

#include "pointsplat/pruner.hpp"
#include "pointsplat/rasterizer.hpp"
#include "pointsplat/synthscene.hpp"

using namespace pointsplat;

TEST_CASE("generation is deterministic under seed") {
    SceneSpec spec;
    spec.n_gaussians = 64;
    spec.camera_count = 12;
    Scene a = generate(spec);
    Scene b = generate(spec);
    REQUIRE(a.cloud.size() == b.cloud.size());
    for (size_t i = 0; i < a.cloud.size(); ++i) {
        REQUIRE(a.cloud.gaussians[i].position.x == b.cloud.gaussians[i].position.x);
        REQUIRE(a.cloud.gaussians[i].rotation_raw == b.cloud.gaussians[i].rotation_raw);
        REQUIRE(a.cloud.gaussians[i].opacity_logit == b.cloud.gaussians[i].opacity_logit);
        REQUIRE(a.cloud.gaussians[i].sh_coeffs == b.cloud.gaussians[i].sh_coeffs);
    }
    for (size_t i = 0; i < a.cameras.size(); ++i) {
        REQUIRE(a.cameras[i].camera.rotation.m == b.cameras[i].camera.rotation.m);
        REQUIRE(a.cameras[i].is_test == b.cameras[i].is_test);
    }

    SceneSpec other = spec;
    other.seed = spec.seed + 1;
    Scene c = generate(other);
    REQUIRE(c.cloud.gaussians[0].position.x != a.cloud.gaussians[0].position.x);
}

TEST_CASE("single gaussian is visible from every orbit camera") {
    SceneSpec spec;
    spec.n_gaussians = 1;
    spec.camera_count = 8;
    spec.opacity_logit_min = 2.0;
    spec.opacity_logit_max = 3.0;
    spec.log_scale_min = -2.0;
    spec.log_scale_max = -1.5;
    Scene scene = generate(spec);
    for (const auto& tc : scene.cameras) {
        RenderOutput out = rasterize(scene.cloud, tc.camera);
        float max_alpha = 0.f;
        for (float a : out.alpha.data) max_alpha = std::max(max_alpha, a);
        REQUIRE(max_alpha > 0.f);
    }
}

TEST_CASE("every camera sees some of a 500-gaussian scene") {
    SceneSpec spec;
    spec.n_gaussians = 500;
    spec.camera_count = 10;
    Scene scene = generate(spec);
    for (const auto& tc : scene.cameras) {
        RenderOutput out = rasterize(scene.cloud, tc.camera);
        double acc = 0;
        for (float a : out.alpha.data) acc += a;
        REQUIRE(acc > 0.0);
    }
}

TEST_CASE("train/test split is disjoint and roughly 90/10") {
    SceneSpec spec;
    spec.camera_count = 30;
    spec.n_gaussians = 4;
    Scene scene = generate(spec);
    auto test = scene.test_views();
    auto train = scene.train_views();
    REQUIRE(test.size() == 3);
    REQUIRE(train.size() == 27);
    for (int t : test)
        REQUIRE(std::find(train.begin(), train.end(), t) == train.end());
}

TEST_CASE("mixture populations are separated by construction") {
    MixtureSpec ms;
    auto mix = mixture_cloud(ms);
    REQUIRE(mix.cloud.size() == static_cast<size_t>(ms.n_total));
    REQUIRE(mix.labels.size() == mix.cloud.size());

    double small_max_vol = 0, large_min_vol = 1e300;
    double small_min_op = 1, large_max_op = 0;
    for (size_t i = 0; i < mix.cloud.size(); ++i) {
        const auto& g = mix.cloud.gaussians[i];
        if (mix.labels[i] == 0) {
            small_max_vol = std::max(small_max_vol, volume(g));
            small_min_op = std::min(small_min_op, g.opacity());
        } else {
            large_min_vol = std::min(large_min_vol, volume(g));
            large_max_op = std::max(large_max_op, g.opacity());
        }
    }
    REQUIRE(small_max_vol < large_min_vol);
    REQUIRE(large_max_op < small_min_op);

    auto again = mixture_cloud(ms);
    REQUIRE(again.cloud.gaussians[0].position.x == mix.cloud.gaussians[0].position.x);
}

TEST_CASE("degenerate box is rejected") {
    SceneSpec spec;
    spec.box_min = {1, 0, 0};
    spec.box_max = {1, 1, 1};
    REQUIRE_THROWS_AS(generate(spec), std::invalid_argument);
}

TEST_CASE("spec parses from flat key=value text") {
    auto kv = KeyValues::parse("seed=9\nn_gaussians=77\nimage_width=32\nfov_deg=60\n");
    SceneSpec spec = SceneSpec::from_kv(kv);
    REQUIRE(spec.seed == 9);
    REQUIRE(spec.n_gaussians == 77);
    REQUIRE(spec.image_width == 32);
    REQUIRE(KeyValues::parse("a=1\n").get_int("a", 0) == 1);
    REQUIRE_THROWS_AS(KeyValues::parse("not a pair\n"), ConfigError);
}
