#include <catch2/catch_amalgamated.hpp>

#include "mareo/attribution.hpp"
#include "mareo/svrt.hpp"
#include "mareo/train.hpp"

using namespace mareo;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.input_size = 32;
    return cfg;
}

Tensor sample_input(std::uint64_t seed) {
    svrt::SvrtSample s = svrt::gen_sample(1, seed, 0, 32);
    Dataset ds;
    ds.h = 32;
    ds.w = 32;
    ds.append(s.label, s.image);
    return stimulus_tensor(ds.image(0), 32, 32);
}

}  // namespace

TEST_CASE("saliency: shape, zero map for constant model, FD agreement") {
    ModelConfig cc = tiny_cfg();
    cc.ablations.drop_out = true;
    cc.ablations.drop_allobj = true;
    MareoParams constant = MareoParams::init(cc, 1);
    Tensor x = sample_input(3);
    AttributionMap zero = saliency(constant, x);
    CHECK(zero.h == 32);
    CHECK(zero.w == 32);
    REQUIRE(zero.values.size() == 32 * 32);
    for (double v : zero.values) CHECK(v == 0.0);

    MareoParams p = MareoParams::init(tiny_cfg(), 2);
    AttributionMap map = saliency(p, x);
    for (double v : map.values) CHECK(v >= 0.0);

    // finite-difference probe of |d logit / d pixel|
    Rng rng(5);
    const double h = 1e-5;
    for (int probe = 0; probe < 10; ++probe) {
        const std::int64_t i = static_cast<std::int64_t>(rng.next_u64() % x.size());
        const double saved = x[i];
        x.at(i) = saved + h;
        const double fp = mareo_forward(x, p).logit.item();
        x.at(i) = saved - h;
        const double fm = mareo_forward(x, p).logit.item();
        x.at(i) = saved;
        const double num = std::abs((fp - fm) / (2 * h));
        const double rel = std::abs(map.values[static_cast<std::size_t>(i)] - num) /
                           std::max({map.values[static_cast<std::size_t>(i)], num, 1e-8});
        CHECK(rel < 1e-4);
    }
}

TEST_CASE("integrated gradients: zero at baseline, completeness, step convergence") {
    MareoParams p = MareoParams::init(tiny_cfg(), 7);
    Tensor white = Tensor::full({1, 32, 32}, 1.0);
    AttributionMap at_base = integrated_gradients(p, white, 32);
    for (double v : at_base.values) CHECK(v == 0.0);
    CHECK(at_base.signed_sum == 0.0);
    CHECK(at_base.delta == 0.0);

    for (std::uint64_t seed : {11ULL, 12ULL, 13ULL, 14ULL}) {
        Tensor x = sample_input(seed);
        AttributionMap ig = integrated_gradients(p, x, 128);
        CHECK(ig.completeness_ok());
        AttributionMap ig2 = integrated_gradients(p, x, 256);
        CHECK(std::abs(ig2.signed_sum - ig.signed_sum) <= 0.01 * std::abs(ig.delta) + 1e-4);
    }

    CHECK_THROWS_AS(integrated_gradients(p, white, 8), ConfigError);
}

TEST_CASE("smoothgrad: zero sigma equals saliency bitwise, seeded, averaging") {
    MareoParams p = MareoParams::init(tiny_cfg(), 9);
    Tensor x = sample_input(21);

    AttributionMap sal = saliency(p, x);
    AttributionMap sg0 = smoothgrad(p, x, 0.0, 32, 5);
    CHECK(sg0.values == sal.values);

    AttributionMap a = smoothgrad(p, x, 0.05, 8, 42);
    AttributionMap b = smoothgrad(p, x, 0.05, 8, 42);
    CHECK(a.values == b.values);

    // estimator variance shrinks with n: two seeds agree better at n=64
    auto msd = [&](int n) {
        AttributionMap u = smoothgrad(p, x, 0.05, n, 1);
        AttributionMap v = smoothgrad(p, x, 0.05, n, 2);
        double s = 0.0;
        for (std::size_t i = 0; i < u.values.size(); ++i) s += (u.values[i] - v.values[i]) * (u.values[i] - v.values[i]);
        return s / static_cast<double>(u.values.size());
    };
    CHECK(msd(64) < msd(4));

    CHECK_THROWS_AS(smoothgrad(p, x, 0.05, 1, 0), ConfigError);
}

TEST_CASE("heatmap emission and round trip") {
    AttributionMap map;
    map.h = 4;
    map.w = 4;
    map.values = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
    emit_heatmap_pgm(map, "/tmp/mareo_test_hm.pgm");
    PgmImage img = read_pgm("/tmp/mareo_test_hm.pgm");
    CHECK(img.h == 4);
    CHECK(img.w == 4);
    CHECK(img.px[0] == 0);
    CHECK(img.px[15] == 255);
    CHECK(img.px[5] == static_cast<std::uint8_t>(std::floor(5.0 / 15.0 * 255.0 + 0.5)));

    AttributionMap flat;
    flat.h = 2;
    flat.w = 2;
    flat.values = {3.5, 3.5, 3.5, 3.5};
    emit_heatmap_pgm(flat, "/tmp/mareo_test_flat.pgm");
    PgmImage fimg = read_pgm("/tmp/mareo_test_flat.pgm");
    for (std::uint8_t v : fimg.px) CHECK(v == 0);  // constant map convention
}

TEST_CASE("attribution rejects multi-choice heads") {
    ModelConfig mc = tiny_cfg();
    mc.n_choices = 2;
    MareoParams p = MareoParams::init(mc, 11);
    Tensor x = sample_input(30);
    CHECK_THROWS_AS(saliency(p, x), ConfigError);
}
