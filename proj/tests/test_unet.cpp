#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "precipdiff/rng.hpp"
#include "precipdiff/unet.hpp"

using namespace precipdiff;

namespace {

Tensor random_field(Rng& rng, int n, int c, int h, int w, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n) * c * h * w);
    for (auto& x : v) x = scale * rng.gaussian();
    return Tensor::from_data({n, c, h, w}, std::move(v), false);
}

}  // namespace

TEST_CASE("paper-sized configs build and preserve shape") {
    {
        UNetConfig cfg{.in_channels = 2, .channels = {32, 64, 128}, .noise_embed_dim = 16};
        auto m = build_unet(cfg, 1);
        Rng rng(2);
        auto x = random_field(rng, 1, 1, 20, 20);
        auto cond = random_field(rng, 1, 1, 20, 20);
        auto emb = noise_embedding({0.3}, cfg.noise_embed_dim, m.embed_freqs);
        auto y = m.forward(x, emb, cond);
        CHECK(y.shape() == Shape{1, 1, 20, 20});
    }
    {
        // 4-block net on a 184x200 scene (divisible by 8)
        UNetConfig cfg{.in_channels = 2, .channels = {8, 8, 8, 8}, .noise_embed_dim = 8};
        auto m = build_unet(cfg, 1);
        Rng rng(2);
        auto x = random_field(rng, 1, 1, 184, 200);
        auto cond = random_field(rng, 1, 1, 184, 200);
        auto emb = noise_embedding({0.0}, cfg.noise_embed_dim, m.embed_freqs);
        CHECK(m.forward(x, emb, cond).shape() == Shape{1, 1, 184, 200});
    }
    {
        UNetConfig cfg{.in_channels = 2, .channels = {8, 16}, .noise_embed_dim = 8};
        auto m = build_unet(cfg, 1);
        Rng rng(2);
        auto x = random_field(rng, 1, 1, 16, 16);
        auto cond = random_field(rng, 1, 1, 16, 16);
        auto emb = noise_embedding({0.0}, cfg.noise_embed_dim, m.embed_freqs);
        CHECK(m.forward(x, emb, cond).shape() == Shape{1, 1, 16, 16});
    }
}

TEST_CASE("zero-initialized output layer: forward is identically zero") {
    UNetConfig cfg{.in_channels = 2, .channels = {8, 16}, .noise_embed_dim = 8};
    auto m = build_unet(cfg, 77);
    Rng rng(5);
    auto x = random_field(rng, 2, 1, 16, 16, 3.0);
    auto cond = random_field(rng, 2, 1, 16, 16, 3.0);
    auto emb = noise_embedding({0.1, -0.4}, cfg.noise_embed_dim, m.embed_freqs);
    auto y = m.forward(x, emb, cond);
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("odd grid sizes get padded and cropped back") {
    UNetConfig cfg{.in_channels = 2, .channels = {8, 16}, .noise_embed_dim = 8};
    auto m = build_unet(cfg, 3);
    Rng rng(9);
    auto x = random_field(rng, 1, 1, 15, 17);
    auto cond = random_field(rng, 1, 1, 15, 17);
    auto emb = noise_embedding({0.0}, cfg.noise_embed_dim, m.embed_freqs);
    CHECK(m.forward(x, emb, cond).shape() == Shape{1, 1, 15, 17});
}

TEST_CASE("batch independence: permuting batch order permutes outputs") {
    UNetConfig cfg{.in_channels = 2, .channels = {8, 16}, .noise_embed_dim = 8};
    auto m = build_unet(cfg, 13);
    // break the zero-init so outputs are nontrivial
    Rng wr(1);
    for (auto& v : m.params["out.w"].data()) v = 0.1 * wr.gaussian();

    Rng rng(4);
    auto a = random_field(rng, 1, 1, 16, 16);
    auto b = random_field(rng, 1, 1, 16, 16);
    auto ca = random_field(rng, 1, 1, 16, 16);
    auto cb = random_field(rng, 1, 1, 16, 16);

    auto stack = [](const Tensor& p, const Tensor& q) {
        std::vector<double> v = p.data();
        v.insert(v.end(), q.data().begin(), q.data().end());
        return Tensor::from_data({2, 1, 16, 16}, std::move(v), false);
    };
    auto emb_ab = noise_embedding({0.2, -0.7}, cfg.noise_embed_dim, m.embed_freqs);
    auto emb_ba = noise_embedding({-0.7, 0.2}, cfg.noise_embed_dim, m.embed_freqs);
    auto y_ab = m.forward(stack(a, b), emb_ab, stack(ca, cb));
    auto y_ba = m.forward(stack(b, a), emb_ba, stack(cb, ca));
    std::size_t half = y_ab.data().size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        CHECK(y_ab.data()[i] == doctest::Approx(y_ba.data()[half + i]).epsilon(1e-12));
        CHECK(y_ab.data()[half + i] == doctest::Approx(y_ba.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("determinism: same seed and config give bit-identical parameters") {
    UNetConfig cfg{.in_channels = 2, .channels = {8, 16}, .noise_embed_dim = 8};
    auto m1 = build_unet(cfg, 42);
    auto m2 = build_unet(cfg, 42);
    for (const auto& [name, t] : m1.params) CHECK(t.data() == m2.params.at(name).data());
    auto m3 = build_unet(cfg, 43);
    bool any_diff = false;
    for (const auto& [name, t] : m1.params)
        if (t.data() != m3.params.at(name).data()) any_diff = true;
    CHECK(any_diff);
    CHECK(m1.parameter_count() == m2.parameter_count());
}

TEST_CASE("noise embedding properties") {
    auto freqs = make_embed_freqs(16);
    auto e0 = noise_embedding({0.0}, 16, freqs);
    for (int i = 0; i < 8; ++i) {
        CHECK(e0.data()[i] == 0.0);        // sin terms
        CHECK(e0.data()[8 + i] == 1.0);    // cos terms
    }
    auto e0b = noise_embedding({0.0}, 16, freqs);
    CHECK(e0.data() == e0b.data());

    auto e1 = noise_embedding({1.0}, 16, freqs);
    double dot = 0, n0 = 0, n1 = 0;
    for (int i = 0; i < 16; ++i) {
        dot += e0.data()[i] * e1.data()[i];
        n0 += e0.data()[i] * e0.data()[i];
        n1 += e1.data()[i] * e1.data()[i];
    }
    CHECK(dot / std::sqrt(n0 * n1) < 0.99);

    CHECK_THROWS_AS(make_embed_freqs(7), ConfigError);
}

TEST_CASE("gradients match finite differences on an 8x8 input") {
    UNetConfig cfg{.in_channels = 2, .channels = {4, 8}, .noise_embed_dim = 4};
    auto m = build_unet(cfg, 11);
    Rng wr(2);
    for (auto& v : m.params["out.w"].data()) v = 0.05 * wr.gaussian();

    Rng rng(6);
    auto x = random_field(rng, 1, 1, 8, 8);
    auto cond = random_field(rng, 1, 1, 8, 8);
    auto emb = noise_embedding({0.25}, cfg.noise_embed_dim, m.embed_freqs);

    auto loss_value = [&] {
        NoGradGuard ng;
        auto y = m.forward(x, emb, cond);
        return mean(mul(y, y)).item();
    };

    auto y = m.forward(x, emb, cond);
    auto loss = mean(mul(y, y));
    backward(loss);

    for (auto& [name, p] : m.params) {
        if (!p.has_grad()) p.grad();
        auto& data = p.data();
        double err = grad_check(
            [&](std::span<const double> pt) {
                auto saved = data;
                std::copy(pt.begin(), pt.end(), data.begin());
                double v = loss_value();
                data = saved;
                return v;
            },
            data, p.grad(), 1e-4);
        INFO("parameter ", name);
        CHECK(err < 1e-3);
    }
}
