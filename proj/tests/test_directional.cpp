#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "qdfl/directional.hpp"
#include "qdfl/gradsuite.hpp"

using namespace qdfl;

namespace {

/// 4x4 single-channel map with f_k = value at 1-based row-major position k.
Tensor4 numbered_map(std::mt19937_64& rng) { return oracle::random_tensor(Shape{1, 4, 4, 1}, rng); }

double f(const Tensor4& x, std::size_t k) { return x.flat(k - 1); }

Tensor4 transpose_hw(const Tensor4& x) {
    const Shape& s = x.shape();
    Tensor4 out(Shape{s.n, s.w, s.h, s.c});
    for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t xx = 0; xx < s.w; ++xx)
                for (std::size_t k = 0; k < s.c; ++k) out.at(i, xx, y, k) = x.at(i, y, xx, k);
    return out;
}

Tensor4 flip_h(const Tensor4& x) {
    const Shape& s = x.shape();
    Tensor4 out(s);
    for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t xx = 0; xx < s.w; ++xx)
                for (std::size_t k = 0; k < s.c; ++k) out.at(i, s.h - 1 - y, xx, k) = x.at(i, y, xx, k);
    return out;
}

Tensor4 mirror_w(const Tensor4& x) {
    const Shape& s = x.shape();
    Tensor4 out(s);
    for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t xx = 0; xx < s.w; ++xx)
                for (std::size_t k = 0; k < s.c; ++k) out.at(i, y, s.w - 1 - xx, k) = x.at(i, y, xx, k);
    return out;
}

DirectionalMap as_map(Tensor4 values) {
    DirectionalMap m;
    m.values = std::move(values);
    m.source_d = m.values.shape().h;
    return m;
}

constexpr char kLetters[] = {'H', 'V', 'D', 'A'};

}  // namespace

TEST_CASE("named group examples on a 4x4 map") {
    std::mt19937_64 rng(1);
    const Tensor4 x = numbered_map(rng);
    const Tensor4 h = hap_forward(x).values;
    const Tensor4 v = vap_forward(x).values;
    const Tensor4 d = dap_forward(x).values;
    const Tensor4 a = aap_forward(x).values;
    CHECK(h.flat(0) == doctest::Approx((f(x, 1) + f(x, 2) + f(x, 3) + f(x, 4)) / 4).epsilon(1e-15));
    CHECK(v.flat(3) == doctest::Approx((f(x, 4) + f(x, 8) + f(x, 12) + f(x, 16)) / 4).epsilon(1e-15));
    CHECK(d.flat(5) == doctest::Approx((f(x, 9) + f(x, 14)) / 2).epsilon(1e-15));
    CHECK(a.flat(3) == doctest::Approx((f(x, 4) + f(x, 7) + f(x, 10) + f(x, 13)) / 4).epsilon(1e-15));

    // Remaining diagonal and anti-diagonal groups.
    CHECK(d.flat(0) == f(x, 4));
    CHECK(d.flat(6) == f(x, 13));
    CHECK(d.flat(3) == doctest::Approx((f(x, 1) + f(x, 6) + f(x, 11) + f(x, 16)) / 4).epsilon(1e-15));
    CHECK(a.flat(0) == f(x, 1));
    CHECK(a.flat(6) == f(x, 16));
    CHECK(a.flat(4) == doctest::Approx((f(x, 8) + f(x, 11) + f(x, 14)) / 3).epsilon(1e-15));
}

TEST_CASE("output lengths and storage layout") {
    const Tensor4 x(Shape{1, 4, 4, 320}, 1.0);
    CHECK(hap_forward(x).values.shape() == Shape{1, 4, 1, 320});
    CHECK(vap_forward(x).values.shape() == Shape{1, 4, 1, 320});
    CHECK(dap_forward(x).values.shape() == Shape{1, 7, 1, 320});
    CHECK(aap_forward(x).values.shape() == Shape{1, 7, 1, 320});
    CHECK(directional_length(Direction::diagonal, 6) == 11);
    CHECK_THROWS_AS(hap_forward(Tensor4(Shape{1, 4, 5, 1})), ShapeError);
    CHECK(direction_from_letter('A') == Direction::anti_diagonal);
    CHECK(direction_letter(Direction::vertical) == 'V');
}

TEST_CASE("row-valued map, identity pattern, constants") {
    Tensor4 rows(Shape{1, 4, 4, 1});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) rows.at(0, y, x, 0) = static_cast<double>(y + 1);
    CHECK(hap_forward(rows).values.values() == std::vector<double>{1, 2, 3, 4});

    Tensor4 eye(Shape{1, 4, 4, 1});
    for (std::size_t y = 0; y < 4; ++y) eye.at(0, y, y, 0) = 1.0;
    const Tensor4 d = dap_forward(eye).values;
    CHECK(d == oracle::directional_pool(eye, 'D'));
    CHECK(d.values() == std::vector<double>{0, 0, 0, 1, 0, 0, 0});

    const Tensor4 ones(Shape{1, 4, 4, 1}, 1.0);
    CHECK(aap_forward(ones).values.values() == std::vector<double>(7, 1.0));
    const Tensor4 constant(Shape{2, 5, 5, 3}, -2.5);
    for (Direction dir : kAllDirections) {
        const DirectionalMap out = directional_pool(constant, dir);
        for (double v : out.values.data()) CHECK(v == doctest::Approx(-2.5));
    }

    std::mt19937_64 rng(2);
    const Tensor4 one = oracle::random_tensor(Shape{2, 1, 1, 3}, rng);
    for (Direction dir : kAllDirections) {
        const Tensor4 out = directional_pool(one, dir).values;
        CHECK(out.shape() == Shape{2, 1, 1, 3});
        CHECK(out.values() == one.values());
    }
}

TEST_CASE("pooling matches the geometric oracle") {
    std::mt19937_64 rng(3);
    for (std::size_t d : {1u, 2u, 4u, 5u, 8u}) {
        const Tensor4 x = oracle::random_tensor(Shape{2, d, d, 3}, rng);
        for (std::size_t i = 0; i < 4; ++i) {
            const Tensor4 got = directional_pool(x, direction_from_letter(kLetters[i])).values;
            const Tensor4 expected = oracle::directional_pool(x, kLetters[i]);
            REQUIRE(got.shape() == expected.shape());
            CHECK(oracle::max_abs_diff(got, expected) < 1e-12);
        }
    }
}

TEST_CASE("symmetries") {
    std::mt19937_64 rng(4);
    const Tensor4 x = oracle::random_tensor(Shape{1, 6, 6, 2}, rng);
    CHECK(oracle::max_abs_diff(vap_forward(x).values, hap_forward(transpose_hw(x)).values) < 1e-15);

    // Left-right mirror carries x - y onto (d - 1) - (x + y): with the chosen
    // orderings the slots line up directly. An up-down flip reverses them.
    const Tensor4 a = aap_forward(x).values;
    CHECK(dap_forward(mirror_w(x)).values == a);
    const Tensor4 df = dap_forward(flip_h(x)).values;
    const std::size_t len = a.shape().h;
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t k = 0; k < 2; ++k) CHECK(a.at(0, t, 0, k) == df.at(0, len - 1 - t, 0, k));
}

TEST_CASE("linearity and mean preservation") {
    std::mt19937_64 rng(5);
    const Tensor4 x = oracle::random_tensor(Shape{2, 5, 5, 3}, rng);
    const Tensor4 y = oracle::random_tensor(Shape{2, 5, 5, 3}, rng);
    const double alpha = 0.75, beta = -1.25;
    for (Direction dir : kAllDirections) {
        const Tensor4 lhs = directional_pool(add(scale(x, alpha), scale(y, beta)), dir).values;
        const Tensor4 rhs = add(scale(directional_pool(x, dir).values, alpha), scale(directional_pool(y, dir).values, beta));
        CHECK(oracle::max_abs_diff(lhs, rhs) < 1e-14);
    }
    const Tensor4 h = hap_forward(x).values;
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t k = 0; k < 3; ++k) {
            double spatial = 0.0, pooled = 0.0;
            for (std::size_t yy = 0; yy < 5; ++yy)
                for (std::size_t xx = 0; xx < 5; ++xx) spatial += x.at(i, yy, xx, k);
            for (std::size_t t = 0; t < 5; ++t) pooled += h.at(i, t, 0, k);
            CHECK(pooled / 5 == doctest::Approx(spatial / 25).epsilon(1e-14));
        }
}

TEST_CASE("plans partition the map with the expected group sizes") {
    for (std::size_t d = 1; d <= 9; ++d)
        for (Direction dir : kAllDirections) {
            const PoolPlan plan(dir, d);
            std::vector<int> seen(d * d, 0);
            std::size_t total = 0;
            for (std::size_t t = 0; t < plan.length(); ++t) {
                for (std::size_t p : plan.group(t)) {
                    ++seen[p];
                    CHECK(plan.slot_of(p) == t);
                }
                total += plan.divisor(t);
                const bool diagonal = dir == Direction::diagonal || dir == Direction::anti_diagonal;
                const std::size_t expected = diagonal ? std::min(t + 1, 2 * d - 1 - t) : d;
                CHECK(plan.divisor(t) == expected);
            }
            CHECK(total == d * d);
            CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
        }
}

TEST_CASE("backward is the exact adjoint") {
    std::mt19937_64 rng(6);
    const Tensor4 x = oracle::random_tensor(Shape{2, 6, 6, 3}, rng);
    for (Direction dir : kAllDirections) {
        const PoolPlan plan(dir, 6);
        const DirectionalMap fwd = directional_pool(x, plan);
        DirectionalMap g = fwd;
        g.values = oracle::random_tensor(fwd.values.shape(), rng);
        const Tensor4 back = directional_backward(g, plan);
        CHECK(back.shape() == x.shape());
        CHECK(std::abs(dot(fwd.values, g.values) - dot(x, back)) < 1e-12);
    }
}

TEST_CASE("backward routing examples") {
    const PoolPlan hplan(Direction::horizontal, 4);
    DirectionalMap g;
    g.direction = Direction::horizontal;
    g.source_d = 4;
    g.values = Tensor4(Shape{1, 4, 1, 1});
    g.values.flat(2) = 2.0;
    const Tensor4 back = directional_backward(g, hplan);
    for (std::size_t x = 0; x < 4; ++x) CHECK(back.at(0, 2, x, 0) == 0.5);
    CHECK(squared_norm(back) == doctest::Approx(4 * 0.25));

    const PoolPlan dplan(Direction::diagonal, 4);
    g.direction = Direction::diagonal;
    g.values = Tensor4(Shape{1, 7, 1, 1});
    g.values.flat(6) = 3.0;
    const Tensor4 dback = directional_backward(g, dplan);
    CHECK(dback.flat(12) == 3.0);  // f13
    CHECK(squared_norm(dback) == 9.0);

    g.values = Tensor4(Shape{1, 6, 1, 1});
    CHECK_THROWS_AS(directional_backward(g, dplan), ShapeError);
}

TEST_CASE("pooling gradients agree with central differences") {
    for (const GradCase& c : layer_grad_cases(21)) {
        if (c.name.find("pool") == std::string::npos || c.name == "max pool") continue;
        GradCheckOptions opts;
        opts.step = c.step;
        opts.tolerance = 1e-8;
        opts.seed = 5;
        const GradCheckReport r = check_gradients(c.problem, c.theta, opts);
        INFO(c.name);
        CHECK(r.passed());
    }
}

TEST_CASE("spatial norm window") {
    CHECK(sn_window(0, 7, 4).first == 0);
    CHECK(sn_window(0, 7, 4).last == 2);
    CHECK(sn_window(3, 7, 4).first == 2);
    CHECK(sn_window(3, 7, 4).last == 5);
    CHECK(sn_window(6, 7, 4).last == 6);
    CHECK(sn_window(0, 1, 4).last == 0);
    CHECK_THROWS_AS(sn_window(0, 4, 0), Error);
}

TEST_CASE("spatial norm forward") {
    CHECK(squared_norm(spatial_norm_forward(as_map(Tensor4(Shape{1, 7, 1, 4})), 4).values) == 0.0);

    const DirectionalMap single = spatial_norm_forward(as_map(Tensor4(Shape{1, 1, 1, 1}, 3.0)), 4);
    CHECK(single.values.flat(0) == doctest::Approx(0.9486832980505138).epsilon(1e-15));

    std::mt19937_64 rng(7);
    for (std::size_t len : {1u, 4u, 7u, 11u}) {
        const Tensor4 p = oracle::random_tensor(Shape{3, len, 1, 2}, rng, -50.0, 50.0);
        const Tensor4 z = spatial_norm_forward(as_map(p), 4).values;
        CHECK(oracle::max_abs_diff(z, oracle::spatial_norm(p)) < 1e-14);
        for (double v : z.data()) CHECK(std::abs(v) < 1.0);
    }
}

TEST_CASE("spatial norm backward") {
    SpatialNormCache cache;
    spatial_norm_forward(as_map(Tensor4(Shape{1, 7, 1, 2})), 4, &cache);
    std::mt19937_64 rng(8);
    const Tensor4 g = oracle::random_tensor(Shape{1, 7, 1, 2}, rng);
    CHECK(spatial_norm_backward(as_map(g), cache).values == g);

    // L = 1: z = p / sqrt(1 + p^2), dz/dp = (1 + p^2)^(-3/2).
    for (double p : {-2.0, -0.3, 0.0, 0.7, 5.0}) {
        SpatialNormCache c1;
        spatial_norm_forward(as_map(Tensor4(Shape{1, 1, 1, 1}, p)), 4, &c1);
        const double grad = spatial_norm_backward(as_map(Tensor4(Shape{1, 1, 1, 1}, 1.0)), c1).values.flat(0);
        CHECK(grad == doctest::Approx(std::pow(1.0 + p * p, -1.5)).epsilon(1e-14));
    }

    for (const GradCase& c : layer_grad_cases(22)) {
        if (c.name != "spatial norm") continue;
        GradCheckOptions opts;
        opts.step = c.step;
        opts.tolerance = 1e-6;
        CHECK(check_gradients(c.problem, c.theta, opts).passed());
    }
}
