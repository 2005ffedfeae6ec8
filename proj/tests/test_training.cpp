#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numbers>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "qdfl/io.hpp"
#include "qdfl/training.hpp"

using namespace qdfl;

namespace {

Tensor4 logits_of(std::size_t k, std::size_t c, std::vector<double> v) { return Tensor4(Shape{k, 1, 1, c}, std::move(v)); }

/// Small separable set: synthetic identities rendered at 16 px, all as training data.
TrainingSet tiny_set(std::size_t ids, std::size_t per_id) {
    SynthOptions opts;
    opts.ids = ids;
    opts.per_id = per_id;
    opts.size = 16;
    opts.seed = 3;
    TrainingSet set;
    for (std::size_t id = 0; id < ids; ++id) {
        set.class_names.push_back("v" + std::to_string(id));
        for (std::size_t j = 0; j < per_id; ++j) {
            set.images.push_back(to_tensor(render_synthetic(opts, id, j)));
            set.labels.push_back(id);
        }
    }
    return set;
}

}  // namespace

TEST_CASE("loss examples") {
    const std::vector<std::size_t> one{1};
    const std::vector<std::size_t> zero{0};

    const LossResult uniform = softmax_l2_loss(logits_of(1, 2, {0, 0}), zero, Tensor4(Shape{1, 1, 3, 2}), 0.0);
    CHECK(uniform.loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));

    // True class is the first (label 1 in 1-based terms).
    const LossResult saturated = softmax_l2_loss(logits_of(1, 2, {10, -10}), zero, Tensor4(Shape{1, 1, 3, 2}), 0.0);
    CHECK(saturated.loss == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
    CHECK(saturated.loss == doctest::Approx(2.06e-9).epsilon(0.01));

    Tensor4 w(Shape{1, 1, 2, 2}, {1, 1, 1, 1});  // ||W||^2 = 4
    const LossResult reg = softmax_l2_loss(logits_of(1, 2, {50, -50}), zero, w, 0.005);
    CHECK(reg.loss == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(reg.grad_reg == scale(w, 0.005));

    CHECK_THROWS_AS(softmax_l2_loss(logits_of(1, 2, {0, 0}), std::vector<std::size_t>{2}, w, 0.0), DataError);
    CHECK_THROWS_AS(softmax_l2_loss(logits_of(1, 2, {std::nan(""), 0}), one, w, 0.0), DivergenceError);
}

TEST_CASE("loss gradient against a direct softmax") {
    std::mt19937_64 rng(1);
    const Tensor4 logits = oracle::random_tensor(Shape{4, 1, 1, 5}, rng, -3.0, 3.0);
    const std::vector<std::size_t> labels{0, 4, 2, 2};
    const LossResult r = softmax_l2_loss(logits, labels, Tensor4(Shape{1, 1, 2, 5}), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        double z = 0.0;
        for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits.at(i, 0, 0, c));
        loss -= std::log(std::exp(logits.at(i, 0, 0, labels[i])) / z) / 4;
        double row = 0.0;
        for (std::size_t c = 0; c < 5; ++c) {
            const double expected = (std::exp(logits.at(i, 0, 0, c)) / z - (c == labels[i] ? 1.0 : 0.0)) / 4;
            CHECK(r.grad_logits.at(i, 0, 0, c) == doctest::Approx(expected).epsilon(1e-12));
            row += r.grad_logits.at(i, 0, 0, c);
        }
        CHECK(std::abs(row) < 1e-15);
    }
    CHECK(r.loss == doctest::Approx(loss).epsilon(1e-12));
    CHECK(r.data_loss == r.loss);
}

TEST_CASE("momentum update") {
    const Shape s{1, 1, 1, 2};
    SUBCASE("zero gradient, zero velocity is a fixed point") {
        Tensor4 p(s, {1.0, -2.0}), v(s);
        sgd_momentum_update(p, Tensor4(s), v, 0.01, 0.9, 1);
        CHECK(p.values() == std::vector<double>{1.0, -2.0});
    }
    SUBCASE("first step is plain SGD") {
        Tensor4 p(s, {1.0, -2.0}), v(s);
        sgd_momentum_update(p, Tensor4(s, {0.5, 1.0}), v, 0.1, 0.9, 1);
        CHECK(p.flat(0) == doctest::Approx(0.95));
        CHECK(p.flat(1) == doctest::Approx(-2.1));
    }
    SUBCASE("two steps with constant gradient move by lr g (1 + 1.9)") {
        Tensor4 p(s, {0.0, 0.0}), v(s);
        const Tensor4 g(s, {1.0, -3.0});
        sgd_momentum_update(p, g, v, 0.01, 0.9, 1);
        sgd_momentum_update(p, g, v, 0.01, 0.9, 2);
        CHECK(p.flat(0) == doctest::Approx(-0.01 * 2.9).epsilon(1e-14));
        CHECK(p.flat(1) == doctest::Approx(0.03 * 2.9).epsilon(1e-14));
    }
    SUBCASE("non-finite gradient aborts with the step") {
        Tensor4 p(s), v(s);
        try {
            sgd_momentum_update(p, Tensor4(s, {0.0, std::numeric_limits<double>::infinity()}), v, 0.01, 0.9, 17);
            FAIL("expected DivergenceError");
        } catch (const DivergenceError& e) {
            CHECK(e.step() == 17);
        }
    }
}

TEST_CASE("learning rate schedule") {
    TrainConfig cfg;
    CHECK(decayed_lr(0.01, cfg) == doctest::Approx(0.001));
    CHECK(decayed_lr(0.001, cfg) == 0.001);
    CHECK(decayed_lr(0.004, cfg) == 0.001);

    cfg.convergence_window = 5;
    SUBCASE("flat loss triggers a decay after two windows, then the floor holds") {
        OptimizerState st(cfg);
        std::vector<double> lrs;
        for (int i = 0; i < 40; ++i) lrs.push_back(lr_schedule_step(st, cfg, 1.0));
        CHECK(lrs[8] == 0.01);
        CHECK(lrs[9] == doctest::Approx(0.001));
        CHECK(lrs.back() == doctest::Approx(0.001));
        for (std::size_t i = 1; i < lrs.size(); ++i) CHECK(lrs[i] <= lrs[i - 1]);
        for (double lr : lrs) CHECK(lr >= 0.001);
    }
    SUBCASE("steadily falling loss never triggers") {
        OptimizerState st(cfg);
        double loss = 10.0;
        for (int i = 0; i < 100; ++i) {
            CHECK(lr_schedule_step(st, cfg, loss) == 0.01);
            loss *= 0.95;
        }
    }
}

TEST_CASE("batch sampler composition") {
    std::vector<std::size_t> labels;
    for (std::size_t id = 0; id < 10; ++id)
        for (std::size_t j = 0; j < 10; ++j) labels.push_back(id);
    std::mt19937_64 rng(2);
    for (int b = 0; b < 1000; ++b) {
        const Batch batch = sample_batch(labels, 128, rng);
        REQUIRE(batch.indices.size() == 128);
        REQUIRE(batch.positive_pairs == 32);
        REQUIRE(batch.negative_pairs == 32);
        for (std::size_t i = 0; i < 128; ++i) REQUIRE(batch.labels[i] == labels[batch.indices[i]]);
        for (std::size_t p = 0; p < 32; ++p) {
            const std::size_t a = batch.indices[2 * p], c = batch.indices[2 * p + 1];
            REQUIRE(labels[a] == labels[c]);
            REQUIRE(a != c);
        }
        for (std::size_t p = 32; p < 64; ++p) REQUIRE(labels[batch.indices[2 * p]] != labels[batch.indices[2 * p + 1]]);
    }

    const std::vector<std::size_t> single(20, 0);
    CHECK_THROWS_AS(sample_batch(single, 128, rng), DataError);
    const std::vector<std::size_t> singletons{0, 1, 2};
    CHECK_THROWS_AS(sample_batch(singletons, 8, rng), DataError);
    CHECK_THROWS_AS(sample_batch(labels, 126, rng), ConfigError);

    std::mt19937_64 r1(5), r2(5);
    for (int i = 0; i < 20; ++i) CHECK(sample_batch(labels, 16, r1).indices == sample_batch(labels, 16, r2).indices);
}

TEST_CASE("augmentation") {
    std::mt19937_64 rng(3);
    const Tensor4 img = oracle::random_tensor(Shape{1, 9, 9, 3}, rng, 0.0, 1.0);
    CHECK(augment_with(img, false, 0.0) == img);
    CHECK(mirror_horizontal(mirror_horizontal(img)) == img);
    CHECK(augment_with(img, true, 0.0) == mirror_horizontal(img));
    CHECK(mirror_horizontal(img).at(0, 2, 0, 1) == img.at(0, 2, 8, 1));

    // Impulse away from the centre; its rotated mass centre follows the
    // closed-form rotation (clockwise on screen, y down).
    const std::size_t n = 33;
    const double c = (n - 1) / 2.0;
    for (double theta : {3.0, -3.0}) {
        Tensor4 impulse(Shape{1, n, n, 1});
        const std::size_t y0 = 6, x0 = 25;
        impulse.at(0, y0, x0, 0) = 1.0;
        const Tensor4 out = augment_with(impulse, false, theta);
        CHECK(out.shape() == impulse.shape());
        double mass = 0.0, my = 0.0, mx = 0.0;
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double v = out.at(0, y, x, 0);
                mass += v;
                my += v * y;
                mx += v * x;
            }
        REQUIRE(mass > 0.5);
        const double t = theta * std::numbers::pi / 180.0;
        const double dx = x0 - c, dy = y0 - c;
        const double ex = c + std::cos(t) * dx - std::sin(t) * dy;
        const double ey = c + std::sin(t) * dx + std::cos(t) * dy;
        CHECK(std::hypot(mx / mass - ex, my / mass - ey) < 1.0);
    }

    // Edge replication: a constant image stays constant under rotation.
    const Tensor4 flat(Shape{1, 8, 8, 3}, 0.4);
    const Tensor4 rotated = augment_with(flat, true, 2.5);
    for (double v : rotated.data()) CHECK(v == doctest::Approx(0.4));

    TrainConfig cfg;
    cfg.rotation_range = 0.0;
    cfg.mirror_probability = 0.0;
    CHECK(augment(img, rng, cfg) == img);
}

TEST_CASE("large alpha shrinks W monotonically") {
    std::mt19937_64 rng(4);
    Tensor4 w = oracle::random_tensor(Shape{1, 1, 6, 3}, rng);
    Tensor4 v(w.shape());
    const double alpha = 10.0, lr = 1e-4;
    double prev = squared_norm(w);
    for (std::size_t step = 1; step <= 300; ++step) {
        // Data-free objective: only the penalty term contributes.
        const Tensor4 logits(Shape{1, 1, 1, 3});
        const LossResult r = softmax_l2_loss(logits, std::vector<std::size_t>{0}, w, alpha);
        sgd_momentum_update(w, r.grad_reg, v, lr, 0.9, step);
        const double now = squared_norm(w);
        REQUIRE(now < prev);
        prev = now;
    }
}

TEST_CASE("zero learning rate leaves the network bit-identical") {
    const TrainingSet data = tiny_set(3, 4);
    NetworkSpec spec = toy_profile(4, 16, 3);
    BranchNetwork net(spec, Direction::anti_diagonal);
    std::mt19937_64 rng(5);
    net.initialize(rng, 0.05);
    std::vector<Tensor4> before;
    net.visit([&](const std::string&, Param& p) { before.push_back(p.value); });

    TrainConfig cfg;
    cfg.lr_initial = 0.0;
    cfg.lr_min = 0.0;
    cfg.batch_size = 8;
    cfg.steps = 5;
    train_branch(net, data, cfg, rng);
    std::size_t i = 0;
    net.visit([&](const std::string& name, Param& p) {
        INFO(name);
        CHECK(p.value == before[i++]);
    });
}

TEST_CASE("toy training run reduces the loss below a tenth") {
    const TrainingSet data = tiny_set(10, 6);
    NetworkSpec spec = toy_profile(4, 16, 10);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.steps = 500;
    cfg.seed = 11;
    cfg.init_std = 0.1;
    cfg.lr_initial = 0.02;
    cfg.alpha = 0.001;  // the 0.005 penalty puts a floor near 0.1 of the start loss
    cfg.convergence_window = 500;

    BranchNetwork net(spec, Direction::horizontal);
    std::mt19937_64 rng = make_stream(cfg.seed, 0);
    net.initialize(rng, cfg.init_std);
    const std::vector<TraceRow> trace = train_branch(net, data, cfg, rng);
    REQUIRE(trace.size() == 500);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        first += trace[i].loss / 20;
        last += trace[trace.size() - 1 - i].loss / 20;
    }
    INFO("first " << first << " last " << last);
    CHECK(last < 0.1 * first);
    for (std::size_t i = 0; i < trace.size(); ++i) CHECK(trace[i].step == i + 1);
    for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i].lr <= trace[i - 1].lr);
}

TEST_CASE("seeded runs reproduce the trace exactly") {
    const TrainingSet data = tiny_set(4, 4);
    NetworkSpec spec = toy_profile(4, 16);
    spec.branches = BranchSet::parse("HA");
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.steps = 6;
    cfg.seed = 9;
    const TrainResult a = train(data, spec, cfg);
    const TrainResult b = train(data, spec, cfg);
    REQUIRE(a.trace.size() == 12);
    CHECK(a.trace.front().branch == 'H');
    CHECK(a.trace.back().branch == 'A');
    for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i].loss == b.trace[i].loss);
    CHECK(a.final_loss == b.final_loss);

    std::ostringstream csv;
    write_trace_csv(csv, a.trace);
    std::istringstream lines(csv.str());
    std::string line;
    std::getline(lines, line);
    CHECK(line == "branch,step,lr,loss");
    std::size_t rows = 0;
    while (std::getline(lines, line)) ++rows;
    CHECK(rows == 12);

    // Separate streams per branch.
    std::mt19937_64 s0 = make_stream(9, 0), s1 = make_stream(9, 1);
    CHECK(s0() != s1());
}

TEST_CASE("config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.batch_size = 10;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.lr_min = 0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
