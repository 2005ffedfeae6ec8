#include "qdfl/gradsuite.hpp"

#include <cmath>
#include <memory>
#include <ostream>
#include <random>

#include "qdfl/training.hpp"

namespace qdfl {

std::string_view category_name(GradCategory c) {
    switch (c) {
        case GradCategory::linear: return "linear";
        case GradCategory::nonlinear: return "nonlinear";
        case GradCategory::network: return "network";
    }
    return "?";
}

double default_tolerance(GradCategory c) {
    switch (c) {
        case GradCategory::linear: return 1e-8;
        case GradCategory::nonlinear: return 1e-6;
        case GradCategory::network: return 1e-5;
    }
    return 0.0;
}

namespace {

Tensor4 random_tensor(const Shape& s, std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0) {
    Tensor4 t(s);
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

// Reads consecutive tensors out of a flat vector.
class Unpacker {
public:
    explicit Unpacker(std::span<const double> theta) : theta_(theta) {}
    Tensor4 take(const Shape& s) {
        const std::size_t n = s.count();
        if (pos_ + n > theta_.size()) throw ShapeError("gradsuite: theta too short");
        Tensor4 t(s, std::vector<double>(theta_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                          theta_.begin() + static_cast<std::ptrdiff_t>(pos_ + n)));
        pos_ += n;
        return t;
    }

private:
    std::span<const double> theta_;
    std::size_t pos_ = 0;
};

void append(std::vector<double>& out, const Tensor4& t) {
    const auto d = t.data();
    out.insert(out.end(), d.begin(), d.end());
}

std::vector<double> pack(std::initializer_list<const Tensor4*> parts) {
    std::vector<double> out;
    for (const Tensor4* t : parts) append(out, *t);
    return out;
}

std::uint64_t hash_indices(const std::vector<std::size_t>& idx) {
    std::uint64_t h = 0x9e3779b97f4a7c15ull;
    for (std::size_t v : idx) h = hash_combine(h, v);
    return h;
}

GradCase conv_case(const std::string& name, const Shape& x_shape, std::size_t c_out, std::size_t stride,
                   std::mt19937_64& rng) {
    const ConvParams proto = ConvParams::zeros(3, x_shape.c, c_out, stride, 1);
    const Tensor4 x = random_tensor(x_shape, rng);
    const Tensor4 w = random_tensor(proto.weights.shape(), rng);
    const Tensor4 b = random_tensor(proto.biases.shape(), rng);
    const auto r = std::make_shared<Tensor4>(random_tensor(conv2d_output_shape(x_shape, proto), rng));

    auto unpack = [proto, x_shape](std::span<const double> theta, Tensor4& xi) {
        Unpacker u(theta);
        xi = u.take(x_shape);
        ConvParams p = proto;
        p.weights = u.take(proto.weights.shape());
        p.biases = u.take(proto.biases.shape());
        return p;
    };
    GradCase c;
    c.name = name;
    c.category = GradCategory::linear;
    c.step = 1.0;  // affine in each coordinate: any step is exact, a large one drowns rounding
    c.theta = pack({&x, &w, &b});
    c.problem.value = [unpack, r](std::span<const double> theta) {
        Tensor4 xi;
        const ConvParams p = unpack(theta, xi);
        return dot(conv2d_forward(xi, p), *r);
    };
    c.problem.gradient = [unpack, r](std::span<const double> theta) {
        Tensor4 xi;
        const ConvParams p = unpack(theta, xi);
        const ConvGradients g = conv2d_backward(*r, xi, p);
        return pack({&g.grad_in, &g.grad_weights, &g.grad_biases});
    };
    return c;
}

GradCase pool_case(Direction dir, std::size_t d, std::mt19937_64& rng) {
    const Shape xs{2, d, d, 3};
    const PoolPlan plan(dir, d);
    const Tensor4 x = random_tensor(xs, rng);
    const auto r = std::make_shared<DirectionalMap>(
        DirectionalMap{dir, random_tensor(Shape{2, plan.length(), 1, 3}, rng), d});
    GradCase c;
    c.name = std::string(direction_name(dir)) + " pool";
    c.category = GradCategory::linear;
    c.step = 1.0;
    c.theta = pack({&x});
    c.problem.value = [plan, xs, r](std::span<const double> theta) {
        return dot(directional_pool(Unpacker(theta).take(xs), plan).values, r->values);
    };
    c.problem.gradient = [plan, r](std::span<const double>) {
        const Tensor4 g = directional_backward(*r, plan);
        return std::vector<double>(g.data().begin(), g.data().end());
    };
    return c;
}

GradCase maxpool_case(std::mt19937_64& rng) {
    const Shape xs{2, 7, 7, 3};
    const PoolConfig cfg;
    const Tensor4 x = random_tensor(xs, rng);
    const auto r = std::make_shared<Tensor4>(random_tensor(maxpool_forward(x, cfg).shape(), rng));
    GradCase c;
    c.name = "max pool";
    c.category = GradCategory::nonlinear;
    c.theta = pack({&x});
    c.problem.value = [xs, cfg, r](std::span<const double> theta) {
        return dot(maxpool_forward(Unpacker(theta).take(xs), cfg), *r);
    };
    c.problem.gradient = [xs, cfg, r](std::span<const double> theta) {
        std::vector<std::size_t> argmax;
        maxpool_forward(Unpacker(theta).take(xs), cfg, &argmax);
        const Tensor4 g = maxpool_backward(*r, xs, argmax);
        return std::vector<double>(g.data().begin(), g.data().end());
    };
    c.problem.regime = [xs, cfg](std::span<const double> theta) {
        std::vector<std::size_t> argmax;
        maxpool_forward(Unpacker(theta).take(xs), cfg, &argmax);
        return hash_indices(argmax);
    };
    return c;
}

GradCase batchnorm_case(std::mt19937_64& rng) {
    const Shape xs{5, 4, 4, 3};
    const Shape cs{1, 1, 1, 3};
    const Tensor4 x = random_tensor(xs, rng, 0.5, 2.0);
    const Tensor4 gamma = random_tensor(cs, rng, 1.0, 0.3);
    const Tensor4 beta = random_tensor(cs, rng);
    const auto r = std::make_shared<Tensor4>(random_tensor(xs, rng));
    auto unpack = [xs, cs](std::span<const double> theta, Tensor4& xi) {
        Unpacker u(theta);
        xi = u.take(xs);
        BatchNormParams p = BatchNormParams::identity(3);
        p.gamma = u.take(cs);
        p.beta = u.take(cs);
        return p;
    };
    GradCase c;
    c.name = "batch norm";
    c.category = GradCategory::nonlinear;
    c.theta = pack({&x, &gamma, &beta});
    c.problem.value = [unpack, r](std::span<const double> theta) {
        Tensor4 xi;
        BatchNormParams p = unpack(theta, xi);
        return dot(batchnorm_forward(xi, p, Mode::train), *r);
    };
    c.problem.gradient = [unpack, r](std::span<const double> theta) {
        Tensor4 xi;
        BatchNormParams p = unpack(theta, xi);
        BatchNormCache cache;
        batchnorm_forward(xi, p, Mode::train, &cache);
        const BatchNormGradients g = batchnorm_backward(*r, cache, p);
        return pack({&g.grad_in, &g.grad_gamma, &g.grad_beta});
    };
    return c;
}

GradCase leaky_relu_case(std::mt19937_64& rng) {
    const Shape xs{2, 6, 6, 3};
    const double slope = 0.15;
    const Tensor4 x = random_tensor(xs, rng);
    const auto r = std::make_shared<Tensor4>(random_tensor(xs, rng));
    GradCase c;
    c.name = "leaky relu";
    c.category = GradCategory::nonlinear;
    c.theta = pack({&x});
    // Keep probes at least 10 steps away from the kink.
    for (double v : c.theta) c.problem.excluded.push_back(std::abs(v) < 10.0 * c.step);
    c.problem.value = [xs, slope, r](std::span<const double> theta) {
        return dot(leaky_relu_forward(Unpacker(theta).take(xs), slope), *r);
    };
    c.problem.gradient = [xs, slope, r](std::span<const double> theta) {
        const Tensor4 g = leaky_relu_backward(*r, Unpacker(theta).take(xs), slope);
        return std::vector<double>(g.data().begin(), g.data().end());
    };
    c.problem.regime = [](std::span<const double> theta) {
        std::uint64_t h = 0;
        for (double v : theta) h = hash_combine(h, v > 0.0 ? 1u : 0u);
        return h;
    };
    return c;
}

GradCase sdu_case(std::mt19937_64& rng) {
    const Shape xs{2, 5, 5, 3};
    auto unit = std::make_shared<ShortDenseUnit>(3, 4, 0.15);
    std::vector<Param*> params;
    unit->visit("", [&](const std::string&, Param& p) { params.push_back(&p); });
    std::normal_distribution<double> dist(0.0, 0.5);
    for (Param* p : params)
        for (double& v : p->value.data()) v = dist(rng);
    for (std::size_t i = 0; i < 3; ++i) {
        unit->block(i).bn().gamma().value.fill(1.0);
        for (double& v : unit->block(i).bn().gamma().value.data()) v += 0.3 * dist(rng);
    }
    const Tensor4 x = random_tensor(xs, rng);
    Tensor4 probe_out = unit->forward(x, Mode::train);
    const auto r = std::make_shared<Tensor4>(random_tensor(probe_out.shape(), rng));

    GradCase c;
    c.name = "short dense unit";
    c.category = GradCategory::nonlinear;
    c.theta = pack({&x});
    c.problem.excluded.assign(xs.count(), false);
    for (Param* p : params) {
        append(c.theta, p->value);
        c.problem.excluded.insert(c.problem.excluded.end(), p->value.size(), p->cancelled_by_norm);
    }
    auto load = [unit, params, xs](std::span<const double> theta) {
        Unpacker u(theta);
        Tensor4 xi = u.take(xs);
        for (Param* p : params) p->value = u.take(p->value.shape());
        return xi;
    };
    c.problem.value = [unit, load, r](std::span<const double> theta) {
        const Tensor4 xi = load(theta);
        return dot(unit->forward(xi, Mode::train), *r);
    };
    c.problem.gradient = [unit, params, load, r](std::span<const double> theta) {
        const Tensor4 xi = load(theta);
        for (Param* p : params) p->zero_grad();
        unit->forward(xi, Mode::train);
        const Tensor4 gx = unit->backward(*r);
        std::vector<double> out = pack({&gx});
        for (Param* p : params) append(out, p->grad);
        return out;
    };
    c.problem.regime = [unit, load](std::span<const double> theta) {
        const Tensor4 xi = load(theta);
        unit->forward(xi, Mode::train);
        return unit->regime();
    };
    return c;
}

GradCase spatial_norm_case(std::mt19937_64& rng) {
    const Shape ps{10, 7, 1, 3};
    const Tensor4 p = random_tensor(ps, rng);
    const auto r = std::make_shared<DirectionalMap>(DirectionalMap{Direction::diagonal, random_tensor(ps, rng), 4});
    auto as_map = [ps](std::span<const double> theta) {
        return DirectionalMap{Direction::diagonal, Unpacker(theta).take(ps), 4};
    };
    GradCase c;
    c.name = "spatial norm";
    c.category = GradCategory::nonlinear;
    c.theta = pack({&p});
    c.problem.value = [as_map, r](std::span<const double> theta) {
        return dot(spatial_norm_forward(as_map(theta), 4).values, r->values);
    };
    c.problem.gradient = [as_map, r](std::span<const double> theta) {
        SpatialNormCache cache;
        spatial_norm_forward(as_map(theta), 4, &cache);
        const DirectionalMap g = spatial_norm_backward(*r, cache);
        return std::vector<double>(g.values.data().begin(), g.values.data().end());
    };
    return c;
}

}  // namespace

std::vector<double> gather_params(BranchNetwork& net) {
    std::vector<double> out;
    net.visit([&](const std::string&, Param& p) { append(out, p.value); });
    return out;
}

void scatter_params(BranchNetwork& net, std::span<const double> theta) {
    std::size_t pos = 0;
    net.visit([&](const std::string&, Param& p) {
        auto d = p.value.data();
        if (pos + d.size() > theta.size()) throw ShapeError("scatter_params: theta too short");
        std::copy_n(theta.begin() + static_cast<std::ptrdiff_t>(pos), d.size(), d.begin());
        pos += d.size();
    });
    if (pos != theta.size()) throw ShapeError("scatter_params: theta too long");
}

std::vector<double> gather_grads(BranchNetwork& net) {
    std::vector<double> out;
    net.visit([&](const std::string&, Param& p) { append(out, p.grad); });
    return out;
}

std::vector<bool> cancelled_mask(BranchNetwork& net) {
    std::vector<bool> out;
    net.visit([&](const std::string&, Param& p) { out.insert(out.end(), p.value.size(), p.cancelled_by_norm); });
    return out;
}

std::vector<GradCase> layer_grad_cases(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<GradCase> cases;
    cases.push_back(conv_case("conv 3x3", Shape{2, 5, 5, 3}, 4, 1, rng));
    cases.push_back(conv_case("conv 3x3 stride 2", Shape{2, 7, 7, 2}, 3, 2, rng));
    cases.push_back(batchnorm_case(rng));
    cases.push_back(leaky_relu_case(rng));
    cases.push_back(maxpool_case(rng));
    cases.push_back(sdu_case(rng));
    for (Direction dir : kAllDirections) cases.push_back(pool_case(dir, 6, rng));
    cases.push_back(spatial_norm_case(rng));
    return cases;
}

std::vector<GradCase> network_grad_cases(std::uint64_t seed) {
    std::vector<GradCase> cases;
    for (Direction dir : kAllDirections) {
        std::mt19937_64 rng = make_stream(seed, static_cast<std::uint64_t>(dir));
        const NetworkSpec spec = toy_profile(2, 16, 3);
        auto net = std::make_shared<BranchNetwork>(spec, dir);
        net->initialize(rng, 0.3);
        auto images = std::make_shared<Tensor4>(Shape{4, 16, 16, 3});
        std::uniform_real_distribution<double> pixel(0.0, 1.0);
        for (double& v : images->data()) v = pixel(rng);
        const std::vector<std::size_t> labels{0, 1, 2, 0};
        const double alpha = 0.005;

        GradCase c;
        c.name = std::string("toy network ") + direction_letter(dir);
        c.category = GradCategory::network;
        c.theta = gather_params(*net);
        c.problem.excluded = cancelled_mask(*net);
        c.problem.value = [net, images, labels, alpha](std::span<const double> theta) {
            scatter_params(*net, theta);
            const Tensor4 logits = net->logits(*images, Mode::train);
            return softmax_l2_loss(logits, labels, net->classifier().value, alpha).loss;
        };
        c.problem.gradient = [net, images, labels, alpha](std::span<const double> theta) {
            scatter_params(*net, theta);
            net->zero_grad();
            const Tensor4 logits = net->logits(*images, Mode::train);
            const LossResult loss = softmax_l2_loss(logits, labels, net->classifier().value, alpha);
            net->backward(loss.grad_logits);
            accumulate(net->classifier().grad, loss.grad_reg);
            return gather_grads(*net);
        };
        c.problem.regime = [net, images](std::span<const double> theta) {
            scatter_params(*net, theta);
            net->logits(*images, Mode::train);
            return net->regime();
        };
        cases.push_back(std::move(c));
    }
    return cases;
}

std::vector<GradSuiteResult> run_grad_suite(const std::vector<GradCase>& cases, std::size_t n_probes,
                                            std::uint64_t seed, std::optional<double> tolerance,
                                            std::ostream* os) {
    std::vector<GradSuiteResult> results;
    for (const GradCase& c : cases) {
        GradCheckOptions opts;
        opts.n_probes = n_probes;
        opts.step = c.step;
        opts.tolerance = tolerance.value_or(default_tolerance(c.category));
        opts.seed = seed;
        for (char ch : c.name) opts.seed = hash_combine(opts.seed, static_cast<unsigned char>(ch));
        GradSuiteResult r{c.name, c.category, opts.tolerance, check_gradients(c.problem, c.theta, opts)};
        if (os) print_report(*os, r.report, r.name.c_str());
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace qdfl
