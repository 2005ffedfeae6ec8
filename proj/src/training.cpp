#include "qdfl/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <set>

namespace qdfl {

void TrainConfig::validate() const {
    if (alpha < 0.0) throw ConfigError("alpha must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (lr_initial < 0.0 || lr_min < 0.0) throw ConfigError("learning rates must be non-negative");
    if (lr_min > lr_initial) throw ConfigError("lr_min must not exceed lr_initial");
    if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0) throw ConfigError("lr_decay_factor must be in (0, 1]");
    if (batch_size < 4 || batch_size % 4 != 0) throw ConfigError("batch_size must be a positive multiple of 4");
    if (rotation_range < 0.0) throw ConfigError("rotation_range must be non-negative");
    if (mirror_probability < 0.0 || mirror_probability > 1.0) throw ConfigError("mirror_probability must be in [0, 1]");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
    if (convergence_window == 0) throw ConfigError("convergence_window must be positive");
}

std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x51d7u};
    return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

LossResult softmax_l2_loss(const Tensor4& logits, std::span<const std::size_t> labels, const Tensor4& weights,
                           double alpha) {
    const Shape& s = logits.shape();
    const std::size_t k_rows = s.n;
    const std::size_t classes = s.h * s.w * s.c;
    if (labels.size() != k_rows) throw ShapeError("softmax_l2_loss: label count does not match logits rows");
    if (weights.shape().c != classes) throw ShapeError("softmax_l2_loss: classifier width does not match logits");

    LossResult r;
    r.grad_logits = Tensor4(Shape{k_rows, 1, 1, classes});
    const auto z = logits.data();
    auto g = r.grad_logits.data();
    const double inv_k = 1.0 / static_cast<double>(k_rows);
    double total = 0.0;
    for (std::size_t i = 0; i < k_rows; ++i) {
        if (labels[i] >= classes) {
            throw DataError("softmax_l2_loss: label " + std::to_string(labels[i]) + " outside [0, " +
                            std::to_string(classes) + ")");
        }
        const double* row = z.data() + i * classes;
        double peak = row[0];
        for (std::size_t c = 0; c < classes; ++c) {
            if (!std::isfinite(row[c])) throw DivergenceError("softmax_l2_loss: non-finite logit", 0);
            peak = std::max(peak, row[c]);
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - peak);
        const double log_norm = peak + std::log(sum);
        total += log_norm - row[labels[i]];
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = std::exp(row[c] - log_norm);
            g[i * classes + c] = (p - (c == labels[i] ? 1.0 : 0.0)) * inv_k;
        }
    }
    r.data_loss = total * inv_k;
    r.loss = r.data_loss + 0.5 * alpha * squared_norm(weights);
    r.grad_reg = scale(weights, alpha);
    return r;
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

OptimizerState::OptimizerState(const TrainConfig& cfg)
    : lr(cfg.lr_initial), recent_losses(2 * cfg.convergence_window, 0.0) {}

void sgd_momentum_update(Tensor4& param, const Tensor4& grad, Tensor4& velocity, double lr, double momentum,
                         std::size_t step) {
    if (param.shape() != grad.shape() || param.shape() != velocity.shape()) {
        throw ShapeError("sgd: parameter/gradient/velocity shapes differ");
    }
    const auto g = grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i])) {
            throw DivergenceError("non-finite gradient at element " + std::to_string(i) + " in step " +
                                      std::to_string(step),
                                  step);
        }
    }
    auto p = param.data();
    auto v = velocity.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum * v[i] - lr * g[i];
        p[i] += v[i];
    }
}

void sgd_momentum_step(BranchNetwork& net, OptimizerState& state, const TrainConfig& cfg) {
    net.visit([&](const std::string& name, Param& p) {
        auto it = state.velocity.find(name);
        if (it == state.velocity.end()) it = state.velocity.emplace(name, Tensor4(p.value.shape())).first;
        sgd_momentum_update(p.value, p.grad, it->second, state.lr, cfg.momentum, state.step);
    });
    ++state.step;
}

double decayed_lr(double lr, const TrainConfig& cfg) {
    return std::max(lr * cfg.lr_decay_factor, cfg.lr_min);
}

double lr_schedule_step(OptimizerState& state, const TrainConfig& cfg, double loss) {
    const std::size_t cap = state.recent_losses.size();
    state.recent_losses[state.ring_head] = loss;
    state.ring_head = (state.ring_head + 1) % cap;
    state.ring_count = std::min(state.ring_count + 1, cap);
    if (state.ring_count < cap) return state.lr;

    // ring_head now points at the oldest entry.
    const std::size_t w = cfg.convergence_window;
    double older = 0.0, newer = 0.0;
    for (std::size_t i = 0; i < w; ++i) older += state.recent_losses[(state.ring_head + i) % cap];
    for (std::size_t i = w; i < cap; ++i) newer += state.recent_losses[(state.ring_head + i) % cap];
    older /= static_cast<double>(w);
    newer /= static_cast<double>(w);
    const double improvement = older > 0.0 ? (older - newer) / older : 0.0;
    if (improvement < cfg.convergence_threshold) {
        state.lr = decayed_lr(state.lr, cfg);
        state.ring_count = 0;
        state.ring_head = 0;
    }
    return state.lr;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

TrainingSet make_training_set(const Manifest& manifest, const std::function<Tensor4(const Record&)>& load) {
    const auto recs = manifest.with_role(Role::train);
    std::set<std::string> ids;
    for (const Record* r : recs) ids.insert(r->vehicle_id);
    TrainingSet set;
    set.class_names.assign(ids.begin(), ids.end());
    for (const Record* r : recs) {
        const auto it = std::lower_bound(set.class_names.begin(), set.class_names.end(), r->vehicle_id);
        set.labels.push_back(static_cast<std::size_t>(it - set.class_names.begin()));
        set.images.push_back(load(*r));
    }
    return set;
}

Batch sample_batch(std::span<const std::size_t> labels, std::size_t batch_size, std::mt19937_64& rng) {
    if (batch_size < 4 || batch_size % 4 != 0) throw ConfigError("batch_size must be a positive multiple of 4");
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    std::vector<std::size_t> classes, multi;
    for (const auto& [c, members] : by_class) {
        classes.push_back(c);
        if (members.size() >= 2) multi.push_back(c);
    }
    if (classes.size() < 2) throw DataError("sample_batch: need at least two identities for negative pairs");
    if (multi.empty()) throw DataError("sample_batch: need an identity with two images for positive pairs");

    auto uniform = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

    Batch b;
    b.positive_pairs = batch_size / 4;
    b.negative_pairs = batch_size / 4;
    for (std::size_t p = 0; p < b.positive_pairs; ++p) {
        const auto& members = by_class[multi[uniform(multi.size())]];
        const std::size_t first = uniform(members.size());
        std::size_t second = uniform(members.size() - 1);
        if (second >= first) ++second;
        b.indices.push_back(members[first]);
        b.indices.push_back(members[second]);
    }
    for (std::size_t p = 0; p < b.negative_pairs; ++p) {
        const std::size_t first = uniform(classes.size());
        std::size_t second = uniform(classes.size() - 1);
        if (second >= first) ++second;
        const auto& ma = by_class[classes[first]];
        const auto& mb = by_class[classes[second]];
        b.indices.push_back(ma[uniform(ma.size())]);
        b.indices.push_back(mb[uniform(mb.size())]);
    }
    for (std::size_t i : b.indices) b.labels.push_back(labels[i]);
    return b;
}

Tensor4 mirror_horizontal(const Tensor4& image) {
    const Shape& s = image.shape();
    Tensor4 out(s);
    const auto src = image.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x = 0; x < s.w; ++x)
                std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(image.offset(i, y, s.w - 1 - x, 0)), s.c,
                            dst.begin() + static_cast<std::ptrdiff_t>(out.offset(i, y, x, 0)));
    return out;
}

Tensor4 augment_with(const Tensor4& image, bool mirror, double theta_degrees) {
    const Tensor4 src = mirror ? mirror_horizontal(image) : image;
    if (theta_degrees == 0.0) return src;
    const Shape& s = src.shape();
    Tensor4 out(s);
    const double theta = theta_degrees * std::numbers::pi / 180.0;
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    const double cx = (static_cast<double>(s.w) - 1.0) / 2.0;
    const double cy = (static_cast<double>(s.h) - 1.0) / 2.0;
    const auto sd = src.data();
    auto od = out.data();
    auto clamp_index = [](double v, std::size_t n) {
        return std::clamp(v, 0.0, static_cast<double>(n) - 1.0);
    };
    for (std::size_t i = 0; i < s.n; ++i) {
        for (std::size_t y = 0; y < s.h; ++y) {
            for (std::size_t x = 0; x < s.w; ++x) {
                // Inverse map: output point rotated by -theta lands on its source.
                const double dx = static_cast<double>(x) - cx;
                const double dy = static_cast<double>(y) - cy;
                const double sx = clamp_index(cx + cos_t * dx + sin_t * dy, s.w);
                const double sy = clamp_index(cy - sin_t * dx + cos_t * dy, s.h);
                const auto x0 = static_cast<std::size_t>(std::floor(sx));
                const auto y0 = static_cast<std::size_t>(std::floor(sy));
                const std::size_t x1 = std::min(x0 + 1, s.w - 1);
                const std::size_t y1 = std::min(y0 + 1, s.h - 1);
                const double fx = sx - static_cast<double>(x0);
                const double fy = sy - static_cast<double>(y0);
                double* o = od.data() + out.offset(i, y, x, 0);
                for (std::size_t k = 0; k < s.c; ++k) {
                    const double top = (1 - fx) * sd[src.offset(i, y0, x0, k)] + fx * sd[src.offset(i, y0, x1, k)];
                    const double bot = (1 - fx) * sd[src.offset(i, y1, x0, k)] + fx * sd[src.offset(i, y1, x1, k)];
                    o[k] = (1 - fy) * top + fy * bot;
                }
            }
        }
    }
    return out;
}

Tensor4 augment(const Tensor4& image, std::mt19937_64& rng, const TrainConfig& cfg) {
    std::bernoulli_distribution flip(cfg.mirror_probability);
    std::uniform_real_distribution<double> angle(-cfg.rotation_range, cfg.rotation_range);
    const bool mirror = flip(rng);
    const double theta = cfg.rotation_range > 0.0 ? angle(rng) : 0.0;
    return augment_with(image, mirror, theta);
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

std::vector<TraceRow> train_branch(BranchNetwork& net, const TrainingSet& data, const TrainConfig& cfg,
                                   std::mt19937_64& rng, const TraceCallback& on_step) {
    cfg.validate();
    if (data.images.empty()) throw DataError("train: empty training set");
    if (net.num_classes() != data.class_names.size()) {
        throw ConfigError("train: network has " + std::to_string(net.num_classes()) + " classes, data has " +
                          std::to_string(data.class_names.size()));
    }
    OptimizerState state(cfg);
    std::vector<TraceRow> trace;
    trace.reserve(cfg.steps);
    const char letter = direction_letter(net.direction());

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const Batch batch = sample_batch(data.labels, cfg.batch_size, rng);
        std::vector<Tensor4> images;
        images.reserve(batch.indices.size());
        for (std::size_t idx : batch.indices) images.push_back(augment(data.images[idx], rng, cfg));
        std::vector<TensorRef> refs(images.begin(), images.end());
        const Tensor4 x = batch_concat(refs);

        net.zero_grad();
        const Tensor4 logits = net.logits(x, Mode::train);
        LossResult loss = softmax_l2_loss(logits, batch.labels, net.classifier().value, cfg.alpha);
        if (!std::isfinite(loss.loss)) {
            throw DivergenceError("non-finite loss in branch " + std::string(1, letter) + " at step " +
                                      std::to_string(step),
                                  step);
        }
        net.backward(loss.grad_logits);
        accumulate(net.classifier().grad, loss.grad_reg);

        const double lr_used = state.lr;
        try {
            sgd_momentum_step(net, state, cfg);
        } catch (const DivergenceError& e) {
            throw DivergenceError(std::string("branch ") + letter + ": " + e.what(), step);
        }
        lr_schedule_step(state, cfg, loss.loss);

        TraceRow row{letter, step, lr_used, loss.loss};
        trace.push_back(row);
        if (on_step) on_step(row);
    }
    return trace;
}

TrainResult train(const TrainingSet& data, NetworkSpec spec, const TrainConfig& cfg, const TraceCallback& on_step) {
    cfg.validate();
    spec.num_classes = data.class_names.size();
    TrainResult result{QdModel(spec), {}, {}};
    for (std::size_t b = 0; b < result.model.branches.size(); ++b) {
        BranchNetwork& net = result.model.branches[b];
        std::mt19937_64 rng = make_stream(cfg.seed, b);
        net.initialize(rng, cfg.init_std);
        auto rows = train_branch(net, data, cfg, rng, on_step);
        if (!rows.empty()) result.final_loss[rows.back().branch] = rows.back().loss;
        result.trace.insert(result.trace.end(), rows.begin(), rows.end());
    }
    return result;
}

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
    const auto flags = os.flags();
    os << "branch,step,lr,loss\n" << std::setprecision(17);
    for (const TraceRow& r : trace) os << r.branch << ',' << r.step << ',' << r.lr << ',' << r.loss << '\n';
    os.flags(flags);
}

}  // namespace qdfl
