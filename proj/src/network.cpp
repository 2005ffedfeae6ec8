#include "qdfl/network.hpp"

#include <cmath>

namespace qdfl {

BranchSet BranchSet::all() {
    BranchSet s;
    for (Direction d : kAllDirections) s.insert(d);
    return s;
}

BranchSet BranchSet::parse(const std::string& letters) {
    BranchSet s;
    for (char c : letters) {
        if (c == ' ' || c == ',') continue;
        s.insert(direction_from_letter(c));
    }
    if (s.empty()) throw ConfigError("branch set is empty");
    return s;
}

BranchSet BranchSet::from_mask(std::uint8_t mask) {
    if (mask == 0 || mask > 0x0f) throw FormatError("invalid branch mask");
    BranchSet s;
    s.mask_ = mask;
    return s;
}

std::vector<Direction> BranchSet::directions() const {
    std::vector<Direction> out;
    for (Direction d : kAllDirections)
        if (contains(d)) out.push_back(d);
    return out;
}

std::string BranchSet::str() const {
    std::string s;
    for (Direction d : directions()) s.push_back(direction_letter(d));
    return s;
}

std::size_t NetworkSpec::final_size() const {
    std::size_t s = input_size;
    for (std::size_t i = 0; i < stages.size(); ++i) s = conv_output_size(s, pool.window, pool.stride, pool.pad);
    return s;
}

std::size_t NetworkSpec::final_channels() const {
    return stages.empty() ? stem_channels : stages.back().channels;
}

std::size_t NetworkSpec::branch_dim(Direction dir) const {
    return directional_length(dir, final_size()) * final_channels();
}

std::size_t NetworkSpec::descriptor_length() const {
    std::size_t total = 0;
    for (Direction d : branches.directions()) total += branch_dim(d);
    return total;
}

void NetworkSpec::validate() const {
    if (input_size == 0 || input_channels == 0 || stem_channels == 0) throw ConfigError("network spec: zero size");
    if (stages.empty()) throw ConfigError("network spec: at least one stage is required");
    for (const StageSpec& st : stages) {
        if (st.channels == 0) throw ConfigError("network spec: stage with zero channels");
        if (st.slope < 0.0) throw ConfigError("network spec: negative leaky slope");
    }
    if (branches.empty()) throw ConfigError("network spec: no branches enabled");
    if (sn_window < 1) throw ConfigError("network spec: sn_window must be >= 1");
    if (!(bn_epsilon > 0.0)) throw ConfigError("network spec: bn epsilon must be positive");
    (void)final_size();
}

NetworkSpec table1_profile(std::size_t num_classes) {
    NetworkSpec spec;
    spec.profile = Profile::table1;
    spec.input_size = 128;
    spec.stem_channels = 64;
    spec.stem_slope = 0.15;
    spec.stages = {{64, 0.15}, {128, 0.15}, {192, 0.15}, {256, 0.15}, {320, 0.0}};
    spec.num_classes = num_classes;
    return spec;
}

NetworkSpec toy_profile(std::size_t seed_channels, std::size_t input_d, std::size_t num_classes) {
    if (seed_channels == 0) throw ConfigError("toy profile: seed_channels must be positive");
    const PoolConfig pool;
    std::size_t stages = 0;
    std::size_t size = input_d;
    while (true) {
        const std::size_t next = conv_output_size(size, pool.window, pool.stride, pool.pad);
        if (next < 4) break;
        size = next;
        ++stages;
    }
    if (stages == 0) {
        throw ConfigError("toy profile: input " + std::to_string(input_d) +
                          " cannot be pooled once while keeping a final map of at least 4x4");
    }
    NetworkSpec spec;
    spec.profile = Profile::toy;
    spec.input_size = input_d;
    spec.stem_channels = seed_channels;
    spec.stem_slope = 0.15;
    for (std::size_t k = 1; k <= stages; ++k) spec.stages.push_back({seed_channels * k, k == stages ? 0.0 : 0.15});
    spec.num_classes = num_classes;
    return spec;
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

Backbone::Backbone(const NetworkSpec& spec)
    : stem_(spec.input_channels, spec.stem_channels, spec.stem_slope, spec.bn_epsilon, spec.bn_momentum) {
    spec.validate();
    std::size_t c = spec.stem_channels;
    for (const StageSpec& st : spec.stages) {
        units_.emplace_back(c, st.channels, st.slope, spec.bn_epsilon, spec.bn_momentum);
        pools_.emplace_back(spec.pool);
        c = st.channels;
    }
}

Tensor4 Backbone::forward(const Tensor4& x, Mode mode, std::vector<ShapeTrace>* trace) {
    Tensor4 h = stem_.forward(x, mode);
    if (trace) trace->push_back({"Conv0", h.shape()});
    for (std::size_t i = 0; i < units_.size(); ++i) {
        h = units_[i].forward(h, mode);
        if (trace) trace->push_back({"SDU" + std::to_string(i + 1), h.shape()});
        h = pools_[i].forward(h, mode);
        if (trace) trace->push_back({"MP" + std::to_string(i + 1), h.shape()});
    }
    return h;
}

Tensor4 Backbone::backward(const Tensor4& grad_out) {
    Tensor4 g = grad_out;
    for (std::size_t i = units_.size(); i-- > 0;) {
        g = pools_[i].backward(g);
        g = units_[i].backward(g);
    }
    return stem_.backward(g);
}

void Backbone::visit(const std::string& prefix, const ParamVisitor& fn) {
    stem_.visit(prefix + "stem.", fn);
    for (std::size_t i = 0; i < units_.size(); ++i) units_[i].visit(prefix + "sdu" + std::to_string(i + 1) + ".", fn);
}

void Backbone::visit_buffers(const std::string& prefix, const BufferVisitor& fn) {
    stem_.visit_buffers(prefix + "stem.", fn);
    for (std::size_t i = 0; i < units_.size(); ++i)
        units_[i].visit_buffers(prefix + "sdu" + std::to_string(i + 1) + ".", fn);
}

std::uint64_t Backbone::regime() const {
    std::uint64_t h = stem_.regime();
    for (std::size_t i = 0; i < units_.size(); ++i) {
        h = hash_combine(h, units_[i].regime());
        h = hash_combine(h, pools_[i].regime());
    }
    return h;
}

// ---------------------------------------------------------------------------
// Descriptors
// ---------------------------------------------------------------------------

std::vector<double> flatten_sample(const DirectionalMap& m, std::size_t sample) {
    const Shape& s = m.values.shape();
    if (sample >= s.n) throw IndexError("flatten_sample: sample out of range");
    const std::size_t per = s.h * s.w * s.c;
    const auto d = m.values.data();
    return std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(sample * per),
                               d.begin() + static_cast<std::ptrdiff_t>((sample + 1) * per));
}

std::vector<double> Descriptor::segment(Direction dir) const {
    for (const DescriptorSegment& seg : segments) {
        if (seg.direction == dir) {
            return std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(seg.offset),
                                       values.begin() + static_cast<std::ptrdiff_t>(seg.offset + seg.length));
        }
    }
    throw DataError(std::string("descriptor has no ") + std::string(direction_name(dir)) + " segment");
}

namespace {

void l2_normalize(std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    if (s <= 0.0) return;
    const double inv = 1.0 / std::sqrt(s);
    for (double& x : v) x *= inv;
}

void append_segment(Descriptor& desc, Direction dir, const std::vector<double>& part) {
    desc.segments.push_back({dir, desc.values.size(), part.size()});
    desc.values.insert(desc.values.end(), part.begin(), part.end());
}

}  // namespace

std::vector<Descriptor> assemble_descriptors(const Tensor4& backbone_out, const BranchSet& branches,
                                             std::size_t sn_window, bool normalize) {
    if (branches.empty()) throw ConfigError("assemble_descriptors: no branches");
    const Shape& s = backbone_out.shape();
    std::vector<Descriptor> out(s.n);
    for (Descriptor& d : out) {
        d.d = s.h;
        d.c = s.c;
    }
    for (Direction dir : branches.directions()) {
        const DirectionalMap z = spatial_norm_forward(directional_pool(backbone_out, dir), sn_window);
        for (std::size_t i = 0; i < s.n; ++i) append_segment(out[i], dir, flatten_sample(z, i));
    }
    if (normalize)
        for (Descriptor& d : out) l2_normalize(d.values);
    return out;
}

// ---------------------------------------------------------------------------
// Branch network
// ---------------------------------------------------------------------------

Tensor4 classifier_forward(const Tensor4& features, const Tensor4& weights) {
    const Shape& fs = features.shape();
    const Shape& ws = weights.shape();
    const std::size_t dim = fs.h * fs.w * fs.c;
    if (ws.n != 1 || ws.h != 1 || ws.w != dim) {
        throw ShapeError("classifier: weights " + ws.str() + " do not match feature dim " + std::to_string(dim));
    }
    const std::size_t classes = ws.c;
    Tensor4 out(Shape{fs.n, 1, 1, classes});
    const auto f = features.data();
    const auto w = weights.data();
    auto o = out.data();
    for (std::size_t i = 0; i < fs.n; ++i) {
        double* row = o.data() + i * classes;
        const double* fi = f.data() + i * dim;
        for (std::size_t j = 0; j < dim; ++j) {
            const double v = fi[j];
            const double* wr = w.data() + j * classes;
            for (std::size_t k = 0; k < classes; ++k) row[k] += v * wr[k];
        }
    }
    return out;
}

BranchNetwork::BranchNetwork(const NetworkSpec& spec, Direction dir)
    : spec_(spec), dir_(dir), backbone_(spec), plan_(PoolPlan(dir, spec.final_size())) {
    if (spec.num_classes > 0) classifier_ = Param(Tensor4(Shape{1, 1, spec.branch_dim(dir), spec.num_classes}));
}

std::size_t BranchNetwork::feature_dim() const { return spec_.branch_dim(dir_); }

Tensor4 BranchNetwork::prepare_input(const Tensor4& images) const {
    const Shape& s = images.shape();
    if (s.h != spec_.input_size || s.w != spec_.input_size || s.c != spec_.input_channels) {
        throw ShapeError("branch network expects (n," + std::to_string(spec_.input_size) + "," +
                         std::to_string(spec_.input_size) + "," + std::to_string(spec_.input_channels) +
                         ") input, got " + s.str());
    }
    if (!spec_.center_input) return images;
    Tensor4 centered(s);
    auto dst = centered.data();
    const auto src = images.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i] - 0.5;
    return centered;
}

DirectionalMap BranchNetwork::features(const Tensor4& images, Mode mode) {
    const Tensor4 x = prepare_input(images);
    const Tensor4 h = backbone_.forward(x, mode);
    const DirectionalMap pooled = directional_pool(h, *plan_);
    if (mode == Mode::train) return spatial_norm_forward(pooled, spec_.sn_window, &sn_cache_);
    return spatial_norm_forward(pooled, spec_.sn_window);
}

Tensor4 BranchNetwork::logits(const Tensor4& images, Mode mode) {
    if (num_classes() == 0) throw ConfigError("branch network was built without a classifier");
    const DirectionalMap z = features(images, mode);
    const Shape& s = z.values.shape();
    Tensor4 flat(Shape{s.n, 1, 1, s.h * s.w * s.c}, z.values.values());
    Tensor4 out = classifier_forward(flat, classifier_.value);
    if (mode == Mode::train) {
        feature_cache_ = std::move(flat);
    } else {
        feature_cache_.reset();
    }
    return out;
}

Tensor4 BranchNetwork::backward(const Tensor4& grad_logits) {
    if (!feature_cache_) throw StateError("branch network: backward called without a train-mode forward");
    const Tensor4& f = *feature_cache_;
    const std::size_t n = f.shape().n;
    const std::size_t dim = f.shape().c;
    const std::size_t classes = num_classes();
    if (grad_logits.shape() != Shape{n, 1, 1, classes}) throw ShapeError("branch network: grad_logits shape");

    const auto fd = f.data();
    const auto gd = grad_logits.data();
    const auto w = classifier_.value.data();
    auto gw = classifier_.grad.data();

    Tensor4 grad_feat(sn_cache_.input.shape());
    auto gf = grad_feat.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* gi = gd.data() + i * classes;
        const double* fi = fd.data() + i * dim;
        for (std::size_t j = 0; j < dim; ++j) {
            const double* wr = w.data() + j * classes;
            double* gwr = gw.data() + j * classes;
            double acc = 0.0;
            for (std::size_t k = 0; k < classes; ++k) {
                gwr[k] += fi[j] * gi[k];
                acc += wr[k] * gi[k];
            }
            gf[i * dim + j] = acc;
        }
    }

    const DirectionalMap g_sn{dir_, std::move(grad_feat), spec_.final_size()};
    const DirectionalMap g_pool = spatial_norm_backward(g_sn, sn_cache_);
    const Tensor4 g_backbone = directional_backward(g_pool, *plan_);
    return backbone_.backward(g_backbone);
}

void BranchNetwork::visit(const ParamVisitor& fn) {
    backbone_.visit("backbone.", fn);
    if (num_classes() > 0) fn("classifier.weight", classifier_);
}

void BranchNetwork::visit_buffers(const BufferVisitor& fn) { backbone_.visit_buffers("backbone.", fn); }

void BranchNetwork::zero_grad() {
    visit([](const std::string&, Param& p) { p.zero_grad(); });
}

std::uint64_t BranchNetwork::regime() const { return backbone_.regime(); }

std::size_t BranchNetwork::parameter_count() {
    std::size_t total = 0;
    visit([&](const std::string&, Param& p) { total += p.value.size(); });
    return total;
}

void BranchNetwork::initialize(std::mt19937_64& rng, double std) {
    std::normal_distribution<double> normal(0.0, std);
    visit([&](const std::string& name, Param& p) {
        auto ends_with = [&](std::string_view suffix) {
            return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        if (ends_with("weight")) {
            for (double& v : p.value.data()) v = normal(rng);
        } else if (ends_with("gamma")) {
            p.value.fill(1.0);
        } else {
            p.value.fill(0.0);
        }
        p.zero_grad();
    });
    visit_buffers([](const std::string& name, Tensor4& b) {
        b.fill(name.ends_with("running_var") ? 1.0 : 0.0);
    });
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

QdModel::QdModel(const NetworkSpec& s) : spec(s) {
    spec.validate();
    for (Direction d : spec.branches.directions()) branches.emplace_back(spec, d);
}

BranchNetwork& QdModel::branch(Direction dir) {
    for (BranchNetwork& b : branches)
        if (b.direction() == dir) return b;
    throw DataError(std::string("model has no ") + std::string(direction_name(dir)) + " branch");
}

std::vector<Descriptor> QdModel::extract(const Tensor4& images) {
    const std::size_t n = images.shape().n;
    std::vector<Descriptor> out(n);
    for (Descriptor& d : out) {
        d.d = spec.final_size();
        d.c = spec.final_channels();
    }
    for (BranchNetwork& b : branches) {
        const DirectionalMap z = b.features(images, Mode::eval);
        for (std::size_t i = 0; i < n; ++i) append_segment(out[i], b.direction(), flatten_sample(z, i));
    }
    if (spec.normalize_descriptor)
        for (Descriptor& d : out) l2_normalize(d.values);
    return out;
}

}  // namespace qdfl
