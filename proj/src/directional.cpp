#include "qdfl/directional.hpp"

#include <cmath>

namespace qdfl {

char direction_letter(Direction d) {
    switch (d) {
        case Direction::horizontal: return 'H';
        case Direction::vertical: return 'V';
        case Direction::diagonal: return 'D';
        case Direction::anti_diagonal: return 'A';
    }
    return '?';
}

Direction direction_from_letter(char c) {
    switch (c) {
        case 'H': case 'h': return Direction::horizontal;
        case 'V': case 'v': return Direction::vertical;
        case 'D': case 'd': return Direction::diagonal;
        case 'A': case 'a': return Direction::anti_diagonal;
        default: throw ConfigError(std::string("unknown direction '") + c + "'");
    }
}

std::string_view direction_name(Direction d) {
    switch (d) {
        case Direction::horizontal: return "horizontal";
        case Direction::vertical: return "vertical";
        case Direction::diagonal: return "diagonal";
        case Direction::anti_diagonal: return "anti-diagonal";
    }
    return "?";
}

std::size_t directional_length(Direction dir, std::size_t d) {
    if (d == 0) throw ShapeError("directional pooling needs d >= 1");
    return (dir == Direction::horizontal || dir == Direction::vertical) ? d : 2 * d - 1;
}

PoolPlan::PoolPlan(Direction dir, std::size_t d)
    : dir_(dir), d_(d), groups_(directional_length(dir, d)), slot_(d * d) {
    for (std::size_t y = 0; y < d; ++y) {
        for (std::size_t x = 0; x < d; ++x) {
            std::size_t t = 0;
            switch (dir) {
                case Direction::horizontal: t = y; break;
                case Direction::vertical: t = x; break;
                case Direction::diagonal: t = (d - 1) + y - x; break;
                case Direction::anti_diagonal: t = x + y; break;
            }
            groups_[t].push_back(y * d + x);
            slot_[y * d + x] = t;
        }
    }
}

namespace {

std::size_t require_square(const Tensor4& x) {
    const Shape& s = x.shape();
    if (s.h != s.w) throw ShapeError("directional pooling needs a square map, got " + s.str());
    return s.h;
}

}  // namespace

DirectionalMap directional_pool(const Tensor4& x, const PoolPlan& plan) {
    const std::size_t d = require_square(x);
    if (d != plan.source_d()) throw ShapeError("pool plan built for a different map size");
    const Shape& s = x.shape();
    const std::size_t len = plan.length();
    Tensor4 out(Shape{s.n, len, 1, s.c});
    const auto xd = x.data();
    auto od = out.data();
    for (std::size_t i = 0; i < s.n; ++i) {
        for (std::size_t t = 0; t < len; ++t) {
            double* o = od.data() + out.offset(i, t, 0, 0);
            const auto& group = plan.group(t);
            for (std::size_t p : group) {
                const double* src = xd.data() + x.offset(i, p / d, p % d, 0);
                for (std::size_t k = 0; k < s.c; ++k) o[k] += src[k];
            }
            const double inv = 1.0 / static_cast<double>(group.size());
            for (std::size_t k = 0; k < s.c; ++k) o[k] *= inv;
        }
    }
    return DirectionalMap{plan.direction(), std::move(out), d};
}

DirectionalMap directional_pool(const Tensor4& x, Direction dir) {
    return directional_pool(x, PoolPlan(dir, require_square(x)));
}

DirectionalMap hap_forward(const Tensor4& x) { return directional_pool(x, Direction::horizontal); }
DirectionalMap vap_forward(const Tensor4& x) { return directional_pool(x, Direction::vertical); }
DirectionalMap dap_forward(const Tensor4& x) { return directional_pool(x, Direction::diagonal); }
DirectionalMap aap_forward(const Tensor4& x) { return directional_pool(x, Direction::anti_diagonal); }

Tensor4 directional_backward(const DirectionalMap& grad_out, const PoolPlan& plan) {
    const Shape& gs = grad_out.values.shape();
    if (gs.h != plan.length() || gs.w != 1) {
        throw ShapeError("directional_backward: grad shape " + gs.str() + " does not match plan length " +
                         std::to_string(plan.length()));
    }
    if (grad_out.direction != plan.direction()) throw ShapeError("directional_backward: direction mismatch");
    const std::size_t d = plan.source_d();
    Tensor4 gin(Shape{gs.n, d, d, gs.c});
    const auto gd = grad_out.values.data();
    auto gi = gin.data();
    for (std::size_t i = 0; i < gs.n; ++i) {
        for (std::size_t t = 0; t < plan.length(); ++t) {
            const double* g = gd.data() + grad_out.values.offset(i, t, 0, 0);
            const double inv = 1.0 / static_cast<double>(plan.divisor(t));
            for (std::size_t p : plan.group(t)) {
                double* dst = gi.data() + gin.offset(i, p / d, p % d, 0);
                for (std::size_t k = 0; k < gs.c; ++k) dst[k] = g[k] * inv;
            }
        }
    }
    return gin;
}

Window sn_window(std::size_t j, std::size_t length, std::size_t window) {
    if (window < 1) throw ConfigError("spatial norm window must be >= 1");
    if (j >= length) throw IndexError("spatial norm position out of range");
    const std::size_t before = (window - 1) / 2;
    const std::size_t after = window - 1 - before;
    return Window{j >= before ? j - before : 0, std::min(length - 1, j + after)};
}

DirectionalMap spatial_norm_forward(const DirectionalMap& p, std::size_t window, SpatialNormCache* cache) {
    if (window < 1) throw ConfigError("spatial norm window must be >= 1");
    const Shape& s = p.values.shape();
    const std::size_t len = s.h * s.w;  // (n, L, 1, c)
    Tensor4 out(s);
    Tensor4 denom(s);
    const auto pd = p.values.data();
    auto od = out.data();
    auto dd = denom.data();
    const std::size_t c = s.c;

    for (std::size_t i = 0; i < s.n; ++i) {
        const std::size_t base = i * len * c;
        for (std::size_t j = 0; j < len; ++j) {
            const Window win = sn_window(j, len, window);
            for (std::size_t k = 0; k < c; ++k) {
                double energy = 0.0;
                for (std::size_t l = win.first; l <= win.last; ++l) {
                    const double v = pd[base + l * c + k];
                    energy += v * v;
                }
                const double sj = std::sqrt(1.0 + energy);
                dd[base + j * c + k] = sj;
                od[base + j * c + k] = pd[base + j * c + k] / sj;
            }
        }
    }
    if (cache) {
        cache->input = p.values;
        cache->output = out;
        cache->denom = std::move(denom);
        cache->window = window;
    }
    return DirectionalMap{p.direction, std::move(out), p.source_d};
}

DirectionalMap spatial_norm_backward(const DirectionalMap& grad_out, const SpatialNormCache& cache) {
    const Shape& s = cache.input.shape();
    if (grad_out.values.shape() != s) throw ShapeError("spatial_norm_backward: grad shape mismatch");
    const std::size_t len = s.h * s.w;
    const std::size_t c = s.c;
    const auto g = grad_out.values.data();
    const auto pd = cache.input.data();
    const auto zd = cache.output.data();
    const auto sd = cache.denom.data();

    Tensor4 gin(s);
    auto gi = gin.data();
    for (std::size_t i = 0; i < s.n; ++i) {
        const std::size_t base = i * len * c;
        for (std::size_t m = 0; m < len; ++m) {
            for (std::size_t k = 0; k < c; ++k) {
                const std::size_t im = base + m * c + k;
                gi[im] = g[im] / sd[im];
            }
        }
        // Scatter the second-order term through each forward window.
        for (std::size_t j = 0; j < len; ++j) {
            const Window win = sn_window(j, len, cache.window);
            for (std::size_t k = 0; k < c; ++k) {
                const std::size_t ij = base + j * c + k;
                const double coeff = g[ij] * zd[ij] / (sd[ij] * sd[ij]);
                if (coeff == 0.0) continue;
                for (std::size_t l = win.first; l <= win.last; ++l) {
                    const std::size_t il = base + l * c + k;
                    gi[il] -= pd[il] * coeff;
                }
            }
        }
    }
    return DirectionalMap{grad_out.direction, std::move(gin), grad_out.source_d};
}

}  // namespace qdfl
