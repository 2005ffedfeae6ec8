#include "qdfl/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace qdfl {

namespace {

Tensor4 row_vector(std::size_t c, double fill) { return Tensor4(Shape{1, 1, 1, c}, fill); }

void require_cached(bool cached, const char* layer) {
    if (!cached) throw StateError(std::string(layer) + ": backward called without a train-mode forward");
}

}  // namespace

std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value) {
    constexpr std::uint64_t kPrime = 1099511628211ull;
    for (int i = 0; i < 8; ++i) {
        seed ^= (value >> (8 * i)) & 0xffu;
        seed *= kPrime;
    }
    return seed;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

ConvParams ConvParams::zeros(std::size_t kernel, std::size_t c_in, std::size_t c_out, std::size_t stride,
                             std::size_t pad) {
    return ConvParams{Tensor4(Shape{kernel, kernel, c_in, c_out}), row_vector(c_out, 0.0), stride, pad};
}

std::size_t conv_output_size(std::size_t size, std::size_t kernel, std::size_t stride, std::size_t pad) {
    if (stride == 0) throw ShapeError("stride must be positive");
    if (size + 2 * pad < kernel) throw ShapeError("window larger than padded input");
    return (size + 2 * pad - kernel) / stride + 1;
}

Shape conv2d_output_shape(const Shape& input, const ConvParams& p) {
    return Shape{input.n, conv_output_size(input.h, p.kernel_h(), p.stride, p.pad),
                 conv_output_size(input.w, p.kernel_w(), p.stride, p.pad), p.out_channels()};
}

namespace {

struct KernelView {
    const Tensor4& weights;
    const Tensor4& biases;
    std::size_t stride;
    std::size_t pad;

    std::size_t kernel_h() const { return weights.shape().n; }
    std::size_t kernel_w() const { return weights.shape().h; }
    std::size_t in_channels() const { return weights.shape().w; }
    std::size_t out_channels() const { return weights.shape().c; }
};

Shape kernel_output_shape(const Shape& input, const KernelView& p) {
    return Shape{input.n, conv_output_size(input.h, p.kernel_h(), p.stride, p.pad),
                 conv_output_size(input.w, p.kernel_w(), p.stride, p.pad), p.out_channels()};
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Patch matrix of one sample: row (oy * ow + ox), column (ky, kx, ci).
// Cells that fall in the padding are zero.
void im2col(const double* src, const Shape& in, const Shape& os, const KernelView& p, std::size_t oy_begin,
            std::size_t oy_end, RowMatrix& cols) {
    const std::size_t kh = p.kernel_h(), kw = p.kernel_w(), cin = in.c;
    cols.resize(static_cast<Eigen::Index>((oy_end - oy_begin) * os.w), static_cast<Eigen::Index>(kh * kw * cin));
    for (std::size_t oy = oy_begin; oy < oy_end; ++oy) {
        for (std::size_t ox = 0; ox < os.w; ++ox) {
            double* row = cols.data() + ((oy - oy_begin) * os.w + ox) * kh * kw * cin;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) -
                                          static_cast<std::ptrdiff_t>(p.pad);
                const bool row_inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(in.h);
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) -
                                              static_cast<std::ptrdiff_t>(p.pad);
                    double* cell = row + (ky * kw + kx) * cin;
                    if (!row_inside || ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) {
                        std::fill_n(cell, cin, 0.0);
                        continue;
                    }
                    const double* s = src + (static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix)) * cin;
                    std::copy_n(s, cin, cell);
                }
            }
        }
    }
}

// Output rows per im2col band, keeping the patch matrix near 2M entries.
std::size_t band_rows(const Shape& os, std::size_t k) {
    constexpr std::size_t kBandEntries = std::size_t{1} << 21;
    return std::clamp<std::size_t>(kBandEntries / std::max<std::size_t>(1, os.w * k), 1, os.h);
}

// Adds the patch-matrix gradient back onto the sample's input gradient.
void col2im_add(const RowMatrix& cols, const Shape& in, const Shape& os, const KernelView& p, std::size_t oy_begin,
                std::size_t oy_end, double* dst) {
    const std::size_t kh = p.kernel_h(), kw = p.kernel_w(), cin = in.c;
    for (std::size_t oy = oy_begin; oy < oy_end; ++oy) {
        for (std::size_t ox = 0; ox < os.w; ++ox) {
            const double* row = cols.data() + ((oy - oy_begin) * os.w + ox) * kh * kw * cin;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) -
                                          static_cast<std::ptrdiff_t>(p.pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) -
                                              static_cast<std::ptrdiff_t>(p.pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
                    double* d = dst + (static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix)) * cin;
                    const double* g = row + (ky * kw + kx) * cin;
                    for (std::size_t ci = 0; ci < cin; ++ci) d[ci] += g[ci];
                }
            }
        }
    }
}

Tensor4 conv_forward_impl(const Tensor4& x, const KernelView& p) {
    const Shape& in = x.shape();
    if (in.c != p.in_channels()) {
        throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels, kernel expects " +
                         std::to_string(p.in_channels()));
    }
    if (p.biases.shape() != Shape{1, 1, 1, p.out_channels()}) throw ShapeError("conv2d: bias shape");
    const Shape os = kernel_output_shape(in, p);
    Tensor4 out(os);

    const auto k_rows = static_cast<Eigen::Index>(p.kernel_h() * p.kernel_w() * in.c);
    const auto cout = static_cast<Eigen::Index>(os.c);
    const ConstMatrixMap w(p.weights.data().data(), k_rows, cout);
    const Eigen::Map<const Eigen::RowVectorXd> b(p.biases.data().data(), cout);

    const std::size_t band = band_rows(os, static_cast<std::size_t>(k_rows));
    RowMatrix cols;
    for (std::size_t i = 0; i < os.n; ++i) {
        for (std::size_t y0 = 0; y0 < os.h; y0 += band) {
            const std::size_t y1 = std::min(os.h, y0 + band);
            im2col(x.data().data() + x.offset(i, 0, 0, 0), in, os, p, y0, y1, cols);
            MatrixMap o(out.data().data() + out.offset(i, y0, 0, 0), static_cast<Eigen::Index>((y1 - y0) * os.w), cout);
            o.noalias() = cols * w;
            o.rowwise() += b;
        }
    }
    return out;
}

ConvGradients conv_backward_impl(const Tensor4& grad_out, const Tensor4& x, const KernelView& p) {
    const Shape& in = x.shape();
    if (in.c != p.in_channels()) throw ShapeError("conv2d_backward: channel mismatch");
    const Shape os = kernel_output_shape(in, p);
    if (grad_out.shape() != os) {
        throw ShapeError("conv2d_backward: grad shape " + grad_out.shape().str() + " expected " + os.str());
    }
    ConvGradients g{Tensor4(in), Tensor4(p.weights.shape()), Tensor4(p.biases.shape())};

    const auto k_rows = static_cast<Eigen::Index>(p.kernel_h() * p.kernel_w() * in.c);
    const auto cout = static_cast<Eigen::Index>(os.c);
    const ConstMatrixMap w(p.weights.data().data(), k_rows, cout);
    MatrixMap gw(g.grad_weights.data().data(), k_rows, cout);
    double* gb = g.grad_biases.data().data();

    const std::size_t band = band_rows(os, static_cast<std::size_t>(k_rows));
    RowMatrix cols, grad_cols;
    for (std::size_t i = 0; i < os.n; ++i) {
        for (std::size_t y0 = 0; y0 < os.h; y0 += band) {
            const std::size_t y1 = std::min(os.h, y0 + band);
            const ConstMatrixMap go(grad_out.data().data() + grad_out.offset(i, y0, 0, 0),
                                    static_cast<Eigen::Index>((y1 - y0) * os.w), cout);
            im2col(x.data().data() + x.offset(i, 0, 0, 0), in, os, p, y0, y1, cols);
            gw.noalias() += cols.transpose() * go;
            // Plain loop: Eigen's vectorised reduction order depends on buffer alignment.
            for (Eigen::Index r = 0; r < go.rows(); ++r)
                for (Eigen::Index k = 0; k < cout; ++k) gb[k] += go(r, k);
            grad_cols.noalias() = go * w.transpose();
            col2im_add(grad_cols, in, os, p, y0, y1, g.grad_in.data().data() + g.grad_in.offset(i, 0, 0, 0));
        }
    }
    return g;
}

}  // namespace

Tensor4 conv2d_forward(const Tensor4& x, const ConvParams& p) {
    return conv_forward_impl(x, KernelView{p.weights, p.biases, p.stride, p.pad});
}

ConvGradients conv2d_backward(const Tensor4& grad_out, const Tensor4& x, const ConvParams& p) {
    return conv_backward_impl(grad_out, x, KernelView{p.weights, p.biases, p.stride, p.pad});
}

// ---------------------------------------------------------------------------
// Batch normalisation
// ---------------------------------------------------------------------------

BatchNormParams BatchNormParams::identity(std::size_t channels, double epsilon, double momentum) {
    return BatchNormParams{row_vector(channels, 1.0), row_vector(channels, 0.0), row_vector(channels, 0.0),
                           row_vector(channels, 1.0), epsilon, momentum};
}

Tensor4 batchnorm_forward(const Tensor4& x, BatchNormParams& p, Mode mode, BatchNormCache* cache) {
    const Shape& s = x.shape();
    const std::size_t c = s.c;
    if (c != p.channels()) throw ShapeError("batchnorm: channel count mismatch");
    if (!(p.epsilon > 0.0)) throw ConfigError("batchnorm: epsilon must be positive");
    const std::size_t samples = s.n * s.h * s.w;
    if (samples == 0) throw ShapeError("batchnorm: empty batch");

    const auto xd = x.data();
    const auto gamma = p.gamma.data();
    const auto beta = p.beta.data();
    std::vector<double> mean(c, 0.0), var(c, 0.0);

    if (mode == Mode::train) {
        for (std::size_t px = 0; px < samples; ++px)
            for (std::size_t k = 0; k < c; ++k) mean[k] += xd[px * c + k];
        for (double& m : mean) m /= static_cast<double>(samples);
        for (std::size_t px = 0; px < samples; ++px)
            for (std::size_t k = 0; k < c; ++k) {
                const double d = xd[px * c + k] - mean[k];
                var[k] += d * d;
            }
        for (double& v : var) v /= static_cast<double>(samples);

        auto rm = p.running_mean.data();
        auto rv = p.running_var.data();
        for (std::size_t k = 0; k < c; ++k) {
            rm[k] = (1.0 - p.momentum) * rm[k] + p.momentum * mean[k];
            rv[k] = (1.0 - p.momentum) * rv[k] + p.momentum * var[k];
        }
    } else {
        const auto rm = p.running_mean.data();
        const auto rv = p.running_var.data();
        for (std::size_t k = 0; k < c; ++k) {
            mean[k] = rm[k];
            var[k] = rv[k];
        }
    }

    std::vector<double> inv_std(c);
    for (std::size_t k = 0; k < c; ++k) inv_std[k] = 1.0 / std::sqrt(var[k] + p.epsilon);

    Tensor4 out(s);
    auto od = out.data();
    Tensor4 normalized;
    const bool keep = mode == Mode::train && cache != nullptr;
    if (keep) normalized = Tensor4(s);
    auto nd = normalized.data();
    for (std::size_t px = 0; px < samples; ++px) {
        for (std::size_t k = 0; k < c; ++k) {
            const std::size_t idx = px * c + k;
            const double xh = (xd[idx] - mean[k]) * inv_std[k];
            if (keep) nd[idx] = xh;
            od[idx] = gamma[k] * xh + beta[k];
        }
    }
    if (keep) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

BatchNormGradients batchnorm_backward(const Tensor4& grad_out, const BatchNormCache& cache,
                                      const BatchNormParams& p) {
    const Shape& s = cache.normalized.shape();
    if (grad_out.shape() != s) throw ShapeError("batchnorm_backward: grad shape mismatch");
    const std::size_t c = s.c;
    const std::size_t samples = s.n * s.h * s.w;
    const double m = static_cast<double>(samples);

    BatchNormGradients g{Tensor4(s), row_vector(c, 0.0), row_vector(c, 0.0)};
    const auto gd = grad_out.data();
    const auto xh = cache.normalized.data();
    const auto gamma = p.gamma.data();
    auto gg = g.grad_gamma.data();
    auto gb = g.grad_beta.data();

    for (std::size_t px = 0; px < samples; ++px)
        for (std::size_t k = 0; k < c; ++k) {
            gb[k] += gd[px * c + k];
            gg[k] += gd[px * c + k] * xh[px * c + k];
        }

    // dx = gamma * inv_std / m * (m * dy - sum(dy) - x_hat * sum(dy * x_hat))
    auto gi = g.grad_in.data();
    for (std::size_t px = 0; px < samples; ++px)
        for (std::size_t k = 0; k < c; ++k) {
            const std::size_t idx = px * c + k;
            gi[idx] = gamma[k] * cache.inv_std[k] / m * (m * gd[idx] - gb[k] - xh[idx] * gg[k]);
        }
    return g;
}

// ---------------------------------------------------------------------------
// Leaky ReLU
// ---------------------------------------------------------------------------

Tensor4 leaky_relu_forward(const Tensor4& x, double slope) {
    if (slope < 0.0) throw ConfigError("leaky_relu: slope must be non-negative");
    Tensor4 out(x.shape());
    auto o = out.data();
    const auto xd = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] > 0.0 ? xd[i] : slope * xd[i];
    return out;
}

Tensor4 leaky_relu_backward(const Tensor4& grad_out, const Tensor4& x, double slope) {
    if (grad_out.shape() != x.shape()) throw ShapeError("leaky_relu_backward: shape mismatch");
    Tensor4 out(x.shape());
    auto o = out.data();
    const auto xd = x.data();
    const auto g = grad_out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] > 0.0 ? g[i] : slope * g[i];
    return out;
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

Tensor4 maxpool_forward(const Tensor4& x, const PoolConfig& cfg, std::vector<std::size_t>* argmax) {
    const Shape& in = x.shape();
    const Shape os{in.n, conv_output_size(in.h, cfg.window, cfg.stride, cfg.pad),
                   conv_output_size(in.w, cfg.window, cfg.stride, cfg.pad), in.c};
    Tensor4 out(os);
    if (argmax) argmax->assign(out.size(), 0);
    const auto xd = x.data();
    auto od = out.data();
    std::vector<double> best(in.c);
    std::vector<std::size_t> where(in.c);

    for (std::size_t i = 0; i < os.n; ++i) {
        for (std::size_t oy = 0; oy < os.h; ++oy) {
            for (std::size_t ox = 0; ox < os.w; ++ox) {
                std::fill(best.begin(), best.end(), -std::numeric_limits<double>::infinity());
                bool any = false;
                for (std::size_t ky = 0; ky < cfg.window; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * cfg.stride + ky) -
                                              static_cast<std::ptrdiff_t>(cfg.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
                    for (std::size_t kx = 0; kx < cfg.window; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * cfg.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(cfg.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
                        const std::size_t base = x.offset(i, static_cast<std::size_t>(iy),
                                                          static_cast<std::size_t>(ix), 0);
                        for (std::size_t k = 0; k < in.c; ++k) {
                            // strict > keeps the first maximum in scan order
                            if (!any || xd[base + k] > best[k]) {
                                best[k] = xd[base + k];
                                where[k] = base + k;
                            }
                        }
                        any = true;
                    }
                }
                if (!any) throw ShapeError("maxpool: window covers only padding");
                const std::size_t ob = out.offset(i, oy, ox, 0);
                for (std::size_t k = 0; k < in.c; ++k) {
                    od[ob + k] = best[k];
                    if (argmax) (*argmax)[ob + k] = where[k];
                }
            }
        }
    }
    return out;
}

Tensor4 maxpool_backward(const Tensor4& grad_out, const Shape& input_shape,
                         const std::vector<std::size_t>& argmax) {
    if (grad_out.size() != argmax.size()) throw ShapeError("maxpool_backward: grad/argmax size mismatch");
    Tensor4 gin(input_shape);
    auto gi = gin.data();
    const auto g = grad_out.data();
    for (std::size_t j = 0; j < argmax.size(); ++j) {
        if (argmax[j] >= gi.size()) throw ShapeError("maxpool_backward: argmax outside input");
        gi[argmax[j]] += g[j];
    }
    return gin;
}

// ---------------------------------------------------------------------------
// Layer nodes
// ---------------------------------------------------------------------------

ConvLayer::ConvLayer(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride,
                     std::size_t pad)
    : weights_(Tensor4(Shape{kernel, kernel, c_in, c_out})),
      biases_(row_vector(c_out, 0.0)),
      stride_(stride),
      pad_(pad) {}

ConvParams ConvLayer::params() const { return ConvParams{weights_.value, biases_.value, stride_, pad_}; }

Tensor4 ConvLayer::forward(const Tensor4& x, Mode mode) {
    Tensor4 y = conv_forward_impl(x, KernelView{weights_.value, biases_.value, stride_, pad_});
    if (mode == Mode::train) {
        input_ = x;
    } else {
        input_.reset();
    }
    return y;
}

Tensor4 ConvLayer::backward(const Tensor4& grad_out) {
    require_cached(input_.has_value(), "conv");
    ConvGradients g =
        conv_backward_impl(grad_out, *input_, KernelView{weights_.value, biases_.value, stride_, pad_});
    accumulate(weights_.grad, g.grad_weights);
    accumulate(biases_.grad, g.grad_biases);
    return std::move(g.grad_in);
}

void ConvLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "weight", weights_);
    fn(prefix + "bias", biases_);
}

BatchNormLayer::BatchNormLayer(std::size_t channels, double epsilon, double momentum)
    : gamma_(row_vector(channels, 1.0)),
      beta_(row_vector(channels, 0.0)),
      running_mean_(row_vector(channels, 0.0)),
      running_var_(row_vector(channels, 1.0)),
      epsilon_(epsilon),
      momentum_(momentum) {}

BatchNormParams BatchNormLayer::snapshot() const {
    return BatchNormParams{gamma_.value, beta_.value, running_mean_, running_var_, epsilon_, momentum_};
}

Tensor4 BatchNormLayer::forward(const Tensor4& x, Mode mode) {
    BatchNormParams p = snapshot();
    if (mode == Mode::train) {
        BatchNormCache cache;
        Tensor4 y = batchnorm_forward(x, p, mode, &cache);
        cache_ = std::move(cache);
        running_mean_ = std::move(p.running_mean);
        running_var_ = std::move(p.running_var);
        return y;
    }
    cache_.reset();
    return batchnorm_forward(x, p, mode);
}

Tensor4 BatchNormLayer::backward(const Tensor4& grad_out) {
    require_cached(cache_.has_value(), "batchnorm");
    BatchNormGradients g = batchnorm_backward(grad_out, *cache_, snapshot());
    accumulate(gamma_.grad, g.grad_gamma);
    accumulate(beta_.grad, g.grad_beta);
    return std::move(g.grad_in);
}

void BatchNormLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "gamma", gamma_);
    fn(prefix + "beta", beta_);
}

void BatchNormLayer::visit_buffers(const std::string& prefix, const BufferVisitor& fn) {
    fn(prefix + "running_mean", running_mean_);
    fn(prefix + "running_var", running_var_);
}

LeakyReluLayer::LeakyReluLayer(double slope) : slope_(slope) {
    if (slope < 0.0) throw ConfigError("leaky_relu: slope must be non-negative");
}

Tensor4 LeakyReluLayer::forward(const Tensor4& x, Mode mode) {
    if (mode == Mode::train) {
        input_ = x;
    } else {
        input_.reset();
    }
    return leaky_relu_forward(x, slope_);
}

Tensor4 LeakyReluLayer::backward(const Tensor4& grad_out) {
    require_cached(input_.has_value(), "leaky_relu");
    return leaky_relu_backward(grad_out, *input_, slope_);
}

std::uint64_t LeakyReluLayer::regime() const {
    std::uint64_t h = 14695981039346656037ull;
    if (!input_) return h;
    std::uint64_t word = 0;
    std::size_t bits = 0;
    for (double v : input_->data()) {
        word = (word << 1) | (v > 0.0 ? 1u : 0u);
        if (++bits == 64) {
            h = hash_combine(h, word);
            word = 0;
            bits = 0;
        }
    }
    return hash_combine(hash_combine(h, word), bits);
}

MaxPoolLayer::MaxPoolLayer(PoolConfig cfg) : cfg_(cfg) {}

Tensor4 MaxPoolLayer::forward(const Tensor4& x, Mode mode) {
    if (mode == Mode::train) {
        input_shape_ = x.shape();
        cached_ = true;
        return maxpool_forward(x, cfg_, &argmax_);
    }
    cached_ = false;
    argmax_.clear();
    return maxpool_forward(x, cfg_);
}

Tensor4 MaxPoolLayer::backward(const Tensor4& grad_out) {
    require_cached(cached_, "maxpool");
    return maxpool_backward(grad_out, input_shape_, argmax_);
}

std::uint64_t MaxPoolLayer::regime() const {
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t a : argmax_) h = hash_combine(h, a);
    return h;
}

CblrBlock::CblrBlock(std::size_t c_in, std::size_t c_out, double slope, double bn_epsilon, double bn_momentum)
    : conv_(c_in, c_out), bn_(c_out, bn_epsilon, bn_momentum), act_(slope) {
    conv_.biases().cancelled_by_norm = true;
}

Tensor4 CblrBlock::forward(const Tensor4& x, Mode mode) {
    return act_.forward(bn_.forward(conv_.forward(x, mode), mode), mode);
}

Tensor4 CblrBlock::backward(const Tensor4& grad_out) {
    return conv_.backward(bn_.backward(act_.backward(grad_out)));
}

void CblrBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
    conv_.visit(prefix + "conv.", fn);
    bn_.visit(prefix + "bn.", fn);
}

void CblrBlock::visit_buffers(const std::string& prefix, const BufferVisitor& fn) {
    bn_.visit_buffers(prefix + "bn.", fn);
}

ShortDenseUnit::ShortDenseUnit(std::size_t c_in, std::size_t channels, double slope, double bn_epsilon,
                               double bn_momentum)
    : c_in_(c_in),
      channels_(channels),
      a_(c_in, channels, slope, bn_epsilon, bn_momentum),
      b_(c_in + channels, channels, slope, bn_epsilon, bn_momentum),
      c_(c_in + 2 * channels, channels, slope, bn_epsilon, bn_momentum) {}

CblrBlock& ShortDenseUnit::block(std::size_t i) {
    switch (i) {
        case 0: return a_;
        case 1: return b_;
        case 2: return c_;
        default: throw IndexError("SDU has three blocks");
    }
}

Tensor4 ShortDenseUnit::forward(const Tensor4& x, Mode mode) {
    if (x.shape().c != c_in_) {
        throw ShapeError("SDU: input has " + std::to_string(x.shape().c) + " channels, expected " +
                         std::to_string(c_in_));
    }
    Tensor4 y1 = a_.forward(x, mode);
    Tensor4 y2 = b_.forward(channel_concat({std::cref(x), std::cref(y1)}), mode);
    return c_.forward(channel_concat({std::cref(x), std::cref(y1), std::cref(y2)}), mode);
}

Tensor4 ShortDenseUnit::backward(const Tensor4& grad_out) {
    const Tensor4 g_cat2 = c_.backward(grad_out);
    Tensor4 gx = channel_slice(g_cat2, 0, c_in_);
    Tensor4 gy1 = channel_slice(g_cat2, c_in_, channels_);
    const Tensor4 gy2 = channel_slice(g_cat2, c_in_ + channels_, channels_);

    const Tensor4 g_cat1 = b_.backward(gy2);
    accumulate(gx, channel_slice(g_cat1, 0, c_in_));
    accumulate(gy1, channel_slice(g_cat1, c_in_, channels_));

    accumulate(gx, a_.backward(gy1));
    return gx;
}

void ShortDenseUnit::visit(const std::string& prefix, const ParamVisitor& fn) {
    a_.visit(prefix + "a.", fn);
    b_.visit(prefix + "b.", fn);
    c_.visit(prefix + "c.", fn);
}

void ShortDenseUnit::visit_buffers(const std::string& prefix, const BufferVisitor& fn) {
    a_.visit_buffers(prefix + "a.", fn);
    b_.visit_buffers(prefix + "b.", fn);
    c_.visit_buffers(prefix + "c.", fn);
}

std::uint64_t ShortDenseUnit::regime() const {
    return hash_combine(hash_combine(a_.regime(), b_.regime()), c_.regime());
}

}  // namespace qdfl
