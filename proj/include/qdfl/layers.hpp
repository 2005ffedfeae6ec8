#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qdfl/tensor.hpp"

namespace qdfl {

/// train: batch statistics, activations cached for backward.
/// eval: running statistics, nothing cached (backward is rejected).
enum class Mode { train, eval };

/// A trainable tensor and its accumulated gradient.
struct Param {
    Tensor4 value;
    Tensor4 grad;
    /// Set when the parameter feeds a train-mode batch norm that subtracts
    /// it back out (conv bias before BN); its true gradient is identically 0.
    bool cancelled_by_norm = false;

    Param() = default;
    explicit Param(Tensor4 v) : value(std::move(v)), grad(value.shape()) {}
    void zero_grad() { grad.fill(0.0); }
};

using ParamVisitor = std::function<void(const std::string& name, Param& param)>;
using BufferVisitor = std::function<void(const std::string& name, Tensor4& buffer)>;

// ---------------------------------------------------------------------------
// Functional core
// ---------------------------------------------------------------------------

/// weights are (kh, kw, c_in, c_out); biases (1, 1, 1, c_out).
struct ConvParams {
    Tensor4 weights;
    Tensor4 biases;
    std::size_t stride = 1;
    std::size_t pad = 1;

    static ConvParams zeros(std::size_t kernel, std::size_t c_in, std::size_t c_out,
                            std::size_t stride = 1, std::size_t pad = 1);

    std::size_t kernel_h() const { return weights.shape().n; }
    std::size_t kernel_w() const { return weights.shape().h; }
    std::size_t in_channels() const { return weights.shape().w; }
    std::size_t out_channels() const { return weights.shape().c; }
};

/// floor((size + 2 pad - kernel) / stride) + 1; ShapeError if the window never fits.
std::size_t conv_output_size(std::size_t size, std::size_t kernel, std::size_t stride, std::size_t pad);

Shape conv2d_output_shape(const Shape& input, const ConvParams& p);

Tensor4 conv2d_forward(const Tensor4& x, const ConvParams& p);

struct ConvGradients {
    Tensor4 grad_in;
    Tensor4 grad_weights;
    Tensor4 grad_biases;
};

ConvGradients conv2d_backward(const Tensor4& grad_out, const Tensor4& x, const ConvParams& p);

struct BatchNormParams {
    Tensor4 gamma;  // (1,1,1,c)
    Tensor4 beta;
    Tensor4 running_mean;
    Tensor4 running_var;
    double epsilon = 1e-5;
    double momentum = 0.1;

    static BatchNormParams identity(std::size_t channels, double epsilon = 1e-5, double momentum = 0.1);
    std::size_t channels() const { return gamma.shape().c; }
};

/// What batchnorm backward needs from the train-mode forward.
struct BatchNormCache {
    Tensor4 normalized;              // x-hat
    std::vector<double> inv_std;     // per channel
};

/// Train mode normalises with biased batch statistics over n*h*w samples per
/// channel and updates the running statistics; eval mode uses running stats.
Tensor4 batchnorm_forward(const Tensor4& x, BatchNormParams& p, Mode mode,
                          BatchNormCache* cache = nullptr);

struct BatchNormGradients {
    Tensor4 grad_in;
    Tensor4 grad_gamma;
    Tensor4 grad_beta;
};

BatchNormGradients batchnorm_backward(const Tensor4& grad_out, const BatchNormCache& cache,
                                      const BatchNormParams& p);

/// x for x > 0, slope * x otherwise (x == 0 takes the slope branch).
Tensor4 leaky_relu_forward(const Tensor4& x, double slope);
Tensor4 leaky_relu_backward(const Tensor4& grad_out, const Tensor4& x, double slope);

struct PoolConfig {
    std::size_t window = 3;
    std::size_t stride = 2;
    std::size_t pad = 1;

    friend bool operator==(const PoolConfig&, const PoolConfig&) = default;
};

/// Max pooling; padded cells never win. argmax receives, for every output
/// element, the flat input offset it was taken from (first maximum in
/// row-major scan order).
Tensor4 maxpool_forward(const Tensor4& x, const PoolConfig& cfg, std::vector<std::size_t>* argmax = nullptr);
Tensor4 maxpool_backward(const Tensor4& grad_out, const Shape& input_shape,
                         const std::vector<std::size_t>& argmax);

// ---------------------------------------------------------------------------
// Layer nodes: parameters + forward cache
// ---------------------------------------------------------------------------

class ConvLayer {
public:
    ConvLayer() = default;
    ConvLayer(std::size_t c_in, std::size_t c_out, std::size_t kernel = 3, std::size_t stride = 1,
              std::size_t pad = 1);

    Tensor4 forward(const Tensor4& x, Mode mode);
    Tensor4 backward(const Tensor4& grad_out);

    ConvParams params() const;
    Param& weights() { return weights_; }
    Param& biases() { return biases_; }
    std::size_t in_channels() const { return weights_.value.shape().w; }
    std::size_t out_channels() const { return weights_.value.shape().c; }

    void visit(const std::string& prefix, const ParamVisitor& fn);

private:
    Param weights_;
    Param biases_;
    std::size_t stride_ = 1;
    std::size_t pad_ = 1;
    std::optional<Tensor4> input_;
};

class BatchNormLayer {
public:
    BatchNormLayer() = default;
    explicit BatchNormLayer(std::size_t channels, double epsilon = 1e-5, double momentum = 0.1);

    Tensor4 forward(const Tensor4& x, Mode mode);
    Tensor4 backward(const Tensor4& grad_out);

    Param& gamma() { return gamma_; }
    Param& beta() { return beta_; }
    Tensor4& running_mean() { return running_mean_; }
    Tensor4& running_var() { return running_var_; }

    void visit(const std::string& prefix, const ParamVisitor& fn);
    void visit_buffers(const std::string& prefix, const BufferVisitor& fn);

private:
    BatchNormParams snapshot() const;

    Param gamma_;
    Param beta_;
    Tensor4 running_mean_;
    Tensor4 running_var_;
    double epsilon_ = 1e-5;
    double momentum_ = 0.1;
    std::optional<BatchNormCache> cache_;
};

class LeakyReluLayer {
public:
    explicit LeakyReluLayer(double slope = 0.0);

    Tensor4 forward(const Tensor4& x, Mode mode);
    Tensor4 backward(const Tensor4& grad_out);
    double slope() const { return slope_; }

    /// Hash of the sign pattern of the last train-mode input.
    std::uint64_t regime() const;

private:
    double slope_;
    std::optional<Tensor4> input_;
};

class MaxPoolLayer {
public:
    explicit MaxPoolLayer(PoolConfig cfg = {});

    Tensor4 forward(const Tensor4& x, Mode mode);
    Tensor4 backward(const Tensor4& grad_out);

    /// Hash of the argmax routing of the last train-mode forward.
    std::uint64_t regime() const;

private:
    PoolConfig cfg_;
    Shape input_shape_;
    std::vector<std::size_t> argmax_;
    bool cached_ = false;
};

/// Conv -> BatchNorm -> LeakyReLU.
class CblrBlock {
public:
    CblrBlock() = default;
    CblrBlock(std::size_t c_in, std::size_t c_out, double slope, double bn_epsilon = 1e-5,
              double bn_momentum = 0.1);

    Tensor4 forward(const Tensor4& x, Mode mode);
    Tensor4 backward(const Tensor4& grad_out);

    ConvLayer& conv() { return conv_; }
    BatchNormLayer& bn() { return bn_; }
    LeakyReluLayer& act() { return act_; }
    std::size_t out_channels() const { return conv_.out_channels(); }

    void visit(const std::string& prefix, const ParamVisitor& fn);
    void visit_buffers(const std::string& prefix, const BufferVisitor& fn);
    std::uint64_t regime() const { return act_.regime(); }

private:
    ConvLayer conv_;
    BatchNormLayer bn_;
    LeakyReluLayer act_;
};

/**
 * Short and dense unit: three CBLR blocks with two channel concatenations.
 *
 *     y1   = a(x)
 *     y2   = b(concat(x, y1))
 *     out  = c(concat(x, y1, y2))
 *
 * Every block outputs `channels`; the concatenations carry c_in + channels
 * and c_in + 2 * channels.
 */
class ShortDenseUnit {
public:
    ShortDenseUnit() = default;
    ShortDenseUnit(std::size_t c_in, std::size_t channels, double slope, double bn_epsilon = 1e-5,
                   double bn_momentum = 0.1);

    Tensor4 forward(const Tensor4& x, Mode mode);
    Tensor4 backward(const Tensor4& grad_out);

    std::size_t in_channels() const { return c_in_; }
    std::size_t out_channels() const { return channels_; }
    CblrBlock& block(std::size_t i);

    void visit(const std::string& prefix, const ParamVisitor& fn);
    void visit_buffers(const std::string& prefix, const BufferVisitor& fn);
    std::uint64_t regime() const;

private:
    std::size_t c_in_ = 0;
    std::size_t channels_ = 0;
    CblrBlock a_;
    CblrBlock b_;
    CblrBlock c_;
};

/// FNV-1a style mixing for regime fingerprints.
std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value);

}  // namespace qdfl
