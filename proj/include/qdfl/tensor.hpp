#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "qdfl/errors.hpp"

namespace qdfl {

/// Dims of a rank-4 tensor: batch, height, width, channels.
struct Shape {
    std::size_t n = 1;
    std::size_t h = 1;
    std::size_t w = 1;
    std::size_t c = 1;

    /// Number of elements; throws ShapeError on zero dims or index overflow.
    std::size_t count() const;
    std::string str() const;

    friend bool operator==(const Shape&, const Shape&) = default;
};

/**
 * Dense rank-4 array of doubles.
 *
 * Layout is NHWC with channels fastest:
 *
 *     offset(i, y, x, k) = ((i * h + y) * w + x) * c + k
 *
 * Every module goes through offset() or at(), so this is the only place the
 * layout is defined. Lower-rank values are embedded with size-1 dims, e.g. a
 * bias vector is (1, 1, 1, c) and a conv kernel is (kh, kw, c_in, c_out).
 */
class Tensor4 {
public:
    Tensor4();
    explicit Tensor4(Shape shape);
    Tensor4(Shape shape, std::vector<double> values);
    Tensor4(Shape shape, double fill);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::size_t offset(std::size_t i, std::size_t y, std::size_t x, std::size_t k) const noexcept {
        return ((i * shape_.h + y) * shape_.w + x) * shape_.c + k;
    }

    /// Bounds-checked element access; throws IndexError.
    double& at(std::size_t i, std::size_t y, std::size_t x, std::size_t k);
    double at(std::size_t i, std::size_t y, std::size_t x, std::size_t k) const;

    /// Bounds-checked flat access.
    double& flat(std::size_t index);
    double flat(std::size_t index) const;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    void fill(double value);

    friend bool operator==(const Tensor4&, const Tensor4&) = default;

private:
    void check_index(std::size_t i, std::size_t y, std::size_t x, std::size_t k) const;

    Shape shape_;
    std::vector<double> data_;
};

Tensor4 zeros(const Shape& shape);

enum class BinaryOp { add, sub, mul };

/// out[i] = op(a[i], b[i]); shapes must match exactly.
Tensor4 elementwise(BinaryOp op, const Tensor4& a, const Tensor4& b);
Tensor4 scale(const Tensor4& a, double factor);

inline Tensor4 add(const Tensor4& a, const Tensor4& b) { return elementwise(BinaryOp::add, a, b); }
inline Tensor4 sub(const Tensor4& a, const Tensor4& b) { return elementwise(BinaryOp::sub, a, b); }
inline Tensor4 mul(const Tensor4& a, const Tensor4& b) { return elementwise(BinaryOp::mul, a, b); }

/// a += b in place (same shape).
void accumulate(Tensor4& a, const Tensor4& b);

double dot(const Tensor4& a, const Tensor4& b);
double squared_norm(const Tensor4& a);

using TensorRef = std::reference_wrapper<const Tensor4>;

/// Stacks parts along the channel axis in order; n, h, w must agree.
Tensor4 channel_concat(const std::vector<TensorRef>& parts);

/// Channels [first, first + count) of t.
Tensor4 channel_slice(const Tensor4& t, std::size_t first, std::size_t count);

/// Samples [first, first + count) of t.
Tensor4 batch_slice(const Tensor4& t, std::size_t first, std::size_t count);

/// Stacks parts along the batch axis; h, w, c must agree.
Tensor4 batch_concat(const std::vector<TensorRef>& parts);

// QDT1 binary format: "QDT1", four u64 LE dims (n, h, w, c), then n*h*w*c f64 LE.
void write_tensor(std::ostream& out, const Tensor4& t);
Tensor4 read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor4& t);
Tensor4 load_tensor(const std::filesystem::path& path);

}  // namespace qdfl
