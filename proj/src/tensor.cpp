#include "qdfl/tensor.hpp"

#include <fstream>
#include <limits>
#include <new>
#include <sstream>

#include "qdfl/binary_io.hpp"

namespace qdfl {

namespace {

constexpr char kTensorMagic[4] = {'Q', 'D', 'T', '1'};

std::vector<double> allocate(std::size_t count, double fill) {
    try {
        return std::vector<double>(count, fill);
    } catch (const std::bad_alloc&) {
        throw AllocationError("cannot allocate tensor of " + std::to_string(count) + " elements");
    } catch (const std::length_error&) {
        throw AllocationError("cannot allocate tensor of " + std::to_string(count) + " elements");
    }
}

void require_same_shape(const Tensor4& a, const Tensor4& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                         b.shape().str());
    }
}

}  // namespace

std::size_t Shape::count() const {
    if (n == 0 || h == 0 || w == 0 || c == 0) throw ShapeError("zero dim in shape " + str());
    constexpr auto kMax = std::numeric_limits<std::size_t>::max();
    std::size_t total = n;
    for (std::size_t d : {h, w, c}) {
        if (total > kMax / d) throw ShapeError("shape " + str() + " overflows the index type");
        total *= d;
    }
    return total;
}

std::string Shape::str() const {
    std::ostringstream os;
    os << '(' << n << ',' << h << ',' << w << ',' << c << ')';
    return os.str();
}

Tensor4::Tensor4() : Tensor4(Shape{}) {}

Tensor4::Tensor4(Shape shape) : Tensor4(shape, 0.0) {}

Tensor4::Tensor4(Shape shape, double fill) : shape_(shape), data_(allocate(shape.count(), fill)) {}

Tensor4::Tensor4(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.count()) {
        throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " +
                         shape_.str());
    }
}

void Tensor4::check_index(std::size_t i, std::size_t y, std::size_t x, std::size_t k) const {
    if (i >= shape_.n || y >= shape_.h || x >= shape_.w || k >= shape_.c) {
        std::ostringstream os;
        os << "index (" << i << ',' << y << ',' << x << ',' << k << ") out of range for shape "
           << shape_.str();
        throw IndexError(os.str());
    }
}

double& Tensor4::at(std::size_t i, std::size_t y, std::size_t x, std::size_t k) {
    check_index(i, y, x, k);
    return data_[offset(i, y, x, k)];
}

double Tensor4::at(std::size_t i, std::size_t y, std::size_t x, std::size_t k) const {
    check_index(i, y, x, k);
    return data_[offset(i, y, x, k)];
}

double& Tensor4::flat(std::size_t index) {
    if (index >= data_.size()) throw IndexError("flat index out of range");
    return data_[index];
}

double Tensor4::flat(std::size_t index) const {
    if (index >= data_.size()) throw IndexError("flat index out of range");
    return data_[index];
}

void Tensor4::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor4 zeros(const Shape& shape) { return Tensor4(shape); }

Tensor4 elementwise(BinaryOp op, const Tensor4& a, const Tensor4& b) {
    require_same_shape(a, b, "elementwise");
    Tensor4 out(a.shape());
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    switch (op) {
        case BinaryOp::add:
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
            break;
        case BinaryOp::sub:
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
            break;
        case BinaryOp::mul:
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
            break;
    }
    return out;
}

Tensor4 scale(const Tensor4& a, double factor) {
    Tensor4 out(a.shape());
    auto o = out.data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
    return out;
}

void accumulate(Tensor4& a, const Tensor4& b) {
    require_same_shape(a, b, "accumulate");
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

double dot(const Tensor4& a, const Tensor4& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

double squared_norm(const Tensor4& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return s;
}

Tensor4 channel_concat(const std::vector<TensorRef>& parts) {
    if (parts.empty()) throw ShapeError("channel_concat: no parts");
    const Shape& first = parts.front().get().shape();
    std::size_t channels = 0;
    for (const Tensor4& p : parts) {
        const Shape& s = p.shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw ShapeError("channel_concat: spatial/batch mismatch " + first.str() + " vs " + s.str());
        }
        channels += s.c;
    }
    Tensor4 out(Shape{first.n, first.h, first.w, channels});
    const std::size_t pixels = first.n * first.h * first.w;
    auto dst = out.data();
    std::size_t band = 0;
    for (const Tensor4& p : parts) {
        const std::size_t pc = p.shape().c;
        auto src = p.data();
        for (std::size_t px = 0; px < pixels; ++px) {
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(px * pc), pc,
                        dst.begin() + static_cast<std::ptrdiff_t>(px * channels + band));
        }
        band += pc;
    }
    return out;
}

Tensor4 channel_slice(const Tensor4& t, std::size_t first, std::size_t count) {
    const Shape& s = t.shape();
    if (count == 0 || first + count > s.c) {
        throw ShapeError("channel_slice: band [" + std::to_string(first) + ", " +
                         std::to_string(first + count) + ") outside " + s.str());
    }
    Tensor4 out(Shape{s.n, s.h, s.w, count});
    const std::size_t pixels = s.n * s.h * s.w;
    auto src = t.data();
    auto dst = out.data();
    for (std::size_t px = 0; px < pixels; ++px) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(px * s.c + first), count,
                    dst.begin() + static_cast<std::ptrdiff_t>(px * count));
    }
    return out;
}

Tensor4 batch_slice(const Tensor4& t, std::size_t first, std::size_t count) {
    const Shape& s = t.shape();
    if (count == 0 || first + count > s.n) throw ShapeError("batch_slice: range outside " + s.str());
    const std::size_t per = s.h * s.w * s.c;
    std::vector<double> values(t.data().begin() + static_cast<std::ptrdiff_t>(first * per),
                               t.data().begin() + static_cast<std::ptrdiff_t>((first + count) * per));
    return Tensor4(Shape{count, s.h, s.w, s.c}, std::move(values));
}

Tensor4 batch_concat(const std::vector<TensorRef>& parts) {
    if (parts.empty()) throw ShapeError("batch_concat: no parts");
    const Shape& first = parts.front().get().shape();
    std::size_t n = 0;
    for (const Tensor4& p : parts) {
        const Shape& s = p.shape();
        if (s.h != first.h || s.w != first.w || s.c != first.c) {
            throw ShapeError("batch_concat: mismatch " + first.str() + " vs " + s.str());
        }
        n += s.n;
    }
    std::vector<double> values;
    values.reserve(n * first.h * first.w * first.c);
    for (const Tensor4& p : parts) values.insert(values.end(), p.data().begin(), p.data().end());
    return Tensor4(Shape{n, first.h, first.w, first.c}, std::move(values));
}

void write_tensor(std::ostream& out, const Tensor4& t) {
    out.write(kTensorMagic, 4);
    const Shape& s = t.shape();
    for (std::size_t d : {s.n, s.h, s.w, s.c}) binary::put_u64(out, d);
    for (double v : t.data()) binary::put_f64(out, v);
    if (!out) throw Error("failed writing tensor");
}

Tensor4 read_tensor(std::istream& in) {
    char magic[4] = {};
    binary::read_exact(in, magic, 4);
    if (!std::equal(magic, magic + 4, kTensorMagic)) throw FormatError("not a QDT1 tensor");
    Shape s;
    s.n = binary::get_u64(in);
    s.h = binary::get_u64(in);
    s.w = binary::get_u64(in);
    s.c = binary::get_u64(in);
    const std::size_t count = s.count();
    std::vector<double> values(count);
    for (double& v : values) v = binary::get_f64(in);
    return Tensor4(s, std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor4& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write_tensor(out, t);
}

Tensor4 load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return read_tensor(in);
}

}  // namespace qdfl
