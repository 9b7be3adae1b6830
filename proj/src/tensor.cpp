#include "r2bd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "r2bd/error.hpp"
#include "r2bd/rng.hpp"

namespace r2bd {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        require(d >= 0, "negative dimension in shape " + shape_string(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_size(shape_),
            "tensor data size " + std::to_string(data_.size()) + " does not match shape " + shape_string(shape_));
}

Tensor Tensor::reshaped(Shape shape) const {
    require(shape_size(shape) == data_.size(),
            "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::rows(int begin, int count) const {
    require(!shape_.empty(), "rows() on a rank-0 tensor");
    require(begin >= 0 && count >= 0 && begin + count <= shape_[0], "row slice out of range");
    const std::size_t stride = shape_[0] == 0 ? 0 : data_.size() / static_cast<std::size_t>(shape_[0]);
    Shape s = shape_;
    s[0] = count;
    std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(stride * begin),
                            data_.begin() + static_cast<std::ptrdiff_t>(stride * (begin + count)));
    return Tensor(std::move(s), std::move(out));
}

Tensor Tensor::squeeze_leading() const {
    require(!shape_.empty() && shape_[0] == 1, "squeeze_leading needs a leading dimension of 1");
    return Tensor(Shape(shape_.begin() + 1, shape_.end()), data_);
}

Tensor Tensor::with_leading_one() const {
    Shape s{1};
    s.insert(s.end(), shape_.begin(), shape_.end());
    return Tensor(std::move(s), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
    require(same_shape(other), "shape mismatch in += : " + shape_string(shape_) + " vs " + shape_string(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    require(same_shape(other), "shape mismatch in -= : " + shape_string(shape_) + " vs " + shape_string(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

Tensor abs(const Tensor& t) {
    Tensor out = t;
    for (double& v : out.storage()) v = std::abs(v);
    return out;
}

Tensor stack(const std::vector<Tensor>& items) {
    require(!items.empty(), "stack of zero tensors");
    Shape s{static_cast<int>(items.size())};
    s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
    std::vector<double> data;
    data.reserve(shape_size(s));
    for (const auto& t : items) {
        require(t.same_shape(items[0]), "stack of differently shaped tensors");
        data.insert(data.end(), t.storage().begin(), t.storage().end());
    }
    return Tensor(std::move(s), std::move(data));
}

Tensor concat_rows(const std::vector<Tensor>& items) {
    require(!items.empty(), "concat of zero tensors");
    Shape s = items[0].shape();
    int rows = 0;
    std::vector<double> data;
    for (const auto& t : items) {
        require(t.ndim() == static_cast<int>(s.size()) && std::equal(s.begin() + 1, s.end(), t.shape().begin() + 1),
                "concat_rows of incompatible shapes");
        rows += t.dim(0);
        data.insert(data.end(), t.storage().begin(), t.storage().end());
    }
    s[0] = rows;
    return Tensor(std::move(s), std::move(data));
}

Tensor round_to_float(const Tensor& t) {
    Tensor out = t;
    for (double& v : out.storage()) v = static_cast<double>(static_cast<float>(v));
    return out;
}

// ---------------------------------------------------------------------------

std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) { return mix_seed(seed ^ mix_seed(fnv1a(name))); }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) { return mix_seed(mix_seed(seed) + index); }

Tensor Rng::normal_tensor(const Shape& shape, double stddev) {
    Tensor t(shape);
    for (double& v : t.storage()) v = normal(0.0, stddev);
    return t;
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi) {
    Tensor t(shape);
    for (double& v : t.storage()) v = uniform(lo, hi);
    return t;
}

}  // namespace r2bd
