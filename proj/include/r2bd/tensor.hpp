#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace r2bd {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Value semantics; copies are deep.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor(Shape{1}, v); }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// Same data, new shape of equal element count.
    Tensor reshaped(Shape shape) const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    /// Slice along the leading dimension: rows [begin, begin + count).
    Tensor rows(int begin, int count) const;
    /// Element `i` of the leading dimension with that dimension dropped.
    Tensor item(int i) const { return rows(i, 1).squeeze_leading(); }
    Tensor squeeze_leading() const;
    Tensor with_leading_one() const;

    void fill(double v);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s);

    bool all_finite() const;
    double sum() const;
    double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }
    double max_abs() const;

private:
    Shape shape_;
    std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);
Tensor abs(const Tensor& t);
/// Stacks equally shaped tensors along a new leading dimension.
Tensor stack(const std::vector<Tensor>& items);
/// Concatenates along the leading dimension.
Tensor concat_rows(const std::vector<Tensor>& items);
/// Rounds every element through float32 (storage precision of on-disk arrays).
Tensor round_to_float(const Tensor& t);

}  // namespace r2bd
