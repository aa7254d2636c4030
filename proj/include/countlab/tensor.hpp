#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace countlab {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
    out << ']';
    return out.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major float64 array. Rank 0 is a scalar; rank 1 is read as a
/// single row when a primitive needs a matrix view.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
        if (shape_numel(shape_) != values_.size())
            throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match " +
                                        std::to_string(values_.size()) + " values");
    }

    static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor(Shape{rows, cols}, std::move(values));
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_, 0.0); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    std::size_t rows() const noexcept { return shape_.size() < 2 ? 1 : shape_[0]; }
    std::size_t cols() const noexcept {
        if (shape_.empty()) return 1;
        return shape_.size() == 1 ? shape_[0] : shape_[1];
    }

    double& operator[](std::size_t i) noexcept { return values_[i]; }
    double operator[](std::size_t i) const noexcept { return values_[i]; }
    double& at(std::size_t r, std::size_t c) noexcept { return values_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const noexcept { return values_[r * cols() + c]; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    std::vector<double>& storage() noexcept { return values_; }
    const std::vector<double>& storage() const noexcept { return values_; }

    double item() const {
        if (values_.size() != 1) throw std::invalid_argument("Tensor::item on shape " + shape_str(shape_));
        return values_[0];
    }

    bool all_finite() const noexcept {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double value) { std::fill(values_.begin(), values_.end(), value); }

    /// In-place this += other (shapes must match).
    void accumulate(const Tensor& other) {
        if (other.values_.size() != values_.size())
            throw std::invalid_argument("Tensor::accumulate: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
        for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> values_;
};

}  // namespace countlab
