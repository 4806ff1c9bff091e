#include "fedcspc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "fedcspc/error.hpp"

namespace fedcspc {

namespace {

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
    if (element_count(shape_) != data_.size()) {
        throw DimensionError("shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                             " values");
    }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
    auto n = element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
        if (r.size() != cols) throw DimensionError("ragged matrix literal");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
}

Tensor Tensor::row(std::vector<double> values) {
    auto n = values.size();
    return Tensor({1, n}, std::move(values));
}

std::size_t Tensor::rows() const {
    if (rank() == 2) return shape_[0];
    if (rank() <= 1) return 1;
    throw DimensionError("rows() on tensor of shape " + shape_string(shape_));
}

std::size_t Tensor::cols() const {
    if (rank() == 2) return shape_[1];
    if (rank() == 1) return shape_[0];
    if (rank() == 0) return 1;
    throw DimensionError("cols() on tensor of shape " + shape_string(shape_));
}

double Tensor::item() const {
    if (!is_scalar()) throw DimensionError("item() on non-scalar tensor of shape " + shape_string(shape_));
    return data_[0];
}

std::span<const double> Tensor::row_span(std::size_t r) const {
    auto c = cols();
    return std::span<const double>(data_).subspan(r * c, c);
}

std::vector<double> Tensor::row_vector(std::size_t r) const {
    auto s = row_span(r);
    return {s.begin(), s.end()};
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor stack_rows(std::span<const std::vector<double>> rows) {
    if (rows.empty()) throw DimensionError("stack_rows of zero rows");
    std::size_t cols = rows.front().size();
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        if (r.size() != cols) throw DimensionError("stack_rows: ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor::matrix(rows.size(), cols, std::move(data));
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> indices) {
    if (indices.empty()) throw DimensionError("gather_rows with no indices");
    std::size_t cols = m.cols();
    std::vector<double> data;
    data.reserve(indices.size() * cols);
    for (auto i : indices) {
        if (i >= m.rows()) throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range");
        auto r = m.row_span(i);
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor::matrix(indices.size(), cols, std::move(data));
}

}  // namespace fedcspc
