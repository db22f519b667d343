#include "wsed/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace wsed {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            out << ",";
        }
        out << shape[i];
    }
    out << "]";
    return out.str();
}

namespace {

void require_positive_extents(const Shape& shape) {
    for (std::size_t e : shape) {
        if (e == 0) {
            throw std::invalid_argument("Tensor: zero extent in shape " + shape_to_string(shape));
        }
    }
    if (shape.empty()) {
        throw std::invalid_argument("Tensor: empty shape");
    }
}

}  // namespace

Tensor::Tensor(Shape s) : shape(std::move(s)) {
    require_positive_extents(shape);
    data.assign(shape_numel(shape), 0.0);
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
    require_positive_extents(shape);
    data.assign(shape_numel(shape), fill);
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    require_positive_extents(shape);
    if (data.size() != shape_numel(shape)) {
        throw std::invalid_argument("Tensor: " + std::to_string(data.size()) +
                                    " values do not fill shape " + shape_to_string(shape));
    }
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape.size()) {
        throw std::invalid_argument("Tensor::extent: axis " + std::to_string(axis) +
                                    " out of range for shape " + shape_to_string(shape));
    }
    return shape[axis];
}

bool Tensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) {
    std::fill(data.begin(), data.end(), v);
}

}  // namespace wsed
