#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "chemmap/common.hpp"

namespace chemmap {

/// Dense row-major array of doubles with up to four dimensions. The optional
/// gradient buffer, when allocated, always matches the value shape.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;

    Tensor() = default;
    explicit Tensor(std::vector<int> dims, double fill = 0.0) : shape(std::move(dims)) {
        if (shape.empty() || shape.size() > 4) throw ShapeError("tensor rank must be in [1, 4]");
        for (int d : shape)
            if (d <= 0) throw ShapeError("tensor dimensions must be positive");
        values.assign(element_count(shape), fill);
    }

    static std::size_t element_count(const std::vector<int>& dims) {
        return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                               [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
    }

    std::size_t size() const { return values.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    double* data() { return values.data(); }
    const double* data() const { return values.data(); }

    // 3D (channel, row, col) access.
    double& at(int c, int r, int x) { return values[(static_cast<std::size_t>(c) * shape[1] + r) * shape[2] + x]; }
    double at(int c, int r, int x) const {
        return values[(static_cast<std::size_t>(c) * shape[1] + r) * shape[2] + x];
    }

    void zero_grad() { grad.assign(values.size(), 0.0); }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

std::string shape_string(const std::vector<int>& shape);

}  // namespace chemmap
