#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sarwsl::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

/// Dense row-major array. Activations are N x H x W x C, conv kernels
/// kH x kW x Cin x Cout.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> values;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), values(element_count(shape), fill) {}
    Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v))
    {
        if (values.size() != element_count(shape))
            throw std::invalid_argument("tensor: " + std::to_string(values.size()) + " values for shape " +
                                        ad::to_string(shape));
    }

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    T* data() { return values.data(); }
    const T* data() const { return values.data(); }
    T& operator[](std::size_t i) { return values[i]; }
    const T& operator[](std::size_t i) const { return values[i]; }

    template <typename U>
    Tensor<U> cast() const
    {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < values.size(); ++i)
            out.values[i] = static_cast<U>(values[i]);
        return out;
    }

    bool operator==(const Tensor&) const = default;
};

} // namespace sarwsl::ad
