#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "sarwsl/autodiff/tensor.hpp"
#include "sarwsl/random.hpp"

namespace sarwsl::ad {

enum class InitScheme { he, xavier };

/// fan_in of a kH x kW x Cin x Cout kernel is kH*kW*Cin (all but the last axis).
inline std::size_t fan_in(const Shape& shape)
{
    if (shape.empty())
        throw std::invalid_argument("fan_in: empty shape");
    return element_count(shape) / shape.back();
}

inline std::size_t fan_out(const Shape& shape)
{
    if (shape.size() < 2)
        return shape.empty() ? 0 : shape.back();
    return element_count(shape) / shape[shape.size() - 2];
}

/// Normal(0, sqrt(2 / fan_in)).
template <typename T>
Tensor<T> he_init(const Shape& shape, std::uint64_t seed)
{
    if (shape.empty() || element_count(shape) == 0)
        throw std::invalid_argument("he_init: empty shape");
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in(shape)));
    Tensor<T> out(shape);
    Rng rng(seed);
    for (T& v : out.values)
        v = static_cast<T>(rng.normal(0.0, stddev));
    return out;
}

/// Normal(0, sqrt(2 / (fan_in + fan_out))).
template <typename T>
Tensor<T> xavier_init(const Shape& shape, std::uint64_t seed)
{
    if (shape.empty() || element_count(shape) == 0)
        throw std::invalid_argument("xavier_init: empty shape");
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in(shape) + fan_out(shape)));
    Tensor<T> out(shape);
    Rng rng(seed);
    for (T& v : out.values)
        v = static_cast<T>(rng.normal(0.0, stddev));
    return out;
}

template <typename T>
Tensor<T> kernel_init(InitScheme scheme, const Shape& shape, std::uint64_t seed)
{
    return scheme == InitScheme::he ? he_init<T>(shape, seed) : xavier_init<T>(shape, seed);
}

template <typename T>
Tensor<T> bias_init(std::size_t channels)
{
    return Tensor<T>({channels}, T(0));
}

} // namespace sarwsl::ad
