#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace gpunet {

// Error hierarchy. Everything thrown by the library derives from Error.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite values produced by a primitive, or fed to the optimizer.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// A value outside the domain an operation accepts (e.g. a non-binary target).
class ValueError : public Error {
public:
    using Error::Error;
};

/// (batch, channels, height, width)
struct Shape4 {
    std::size_t n = 0, c = 0, h = 0, w = 0;

    constexpr std::size_t numel() const { return n * c * h * w; }
    constexpr std::size_t plane() const { return h * w; }
    friend constexpr bool operator==(const Shape4&, const Shape4&) = default;
};

std::string to_string(const Shape4& s);

/// Dense rank-4 array in NCHW row-major order.
template <typename T>
class Tensor4 {
public:
    using value_type = T;

    Tensor4() = default;
    explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
    Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data))
    {
        if (data_.size() != shape_.numel())
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + to_string(shape_));
    }

    const Shape4& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    std::size_t index(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const
    {
        return ((b * shape_.c + ch) * shape_.h + y) * shape_.w + x;
    }
    T& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) { return data_[index(b, ch, y, x)]; }
    T at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const { return data_[index(b, ch, y, x)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }

    /// One (height x width) plane.
    T* plane(std::size_t b, std::size_t ch) { return data_.data() + (b * shape_.c + ch) * shape_.plane(); }
    const T* plane(std::size_t b, std::size_t ch) const
    {
        return data_.data() + (b * shape_.c + ch) * shape_.plane();
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Tensor4& a, const Tensor4& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    Shape4 shape_{};
    std::vector<T> data_;
};

template <typename To, typename From>
Tensor4<To> tensor_cast(const Tensor4<From>& t)
{
    if constexpr (std::is_same_v<To, From>) {
        return t;
    } else {
        std::vector<To> out(t.size());
        for (std::size_t i = 0; i < t.size(); ++i)
            out[i] = static_cast<To>(t[i]);
        return Tensor4<To>(t.shape(), std::move(out));
    }
}

/// Learnable tensor with its gradient accumulator. Bias and batch-norm vectors
/// are stored as (1, c, 1, 1) and flagged so they serialize as rank 1.
template <typename T>
struct ParamTensor {
    Tensor4<T> value;
    Tensor4<T> grad;
    bool vector_like = false;

    ParamTensor() = default;
    explicit ParamTensor(Shape4 shape, bool is_vector = false)
        : value(shape), grad(shape), vector_like(is_vector)
    {
    }
    static ParamTensor vector(std::size_t len) { return ParamTensor(Shape4{1, len, 1, 1}, true); }

    void zero_grad() { grad.fill(T(0)); }
    std::size_t size() const { return value.size(); }
    std::vector<std::size_t> dims() const
    {
        if (vector_like)
            return {value.shape().c};
        const auto& s = value.shape();
        return {s.n, s.c, s.h, s.w};
    }
};

template <typename T>
bool all_finite(std::span<const T> xs)
{
    for (T v : xs)
        if (!std::isfinite(v))
            return false;
    return true;
}

/// Throws NumericError naming `where` if any entry is NaN or infinite.
template <typename T>
void ensure_finite(const Tensor4<T>& t, const char* where)
{
    if (!all_finite(t.span()))
        throw NumericError(std::string("non-finite value produced by ") + where);
}

enum class Mode { train, eval };

}  // namespace gpunet
