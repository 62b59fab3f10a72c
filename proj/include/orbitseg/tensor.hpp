#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "orbitseg/errors.hpp"

namespace orbitseg {

// N x C x H x W, row-major. N enumerates frames (batch x time) inside the network.
using Shape4 = std::array<int, 4>;

inline std::string shape_string(const Shape4& s) {
    return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]) + "x" +
           std::to_string(s[3]);
}

template <typename T>
class Tensor {
public:
    Tensor() = default;
    Tensor(int n, int c, int h, int w) : shape_{n, c, h, w}, data_(static_cast<std::size_t>(n) * c * h * w) {}
    explicit Tensor(const Shape4& s) : Tensor(s[0], s[1], s[2], s[3]) {}

    const Shape4& shape() const { return shape_; }
    int n() const { return shape_[0]; }
    int c() const { return shape_[1]; }
    int h() const { return shape_[2]; }
    int w() const { return shape_[3]; }
    std::size_t size() const { return data_.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }
    std::size_t frame_size() const { return static_cast<std::size_t>(shape_[1]) * plane(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T* frame(int n) { return data_.data() + static_cast<std::size_t>(n) * frame_size(); }
    const T* frame(int n) const { return data_.data() + static_cast<std::size_t>(n) * frame_size(); }
    T* channel(int n, int c) { return frame(n) + static_cast<std::size_t>(c) * plane(); }
    const T* channel(int n, int c) const { return frame(n) + static_cast<std::size_t>(c) * plane(); }

    T& at(int n, int c, int y, int x) {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at(int n, int c, int y, int x) const {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    // Same element count, new shape.
    void reshape(const Shape4& s) {
        if (static_cast<std::size_t>(s[0]) * s[1] * s[2] * s[3] != data_.size())
            throw ShapeError("reshape " + shape_string(shape_) + " -> " + shape_string(s));
        shape_ = s;
    }

    // Zero-filled tensor of the same shape.
    Tensor like() const { return Tensor(shape_); }

private:
    Shape4 shape_{0, 0, 0, 0};
    std::vector<T> data_;
};

template <typename T>
inline void require_shape(const Tensor<T>& t, const Shape4& s, const char* what) {
    if (t.shape() != s)
        throw ShapeError(std::string(what) + ": expected " + shape_string(s) + ", got " + shape_string(t.shape()));
}

}  // namespace orbitseg
