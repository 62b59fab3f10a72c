#pragma once

// Differentiable building blocks. Every backward function ACCUMULATES into
// the gradient tensors it is given (callers zero them first), so a tensor
// consumed by two branches receives the sum of both contributions.

#include <cstdint>
#include <vector>

#include "orbitseg/tensor.hpp"

namespace orbitseg::nn {

inline int conv_out_size(int in, int kernel, int stride, int pad) { return (in + 2 * pad - kernel) / stride + 1; }

// x: N x Cin x H x W; w: Cout x Cin x K x K; bias may be null.
template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const T* bias, int stride, int pad, Tensor<T>& y);

// dx/dw/db may be null when that gradient is not needed.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad, const Tensor<T>& dy,
                     Tensor<T>* dx, Tensor<T>* dw, T* db);

template <typename T>
void elu_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void elu_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx);

template <typename T>
void relu_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void relu_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx);

template <typename T>
void leaky_relu_forward(const Tensor<T>& x, T slope, Tensor<T>& y);
template <typename T>
void leaky_relu_backward(const Tensor<T>& y, T slope, const Tensor<T>& dy, Tensor<T>& dx);

template <typename T>
T sigmoid(T x);

template <typename T>
void sigmoid_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx);

// 2x2 max pooling, stride 2 (H and W must be even). argmax holds the flat
// in-plane input index of each output's winner.
template <typename T>
void maxpool2_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<std::int32_t>& argmax);
template <typename T>
void maxpool2_backward(const Tensor<T>& dy, const std::vector<std::int32_t>& argmax, Tensor<T>& dx);

// Nearest-neighbour 2x upsampling.
template <typename T>
void upsample2_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void upsample2_backward(const Tensor<T>& dy, Tensor<T>& dx);

// Channel concatenation [a, b].
template <typename T>
void concat_forward(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y);
template <typename T>
void concat_backward(const Tensor<T>& dy, Tensor<T>& da, Tensor<T>& db);

// Fully connected: x is N x In (any trailing shape flattened), w is Out x In x 1 x 1.
template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& w, const T* bias, Tensor<T>& y);
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>* dw, T* db);

// y += x elementwise.
template <typename T>
void accumulate(const Tensor<T>& x, Tensor<T>& y);

}  // namespace orbitseg::nn
