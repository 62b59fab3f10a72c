#include "orbitseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "orbitseg/errors.hpp"

namespace orbitseg {

void LossConfig::validate() const {
    if (!(lambda_seg >= 0)) throw std::invalid_argument("lambda_seg must be non-negative");
    if (!(dice_epsilon > 0)) throw std::invalid_argument("dice_epsilon must be positive");
    if (!(foreground_ratio_cap >= 1)) throw std::invalid_argument("foreground_ratio_cap must be at least 1");
}

namespace {

template <typename T>
void same_size(std::span<const T> a, std::span<const T> b, const char* op) {
    if (a.size() != b.size())
        throw ShapeError(std::string(op) + ": prediction has " + std::to_string(a.size()) + " pixels, mask " +
                         std::to_string(b.size()));
}

template <typename T>
struct DiceSums {
    T inter = 0, sy = 0, sm = 0;
};

template <typename T>
DiceSums<T> dice_sums(std::span<const T> y, std::span<const T> m) {
    DiceSums<T> s;
    for (std::size_t i = 0; i < y.size(); ++i) {
        s.inter += y[i] * m[i];
        s.sy += y[i];
        s.sm += m[i];
    }
    return s;
}

}  // namespace

template <typename T>
T soft_dice(std::span<const T> y, std::span<const T> m, T eps) {
    same_size(y, m, "soft_dice");
    const auto s = dice_sums(y, m);
    return (2 * s.inter + eps) / (s.sy + s.sm + eps);
}

template <typename T>
void soft_dice_backward(std::span<const T> y, std::span<const T> m, T eps, T scale, std::span<T> dy) {
    same_size(y, m, "soft_dice");
    if (dy.size() != y.size()) throw ShapeError("soft_dice: gradient size mismatch");
    const auto s = dice_sums(y, m);
    const T num = 2 * s.inter + eps;
    const T den = s.sy + s.sm + eps;
    // d/dy_i = (2 m_i den - num) / den^2
    const T a = scale * 2 / den;
    const T b = scale * num / (den * den);
    for (std::size_t i = 0; i < y.size(); ++i) dy[i] += a * m[i] - b;
}

template <typename T>
T foreground_ratio(std::span<const T> m, T cap) {
    T n = 0;
    for (T v : m) n += v;
    if (n <= 0) return cap;
    return std::min(static_cast<T>(m.size()) / n, cap);
}

template <typename T>
T softmax_cross_entropy(const T* logits, int label, T scale, T* dlogits) {
    if (label != 0 && label != 1) throw std::invalid_argument("domain label must be 0 or 1");
    const T mx = std::max(logits[0], logits[1]);
    const T e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
    const T z = e0 + e1;
    const T loss = mx + std::log(z) - logits[label];
    if (dlogits) {
        dlogits[0] += scale * (e0 / z - (label == 0 ? 1 : 0));
        dlogits[1] += scale * (e1 / z - (label == 1 ? 1 : 0));
    }
    return loss;
}

template <typename T>
T discriminator_loss(const T* logits_src, const T* logits_tgt, T scale, T* dsrc, T* dtgt) {
    return softmax_cross_entropy(logits_src, kSourceLabel, scale, dsrc) +
           softmax_cross_entropy(logits_tgt, kTargetLabel, scale, dtgt);
}

template <typename T>
T pretrain_loss(std::span<const T> y, std::span<const T> m, const LossConfig& cfg, T scale, std::span<T> dy) {
    const T eps = static_cast<T>(cfg.dice_epsilon);
    const T r = foreground_ratio(m, static_cast<T>(cfg.foreground_ratio_cap));
    const T loss = r * (1 - soft_dice(y, m, eps));
    if (!dy.empty()) soft_dice_backward(y, m, eps, -scale * r, dy);
    return loss;
}

template <typename T>
T segmentation_da_loss(const T* logits_tgt, std::span<const T> y, std::span<const T> m, const LossConfig& cfg,
                       T scale, T* dlogits, std::span<T> dy) {
    const T lambda = static_cast<T>(cfg.lambda_seg);
    const T adv = softmax_cross_entropy(logits_tgt, kSourceLabel, scale, dlogits);
    const T seg = pretrain_loss(y, m, cfg, scale * lambda, dy);
    return adv + lambda * seg;
}

#define ORBITSEG_INSTANTIATE(T)                                                                                  \
    template T soft_dice<T>(std::span<const T>, std::span<const T>, T);                                          \
    template void soft_dice_backward<T>(std::span<const T>, std::span<const T>, T, T, std::span<T>);             \
    template T foreground_ratio<T>(std::span<const T>, T);                                                       \
    template T softmax_cross_entropy<T>(const T*, int, T, T*);                                                   \
    template T discriminator_loss<T>(const T*, const T*, T, T*, T*);                                             \
    template T pretrain_loss<T>(std::span<const T>, std::span<const T>, const LossConfig&, T, std::span<T>);     \
    template T segmentation_da_loss<T>(const T*, std::span<const T>, std::span<const T>, const LossConfig&, T,   \
                                       T*, std::span<T>);

ORBITSEG_INSTANTIATE(float)
ORBITSEG_INSTANTIATE(double)

}  // namespace orbitseg
