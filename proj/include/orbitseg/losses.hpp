#pragma once

// Segmentation and adversarial objectives. Gradient outputs, when given, are
// ACCUMULATED (scaled by `scale`) so batch losses can be assembled in place.

#include <cstddef>
#include <span>

namespace orbitseg {

struct LossConfig {
    double lambda_seg = 1.0;
    double dice_epsilon = 1.0;
    double foreground_ratio_cap = 4096.0;

    void validate() const;
};

// Labels of the domain classifier.
inline constexpr int kSourceLabel = 0;
inline constexpr int kTargetLabel = 1;

// (2 sum(y m) + eps) / (sum(y) + sum(m) + eps). m holds 0/1 values.
template <typename T>
T soft_dice(std::span<const T> y, std::span<const T> m, T eps);

// Adds scale * d soft_dice / d y to dy.
template <typename T>
void soft_dice_backward(std::span<const T> y, std::span<const T> m, T eps, T scale, std::span<T> dy);

// min(N_input / N_mask, cap); cap for an empty mask.
template <typename T>
T foreground_ratio(std::span<const T> m, T cap);

// Two-class softmax cross-entropy. Adds scale * d/dlogits into dlogits when non-null.
template <typename T>
T softmax_cross_entropy(const T* logits, int label, T scale = T(1), T* dlogits = nullptr);

// CE(src, source) + CE(tgt, target).
template <typename T>
T discriminator_loss(const T* logits_src, const T* logits_tgt, T scale = T(1), T* dsrc = nullptr, T* dtgt = nullptr);

// r (1 - soft_dice(y, m)).
template <typename T>
T pretrain_loss(std::span<const T> y, std::span<const T> m, const LossConfig& cfg, T scale = T(1),
                std::span<T> dy = {});

// CE(tgt, source) + lambda_seg r (1 - soft_dice(y, m)): the target network is
// rewarded for features the discriminator takes for source features.
template <typename T>
T segmentation_da_loss(const T* logits_tgt, std::span<const T> y, std::span<const T> m, const LossConfig& cfg,
                       T scale = T(1), T* dlogits = nullptr, std::span<T> dy = {});

}  // namespace orbitseg
