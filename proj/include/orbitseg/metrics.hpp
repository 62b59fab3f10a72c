#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace orbitseg {

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o);
    bool operator==(const ConfusionCounts&) const = default;
};

// value >= threshold -> 1.
std::vector<std::uint8_t> binarize(std::span<const float> prob, double threshold = 0.5);

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

// A metric value plus whether it came from a degenerate (undefined) case.
struct Score {
    double value = 0.0;
    bool degenerate = false;
};

// 100 * 2tp / (2tp + fp + fn); both masks empty gives 100, flagged.
Score dice_score(const ConfusionCounts& c);
// 100 * (1 - |fn - fp| / (2tp + fp + fn)); both masks empty gives 100, flagged.
Score volume_similarity(const ConfusionCounts& c);
// tp / (tp + fn); no positives in truth gives 1 when nothing was predicted else 0, flagged.
Score sensitivity(const ConfusionCounts& c);
// tn / (tn + fp); no negatives in truth gives 1, flagged.
Score specificity(const ConfusionCounts& c);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample (n - 1) standard deviation
    std::size_t count = 0;
    bool single = false;  // one value: std reported as 0
};

MeanStd mean_std(std::span<const double> values);

// Per-fold metric lists; sensitivity/specificity are pooled within each fold.
struct FoldReport {
    std::vector<double> dice, vs, sensitivity, specificity;
    int folds() const { return static_cast<int>(dice.size()); }
    void validate() const;
};

struct CvSummary {
    MeanStd dice, vs, sensitivity, specificity;
};

CvSummary aggregate_cv(const FoldReport& report);

}  // namespace orbitseg
