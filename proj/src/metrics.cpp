#include "orbitseg/metrics.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "orbitseg/errors.hpp"

namespace orbitseg {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
}

std::vector<std::uint8_t> binarize(std::span<const float> prob, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("threshold must lie in [0, 1]");
    std::vector<std::uint8_t> out(prob.size());
    for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] >= threshold ? 1 : 0;
    return out;
}

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    if (pred.size() != truth.size())
        throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) + " voxels, truth " +
                         std::to_string(truth.size()));
    // Index 2 * truth + pred selects tn, fp, fn, tp.
    std::uint64_t bins[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < pred.size(); ++i) ++bins[2 * (truth[i] != 0) + (pred[i] != 0)];
    return {bins[3], bins[1], bins[2], bins[0]};
}

Score dice_score(const ConfusionCounts& c) {
    const std::uint64_t den = 2 * c.tp + c.fp + c.fn;
    if (den == 0) return {100.0, true};
    return {100.0 * static_cast<double>(2 * c.tp) / static_cast<double>(den), false};
}

Score volume_similarity(const ConfusionCounts& c) {
    const std::uint64_t den = 2 * c.tp + c.fp + c.fn;
    if (den == 0) return {100.0, true};
    const std::uint64_t diff = c.fn > c.fp ? c.fn - c.fp : c.fp - c.fn;
    return {100.0 * (1.0 - static_cast<double>(diff) / static_cast<double>(den)), false};
}

Score sensitivity(const ConfusionCounts& c) {
    const std::uint64_t den = c.tp + c.fn;
    if (den == 0) return {c.fp == 0 ? 1.0 : 0.0, true};
    return {static_cast<double>(c.tp) / static_cast<double>(den), false};
}

Score specificity(const ConfusionCounts& c) {
    const std::uint64_t den = c.tn + c.fp;
    if (den == 0) return {1.0, true};
    return {static_cast<double>(c.tn) / static_cast<double>(den), false};
}

MeanStd mean_std(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("mean_std of an empty list");
    MeanStd r;
    r.count = values.size();
    r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() == 1) {
        r.single = true;
        return r;
    }
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return r;
}

void FoldReport::validate() const {
    const std::size_t k = dice.size();
    if (vs.size() != k || sensitivity.size() != k || specificity.size() != k)
        throw std::invalid_argument("fold report lists differ in length");
    auto in = [](const std::vector<double>& v, double hi) {
        for (double x : v)
            if (!(x >= 0.0 && x <= hi)) return false;
        return true;
    };
    if (!in(dice, 100.0) || !in(vs, 100.0)) throw std::invalid_argument("DICE/VS must lie in [0, 100]");
    if (!in(sensitivity, 1.0) || !in(specificity, 1.0))
        throw std::invalid_argument("sensitivity/specificity must lie in [0, 1]");
}

CvSummary aggregate_cv(const FoldReport& report) {
    report.validate();
    if (report.dice.empty()) throw std::invalid_argument("aggregate_cv needs at least one fold");
    return {mean_std(report.dice), mean_std(report.vs), mean_std(report.sensitivity), mean_std(report.specificity)};
}

}  // namespace orbitseg
