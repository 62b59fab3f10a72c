#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "orbitseg/model.hpp"

namespace orbitseg {

struct AdamConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.9999;
    double eps = 1e-8;

    void validate() const;
};

// Adam over an explicit set of weights. Weights not registered are never touched,
// which is how frozen parameter groups are expressed.
template <typename T>
class Adam {
public:
    struct Slot {
        std::string name;
        ParamGroup group;
        Weight<T>* weight;
        Tensor<T> m, v;
    };

    Adam() = default;
    explicit Adam(const AdamConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

    void add(const std::string& name, ParamGroup group, Weight<T>& w);

    // Registers every network weight whose group passes `keep`.
    void add_all(SeqUnetParams<T>& p, const std::function<bool(ParamGroup)>& keep);
    void add_all(DiscriminatorParams<T>& p);

    // One update from the accumulated gradients; throws DivergenceError on a
    // non-finite gradient before any weight changes.
    void step();

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::uint64_t steps() const { return t_; }
    void set_steps(std::uint64_t t) { t_ = t; }
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    bool owns(const Weight<T>& w) const;

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<Slot> slots_;
};

// Throws std::logic_error when the two optimizers share any weight.
template <typename T>
void require_disjoint(const Adam<T>& a, const Adam<T>& b);

}  // namespace orbitseg
