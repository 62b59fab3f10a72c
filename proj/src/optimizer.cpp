#include "orbitseg/optimizer.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "orbitseg/errors.hpp"
#include "orbitseg/kernels.hpp"

namespace orbitseg {

void AdamConfig::validate() const {
    if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in (0,1)");
    if (!(eps > 0)) throw std::invalid_argument("adam eps must be positive");
}

template <typename T>
void Adam<T>::add(const std::string& name, ParamGroup group, Weight<T>& w) {
    if (owns(w)) throw std::logic_error("weight '" + name + "' registered twice");
    slots_.push_back({name, group, &w, w.value.like(), w.value.like()});
}

template <typename T>
void Adam<T>::add_all(SeqUnetParams<T>& p, const std::function<bool(ParamGroup)>& keep) {
    p.for_each([&](const std::string& name, ParamGroup g, Weight<T>& w) {
        if (keep(g)) add(name, g, w);
    });
}

template <typename T>
void Adam<T>::add_all(DiscriminatorParams<T>& p) {
    p.for_each([&](const std::string& name, ParamGroup g, Weight<T>& w) { add(name, g, w); });
}

template <typename T>
bool Adam<T>::owns(const Weight<T>& w) const {
    for (const auto& s : slots_)
        if (s.weight == &w) return true;
    return false;
}

template <typename T>
void Adam<T>::step() {
    for (const auto& s : slots_)
        for (T g : s.weight->grad.vec())
            if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in '" + s.name + "'");
    ++t_;
    const double td = static_cast<double>(t_);
    const kernels::AdamStep st{cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.eps, 1.0 - std::pow(cfg_.beta1, td),
                               1.0 - std::pow(cfg_.beta2, td)};
    for (auto& s : slots_)
        kernels::adam_update(s.weight->value.size(), s.weight->value.data(), s.weight->grad.data(), s.m.data(),
                             s.v.data(), st);
}

template <typename T>
void require_disjoint(const Adam<T>& a, const Adam<T>& b) {
    std::unordered_set<const void*> seen;
    for (const auto& s : a.slots()) seen.insert(s.weight);
    for (const auto& s : b.slots())
        if (seen.count(s.weight)) throw std::logic_error("optimizers share weight '" + s.name + "'");
}

template class Adam<float>;
template class Adam<double>;
template void require_disjoint<float>(const Adam<float>&, const Adam<float>&);
template void require_disjoint<double>(const Adam<double>&, const Adam<double>&);

}  // namespace orbitseg
