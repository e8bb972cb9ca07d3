#pragma once

#include <cmath>
#include <unordered_map>

#include "graph.hpp"

namespace voxcell::tc {

struct AdamOptions {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam. Moment buffers are keyed by parameter address, so a
/// parameter must stay at a fixed address for the optimizer's lifetime.
template <typename T>
class Adam {
public:
    explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

    void step(const ParamList<T>& params) {
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (auto* p : params) {
            if (p->grad.empty()) continue;
            auto& st = state_[p];
            if (st.m.empty()) {
                st.m = Tensor<T>(p->value.shape());
                st.v = Tensor<T>(p->value.shape());
            }
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double g = static_cast<double>(p->grad[i]);
                const double m = opt_.beta1 * static_cast<double>(st.m[i]) + (1.0 - opt_.beta1) * g;
                const double v = opt_.beta2 * static_cast<double>(st.v[i]) + (1.0 - opt_.beta2) * g * g;
                st.m[i] = static_cast<T>(m);
                st.v[i] = static_cast<T>(v);
                const double update = opt_.lr * (m / c1) / (std::sqrt(v / c2) + opt_.eps);
                p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - update);
            }
        }
    }

    long steps() const { return t_; }
    const AdamOptions& options() const { return opt_; }
    void set_lr(double lr) { opt_.lr = lr; }

private:
    struct Moments {
        Tensor<T> m, v;
    };
    AdamOptions opt_;
    long t_ = 0;
    std::unordered_map<const Parameter<T>*, Moments> state_;
};

}  // namespace voxcell::tc
