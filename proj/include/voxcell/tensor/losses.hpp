#pragma once

#include <cmath>
#include <vector>

#include "ops.hpp"

namespace voxcell::tc {

/// Mean over all elements of (pred - target)^2.
template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target) {
    detail::require_same_shape(pred, target, "mse_loss");
    const auto& p = pred.value();
    const auto& t = target.value();
    T acc = 0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
    const T n = T(p.size());
    const std::size_t pid = pred.id(), tid = target.id();
    return pred.graph().push(Tensor<T>({1}, acc / n), {pid, tid}, [pid, tid, n](Graph<T>& g, std::size_t self) {
        const T gy = g.grad_out(self)[0];
        const auto& p = g.value(pid);
        const auto& t = g.value(tid);
        if (g.active(pid)) {
            auto& gp = g.grad(pid);
            for (std::size_t i = 0; i < p.size(); ++i) gp[i] += gy * T(2) * (p[i] - t[i]) / n;
        }
        if (g.active(tid)) {
            auto& gt = g.grad(tid);
            for (std::size_t i = 0; i < p.size(); ++i) gt[i] -= gy * T(2) * (p[i] - t[i]) / n;
        }
    });
}

/// KL(N(mu, exp(logvar)) || N(0, 1)) summed over latent dims, averaged over
/// the batch. Inputs are [N, d].
template <typename T>
Var<T> kl_diag_gaussian(const Var<T>& mu, const Var<T>& logvar) {
    detail::require_same_shape(mu, logvar, "kl_diag_gaussian");
    const auto& m = mu.value();
    const auto& lv = logvar.value();
    const T batch = T(m.rank() >= 1 ? m.dim(0) : 1);
    T acc = 0;
    for (std::size_t i = 0; i < m.size(); ++i) acc += m[i] * m[i] + std::exp(lv[i]) - T(1) - lv[i];
    const std::size_t mid = mu.id(), lid = logvar.id();
    return mu.graph().push(Tensor<T>({1}, T(0.5) * acc / batch), {mid, lid},
                           [mid, lid, batch](Graph<T>& g, std::size_t self) {
                               const T gy = g.grad_out(self)[0];
                               if (g.active(mid)) {
                                   const auto& m = g.value(mid);
                                   auto& gm = g.grad(mid);
                                   for (std::size_t i = 0; i < m.size(); ++i) gm[i] += gy * m[i] / batch;
                               }
                               if (g.active(lid)) {
                                   const auto& lv = g.value(lid);
                                   auto& gl = g.grad(lid);
                                   for (std::size_t i = 0; i < lv.size(); ++i)
                                       gl[i] += gy * T(0.5) * (std::exp(lv[i]) - T(1)) / batch;
                               }
                           });
}

/// Sigmoid binary cross-entropy per element, mean-reduced. Uses
/// max(x,0) - x*t + log1p(exp(-|x|)) so large logits stay finite.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Var<T>& target) {
    detail::require_same_shape(logits, target, "bce_with_logits");
    const auto& x = logits.value();
    const auto& t = target.value();
    T acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        acc += std::max(x[i], T(0)) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
    const T n = T(x.size());
    const std::size_t xid = logits.id(), tid = target.id();
    return logits.graph().push(Tensor<T>({1}, acc / n), {xid, tid}, [xid, tid, n](Graph<T>& g, std::size_t self) {
        if (!g.active(xid)) return;
        const T gy = g.grad_out(self)[0];
        const auto& x = g.value(xid);
        const auto& t = g.value(tid);
        auto& gx = g.grad(xid);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const T s = x[i] >= 0 ? T(1) / (T(1) + std::exp(-x[i])) : std::exp(x[i]) / (T(1) + std::exp(x[i]));
            gx[i] += gy * (s - t[i]) / n;
        }
    });
}

/// Softmax cross-entropy over the class axis of [N,C,...] against one-hot
/// targets, averaged over N and spatial positions.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const Var<T>& target) {
    detail::require_same_shape(logits, target, "softmax_cross_entropy");
    const auto& x = logits.value();
    const auto& t = target.value();
    const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C);
    Tensor<T> prob(x.shape());
    T acc = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) {
            T mx = x[(n * C) * S + s];
            for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[(n * C + c) * S + s]);
            T z = 0;
            for (std::size_t c = 0; c < C; ++c) z += std::exp(x[(n * C + c) * S + s] - mx);
            const T lz = std::log(z) + mx;
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t i = (n * C + c) * S + s;
                prob[i] = std::exp(x[i] - lz);
                acc -= t[i] * (x[i] - lz);
            }
        }
    const T count = T(N * S);
    const std::size_t xid = logits.id(), tid = target.id();
    return logits.graph().push(Tensor<T>({1}, acc / count), {xid, tid},
                               [xid, tid, count, prob = std::move(prob)](Graph<T>& g, std::size_t self) {
                                   if (!g.active(xid)) return;
                                   const T gy = g.grad_out(self)[0];
                                   const auto& t = g.value(tid);
                                   auto& gx = g.grad(xid);
                                   for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy * (prob[i] - t[i]) / count;
                               });
}

/// z = mu + exp(logvar / 2) * eps; eps is a constant, gradients reach mu
/// and logvar only.
template <typename T>
Var<T> reparameterize(const Var<T>& mu, const Var<T>& logvar, const Tensor<T>& eps) {
    detail::require_same_shape(mu, logvar, "reparameterize");
    mu.value().check_same(eps);
    const auto& m = mu.value();
    const auto& lv = logvar.value();
    Tensor<T> z(m.shape());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = m[i] + std::exp(T(0.5) * lv[i]) * eps[i];
    const std::size_t mid = mu.id(), lid = logvar.id();
    return mu.graph().push(std::move(z), {mid, lid}, [mid, lid, eps](Graph<T>& g, std::size_t self) {
        const auto& gz = g.grad_out(self);
        if (g.active(mid)) g.grad(mid) += gz;
        if (g.active(lid)) {
            const auto& lv = g.value(lid);
            auto& gl = g.grad(lid);
            for (std::size_t i = 0; i < gz.size(); ++i)
                gl[i] += gz[i] * eps[i] * T(0.5) * std::exp(T(0.5) * lv[i]);
        }
    });
}

}  // namespace voxcell::tc
