#ifndef HSAE_OPTIM_HPP
#define HSAE_OPTIM_HPP

// Adam with global-norm clipping, the warmup + cosine learning-rate schedule,
// the regularizer warmup ramp, and decoder column renormalization.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>

#include "hsae/errors.hpp"
#include "hsae/linalg.hpp"
#include "hsae/model.hpp"

namespace hsae {

struct OptConfig {
    double lr_peak = 5e-4;
    double lr_init = 1e-11;
    std::uint64_t warmup_steps = 1000;
    std::uint64_t total_steps = 0;  ///< 0 means "derive from the data length"
    double clip_norm = 0.75;
    double b1 = 0.9;
    double b2 = 0.999;
    double eps_adam = 1e-8;

    void validate() const {
        auto fail = [](const std::string& what) { throw std::invalid_argument("OptConfig: " + what); };
        if (!(warmup_steps > 0 && warmup_steps < total_steps)) fail("need 0 < warmup_steps < total_steps");
        if (!(clip_norm > 0.0)) fail("clip_norm must be > 0");
        if (!(b1 >= 0.0 && b1 < 1.0 && b2 >= 0.0 && b2 < 1.0)) fail("b1, b2 must lie in [0, 1)");
        if (!(lr_peak >= 0.0 && lr_init >= 0.0 && eps_adam > 0.0)) fail("learning rates must be >= 0, eps > 0");
    }
};

template <typename Scalar>
struct OptState {
    std::uint64_t step = 0;
    HsaeModel<Scalar> m;  ///< first moment
    HsaeModel<Scalar> v;  ///< second moment

    static OptState fresh(const HsaeModel<Scalar>& model) {
        return {0, HsaeModel<Scalar>::zeros_like(model), HsaeModel<Scalar>::zeros_like(model)};
    }
};

/// Linear warmup from lr_init to lr_peak, then cosine decay to 0 at
/// total_steps. Steps past the end clamp to 0.
inline double lr_schedule(std::uint64_t step, const OptConfig& cfg) {
    if (step >= cfg.total_steps) return 0.0;
    if (step < cfg.warmup_steps) {
        const double frac = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * frac;
    }
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Multiplier for beta, lambda1 and lambda2: ramps 0 -> 1 over warmup.
inline double reg_warmup(std::uint64_t step, const OptConfig& cfg) {
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return 1.0;
    return static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

/// l2 norm over every parameter block jointly, in canonical block order.
template <typename Scalar>
double global_norm(const Gradients<Scalar>& g) {
    auto& mut = const_cast<Gradients<Scalar>&>(g);
    double acc = 0.0;
    for (const auto& blk : param_blocks(mut)) {
        const Scalar* p = blk.data();
        for (Index i = 0; i < blk.size(); ++i) {
            const double e = static_cast<double>(p[i]);
            acc += e * e;
        }
    }
    return std::sqrt(acc);
}

/// One bias-corrected Adam update on a flat block; `t` is the 1-based step.
template <typename Scalar>
void adam_update(std::span<Scalar> theta, std::span<const Scalar> grad, std::span<Scalar> m, std::span<Scalar> v,
                 double grad_scale, double lr, std::uint64_t t, const OptConfig& cfg) {
    const double c1 = 1.0 - std::pow(cfg.b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.b2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double gi = static_cast<double>(grad[i]) * grad_scale;
        const double mi = cfg.b1 * static_cast<double>(m[i]) + (1.0 - cfg.b1) * gi;
        const double vi = cfg.b2 * static_cast<double>(v[i]) + (1.0 - cfg.b2) * gi * gi;
        m[i] = static_cast<Scalar>(mi);
        v[i] = static_cast<Scalar>(vi);
        const double mhat = mi / c1;
        const double vhat = vi / c2;
        theta[i] = static_cast<Scalar>(static_cast<double>(theta[i]) - lr * mhat / (std::sqrt(vhat) + cfg.eps_adam));
    }
}

struct AdamStats {
    double grad_norm = 0.0;   ///< before clipping
    double clip_scale = 1.0;  ///< min(1, clip_norm / grad_norm)
    double lr = 0.0;
};

/// Clip-then-accumulate Adam step at lr_schedule(state.step). On non-finite
/// gradients nothing is modified.
template <typename Scalar>
AdamStats adam_step(HsaeModel<Scalar>& model, const Gradients<Scalar>& grads, OptState<Scalar>& state,
                    const OptConfig& cfg) {
    AdamStats st;
    st.grad_norm = global_norm(grads);
    if (!std::isfinite(st.grad_norm)) throw NumericFailure("adam_step: non-finite gradient norm");
    st.clip_scale = st.grad_norm > cfg.clip_norm ? cfg.clip_norm / st.grad_norm : 1.0;
    st.lr = lr_schedule(state.step, cfg);
    const std::uint64_t t = state.step + 1;

    auto& g = const_cast<Gradients<Scalar>&>(grads);
    auto pb = param_blocks(model);
    auto gb = param_blocks(g);
    auto mb = param_blocks(state.m);
    auto vb = param_blocks(state.v);
    if (pb.size() != gb.size() || pb.size() != mb.size() || pb.size() != vb.size()) {
        throw std::invalid_argument("adam_step: parameter layout mismatch");
    }
    for (std::size_t b = 0; b < pb.size(); ++b) {
        const auto n = static_cast<std::size_t>(pb[b].size());
        if (gb[b].size() != pb[b].size() || mb[b].size() != pb[b].size() || vb[b].size() != pb[b].size()) {
            throw std::invalid_argument("adam_step: shape mismatch in " + pb[b].label());
        }
        adam_update<Scalar>({pb[b].data(), n}, {gb[b].data(), n}, {mb[b].data(), n}, {vb[b].data(), n},
                            st.clip_scale, st.lr, t, cfg);
    }
    state.step = t;
    return st;
}

namespace detail {

template <typename Scalar>
void normalize_columns(Mat<Scalar>& mat, const std::string& what) {
    // Columns already within a few ulps of unit length are left as they are,
    // which keeps the operation idempotent.
    const double tol = 4.0 * static_cast<double>(std::numeric_limits<Scalar>::epsilon());
    for (Index j = 0; j < mat.cols(); ++j) {
        const double norm = l2_norm(mat.col(j));
        if (!(norm > 0.0)) throw DegenerateInput("renormalize_decoder: zero column " + std::to_string(j) + " in " + what);
        if (std::abs(norm - 1.0) <= tol) continue;
        for (Index i = 0; i < mat.rows(); ++i) mat(i, j) = static_cast<Scalar>(static_cast<double>(mat(i, j)) / norm);
    }
}

}  // namespace detail

/// Rescales every top-level decoder column to unit l2 norm, and optionally
/// every expert decoder column.
template <typename Scalar>
void renormalize_decoder(HsaeModel<Scalar>& model, bool include_experts = false) {
    detail::normalize_columns(model.top.D, "D");
    if (!include_experts) return;
    for (std::size_t j = 0; j < model.experts.size(); ++j) {
        detail::normalize_columns(model.experts[j].D, "experts[" + std::to_string(j) + "].D_j");
    }
}

}  // namespace hsae

#endif  // HSAE_OPTIM_HPP
