#ifndef HSAE_OBJECTIVE_HPP
#define HSAE_OBJECTIVE_HPP

// Training objective and its hand-derived gradients.
//
// Per sample:
//   total = recon + beta * top_recon + lambda2 * sparse + aux_coeff * aux_dead
// plus the parameter-only term lambda1 * ortho, which is added once per batch.
// TopK selections are held fixed during backward (straight-through).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hsae/linalg.hpp"
#include "hsae/model.hpp"

namespace hsae {

/// E*D (m_top x m_top, default) or D*E (d x d).
enum class OrthoForm { encoder_decoder, decoder_encoder };

/// outside_topk penalizes only codes that TopK discarded; all_codes follows
/// the literal variant (selected top-level codes plus every sublatent code).
enum class L1Form { outside_topk, all_codes };

struct ObjectiveOptions {
    bool top_recon = true;
    bool ortho = true;
    bool l1 = true;
    OrthoForm ortho_form = OrthoForm::encoder_decoder;
    L1Form l1_form = L1Form::outside_topk;
};

/// Effective weights for one step, after any warmup scaling.
struct LossWeights {
    double beta = 0.0;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double aux = 0.0;

    static LossWeights from(const HsaeConfig& cfg, double aux_coeff = 0.0) {
        return {cfg.beta, cfg.lambda1, cfg.lambda2, aux_coeff};
    }

    /// Scales the regularizers (beta, lambda1, lambda2); aux is left alone.
    LossWeights warmed(double factor) const { return {beta * factor, lambda1 * factor, lambda2 * factor, aux}; }
};

struct LossBreakdown {
    double recon = 0.0;
    double top_recon = 0.0;
    double ortho = 0.0;
    double sparse = 0.0;
    double aux_dead = 0.0;
    double total = 0.0;

    void assemble(const LossWeights& w) {
        total = recon + w.beta * top_recon + w.lambda1 * ortho + w.lambda2 * sparse + w.aux * aux_dead;
    }
};

/// Dead latents fed to the auxiliary loss.
struct AuxContext {
    const std::vector<Index>* dead = nullptr;  ///< ascending latent indices
    Index k_aux = 0;
};

// ---------------------------------------------------------------------------
// Loss terms

/// Normalized off-diagonal mass of E*D (or D*E).
template <typename Scalar>
double ortho_penalty(const TopLevelParams<Scalar>& top, OrthoForm form) {
    const Mat<Scalar> prod = form == OrthoForm::encoder_decoder ? Mat<Scalar>(top.E * top.D)
                                                                : Mat<Scalar>(top.D * top.E);
    const auto n = static_cast<double>(prod.rows());
    if (prod.rows() < 2) return 0.0;
    return offdiag_frobenius(prod) / (n * n - n);
}

template <typename Scalar>
double sparse_penalty(const ForwardTrace<Scalar>& tr, L1Form form) {
    double acc = 0.0;
    if (form == L1Form::outside_topk) {
        for (Index i = 0; i < tr.pre_codes.size(); ++i) {
            if (!tr.codes.contains(i)) acc += std::abs(static_cast<double>(tr.pre_codes[i]));
        }
        for (const auto& et : tr.experts) {
            for (Index i = 0; i < et.low_pre_codes.size(); ++i) {
                if (i != et.selected) acc += std::abs(static_cast<double>(et.low_pre_codes[i]));
            }
        }
    } else {
        for (auto v : tr.codes.values) acc += std::abs(static_cast<double>(v));
        for (const auto& et : tr.experts) acc += l1_norm(et.low_pre_codes);
    }
    return acc;
}

/// Dead latents ranked by post-activation value; the best k_aux are kept.
template <typename Scalar>
std::vector<Index> select_aux_latents(const ForwardTrace<Scalar>& tr, const std::vector<Index>& dead, Index k_aux) {
    std::vector<Index> chosen(dead.begin(), dead.end());
    auto before = [&](Index a, Index b) {
        return tr.pre_codes[a] > tr.pre_codes[b] || (tr.pre_codes[a] == tr.pre_codes[b] && a < b);
    };
    const auto keep = static_cast<std::size_t>(std::max<Index>(0, k_aux));
    if (chosen.size() > keep) {
        std::partial_sort(chosen.begin(), chosen.begin() + static_cast<std::ptrdiff_t>(keep), chosen.end(), before);
        chosen.resize(keep);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

/// Squared error between the residual x - x_hat and its reconstruction from
/// the top-k_aux dead latents. The residual is a fixed target.
template <typename Scalar, typename Derived>
double aux_dead_loss(const TopLevelParams<Scalar>& top, const Eigen::MatrixBase<Derived>& x,
                     const ForwardTrace<Scalar>& tr, const std::vector<Index>& dead, Index k_aux) {
    for (Index i : dead) {
        if (i < 0 || i >= top.D.cols()) throw std::invalid_argument("aux_dead_loss: dead index out of range");
    }
    if (dead.empty() || k_aux <= 0) return 0.0;
    const Vec<Scalar> residual = x - tr.x_hat;
    Vec<Scalar> aux_hat = Vec<Scalar>::Zero(residual.size());
    for (Index i : select_aux_latents(tr, dead, k_aux)) aux_hat.noalias() += tr.pre_codes[i] * top.D.col(i);
    return squared_distance(residual, aux_hat);
}

/// Per-sample terms. The ortho term is parameter-only and left at zero here.
template <typename Scalar, typename Derived>
LossBreakdown sample_losses(const ForwardTrace<Scalar>& tr, const Eigen::MatrixBase<Derived>& x,
                            const HsaeModel<Scalar>& model, const ObjectiveOptions& opts,
                            const AuxContext* aux = nullptr) {
    LossBreakdown lb;
    lb.recon = squared_distance(x, tr.x_hat);
    if (opts.top_recon) lb.top_recon = squared_distance(x, tr.x_hat_high);
    if (opts.l1) lb.sparse = sparse_penalty(tr, opts.l1_form);
    if (aux && aux->dead) lb.aux_dead = aux_dead_loss(model.top, x, tr, *aux->dead, aux->k_aux);
    return lb;
}

template <typename Scalar, typename Derived>
LossBreakdown compute_losses(const ForwardTrace<Scalar>& tr, const Eigen::MatrixBase<Derived>& x,
                             const HsaeModel<Scalar>& model, const LossWeights& w,
                             const ObjectiveOptions& opts = {}, const AuxContext* aux = nullptr) {
    const HsaeConfig& cfg = model.config;
    if (x.size() != cfg.d || tr.x_hat.size() != cfg.d || tr.x_hat_high.size() != cfg.d ||
        tr.pre_codes.size() != cfg.m_top) {
        throw std::invalid_argument("compute_losses: trace does not match model/input dimensions");
    }
    for (const auto& et : tr.experts) {
        if (et.expert < 0 || et.expert >= cfg.m_top || et.low_pre_codes.size() != cfg.a) {
            throw std::invalid_argument("compute_losses: expert trace does not match model");
        }
    }
    LossBreakdown lb = sample_losses(tr, x, model, opts, aux);
    if (opts.ortho) lb.ortho = ortho_penalty(model.top, opts.ortho_form);
    lb.assemble(w);
    return lb;
}

// ---------------------------------------------------------------------------
// Gradients

/// Adds scale * d(per-sample terms)/d(theta) into `g`. Only experts present in
/// the trace are touched.
template <typename Scalar, typename Derived>
void accumulate_sample_gradients(const HsaeModel<Scalar>& model, const Eigen::MatrixBase<Derived>& x,
                                 const ForwardTrace<Scalar>& tr, const LossWeights& w,
                                 const ObjectiveOptions& opts, const AuxContext* aux, Scalar scale,
                                 Gradients<Scalar>& g) {
    const HsaeConfig& cfg = model.config;
    const auto alpha = static_cast<Scalar>(cfg.threshold());
    const auto slope = static_cast<Scalar>(cfg.slope);
    const Index m = cfg.m_top;
    const bool l1 = opts.l1 && w.lambda2 != 0.0;
    const auto l2 = static_cast<Scalar>(w.lambda2);
    auto sgn = [](Scalar v) { return static_cast<Scalar>((v > 0) - (v < 0)); };

    const Vec<Scalar> residual = tr.x_hat - x;
    Vec<Scalar> g_low = Scalar(2) * residual;
    Vec<Scalar> g_high = g_low;
    if (opts.top_recon && w.beta != 0.0) g_high += static_cast<Scalar>(2.0 * w.beta) * (tr.x_hat_high - x);

    // d(loss)/d(pre_codes)
    Vec<Scalar> d_codes = Vec<Scalar>::Zero(m);
    for (std::size_t t = 0; t < tr.codes.size(); ++t) {
        const Index j = tr.codes.indices[t];
        g.top.D.col(j).noalias() += (scale * tr.codes.values[t]) * g_high;
        d_codes[j] = model.top.D.col(j).dot(g_high);
    }
    if (l1) {
        if (opts.l1_form == L1Form::outside_topk) {
            for (Index i = 0; i < m; ++i) {
                if (!tr.codes.contains(i)) d_codes[i] += l2 * sgn(tr.pre_codes[i]);
            }
        } else {
            for (Index j : tr.codes.indices) d_codes[j] += l2 * sgn(tr.pre_codes[j]);
        }
    }

    if (aux && aux->dead && !aux->dead->empty() && aux->k_aux > 0 && w.aux != 0.0) {
        const std::vector<Index> chosen = select_aux_latents(tr, *aux->dead, aux->k_aux);
        Vec<Scalar> aux_hat = Vec<Scalar>::Zero(cfg.d);
        for (Index i : chosen) aux_hat.noalias() += tr.pre_codes[i] * model.top.D.col(i);
        // target is the (detached) residual x - x_hat
        const Vec<Scalar> g_aux = static_cast<Scalar>(2.0 * w.aux) * (aux_hat - (x - tr.x_hat));
        for (Index i : chosen) {
            g.top.D.col(i).noalias() += (scale * tr.pre_codes[i]) * g_aux;
            d_codes[i] += model.top.D.col(i).dot(g_aux);
        }
    }

    for (const auto& et : tr.experts) {
        const auto& ex = model.experts[static_cast<std::size_t>(et.expert)];
        auto& ge = g.experts[static_cast<std::size_t>(et.expert)];
        ge.pi_up.noalias() += scale * g_low * et.x_sub_hat.transpose();
        const Vec<Scalar> g_sub_hat = ex.pi_up.transpose() * g_low;
        ge.D.col(et.selected).noalias() += (scale * et.selected_value) * g_sub_hat;

        Vec<Scalar> d_low = Vec<Scalar>::Zero(cfg.a);
        d_low[et.selected] = ex.D.col(et.selected).dot(g_sub_hat);
        if (l1) {
            for (Index i = 0; i < cfg.a; ++i) {
                if (opts.l1_form == L1Form::all_codes || i != et.selected) d_low[i] += l2 * sgn(et.low_pre_codes[i]);
            }
        }
        Vec<Scalar> d_v(cfg.a);
        for (Index i = 0; i < cfg.a; ++i) d_v[i] = d_low[i] * leaky_threshold_grad(et.pre_activation[i], alpha, slope);
        ge.E.noalias() += scale * d_v * et.x_sub.transpose();
        const Vec<Scalar> d_sub = ex.E.transpose() * d_v;
        ge.pi_down.noalias() += scale * d_sub * x.transpose();
    }

    Vec<Scalar> d_u(m);
    for (Index i = 0; i < m; ++i) d_u[i] = d_codes[i] * leaky_threshold_grad(tr.pre_activation[i], alpha, slope);
    g.top.E.noalias() += scale * d_u * tr.encoder_input.transpose();
    if (cfg.use_bias) g.top.b.noalias() -= scale * (model.top.E.transpose() * d_u);
}

/// Adds scale * lambda1 * d(ortho)/d(E, D) into `g`.
template <typename Scalar>
void accumulate_ortho_gradients(const TopLevelParams<Scalar>& top, const LossWeights& w,
                                const ObjectiveOptions& opts, Scalar scale, Gradients<Scalar>& g) {
    if (!opts.ortho || w.lambda1 == 0.0) return;
    const bool ed = opts.ortho_form == OrthoForm::encoder_decoder;
    Mat<Scalar> prod = ed ? Mat<Scalar>(top.E * top.D) : Mat<Scalar>(top.D * top.E);
    const Index n = prod.rows();
    if (n < 2) return;
    prod.diagonal().setZero();
    const double norm = l2_norm(prod);
    if (norm == 0.0) return;
    const auto nn = static_cast<double>(n);
    prod *= static_cast<Scalar>(w.lambda1 / (norm * (nn * nn - nn))) * scale;
    if (ed) {
        g.top.E.noalias() += prod * top.D.transpose();
        g.top.D.noalias() += top.E.transpose() * prod;
    } else {
        g.top.D.noalias() += prod * top.E.transpose();
        g.top.E.noalias() += top.D.transpose() * prod;
    }
}

template <typename Scalar>
bool gradients_finite(const Gradients<Scalar>& g) {
    auto copy = g;
    for (const auto& blk : param_blocks(copy)) {
        if (!blk.flat().allFinite()) return false;
    }
    return true;
}

/// Gradient of compute_losses(...).total with respect to every parameter.
template <typename Scalar, typename Derived>
Gradients<Scalar> backward(const HsaeModel<Scalar>& model, const Eigen::MatrixBase<Derived>& x,
                           const ForwardTrace<Scalar>& tr, const LossWeights& w,
                           const ObjectiveOptions& opts = {}, const AuxContext* aux = nullptr) {
    Gradients<Scalar> g = Gradients<Scalar>::zeros_like(model);
    accumulate_sample_gradients(model, x, tr, w, opts, aux, Scalar(1), g);
    accumulate_ortho_gradients(model.top, w, opts, Scalar(1), g);
    if (!gradients_finite(g)) throw NumericFailure("backward: non-finite gradient");
    return g;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckResult {
    bool skipped = false;
    std::string skip_reason;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::string worst_param;
    std::size_t checked = 0;
};

struct GradCheckOptions {
    double eps = 1e-3;
    double margin_factor = 3.0;    ///< required distance to any kink, in units of eps (the stencil reaches 2 eps)
    double denominator_floor = 1e-4;  ///< relative error uses max(|a|, |n|, floor)
    Architecture arch = Architecture::hierarchical;
    std::function<void(Gradients<double>&)> tamper;  ///< applied to the analytic gradient
};

/// Smallest distance from the trace to a point where the objective is not
/// differentiable: activation thresholds, TopK boundaries, top-1 boundaries.
inline double kink_margin(const ForwardTrace<double>& tr, double alpha) {
    double margin = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < tr.pre_activation.size(); ++i) margin = std::min(margin, std::abs(tr.pre_activation[i] - alpha));
    if (static_cast<Index>(tr.codes.size()) < tr.pre_codes.size()) {
        double kept_min = std::numeric_limits<double>::infinity();
        double dropped_max = -std::numeric_limits<double>::infinity();
        for (Index i = 0; i < tr.pre_codes.size(); ++i) {
            if (tr.codes.contains(i)) kept_min = std::min(kept_min, tr.pre_codes[i]);
            else dropped_max = std::max(dropped_max, tr.pre_codes[i]);
        }
        margin = std::min(margin, kept_min - dropped_max);
    }
    for (const auto& et : tr.experts) {
        for (Index i = 0; i < et.pre_activation.size(); ++i) margin = std::min(margin, std::abs(et.pre_activation[i] - alpha));
        for (Index i = 0; i < et.low_pre_codes.size(); ++i) {
            if (i != et.selected) margin = std::min(margin, et.selected_value - et.low_pre_codes[i]);
        }
    }
    return margin;
}

/// Fourth-order central differences of the total loss against backward() for
/// every parameter of the active experts and the top level.
template <typename Derived>
GradCheckResult grad_check(const HsaeModel<double>& model, const Eigen::MatrixBase<Derived>& x, const LossWeights& w,
                           const ObjectiveOptions& opts = {}, const GradCheckOptions& gc = {}) {
    GradCheckResult res;
    const Vec<double> xv = x;
    const ForwardTrace<double> tr = forward(model, gc.arch, xv);
    const double margin = kink_margin(tr, model.config.threshold());
    if (!(margin > gc.margin_factor * gc.eps)) {
        res.skipped = true;
        res.skip_reason = "input within " + std::to_string(margin) + " of a non-differentiable boundary (need > " +
                          std::to_string(gc.margin_factor * gc.eps) + ")";
        return res;
    }

    Gradients<double> analytic = backward(model, xv, tr, w, opts);
    if (gc.tamper) gc.tamper(analytic);

    HsaeModel<double> probe = model;
    auto loss_at = [&]() {
        const ForwardTrace<double> t = forward(probe, gc.arch, xv);
        return compute_losses(t, xv, probe, w, opts).total;
    };

    std::vector<bool> active(static_cast<std::size_t>(model.config.m_top), false);
    for (Index j : tr.codes.indices) active[static_cast<std::size_t>(j)] = true;

    auto pblocks = param_blocks(probe);
    auto gblocks = param_blocks(analytic);
    for (std::size_t b = 0; b < pblocks.size(); ++b) {
        const auto& pb = pblocks[b];
        if (pb.expert >= 0 && (gc.arch == Architecture::flat || !active[static_cast<std::size_t>(pb.expert)])) continue;
        double* theta = pb.data();
        const double* grad = gblocks[b].data();
        for (Index i = 0; i < pb.size(); ++i) {
            const double saved = theta[i];
            auto at = [&](double offset) {
                theta[i] = saved + offset;
                return loss_at();
            };
            const double h = gc.eps;
            const double numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            theta[i] = saved;
            const double abs_err = std::abs(grad[i] - numeric);
            const double rel = abs_err / std::max({std::abs(grad[i]), std::abs(numeric), gc.denominator_floor});
            ++res.checked;
            res.max_abs_error = std::max(res.max_abs_error, abs_err);
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = pb.label() + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

}  // namespace hsae

#endif  // HSAE_OBJECTIVE_HPP
