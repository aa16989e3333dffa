#ifndef HSAE_MODEL_HPP
#define HSAE_MODEL_HPP

// Parameters and forward passes for the hierarchical SAE and the flat TopK
// baseline, plus the analytic multiply-accumulate accountant.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsae/linalg.hpp"

namespace hsae {

struct HsaeConfig {
    Index d = 64;
    Index m_top = 256;
    Index k = 32;
    Index a = 16;  ///< sublatents per expert
    Index s = 4;   ///< expert subspace dimension
    double alpha = -1.0;  ///< activation threshold; negative selects 1/sqrt(d)
    double slope = 0.01;
    double beta = 0.1;
    double lambda1 = 0.1;
    double lambda2 = 0.001;
    bool use_bias = false;

    double threshold() const { return alpha >= 0.0 ? alpha : 1.0 / std::sqrt(static_cast<double>(d)); }

    void validate() const {
        auto fail = [](const std::string& what) { throw std::invalid_argument("HsaeConfig: " + what); };
        if (d < 1) fail("d must be >= 1");
        if (m_top < 1) fail("m_top must be >= 1");
        if (k < 1 || k > m_top) fail("k must lie in [1, m_top]");
        if (a < 1) fail("a must be >= 1");
        if (s < 1 || s > d) fail("s must lie in [1, d]");
        if (!(slope >= 0.0)) fail("slope must be >= 0");
        if (!(beta >= 0.0 && lambda1 >= 0.0 && lambda2 >= 0.0)) fail("loss weights must be >= 0");
        if (!(std::isfinite(threshold()) && threshold() >= 0.0)) fail("alpha must be >= 0");
    }

    bool same_shape(const HsaeConfig& o) const {
        return d == o.d && m_top == o.m_top && k == o.k && a == o.a && s == o.s && use_bias == o.use_bias;
    }
};

template <typename Scalar>
struct TopLevelParams {
    Mat<Scalar> E;  ///< m_top x d
    Mat<Scalar> D;  ///< d x m_top
    Vec<Scalar> b;  ///< d, empty when the bias is disabled
};

template <typename Scalar>
struct ExpertParams {
    Mat<Scalar> pi_down;  ///< s x d
    Mat<Scalar> pi_up;    ///< d x s
    Mat<Scalar> E;        ///< a x s
    Mat<Scalar> D;        ///< s x a
};

template <typename Scalar>
struct HsaeModel {
    HsaeConfig config;
    TopLevelParams<Scalar> top;
    std::vector<ExpertParams<Scalar>> experts;

    /// All parameters zero, shaped by `cfg`.
    static HsaeModel zeros(const HsaeConfig& cfg) {
        HsaeModel m;
        m.config = cfg;
        m.top.E = Mat<Scalar>::Zero(cfg.m_top, cfg.d);
        m.top.D = Mat<Scalar>::Zero(cfg.d, cfg.m_top);
        if (cfg.use_bias) m.top.b = Vec<Scalar>::Zero(cfg.d);
        m.experts.resize(static_cast<std::size_t>(cfg.m_top));
        for (auto& ex : m.experts) {
            ex.pi_down = Mat<Scalar>::Zero(cfg.s, cfg.d);
            ex.pi_up = Mat<Scalar>::Zero(cfg.d, cfg.s);
            ex.E = Mat<Scalar>::Zero(cfg.a, cfg.s);
            ex.D = Mat<Scalar>::Zero(cfg.s, cfg.a);
        }
        return m;
    }

    static HsaeModel zeros_like(const HsaeModel& other) { return zeros(other.config); }

    template <typename Other>
    HsaeModel<Other> cast() const {
        HsaeModel<Other> out;
        out.config = config;
        out.top.E = top.E.template cast<Other>();
        out.top.D = top.D.template cast<Other>();
        out.top.b = top.b.template cast<Other>();
        out.experts.resize(experts.size());
        for (std::size_t j = 0; j < experts.size(); ++j) {
            out.experts[j].pi_down = experts[j].pi_down.template cast<Other>();
            out.experts[j].pi_up = experts[j].pi_up.template cast<Other>();
            out.experts[j].E = experts[j].E.template cast<Other>();
            out.experts[j].D = experts[j].D.template cast<Other>();
        }
        return out;
    }
};

/// Gradients mirror the model field for field.
template <typename Scalar>
using Gradients = HsaeModel<Scalar>;

/// A view of one parameter block in canonical order.
template <typename Scalar>
struct ParamBlock {
    const char* name;  ///< "E", "D", "b", "pi_down", "pi_up", "E_j", "D_j"
    Index expert;      ///< -1 for top-level blocks
    Mat<Scalar>* mat = nullptr;
    Vec<Scalar>* vec = nullptr;

    Scalar* data() const { return mat ? mat->data() : vec->data(); }
    Index size() const { return mat ? mat->size() : vec->size(); }
    Index rows() const { return mat ? mat->rows() : vec->size(); }
    Index cols() const { return mat ? mat->cols() : 1; }
    Eigen::Map<Vec<Scalar>> flat() const { return {data(), size()}; }

    std::string label() const {
        if (expert < 0) return name;
        return "experts[" + std::to_string(expert) + "]." + name;
    }
};

/// Parameter blocks in the fixed order E, D, [b], then per expert
/// pi_down, pi_up, E_j, D_j.
template <typename Scalar>
std::vector<ParamBlock<Scalar>> param_blocks(HsaeModel<Scalar>& m) {
    std::vector<ParamBlock<Scalar>> out;
    out.reserve(3 + 4 * m.experts.size());
    out.push_back({"E", -1, &m.top.E, nullptr});
    out.push_back({"D", -1, &m.top.D, nullptr});
    if (m.config.use_bias) out.push_back({"b", -1, nullptr, &m.top.b});
    for (std::size_t j = 0; j < m.experts.size(); ++j) {
        auto& ex = m.experts[j];
        const auto jj = static_cast<Index>(j);
        out.push_back({"pi_down", jj, &ex.pi_down, nullptr});
        out.push_back({"pi_up", jj, &ex.pi_up, nullptr});
        out.push_back({"E_j", jj, &ex.E, nullptr});
        out.push_back({"D_j", jj, &ex.D, nullptr});
    }
    return out;
}

/// Random initialization: unit-norm top-level decoder columns with a tied
/// encoder, random orthonormal-ish expert projectors, tied expert SAEs.
template <typename Scalar>
HsaeModel<Scalar> init_model(const HsaeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    HsaeModel<Scalar> m = HsaeModel<Scalar>::zeros(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto gaussian = [&](Index r, Index c) {
        Mat<double> g(r, c);
        for (Index j = 0; j < c; ++j)
            for (Index i = 0; i < r; ++i) g(i, j) = normal(rng);
        return g;
    };

    Mat<double> dec = gaussian(cfg.d, cfg.m_top);
    for (Index j = 0; j < cfg.m_top; ++j) dec.col(j) /= l2_norm(dec.col(j));
    m.top.D = dec.cast<Scalar>();
    m.top.E = dec.transpose().cast<Scalar>();

    for (auto& ex : m.experts) {
        Mat<double> down = gaussian(cfg.s, cfg.d);
        for (Index i = 0; i < cfg.s; ++i) down.row(i) /= l2_norm(down.row(i).transpose());
        ex.pi_down = down.cast<Scalar>();
        ex.pi_up = down.transpose().cast<Scalar>();
        Mat<double> enc = gaussian(cfg.a, cfg.s);
        for (Index i = 0; i < cfg.a; ++i) enc.row(i) /= l2_norm(enc.row(i).transpose());
        ex.E = enc.cast<Scalar>();
        ex.D = enc.transpose().cast<Scalar>();
    }
    return m;
}

template <typename Scalar>
struct ExpertTrace {
    Index expert = -1;
    Vec<Scalar> x_sub;            ///< pi_down x
    Vec<Scalar> pre_activation;   ///< E_j x_sub
    Vec<Scalar> low_pre_codes;    ///< activation of the above, length a
    Index selected = -1;          ///< top-1 sublatent
    Scalar selected_value{};
    Vec<Scalar> x_sub_hat;        ///< D_j one_sparse(selected), length s
    Vec<Scalar> x_hat_low;        ///< pi_up x_sub_hat, length d
};

template <typename Scalar>
struct ForwardTrace {
    Vec<Scalar> encoder_input;   ///< x - b (x when the bias is off)
    Vec<Scalar> pre_activation;  ///< E (x - b)
    Vec<Scalar> pre_codes;       ///< post-activation, pre-TopK, length m_top
    SparseCode<Scalar> codes;
    Vec<Scalar> x_hat_high;
    std::vector<ExpertTrace<Scalar>> experts;  ///< ascending expert index
    Vec<Scalar> x_hat;
};

namespace detail {

inline void require_dim(const char* where, const char* what, Index got, Index want) {
    if (got != want) {
        throw std::invalid_argument(std::string(where) + ": " + what + " has size " + std::to_string(got) +
                                    ", expected " + std::to_string(want));
    }
}

}  // namespace detail

template <typename Scalar, typename Derived>
ForwardTrace<Scalar> forward_baseline(const TopLevelParams<Scalar>& top, const HsaeConfig& cfg,
                                      const Eigen::MatrixBase<Derived>& x, MacCounter* counter = nullptr) {
    detail::require_dim("forward_baseline", "x", x.size(), cfg.d);
    detail::require_dim("forward_baseline", "E rows", top.E.rows(), cfg.m_top);
    detail::require_dim("forward_baseline", "E cols", top.E.cols(), cfg.d);
    detail::require_dim("forward_baseline", "D rows", top.D.rows(), cfg.d);
    detail::require_dim("forward_baseline", "D cols", top.D.cols(), cfg.m_top);
    const auto alpha = static_cast<Scalar>(cfg.threshold());
    const auto slope = static_cast<Scalar>(cfg.slope);

    ForwardTrace<Scalar> tr;
    if (cfg.use_bias) {
        detail::require_dim("forward_baseline", "b", top.b.size(), cfg.d);
        tr.encoder_input = x - top.b;
    } else {
        tr.encoder_input = x;
    }
    tr.pre_activation = matvec(top.E, tr.encoder_input, counter);
    tr.pre_codes = thresholded_leaky_relu(tr.pre_activation, alpha, slope);
    tr.codes = top_k(tr.pre_codes, cfg.k);
    tr.x_hat_high = sparse_decode(top.D, tr.codes, counter);
    tr.x_hat = tr.x_hat_high;
    return tr;
}

template <typename Scalar, typename Derived>
ExpertTrace<Scalar> forward_expert(const ExpertParams<Scalar>& ex, const HsaeConfig& cfg,
                                   const Eigen::MatrixBase<Derived>& x, MacCounter* counter = nullptr) {
    detail::require_dim("forward_expert", "x", x.size(), cfg.d);
    detail::require_dim("forward_expert", "pi_down cols", ex.pi_down.cols(), cfg.d);
    detail::require_dim("forward_expert", "pi_down rows", ex.pi_down.rows(), cfg.s);
    detail::require_dim("forward_expert", "pi_up rows", ex.pi_up.rows(), cfg.d);
    detail::require_dim("forward_expert", "pi_up cols", ex.pi_up.cols(), cfg.s);
    detail::require_dim("forward_expert", "E_j rows", ex.E.rows(), cfg.a);
    detail::require_dim("forward_expert", "E_j cols", ex.E.cols(), cfg.s);
    detail::require_dim("forward_expert", "D_j rows", ex.D.rows(), cfg.s);
    detail::require_dim("forward_expert", "D_j cols", ex.D.cols(), cfg.a);
    const auto alpha = static_cast<Scalar>(cfg.threshold());
    const auto slope = static_cast<Scalar>(cfg.slope);

    ExpertTrace<Scalar> et;
    et.x_sub = matvec(ex.pi_down, x, counter);
    et.pre_activation = matvec(ex.E, et.x_sub, counter);
    et.low_pre_codes = thresholded_leaky_relu(et.pre_activation, alpha, slope);
    et.selected = argmax_first(et.low_pre_codes);
    et.selected_value = et.low_pre_codes[et.selected];
    Vec<Scalar> one_sparse = Vec<Scalar>::Zero(cfg.a);
    one_sparse[et.selected] = et.selected_value;
    et.x_sub_hat = matvec(ex.D, one_sparse, counter);
    et.x_hat_low = matvec(ex.pi_up, et.x_sub_hat, counter);
    return et;
}

/// Full hierarchical forward pass. Only experts selected by the top-level
/// TopK are read.
template <typename Scalar, typename Derived>
ForwardTrace<Scalar> forward_hsae(const HsaeModel<Scalar>& model, const Eigen::MatrixBase<Derived>& x,
                                  MacCounter* counter = nullptr) {
    const HsaeConfig& cfg = model.config;
    detail::require_dim("forward_hsae", "experts", static_cast<Index>(model.experts.size()), cfg.m_top);
    ForwardTrace<Scalar> tr = forward_baseline(model.top, cfg, x, counter);
    tr.experts.reserve(tr.codes.size());
    for (Index j : tr.codes.indices) {
        tr.experts.push_back(forward_expert(model.experts[static_cast<std::size_t>(j)], cfg, x, counter));
        tr.experts.back().expert = j;
        tr.x_hat += tr.experts.back().x_hat_low;
    }
    return tr;
}

/// Which forward pass a model is evaluated with.
enum class Architecture { hierarchical, flat };

template <typename Scalar, typename Derived>
ForwardTrace<Scalar> forward(const HsaeModel<Scalar>& model, Architecture arch,
                             const Eigen::MatrixBase<Derived>& x, MacCounter* counter = nullptr) {
    return arch == Architecture::hierarchical ? forward_hsae(model, x, counter)
                                              : forward_baseline(model.top, model.config, x, counter);
}

/// Multiply-accumulate counts per forward-pass stage.
struct FlopBreakdown {
    std::uint64_t top_encode = 0;
    std::uint64_t down_proj = 0;
    std::uint64_t low_encode = 0;
    std::uint64_t low_decode = 0;
    std::uint64_t up_proj = 0;
    std::uint64_t top_decode = 0;

    std::uint64_t total() const { return top_encode + down_proj + low_encode + low_decode + up_proj + top_decode; }
    double top_encode_share() const {
        return total() == 0 ? 0.0 : static_cast<double>(top_encode) / static_cast<double>(total());
    }
};

/// No validation beyond non-negativity so that k = 0 can be analysed.
inline FlopBreakdown flop_breakdown(const HsaeConfig& cfg) {
    auto u = [](Index v) {
        if (v < 0) throw std::invalid_argument("flop_breakdown: negative dimension");
        return static_cast<std::uint64_t>(v);
    };
    const auto d = u(cfg.d), m = u(cfg.m_top), k = u(cfg.k), s = u(cfg.s), a = u(cfg.a);
    FlopBreakdown f;
    f.top_encode = m * d;
    f.down_proj = k * s * d;
    f.low_encode = k * a * s;
    f.low_decode = k * s * a;
    f.up_proj = k * s * d;
    f.top_decode = k * d;
    return f;
}

}  // namespace hsae

#endif  // HSAE_MODEL_HPP
