#ifndef HSAE_LINALG_HPP
#define HSAE_LINALG_HPP

// Dense kernels shared by the model, objective and evaluation code.
//
// Everything here is a pure function over Eigen dense types, templated on the
// scalar. Reductions run left to right with a double accumulator so results
// do not depend on vectorization width.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsae/errors.hpp"

namespace hsae {

using Index = Eigen::Index;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Samples-by-features data, one activation vector per row.
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Sparse code: strictly increasing latent indices with matching values.
template <typename Scalar>
struct SparseCode {
    std::vector<Index> indices;
    std::vector<Scalar> values;

    std::size_t size() const { return indices.size(); }

    bool contains(Index i) const {
        return std::binary_search(indices.begin(), indices.end(), i);
    }

    Vec<Scalar> to_dense(Index n) const {
        Vec<Scalar> out = Vec<Scalar>::Zero(n);
        for (std::size_t t = 0; t < indices.size(); ++t) out[indices[t]] = values[t];
        return out;
    }
};

/// Multiply-accumulate tally. Kernels that take a counter add the number of
/// scalar products they actually execute.
struct MacCounter {
    std::uint64_t macs = 0;
};

/// Ranks entries of `v` by signed value (largest first), ties to the lowest
/// index, and returns all n positions in that order.
template <typename Derived>
std::vector<Index> rank_descending(const Eigen::MatrixBase<Derived>& v) {
    std::vector<Index> order(static_cast<std::size_t>(v.size()));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return v[a] > v[b]; });
    return order;
}

/// Keeps the k largest entries by signed value. Ties break toward the lower
/// index; the returned indices are increasing.
template <typename Derived>
SparseCode<typename Derived::Scalar> top_k(const Eigen::MatrixBase<Derived>& v, Index k) {
    using Scalar = typename Derived::Scalar;
    const Index n = v.size();
    if (k < 1 || k > n) {
        throw std::invalid_argument("top_k: k=" + std::to_string(k) +
                                    " outside [1, " + std::to_string(n) + "]");
    }
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    auto before = [&](Index a, Index b) {
        return v[a] > v[b] || (v[a] == v[b] && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), before);
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());

    SparseCode<Scalar> code;
    code.indices = std::move(order);
    code.values.reserve(code.indices.size());
    for (Index i : code.indices) code.values.push_back(v[i]);
    return code;
}

/// Index of the single largest entry (lowest index on ties).
template <typename Derived>
Index argmax_first(const Eigen::MatrixBase<Derived>& v) {
    Index best = 0;
    for (Index i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

/// Thresholded leaky ReLU: identity above `alpha`, `slope * (u - alpha)` at or
/// below it.
template <typename Scalar>
inline Scalar leaky_threshold(Scalar u, Scalar alpha, Scalar slope) {
    return u > alpha ? u : slope * (u - alpha);
}

template <typename Scalar>
inline Scalar leaky_threshold_grad(Scalar u, Scalar alpha, Scalar slope) {
    return u > alpha ? Scalar(1) : slope;
}

template <typename Derived>
Vec<typename Derived::Scalar> thresholded_leaky_relu(const Eigen::MatrixBase<Derived>& v,
                                                     typename Derived::Scalar alpha,
                                                     typename Derived::Scalar slope) {
    using Scalar = typename Derived::Scalar;
    return v.unaryExpr([alpha, slope](Scalar u) { return leaky_threshold(u, alpha, slope); });
}

template <typename Derived>
double sum_squares(const Eigen::MatrixBase<Derived>& v) {
    double acc = 0.0;
    for (Index j = 0; j < v.cols(); ++j) {
        for (Index i = 0; i < v.rows(); ++i) {
            const double e = static_cast<double>(v(i, j));
            acc += e * e;
        }
    }
    return acc;
}

template <typename Derived>
double l2_norm(const Eigen::MatrixBase<Derived>& v) {
    return std::sqrt(sum_squares(v));
}

template <typename Derived>
double l1_norm(const Eigen::MatrixBase<Derived>& v) {
    double acc = 0.0;
    for (Index i = 0; i < v.size(); ++i) acc += std::abs(static_cast<double>(v[i]));
    return acc;
}

/// Squared distance ||a - b||^2 accumulated in double.
template <typename DA, typename DB>
double squared_distance(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
    double acc = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        const double e = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += e * e;
    }
    return acc;
}

/// Frobenius norm of `m` with its diagonal zeroed.
template <typename Derived>
double offdiag_frobenius(const Eigen::MatrixBase<Derived>& m) {
    if (m.rows() != m.cols() || m.rows() < 2) {
        throw std::invalid_argument("offdiag_frobenius: expected square matrix with n >= 2, got " +
                                    std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
    double acc = 0.0;
    for (Index j = 0; j < m.cols(); ++j) {
        for (Index i = 0; i < m.rows(); ++i) {
            if (i == j) continue;
            const double e = static_cast<double>(m(i, j));
            acc += e * e;
        }
    }
    return std::sqrt(acc);
}

template <typename Derived>
Vec<typename Derived::Scalar> unit_normalize(const Eigen::MatrixBase<Derived>& v) {
    using Scalar = typename Derived::Scalar;
    const double norm = l2_norm(v);
    if (!(norm > 0.0)) throw DegenerateInput("unit_normalize: zero vector");
    return (v.template cast<double>() / norm).template cast<Scalar>();
}

/// Dense y = A x, tallying rows*cols products.
template <typename DA, typename DX>
Vec<typename DA::Scalar> matvec(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DX>& x,
                                MacCounter* counter = nullptr) {
    if (counter) counter->macs += static_cast<std::uint64_t>(a.rows() * a.cols());
    return a * x;
}

/// y = sum_t values[t] * A.col(indices[t]), tallying rows per nonzero.
template <typename DA>
Vec<typename DA::Scalar> sparse_decode(const Eigen::MatrixBase<DA>& a,
                                       const SparseCode<typename DA::Scalar>& code,
                                       MacCounter* counter = nullptr) {
    Vec<typename DA::Scalar> y = Vec<typename DA::Scalar>::Zero(a.rows());
    for (std::size_t t = 0; t < code.size(); ++t) y.noalias() += code.values[t] * a.col(code.indices[t]);
    if (counter) counter->macs += static_cast<std::uint64_t>(a.rows()) * code.size();
    return y;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
    return m.allFinite();
}

}  // namespace hsae

#endif  // HSAE_LINALG_HPP
