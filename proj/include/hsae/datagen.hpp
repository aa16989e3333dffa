#ifndef HSAE_DATAGEN_HPP
#define HSAE_DATAGEN_HPP

// Synthetic hierarchical activations with a planted ground-truth dictionary.
//
// Each parent concept has a unit vector and a low-rank subspace orthogonal to
// it. A child concept is the parent vector plus a point in that subspace, so
// a sample built from (parent, child, coeff) draws is
//     x = normalize(sum coeff * (parent + child_offset) + noise).

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "hsae/linalg.hpp"

namespace hsae {

struct DictionarySpec {
    Index d = 64;
    Index n_parents = 32;
    Index n_children = 8;
    Index s_true = 4;
    double parents_per_sample = 2.0;
    double noise_sigma = 0.05;  ///< per-coordinate Gaussian noise before normalization
    double child_scale = 0.5;   ///< norm of a child offset relative to its unit parent
    bool orthogonalize = true;  ///< orthogonalize parents when n_parents <= d
    std::uint64_t seed = 0;

    void validate() const;
};

struct SyntheticDictionary {
    Mat<double> parent_vecs;               ///< n_parents x d, unit rows
    std::vector<Mat<double>> child_bases;  ///< per parent, s_true x d, orthonormal rows
    std::vector<Mat<double>> child_coords; ///< per parent, n_children x s_true

    Index n_parents() const { return parent_vecs.rows(); }
    Index d() const { return parent_vecs.cols(); }

    /// parent + child offset (not normalized).
    Vec<double> child_vector(Index parent, Index child) const;
};

struct ConceptDraw {
    Index parent = 0;
    Index child = 0;
    double coeff = 0.0;
};

struct LabeledBatch {
    RowMat<float> X;  ///< n x d, unit-norm rows
    std::vector<std::vector<ConceptDraw>> labels;
};

SyntheticDictionary plant_dictionary(const DictionarySpec& spec);

/// Draws `n` labeled samples. `stream` selects an independent random stream
/// for the same spec seed (used for held-out and paired sets).
LabeledBatch sample_activations(const SyntheticDictionary& dict, Index n, const DictionarySpec& spec,
                                std::uint64_t stream = 0);

/// Composes a noise-free sample from concept draws, unit-normalized.
Vec<double> compose(const SyntheticDictionary& dict, const std::vector<ConceptDraw>& draws);

/// Pairs of noisy views of identical concept draws.
struct PairedViews {
    RowMat<float> A;
    RowMat<float> B;
    std::vector<std::vector<ConceptDraw>> labels;
};

PairedViews sample_pairs(const SyntheticDictionary& dict, Index n, const DictionarySpec& spec,
                         std::uint64_t stream = 1);

/// Symmetric inverse square root of the sample covariance, with an eigenvalue
/// floor. Returns the whitened, mean-centered data and the whitening matrix.
struct Whitened {
    Mat<double> X_white;
    Mat<double> W;
    Vec<double> mean;
};

Whitened whiten(const Mat<double>& X, double eig_floor = 1e-8);

/// 0/1 indicator per row: whether `parent` appears in the row's labels.
std::vector<int> parent_indicator(const std::vector<std::vector<ConceptDraw>>& labels, Index parent);

// Label file: one line per row, "row parent child coeff [parent child coeff ...]",
// whitespace separated, coefficients printed with 17 significant digits.
// Lines starting with '#' are comments.
void write_labels(std::ostream& os, const std::vector<std::vector<ConceptDraw>>& labels);
void write_labels(const std::string& path, const std::vector<std::vector<ConceptDraw>>& labels);
std::vector<std::vector<ConceptDraw>> read_labels(const std::string& path);

}  // namespace hsae

#endif  // HSAE_DATAGEN_HPP
