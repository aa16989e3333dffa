#ifndef HSAE_EVAL_HPP
#define HSAE_EVAL_HPP

// Quantitative evaluation of trained models.

#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hsae/datagen.hpp"
#include "hsae/linalg.hpp"
#include "hsae/model.hpp"

namespace hsae {

/// sum_i ||x_i - x_hat_i||^2 / sum_i ||x_i - mean||^2.
double one_minus_ev(const RowMat<float>& X, const RowMat<float>& X_hat);
double one_minus_ev(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X);

/// Reconstructions of every row.
RowMat<float> reconstruct(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X);

struct RecoveryMatch {
    Index parent = 0;
    Index latent = 0;
    double cosine = 0.0;
};

struct RecoveryResult {
    double mean_max_cosine = 0.0;
    std::vector<RecoveryMatch> matching;  ///< ordered by parent index
};

/// Greedy one-to-one matching of planted parents to decoder columns by
/// descending signed cosine.
RecoveryResult recovery_score(const Mat<double>& decoder, const Mat<double>& parent_vecs);
RecoveryResult recovery_score(const HsaeModel<float>& model, const SyntheticDictionary& dict);

/// Top-n latent indices of a code vector by value (ties to the lower index).
std::vector<Index> top_n_set(const Vec<float>& activations, Index n);

/// |A symmetric-difference B| for two index sets.
Index symmetric_difference_size(std::vector<Index> a, std::vector<Index> b);

/// The top_n selected latents of a code by value (ties to the lower index),
/// returned in increasing index order. Fewer than top_n when fewer are active.
std::vector<Index> active_top_n(const SparseCode<float>& code, Index n);

/// Mean over pairs of the symmetric difference between the top_n most strongly
/// activated (TopK-selected) top-level latents of the two views.
double paired_divergence(const HsaeModel<float>& model, const RowMat<float>& A, const RowMat<float>& B,
                         Index top_n = 8);

/// Least-squares probe from codes to a binary attribute. The mass of latent i
/// is |w_i * mean activation of i over positive rows|; the score is
/// 1 - max_i mass_i / sum_i mass_i.
struct AbsorptionDetail {
    double score = 0.0;
    std::vector<double> masses;
    Vec<double> probe;  ///< length m (intercept excluded)
};

AbsorptionDetail absorption_from_codes(const Mat<double>& codes, const std::vector<int>& attr);
double absorption_from_masses(const std::vector<double>& masses);

/// Dense top-level codes (post-TopK), one row per sample.
Mat<double> top_level_codes(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X);

double absorption_score(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X,
                        const std::vector<int>& attr);

/// Average absorption over planted parents that have at least `min_count`
/// positive and negative rows.
double mean_parent_absorption(const Mat<double>& codes, const std::vector<std::vector<ConceptDraw>>& labels,
                              Index n_parents, Index min_count = 10);

/// Fraction of top-level latents never selected on X.
double inactive_fraction(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X);

struct FeatureHit {
    Index row = 0;
    double value = 0.0;
    std::string meta;
};

struct FeatureReport {
    std::vector<std::vector<FeatureHit>> top;                  ///< per top-level latent
    std::vector<std::vector<std::vector<FeatureHit>>> sub;     ///< per expert, per sublatent
};

/// For every top-level latent and every expert sublatent, the top_m rows by
/// selected activation value, descending. Sublatent hits only come from rows
/// where the parent expert was selected.
FeatureReport feature_report(const HsaeModel<float>& model, const RowMat<float>& X,
                             const std::vector<std::string>& meta, Index top_m);

void write_feature_report(std::ostream& os, const FeatureReport& report);

struct EvalReport {
    double one_minus_ev = 0.0;
    std::optional<RecoveryResult> recovery;
    std::optional<double> paired_divergence;
    std::optional<double> absorption;
    double dead_fraction = 0.0;
};

// Eval report format: "key = value" lines in this order, absent metrics omitted:
//   one_minus_ev, recovery_mean_max_cosine, recovery_matching, paired_divergence,
//   absorption, dead_fraction
// recovery_matching is a space-separated list of parent:latent:cosine.
void write_eval_report(std::ostream& os, const EvalReport& report);
EvalReport read_eval_report(const std::string& path);

/// Side-by-side table of two reports.
void write_comparison(std::ostream& os, const std::string& name_a, const EvalReport& a, const std::string& name_b,
                      const EvalReport& b);

}  // namespace hsae

#endif  // HSAE_EVAL_HPP
