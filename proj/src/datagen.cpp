#include "hsae/datagen.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

namespace hsae {

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

Mat<double> gaussian(std::mt19937_64& rng, Index rows, Index cols) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Mat<double> g(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) g(i, j) = normal(rng);
    return g;
}

// Mean of Poisson(rate) conditioned on [1, hi].
double truncated_poisson_mean(double rate, Index hi) {
    double p = std::exp(-rate);  // P(0)
    double mass = 0.0, first = 0.0;
    for (Index k = 1; k <= hi; ++k) {
        p *= rate / static_cast<double>(k);
        mass += p;
        first += static_cast<double>(k) * p;
    }
    return mass > 0.0 ? first / mass : 1.0;
}

// Rate whose [1, hi]-truncated Poisson has the requested mean.
double solve_truncated_rate(double mean, Index hi) {
    if (mean <= 1.0 || hi <= 1) return 0.0;
    double lo = 1e-9, up = std::max(1.0, mean);
    while (truncated_poisson_mean(up, hi) < mean && up < 1e6) up *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + up);
        (truncated_poisson_mean(mid, hi) < mean ? lo : up) = mid;
    }
    return 0.5 * (lo + up);
}

class DrawSampler {
public:
    DrawSampler(const SyntheticDictionary& dict, const DictionarySpec& spec)
        : n_parents_(dict.n_parents()),
          n_children_(static_cast<Index>(dict.child_coords.empty() ? 0 : dict.child_coords.front().rows())),
          rate_(solve_truncated_rate(spec.parents_per_sample, dict.n_parents())) {}

    std::vector<ConceptDraw> operator()(std::mt19937_64& rng) const {
        Index count = 1;
        if (rate_ > 0.0) {
            std::poisson_distribution<long> pois(rate_);
            do {
                count = static_cast<Index>(pois(rng));
            } while (count < 1 || count > n_parents_);
        }
        std::vector<Index> pool(static_cast<std::size_t>(n_parents_));
        for (Index i = 0; i < n_parents_; ++i) pool[static_cast<std::size_t>(i)] = i;
        for (Index i = 0; i < count; ++i) {
            std::uniform_int_distribution<Index> pick(i, n_parents_ - 1);
            std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
        }
        pool.resize(static_cast<std::size_t>(count));
        std::sort(pool.begin(), pool.end());

        std::uniform_int_distribution<Index> child(0, n_children_ - 1);
        std::uniform_real_distribution<double> coeff(0.5, 1.5);
        std::vector<ConceptDraw> draws;
        draws.reserve(pool.size());
        for (Index p : pool) {
            const Index c = child(rng);
            draws.push_back({p, c, coeff(rng)});
        }
        return draws;
    }

private:
    Index n_parents_;
    Index n_children_;
    double rate_;
};

Vec<double> signal_of(const SyntheticDictionary& dict, const std::vector<ConceptDraw>& draws) {
    Vec<double> x = Vec<double>::Zero(dict.d());
    for (const auto& dr : draws) x += dr.coeff * dict.child_vector(dr.parent, dr.child);
    return x;
}

Vec<double> noisy_view(const Vec<double>& signal, double sigma, std::mt19937_64& rng) {
    Vec<double> x = signal;
    if (sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, sigma);
        for (Index i = 0; i < x.size(); ++i) x[i] += noise(rng);
    }
    return unit_normalize(x);
}

}  // namespace

void DictionarySpec::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("DictionarySpec: " + what); };
    if (d < 1 || n_parents < 1 || n_children < 1 || s_true < 1) fail("sizes must be >= 1");
    if (s_true + 1 > d) fail("s_true + 1 must not exceed d");
    if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
    if (!(parents_per_sample >= 1.0 && parents_per_sample <= static_cast<double>(n_parents))) {
        fail("parents_per_sample must lie in [1, n_parents]");
    }
    if (!(child_scale >= 0.0)) fail("child_scale must be >= 0");
}

Vec<double> SyntheticDictionary::child_vector(Index parent, Index child) const {
    const auto p = static_cast<std::size_t>(parent);
    return parent_vecs.row(parent).transpose() + child_bases[p].transpose() * child_coords[p].row(child).transpose();
}

SyntheticDictionary plant_dictionary(const DictionarySpec& spec) {
    spec.validate();
    auto rng = make_rng(spec.seed, 0x9e3779b97f4a7c15ULL);
    SyntheticDictionary dict;

    Mat<double> parents = gaussian(rng, spec.n_parents, spec.d);
    if (spec.orthogonalize && spec.n_parents <= spec.d) {
        Eigen::HouseholderQR<Mat<double>> qr(parents.transpose());
        Mat<double> q = qr.householderQ() * Mat<double>::Identity(spec.d, spec.n_parents);
        parents = q.transpose();
    }
    for (Index i = 0; i < spec.n_parents; ++i) parents.row(i) /= l2_norm(parents.row(i).transpose());
    dict.parent_vecs = parents;

    for (Index p = 0; p < spec.n_parents; ++p) {
        Mat<double> cols(spec.d, spec.s_true + 1);
        cols.col(0) = parents.row(p).transpose();
        cols.rightCols(spec.s_true) = gaussian(rng, spec.d, spec.s_true);
        Eigen::HouseholderQR<Mat<double>> qr(cols);
        Mat<double> q = qr.householderQ() * Mat<double>::Identity(spec.d, spec.s_true + 1);
        dict.child_bases.push_back(q.rightCols(spec.s_true).transpose());

        Mat<double> coords = gaussian(rng, spec.n_children, spec.s_true);
        for (Index c = 0; c < spec.n_children; ++c) {
            coords.row(c) *= spec.child_scale / l2_norm(coords.row(c).transpose());
        }
        dict.child_coords.push_back(coords);
    }
    return dict;
}

Vec<double> compose(const SyntheticDictionary& dict, const std::vector<ConceptDraw>& draws) {
    return unit_normalize(signal_of(dict, draws));
}

LabeledBatch sample_activations(const SyntheticDictionary& dict, Index n, const DictionarySpec& spec,
                                std::uint64_t stream) {
    if (n < 1) throw std::invalid_argument("sample_activations: n must be >= 1");
    auto rng = make_rng(spec.seed, 2 * stream + 1);
    const DrawSampler draw(dict, spec);
    LabeledBatch out;
    out.X.resize(n, dict.d());
    out.labels.reserve(static_cast<std::size_t>(n));
    for (Index r = 0; r < n; ++r) {
        auto draws = draw(rng);
        out.X.row(r) = noisy_view(signal_of(dict, draws), spec.noise_sigma, rng).cast<float>().transpose();
        out.labels.push_back(std::move(draws));
    }
    return out;
}

PairedViews sample_pairs(const SyntheticDictionary& dict, Index n, const DictionarySpec& spec, std::uint64_t stream) {
    if (n < 1) throw std::invalid_argument("sample_pairs: n must be >= 1");
    auto rng = make_rng(spec.seed, 2 * stream + 2);
    const DrawSampler draw(dict, spec);
    PairedViews out;
    out.A.resize(n, dict.d());
    out.B.resize(n, dict.d());
    for (Index r = 0; r < n; ++r) {
        auto draws = draw(rng);
        const Vec<double> sig = signal_of(dict, draws);
        out.A.row(r) = noisy_view(sig, spec.noise_sigma, rng).cast<float>().transpose();
        out.B.row(r) = noisy_view(sig, spec.noise_sigma, rng).cast<float>().transpose();
        out.labels.push_back(std::move(draws));
    }
    return out;
}

Whitened whiten(const Mat<double>& X, double eig_floor) {
    if (X.rows() < X.cols()) {
        throw std::invalid_argument("whiten: need rows >= cols, got " + std::to_string(X.rows()) + "x" +
                                    std::to_string(X.cols()));
    }
    Whitened out;
    out.mean = X.colwise().mean().transpose();
    const Mat<double> centered = X.rowwise() - out.mean.transpose();
    const Mat<double> cov = (centered.transpose() * centered) / static_cast<double>(X.rows());
    Eigen::SelfAdjointEigenSolver<Mat<double>> eig(cov);
    const Vec<double> inv_sqrt = eig.eigenvalues().unaryExpr([eig_floor](double l) {
        return 1.0 / std::sqrt(std::max(l, eig_floor));
    });
    out.W = eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose();
    out.X_white = centered * out.W;
    return out;
}

std::vector<int> parent_indicator(const std::vector<std::vector<ConceptDraw>>& labels, Index parent) {
    std::vector<int> out;
    out.reserve(labels.size());
    for (const auto& row : labels) {
        out.push_back(std::any_of(row.begin(), row.end(), [&](const ConceptDraw& d) { return d.parent == parent; }));
    }
    return out;
}

void write_labels(std::ostream& os, const std::vector<std::vector<ConceptDraw>>& labels) {
    os << "# row parent child coeff [parent child coeff ...]\n";
    os << std::setprecision(17);
    for (std::size_t r = 0; r < labels.size(); ++r) {
        os << r;
        for (const auto& d : labels[r]) os << ' ' << d.parent << ' ' << d.child << ' ' << d.coeff;
        os << '\n';
    }
}

void write_labels(const std::string& path, const std::vector<std::vector<ConceptDraw>>& labels) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_labels: cannot open " + path);
    write_labels(os, labels);
    if (!os) throw std::runtime_error("write_labels: write failed for " + path);
}

std::vector<std::vector<ConceptDraw>> read_labels(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_labels: cannot open " + path);
    std::vector<std::vector<ConceptDraw>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::size_t row = 0;
        if (!(ls >> row) || row != out.size()) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": expected row index " + std::to_string(out.size()));
        }
        std::vector<ConceptDraw> draws;
        ConceptDraw d;
        while (ls >> d.parent) {
            if (!(ls >> d.child >> d.coeff)) {
                throw FormatError(path + ":" + std::to_string(lineno) + ": incomplete (parent, child, coeff) triple");
            }
            draws.push_back(d);
        }
        out.push_back(std::move(draws));
    }
    return out;
}

}  // namespace hsae
