#include "hsae/eval.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "hsae/errors.hpp"

namespace hsae {

RowMat<float> reconstruct(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X) {
    if (X.cols() != model.config.d) throw std::invalid_argument("reconstruct: data dimension does not match model");
    RowMat<float> out(X.rows(), X.cols());
    for (Index r = 0; r < X.rows(); ++r) {
        out.row(r) = forward(model, arch, X.row(r).transpose()).x_hat.transpose();
    }
    return out;
}

double one_minus_ev(const RowMat<float>& X, const RowMat<float>& X_hat) {
    if (X.rows() < 2) throw std::invalid_argument("one_minus_ev: need at least 2 rows");
    if (X.rows() != X_hat.rows() || X.cols() != X_hat.cols()) {
        throw std::invalid_argument("one_minus_ev: reconstruction shape mismatch");
    }
    Vec<double> mean = Vec<double>::Zero(X.cols());
    for (Index r = 0; r < X.rows(); ++r) mean += X.row(r).transpose().cast<double>();
    mean /= static_cast<double>(X.rows());
    double err = 0.0, var = 0.0;
    for (Index r = 0; r < X.rows(); ++r) {
        err += squared_distance(X.row(r), X_hat.row(r));
        var += squared_distance(X.row(r).transpose().cast<double>(), mean);
    }
    if (!(var > 0.0)) throw UndefinedMetric("one_minus_ev: data has zero variance");
    return err / var;
}

double one_minus_ev(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X) {
    return one_minus_ev(X, reconstruct(model, arch, X));
}

// ---------------------------------------------------------------------------

RecoveryResult recovery_score(const Mat<double>& decoder, const Mat<double>& parent_vecs) {
    const Index n_parents = parent_vecs.rows();
    const Index m = decoder.cols();
    if (decoder.rows() != parent_vecs.cols()) throw std::invalid_argument("recovery_score: dimension mismatch");
    if (m < n_parents) {
        throw std::invalid_argument("recovery_score: m_top=" + std::to_string(m) + " < n_parents=" +
                                    std::to_string(n_parents));
    }
    Mat<double> dec = decoder;
    for (Index j = 0; j < m; ++j) {
        const double n = l2_norm(dec.col(j));
        if (n > 0.0) dec.col(j) /= n;
    }
    Mat<double> par = parent_vecs;
    for (Index p = 0; p < n_parents; ++p) par.row(p) /= l2_norm(par.row(p).transpose());
    const Mat<double> cos = par * dec;

    std::vector<std::tuple<double, Index, Index>> cand;
    cand.reserve(static_cast<std::size_t>(n_parents * m));
    for (Index p = 0; p < n_parents; ++p)
        for (Index j = 0; j < m; ++j) cand.emplace_back(cos(p, j), p, j);
    std::stable_sort(cand.begin(), cand.end(), [](const auto& x, const auto& y) { return std::get<0>(x) > std::get<0>(y); });

    std::vector<bool> parent_done(static_cast<std::size_t>(n_parents), false), latent_done(static_cast<std::size_t>(m), false);
    RecoveryResult res;
    for (const auto& [c, p, j] : cand) {
        if (parent_done[static_cast<std::size_t>(p)] || latent_done[static_cast<std::size_t>(j)]) continue;
        parent_done[static_cast<std::size_t>(p)] = latent_done[static_cast<std::size_t>(j)] = true;
        res.matching.push_back({p, j, c});
        if (static_cast<Index>(res.matching.size()) == n_parents) break;
    }
    std::sort(res.matching.begin(), res.matching.end(), [](const auto& x, const auto& y) { return x.parent < y.parent; });
    double acc = 0.0;
    for (const auto& mt : res.matching) acc += mt.cosine;
    res.mean_max_cosine = acc / static_cast<double>(n_parents);
    return res;
}

RecoveryResult recovery_score(const HsaeModel<float>& model, const SyntheticDictionary& dict) {
    if (model.config.d != dict.d()) throw std::invalid_argument("recovery_score: model d does not match dictionary d");
    return recovery_score(model.top.D.cast<double>(), dict.parent_vecs);
}

// ---------------------------------------------------------------------------

std::vector<Index> top_n_set(const Vec<float>& activations, Index n) {
    SparseCode<float> code = top_k(activations, std::min(n, activations.size()));
    return code.indices;
}

Index symmetric_difference_size(std::vector<Index> a, std::vector<Index> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<Index> out;
    std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return static_cast<Index>(out.size());
}

std::vector<Index> active_top_n(const SparseCode<float>& code, Index n) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < code.indices.size(); ++i)
        if (code.values[i] > 0.0f) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return code.values[i] > code.values[j]; });
    if (static_cast<Index>(order.size()) > n) order.resize(static_cast<std::size_t>(n));
    std::vector<Index> out;
    for (std::size_t i : order) out.push_back(code.indices[i]);
    std::sort(out.begin(), out.end());
    return out;
}

double paired_divergence(const HsaeModel<float>& model, const RowMat<float>& A, const RowMat<float>& B, Index top_n) {
    if (A.rows() == 0) throw std::invalid_argument("paired_divergence: empty pair list");
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw std::invalid_argument("paired_divergence: views differ in shape");
    if (A.cols() != model.config.d) throw std::invalid_argument("paired_divergence: dimension mismatch");
    double acc = 0.0;
    for (Index r = 0; r < A.rows(); ++r) {
        const auto ta = forward_baseline(model.top, model.config, A.row(r).transpose());
        const auto tb = forward_baseline(model.top, model.config, B.row(r).transpose());
        acc += static_cast<double>(symmetric_difference_size(active_top_n(ta.codes, top_n), active_top_n(tb.codes, top_n)));
    }
    return acc / static_cast<double>(A.rows());
}

// ---------------------------------------------------------------------------

double absorption_from_masses(const std::vector<double>& masses) {
    double total = 0.0, best = 0.0;
    for (double m : masses) {
        total += std::abs(m);
        best = std::max(best, std::abs(m));
    }
    if (!(total > 0.0)) throw UndefinedMetric("absorption: probe carries zero projection mass");
    return 1.0 - best / total;
}

AbsorptionDetail absorption_from_codes(const Mat<double>& codes, const std::vector<int>& attr) {
    const Index n = codes.rows(), m = codes.cols();
    if (static_cast<Index>(attr.size()) != n) throw std::invalid_argument("absorption: label count does not match rows");
    Index pos = 0;
    for (int v : attr) pos += v != 0;
    if (pos < 10 || n - pos < 10) {
        throw std::invalid_argument("absorption: need at least 10 positive and 10 negative rows, got " +
                                    std::to_string(pos) + "/" + std::to_string(n - pos));
    }
    // Normal equations of [codes, 1] w = y, minimum-norm solution.
    Mat<double> design(n, m + 1);
    design.leftCols(m) = codes;
    design.col(m).setOnes();
    Vec<double> y(n);
    for (Index i = 0; i < n; ++i) y[i] = attr[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    const Mat<double> gram = design.transpose() * design;
    const Vec<double> rhs = design.transpose() * y;
    const Vec<double> w = Eigen::CompleteOrthogonalDecomposition<Mat<double>>(gram).solve(rhs);

    Vec<double> mean_pos = Vec<double>::Zero(m);
    for (Index i = 0; i < n; ++i) {
        if (attr[static_cast<std::size_t>(i)]) mean_pos += codes.row(i).transpose();
    }
    mean_pos /= static_cast<double>(pos);

    AbsorptionDetail out;
    out.probe = w.head(m);
    out.masses.resize(static_cast<std::size_t>(m));
    for (Index j = 0; j < m; ++j) out.masses[static_cast<std::size_t>(j)] = std::abs(w[j] * mean_pos[j]);
    out.score = absorption_from_masses(out.masses);
    return out;
}

Mat<double> top_level_codes(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X) {
    (void)arch;  // the top-level code does not depend on the expert path
    Mat<double> Z = Mat<double>::Zero(X.rows(), model.config.m_top);
    for (Index r = 0; r < X.rows(); ++r) {
        const auto tr = forward_baseline(model.top, model.config, X.row(r).transpose());
        for (std::size_t t = 0; t < tr.codes.size(); ++t) Z(r, tr.codes.indices[t]) = tr.codes.values[t];
    }
    return Z;
}

double absorption_score(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X,
                        const std::vector<int>& attr) {
    return absorption_from_codes(top_level_codes(model, arch, X), attr).score;
}

double mean_parent_absorption(const Mat<double>& codes, const std::vector<std::vector<ConceptDraw>>& labels,
                              Index n_parents, Index min_count) {
    double acc = 0.0;
    Index used = 0;
    for (Index p = 0; p < n_parents; ++p) {
        const auto attr = parent_indicator(labels, p);
        const auto pos = std::count(attr.begin(), attr.end(), 1);
        if (pos < min_count || static_cast<Index>(attr.size()) - pos < min_count) continue;
        try {
            acc += absorption_from_codes(codes, attr).score;
            ++used;
        } catch (const UndefinedMetric&) {
        }
    }
    if (used == 0) throw UndefinedMetric("mean_parent_absorption: no parent has a defined score");
    return acc / static_cast<double>(used);
}

double inactive_fraction(const HsaeModel<float>& model, Architecture arch, const RowMat<float>& X) {
    (void)arch;
    std::vector<bool> seen(static_cast<std::size_t>(model.config.m_top), false);
    for (Index r = 0; r < X.rows(); ++r) {
        for (Index j : forward_baseline(model.top, model.config, X.row(r).transpose()).codes.indices) {
            seen[static_cast<std::size_t>(j)] = true;
        }
    }
    return static_cast<double>(std::count(seen.begin(), seen.end(), false)) / static_cast<double>(seen.size());
}

// ---------------------------------------------------------------------------

namespace {

void keep_top(std::vector<FeatureHit>& hits, Index top_m) {
    std::stable_sort(hits.begin(), hits.end(), [](const FeatureHit& a, const FeatureHit& b) {
        return a.value > b.value || (a.value == b.value && a.row < b.row);
    });
    if (static_cast<Index>(hits.size()) > top_m) hits.resize(static_cast<std::size_t>(top_m));
}

}  // namespace

FeatureReport feature_report(const HsaeModel<float>& model, const RowMat<float>& X,
                             const std::vector<std::string>& meta, Index top_m) {
    if (static_cast<Index>(meta.size()) != X.rows()) throw std::invalid_argument("feature_report: meta length != rows");
    const HsaeConfig& cfg = model.config;
    FeatureReport rep;
    rep.top.resize(static_cast<std::size_t>(cfg.m_top));
    rep.sub.assign(static_cast<std::size_t>(cfg.m_top), std::vector<std::vector<FeatureHit>>(static_cast<std::size_t>(cfg.a)));
    for (Index r = 0; r < X.rows(); ++r) {
        const auto tr = forward_hsae(model, X.row(r).transpose());
        const std::string& m = meta[static_cast<std::size_t>(r)];
        for (std::size_t t = 0; t < tr.codes.size(); ++t) {
            auto& list = rep.top[static_cast<std::size_t>(tr.codes.indices[t])];
            list.push_back({r, static_cast<double>(tr.codes.values[t]), m});
            if (static_cast<Index>(list.size()) > 4 * top_m) keep_top(list, top_m);
        }
        for (const auto& et : tr.experts) {
            auto& list = rep.sub[static_cast<std::size_t>(et.expert)][static_cast<std::size_t>(et.selected)];
            list.push_back({r, static_cast<double>(et.selected_value), m});
            if (static_cast<Index>(list.size()) > 4 * top_m) keep_top(list, top_m);
        }
    }
    for (auto& l : rep.top) keep_top(l, top_m);
    for (auto& ex : rep.sub)
        for (auto& l : ex) keep_top(l, top_m);
    return rep;
}

// Feature report format, one list per line:
//   latent <j>: <row>:<value>:<meta> ...
//   sublatent <j>.<i>: <row>:<value>:<meta> ...
// Latents with no hits are written with an empty list.
void write_feature_report(std::ostream& os, const FeatureReport& report) {
    auto list = [&](const std::vector<FeatureHit>& hits) {
        for (const auto& h : hits) os << ' ' << h.row << ':' << std::setprecision(9) << h.value << ':' << h.meta;
        os << '\n';
    };
    for (std::size_t j = 0; j < report.top.size(); ++j) {
        os << "latent " << j << ':';
        list(report.top[j]);
        for (std::size_t i = 0; i < report.sub[j].size(); ++i) {
            if (report.sub[j][i].empty()) continue;
            os << "sublatent " << j << '.' << i << ':';
            list(report.sub[j][i]);
        }
    }
}

// ---------------------------------------------------------------------------

void write_eval_report(std::ostream& os, const EvalReport& r) {
    os << std::setprecision(17);
    os << "one_minus_ev = " << r.one_minus_ev << '\n';
    if (r.recovery) {
        os << "recovery_mean_max_cosine = " << r.recovery->mean_max_cosine << '\n';
        os << "recovery_matching =";
        for (const auto& m : r.recovery->matching) os << ' ' << m.parent << ':' << m.latent << ':' << m.cosine;
        os << '\n';
    }
    if (r.paired_divergence) os << "paired_divergence = " << *r.paired_divergence << '\n';
    if (r.absorption) os << "absorption = " << *r.absorption << '\n';
    os << "dead_fraction = " << r.dead_fraction << '\n';
}

EvalReport read_eval_report(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error(path + ": cannot open eval report");
    EvalReport r;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError(path + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = line.substr(0, eq);
        key.erase(key.find_last_not_of(" \t") + 1);
        std::istringstream val(line.substr(eq + 1));
        auto number = [&]() {
            double v = 0.0;
            if (!(val >> v)) throw FormatError(path + ":" + std::to_string(lineno) + ": bad number for " + key);
            return v;
        };
        if (key == "one_minus_ev") {
            r.one_minus_ev = number();
        } else if (key == "recovery_mean_max_cosine") {
            if (!r.recovery) r.recovery.emplace();
            r.recovery->mean_max_cosine = number();
        } else if (key == "recovery_matching") {
            if (!r.recovery) r.recovery.emplace();
            std::string tok;
            while (val >> tok) {
                RecoveryMatch m;
                char c1 = 0, c2 = 0;
                std::istringstream ts(tok);
                if (!(ts >> m.parent >> c1 >> m.latent >> c2 >> m.cosine) || c1 != ':' || c2 != ':') {
                    throw FormatError(path + ":" + std::to_string(lineno) + ": bad matching entry '" + tok + "'");
                }
                r.recovery->matching.push_back(m);
            }
        } else if (key == "paired_divergence") {
            r.paired_divergence = number();
        } else if (key == "absorption") {
            r.absorption = number();
        } else if (key == "dead_fraction") {
            r.dead_fraction = number();
        } else {
            throw FormatError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
    }
    return r;
}

void write_comparison(std::ostream& os, const std::string& name_a, const EvalReport& a, const std::string& name_b,
                      const EvalReport& b) {
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string("-");
        std::ostringstream s;
        s << std::setprecision(6) << *v;
        return s.str();
    };
    auto rec = [](const EvalReport& r) -> std::optional<double> {
        if (!r.recovery) return std::nullopt;
        return r.recovery->mean_max_cosine;
    };
    os << std::left << std::setw(26) << "metric" << std::setw(20) << name_a << std::setw(20) << name_b << '\n';
    auto row = [&](const char* name, const std::optional<double>& x, const std::optional<double>& y) {
        os << std::left << std::setw(26) << name << std::setw(20) << cell(x) << std::setw(20) << cell(y) << '\n';
    };
    row("one_minus_ev", a.one_minus_ev, b.one_minus_ev);
    row("recovery_mean_max_cosine", rec(a), rec(b));
    row("paired_divergence", a.paired_divergence, b.paired_divergence);
    row("absorption", a.absorption, b.absorption);
    row("dead_fraction", a.dead_fraction, b.dead_fraction);
}

}  // namespace hsae
