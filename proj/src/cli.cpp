#include "hsae/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "hsae/checkpoint.hpp"
#include "hsae/config.hpp"
#include "hsae/errors.hpp"
#include "hsae/eval.hpp"
#include "hsae/shards.hpp"

namespace hsae {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
    if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

void require_dir(const std::string& path, const std::string& what) {
    if (!fs::is_directory(path)) throw UsageError(what + " is not a directory: " + path);
}

RunConfig load_run_config(const std::string& path, const std::string& seed_flag, unsigned threads) {
    RunConfig cfg = path.empty() ? default_run_config() : parse_config(path);
    std::string seed_text = seed_flag;
    if (seed_text.empty()) {
        if (const char* env = std::getenv("HSAE_SEED")) seed_text = env;
    }
    if (!seed_text.empty()) {
        try {
            std::size_t used = 0;
            const auto seed = std::stoull(seed_text, &used);
            if (used != seed_text.size()) throw std::invalid_argument(seed_text);
            cfg.train.seed = cfg.data.dict.seed = seed;
        } catch (const std::logic_error&) {
            throw UsageError("seed must be a non-negative integer, got '" + seed_text + "'");
        }
    }
    if (threads > 0) cfg.train.threads = threads;
    return cfg;
}

RowMat<float> head_rows(const RowMat<float>& X, Index max_rows) {
    if (max_rows <= 0 || X.rows() <= max_rows) return X;
    return X.topRows(max_rows);
}

RowMat<float> to_float_rows(const Mat<double>& M) { return M.cast<float>(); }

struct LoadedModel {
    HsaeModel<float> model;
    std::optional<DeadLatentTracker> tracker;
};

// A bare model file ends after the parameter blocks; a checkpoint continues
// with optimizer and tracker blocks.
LoadedModel load_model_or_checkpoint(const std::string& path) {
    require_file(path, "model");
    std::ifstream is(path, std::ios::binary);
    LoadedModel out;
    out.model = read_model(is, path);
    if (is.peek() == std::char_traits<char>::eof()) return out;
    TrainerState st = load_checkpoint(path);
    out.model = std::move(st.model);
    out.tracker = std::move(st.tracker);
    return out;
}

std::string eval_data_path(const std::string& data) {
    if (fs::is_regular_file(data)) return data;
    require_dir(data, "data");
    const fs::path held = fs::path(data) / "heldout.hact";
    if (fs::is_regular_file(held)) return held.string();
    const auto shards = training_shards(data);
    return shards.front();
}

std::string describe(const std::vector<ConceptDraw>& draws) {
    std::ostringstream os;
    for (std::size_t i = 0; i < draws.size(); ++i) {
        if (i) os << ',';
        os << draws[i].parent << '/' << draws[i].child;
    }
    return os.str();
}

void write_text_atomically(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp);
        os << text;
        if (!os) throw std::runtime_error("write failed: " + tmp);
    }
    fs::rename(tmp, path);
}

// ---------------------------------------------------------------- commands

struct GenDataArgs {
    std::string config, out;
};

void cmd_gen_data(const GenDataArgs& args, const std::string& seed, unsigned threads, std::ostream& out) {
    const RunConfig cfg = load_run_config(args.config, seed, threads);
    const DataGenConfig& g = cfg.data;
    g.dict.validate();
    if (g.n_samples < 1) throw UsageError("n_samples must be >= 1");
    if (g.shards < 1 || g.shards > g.n_samples) throw UsageError("shards must lie in [1, n_samples]");
    if (g.whiten && g.n_samples < g.dict.d) throw UsageError("whiten needs n_samples >= d");

    const SyntheticDictionary dict = plant_dictionary(g.dict);
    LabeledBatch train = sample_activations(dict, g.n_samples, g.dict, 0);
    LabeledBatch held = sample_activations(dict, g.n_heldout, g.dict, 2);
    PairedViews pairs = sample_pairs(dict, g.n_pairs, g.dict, 1);
    RowMat<float> parents = to_float_rows(dict.parent_vecs);

    if (g.whiten) {
        const Whitened w = whiten(train.X.cast<double>());
        auto apply = [&](RowMat<float>& X) {
            if (X.rows() == 0) return;
            Mat<double> Z = X.cast<double>();
            Z.rowwise() -= w.mean.transpose();
            X = (Z * w.W).cast<float>();
        };
        apply(train.X);
        apply(held.X);
        apply(pairs.A);
        apply(pairs.B);
        parents = (dict.parent_vecs * w.W).cast<float>();
    }

    fs::create_directories(args.out);
    const fs::path dir(args.out);
    if (g.shards == 1) {
        write_shard((dir / "activations.hact").string(), train.X);
    } else {
        const Index base = g.n_samples / g.shards, extra = g.n_samples % g.shards;
        Index row = 0;
        for (Index i = 0; i < g.shards; ++i) {
            const Index n = base + (i < extra ? 1 : 0);
            char name[64];
            std::snprintf(name, sizeof name, "activations_%03lld.hact", static_cast<long long>(i));
            write_shard((dir / name).string(), train.X.middleRows(row, n));
            row += n;
        }
    }
    write_labels((dir / "labels.txt").string(), train.labels);
    write_shard((dir / "heldout.hact").string(), held.X);
    write_labels((dir / "heldout_labels.txt").string(), held.labels);
    write_shard((dir / "pairs_a.hact").string(), pairs.A);
    write_shard((dir / "pairs_b.hact").string(), pairs.B);
    write_shard((dir / "parents.hact").string(), parents);
    out << "wrote " << g.n_samples << " training rows, " << g.n_heldout << " held-out rows and " << g.n_pairs
        << " pairs to " << args.out << "\n";
}

struct TrainArgs {
    std::string config, data, out, resume;
};

void cmd_train(const TrainArgs& args, const std::string& seed, unsigned threads, std::ostream& out) {
    const RunConfig cfg = load_run_config(args.config, seed, threads);
    require_dir(args.data, "data");
    const auto shards = training_shards(args.data);
    cfg.train.validate();
    ShardSource source(shards, cfg.train.batch_size);
    if (source.d() != cfg.train.model.d) {
        throw UsageError("data dimension " + std::to_string(source.d()) + " does not match config d=" +
                         std::to_string(cfg.train.model.d));
    }
    if (source.batches_per_epoch() == 0) throw UsageError("data has fewer rows than one batch");
    OptConfig opt = cfg.train.opt;
    opt.total_steps = planned_steps(cfg.train, source);
    opt.validate();

    TrainOptions topts;
    if (!args.resume.empty()) {
        require_file(args.resume, "resume checkpoint");
        topts.resume = load_checkpoint(args.resume, &cfg.train.model);
    }

    fs::create_directories(args.out);
    const fs::path dir(args.out);
    std::ofstream log((dir / "run.log").string(), args.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot write " + (dir / "run.log").string());
    topts.log_stream = &log;
    if (cfg.train.checkpoint_every > 0) topts.checkpoint_dir = args.out;

    const TrainResult res = train(cfg.train, source, topts);
    const std::string model_path = (dir / "model.ckpt").string();
    save_checkpoint(model_path, res.state);
    out << "trained " << res.state.opt.step << " steps (" << to_string(cfg.train.mode)
        << "), dead fraction " << res.state.tracker.dead_fraction() << ", model at " << model_path << "\n";
}

struct EvalArgs {
    std::string model, data, labels, out, config;
};

EvalReport evaluate(const EvalArgs& args, const RunConfig& cfg) {
    const LoadedModel lm = load_model_or_checkpoint(args.model);
    const HsaeModel<float>& model = lm.model;
    const std::string data_path = eval_data_path(args.data);
    const RowMat<float> X_full = read_shard(data_path);
    if (X_full.cols() != model.config.d) {
        throw UsageError("data dimension " + std::to_string(X_full.cols()) + " does not match model d=" +
                         std::to_string(model.config.d));
    }
    const RowMat<float> X = head_rows(X_full, cfg.eval.max_rows);

    EvalReport rep;
    rep.one_minus_ev = one_minus_ev(model, Architecture::hierarchical, X);

    const fs::path dir = fs::is_directory(args.data) ? fs::path(args.data) : fs::path(args.data).parent_path();
    const fs::path parents_path = dir / "parents.hact";
    Index n_parents = 0;
    if (fs::is_regular_file(parents_path)) {
        const RowMat<float> P = read_shard(parents_path.string());
        n_parents = P.rows();
        if (P.cols() == model.config.d && model.config.m_top >= P.rows()) {
            rep.recovery = recovery_score(model.top.D.cast<double>(), P.cast<double>());
        }
    }
    const fs::path pa = dir / "pairs_a.hact", pb = dir / "pairs_b.hact";
    if (fs::is_regular_file(pa) && fs::is_regular_file(pb)) {
        const RowMat<float> A = read_shard(pa.string()), B = read_shard(pb.string());
        if (A.rows() > 0 && A.rows() == B.rows() && A.cols() == model.config.d) {
            rep.paired_divergence = paired_divergence(model, A, B, cfg.eval.top_n);
        }
    }
    if (!args.labels.empty()) {
        auto labels = read_labels(args.labels);
        if (static_cast<Index>(labels.size()) != X_full.rows()) {
            throw UsageError("labels file has " + std::to_string(labels.size()) + " rows, data has " +
                             std::to_string(X_full.rows()));
        }
        labels.resize(static_cast<std::size_t>(X.rows()));
        if (n_parents == 0) {
            for (const auto& row : labels)
                for (const auto& c : row) n_parents = std::max(n_parents, c.parent + 1);
        }
        const Mat<double> codes = top_level_codes(model, Architecture::hierarchical, X);
        try {
            rep.absorption = mean_parent_absorption(codes, labels, n_parents);
        } catch (const UndefinedMetric&) {
        }
    }
    rep.dead_fraction = lm.tracker ? lm.tracker->dead_fraction() : inactive_fraction(model, Architecture::hierarchical, X);
    return rep;
}

void cmd_eval(const EvalArgs& args, const std::string& seed, unsigned threads, std::ostream& out) {
    const RunConfig cfg = load_run_config(args.config, seed, threads);
    require_file(args.model, "model");
    if (!args.labels.empty()) require_file(args.labels, "labels");
    const EvalReport rep = evaluate(args, cfg);
    std::ostringstream text;
    write_eval_report(text, rep);
    if (!args.out.empty()) {
        const fs::path parent = fs::path(args.out).parent_path();
        if (!parent.empty()) fs::create_directories(parent);
        write_text_atomically(args.out, text.str());
    }
    out << text.str();
}

void cmd_flops(const std::string& config, const std::string& seed, std::ostream& out) {
    const RunConfig cfg = load_run_config(config, seed, 0);
    cfg.train.model.validate();
    const FlopBreakdown f = flop_breakdown(cfg.train.model);
    out << "top_encode = " << f.top_encode << "\n"
        << "down_proj = " << f.down_proj << "\n"
        << "low_encode = " << f.low_encode << "\n"
        << "low_decode = " << f.low_decode << "\n"
        << "up_proj = " << f.up_proj << "\n"
        << "top_decode = " << f.top_decode << "\n"
        << "total = " << f.total() << "\n";
    char share[64];
    std::snprintf(share, sizeof share, "%.17g", f.top_encode_share());
    out << "top_encode_share = " << share << "\n";
}

struct InspectArgs {
    std::string model, data, labels, out;
    Index top = 20;
};

void cmd_inspect(const InspectArgs& args, std::ostream& out) {
    require_file(args.model, "model");
    if (args.top < 1) throw UsageError("--top must be >= 1");
    const LoadedModel lm = load_model_or_checkpoint(args.model);
    const std::string data_path = eval_data_path(args.data);
    const RowMat<float> X = read_shard(data_path);
    if (X.cols() != lm.model.config.d) throw UsageError("data dimension does not match the model");

    std::string labels_path = args.labels;
    if (labels_path.empty()) {
        const fs::path p(data_path);
        const fs::path guess = p.parent_path() / (p.stem() == "heldout" ? "heldout_labels.txt" : "labels.txt");
        if (fs::is_regular_file(guess)) labels_path = guess.string();
    }
    std::vector<std::string> meta(static_cast<std::size_t>(X.rows()));
    if (!labels_path.empty()) {
        const auto labels = read_labels(labels_path);
        if (labels.size() == meta.size()) {
            for (std::size_t i = 0; i < meta.size(); ++i) meta[i] = describe(labels[i]);
        }
    }
    const FeatureReport rep = feature_report(lm.model, X, meta, args.top);
    std::ostringstream text;
    write_feature_report(text, rep);
    if (!args.out.empty()) write_text_atomically(args.out, text.str());
    else out << text.str();
}

std::string report_path(const std::string& p) {
    if (fs::is_directory(p)) {
        const fs::path f = fs::path(p) / "eval.txt";
        require_file(f.string(), "eval report");
        return f.string();
    }
    require_file(p, "eval report");
    return p;
}

void cmd_compare(const std::string& a, const std::string& b, std::ostream& out) {
    const std::string pa = report_path(a), pb = report_path(b);
    write_comparison(out, a, read_eval_report(pa), b, read_eval_report(pb));
}

}  // namespace

std::vector<std::string> training_shards(const std::string& data_dir) {
    const fs::path dir(data_dir);
    if (fs::is_regular_file(dir / "activations.hact")) return {(dir / "activations.hact").string()};
    std::vector<std::string> out;
    if (fs::is_directory(dir)) {
        for (const auto& e : fs::directory_iterator(dir)) {
            const std::string name = e.path().filename().string();
            if (e.is_regular_file() && name.rfind("activations_", 0) == 0 && e.path().extension() == ".hact") {
                out.push_back(e.path().string());
            }
        }
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw UsageError("no activations*.hact shards in " + data_dir);
    return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Hierarchical sparse autoencoder toolkit"};
    app.require_subcommand(1);
    std::string seed;
    unsigned threads = 0;
    app.add_option("--seed", seed, "Override the config seed (also HSAE_SEED)");
    app.add_option("--threads", threads, "Worker threads (default: config value, 1)");

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic hierarchical dataset");
    gen_cmd->add_option("--config", gen.config, "Config file");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset directory");
    train_cmd->add_option("--config", tr.config, "Config file");
    train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
    train_cmd->add_option("--out", tr.out, "Run directory")->required();
    train_cmd->add_option("--resume", tr.resume, "Checkpoint to resume from");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained model");
    eval_cmd->add_option("--model", ev.model, "Model or checkpoint file")->required();
    eval_cmd->add_option("--data", ev.data, "Dataset directory or shard")->required();
    eval_cmd->add_option("--labels", ev.labels, "Label file matching the evaluated rows");
    eval_cmd->add_option("--out", ev.out, "Report file");
    eval_cmd->add_option("--config", ev.config, "Config file (eval section)");

    std::string flops_config;
    auto* flops_cmd = app.add_subcommand("flops", "Print the per-token multiply-accumulate breakdown");
    flops_cmd->add_option("--config", flops_config, "Config file");

    InspectArgs in;
    auto* inspect_cmd = app.add_subcommand("inspect", "List the strongest activating rows per latent");
    inspect_cmd->add_option("--model", in.model, "Model or checkpoint file")->required();
    inspect_cmd->add_option("--data", in.data, "Dataset directory or shard")->required();
    inspect_cmd->add_option("--top", in.top, "Rows per latent");
    inspect_cmd->add_option("--labels", in.labels, "Label file for row metadata");
    inspect_cmd->add_option("--out", in.out, "Report file (default: stdout)");

    std::string cmp_a, cmp_b;
    auto* compare_cmd = app.add_subcommand("compare", "Side-by-side table of two eval reports");
    compare_cmd->add_option("a", cmp_a, "Report file or run directory")->required();
    compare_cmd->add_option("b", cmp_b, "Report file or run directory")->required();

    std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen_cmd->parsed()) cmd_gen_data(gen, seed, threads, out);
        else if (train_cmd->parsed()) cmd_train(tr, seed, threads, out);
        else if (eval_cmd->parsed()) cmd_eval(ev, seed, threads, out);
        else if (flops_cmd->parsed()) cmd_flops(flops_config, seed, out);
        else if (inspect_cmd->parsed()) cmd_inspect(in, out);
        else if (compare_cmd->parsed()) cmd_compare(cmp_a, cmp_b, out);
    } catch (const NumericFailure& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    return run_cli(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace hsae
