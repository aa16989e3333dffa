#include "hsae/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "hsae/binary_io.hpp"
#include "hsae/checkpoint.hpp"
#include "hsae/errors.hpp"

namespace hsae {

namespace fs = std::filesystem;

const char* to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::hsae: return "hsae";
        case TrainMode::baseline: return "baseline";
        case TrainMode::baseline_with_aux: return "baseline_with_aux";
    }
    return "?";
}

TrainMode parse_train_mode(const std::string& text) {
    if (text == "hsae") return TrainMode::hsae;
    if (text == "baseline") return TrainMode::baseline;
    if (text == "baseline_with_aux") return TrainMode::baseline_with_aux;
    throw std::invalid_argument("unknown training mode '" + text + "' (expected hsae, baseline, baseline_with_aux)");
}

void TrainConfig::validate() const {
    model.validate();
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (ema_window_batches < 1) throw std::invalid_argument("TrainConfig: ema_window_batches must be >= 1");
    if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be >= 1");
    if (!(aux_coeff >= 0.0)) throw std::invalid_argument("TrainConfig: aux_coeff must be >= 0");
}

ObjectiveOptions TrainConfig::objective() const {
    ObjectiveOptions o;
    o.top_recon = toggles.top_recon;
    o.ortho = toggles.ortho;
    o.l1 = toggles.l1;
    o.ortho_form = ortho_form;
    o.l1_form = l1_form;
    return o;
}

// ---------------------------------------------------------------------------

DeadLatentTracker DeadLatentTracker::make(const HsaeConfig& cfg, std::uint64_t window, Index batch_size) {
    DeadLatentTracker t;
    t.window = window;
    t.batch_size = batch_size;
    t.top_rates = Vec<double>::Zero(cfg.m_top);
    t.sub_rates = Mat<double>::Zero(cfg.a, cfg.m_top);
    return t;
}

double DeadLatentTracker::rate(Index i) const {
    if (updates == 0) return 0.0;
    return top_rates[i] / (1.0 - std::pow(decay(), static_cast<double>(updates)));
}

std::vector<Index> DeadLatentTracker::dead_indices() const {
    std::vector<Index> dead;
    if (updates == 0) return dead;
    for (Index i = 0; i < top_rates.size(); ++i) {
        if (rate(i) < dead_threshold()) dead.push_back(i);
    }
    return dead;
}

double DeadLatentTracker::dead_fraction() const {
    if (top_rates.size() == 0) return 0.0;
    return static_cast<double>(dead_indices().size()) / static_cast<double>(top_rates.size());
}

double DeadLatentTracker::dead_sublatent_fraction() const {
    if (updates == 0 || sub_rates.size() == 0) return 0.0;
    const double corr = 1.0 - std::pow(decay(), static_cast<double>(updates));
    Index dead = 0;
    for (Index j = 0; j < sub_rates.cols(); ++j)
        for (Index i = 0; i < sub_rates.rows(); ++i) dead += (sub_rates(i, j) / corr < dead_threshold());
    return static_cast<double>(dead) / static_cast<double>(sub_rates.size());
}

void DeadLatentTracker::update(const Vec<double>& top_counts, const Mat<double>& sub_counts, Index samples) {
    if (samples < 1) return;
    const double w = decay();
    const double n = static_cast<double>(samples);
    top_rates = w * top_rates + (1.0 - w) * (top_counts / n);
    if (sub_counts.size() == sub_rates.size()) sub_rates = w * sub_rates + (1.0 - w) * (sub_counts / n);
    ++updates;
}

// ---------------------------------------------------------------------------

std::string format_log_record(const LogRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "step=%llu lr=%.9g recon=%.9g top_recon=%.9g ortho=%.9g sparse=%.9g aux=%.9g total=%.9g dead=%.9g "
                  "wall=%.9g",
                  static_cast<unsigned long long>(r.step), r.lr, r.loss.recon, r.loss.top_recon, r.loss.ortho,
                  r.loss.sparse, r.loss.aux_dead, r.loss.total, r.dead_fraction, r.wall_seconds);
    return buf;
}

std::optional<LogRecord> parse_log_record(const std::string& line) {
    LogRecord r;
    unsigned long long step = 0;
    const int n = std::sscanf(line.c_str(),
                              "step=%llu lr=%lg recon=%lg top_recon=%lg ortho=%lg sparse=%lg aux=%lg total=%lg dead=%lg "
                              "wall=%lg",
                              &step, &r.lr, &r.loss.recon, &r.loss.top_recon, &r.loss.ortho, &r.loss.sparse,
                              &r.loss.aux_dead, &r.loss.total, &r.dead_fraction, &r.wall_seconds);
    if (n != 10) return std::nullopt;
    r.step = step;
    return r;
}

// ---------------------------------------------------------------------------

MatrixSource::MatrixSource(const RowMat<float>& X, Index batch_size) : X_(X), batch_size_(batch_size) {
    if (batch_size_ < 1) throw std::invalid_argument("MatrixSource: batch_size must be >= 1");
}

std::uint64_t MatrixSource::batches_per_epoch() const {
    return static_cast<std::uint64_t>(X_.rows() / batch_size_);
}

void MatrixSource::batch(std::uint64_t index, RowMat<float>& out) {
    if (index >= batches_per_epoch()) throw std::out_of_range("MatrixSource: batch index out of range");
    out = X_.middleRows(static_cast<Index>(index) * batch_size_, batch_size_);
}

ShardSource::ShardSource(std::vector<std::string> paths, Index batch_size) : stream_(std::move(paths), batch_size) {}

void ShardSource::batch(std::uint64_t index, RowMat<float>& out) {
    if (index != position_) stream_.seek(index);
    if (!stream_.next(out)) throw std::out_of_range("ShardSource: batch index out of range");
    position_ = index + 1;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kOptMagic[5] = "HOPT";
constexpr char kTrackerMagic[5] = "HTRK";
constexpr std::uint32_t kOptVersion = 1;

void add_into(Gradients<float>& dst, Gradients<float>& src) {
    auto d = param_blocks(dst);
    auto s = param_blocks(src);
    for (std::size_t b = 0; b < d.size(); ++b) d[b].flat() += s[b].flat();
}

struct PartialSums {
    double recon = 0.0, top_recon = 0.0, sparse = 0.0, aux = 0.0;
};

void run_range(const HsaeModel<float>& model, const RowMat<float>& X, Index begin, Index end, TrainMode mode,
               const LossWeights& w, const ObjectiveOptions& opts, const AuxContext* aux, float scale,
               Gradients<float>& g, std::vector<ForwardTrace<float>>& traces, PartialSums& sums) {
    const Architecture arch = mode == TrainMode::hsae ? Architecture::hierarchical : Architecture::flat;
    for (Index r = begin; r < end; ++r) {
        const auto x = X.row(r).transpose();
        ForwardTrace<float> tr = forward(model, arch, x);
        const LossBreakdown lb = sample_losses(tr, x, model, opts, aux);
        sums.recon += lb.recon;
        sums.top_recon += lb.top_recon;
        sums.sparse += lb.sparse;
        sums.aux += lb.aux_dead;
        accumulate_sample_gradients(model, x, tr, w, opts, aux, scale, g);
        traces[static_cast<std::size_t>(r)] = std::move(tr);
    }
}

}  // namespace

BatchOutcome compute_batch(const HsaeModel<float>& model, const RowMat<float>& X, TrainMode mode,
                           const LossWeights& weights, const ObjectiveOptions& opts, const AuxContext* aux,
                           unsigned threads) {
    const Index n = X.rows();
    if (n < 1) throw std::invalid_argument("compute_batch: empty batch");
    if (X.cols() != model.config.d) throw std::invalid_argument("compute_batch: data dimension does not match model");
    BatchOutcome out;
    out.grads = Gradients<float>::zeros_like(model);
    out.traces.resize(static_cast<std::size_t>(n));
    const float scale = 1.0f / static_cast<float>(n);

    const unsigned workers = static_cast<unsigned>(std::min<Index>(threads, n));
    PartialSums total;
    if (workers <= 1) {
        run_range(model, X, 0, n, mode, weights, opts, aux, scale, out.grads, out.traces, total);
    } else {
        std::vector<Gradients<float>> grads(workers - 1, Gradients<float>::zeros_like(model));
        std::vector<PartialSums> sums(workers);
        std::vector<std::thread> pool;
        auto bound = [&](unsigned t) { return n * static_cast<Index>(t) / static_cast<Index>(workers); };
        for (unsigned t = 1; t < workers; ++t) {
            pool.emplace_back([&, t] {
                run_range(model, X, bound(t), bound(t + 1), mode, weights, opts, aux, scale, grads[t - 1], out.traces,
                          sums[t]);
            });
        }
        run_range(model, X, bound(0), bound(1), mode, weights, opts, aux, scale, out.grads, out.traces, sums[0]);
        for (auto& th : pool) th.join();
        for (auto& g : grads) add_into(out.grads, g);
        for (const auto& s : sums) {
            total.recon += s.recon;
            total.top_recon += s.top_recon;
            total.sparse += s.sparse;
            total.aux += s.aux;
        }
    }
    accumulate_ortho_gradients(model.top, weights, opts, 1.0f, out.grads);

    const double inv = 1.0 / static_cast<double>(n);
    out.loss.recon = total.recon * inv;
    out.loss.top_recon = total.top_recon * inv;
    out.loss.sparse = total.sparse * inv;
    out.loss.aux_dead = total.aux * inv;
    if (opts.ortho) out.loss.ortho = ortho_penalty(model.top, opts.ortho_form);
    out.loss.assemble(weights);
    if (!std::isfinite(out.loss.total) || !gradients_finite(out.grads)) {
        throw NumericFailure("compute_batch: non-finite loss or gradient");
    }
    return out;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const TrainerState& st) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error(tmp + ": cannot open for writing");
        write_model(os, st.model);
        io::put_magic(os, kOptMagic);
        io::put_le<std::uint32_t>(os, kOptVersion);
        io::put_le<std::uint64_t>(os, st.opt.step);
        write_param_blocks(os, st.opt.m);
        write_param_blocks(os, st.opt.v);
        io::put_magic(os, kTrackerMagic);
        io::put_le<std::uint64_t>(os, st.tracker.window);
        io::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(st.tracker.batch_size));
        io::put_le<std::uint64_t>(os, st.tracker.updates);
        io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(st.tracker.top_rates.size()));
        io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(st.tracker.sub_rates.rows()));
        for (Index i = 0; i < st.tracker.top_rates.size(); ++i) io::put_le<double>(os, st.tracker.top_rates[i]);
        for (Index j = 0; j < st.tracker.sub_rates.cols(); ++j)
            for (Index i = 0; i < st.tracker.sub_rates.rows(); ++i) io::put_le<double>(os, st.tracker.sub_rates(i, j));
        os.flush();
        if (!os) throw std::runtime_error(tmp + ": write failed");
    }
    fs::rename(tmp, path);
}

TrainerState load_checkpoint(const std::string& path, const HsaeConfig* expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error(path + ": cannot open checkpoint");
    TrainerState st;
    st.model = read_model(is, path, expected);
    if (!io::check_magic(is, kOptMagic)) {
        if (is.eof()) throw CorruptionError(path + ": truncated before optimizer block");
        throw FormatError(path + ": missing optimizer block");
    }
    const auto version = io::get_le<std::uint32_t>(is, path);
    if (version != kOptVersion) {
        throw FormatError(path + ": unsupported optimizer block version " + std::to_string(version));
    }
    st.opt.step = io::get_le<std::uint64_t>(is, path);
    st.opt.m = HsaeModel<float>::zeros_like(st.model);
    st.opt.v = HsaeModel<float>::zeros_like(st.model);
    read_param_blocks(is, st.opt.m, path + " (first moment)");
    read_param_blocks(is, st.opt.v, path + " (second moment)");

    if (!io::check_magic(is, kTrackerMagic)) {
        if (is.eof()) throw CorruptionError(path + ": truncated before tracker block");
        throw FormatError(path + ": missing tracker block");
    }
    const auto window = io::get_le<std::uint64_t>(is, path);
    const auto batch = io::get_le<std::uint64_t>(is, path);
    st.tracker = DeadLatentTracker::make(st.model.config, window, static_cast<Index>(batch));
    st.tracker.updates = io::get_le<std::uint64_t>(is, path);
    const auto m = io::get_le<std::uint32_t>(is, path);
    const auto a = io::get_le<std::uint32_t>(is, path);
    if (static_cast<Index>(m) != st.model.config.m_top || static_cast<Index>(a) != st.model.config.a) {
        throw FormatError(path + ": tracker block shape disagrees with model");
    }
    for (Index i = 0; i < st.tracker.top_rates.size(); ++i) st.tracker.top_rates[i] = io::get_le<double>(is, path);
    for (Index j = 0; j < st.tracker.sub_rates.cols(); ++j)
        for (Index i = 0; i < st.tracker.sub_rates.rows(); ++i) st.tracker.sub_rates(i, j) = io::get_le<double>(is, path);
    if (is.peek() != std::char_traits<char>::eof()) throw CorruptionError(path + ": trailing bytes after tracker block");
    return st;
}

// ---------------------------------------------------------------------------

std::uint64_t planned_steps(const TrainConfig& cfg, const BatchSource& data) {
    if (cfg.opt.total_steps > 0) return cfg.opt.total_steps;
    return cfg.epochs * data.batches_per_epoch();
}

TrainResult train(const TrainConfig& cfg_in, BatchSource& data, const TrainOptions& options) {
    TrainConfig cfg = cfg_in;
    cfg.validate();
    if (data.d() != cfg.model.d) {
        throw std::invalid_argument("train: data dimension " + std::to_string(data.d()) + " does not match d=" +
                                    std::to_string(cfg.model.d));
    }
    const std::uint64_t per_epoch = data.batches_per_epoch();
    if (per_epoch == 0) throw std::invalid_argument("train: fewer rows than one batch");
    cfg.opt.total_steps = planned_steps(cfg, data);
    cfg.opt.validate();

    TrainResult result;
    TrainerState& st = result.state;
    if (options.resume) {
        st = *options.resume;
        if (!st.model.config.same_shape(cfg.model)) throw std::invalid_argument("train: resume state has a different shape");
    } else {
        if (options.initial_model) {
            st.model = *options.initial_model;
        } else {
            st.model = init_model<float>(cfg.model, cfg.seed);
            if (cfg.mode != TrainMode::hsae) {
                for (auto& ex : st.model.experts) {
                    ex.pi_down.setZero();
                    ex.pi_up.setZero();
                    ex.E.setZero();
                    ex.D.setZero();
                }
            }
        }
        st.opt = OptState<float>::fresh(st.model);
        st.tracker = DeadLatentTracker::make(cfg.model, cfg.ema_window_batches, cfg.batch_size);
    }
    // Loss weights come from the run configuration, not the stored model.
    st.model.config.beta = cfg.model.beta;
    st.model.config.lambda1 = cfg.model.lambda1;
    st.model.config.lambda2 = cfg.model.lambda2;

    const ObjectiveOptions opts = cfg.objective();
    const bool use_aux = cfg.mode == TrainMode::baseline_with_aux;
    const LossWeights base = LossWeights::from(cfg.model, use_aux ? cfg.aux_coeff : 0.0);
    const auto t0 = std::chrono::steady_clock::now();
    std::string last_checkpoint;
    RowMat<float> X;

    const std::uint64_t end = options.stop_after_step > 0 ? std::min(options.stop_after_step, cfg.opt.total_steps)
                                                          : cfg.opt.total_steps;
    while (st.opt.step < end) {
        const std::uint64_t step = st.opt.step;
        data.batch(step % per_epoch, X);
        const LossWeights w = base.warmed(reg_warmup(step, cfg.opt));

        std::vector<Index> dead;
        AuxContext aux_ctx;
        if (use_aux) {
            dead = st.tracker.dead_indices();
            aux_ctx = {&dead, cfg.effective_k_aux()};
        }
        LossBreakdown loss;
        try {
            BatchOutcome bo = compute_batch(st.model, X, cfg.mode, w, opts, use_aux ? &aux_ctx : nullptr, cfg.threads);
            adam_step(st.model, bo.grads, st.opt, cfg.opt);
            renormalize_decoder(st.model, cfg.renorm_expert_decoders);
            update_dead_tracker(st.tracker, bo.traces);
            loss = bo.loss;
        } catch (const NumericFailure& e) {
            std::string msg = std::string("training aborted at step ") + std::to_string(step) + ": " + e.what();
            if (!last_checkpoint.empty()) msg += "; last good checkpoint: " + last_checkpoint;
            throw NumericFailure(msg);
        }

        const bool last = st.opt.step == end;
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || last)) {
            LogRecord rec;
            rec.step = step;
            rec.lr = lr_schedule(step, cfg.opt);
            rec.loss = loss;
            rec.dead_fraction = st.tracker.dead_fraction();
            rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.log.records.push_back(rec);
            if (options.log_stream) *options.log_stream << format_log_record(rec) << '\n';
        }
        if (!options.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && st.opt.step % cfg.checkpoint_every == 0) {
            last_checkpoint = (fs::path(options.checkpoint_dir) / ("ckpt_" + std::to_string(st.opt.step) + ".bin")).string();
            save_checkpoint(last_checkpoint, st);
        }
    }
    return result;
}

}  // namespace hsae
