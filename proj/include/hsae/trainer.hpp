#ifndef HSAE_TRAINER_HPP
#define HSAE_TRAINER_HPP

// Training loop: forward, warmed-up losses, backward, clipped Adam, decoder
// renormalization and dead-latent tracking, with periodic checkpoints.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hsae/linalg.hpp"
#include "hsae/model.hpp"
#include "hsae/objective.hpp"
#include "hsae/optim.hpp"
#include "hsae/shards.hpp"

namespace hsae {

enum class TrainMode { hsae, baseline, baseline_with_aux };

const char* to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& text);

struct TrainToggles {
    bool ortho = true;
    bool l1 = true;
    bool top_recon = true;
};

struct TrainConfig {
    HsaeConfig model;
    OptConfig opt;
    std::uint64_t epochs = 4;
    Index batch_size = 32512;
    TrainMode mode = TrainMode::hsae;
    TrainToggles toggles;
    OrthoForm ortho_form = OrthoForm::encoder_decoder;
    L1Form l1_form = L1Form::outside_topk;
    double aux_coeff = 1.0 / 30.0;
    Index k_aux = 0;  ///< 0 selects 2k
    std::uint64_t ema_window_batches = 300;
    std::uint64_t checkpoint_every = 0;  ///< 0 disables periodic checkpoints
    std::uint64_t log_every = 1;
    bool renorm_expert_decoders = false;
    unsigned threads = 1;
    std::uint64_t seed = 0;

    void validate() const;
    ObjectiveOptions objective() const;
    Index effective_k_aux() const { return k_aux > 0 ? k_aux : 2 * model.k; }
};

/// Bias-corrected EMA of per-latent activation rates (fraction of samples in
/// which a latent is selected), updated once per batch.
struct DeadLatentTracker {
    std::uint64_t window = 300;
    Index batch_size = 1;
    std::uint64_t updates = 0;
    Vec<double> top_rates;   ///< raw EMA, length m_top
    Mat<double> sub_rates;   ///< raw EMA, a x m_top (column per expert)

    static DeadLatentTracker make(const HsaeConfig& cfg, std::uint64_t window, Index batch_size);

    double decay() const { return 1.0 - 1.0 / static_cast<double>(window); }
    /// A latent is dead when its rate implies fewer than one activation per
    /// window * batch_size samples.
    double dead_threshold() const { return 1.0 / (static_cast<double>(window) * static_cast<double>(batch_size)); }

    /// Bias-corrected rate estimate for latent i.
    double rate(Index i) const;
    std::vector<Index> dead_indices() const;
    double dead_fraction() const;
    double dead_sublatent_fraction() const;

    /// `top_counts[i]` samples selected latent i in the batch; likewise per
    /// expert sublatent.
    void update(const Vec<double>& top_counts, const Mat<double>& sub_counts, Index samples);
};

template <typename Scalar>
void update_dead_tracker(DeadLatentTracker& tracker, const std::vector<ForwardTrace<Scalar>>& traces) {
    Vec<double> top = Vec<double>::Zero(tracker.top_rates.size());
    Mat<double> sub = Mat<double>::Zero(tracker.sub_rates.rows(), tracker.sub_rates.cols());
    for (const auto& tr : traces) {
        for (Index j : tr.codes.indices) top[j] += 1.0;
        for (const auto& et : tr.experts) sub(et.selected, et.expert) += 1.0;
    }
    tracker.update(top, sub, static_cast<Index>(traces.size()));
}

struct LogRecord {
    std::uint64_t step = 0;
    double lr = 0.0;
    LossBreakdown loss;
    double dead_fraction = 0.0;
    double wall_seconds = 0.0;
};

// Run log format: one line per record,
//   step=<u64> lr=<g> recon=<g> top_recon=<g> ortho=<g> sparse=<g> aux=<g> total=<g> dead=<g> wall=<g>
// with 9 significant digits.
std::string format_log_record(const LogRecord& rec);
std::optional<LogRecord> parse_log_record(const std::string& line);

struct RunLog {
    std::vector<LogRecord> records;
};

/// Random access to fixed-size batches; batch i of every epoch is the same.
class BatchSource {
public:
    virtual ~BatchSource() = default;
    virtual Index d() const = 0;
    virtual std::uint64_t batches_per_epoch() const = 0;
    virtual void batch(std::uint64_t index, RowMat<float>& out) = 0;
};

class MatrixSource final : public BatchSource {
public:
    MatrixSource(const RowMat<float>& X, Index batch_size);
    Index d() const override { return X_.cols(); }
    std::uint64_t batches_per_epoch() const override;
    void batch(std::uint64_t index, RowMat<float>& out) override;

private:
    const RowMat<float>& X_;
    Index batch_size_;
};

class ShardSource final : public BatchSource {
public:
    ShardSource(std::vector<std::string> paths, Index batch_size);
    Index d() const override { return stream_.d(); }
    std::uint64_t batches_per_epoch() const override { return stream_.batches_per_epoch(); }
    void batch(std::uint64_t index, RowMat<float>& out) override;

private:
    BatchStream stream_;
    std::uint64_t position_ = 0;
};

struct TrainerState {
    HsaeModel<float> model;
    OptState<float> opt;
    DeadLatentTracker tracker;
};

void save_checkpoint(const std::string& path, const TrainerState& state);
/// With `expected`, a shape disagreement raises an error naming the field.
TrainerState load_checkpoint(const std::string& path, const HsaeConfig* expected = nullptr);

struct TrainOptions {
    std::optional<TrainerState> resume;       ///< continue from this state
    std::uint64_t stop_after_step = 0;        ///< stop once state.opt.step reaches this (0 = run to the end)
    std::string checkpoint_dir;               ///< periodic checkpoints land here when non-empty
    std::ostream* log_stream = nullptr;       ///< receives formatted log lines
    /// Replaces the random initial model (used to start from a chosen state).
    std::optional<HsaeModel<float>> initial_model;
};

struct TrainResult {
    TrainerState state;
    RunLog log;
};

/// Total optimizer steps of the run.
std::uint64_t planned_steps(const TrainConfig& cfg, const BatchSource& data);

/// Gradients and losses for one batch, averaged over its rows.
struct BatchOutcome {
    LossBreakdown loss;
    Gradients<float> grads;
    std::vector<ForwardTrace<float>> traces;
};

BatchOutcome compute_batch(const HsaeModel<float>& model, const RowMat<float>& X, TrainMode mode,
                           const LossWeights& weights, const ObjectiveOptions& opts, const AuxContext* aux,
                           unsigned threads);

TrainResult train(const TrainConfig& cfg, BatchSource& data, const TrainOptions& options = {});

}  // namespace hsae

#endif  // HSAE_TRAINER_HPP
