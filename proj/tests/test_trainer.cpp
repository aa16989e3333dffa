#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "hsae/checkpoint.hpp"
#include "hsae/datagen.hpp"
#include "hsae/errors.hpp"
#include "hsae/trainer.hpp"
#include "test_util.hpp"

using namespace hsae;
using hsae::testing::TempDir;

namespace {

struct Desk {
    TrainConfig cfg;
    RowMat<float> X;
};

Desk desk(std::uint64_t seed = 0) {
    DictionarySpec spec;
    spec.d = 16;
    spec.n_parents = 8;
    spec.n_children = 4;
    spec.s_true = 2;
    spec.seed = seed;
    const auto dict = plant_dictionary(spec);
    Desk out;
    out.X = sample_activations(dict, 4096, spec).X;
    TrainConfig& c = out.cfg;
    c.model.d = 16;
    c.model.m_top = 16;
    c.model.k = 2;
    c.model.a = 4;
    c.model.s = 2;
    c.model.alpha = 0.25;
    c.batch_size = 128;
    c.epochs = 4;
    c.opt.lr_peak = 5e-3;
    c.opt.warmup_steps = 10;
    c.seed = seed;
    return out;
}

void expect_same_model(const HsaeModel<float>& a, const HsaeModel<float>& b) {
    const auto pa = param_blocks(const_cast<HsaeModel<float>&>(a));
    const auto pb = param_blocks(const_cast<HsaeModel<float>&>(b));
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        ASSERT_EQ(pa[i].size(), pb[i].size());
        for (Index j = 0; j < pa[i].size(); ++j) ASSERT_EQ(pa[i].data()[j], pb[i].data()[j]) << "block " << i;
    }
}

}  // namespace

TEST(Tracker, DecayForDefaultWindow) {
    const auto t = DeadLatentTracker::make(hsae::testing::small_config(), 300, 64);
    EXPECT_NEAR(t.decay(), 0.99667, 1e-5);
    EXPECT_DOUBLE_EQ(t.dead_threshold(), 1.0 / (300.0 * 64.0));
    EXPECT_TRUE(t.dead_indices().empty());
}

TEST(Tracker, ConstantRateIsAFixedPoint) {
    const auto cfg = hsae::testing::small_config();
    auto t = DeadLatentTracker::make(cfg, 300, 10);
    Vec<double> counts(cfg.m_top);
    counts << 10, 5, 0, 1, 2, 0;
    const Mat<double> sub = Mat<double>::Zero(cfg.a, cfg.m_top);
    for (int i = 0; i < 7; ++i) {
        t.update(counts, sub, 10);
        EXPECT_NEAR(t.rate(0), 1.0, 1e-12);
        EXPECT_NEAR(t.rate(1), 0.5, 1e-12);
        EXPECT_NEAR(t.rate(3), 0.1, 1e-12);
        EXPECT_EQ(t.dead_indices(), (std::vector<Index>{2, 5}));
    }
    EXPECT_NEAR(t.dead_fraction(), 2.0 / 6.0, 1e-15);
    EXPECT_DOUBLE_EQ(t.dead_sublatent_fraction(), 1.0);
}

TEST(Tracker, LatentThatStopsFiringEventuallyDies) {
    const auto cfg = hsae::testing::small_config();
    auto t = DeadLatentTracker::make(cfg, 20, 4);
    Vec<double> on = Vec<double>::Constant(cfg.m_top, 4.0);
    const Mat<double> sub = Mat<double>::Zero(cfg.a, cfg.m_top);
    for (int i = 0; i < 50; ++i) t.update(on, sub, 4);
    Vec<double> off = on;
    off[1] = 0.0;
    int steps = 0;
    while (t.dead_indices().empty() && steps < 10000) {
        t.update(off, sub, 4);
        ++steps;
    }
    EXPECT_EQ(t.dead_indices(), (std::vector<Index>{1}));
    // e^{-steps/20} must fall below 1/80 (roughly 88 steps)
    EXPECT_GT(steps, 50);
    EXPECT_LT(steps, 150);
}

TEST(LogRecord, RoundTrip) {
    LogRecord r;
    r.step = 17;
    r.lr = 4.5e-4;
    r.loss.recon = 0.125;
    r.loss.top_recon = 0.5;
    r.loss.ortho = 1.0 / 3.0;
    r.loss.sparse = 2e-7;
    r.loss.aux_dead = 0.0;
    r.loss.total = 0.75;
    r.dead_fraction = 0.25;
    r.wall_seconds = 1.5;
    const std::string line = format_log_record(r);
    const auto back = parse_log_record(line);
    ASSERT_TRUE(back.has_value());
    EXPECT_EQ(back->step, 17u);
    EXPECT_EQ(format_log_record(*back), line);
    EXPECT_NEAR(back->loss.ortho, 1.0 / 3.0, 1e-9);
    EXPECT_FALSE(parse_log_record("garbage").has_value());
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir dir;
    auto d = desk();
    MatrixSource src(d.X, d.cfg.batch_size);
    TrainOptions o;
    o.stop_after_step = 7;
    const auto res = train(d.cfg, src, o);
    save_checkpoint(dir.file("c.bin"), res.state);
    const auto back = load_checkpoint(dir.file("c.bin"), &d.cfg.model);
    expect_same_model(back.model, res.state.model);
    expect_same_model(back.opt.m, res.state.opt.m);
    expect_same_model(back.opt.v, res.state.opt.v);
    EXPECT_EQ(back.opt.step, 7u);
    EXPECT_EQ(back.tracker.updates, res.state.tracker.updates);
    EXPECT_EQ(back.tracker.top_rates, res.state.tracker.top_rates);
    EXPECT_EQ(back.tracker.sub_rates, res.state.tracker.sub_rates);
}

TEST(Checkpoint, TruncationAndTrailingBytesAreCorruption) {
    TempDir dir;
    auto d = desk();
    TrainerState st{init_model<float>(d.cfg.model, 1), {}, DeadLatentTracker::make(d.cfg.model, 300, 128)};
    st.opt = OptState<float>::fresh(st.model);
    save_checkpoint(dir.file("c.bin"), st);
    const auto size = std::filesystem::file_size(dir.file("c.bin"));

    std::filesystem::copy_file(dir.file("c.bin"), dir.file("t.bin"));
    std::filesystem::resize_file(dir.file("t.bin"), size - 5);
    EXPECT_THROW(load_checkpoint(dir.file("t.bin")), CorruptionError);

    std::filesystem::copy_file(dir.file("c.bin"), dir.file("x.bin"));
    std::ofstream(dir.file("x.bin"), std::ios::binary | std::ios::app) << "zz";
    EXPECT_THROW(load_checkpoint(dir.file("x.bin")), CorruptionError);
}

TEST(Checkpoint, ShapeMismatchNamesTheField) {
    TempDir dir;
    auto d = desk();
    TrainerState st{init_model<float>(d.cfg.model, 1), {}, DeadLatentTracker::make(d.cfg.model, 300, 128)};
    st.opt = OptState<float>::fresh(st.model);
    save_checkpoint(dir.file("c.bin"), st);
    HsaeConfig other = d.cfg.model;
    other.k = 3;
    try {
        load_checkpoint(dir.file("c.bin"), &other);
        FAIL() << "expected a mismatch";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("'k'"), std::string::npos) << e.what();
    }
}

TEST(Train, ResumeMatchesUninterruptedRun) {
    TempDir dir;
    auto d = desk();
    d.cfg.epochs = 2;
    MatrixSource src(d.X, d.cfg.batch_size);
    const auto full = train(d.cfg, src);

    TrainOptions first;
    first.stop_after_step = 13;
    const auto part = train(d.cfg, src, first);
    save_checkpoint(dir.file("r.bin"), part.state);
    TrainOptions second;
    second.resume = load_checkpoint(dir.file("r.bin"), &d.cfg.model);
    const auto rest = train(d.cfg, src, second);

    expect_same_model(rest.state.model, full.state.model);
    ASSERT_FALSE(rest.log.records.empty());
    const auto& next = rest.log.records.front();
    EXPECT_EQ(next.step, 13u);
    const auto& ref = full.log.records[13];
    EXPECT_EQ(next.loss.recon, ref.loss.recon);
    EXPECT_EQ(next.loss.top_recon, ref.loss.top_recon);
    EXPECT_EQ(next.loss.ortho, ref.loss.ortho);
    EXPECT_EQ(next.loss.sparse, ref.loss.sparse);
    EXPECT_EQ(next.loss.total, ref.loss.total);
}

TEST(Train, ThreadCountDoesNotChangeLossMuch) {
    auto d = desk();
    d.cfg.epochs = 1;
    MatrixSource src(d.X, d.cfg.batch_size);
    const auto one = train(d.cfg, src);
    d.cfg.threads = 3;
    const auto three = train(d.cfg, src);
    EXPECT_NEAR(one.log.records.back().loss.total, three.log.records.back().loss.total, 1e-4);
}

TEST(Train, BaselineWithTogglesOffHasOnlyReconstruction) {
    auto d = desk();
    d.cfg.epochs = 1;
    d.cfg.mode = TrainMode::baseline;
    d.cfg.toggles = {false, false, false};
    MatrixSource src(d.X, d.cfg.batch_size);
    const auto res = train(d.cfg, src);
    for (const auto& r : res.log.records) {
        EXPECT_EQ(r.loss.top_recon, 0.0);
        EXPECT_EQ(r.loss.ortho, 0.0);
        EXPECT_EQ(r.loss.sparse, 0.0);
        EXPECT_EQ(r.loss.aux_dead, 0.0);
        EXPECT_EQ(r.loss.total, r.loss.recon);
    }
    for (const auto& ex : res.state.model.experts) {
        EXPECT_EQ(ex.pi_up.norm(), 0.0f);
        EXPECT_EQ(ex.D.norm(), 0.0f);
    }
}

TEST(Train, ZeroExpertsReduceToBaseline) {
    auto d = desk();
    d.cfg.toggles.l1 = false;
    const auto model = init_model<float>(d.cfg.model, 5);
    HsaeModel<float> flat = model;
    for (auto& ex : flat.experts) {
        ex.pi_down.setZero();
        ex.pi_up.setZero();
        ex.E.setZero();
        ex.D.setZero();
    }
    const RowMat<float> X = d.X.topRows(64);
    const auto w = LossWeights::from(d.cfg.model);
    const auto h = compute_batch(flat, X, TrainMode::hsae, w, d.cfg.objective(), nullptr, 1);
    const auto b = compute_batch(flat, X, TrainMode::baseline, w, d.cfg.objective(), nullptr, 1);
    EXPECT_EQ(h.loss.recon, b.loss.recon);
    EXPECT_EQ(h.loss.top_recon, b.loss.top_recon);
    EXPECT_EQ(h.loss.ortho, b.loss.ortho);
    EXPECT_EQ(h.loss.total, b.loss.total);
    EXPECT_EQ(h.grads.top.E, b.grads.top.E);
    EXPECT_EQ(h.grads.top.D, b.grads.top.D);
}

TEST(Train, LossFallsOnDeskConfig) {
    auto d = desk();
    d.cfg.epochs = 8;
    MatrixSource src(d.X, d.cfg.batch_size);
    std::ostringstream log;
    TrainOptions o;
    o.log_stream = &log;
    const auto res = train(d.cfg, src, o);
    ASSERT_GE(res.log.records.size(), 2u);
    const double first = res.log.records.front().loss.recon;
    const double last = res.log.records.back().loss.recon;
    EXPECT_LE(last, 0.5 * first) << first << " -> " << last;

    std::istringstream lines(log.str());
    std::string line;
    std::size_t parsed = 0;
    while (std::getline(lines, line)) parsed += parse_log_record(line).has_value();
    EXPECT_EQ(parsed, res.log.records.size());
}

TEST(Train, NumericFailureKeepsLastCheckpoint) {
    TempDir dir;
    auto d = desk();
    d.cfg.epochs = 1;
    d.cfg.checkpoint_every = 2;
    d.X(5 * d.cfg.batch_size + 3, 0) = std::numeric_limits<float>::quiet_NaN();
    MatrixSource src(d.X, d.cfg.batch_size);
    TrainOptions o;
    o.checkpoint_dir = dir.path().string();
    try {
        train(d.cfg, src, o);
        FAIL() << "expected NumericFailure";
    } catch (const NumericFailure& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("step 5"), std::string::npos) << msg;
        EXPECT_NE(msg.find("ckpt_4.bin"), std::string::npos) << msg;
    }
    const auto st = load_checkpoint(dir.file("ckpt_4.bin"), &d.cfg.model);
    EXPECT_EQ(st.opt.step, 4u);
    EXPECT_FALSE(std::filesystem::exists(dir.file("ckpt_6.bin")));
}

TEST(Train, RejectsMismatchedData) {
    auto d = desk();
    RowMat<float> X = RowMat<float>::Ones(256, 8);
    MatrixSource src(X, d.cfg.batch_size);
    EXPECT_THROW(train(d.cfg, src), std::invalid_argument);
    RowMat<float> tiny = d.X.topRows(10);
    MatrixSource small(tiny, d.cfg.batch_size);
    EXPECT_THROW(train(d.cfg, small), std::invalid_argument);
}

TEST(TrainMode, ParseRoundTrip) {
    for (auto m : {TrainMode::hsae, TrainMode::baseline, TrainMode::baseline_with_aux})
        EXPECT_EQ(parse_train_mode(to_string(m)), m);
    EXPECT_THROW(parse_train_mode("flat"), std::invalid_argument);
}

TEST(Train, SmoothedLossNonincreasingInSecondHalf) {
    auto d = desk();
    d.cfg.epochs = 32;  // 1024 steps
    MatrixSource src(d.X, d.cfg.batch_size);
    const auto res = train(d.cfg, src);
    const auto& recs = res.log.records;
    ASSERT_EQ(recs.size(), 1024u);
    // means over consecutive 100-step blocks of the second half
    std::vector<double> blocks;
    for (std::size_t start = 512; start + 100 <= recs.size(); start += 100) {
        double acc = 0.0;
        for (std::size_t i = start; i < start + 100; ++i) acc += recs[i].loss.total;
        blocks.push_back(acc / 100.0);
    }
    ASSERT_GE(blocks.size(), 5u);
    for (std::size_t i = 1; i < blocks.size(); ++i) EXPECT_LE(blocks[i], blocks[i - 1]) << "block " << i;
}

TEST(Train, DecoderColumnsStayUnitNorm) {
    auto d = desk();
    d.cfg.epochs = 1;
    MatrixSource src(d.X, d.cfg.batch_size);
    const auto res = train(d.cfg, src);
    for (Index j = 0; j < res.state.model.config.m_top; ++j)
        EXPECT_NEAR(res.state.model.top.D.col(j).norm(), 1.0f, 1e-5f);
}
