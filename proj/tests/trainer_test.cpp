#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "slw/trainer.hpp"

namespace {

slw::ModelConfig small_config() {
    slw::ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.context = 16;
    cfg.vocab_size = 256;
    cfg.seed = 5;
    return cfg;
}

slw::TrainSchedule quick_schedule() {
    slw::TrainSchedule s;
    s.peak_lr = 1e-3;
    s.warmup_tokens = 64;
    s.decay_tokens = 100000;
    s.max_tokens = 100000;
    return s;
}

slw::ByteCorpus text_corpus() {
    std::vector<std::uint8_t> bytes;
    const std::string phrase = "the quick brown fox jumps over the lazy dog. ";
    while (bytes.size() < 20000)
        bytes.insert(bytes.end(), phrase.begin(), phrase.end());
    return slw::corpus_from_bytes(std::move(bytes), 0.1);
}

TEST(Schedule, WarmupThenCosine) {
    slw::TrainSchedule s;
    s.peak_lr = 2.0;
    s.warmup_tokens = 100;
    s.decay_tokens = 1100;
    EXPECT_DOUBLE_EQ(slw::lr_at(s, 0), 0.0);
    EXPECT_DOUBLE_EQ(slw::lr_at(s, 50), 1.0);                 // mid-warmup: linear
    EXPECT_DOUBLE_EQ(slw::lr_at(s, 100), 2.0);                // peak at warmup end
    EXPECT_NEAR(slw::lr_at(s, 600), 1.0, 1e-12);              // cosine midpoint = peak/2
    EXPECT_NEAR(slw::lr_at(s, 1100), 0.0, 1e-12);             // decayed to zero
    EXPECT_NEAR(slw::lr_at(s, 5000), 0.0, 1e-12);             // clamped past decay
    // quarter of the way through decay: peak * 0.5*(1+cos(pi/4))
    EXPECT_NEAR(slw::lr_at(s, 350), 2.0 * 0.5 * (1.0 + std::cos(3.141592653589793 / 4)), 1e-12);
}

TEST(Schedule, ValidationRejectsBadRanges) {
    slw::TrainSchedule s;
    s.warmup_tokens = 100;
    s.decay_tokens = 100;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s.decay_tokens = 200;
    EXPECT_NO_THROW(s.validate());
    s.clip_norm = 0;
    EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Clip, ScalesToRequestedNorm) {
    slw::ModelConfig cfg = small_config();
    slw::Model<double> m = slw::build_model<double>(cfg);
    for (auto& p : m.params) p.grad.fill(0.0);
    // plant a [3,4] pair -> norm 5, clip to 1 -> [0.6, 0.8]
    m.at("ln_f.g").grad[0] = 3.0;
    m.at("ln_f.g").grad[1] = 4.0;
    double pre = slw::clip_global_norm(m, 1.0);
    EXPECT_DOUBLE_EQ(pre, 5.0);
    EXPECT_DOUBLE_EQ(m.at("ln_f.g").grad[0], 0.6);
    EXPECT_DOUBLE_EQ(m.at("ln_f.g").grad[1], 0.8);
}

TEST(Clip, NoOpBelowThresholdAndRejectsNonFinite) {
    slw::ModelConfig cfg = small_config();
    slw::Model<double> m = slw::build_model<double>(cfg);
    for (auto& p : m.params) p.grad.fill(0.0);
    m.at("ln_f.g").grad[0] = 0.25;
    double pre = slw::clip_global_norm(m, 1.0);
    EXPECT_DOUBLE_EQ(pre, 0.25);
    EXPECT_DOUBLE_EQ(m.at("ln_f.g").grad[0], 0.25);
    m.at("ln_f.g").grad[0] = std::nan("");
    EXPECT_THROW(slw::clip_global_norm(m, 1.0), std::runtime_error);
}

TEST(Adam, FirstStepMovesByLrTimesSign) {
    // with zero initial moments, bias correction makes |update| ~ |g|/(|g|+eps)
    slw::ModelConfig cfg = small_config();
    slw::Model<double> m = slw::build_model<double>(cfg);
    slw::OptimState<double> st;
    slw::init_optim(m, st);
    for (auto& p : m.params) p.grad.fill(0.0);
    double before = m.at("ln_f.g").value[0];
    m.at("ln_f.g").grad[0] = 0.5;
    slw::adam_step(m, st, 0.1, slw::AdamConfig{}, 0.0);
    // hand derivation: m_hat = g, v_hat = g^2, update = g / (|g| + eps)
    double expect = before - 0.1 * (0.5 / (0.5 + 1e-8));
    EXPECT_NEAR(m.at("ln_f.g").value[0], expect, 1e-12);
    // untouched entries with zero grad stay put
    EXPECT_DOUBLE_EQ(m.at("ln_f.g").value[1], 1.0);
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, DecoupledWeightDecayShrinksParams) {
    slw::ModelConfig cfg = small_config();
    slw::Model<double> m = slw::build_model<double>(cfg);
    slw::OptimState<double> st;
    slw::init_optim(m, st);
    for (auto& p : m.params) p.grad.fill(0.0);
    double before = m.at("ln_f.g").value[0];  // == 1.0
    slw::adam_step(m, st, 0.1, slw::AdamConfig{}, 0.01);
    EXPECT_NEAR(m.at("ln_f.g").value[0], before - 0.1 * 0.01 * before, 1e-15);
}

TEST(Adam, FrozenParamsHaveNoMomentsAndNeverMove) {
    slw::ModelConfig cfg = small_config();
    cfg.n_layers = 3;
    cfg.doped_layout = "TFT";
    slw::Model<double> m = slw::build_model<double>(cfg);
    slw::OptimState<double> st;
    slw::init_optim(m, st);
    for (const auto& p : m.params) {
        if (!p.trainable) {
            EXPECT_EQ(st.m1.count(p.name), 0u) << p.name;
            EXPECT_EQ(st.m2.count(p.name), 0u) << p.name;
        }
    }
    std::vector<double> frozen_before = m.at("L1.mlp.w1").value.data;
    for (auto& p : m.params) p.grad.fill(1.0);
    slw::adam_step(m, st, 0.1, slw::AdamConfig{}, 0.01);
    EXPECT_EQ(m.at("L1.mlp.w1").value.data, frozen_before);
}

TEST(Train, LossDecreasesOnStructuredText) {
    slw::ModelConfig cfg = small_config();
    slw::Model<float> m = slw::build_model<float>(cfg);
    slw::ByteCorpus corpus = text_corpus();
    slw::TrainOptions opts;
    opts.batch_sequences = 8;
    opts.seq_len = 16;
    opts.steps = 80;
    opts.val_interval = 40;
    opts.val_batches = 4;
    opts.seed = 11;
    slw::TrainerState<float> st;
    slw::RunLog log = slw::train(m, corpus, quick_schedule(), opts, st);
    ASSERT_FALSE(log.diverged) << log.divergence_msg;
    ASSERT_EQ(log.rows.size(), 80u);
    EXPECT_LT(log.rows.back().train_loss, log.rows.front().train_loss);
    EXPECT_LT(log.rows.back().val_loss, log.rows.front().val_loss);
    // token and step accounting
    EXPECT_EQ(log.rows.back().step, 80u);
    EXPECT_EQ(log.rows.back().tokens, 80ull * 8 * 16);
    // flop columns match the closed form for a dense model (no frozen params)
    slw::Census c = slw::model_census(m);
    EXPECT_EQ(log.rows.back().flop_real, 6ull * c.trainable_nonembed * 8 * 16 * 80);
    EXPECT_EQ(log.rows.back().flop_ideal, log.rows.back().flop_real);
}

TEST(Train, DeterministicAcrossIdenticalRuns) {
    slw::ByteCorpus corpus = text_corpus();
    slw::TrainOptions opts;
    opts.batch_sequences = 4;
    opts.seq_len = 16;
    opts.steps = 20;
    opts.val_interval = 10;
    opts.val_batches = 2;
    opts.seed = 12;
    auto run_once = [&]() {
        slw::Model<float> m = slw::build_model<float>(small_config());
        slw::TrainerState<float> st;
        return slw::train(m, corpus, quick_schedule(), opts, st);
    };
    slw::RunLog a = run_once();
    slw::RunLog b = run_once();
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        EXPECT_EQ(a.rows[i].train_loss, b.rows[i].train_loss) << i;
        EXPECT_EQ(a.rows[i].lr, b.rows[i].lr) << i;
    }
}

TEST(RunLogCsv, HeaderAndFormatting) {
    slw::RunLog log;
    slw::RunRow r;
    r.step = 1;
    r.tokens = 128;
    r.flop_real = 3000;
    r.flop_ideal = 2000;
    r.lr = 0.125;
    r.train_loss = 5.5451774444795623;
    r.val_loss = std::nan("");
    log.rows.push_back(r);
    const std::string path = "runlog_fmt.csv";
    slw::write_runlog_csv(log, path);
    std::ifstream in(path);
    std::string header, line;
    std::getline(in, header);
    std::getline(in, line);
    std::remove(path.c_str());
    EXPECT_EQ(header, "step,tokens,flop_real,flop_ideal,lr,train_loss,val_loss");
    EXPECT_EQ(line, "1,128,3000,2000,0.125,5.5451774444795623,nan");
}

TEST(Checkpoint, RoundTripBitExact) {
    slw::ModelConfig cfg = small_config();
    cfg.n_layers = 3;
    cfg.doped_layout = "TFT";
    slw::Model<float> m = slw::build_model<float>(cfg);
    slw::ByteCorpus corpus = text_corpus();
    slw::TrainOptions opts;
    opts.batch_sequences = 4;
    opts.seq_len = 16;
    opts.steps = 5;
    opts.seed = 13;
    slw::TrainerState<float> st;
    slw::train(m, corpus, quick_schedule(), opts, st);
    const std::string path = "ckpt_roundtrip.bin";
    slw::save_checkpoint(m, st, path);

    slw::Model<float> m2 = slw::build_model<float>(cfg);
    slw::TrainerState<float> st2;
    slw::load_checkpoint(m2, st2, path);
    std::remove(path.c_str());
    for (std::size_t i = 0; i < m.params.size(); ++i)
        EXPECT_EQ(m2.params[i].value.data, m.params[i].value.data) << m.params[i].name;
    for (const auto& [name, t] : st.opt.m1) EXPECT_EQ(st2.opt.m1.at(name).data, t.data);
    for (const auto& [name, t] : st.opt.m2) EXPECT_EQ(st2.opt.m2.at(name).data, t.data);
    EXPECT_EQ(st2.opt.step, st.opt.step);
    EXPECT_EQ(st2.opt.tokens_seen, st.opt.tokens_seen);
    EXPECT_EQ(st2.data_rng.state(), st.data_rng.state());
    EXPECT_EQ(st2.dropout_rng.state(), st.dropout_rng.state());
}

TEST(Checkpoint, CorruptionRejectedWithoutTouchingModel) {
    slw::ModelConfig cfg = small_config();
    slw::Model<float> m = slw::build_model<float>(cfg);
    slw::TrainerState<float> st;
    slw::init_trainer_state(m, st, 1);
    const std::string path = "ckpt_corrupt.bin";
    slw::save_checkpoint(m, st, path);

    std::vector<char> bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    bytes[bytes.size() / 2] ^= 0x40;
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    slw::Model<float> m2 = slw::build_model<float>(cfg);
    std::vector<float> before = m2.at("tok_emb").value.data;
    slw::TrainerState<float> st2;
    EXPECT_THROW(slw::load_checkpoint(m2, st2, path), std::runtime_error);
    EXPECT_EQ(m2.at("tok_emb").value.data, before);

    // truncation also rejected
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 3));
    }
    EXPECT_THROW(slw::load_checkpoint(m2, st2, path), std::runtime_error);
    std::remove(path.c_str());
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    slw::ByteCorpus corpus = text_corpus();
    slw::TrainOptions opts;
    opts.batch_sequences = 4;
    opts.seq_len = 16;
    opts.val_interval = 10;
    opts.val_batches = 2;
    opts.seed = 14;

    // straight 30-step run
    slw::Model<float> ref = slw::build_model<float>(small_config());
    slw::TrainerState<float> ref_st;
    opts.steps = 30;
    slw::RunLog ref_log = slw::train(ref, corpus, quick_schedule(), opts, ref_st);

    // 15 steps, checkpoint, reload into a fresh model, 15 more
    slw::Model<float> part = slw::build_model<float>(small_config());
    slw::TrainerState<float> part_st;
    opts.steps = 15;
    slw::RunLog first = slw::train(part, corpus, quick_schedule(), opts, part_st);
    const std::string path = "ckpt_resume.bin";
    slw::save_checkpoint(part, part_st, path);

    slw::Model<float> resumed = slw::build_model<float>(small_config());
    slw::TrainerState<float> res_st;
    slw::load_checkpoint(resumed, res_st, path);
    std::remove(path.c_str());
    opts.steps = 30;
    slw::RunLog second = slw::train(resumed, corpus, quick_schedule(), opts, res_st);

    ASSERT_EQ(first.rows.size() + second.rows.size(), ref_log.rows.size());
    for (std::size_t i = 0; i < second.rows.size(); ++i) {
        const slw::RunRow& a = ref_log.rows[15 + i];
        const slw::RunRow& b = second.rows[i];
        EXPECT_EQ(a.step, b.step);
        EXPECT_EQ(a.train_loss, b.train_loss) << "step " << a.step;
        // rows before the resumed run's first eval carry no val loss; where
        // both runs evaluated, the values must agree bit for bit
        if (!std::isnan(b.val_loss)) EXPECT_EQ(a.val_loss, b.val_loss) << "step " << a.step;
    }
    for (std::size_t i = 0; i < ref.params.size(); ++i)
        EXPECT_EQ(resumed.params[i].value.data, ref.params[i].value.data)
            << ref.params[i].name;
}

}  // namespace
