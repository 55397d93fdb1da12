#pragma once

// Training loop: Adam with token-based linear warmup + cosine decay, global
// norm clipping, frozen-parameter skipping, periodic validation, run logging,
// and a bit-exact checkpoint container.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <zlib.h>

#include "slw/accounting.hpp"
#include "slw/core.hpp"
#include "slw/data.hpp"
#include "slw/model.hpp"

namespace slw {

struct TrainSchedule {
    double peak_lr = 5e-4;
    std::uint64_t warmup_tokens = 0;
    std::uint64_t decay_tokens = 0;
    std::uint64_t max_tokens = 0;
    double weight_decay = 0.0;
    double clip_norm = 1.0;

    void validate() const {
        if (warmup_tokens >= decay_tokens)
            throw std::invalid_argument("TrainSchedule: warmup_tokens must be < decay_tokens");
        if (clip_norm <= 0) throw std::invalid_argument("TrainSchedule: clip_norm must be > 0");
        if (peak_lr <= 0) throw std::invalid_argument("TrainSchedule: peak_lr must be > 0");
    }
};

// linear 0 -> peak over warmup, then cosine peak -> 0 over [warmup, decay]
inline double lr_at(const TrainSchedule& s, std::uint64_t tokens_seen) {
    if (s.warmup_tokens > 0 && tokens_seen < s.warmup_tokens)
        return s.peak_lr * static_cast<double>(tokens_seen) / static_cast<double>(s.warmup_tokens);
    double progress = static_cast<double>(tokens_seen - s.warmup_tokens) /
                      static_cast<double>(s.decay_tokens - s.warmup_tokens);
    progress = std::min(std::max(progress, 0.0), 1.0);
    return s.peak_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

template <typename T>
struct OptimState {
    // moment buffers exist only for trainable arrays
    std::unordered_map<std::string, Tensor<T>> m1, m2;
    std::uint64_t step = 0;
    std::uint64_t tokens_seen = 0;
};

template <typename T>
void init_optim(const Model<T>& model, OptimState<T>& state) {
    for (const auto& p : model.params) {
        if (!p.trainable) continue;
        state.m1.emplace(p.name, Tensor<T>(p.value.shape));
        state.m2.emplace(p.name, Tensor<T>(p.value.shape));
    }
}

// Scales all trainable gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm. Throws on non-finite gradients (divergence).
template <typename T>
double clip_global_norm(Model<T>& model, double max_norm) {
    if (max_norm <= 0) throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
    double sq = 0.0;
    for (const auto& p : model.params) {
        if (!p.trainable) continue;
        for (const T& g : p.grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    if (!std::isfinite(sq)) throw std::runtime_error("clip_global_norm: non-finite gradient");
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        T scale = static_cast<T>(max_norm / norm);
        for (auto& p : model.params) {
            if (!p.trainable) continue;
            for (T& g : p.grad.data) g *= scale;
        }
    }
    return norm;
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam with decoupled weight decay. Frozen arrays have no
// moment buffers and are never touched.
template <typename T>
void adam_step(Model<T>& model, OptimState<T>& state, double lr, const AdamConfig& ac,
               double weight_decay) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(ac.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(ac.beta2, static_cast<double>(state.step));
    for (auto& p : model.params) {
        if (!p.trainable) continue;
        Tensor<T>& m1 = state.m1.at(p.name);
        Tensor<T>& m2 = state.m2.at(p.name);
        if (!m1.same_shape(p.value))
            throw std::invalid_argument("adam_step: state shape mismatch for " + p.name);
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            double g = static_cast<double>(p.grad[i]);
            double m = ac.beta1 * static_cast<double>(m1[i]) + (1.0 - ac.beta1) * g;
            double v = ac.beta2 * static_cast<double>(m2[i]) + (1.0 - ac.beta2) * g * g;
            m1[i] = static_cast<T>(m);
            m2[i] = static_cast<T>(v);
            double update = (m / bc1) / (std::sqrt(v / bc2) + ac.eps);
            double pv = static_cast<double>(p.value[i]);
            p.value[i] = static_cast<T>(pv - lr * update - lr * weight_decay * pv);
        }
    }
}

struct RunRow {
    std::uint64_t step = 0;
    std::uint64_t tokens = 0;
    std::uint64_t flop_real = 0;
    std::uint64_t flop_ideal = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = std::nan("");
};

struct RunLog {
    std::vector<RunRow> rows;
    bool diverged = false;
    std::string divergence_msg;
};

struct TrainOptions {
    std::size_t batch_sequences = 8;
    std::size_t seq_len = 128;
    std::size_t steps = 100;
    std::size_t val_interval = 50;
    std::size_t val_batches = 16;
    std::uint64_t seed = 0;
    AdamConfig adam;
};

template <typename T>
struct TrainerState {
    OptimState<T> opt;
    Rng data_rng{0};
    Rng dropout_rng{0};
    bool initialized = false;
};

template <typename T>
void init_trainer_state(const Model<T>& model, TrainerState<T>& st, std::uint64_t seed) {
    st.opt = OptimState<T>{};
    init_optim(model, st.opt);
    st.data_rng = Rng(derive_seed(seed, "data"));
    st.dropout_rng = Rng(derive_seed(seed, "dropout"));
    st.initialized = true;
}

// Runs until opt.step == options.steps, appending one row per update.
// Validation uses a fixed batch set drawn once from its own seed channel,
// so resumed runs see the same validation data.
template <typename T>
RunLog train(Model<T>& model, const ByteCorpus& corpus, const TrainSchedule& sched,
             const TrainOptions& options, TrainerState<T>& st) {
    sched.validate();
    if (!st.initialized) init_trainer_state(model, st, options.seed);
    const std::size_t B = options.batch_sequences, S = options.seq_len;
    const std::uint64_t tokens_per_step = static_cast<std::uint64_t>(B) * S;

    Census census = model_census(model);
    BudgetInputs bi;
    bi.n_trainable = census.trainable_nonembed;
    bi.n_frozen = census.frozen;
    bi.tokens_per_batch = tokens_per_step;

    Rng val_rng(derive_seed(options.seed, "val"));
    std::vector<Batch> val_set;
    val_set.reserve(options.val_batches);
    for (std::size_t i = 0; i < options.val_batches; ++i)
        val_set.push_back(sample_batch(corpus, Split::val, B, S, val_rng));

    const bool uses_dropout = model.cfg.dropout > 0 || model.cfg.attn_dropout > 0;

    RunLog log;
    double last_val = std::nan("");
    while (st.opt.step < options.steps) {
        Batch batch = sample_batch(corpus, Split::train, B, S, st.data_rng);
        double lr = lr_at(sched, st.opt.tokens_seen);
        model.zero_grads();
        double loss;
        try {
            loss = static_cast<double>(model_loss_and_grad(
                model, batch.inputs, batch.targets, B, S, uses_dropout ? &st.dropout_rng : nullptr));
            if (!std::isfinite(loss)) throw std::runtime_error("non-finite training loss");
            clip_global_norm(model, sched.clip_norm);
        } catch (const std::runtime_error& e) {
            log.diverged = true;
            log.divergence_msg = e.what();
            break;
        }
        adam_step(model, st.opt, lr, options.adam, sched.weight_decay);
        st.opt.tokens_seen += tokens_per_step;

        RunRow row;
        row.step = st.opt.step;
        row.tokens = st.opt.tokens_seen;
        bi.steps = st.opt.step;
        bi.frozen_cost = FrozenCost::real();
        row.flop_real = compute_budget(bi).flop;
        bi.frozen_cost = FrozenCost::ideal();
        row.flop_ideal = compute_budget(bi).flop;
        row.lr = lr;
        row.train_loss = loss;
        if (st.opt.step == 1 || st.opt.step % options.val_interval == 0 ||
            st.opt.step == options.steps) {
            double acc = 0.0;
            for (const Batch& vb : val_set)
                acc += static_cast<double>(model_eval_loss(model, vb.inputs, vb.targets, B, S));
            last_val = acc / static_cast<double>(val_set.size());
        }
        row.val_loss = last_val;
        log.rows.push_back(row);
    }
    return log;
}

inline void write_runlog_csv(const RunLog& log, const std::string& path, bool append = false) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw std::runtime_error("runlog: cannot open '" + path + "' for writing");
    if (!append) out << "step,tokens,flop_real,flop_ideal,lr,train_loss,val_loss\n";
    char buf[256];
    for (const RunRow& r : log.rows) {
        std::snprintf(buf, sizeof(buf), "%llu,%llu,%llu,%llu,%.17g,%.17g,%.17g\n",
                      static_cast<unsigned long long>(r.step),
                      static_cast<unsigned long long>(r.tokens),
                      static_cast<unsigned long long>(r.flop_real),
                      static_cast<unsigned long long>(r.flop_ideal), r.lr, r.train_loss,
                      r.val_loss);
        out << buf;
    }
    if (log.diverged) out << "# diverged: " << log.divergence_msg << "\n";
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "SLCC", version u32, array records
// (name, dtype code, trainable flag, rank, extents, little-endian raw data),
// trainer scalars, trailing CRC32 of everything before it.

namespace detail {

struct ByteWriter {
    std::vector<unsigned char> bytes;

    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), c, c + n);
    }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
};

struct ByteReader {
    const std::vector<unsigned char>& bytes;
    std::size_t pos = 0;

    void raw(void* p, std::size_t n) {
        if (pos + n > bytes.size()) throw std::runtime_error("checkpoint: truncated file");
        std::memcpy(p, bytes.data() + pos, n);
        pos += n;
    }
    std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
    std::string str() {
        std::uint32_t n = u32();
        if (pos + n > bytes.size()) throw std::runtime_error("checkpoint: truncated string");
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

template <typename T>
constexpr std::uint8_t dtype_code() {
    if constexpr (std::is_same_v<T, float>) return 0;
    else return 1;
}

template <typename T>
void write_array(ByteWriter& w, const std::string& name, const Tensor<T>& t, bool trainable) {
    w.str(name);
    w.u8(dtype_code<T>());
    w.u8(trainable ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape) w.u64(e);
    w.raw(t.ptr(), t.numel() * sizeof(T));
}

template <typename T>
void read_array_into(ByteReader& r, Tensor<T>& dst, bool expect_trainable, const std::string& ctx) {
    if (r.u8() != dtype_code<T>()) throw std::runtime_error("checkpoint: dtype mismatch at " + ctx);
    bool trainable = r.u8() != 0;
    if (trainable != expect_trainable)
        throw std::runtime_error("checkpoint: trainable flag mismatch at " + ctx);
    std::uint32_t rank = r.u32();
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = r.u64();
    if (shape != dst.shape) throw std::runtime_error("checkpoint: shape mismatch at " + ctx);
    r.raw(dst.ptr(), dst.numel() * sizeof(T));
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'S', 'L', 'C', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const Model<T>& model, const TrainerState<T>& st, const std::string& path) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    std::uint64_t n_arrays = model.params.size() + st.opt.m1.size() + st.opt.m2.size();
    w.u64(n_arrays);
    for (const auto& p : model.params) detail::write_array(w, p.name, p.value, p.trainable);
    for (const auto& p : model.params) {
        if (!p.trainable) continue;
        detail::write_array(w, "opt.m1." + p.name, st.opt.m1.at(p.name), true);
        detail::write_array(w, "opt.m2." + p.name, st.opt.m2.at(p.name), true);
    }
    w.u64(st.opt.step);
    w.u64(st.opt.tokens_seen);
    w.u64(st.data_rng.state());
    w.u64(st.dropout_rng.state());
    std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0L, w.bytes.data(), static_cast<uInt>(w.bytes.size())));
    w.u32(crc);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(w.bytes.data()),
              static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw std::runtime_error("checkpoint: write failure on '" + path + "'");
}

// Model must already be built with the matching config; arrays are matched
// by name and shape. Any corruption is rejected before touching the model.
template <typename T>
void load_checkpoint(Model<T>& model, TrainerState<T>& st, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 16) throw std::runtime_error("checkpoint: truncated file");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    std::uint32_t actual_crc = static_cast<std::uint32_t>(
        ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
    if (stored_crc != actual_crc) throw std::runtime_error("checkpoint: CRC32 mismatch");

    detail::ByteReader r{bytes};
    r.pos = 4;
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

    TrainerState<T> fresh;
    init_trainer_state(model, fresh, 0);
    std::uint64_t n_arrays = r.u64();
    std::size_t expected = model.params.size() + fresh.opt.m1.size() + fresh.opt.m2.size();
    if (n_arrays != expected) throw std::runtime_error("checkpoint: array count mismatch");

    // stage into a copy of the parameter set first
    std::vector<Tensor<T>> staged_values;
    staged_values.reserve(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        std::string name = r.str();
        if (name != model.params[i].name)
            throw std::runtime_error("checkpoint: unexpected array '" + name + "'");
        Tensor<T> t(model.params[i].value.shape);
        detail::read_array_into(r, t, model.params[i].trainable, name);
        staged_values.push_back(std::move(t));
    }
    for (const auto& p : model.params) {
        if (!p.trainable) continue;
        for (const char* mom : {"m1", "m2"}) {
            std::string name = r.str();
            std::string want = std::string("opt.") + mom + "." + p.name;
            if (name != want) throw std::runtime_error("checkpoint: unexpected array '" + name + "'");
            Tensor<T>& dst = (std::strcmp(mom, "m1") == 0) ? fresh.opt.m1.at(p.name)
                                                           : fresh.opt.m2.at(p.name);
            detail::read_array_into(r, dst, true, name);
        }
    }
    fresh.opt.step = r.u64();
    fresh.opt.tokens_seen = r.u64();
    fresh.data_rng.set_state(r.u64());
    fresh.dropout_rng.set_state(r.u64());
    fresh.initialized = true;

    for (std::size_t i = 0; i < model.params.size(); ++i)
        model.params[i].value = std::move(staged_values[i]);
    st = std::move(fresh);
}

}  // namespace slw
