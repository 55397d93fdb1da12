#pragma once

// Experiment configuration: JSON documents with model / schedule / data / run
// sections, named full-size presets, and recipe generation for the standard
// comparisons (dense ladder, doped vs skeleton, structured vs matched dense).

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "slw/model.hpp"
#include "slw/trainer.hpp"

namespace slw {

struct DataSection {
    std::string path;
    double val_fraction = 0.1;
};

struct RunSection {
    std::size_t steps = 0;           // either steps or max_tokens must be set
    std::uint64_t max_tokens = 0;
    std::size_t batch_sequences = 8;
    std::size_t seq_len = 0;         // 0 = model context
    std::size_t val_interval = 50;
    std::size_t val_batches = 16;
    std::size_t checkpoint_interval = 0;  // 0 = final checkpoint only
    std::uint64_t seed = 0;
    std::string out_dir = "runs/out";
};

struct ExperimentConfig {
    std::string name = "experiment";
    ModelConfig model;
    TrainSchedule schedule;
    DataSection data;
    RunSection run;

    std::size_t seq_len() const { return run.seq_len ? run.seq_len : model.context; }

    std::size_t resolved_steps() const {
        if (run.steps) return run.steps;
        std::uint64_t per_step = static_cast<std::uint64_t>(run.batch_sequences) * seq_len();
        return static_cast<std::size_t>(run.max_tokens / per_step);
    }

    void validate() const {
        model.validate();
        schedule.validate();
        if (run.steps == 0 && run.max_tokens == 0)
            throw std::invalid_argument("run: one of steps or max_tokens is required");
        if (run.batch_sequences == 0) throw std::invalid_argument("run: batch_sequences must be >= 1");
        if (seq_len() > model.context)
            throw std::invalid_argument("run: seq_len exceeds model context");
        if (!(data.val_fraction > 0 && data.val_fraction < 0.5))
            throw std::invalid_argument("data: val_fraction must lie in (0, 0.5)");
        if (data.path.empty()) throw std::invalid_argument("data: path is required");
    }
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& known,
                                const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known)
            if (it.key() == k) { ok = true; break; }
        if (!ok)
            throw std::invalid_argument("config: unknown key '" + it.key() + "' in section '" +
                                        section + "'");
    }
}

}  // namespace detail

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    using detail::reject_unknown_keys;
    reject_unknown_keys(j, {"name", "model", "schedule", "data", "run"}, "(root)");
    ExperimentConfig c;
    if (j.contains("name")) c.name = j.at("name").get<std::string>();

    const auto& m = j.at("model");
    reject_unknown_keys(m,
                        {"n_layers", "d_model", "n_heads", "context", "dropout", "attn_dropout",
                         "mlp_kind", "block_count", "doped_layout", "frozen_hidden_mult",
                         "mlp_hidden_mult", "vocab_size"},
                        "model");
    c.model.n_layers = m.at("n_layers").get<std::size_t>();
    c.model.d_model = m.at("d_model").get<std::size_t>();
    c.model.n_heads = m.at("n_heads").get<std::size_t>();
    c.model.context = m.at("context").get<std::size_t>();
    if (m.contains("dropout")) c.model.dropout = m.at("dropout").get<double>();
    if (m.contains("attn_dropout")) c.model.attn_dropout = m.at("attn_dropout").get<double>();
    if (m.contains("mlp_kind")) c.model.mlp_kind = mlp_kind_from_name(m.at("mlp_kind").get<std::string>());
    if (m.contains("block_count")) c.model.block_count = m.at("block_count").get<std::size_t>();
    if (m.contains("doped_layout")) c.model.doped_layout = m.at("doped_layout").get<std::string>();
    if (m.contains("frozen_hidden_mult"))
        c.model.frozen_hidden_mult = m.at("frozen_hidden_mult").get<std::size_t>();
    if (m.contains("mlp_hidden_mult"))
        c.model.mlp_hidden_mult = m.at("mlp_hidden_mult").get<std::size_t>();
    if (m.contains("vocab_size")) c.model.vocab_size = m.at("vocab_size").get<std::size_t>();

    const auto& s = j.at("schedule");
    reject_unknown_keys(
        s, {"peak_lr", "warmup_tokens", "decay_tokens", "max_tokens", "weight_decay", "clip_norm"},
        "schedule");
    c.schedule.peak_lr = s.at("peak_lr").get<double>();
    c.schedule.warmup_tokens = s.at("warmup_tokens").get<std::uint64_t>();
    c.schedule.decay_tokens = s.at("decay_tokens").get<std::uint64_t>();
    if (s.contains("max_tokens")) c.schedule.max_tokens = s.at("max_tokens").get<std::uint64_t>();
    if (s.contains("weight_decay")) c.schedule.weight_decay = s.at("weight_decay").get<double>();
    if (s.contains("clip_norm")) c.schedule.clip_norm = s.at("clip_norm").get<double>();

    const auto& d = j.at("data");
    reject_unknown_keys(d, {"path", "val_fraction"}, "data");
    c.data.path = d.at("path").get<std::string>();
    if (d.contains("val_fraction")) c.data.val_fraction = d.at("val_fraction").get<double>();

    const auto& r = j.at("run");
    reject_unknown_keys(r,
                        {"steps", "max_tokens", "batch_sequences", "seq_len", "val_interval",
                         "val_batches", "checkpoint_interval", "seed", "out_dir"},
                        "run");
    if (r.contains("steps")) c.run.steps = r.at("steps").get<std::size_t>();
    if (r.contains("max_tokens")) c.run.max_tokens = r.at("max_tokens").get<std::uint64_t>();
    if (r.contains("batch_sequences"))
        c.run.batch_sequences = r.at("batch_sequences").get<std::size_t>();
    if (r.contains("seq_len")) c.run.seq_len = r.at("seq_len").get<std::size_t>();
    if (r.contains("val_interval")) c.run.val_interval = r.at("val_interval").get<std::size_t>();
    if (r.contains("val_batches")) c.run.val_batches = r.at("val_batches").get<std::size_t>();
    if (r.contains("checkpoint_interval"))
        c.run.checkpoint_interval = r.at("checkpoint_interval").get<std::size_t>();
    if (r.contains("seed")) c.run.seed = r.at("seed").get<std::uint64_t>();
    if (r.contains("out_dir")) c.run.out_dir = r.at("out_dir").get<std::string>();

    c.model.seed = derive_seed(c.run.seed, "model");
    c.validate();
    return c;
}

inline nlohmann::json experiment_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["name"] = c.name;
    nlohmann::json m;
    m["n_layers"] = c.model.n_layers;
    m["d_model"] = c.model.d_model;
    m["n_heads"] = c.model.n_heads;
    m["context"] = c.model.context;
    m["dropout"] = c.model.dropout;
    m["attn_dropout"] = c.model.attn_dropout;
    m["mlp_kind"] = mlp_kind_name(c.model.mlp_kind);
    if (c.model.mlp_kind == MlpKind::block) m["block_count"] = c.model.block_count;
    if (!c.model.doped_layout.empty()) {
        m["doped_layout"] = c.model.doped_layout;
        m["frozen_hidden_mult"] = c.model.frozen_hidden_mult;
    }
    m["vocab_size"] = c.model.vocab_size;
    j["model"] = m;
    nlohmann::json s;
    s["peak_lr"] = c.schedule.peak_lr;
    s["warmup_tokens"] = c.schedule.warmup_tokens;
    s["decay_tokens"] = c.schedule.decay_tokens;
    s["max_tokens"] = c.schedule.max_tokens;
    s["weight_decay"] = c.schedule.weight_decay;
    s["clip_norm"] = c.schedule.clip_norm;
    j["schedule"] = s;
    j["data"] = {{"path", c.data.path}, {"val_fraction", c.data.val_fraction}};
    nlohmann::json r;
    if (c.run.steps) r["steps"] = c.run.steps;
    if (c.run.max_tokens) r["max_tokens"] = c.run.max_tokens;
    r["batch_sequences"] = c.run.batch_sequences;
    if (c.run.seq_len) r["seq_len"] = c.run.seq_len;
    r["val_interval"] = c.run.val_interval;
    r["val_batches"] = c.run.val_batches;
    if (c.run.checkpoint_interval) r["checkpoint_interval"] = c.run.checkpoint_interval;
    r["seed"] = c.run.seed;
    r["out_dir"] = c.run.out_dir;
    j["run"] = r;
    return j;
}

inline ExperimentConfig load_experiment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config: JSON parse failure in '" + path + "': " + e.what());
    }
    return experiment_from_json(j);
}

// ---------------------------------------------------------------------------
// Full-size presets mirroring the standard model tables. The `scale` divisor
// shrinks width, context, batch and token budgets for desk-scale runs while
// preserving architectural ratios (frozen hidden stays 6x d_model, block
// count stays 4, layer counts keep their ladder).

inline std::vector<std::string> preset_names() {
    return {"xxsmall", "xsmall",       "small",      "medium",  "doped-xsmall",
            "doped-small", "doped-medium", "fastfood", "block"};
}

inline ExperimentConfig preset_experiment(const std::string& name, std::size_t scale = 1) {
    if (scale == 0) throw std::invalid_argument("preset: scale must be >= 1");
    ExperimentConfig c;
    c.name = name;
    ModelConfig& m = c.model;
    m.context = 1024;
    m.dropout = 0.1;
    m.attn_dropout = 0.1;
    m.vocab_size = 256;
    TrainSchedule& s = c.schedule;
    s.peak_lr = 5e-4;
    s.warmup_tokens = 409'600'000ull;
    s.decay_tokens = 32'800'000'000ull;
    s.max_tokens = 32'000'000'000ull;
    s.weight_decay = 0.0;
    s.clip_norm = 1.0;
    c.run.batch_sequences = 80;

    auto doped_layout = [](std::size_t trainable) {
        std::string layout;
        for (std::size_t i = 0; i + 1 < trainable; ++i) layout += "TF";
        layout += "T";
        return layout;
    };

    if (name == "xxsmall") {
        m.n_layers = 3; m.d_model = 768; m.n_heads = 12;
    } else if (name == "xsmall") {
        m.n_layers = 6; m.d_model = 768; m.n_heads = 12;
    } else if (name == "small") {
        m.n_layers = 12; m.d_model = 768; m.n_heads = 12;
    } else if (name == "medium") {
        m.n_layers = 24; m.d_model = 1024; m.n_heads = 16;
        s.peak_lr = 3e-4;
        s.decay_tokens = 40'900'000'000ull;
    } else if (name == "doped-xsmall") {
        m.n_layers = 5; m.d_model = 768; m.n_heads = 12;
        m.doped_layout = doped_layout(3);
    } else if (name == "doped-small") {
        m.n_layers = 11; m.d_model = 768; m.n_heads = 12;
        m.doped_layout = doped_layout(6);
    } else if (name == "doped-medium") {
        m.n_layers = 23; m.d_model = 1024; m.n_heads = 16;
        m.doped_layout = doped_layout(12);
        s.peak_lr = 3e-4;
        s.decay_tokens = 40'900'000'000ull;
    } else if (name == "fastfood") {
        m.n_layers = 12; m.d_model = 1024; m.n_heads = 16;
        m.mlp_kind = MlpKind::fastfood;
    } else if (name == "block") {
        m.n_layers = 12; m.d_model = 1024; m.n_heads = 16;
        m.mlp_kind = MlpKind::block;
        m.block_count = 4;
        s.decay_tokens = 40'900'000'000ull;
    } else {
        throw std::invalid_argument("preset: unknown name '" + name + "'");
    }

    if (scale > 1) {
        if (m.d_model % scale != 0)
            throw std::invalid_argument("preset: scale must divide d_model");
        m.d_model /= scale;
        while (m.n_heads > 1 && (m.d_model % m.n_heads != 0 || (m.d_model / m.n_heads) % 2 != 0))
            m.n_heads /= 2;
        m.context = std::max<std::size_t>(64, m.context / scale);
        c.run.batch_sequences = std::max<std::size_t>(4, c.run.batch_sequences / scale);
        const std::uint64_t sq = static_cast<std::uint64_t>(scale) * scale;
        s.warmup_tokens = std::max<std::uint64_t>(1, s.warmup_tokens / (sq * scale));
        s.decay_tokens = std::max<std::uint64_t>(s.warmup_tokens + 1, s.decay_tokens / (sq * scale));
        s.max_tokens = std::max<std::uint64_t>(1, s.max_tokens / (sq * scale));
    }
    c.run.max_tokens = s.max_tokens;
    c.data.path = "data/corpus.bin";
    return c;
}

// Searches the dense (layers, width) grid for the model whose trainable
// non-embedding count is closest to `target`.
inline ModelConfig dense_config_matching(std::size_t target, std::size_t context,
                                         std::size_t vocab) {
    ModelConfig best;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t layers = 1; layers <= 24; ++layers) {
        for (std::size_t d = 32; d <= 1024; d += 16) {
            ModelConfig cand;
            cand.n_layers = layers;
            cand.d_model = d;
            cand.n_heads = 4;
            while (cand.n_heads > 1 && (d % cand.n_heads != 0 || (d / cand.n_heads) % 2 != 0))
                cand.n_heads /= 2;
            if (d % cand.n_heads != 0 || (d / cand.n_heads) % 2 != 0) continue;
            cand.context = context;
            cand.vocab_size = vocab;
            std::size_t n = census_from_config(cand).trainable_nonembed;
            double err = std::fabs(std::log(static_cast<double>(n) / static_cast<double>(target)));
            if (err < best_err) {
                best_err = err;
                best = cand;
            }
        }
    }
    return best;
}

struct RecipeFile {
    std::string filename;
    ExperimentConfig config;
};

inline std::vector<std::string> recipe_names() { return {"fig1", "fig2-3", "fig6", "fig7"}; }

// Desk-scale experiment sets mirroring the headline comparisons: a dense
// size ladder, doped models next to their trainable skeletons, and
// structured models next to trainable- and emulated-parameter-matched
// dense baselines.
inline std::vector<RecipeFile> make_recipe(const std::string& name, std::size_t scale,
                                           const std::string& data_path, std::uint64_t seed) {
    if (scale == 0) throw std::invalid_argument("recipe: scale must be >= 1");
    std::vector<RecipeFile> files;
    auto finish = [&](ExperimentConfig c, const std::string& tag) {
        c.name = tag;
        c.data.path = data_path;
        c.run.seed = seed;
        c.run.out_dir = "runs/" + tag;
        c.model.seed = derive_seed(seed, "model");
        files.push_back({tag + ".json", std::move(c)});
    };

    if (name == "fig1") {
        for (const char* p : {"xxsmall", "xsmall", "small"})
            finish(preset_experiment(p, scale), std::string("fig1_") + p);
    } else if (name == "fig2-3") {
        for (const char* p : {"doped-xsmall", "doped-small"}) {
            ExperimentConfig doped = preset_experiment(p, scale);
            finish(doped, std::string("fig23_") + p);
            // trainable skeleton: the same model with the frozen layers removed
            ExperimentConfig skel = doped;
            std::size_t trainable = 0;
            for (char ch : doped.model.doped_layout)
                if (ch == 'T') ++trainable;
            skel.model.doped_layout.clear();
            skel.model.n_layers = trainable;
            finish(skel, std::string("fig23_skeleton_") + p);
        }
    } else if (name == "fig6" || name == "fig7") {
        ExperimentConfig structured =
            preset_experiment(name == "fig6" ? "fastfood" : "block", scale);
        Census cen = census_from_config(structured.model);
        finish(structured, name + "_structured");
        const std::array<std::pair<std::size_t, const char*>, 2> targets{
            {{cen.trainable_nonembed, "_equal_trainable"}, {cen.emulated, "_equal_emulated"}}};
        for (const auto& [target, tag] : targets) {
            ExperimentConfig base = structured;
            ModelConfig dense = dense_config_matching(target, structured.model.context,
                                                      structured.model.vocab_size);
            dense.dropout = structured.model.dropout;
            dense.attn_dropout = structured.model.attn_dropout;
            base.model = dense;
            finish(base, name + tag);
        }
    } else {
        std::string known;
        for (const auto& r : recipe_names()) known += (known.empty() ? "" : ", ") + r;
        throw std::invalid_argument("recipe: unknown name '" + name + "' (available: " + known + ")");
    }
    return files;
}

}  // namespace slw
