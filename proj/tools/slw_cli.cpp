// Workbench CLI: train presets, report parameter censuses and compute
// budgets, fit loss-vs-compute power laws, and generate experiment recipes.

#include <glob.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "slw/accounting.hpp"
#include "slw/config.hpp"
#include "slw/data.hpp"
#include "slw/model.hpp"
#include "slw/scalefit.hpp"
#include "slw/trainer.hpp"

namespace fs = std::filesystem;

namespace {

void write_census_report(const slw::ExperimentConfig& cfg, std::ostream& out) {
    slw::Census c = slw::census_from_config(cfg.model);
    const std::uint64_t tokens_per_batch =
        static_cast<std::uint64_t>(cfg.run.batch_sequences) * cfg.seq_len();
    out << "name=" << cfg.name << "\n";
    out << "trainable_nonembed=" << c.trainable_nonembed << "\n";
    out << "frozen=" << c.frozen << "\n";
    out << "emulated=" << c.emulated << "\n";
    out << "embedding=" << c.embedding << "\n";
    slw::BudgetInputs bi;
    bi.n_trainable = c.trainable_nonembed;
    bi.n_frozen = c.frozen;
    bi.tokens_per_batch = tokens_per_batch;
    bi.steps = 1;
    bi.frozen_cost = slw::FrozenCost::real();
    slw::Budget real = slw::compute_budget(bi);
    bi.frozen_cost = slw::FrozenCost::ideal();
    slw::Budget ideal = slw::compute_budget(bi);
    out << "flop_per_step_real=" << real.flop << "\n";
    out << "flop_per_step_ideal=" << ideal.flop << "\n";
    out << "pf_days_per_step_real=" << real.pf_days << "\n";
    out << "pf_days_per_step_ideal=" << ideal.pf_days << "\n";
}

int cmd_train(const std::string& config_path, const std::string& resume_path) {
    slw::ExperimentConfig cfg = slw::load_experiment(config_path);
    if (!fs::exists(cfg.data.path))
        throw std::runtime_error("config: data path '" + cfg.data.path + "' does not exist");

    fs::create_directories(cfg.run.out_dir);
    {
        std::ofstream copy(fs::path(cfg.run.out_dir) / "config.json");
        copy << slw::experiment_to_json(cfg).dump(2) << "\n";
    }

    slw::ByteCorpus corpus = slw::load_corpus(cfg.data.path, cfg.data.val_fraction);
    slw::Model<float> model = slw::build_model<float>(cfg.model);
    {
        std::ofstream cen(fs::path(cfg.run.out_dir) / "census.txt");
        write_census_report(cfg, cen);
    }

    slw::TrainOptions opts;
    opts.batch_sequences = cfg.run.batch_sequences;
    opts.seq_len = cfg.seq_len();
    opts.steps = cfg.resolved_steps();
    opts.val_interval = cfg.run.val_interval;
    opts.val_batches = cfg.run.val_batches;
    opts.seed = cfg.run.seed;

    slw::TrainerState<float> state;
    if (!resume_path.empty()) {
        slw::load_checkpoint(model, state, resume_path);
        std::cout << "resumed from " << resume_path << " at step " << state.opt.step << "\n";
    }

    const fs::path csv_path = fs::path(cfg.run.out_dir) / "run.csv";
    const fs::path ckpt_path = fs::path(cfg.run.out_dir) / "checkpoint.bin";

    slw::RunLog log;
    if (cfg.run.checkpoint_interval > 0) {
        // run in segments so intermediate checkpoints land on disk
        if (!state.initialized) slw::init_trainer_state(model, state, opts.seed);
        while (!log.diverged && state.opt.step < opts.steps) {
            slw::TrainOptions seg = opts;
            seg.steps =
                std::min<std::size_t>(opts.steps, state.opt.step + cfg.run.checkpoint_interval);
            slw::RunLog part = slw::train(model, corpus, cfg.schedule, seg, state);
            log.rows.insert(log.rows.end(), part.rows.begin(), part.rows.end());
            log.diverged = part.diverged;
            log.divergence_msg = part.divergence_msg;
            slw::save_checkpoint(model, state,
                                 (fs::path(cfg.run.out_dir) /
                                  ("checkpoint_step" + std::to_string(state.opt.step) + ".bin"))
                                     .string());
        }
    } else {
        log = slw::train(model, corpus, cfg.schedule, opts, state);
    }
    slw::write_runlog_csv(log, csv_path.string());
    slw::save_checkpoint(model, state, ckpt_path.string());

    if (log.diverged) {
        std::cerr << "error: training diverged: " << log.divergence_msg << "\n";
        return 2;
    }
    if (!log.rows.empty()) {
        const slw::RunRow& last = log.rows.back();
        std::cout << "done: step " << last.step << " train_loss " << last.train_loss
                  << " val_loss " << last.val_loss << "\n";
    }
    std::cout << "wrote " << csv_path.string() << "\n";
    return 0;
}

int cmd_census(const std::string& config_path) {
    slw::ExperimentConfig cfg = slw::load_experiment(config_path);
    write_census_report(cfg, std::cout);
    return 0;
}

std::vector<std::string> expand_globs(const std::vector<std::string>& patterns) {
    std::vector<std::string> paths;
    for (const auto& pat : patterns) {
        if (pat.find_first_of("*?[") == std::string::npos) {
            paths.push_back(pat);
            continue;
        }
        glob_t g{};
        int rc = ::glob(pat.c_str(), 0, nullptr, &g);
        if (rc == 0)
            for (std::size_t i = 0; i < g.gl_pathc; ++i) paths.emplace_back(g.gl_pathv[i]);
        globfree(&g);
    }
    return paths;
}

// reads complete rows of the trainer CSV schema; ignores comment lines
std::vector<slw::CurvePoint> read_run_curve(const std::string& path, bool ideal_cost) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("fit: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line.rfind("step,", 0) != 0)
        throw std::runtime_error("fit: '" + path + "' is not a run log (bad header)");
    std::vector<slw::CurvePoint> pts;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 7)
            throw std::runtime_error("fit: '" + path + "' line " + std::to_string(lineno) +
                                     ": expected 7 fields");
        double compute = std::stod(fields[ideal_cost ? 3 : 2]);
        double loss = std::stod(fields[6]);
        if (!std::isfinite(loss)) loss = std::stod(fields[5]);  // pre-first-validation rows
        if (compute > 0 && std::isfinite(loss) && loss > 0) pts.push_back({compute, loss});
    }
    return pts;
}

int cmd_fit(const std::vector<std::string>& patterns, const std::string& cost, double floor_frac,
            const std::string& out_dir, bool per_run) {
    if (cost != "real" && cost != "ideal")
        throw std::invalid_argument("fit: --cost must be 'real' or 'ideal'");
    std::vector<std::string> files = expand_globs(patterns);
    if (files.empty()) throw std::runtime_error("fit: no run logs matched");
    fs::create_directories(out_dir);

    std::vector<std::vector<slw::CurvePoint>> runs;
    for (const auto& f : files) {
        std::vector<slw::CurvePoint> run = read_run_curve(f, cost == "ideal");
        run = slw::apply_compute_floor(run, floor_frac);
        if (run.empty()) throw std::runtime_error("fit: '" + f + "' has no usable points");
        std::string stem = fs::path(f).parent_path().filename().string();
        if (stem.empty()) stem = fs::path(f).stem().string();
        std::ofstream curve(fs::path(out_dir) / (stem + "_curve.csv"));
        curve << "compute,loss\n";
        for (const auto& p : run) curve << p.compute << "," << p.loss << "\n";
        runs.push_back(std::move(run));
    }

    std::vector<slw::CurvePoint> env = slw::lower_envelope(runs);
    {
        std::ofstream ef(fs::path(out_dir) / "envelope.csv");
        ef << "compute,loss\n";
        for (const auto& p : env) ef << p.compute << "," << p.loss << "\n";
    }

    std::ostringstream report;
    report << "cost=" << cost << "\n";
    report << "floor=" << floor_frac << "\n";
    report << "runs=" << runs.size() << "\n";
    report << "envelope_points=" << env.size() << "\n";
    slw::PowerLawFit fit = slw::fit_power_law(env);
    report << "alpha=" << fit.alpha << "\n";
    report << "c_scale=" << fit.c_scale << "\n";
    report << "rmse_log=" << fit.rmse_log << "\n";
    if (per_run) {
        for (std::size_t i = 0; i < runs.size(); ++i) {
            try {
                slw::PowerLawFit rf = slw::fit_power_law(runs[i]);
                report << "run" << i << "_alpha=" << rf.alpha << "\n";
            } catch (const std::exception& e) {
                report << "run" << i << "_alpha=unfit (" << e.what() << ")\n";
            }
        }
    }
    std::ofstream rf(fs::path(out_dir) / "fit_report.txt");
    rf << report.str();
    std::cout << report.str();
    return 0;
}

int cmd_recipe(const std::string& name, std::size_t scale, const std::string& out_dir,
               const std::string& data_path, std::uint64_t seed) {
    std::vector<slw::RecipeFile> files = slw::make_recipe(name, scale, data_path, seed);
    fs::create_directories(out_dir);
    for (const auto& f : files) {
        fs::path p = fs::path(out_dir) / f.filename;
        std::ofstream out(p);
        out << slw::experiment_to_json(f.config).dump(2) << "\n";
        std::cout << "wrote " << p.string() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"scaling-law workbench: dense, doped, and structured LM experiments"};
    app.require_subcommand(1);

    std::string config_path, resume_path;
    auto* train = app.add_subcommand("train", "run a training experiment from a JSON config");
    train->add_option("--config", config_path, "experiment config path")->required();
    train->add_option("--resume", resume_path, "checkpoint to resume from");

    std::string census_config;
    auto* census = app.add_subcommand("census", "print parameter census and per-step budget");
    census->add_option("--config", census_config, "experiment config path")->required();

    std::vector<std::string> fit_globs;
    std::string fit_cost = "real", fit_out = ".";
    double fit_floor = 0.05;
    bool fit_per_run = false;
    auto* fit = app.add_subcommand("fit", "fit a power law to run logs");
    fit->add_option("logs", fit_globs, "run.csv files or globs")->required();
    fit->add_option("--cost", fit_cost, "flop column: real (frozen at 2/3) or ideal (frozen free)");
    fit->add_option("--floor", fit_floor, "drop points below this fraction of each run's compute");
    fit->add_option("--out", fit_out, "output directory for report and curves");
    fit->add_flag("--per-run", fit_per_run, "also fit each run individually");

    std::string recipe_name, recipe_out = "recipes", recipe_data = "data/corpus.bin";
    std::size_t recipe_scale = 1;
    std::uint64_t recipe_seed = 0;
    auto* recipe = app.add_subcommand("recipe", "emit experiment config sets");
    recipe->add_option("name", recipe_name, "one of: fig1, fig2-3, fig6, fig7")->required();
    recipe->add_option("--scale", recipe_scale, "desk-scale divisor for width/context/budget");
    recipe->add_option("--out", recipe_out, "output directory");
    recipe->add_option("--data", recipe_data, "corpus path to reference in the configs");
    recipe->add_option("--seed", recipe_seed, "run seed");

    try {
        app.parse(argc, argv);
        if (*train) return cmd_train(config_path, resume_path);
        if (*census) return cmd_census(census_config);
        if (*fit) return cmd_fit(fit_globs, fit_cost, fit_floor, fit_out, fit_per_run);
        if (*recipe) return cmd_recipe(recipe_name, recipe_scale, recipe_out, recipe_data, recipe_seed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
