#include "pbfm/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

// Subcommands: gen-data, train, sample, eval, ablate. Flags mirror config
// keys and override file values. Exit codes: 0 success, 2 config error,
// 3 numeric failure, 4 I/O error.

namespace {

struct Flags {
    std::string config;
    std::string case_name;
    std::string out;
    std::int64_t seed = -1;
    std::int64_t n = -1;
    std::int64_t iters = -1;
    std::int64_t batch = -1;
    int grid = -1;
    int steps = -1;
    int unroll = -1;
    double lr = -1;
    double tstar = -1;
    double beta = -1;
    double power = -1;
    double sigma_min = -1;
    std::string sampler_mode;
    std::string mode;
    std::string time_dist;
    std::string data_path;
    std::string ckpt;
    std::string ref;
    std::string gen;
    std::string resume;
    std::string axis;
    std::vector<std::string> values;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "config file (JSON)");
    cmd->add_option("--case", f.case_name, "circle|darcy|divfree|algebraic");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--seed", f.seed, "RNG seed");
}

pbfm::experiment::ExperimentConfig build_config(const Flags& f) {
    using namespace pbfm;
    auto cfg = experiment::load_config(f.config, f.case_name);
    if (!f.out.empty()) cfg.out = f.out;
    if (f.seed >= 0) cfg.seed = static_cast<std::uint64_t>(f.seed);
    if (f.n >= 0) {
        cfg.data.n = f.n;
        cfg.sample.n = f.n;
    }
    if (f.grid > 0) cfg.data.grid = f.grid;
    if (f.iters > 0) cfg.train.iterations = f.iters;
    if (f.batch > 0) cfg.train.batch = f.batch;
    if (f.lr > 0) cfg.train.lr = f.lr;
    if (f.unroll > 0) cfg.train.n_max = f.unroll;
    if (f.power >= 0) cfg.train.residual_power = f.power;
    if (f.sigma_min >= 0) cfg.train.sigma_min = f.sigma_min;
    if (!f.time_dist.empty()) cfg.train.time_dist = flow::time_dist_from(f.time_dist);
    if (!f.mode.empty()) cfg.train.mode = train::update_mode_from(f.mode);
    if (f.beta >= 0) {
        cfg.train.mode = train::UpdateMode::Weighted;
        cfg.train.w_fm = 1.0;
        cfg.train.w_r = f.beta;
    }
    if (f.steps > 0) cfg.sample.steps = f.steps;
    if (f.tstar >= 0) cfg.sample.t_star = f.tstar;
    if (!f.sampler_mode.empty()) {
        if (f.sampler_mode != "det" && f.sampler_mode != "stoch")
            throw experiment::ConfigError("--sampler expects det|stoch");
        cfg.sample.stochastic = f.sampler_mode == "stoch";
    }
    if (!f.data_path.empty()) cfg.data.path = f.data_path;
    if (!f.ckpt.empty()) cfg.sample.checkpoint = f.ckpt;
    if (!f.ref.empty()) {
        cfg.sample.ref = f.ref;
        cfg.eval_reference = f.ref;
    }
    if (!f.gen.empty()) cfg.eval_generated = f.gen;
    if (!f.resume.empty()) cfg.resume = f.resume;
    if (!f.axis.empty()) cfg.ablate_axis = f.axis;
    if (!f.values.empty()) cfg.ablate_values = f.values;
    experiment::finalize(cfg);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"physics-based flow matching experiments"};
    app.require_subcommand(1);
    Flags f;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    add_common(gen, f);
    gen->add_option("--n", f.n, "sample count");
    gen->add_option("--grid", f.grid, "grid size for field cases");
    gen->add_option("--data", f.data_path, "output dataset path");

    auto* tr = app.add_subcommand("train", "train a model");
    add_common(tr, f);
    tr->add_option("--data", f.data_path, "training dataset");
    tr->add_option("--iters", f.iters, "training iterations");
    tr->add_option("--batch", f.batch, "batch size");
    tr->add_option("--lr", f.lr, "learning rate");
    tr->add_option("--unroll", f.unroll, "max unroll steps");
    tr->add_option("--mode", f.mode, "config|weighted|fm-only");
    tr->add_option("--beta", f.beta, "residual weight (selects weighted mode)");
    tr->add_option("--power", f.power, "residual time-weight exponent p");
    tr->add_option("--sigma-min", f.sigma_min, "interpolant noise floor");
    tr->add_option("--time-dist", f.time_dist, "uniform|logitnormal");
    tr->add_option("--resume", f.resume, "checkpoint to continue from");

    auto* sa = app.add_subcommand("sample", "generate samples from a checkpoint");
    add_common(sa, f);
    sa->add_option("--ckpt", f.ckpt, "checkpoint file");
    sa->add_option("--n", f.n, "number of samples");
    sa->add_option("--steps", f.steps, "FM integration steps");
    sa->add_option("--sampler", f.sampler_mode, "det|stoch");
    sa->add_option("--tstar", f.tstar, "stochastic threshold t*");
    sa->add_option("--ref", f.ref, "reference dataset for conditioning");
    sa->add_option("--file", f.data_path, "output samples path");

    auto* ev = app.add_subcommand("eval", "evaluate generated samples");
    add_common(ev, f);
    ev->add_option("--gen", f.gen, "generated dataset")->required();
    ev->add_option("--ref", f.ref, "reference dataset")->required();

    auto* ab = app.add_subcommand("ablate", "sweep one ablation axis");
    add_common(ab, f);
    ab->add_option("--axis", f.axis, "unroll|sigma-min|time-dist|mode|power|sampler|steps");
    ab->add_option("--values", f.values, "axis values");
    ab->add_option("--data", f.data_path, "training dataset");
    ab->add_option("--ref", f.ref, "held-out reference dataset");
    ab->add_option("--iters", f.iters, "training iterations");
    ab->add_option("--batch", f.batch, "batch size");
    ab->add_option("--unroll", f.unroll, "max unroll steps");
    ab->add_option("--steps", f.steps, "FM integration steps");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        using namespace pbfm;
        if (gen->parsed()) {
            auto cfg = build_config(f);
            if (!f.data_path.empty()) cfg.data.path = f.data_path;
            auto path = experiment::cmd_gen_data(cfg);
            std::cout << "wrote " << path << std::endl;
        } else if (tr->parsed()) {
            auto cfg = build_config(f);
            auto path = experiment::cmd_train(cfg);
            std::cout << "wrote " << path << std::endl;
        } else if (sa->parsed()) {
            auto cfg = build_config(f);
            if (!f.data_path.empty()) cfg.sample.file = f.data_path;
            auto path = experiment::cmd_sample(cfg);
            std::cout << "wrote " << path << std::endl;
        } else if (ev->parsed()) {
            auto cfg = build_config(f);
            auto rep = experiment::cmd_eval(cfg);
            std::cout << rep.to_json().dump(2) << std::endl;
        } else if (ab->parsed()) {
            auto cfg = build_config(f);
            auto rows = experiment::cmd_ablate(cfg);
            std::cout << "axis " << cfg.ablate_axis << ":" << std::endl;
            for (const auto& row : rows)
                std::cout << "  " << row.value << "  residual_mae " << row.report.residual.mae
                          << "  w1 " << row.report.w1_avg << std::endl;
        }
    } catch (const pbfm::experiment::ConfigError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 2;
    } catch (const pbfm::train::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << std::endl;
        return 3;
    } catch (const pbfm::data::CgFailure& e) {
        std::cerr << "numeric failure: " << e.what() << std::endl;
        return 3;
    } catch (const pbfm::io::IoError& e) {
        std::cerr << "i/o error: " << e.what() << std::endl;
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
