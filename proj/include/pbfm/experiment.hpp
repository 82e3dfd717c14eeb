#pragma once

#include "pbfm/data.hpp"
#include "pbfm/io.hpp"
#include "pbfm/metrics.hpp"
#include "pbfm/models.hpp"
#include "pbfm/residuals.hpp"
#include "pbfm/sampler.hpp"
#include "pbfm/trainer.hpp"

#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

// Experiment front end: a JSON config drives data generation, training,
// sampling, evaluation, and the ablation sweeps; every CLI flag mirrors a
// config key and overrides the file value. All command outputs land under
// the configured output directory.

namespace pbfm::experiment {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Case { Circle, Darcy, Divfree, Algebraic };

inline Case case_from(const std::string& s) {
    if (s == "circle") return Case::Circle;
    if (s == "darcy") return Case::Darcy;
    if (s == "divfree") return Case::Divfree;
    if (s == "algebraic") return Case::Algebraic;
    throw ConfigError("unknown case: " + s + " (expected circle|darcy|divfree|algebraic)");
}

inline const char* to_string(Case c) {
    switch (c) {
        case Case::Circle: return "circle";
        case Case::Darcy: return "darcy";
        case Case::Divfree: return "divfree";
        case Case::Algebraic: return "algebraic";
    }
    return "?";
}

struct DataConfig {
    std::int64_t n = 4096;
    int grid = 32;
    double cg_tol = 1e-8;
    data::GrfSpec grf;
    int n_conditions = 8;
    std::string path;  // dataset file; default <out>/train.pbfm
};

struct SampleConfig {
    std::int64_t n = 1024;
    int steps = 20;
    bool stochastic = false;
    double t_star = 0.2;
    std::string checkpoint;  // default <out>/checkpoint.pbfm
    std::string file;        // default <out>/samples.pbfm
    std::string ref;         // conditioning source for conditioned cases
};

struct ExperimentConfig {
    Case kase = Case::Circle;
    std::string out = "runs/exp";
    std::uint64_t seed = 0;
    DataConfig data;
    models::NetConfig net;
    train::TrainConfig train;
    SampleConfig sample;
    std::string resume;          // checkpoint to continue from
    std::string eval_generated;  // cmd_eval inputs
    std::string eval_reference;
    std::string ablate_axis;
    std::vector<std::string> ablate_values;
};

// baseline defaults per case; file and flags overlay on top
inline ExperimentConfig case_defaults(Case c) {
    ExperimentConfig cfg;
    cfg.kase = c;
    switch (c) {
        case Case::Circle:
            cfg.data.n = 4096;
            cfg.net.variant = models::NetVariant::Mlp;
            cfg.net.field_channels = 2;
            cfg.net.hidden = 64;
            cfg.net.depth = 3;
            cfg.net.time_dim = 32;
            cfg.train.iterations = 20000;
            cfg.train.batch = 64;
            cfg.train.lr = 1e-3;
            cfg.train.n_max = 4;
            cfg.sample.n = 4096;
            break;
        case Case::Darcy:
            cfg.data.n = 512;
            cfg.data.grid = 32;
            cfg.net.variant = models::NetVariant::Conv;
            cfg.net.field_channels = 2;
            cfg.net.hidden = 16;
            cfg.net.depth = 3;
            cfg.net.emb_dim = 48;
            cfg.net.pad = ad::PadMode::Replicate;
            cfg.train.iterations = 3000;
            cfg.train.batch = 8;
            cfg.train.lr = 3e-4;
            cfg.train.n_max = 4;
            cfg.sample.n = 256;
            break;
        case Case::Divfree:
            cfg.data.n = 512;
            cfg.data.grid = 32;
            cfg.data.n_conditions = 8;
            cfg.net.variant = models::NetVariant::Conv;
            cfg.net.field_channels = 2;
            cfg.net.cond_dim = 1;
            cfg.net.hidden = 16;
            cfg.net.depth = 3;
            cfg.net.emb_dim = 48;
            cfg.net.pad = ad::PadMode::Periodic;
            cfg.train.iterations = 3000;
            cfg.train.batch = 8;
            cfg.train.lr = 3e-4;
            cfg.train.n_max = 4;
            cfg.sample.n = 256;
            break;
        case Case::Algebraic:
            cfg.data.n = 512;
            cfg.data.grid = 16;
            cfg.data.n_conditions = 8;
            cfg.net.variant = models::NetVariant::Conv;
            cfg.net.field_channels = 6;
            cfg.net.cond_dim = 4;
            cfg.net.hidden = 12;
            cfg.net.depth = 3;
            cfg.net.emb_dim = 48;
            cfg.net.pad = ad::PadMode::Replicate;
            cfg.train.iterations = 2000;
            cfg.train.batch = 8;
            cfg.train.lr = 3e-4;
            cfg.train.n_max = 4;
            cfg.sample.n = 256;
            break;
    }
    return cfg;
}

inline residuals::Operator residual_op(Case c, int grid) {
    switch (c) {
        case Case::Circle: return residuals::Operator::circle();
        case Case::Darcy: return residuals::Operator::darcy(grid);
        case Case::Divfree: return residuals::Operator::divergence(grid, 1.0);
        case Case::Algebraic: return residuals::Operator::stall(grid);
    }
    throw ConfigError("bad case");
}

// ---------------------------------------------------------------------------
// JSON round trip

inline nlohmann::ordered_json to_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["case"] = to_string(cfg.kase);
    j["out"] = cfg.out;
    j["seed"] = cfg.seed;
    j["data"] = {{"n", cfg.data.n},
                 {"grid", cfg.data.grid},
                 {"cg_tol", cfg.data.cg_tol},
                 {"grf", {{"corr_len", cfg.data.grf.corr_len}, {"variance", cfg.data.grf.variance}}},
                 {"n_conditions", cfg.data.n_conditions},
                 {"path", cfg.data.path}};
    j["net"] = {{"variant", cfg.net.variant == models::NetVariant::Mlp ? "mlp" : "conv"},
                {"hidden", cfg.net.hidden},
                {"depth", cfg.net.depth},
                {"time_dim", cfg.net.time_dim},
                {"emb_dim", cfg.net.emb_dim}};
    j["train"] = {{"iterations", cfg.train.iterations},
                  {"batch", cfg.train.batch},
                  {"lr", cfg.train.lr},
                  {"beta1", cfg.train.beta1},
                  {"beta2", cfg.train.beta2},
                  {"weight_decay", cfg.train.weight_decay},
                  {"unroll", cfg.train.n_max},
                  {"power", cfg.train.residual_power},
                  {"sigma_min", cfg.train.sigma_min},
                  {"time_dist", flow::to_string(cfg.train.time_dist)},
                  {"mode", train::to_string(cfg.train.mode)},
                  {"w_fm", cfg.train.w_fm},
                  {"w_r", cfg.train.w_r},
                  {"ema_decay", cfg.train.ema_decay},
                  {"log_every", cfg.train.log_every},
                  {"checkpoint_every", cfg.train.checkpoint_every}};
    j["sample"] = {{"n", cfg.sample.n},
                   {"steps", cfg.sample.steps},
                   {"mode", cfg.sample.stochastic ? "stoch" : "det"},
                   {"tstar", cfg.sample.t_star},
                   {"checkpoint", cfg.sample.checkpoint},
                   {"file", cfg.sample.file},
                   {"ref", cfg.sample.ref}};
    j["eval"] = {{"generated", cfg.eval_generated}, {"reference", cfg.eval_reference}};
    j["ablate"] = {{"axis", cfg.ablate_axis}, {"values", cfg.ablate_values}};
    return j;
}

inline void overlay_json(ExperimentConfig& cfg, const nlohmann::ordered_json& j) {
    using nlohmann::ordered_json;
    cfg.out = j.value("out", cfg.out);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        cfg.data.n = d.value("n", cfg.data.n);
        cfg.data.grid = d.value("grid", cfg.data.grid);
        cfg.data.cg_tol = d.value("cg_tol", cfg.data.cg_tol);
        if (d.contains("grf")) {
            cfg.data.grf.corr_len = d.at("grf").value("corr_len", cfg.data.grf.corr_len);
            cfg.data.grf.variance = d.at("grf").value("variance", cfg.data.grf.variance);
        }
        cfg.data.n_conditions = d.value("n_conditions", cfg.data.n_conditions);
        cfg.data.path = d.value("path", cfg.data.path);
    }
    if (j.contains("net")) {
        const auto& n = j.at("net");
        if (n.contains("variant"))
            cfg.net.variant = n.at("variant").get<std::string>() == "mlp"
                                  ? models::NetVariant::Mlp
                                  : models::NetVariant::Conv;
        cfg.net.hidden = n.value("hidden", cfg.net.hidden);
        cfg.net.depth = n.value("depth", cfg.net.depth);
        cfg.net.time_dim = n.value("time_dim", cfg.net.time_dim);
        cfg.net.emb_dim = n.value("emb_dim", cfg.net.emb_dim);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfg.train.iterations = t.value("iterations", cfg.train.iterations);
        cfg.train.batch = t.value("batch", cfg.train.batch);
        cfg.train.lr = t.value("lr", cfg.train.lr);
        cfg.train.beta1 = t.value("beta1", cfg.train.beta1);
        cfg.train.beta2 = t.value("beta2", cfg.train.beta2);
        cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
        cfg.train.n_max = t.value("unroll", cfg.train.n_max);
        cfg.train.residual_power = t.value("power", cfg.train.residual_power);
        cfg.train.sigma_min = t.value("sigma_min", cfg.train.sigma_min);
        if (t.contains("time_dist"))
            cfg.train.time_dist = flow::time_dist_from(t.at("time_dist").get<std::string>());
        if (t.contains("mode"))
            cfg.train.mode = train::update_mode_from(t.at("mode").get<std::string>());
        cfg.train.w_fm = t.value("w_fm", cfg.train.w_fm);
        cfg.train.w_r = t.value("w_r", cfg.train.w_r);
        cfg.train.ema_decay = t.value("ema_decay", cfg.train.ema_decay);
        cfg.train.log_every = t.value("log_every", cfg.train.log_every);
        cfg.train.checkpoint_every = t.value("checkpoint_every", cfg.train.checkpoint_every);
    }
    if (j.contains("sample")) {
        const auto& s = j.at("sample");
        cfg.sample.n = s.value("n", cfg.sample.n);
        cfg.sample.steps = s.value("steps", cfg.sample.steps);
        if (s.contains("mode")) cfg.sample.stochastic = s.at("mode").get<std::string>() == "stoch";
        cfg.sample.t_star = s.value("tstar", cfg.sample.t_star);
        cfg.sample.checkpoint = s.value("checkpoint", cfg.sample.checkpoint);
        cfg.sample.file = s.value("file", cfg.sample.file);
        cfg.sample.ref = s.value("ref", cfg.sample.ref);
    }
    if (j.contains("eval")) {
        cfg.eval_generated = j.at("eval").value("generated", cfg.eval_generated);
        cfg.eval_reference = j.at("eval").value("reference", cfg.eval_reference);
    }
    if (j.contains("ablate")) {
        cfg.ablate_axis = j.at("ablate").value("axis", cfg.ablate_axis);
        if (j.at("ablate").contains("values"))
            cfg.ablate_values = j.at("ablate").at("values").get<std::vector<std::string>>();
    }
}

// loads a config file when given; `kase` from the file's "case" key unless
// already fixed by a flag
inline ExperimentConfig load_config(const std::string& path, const std::string& case_flag) {
    nlohmann::ordered_json j;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw io::IoError("cannot open config: " + path);
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config parse error in " + path + ": " + e.what());
        }
    }
    std::string case_name = !case_flag.empty() ? case_flag : j.value("case", "circle");
    auto cfg = case_defaults(case_from(case_name));
    if (!j.is_null()) overlay_json(cfg, j);
    return cfg;
}

// grid-dependent fields that must stay coherent after overlays
inline void finalize(ExperimentConfig& cfg) {
    if (cfg.net.variant == models::NetVariant::Conv) {
        cfg.net.grid_h = cfg.net.grid_w = cfg.data.grid;
    }
    if (cfg.data.path.empty()) cfg.data.path = cfg.out + "/train.pbfm";
    if (cfg.sample.checkpoint.empty()) cfg.sample.checkpoint = cfg.out + "/checkpoint.pbfm";
    if (cfg.sample.file.empty()) cfg.sample.file = cfg.out + "/samples.pbfm";
    if (cfg.sample.ref.empty()) cfg.sample.ref = cfg.data.path;
    if (cfg.train.iterations < 1 || cfg.train.batch < 1)
        throw ConfigError("train.iterations and train.batch must be positive");
    if (cfg.train.n_max < 1 || cfg.train.n_max > 64)
        throw ConfigError("train.unroll out of range [1,64]");
    if (cfg.train.residual_power < 0) throw ConfigError("train.power must be >= 0");
    if (cfg.train.sigma_min < 0 || cfg.train.sigma_min >= 1)
        throw ConfigError("train.sigma_min must be in [0,1)");
}

// ---------------------------------------------------------------------------
// commands

inline void ensure_dir(const std::string& dir) {
    if (dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io::IoError("cannot create output directory " + dir + ": " + ec.message());
}

inline data::GridDataset generate(const ExperimentConfig& cfg) {
    switch (cfg.kase) {
        case Case::Circle: return data::gen_circle(cfg.data.n, cfg.seed);
        case Case::Darcy:
            return data::gen_darcy(cfg.data.n, cfg.data.grid, cfg.data.grf, cfg.data.cg_tol,
                                   cfg.seed);
        case Case::Divfree:
            return data::gen_divfree(cfg.data.n, cfg.data.grid, cfg.data.n_conditions, cfg.seed);
        case Case::Algebraic:
            return data::gen_algebraic(cfg.data.n, cfg.data.grid, cfg.data.n_conditions, cfg.seed);
    }
    throw ConfigError("bad case");
}

// post-generation verification: generated data must satisfy its governing
// residual within the construction tolerance
inline void verify_generated(const ExperimentConfig& cfg, const data::GridDataset& ds) {
    auto op = residual_op(cfg.kase, cfg.data.grid);
    auto r = op.evaluate(ds.samples, ds.count);
    double rmax = 0;
    for (double v : r) rmax = std::max(rmax, std::abs(v));
    double bound = 0;
    switch (cfg.kase) {
        case Case::Circle: bound = 1e-12; break;
        case Case::Darcy: {
            auto f = residuals::darcy_forcing(cfg.data.grid);
            double fmax = 0;
            for (double v : f) fmax = std::max(fmax, std::abs(v));
            bound = 10.0 * cfg.data.cg_tol * fmax;
            break;
        }
        case Case::Divfree: bound = 1e-10; break;
        case Case::Algebraic: {
            double scale = 0;
            for (double v : ds.samples) scale = std::max(scale, std::abs(v));
            bound = 1e-10 * scale;
            break;
        }
    }
    if (rmax > bound)
        throw train::NumericError("generated data violates its residual bound: max |R| = " +
                                  std::to_string(rmax) + " > " + std::to_string(bound));
}

inline std::string cmd_gen_data(const ExperimentConfig& cfg) {
    ensure_dir(std::filesystem::path(cfg.data.path).parent_path().string());
    auto ds = generate(cfg);
    verify_generated(cfg, ds);
    io::write_dataset(cfg.data.path, ds);
    return cfg.data.path;
}

namespace detail {

inline nlohmann::ordered_json snapshot_config(const ExperimentConfig& cfg,
                                              const data::GridDataset& nds) {
    auto j = to_json(cfg);
    j["normalization"] = {{"channels", nds.channels}, {"grid_h", nds.h},
                          {"grid_w", nds.w},          {"cond_dim", nds.cond_dim},
                          {"mean", nds.chan_mean},    {"std", nds.chan_std},
                          {"cond_mean", nds.cond_mean}, {"cond_std", nds.cond_std}};
    return j;
}

inline models::VelocityNet build_net(const ExperimentConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, 0x6e657477));  // independent init stream
    return models::VelocityNet::create(cfg.net, rng);
}

}  // namespace detail

// trains per config; returns the final checkpoint path
inline std::string cmd_train(const ExperimentConfig& cfg, bool quiet = false) {
    ensure_dir(cfg.out);
    auto raw = io::read_dataset(cfg.data.path);
    auto nds = raw.standardized ? raw : data::normalize(raw);

    ExperimentConfig eff = cfg;
    io::Checkpoint restored;
    bool resuming = false;
    if (!cfg.resume.empty()) {
        restored = io::read_checkpoint(cfg.resume);
        auto snap = case_defaults(case_from(restored.config.at("case").get<std::string>()));
        overlay_json(snap, restored.config);
        snap.out = cfg.out;  // resume keeps the snapshot config, new output dir
        snap.data.path = cfg.data.path;
        finalize(snap);
        eff = snap;
        resuming = true;
    }

    auto op = residual_op(eff.kase, eff.data.grid);
    train::Trainer trainer(eff.train, detail::build_net(eff), nds, op);
    if (resuming) trainer.restore(restored);

    const auto snapshot_json = detail::snapshot_config(eff, nds);
    std::ofstream log(cfg.out + "/train_log.csv",
                      resuming ? std::ios::app : std::ios::trunc);
    if (!log) throw io::IoError("cannot open training log in " + cfg.out);
    if (!resuming)
        log << "iteration,L_fm,L_r,grad_norm_fm,grad_norm_r,unroll_n,wall_ms\n";

    auto save = [&](const std::string& name) {
        auto ck = trainer.snapshot();
        ck.config = snapshot_json;
        io::write_checkpoint(cfg.out + "/" + name, ck);
    };
    trainer.run(
        [&](const train::StepMetrics& m) {
            log << m.iteration << ',' << m.l_fm << ',' << m.l_r << ',' << m.gnorm_fm << ','
                << m.gnorm_r << ',' << m.unroll_n << ',' << m.wall_ms << '\n';
            if (!quiet && (m.iteration % (eff.train.log_every * 10) == 0))
                std::cout << "[train " << to_string(eff.kase) << "] it " << m.iteration
                          << " L_fm " << m.l_fm << " L_r " << m.l_r << " n " << m.unroll_n
                          << std::endl;
        },
        [&](std::int64_t step) { save("checkpoint_" + std::to_string(step) + ".pbfm"); });
    save("checkpoint.pbfm");
    return cfg.out + "/checkpoint.pbfm";
}

// draws n samples from the checkpoint's EMA parameters and writes them as a
// physical-unit dataset
inline std::string cmd_sample(const ExperimentConfig& cfg) {
    ensure_dir(std::filesystem::path(cfg.sample.file).parent_path().string());
    auto ck = io::read_checkpoint(cfg.sample.checkpoint);
    if (ck.ema.empty())
        throw io::IoError(cfg.sample.checkpoint + ": checkpoint is missing EMA parameters");

    auto snap = case_defaults(case_from(ck.config.at("case").get<std::string>()));
    overlay_json(snap, ck.config);
    snap.data.grid = ck.config.at("normalization").at("grid_h").get<int>();
    finalize(snap);

    auto net = detail::build_net(snap);
    models::EmaState ema;
    ema.decay = snap.train.ema_decay;
    ema.shadow = ck.ema;

    const auto& norm = ck.config.at("normalization");
    const auto channels = norm.at("channels").get<std::vector<std::string>>();
    const auto mean = norm.at("mean").get<std::vector<double>>();
    const auto stdv = norm.at("std").get<std::vector<double>>();
    const auto cond_mean = norm.at("cond_mean").get<std::vector<double>>();
    const auto cond_std = norm.at("cond_std").get<std::vector<double>>();
    const auto cond_dim = norm.at("cond_dim").get<std::int64_t>();

    // conditioned cases sample per condition, cycling through the distinct
    // conditioning vectors of the reference set
    std::vector<double> cond_rows, cond_raw;
    if (cond_dim > 0) {
        auto ref = io::read_dataset(cfg.sample.ref);
        if (ref.cond_dim != cond_dim)
            throw ConfigError("reference dataset conditioning does not match checkpoint");
        std::vector<std::vector<double>> distinct;
        std::map<std::string, bool> seen;
        for (std::int64_t s = 0; s < ref.count; ++s) {
            std::string key(reinterpret_cast<const char*>(ref.condition(s)),
                            static_cast<std::size_t>(cond_dim) * sizeof(double));
            if (!seen[key]) {
                seen[key] = true;
                distinct.emplace_back(ref.condition(s), ref.condition(s) + cond_dim);
            }
        }
        cond_rows.resize(static_cast<std::size_t>(cfg.sample.n * cond_dim));
        cond_raw.resize(static_cast<std::size_t>(cfg.sample.n * cond_dim));
        for (std::int64_t i = 0; i < cfg.sample.n; ++i) {
            const auto& cv = distinct[static_cast<std::size_t>(i) % distinct.size()];
            for (std::int64_t d = 0; d < cond_dim; ++d) {
                cond_raw[i * cond_dim + d] = cv[d];
                cond_rows[i * cond_dim + d] = (cv[d] - cond_mean[d]) / cond_std[d];
            }
        }
    }

    sampler::SamplerConfig scfg;
    scfg.steps = cfg.sample.steps;
    scfg.stochastic = cfg.sample.stochastic;
    scfg.t_star = cfg.sample.t_star;
    scfg.seed = cfg.seed;
    auto std_samples = sampler::sample_with_ema(net, ema, cfg.sample.n, cond_rows, scfg);

    data::GridDataset out;
    out.channels = channels;
    out.count = cfg.sample.n;
    out.h = norm.at("grid_h").get<std::int64_t>();
    out.w = norm.at("grid_w").get<std::int64_t>();
    out.cond_dim = cond_dim;
    out.cond = cond_raw;
    out.samples.resize(std_samples.size());
    const std::int64_t hw = out.h * out.w, c = out.channel_count();
    for (std::int64_t s = 0; s < out.count; ++s)
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const double* src = std_samples.data() + (s * c + ci) * hw;
            double* dst = out.samples.data() + (s * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * stdv[ci] + mean[ci];
        }
    compute_stats(out);
    out.manifest = {{"generator", "sampler"},
                    {"checkpoint_step", ck.step},
                    {"steps", cfg.sample.steps},
                    {"mode", cfg.sample.stochastic ? "stoch" : "det"},
                    {"tstar", cfg.sample.t_star},
                    {"seed", cfg.seed}};
    io::write_dataset(cfg.sample.file, out);
    return cfg.sample.file;
}

// evaluation: residual statistics of the generated set plus distributional
// distances against the reference
inline metrics::EvalReport evaluate(Case kase, const data::GridDataset& gen,
                                    const data::GridDataset& ref) {
    if (gen.channels != ref.channels || gen.h != ref.h || gen.w != ref.w)
        throw ConfigError("eval: generated and reference datasets are incompatible");
    auto op = residual_op(kase, static_cast<int>(gen.h));
    auto r = op.evaluate(gen.samples, gen.count, /*strict=*/false);
    metrics::EvalReport rep;
    rep.sample_count = gen.count;
    rep.residual = metrics::residual_stats(r, gen.count);
    rep.channels = gen.channels;
    rep.w1 = metrics::per_pixel_w1(gen, ref);
    for (double v : rep.w1) rep.w1_avg += v;
    rep.w1_avg /= static_cast<double>(rep.w1.size());
    if (gen.cond_dim > 0 || kase == Case::Darcy || kase == Case::Circle)
        rep.cond_error = metrics::cond_mean_std_error(gen, ref);
    return rep;
}

inline void write_histograms(const std::string& out_dir, const data::GridDataset& gen,
                             const data::GridDataset& ref, int nbins = 64) {
    const std::int64_t hw = gen.h * gen.w, c = gen.channel_count();
    for (std::int64_t ci = 0; ci < c; ++ci) {
        std::vector<double> gv, rv;
        gv.reserve(static_cast<std::size_t>(gen.count * hw));
        rv.reserve(static_cast<std::size_t>(ref.count * hw));
        for (std::int64_t s = 0; s < gen.count; ++s)
            gv.insert(gv.end(), gen.sample(s) + ci * hw, gen.sample(s) + (ci + 1) * hw);
        for (std::int64_t s = 0; s < ref.count; ++s)
            rv.insert(rv.end(), ref.sample(s) + ci * hw, ref.sample(s) + (ci + 1) * hw);

        // shared edges over the union range
        std::vector<double> all = gv;
        all.insert(all.end(), rv.begin(), rv.end());
        auto h = metrics::histogram(all, nbins);
        auto count_into = [&](const std::vector<double>& v) {
            std::vector<std::int64_t> counts(nbins, 0);
            const double lo = h.edges.front(), hi = h.edges.back();
            for (double x : v) {
                int b = static_cast<int>((x - lo) / (hi - lo) * nbins);
                counts[std::clamp(b, 0, nbins - 1)]++;
            }
            return counts;
        };
        auto gc = count_into(gv), rc = count_into(rv);
        std::ofstream os(out_dir + "/hist_" + gen.channels[ci] + ".csv");
        if (!os) throw io::IoError("cannot write histogram CSV in " + out_dir);
        os << "bin_lo,bin_hi,count_gen,log_density_gen,count_ref,log_density_ref\n";
        for (int b = 0; b < nbins; ++b) {
            const double width = h.edges[b + 1] - h.edges[b];
            const double dg = gc[b] / (width * gv.size());
            const double dr = rc[b] / (width * rv.size());
            os << h.edges[b] << ',' << h.edges[b + 1] << ',' << gc[b] << ','
               << (dg > 0 ? std::log10(dg) : -std::numeric_limits<double>::infinity()) << ','
               << rc[b] << ','
               << (dr > 0 ? std::log10(dr) : -std::numeric_limits<double>::infinity()) << '\n';
        }
    }
}

inline metrics::EvalReport cmd_eval(const ExperimentConfig& cfg) {
    ensure_dir(cfg.out);
    auto gen = io::read_dataset(cfg.eval_generated);
    auto ref = io::read_dataset(cfg.eval_reference);
    auto rep = evaluate(cfg.kase, gen, ref);
    std::ofstream os(cfg.out + "/eval.json");
    if (!os) throw io::IoError("cannot write eval report in " + cfg.out);
    os << rep.to_json().dump(2) << '\n';
    write_histograms(cfg.out, gen, ref);
    return rep;
}

// ---------------------------------------------------------------------------
// ablation sweeps

struct AblationRow {
    std::string value;
    metrics::EvalReport report;
};

inline int worker_threads() {
    if (const char* env = std::getenv("PBFM_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

// applies one axis value to a run config; axes mirror the paper's sweeps
inline void apply_axis(ExperimentConfig& run, const std::string& axis, const std::string& value) {
    auto bad = [&]() {
        return ConfigError("invalid value '" + value + "' for ablation axis '" + axis + "'");
    };
    if (axis == "unroll") {
        if (value == "fm") {
            run.train.mode = train::UpdateMode::FmOnly;
        } else {
            run.train.mode = train::UpdateMode::Config;
            run.train.n_max = std::stoi(value);
            if (run.train.n_max < 1) throw bad();
        }
    } else if (axis == "sigma-min") {
        run.train.sigma_min = std::stod(value);
    } else if (axis == "time-dist") {
        run.train.time_dist = flow::time_dist_from(value);
    } else if (axis == "mode") {
        if (value == "config" || value == "fm-only") {
            run.train.mode = train::update_mode_from(value);
        } else {
            // a numeric value selects weighted mode with w_r = beta
            run.train.mode = train::UpdateMode::Weighted;
            run.train.w_fm = 1.0;
            run.train.w_r = std::stod(value);
        }
    } else if (axis == "power") {
        run.train.residual_power = std::stod(value);
        if (run.train.residual_power < 0) throw bad();
    } else if (axis == "sampler") {
        run.sample.stochastic = value == "stoch";
        if (value != "stoch" && value != "det") throw bad();
    } else if (axis == "steps") {
        run.sample.steps = std::stoi(value);
        if (run.sample.steps < 1) throw bad();
    } else {
        throw ConfigError("unknown ablation axis: " + axis);
    }
}

inline bool axis_trains_per_value(const std::string& axis) {
    return axis != "sampler" && axis != "steps";
}

// one full train -> sample -> eval pipeline rooted at run.out
inline metrics::EvalReport run_pipeline(ExperimentConfig run, const std::string& train_data,
                                        const std::string& reference, bool train_phase = true) {
    ensure_dir(run.out);
    run.data.path = train_data;
    run.sample.ref = reference;
    run.sample.checkpoint = run.out + "/checkpoint.pbfm";
    run.sample.file = run.out + "/samples.pbfm";
    if (train_phase) cmd_train(run, /*quiet=*/true);
    cmd_sample(run);
    run.eval_generated = run.sample.file;
    run.eval_reference = reference;
    return cmd_eval(run);
}

inline std::vector<AblationRow> cmd_ablate(const ExperimentConfig& cfg) {
    if (cfg.ablate_axis.empty() || cfg.ablate_values.empty())
        throw ConfigError("ablate: axis and values are required");
    if ((cfg.ablate_axis == "unroll" || cfg.ablate_axis == "power" || cfg.ablate_axis == "mode") &&
        cfg.kase == Case::Circle && cfg.net.variant != models::NetVariant::Mlp)
        throw ConfigError("ablate: circle case uses the mlp net");
    ensure_dir(cfg.out);

    // shared inputs: training set and a held-out reference with its own seed
    ExperimentConfig base = cfg;
    base.data.path = cfg.data.path;
    if (!std::filesystem::exists(base.data.path)) {
        base.data.path = cfg.out + "/train.pbfm";
        ExperimentConfig gen = cfg;
        gen.data.path = base.data.path;
        cmd_gen_data(gen);
    }
    std::string reference = cfg.eval_reference;
    if (reference.empty() || !std::filesystem::exists(reference)) {
        reference = cfg.out + "/reference.pbfm";
        ExperimentConfig gen = cfg;
        gen.seed = mix_seed(cfg.seed, 0x5eed);
        gen.data.n = std::max<std::int64_t>(cfg.sample.n, cfg.data.n);
        gen.data.path = reference;
        cmd_gen_data(gen);
    }

    // the steps/sampler axes reuse one trained model
    std::string shared_ckpt;
    if (!axis_trains_per_value(cfg.ablate_axis)) {
        ExperimentConfig tr = cfg;
        tr.out = cfg.out + "/base";
        ensure_dir(tr.out);
        tr.data.path = base.data.path;
        cmd_train(tr, /*quiet=*/true);
        shared_ckpt = tr.out + "/checkpoint.pbfm";
    }

    std::vector<AblationRow> rows(cfg.ablate_values.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    auto work = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cfg.ablate_values.size()) return;
            try {
                ExperimentConfig run = cfg;
                run.out = cfg.out + "/" + cfg.ablate_axis + "=" + cfg.ablate_values[i];
                apply_axis(run, cfg.ablate_axis, cfg.ablate_values[i]);
                if (!axis_trains_per_value(cfg.ablate_axis)) {
                    ensure_dir(run.out);
                    run.sample.checkpoint = shared_ckpt;
                    run.sample.file = run.out + "/samples.pbfm";
                    run.sample.ref = reference;
                    cmd_sample(run);
                    run.eval_generated = run.sample.file;
                    run.eval_reference = reference;
                    rows[i] = {cfg.ablate_values[i], cmd_eval(run)};
                } else {
                    rows[i] = {cfg.ablate_values[i],
                               run_pipeline(run, base.data.path, reference)};
                }
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    const int nthreads = std::min<int>(worker_threads(), static_cast<int>(cfg.ablate_values.size()));
    if (nthreads <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    std::ofstream os(cfg.out + "/ablation.csv");
    if (!os) throw io::IoError("cannot write ablation summary in " + cfg.out);
    os << "axis,value,residual_mae,residual_mse,w1_avg,mean_mse,std_mse\n";
    for (const auto& row : rows)
        os << cfg.ablate_axis << ',' << row.value << ',' << row.report.residual.mae << ','
           << row.report.residual.mse << ',' << row.report.w1_avg << ','
           << row.report.cond_error.mean_mse << ',' << row.report.cond_error.std_mse << '\n';
    return rows;
}

}  // namespace pbfm::experiment
