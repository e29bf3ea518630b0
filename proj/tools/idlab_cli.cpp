// Command-line front end: data generation, training, sweeps and audits.
// Every subcommand writes its artifacts under --out-dir and exits nonzero
// when its audit fails.

#include "idlab/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace idlab;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    bool full = false;
    long steps = -1;  ///< sweep-level step override; negative keeps the preset
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--seed", c.seed, "base seed");
    sub->add_option("--out-dir", c.out_dir, "artifact directory");
    sub->add_flag("--full{true},--desk{false}", c.full, "full-scale or desk-scale preset (default desk)");
}

std::string out_path(const Common& c, const std::string& name) {
    fs::create_directories(c.out_dir);
    return (fs::path(c.out_dir) / name).string();
}

void add_steps(CLI::App* sub, Common& c) {
    sub->add_option("--steps", c.steps, "override step count (warmup scales with it)");
}

TrainConfig with_steps(TrainConfig t, long steps) {
    if (steps >= 0) {
        t.warmup = t.steps == 0 ? 0 : t.warmup * steps / t.steps;
        t.steps = steps;
    }
    return t;
}

TrainConfig preset(const Common& c, MixingKind kind) {
    return with_steps(c.full ? full_preset(kind) : desk_preset(kind), c.steps);
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), "cannot read " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    require(static_cast<bool>(os), "cannot write " + path);
    os << text;
}

std::vector<std::uint64_t> seed_range(const Common& c, int count) {
    std::vector<std::uint64_t> s;
    for (int i = 0; i < count; ++i) s.push_back(c.seed + static_cast<std::uint64_t>(i));
    return s;
}

std::vector<LossKind> parse_methods(const std::vector<std::string>& names) {
    std::vector<LossKind> out;
    for (const auto& n : names) out.push_back(loss_kind_from_string(n));
    return out;
}

ProgressFn printer() {
    return [](const EvalReport& r) {
        std::printf("%s r2=%.6f bound_pass=%d%s\n", r.run_id.c_str(), r.r2_h_to_z, static_cast<int>(r.bound_pass),
                    r.diverged ? " DIVERGED" : "");
        std::fflush(stdout);
    };
}

void export_all(const std::vector<EvalReport>& rs, const Common& c) {
    for (PlotKind k : {PlotKind::grid_heatmap, PlotKind::bound_scatter, PlotKind::gennorm_curve, PlotKind::loss_vs_r2})
        export_plot_data(rs, k, c.out_dir);
}

int bound_exit(const std::vector<EvalReport>& rs) {
    const BoundTally t = bound_tally(rs);
    std::printf("bound audit: %d/%d converged runs pass (%.1f%%)\n", t.passed, t.converged, 100.0 * t.rate());
    return t.converged > 0 && t.rate() >= 0.98 ? 0 : 1;
}

// Runs a single-config flag set shared by train and plan.
struct RunFlags {
    std::string config;
    std::string mixing = "spiral";
    std::string method = "sigreg";
    double lambda = -1.0;
    double rho = 0.95;
    int dim = 2;
    long steps = -1;

    void add(CLI::App* sub) {
        sub->add_option("--config", config, "TrainConfig JSON file; overrides the other run flags");
        sub->add_option("--mixing", mixing, "parabolic_shear, sin_shear, spiral or coupling");
        sub->add_option("--method", method, "sigreg, vicreg or infonce");
        sub->add_option("--lambda", lambda, "regularizer weight (default per method)");
        sub->add_option("--rho", rho, "pair correlation");
        sub->add_option("--dim", dim, "latent dimension for the coupling mixing");
        sub->add_option("--steps", steps, "override step count (warmup scales with it)");
    }

    TrainConfig build(const Common& c) const {
        if (!config.empty()) return parse_config(slurp(config));
        const MixingKind kind = mixing_kind_from_string(mixing);
        TrainConfig t = kind == MixingKind::coupling ? scaling_preset(dim, !c.full) : preset(c, kind);
        t.loss = method_loss(loss_kind_from_string(method), t.dim());
        if (lambda >= 0.0) t.loss.lambda = lambda;
        t.rho = broadcast_rho(rho, t.dim());
        t.seeds = {c.seed, c.seed, c.seed, t.seeds.eval};
        t = with_steps(t, steps);
        t.run_id = "train_" + mixing + "_" + method + "_s" + std::to_string(c.seed);
        return t;
    }
};

int cmd_gen_data(const Common& c, const std::string& mixing, int dim, long count, double rho, double alpha,
                 const std::string& channel, bool binary) {
    const MixingKind kind = mixing_kind_from_string(mixing);
    TrainConfig t = kind == MixingKind::coupling ? scaling_preset(dim, !c.full) : preset(c, kind);
    if (alpha != 2.0) t.dist = LatentDistribution::gennorm(alpha);
    t.channel = channel.empty() ? (t.dist.is_gaussian() ? Channel::ou : Channel::copula) : channel_from_string(channel);
    t.rho = broadcast_rho(rho, t.dim());
    t.validate();
    const PairBatch p = make_pairs(t, count, derive_seed(c.seed, Stream::latents, 0), derive_seed(c.seed, Stream::noise, 0));
    const std::pair<const char*, const Matrix*> files[] = {
        {"z", &p.z.data}, {"z_prime", &p.z_prime.data}, {"x", &*p.x}, {"x_prime", &*p.x_prime}};
    for (const auto& [name, m] : files) {
        const std::string path = out_path(c, std::string(name) + (binary ? ".bin" : ".csv"));
        std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
        require(static_cast<bool>(os), "cannot write " + path);
        if (binary) write_binary(os, *m);
        else write_csv(os, *m, name[0] == 'z' ? "z" : "x");
    }
    write_text(out_path(c, "config.json"), serialize_config(t));
    std::printf("wrote %ld pairs to %s\n", count, c.out_dir.c_str());
    return 0;
}

int cmd_train(const Common& c, const RunFlags& f) {
    const TrainConfig t = f.build(c);
    write_text(out_path(c, "config.json"), serialize_config(t));
    try {
        const TrainResult r = run_training(t);
        std::ofstream log(out_path(c, "training_log.csv"));
        write_training_log(log, r.log);
        write_results_csv(out_path(c, "results.csv"), {r.report});
        write_text(out_path(c, "report.json"), to_json(r.report).dump(2) + "\n");
        save_checkpoint(out_path(c, "model"), r.model, t.seeds.init, t.steps);
        printer()(r.report);
        return r.report.bound_pass ? 0 : 1;
    } catch (const TrainingDivergence& e) {
        std::fprintf(stderr, "diverged: %s\n", e.what());
        write_results_csv(out_path(c, "results.csv"), {run_or_flag(t)});
        return 2;
    }
}

int cmd_grid(const Common& c, const std::string& mixing, const std::vector<double>& lambdas,
             const std::vector<double>& rhos, int seeds) {
    const auto rs = run_grid_sweep(lambdas, rhos, seed_range(c, seeds), preset(c, mixing_kind_from_string(mixing)), printer());
    write_results_csv(out_path(c, "results.csv"), rs);
    export_all(rs, c);
    return bound_exit(rs);
}

int cmd_scaling(const Common& c, const std::vector<int>& dims, const std::vector<std::string>& methods, int seeds) {
    const auto rs = run_scaling_sweep(dims, parse_methods(methods), seed_range(c, seeds), with_steps(scaling_preset(2, !c.full), c.steps), printer());
    write_results_csv(out_path(c, "results.csv"), rs);
    export_all(rs, c);
    return bound_exit(rs);
}

int cmd_gennorm(const Common& c, const std::string& mixing, const std::vector<double>& alphas,
                const std::vector<std::string>& methods, int seeds) {
    const auto rs = run_gennorm_sweep(alphas, parse_methods(methods), seed_range(c, seeds),
                                      preset(c, mixing_kind_from_string(mixing)), printer());
    write_results_csv(out_path(c, "results.csv"), rs);
    export_all(rs, c);
    int bad = 0;
    for (const auto& [method, by_alpha] : mean_r2_by_alpha(rs)) {
        const bool ok = gaussian_peak(by_alpha);
        bad += !ok;
        std::printf("%s:", method.c_str());
        for (const auto& [a, r2] : by_alpha) std::printf(" a=%g r2=%.4f", a, r2);
        std::printf(" peak_at_2=%d\n", static_cast<int>(ok));
    }
    return bad == 0 ? 0 : 1;
}

int cmd_spectral(const Common& c, const std::vector<double>& rhos, int max_degree, long samples) {
    const auto rows = mehler_grid(rhos, max_degree, samples, c.seed);
    std::ofstream os(out_path(c, "mehler.csv"));
    os << "rho,k,j,estimate,standard_error,exact,pass\n";
    os.precision(17);
    int failed = 0;
    for (const auto& r : rows) {
        os << r.rho << ',' << r.k << ',' << r.j << ',' << r.estimate << ',' << r.standard_error << ',' << r.exact
           << ',' << r.passed() << '\n';
        failed += !r.passed();
    }
    std::printf("mehler: %zu cells, %d outside 3 SE\n", rows.size(), failed);
    return failed == 0 ? 0 : 1;
}

int cmd_sl_eigen(const Common& c, const std::vector<double>& alphas, int grid, int count, double k_coef) {
    std::ofstream os(out_path(c, "sl_spectrum.csv"));
    os << "alpha,index,eigenvalue,affine_deviation,identity_cosine\n";
    os.precision(17);
    double best_alpha = 0.0, best_dev = std::numeric_limits<double>::infinity();
    bool gaussian_ok = true;
    for (double a : alphas) {
        const SLRow r = sl_row(a, k_coef, grid, count);
        for (Eigen::Index i = 0; i < r.eigenvalues.size(); ++i)
            os << a << ',' << i << ',' << r.eigenvalues(i) << ',' << r.affine_dev << ',' << r.identity_cosine << '\n';
        std::printf("alpha=%g lambda1=%.6f affine_dev=%.3e cosine=%.6f\n", a, r.eigenvalues(1), r.affine_dev,
                    r.identity_cosine);
        if (r.affine_dev < best_dev) best_dev = r.affine_dev, best_alpha = a;
        if (a == 2.0)
            gaussian_ok = std::abs(r.eigenvalues(1) - k_coef) <= 0.01 * k_coef && r.identity_cosine >= 0.999;
    }
    const bool has_gaussian = std::find(alphas.begin(), alphas.end(), 2.0) != alphas.end();
    if (!has_gaussian) return 0;
    return best_alpha == 2.0 && gaussian_ok ? 0 : 1;
}

int cmd_bound_audit(const std::string& results) { return bound_exit(read_results_csv(results)); }

int cmd_plan(const Common& c, const RunFlags& f, const std::string& checkpoint, long library, int pairs, int T) {
    const TrainConfig t = f.build(c);
    const EncoderModel m = checkpoint.empty() ? run_training(t).model : load_checkpoint(checkpoint).model;
    const RetrievalLibrary lib = build_library(t, m, library, c.seed);
    auto rows = evaluate_planning(lib, pairs, T, c.seed, t.run_id, "encoder");
    const auto oracle = evaluate_planning(oracle_library(lib), pairs, T, c.seed, t.run_id, "oracle");
    std::ofstream os(out_path(c, "planning.csv"));
    rows.insert(rows.end(), oracle.begin(), oracle.end());
    write_planning_csv(os, rows);
    const auto mean = [&](const std::string& id) {
        double s = 0.0;
        int n = 0;
        for (const auto& r : rows)
            if (r.encoder_id == id) s += r.path_length, ++n;
        return s / n;
    };
    std::printf("mean path length: encoder %.4f oracle %.4f\n", mean("encoder"), mean("oracle"));
    return 0;
}

int cmd_lqr(const Common& c, int problems, int min_dim, int max_dim, double tol) {
    const auto rows = lqr_batch(problems, min_dim, max_dim, c.seed);
    std::ofstream os(out_path(c, "lqr.csv"));
    write_lqr_csv(os, rows);
    double worst = 0.0;
    for (const auto& [s, d, r] : rows) worst = std::max({worst, r.gain_residual, r.value_residual});
    std::printf("lqr: %d problems, worst residual %.3e\n", problems, worst);
    return worst <= tol ? 0 : 1;
}

int cmd_export(const Common& c, const std::string& results, const std::string& kind) {
    const auto rs = read_results_csv(results);
    if (kind == "all") export_all(rs, c);
    else export_plot_data(rs, plot_kind_from_string(kind), c.out_dir);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"identifiability lab: synthetic worlds, encoders, sweeps and audits"};
    app.require_subcommand(1);
    Common common;

    auto* gen = app.add_subcommand("gen-data", "sample latent pairs and their observations");
    std::string gen_mixing = "spiral", gen_channel;
    int gen_dim = 2;
    long gen_count = 1000;
    double gen_rho = 0.95, gen_alpha = 2.0;
    bool gen_binary = false;
    add_common(gen, common);
    gen->add_option("--mixing", gen_mixing);
    gen->add_option("--dim", gen_dim);
    gen->add_option("--count", gen_count);
    gen->add_option("--rho", gen_rho);
    gen->add_option("--alpha", gen_alpha, "gennorm shape; 2 is Gaussian");
    gen->add_option("--channel", gen_channel, "ou, copula or mixture (default ou for Gaussian latents, else copula)");
    gen->add_flag("--binary", gen_binary, "write the binary batch format instead of CSV");

    auto* train = app.add_subcommand("train", "train one encoder and audit it");
    RunFlags train_flags;
    add_common(train, common);
    train_flags.add(train);

    auto* grid = app.add_subcommand("grid", "lambda x rho sweep on a 2-D mixing");
    std::string grid_mixing = "parabolic_shear";
    std::vector<double> grid_lambdas{1e-3, 0.5}, grid_rhos{0.5, 0.95};
    int grid_seeds = 3;
    add_common(grid, common);
    add_steps(grid, common);
    grid->add_option("--mixing", grid_mixing);
    grid->add_option("--lambdas", grid_lambdas)->delimiter(',');
    grid->add_option("--rhos", grid_rhos)->delimiter(',');
    grid->add_option("--seeds", grid_seeds, "number of consecutive seeds from --seed");

    auto* scaling = app.add_subcommand("scaling", "coupling-mixing sweep over latent dimension");
    std::vector<int> sc_dims{2, 8, 32};
    std::vector<std::string> sc_methods{"sigreg", "vicreg"};
    int sc_seeds = 1;
    add_common(scaling, common);
    add_steps(scaling, common);
    scaling->add_option("--dims", sc_dims)->delimiter(',');
    scaling->add_option("--methods", sc_methods)->delimiter(',');
    scaling->add_option("--seeds", sc_seeds);

    auto* gennorm = app.add_subcommand("gennorm", "latent-shape sweep over generalized-normal alpha");
    std::string gn_mixing = "parabolic_shear";
    std::vector<double> gn_alphas{0.5, 1.0, 2.0, 4.0, 8.0};
    std::vector<std::string> gn_methods{"sigreg", "vicreg", "infonce"};
    int gn_seeds = 3;
    add_common(gennorm, common);
    add_steps(gennorm, common);
    gennorm->add_option("--mixing", gn_mixing);
    gennorm->add_option("--alphas", gn_alphas)->delimiter(',');
    gennorm->add_option("--methods", gn_methods)->delimiter(',');
    gennorm->add_option("--seeds", gn_seeds);

    auto* spectral = app.add_subcommand("spectral", "Mehler cross-moment check");
    std::vector<double> sp_rhos{0.3, 0.6, 0.9};
    int sp_degree = 4;
    long sp_samples = 1000000;
    add_common(spectral, common);
    spectral->add_option("--rhos", sp_rhos)->delimiter(',');
    spectral->add_option("--max-degree", sp_degree);
    spectral->add_option("--samples", sp_samples);

    auto* sl = app.add_subcommand("sl-eigen", "Sturm-Liouville spectra across the gennorm family");
    std::vector<double> sl_alphas{0.5, 1.0, 2.0, 4.0, 8.0};
    int sl_grid = 4000, sl_count = 4;
    double sl_k = 1.0;
    add_common(sl, common);
    sl->add_option("--alphas", sl_alphas)->delimiter(',');
    sl->add_option("--grid", sl_grid);
    sl->add_option("--count", sl_count);
    sl->add_option("--k", sl_k, "diffusion coefficient");

    auto* audit = app.add_subcommand("bound-audit", "recovery-bound pass rate of a results file");
    std::string audit_results;
    add_common(audit, common);
    audit->add_option("--results", audit_results)->required();

    auto* plan = app.add_subcommand("plan", "straight-line planning through a retrieval library");
    RunFlags plan_flags;
    std::string plan_ckpt;
    long plan_library = 5000;
    int plan_pairs = 30, plan_T = 15;
    add_common(plan, common);
    plan_flags.add(plan);
    plan->add_option("--checkpoint", plan_ckpt, "checkpoint prefix; trains from the run flags when absent");
    plan->add_option("--library", plan_library);
    plan->add_option("--pairs", plan_pairs);
    plan->add_option("--waypoints", plan_T);

    auto* lqr = app.add_subcommand("lqr-check", "LQR invariance under orthogonal reparametrization");
    int lqr_problems = 20, lqr_min = 2, lqr_max = 8;
    double lqr_tol = 1e-8;
    add_common(lqr, common);
    lqr->add_option("--problems", lqr_problems);
    lqr->add_option("--min-dim", lqr_min);
    lqr->add_option("--max-dim", lqr_max);
    lqr->add_option("--tol", lqr_tol);

    auto* exp = app.add_subcommand("export", "plot-ready CSVs from a results file");
    std::string exp_results, exp_kind = "all";
    add_common(exp, common);
    exp->add_option("--results", exp_results)->required();
    exp->add_option("--kind", exp_kind, "all, grid_heatmap, bound_scatter, gennorm_curve or loss_vs_r2");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return cmd_gen_data(common, gen_mixing, gen_dim, gen_count, gen_rho, gen_alpha, gen_channel, gen_binary);
        if (*train) return cmd_train(common, train_flags);
        if (*grid) return cmd_grid(common, grid_mixing, grid_lambdas, grid_rhos, grid_seeds);
        if (*scaling) return cmd_scaling(common, sc_dims, sc_methods, sc_seeds);
        if (*gennorm) return cmd_gennorm(common, gn_mixing, gn_alphas, gn_methods, gn_seeds);
        if (*spectral) return cmd_spectral(common, sp_rhos, sp_degree, sp_samples);
        if (*sl) return cmd_sl_eigen(common, sl_alphas, sl_grid, sl_count, sl_k);
        if (*audit) return cmd_bound_audit(audit_results);
        if (*plan) return cmd_plan(common, plan_flags, plan_ckpt, plan_library, plan_pairs, plan_T);
        if (*lqr) return cmd_lqr(common, lqr_problems, lqr_min, lqr_max, lqr_tol);
        if (*exp) return cmd_export(common, exp_results, exp_kind);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
