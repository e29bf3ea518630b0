// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned here.
// Artifacts (results tables, plot data, planning and LQR tables) are written
// under --out-dir. Exit status is nonzero when any criterion fails.

#include "fd.hpp"

#include "idlab/harness.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>

using namespace idlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

void log_run(const EvalReport& r) {
    std::printf("  %s r2=%.6f bound_pass=%d%s\n", r.run_id.c_str(), r.r2_h_to_z, static_cast<int>(r.bound_pass),
                r.diverged ? " diverged" : "");
    std::fflush(stdout);
}

const std::vector<MixingKind> kMixings2d = {MixingKind::parabolic_shear, MixingKind::sin_shear, MixingKind::spiral,
                                            MixingKind::coupling};

struct TrainedRun {
    TrainConfig config;
    EncoderModel model;
    EvalReport report;
    double seconds = 0.0;
};

// Sweeps shared between criteria, each run at most once.
class Runs {
public:
    explicit Runs(std::string out_dir) : out_dir_(std::move(out_dir)) {}

    const std::vector<TrainedRun>& two_d(double lambda) {
        auto& slot = lambda < 0.1 ? aligned_ : collapsed_;
        if (!slot) {
            slot.emplace();
            for (MixingKind k : kMixings2d) {
                TrainConfig c = desk_preset(k);
                c.loss.lambda = lambda;
                c.run_id = "2d_" + to_string(k) + "_l" + fmt("%g", lambda);
                const auto t0 = Clock::now();
                TrainResult r = run_training(c);
                slot->push_back({c, std::move(r.model), r.report, seconds_since(t0)});
                log_run(slot->back().report);
            }
            save(lambda < 0.1 ? "results_2d.csv" : "results_2d_collapse.csv", reports(*slot));
        }
        return *slot;
    }

    const std::vector<EvalReport>& grid() {
        if (!grid_) {
            grid_ = run_grid_sweep({1e-3, 0.5}, {0.5, 0.95}, {0, 1, 2}, desk_preset(MixingKind::parabolic_shear), log_run);
            save("results_grid.csv", *grid_);
        }
        return *grid_;
    }

    const std::vector<EvalReport>& scaling() {
        if (!scaling_) {
            const TrainConfig base = scaling_preset(2);
            scaling_ = run_scaling_sweep({2, 8, 32}, {LossKind::sigreg, LossKind::vicreg}, {0}, base, log_run);
            const auto nce = run_scaling_sweep({64}, {LossKind::infonce}, {0}, base, log_run);
            scaling_->insert(scaling_->end(), nce.begin(), nce.end());
            save("results_scaling.csv", *scaling_);
        }
        return *scaling_;
    }

    const std::vector<EvalReport>& gennorm() {
        if (!gennorm_) {
            gennorm_ = run_gennorm_sweep({0.5, 1.0, 2.0, 4.0, 8.0}, {LossKind::sigreg, LossKind::vicreg, LossKind::infonce},
                                         {0, 1, 2}, desk_preset(MixingKind::parabolic_shear), log_run);
            save("results_gennorm.csv", *gennorm_);
        }
        return *gennorm_;
    }

    /// Every run trained so far.
    std::vector<EvalReport> all() const {
        std::vector<EvalReport> out;
        for (const auto* s : {&aligned_, &collapsed_})
            if (*s) {
                const auto r = reports(**s);
                out.insert(out.end(), r.begin(), r.end());
            }
        for (const auto* s : {&grid_, &scaling_, &gennorm_})
            if (*s) out.insert(out.end(), (*s)->begin(), (*s)->end());
        return out;
    }

    static std::vector<EvalReport> reports(const std::vector<TrainedRun>& runs) {
        std::vector<EvalReport> out;
        for (const auto& r : runs) out.push_back(r.report);
        return out;
    }

private:
    void save(const std::string& name, const std::vector<EvalReport>& rs) const {
        write_results_csv((fs::path(out_dir_) / name).string(), rs);
    }

    std::string out_dir_;
    std::optional<std::vector<TrainedRun>> aligned_, collapsed_;
    std::optional<std::vector<EvalReport>> grid_, scaling_, gennorm_;
};

// 1. Mehler cross-moments.
Verdict mehler_oracle() {
    const auto t0 = Clock::now();
    const auto rows = mehler_grid({0.3, 0.6, 0.9}, 4, 1000000, 2024);
    const double sec = seconds_since(t0);
    double worst = 0.0;
    int failed = 0;
    for (const auto& r : rows) {
        failed += !r.passed();
        if (r.standard_error > 0.0) worst = std::max(worst, std::abs(r.estimate - r.exact) / r.standard_error);
    }
    return {failed == 0 && sec < 60.0,
            fmt("%zu cells, %d beyond 3 SE, worst %.2f SE, %.1f s (limit 60 s)", rows.size(), failed, worst, sec)};
}

// 2. Whitened alignment never beats 2(1 - rho) n by more than 3 SE.
Verdict loss_floor(const std::vector<EvalReport>& runs) {
    int checked = 0, below = 0;
    double worst = std::numeric_limits<double>::infinity();
    for (const auto& r : runs) {
        if (r.diverged) continue;
        ++checked;
        const double floor = loss_lower_bound(r.rho, r.dim);
        const double z = (r.whitened_align - floor) / std::max(r.whitened_align_se, 1e-300);
        worst = std::min(worst, z);
        below += r.whitened_align < floor - 3.0 * r.whitened_align_se;
    }
    return {checked > 0 && below == 0,
            fmt("%d runs, %d below floor - 3 SE, closest %.2f SE above the floor", checked, below, worst)};
}

// 3. 2-D identifiability and collapse.
Verdict identifiability_2d(Runs& runs) {
    bool ok = true;
    std::string detail;
    double slowest = 0.0;
    for (const auto& r : runs.two_d(1e-3)) {
        ok &= r.report.r2_h_to_z >= 0.96;
        slowest = std::max(slowest, r.seconds);
        detail += fmt("%s=%.4f ", r.report.mixing.c_str(), r.report.r2_h_to_z);
    }
    detail += "| collapse: ";
    for (const auto& r : runs.two_d(0.5)) {
        ok &= r.report.r2_h_to_z < 0.1;
        slowest = std::max(slowest, r.seconds);
        detail += fmt("%s=%.4f ", r.report.mixing.c_str(), r.report.r2_h_to_z);
    }
    ok &= slowest < 300.0;
    return {ok, detail + fmt("| slowest run %.0f s (limit 300 s)", slowest)};
}

// 4. Scaling with the matched coupling encoder.
Verdict scaling_trend(Runs& runs) {
    bool ok = true;
    std::string detail;
    for (const auto& r : runs.scaling()) {
        if (r.method == "infonce") {
            ok &= r.underflow && r.r2_h_to_z < 0.9;
            detail += fmt("infonce N=%d r2=%.4f min|g|=%.2e underflow=%d", r.dim, r.r2_h_to_z, r.min_grad_norm,
                          static_cast<int>(r.underflow));
        } else {
            ok &= !r.diverged && r.r2_h_to_z >= 0.999;
            detail += fmt("%s N=%d r2=%.4f; ", r.method.c_str(), r.dim, r.r2_h_to_z);
        }
    }
    return {ok, detail};
}

// 5. Gennorm sweep peaks at the Gaussian, per method and per seed.
Verdict gennorm_peak(Runs& runs) {
    const auto& rs = runs.gennorm();
    bool ok = true;
    std::string detail;
    std::map<std::string, std::map<std::uint64_t, std::map<double, double>>> by_seed;
    for (const auto& r : rs) by_seed[r.method][r.seed][r.alpha] = r.diverged ? 0.0 : r.r2_h_to_z;
    for (const auto& [method, by_alpha] : mean_r2_by_alpha(rs)) {
        bool method_ok = gaussian_peak(by_alpha);
        for (const auto& [seed, cells] : by_seed.at(method)) method_ok &= gaussian_peak(cells);
        ok &= method_ok;
        detail += method + (method_ok ? "" : "(no peak)") + ":";
        for (const auto& [a, r2] : by_alpha) detail += fmt(" %g=%.4f", a, r2);
        detail += "; ";
    }
    return {ok, detail};
}

// 6. Sturm-Liouville affine test.
Verdict sl_affine() {
    double best_alpha = 0.0, best = std::numeric_limits<double>::infinity();
    std::string detail;
    std::optional<SLRow> gauss;
    for (double a : {0.5, 1.0, 2.0, 4.0, 8.0}) {
        SLRow r = sl_row(a, 1.0, 4000, 4);
        detail += fmt("%g:%.2e ", a, r.affine_dev);
        if (r.affine_dev < best) best = r.affine_dev, best_alpha = a;
        if (a == 2.0) gauss = r;
    }
    const bool ok = best_alpha == 2.0 && std::abs(gauss->eigenvalues(1) - 1.0) <= 0.01 && gauss->identity_cosine >= 0.999;
    return {ok, detail + fmt("| gaussian lambda1=%.6f cosine=%.8f", gauss->eigenvalues(1), gauss->identity_cosine)};
}

// 7. Recovery bound over grid + 2-D + scaling + gennorm(alpha = 2).
Verdict bound_audit_all(Runs& runs) {
    std::vector<EvalReport> pool = Runs::reports(runs.two_d(1e-3));
    const auto add = [&](const std::vector<EvalReport>& rs, bool gaussian_only) {
        for (const auto& r : rs)
            if (!gaussian_only || r.alpha == 2.0) pool.push_back(r);
    };
    add(Runs::reports(runs.two_d(0.5)), false);
    add(runs.grid(), false);
    add(runs.scaling(), false);
    add(runs.gennorm(), true);
    const BoundTally t = bound_tally(pool);
    std::string failures;
    for (const auto& r : pool)
        if (r.converged() && !r.bound_pass) failures += " " + r.run_id;
    return {t.converged > 0 && t.rate() >= 0.98,
            fmt("%d/%d converged runs satisfy the bound (%.1f%%, need 98%%)", t.passed, t.converged, 100.0 * t.rate()) +
                (failures.empty() ? "" : "; failing:" + failures)};
}

// 8. Hermite-weight prediction of positive-pair correlation.
Verdict correlation_chain(Runs& runs) {
    bool ok = true;
    int checked = 0;
    std::string detail;
    for (const auto& r : runs.two_d(1e-3)) {
        if (!r.report.converged()) continue;
        ++checked;
        const auto h = [&](const Matrix& z) { return encode(r.model, apply_mixing(r.config.mixing, z)); };
        const CorrelationChain c = correlation_chain_check(h, 2, r.config.rho(0), 8, 40000, 400000, 31);
        const double gap = std::abs(c.predicted - c.direct);
        ok &= gap <= 3.0 * c.standard_error;
        detail += fmt("%s pred=%.5f direct=%.5f (%.2f SE); ", r.report.mixing.c_str(), c.predicted, c.direct,
                      gap / c.standard_error);
    }
    return {ok && checked > 0, detail};
}

// 9. Jacobian energy identities.
Verdict dirichlet_checks() {
    bool ok = true;
    std::string detail;
    for (int n : {2, 5, 8}) {
        Generator g(static_cast<std::uint64_t>(n), Stream::eval);
        const Matrix q = random_orthogonal(n, g);
        const Matrix x = sample_latents(2000, n, LatentDistribution::gaussian(), 40 + n).data;
        const JacobianStats s = dirichlet_energy([&](Tape& t, Var v) { return t.matmul_transposed(v, t.constant(q)); }, x);
        ok &= std::abs(s.energy - n) <= 1e-12 * n;
        detail += fmt("orth n=%d energy-n=%.1e; ", n, s.energy - n);
    }
    const MixingSpec spiral = make_mixing(MixingKind::spiral);
    const Matrix z = sample_latents(20000, 2, LatentDistribution::gaussian(), 9).data;
    const JacobianStats s = dirichlet_energy([&](Tape& t, Var v) { return apply_mixing(t, spiral, v); }, z);
    const bool spiral_ok = std::abs(s.mean_log_det) <= 3.0 * s.log_det_se + 1e-12 && s.energy >= 2.0;
    ok &= spiral_ok;
    return {ok, detail + fmt("spiral E[ln|det J|]=%.2e (SE %.1e) energy=%.3f", s.mean_log_det, s.log_det_se, s.energy)};
}

// 10. LQR invariance, scalar DARE, value equivalence.
Verdict lqr_checks(const std::string& out_dir) {
    const auto rows = lqr_batch(20, 2, 8, 1000);
    {
        std::ofstream os(fs::path(out_dir) / "lqr.csv");
        write_lqr_csv(os, rows);
    }
    double worst = 0.0;
    for (const auto& [s, d, r] : rows) worst = std::max({worst, r.gain_residual, r.value_residual});

    const auto scalar = [](double v) { return Matrix::Constant(1, 1, v); };
    const LQRProblem p1{scalar(0.9), scalar(1.0), scalar(1.0), scalar(0.0), scalar(1.0), scalar(1.0)};
    const double p = dare_solve(p1)(0, 0);
    const double root = 0.5 * (0.81 + std::sqrt(0.81 * 0.81 + 4.0));

    const LQRProblem base = random_lqr_problem(3, 1);
    const LinearDynamics dyn{0.5 * base.A, base.B, 0.3};
    const Matrix actions = Matrix::Constant(10, base.B.cols(), 0.1);
    const Vector z0 = Vector::Ones(3);
    const auto inv_stage = [](const Vector& z, const Vector& a) { return z.squaredNorm() + a.squaredNorm(); };
    const auto inv_term = [](const Vector& z) { return z.squaredNorm(); };
    const auto coord_stage = [](const Vector& z, const Vector&) { return z(0) * z(0); };
    const auto coord_term = [](const Vector& z) { return z(0) * z(0); };
    const ValueComparison inv = value_equivalence_mc(inv_stage, inv_term, dyn, base.Q_rot, actions, z0, 4000, 5);
    const ValueComparison neg = value_equivalence_mc(coord_stage, coord_term, dyn, base.Q_rot, actions, z0, 4000, 5);

    const bool ok = worst <= 1e-8 && std::abs(p - root) <= 1e-6 && inv.equal_within_noise() && neg.detectably_unequal();
    return {ok, fmt("worst residual %.2e over 20 problems; scalar P=%.10f root=%.10f; invariant %.4f vs %.4f; "
                    "control %.4f vs %.4f (paired SE %.1e)",
                    worst, p, root, inv.true_cost, inv.latent_cost, neg.true_cost, neg.latent_cost, neg.paired_se)};
}

// 11. Straight-line planning in embedding space.
Verdict planning(Runs& runs, const std::string& out_dir) {
    const auto find = [](const std::vector<TrainedRun>& rs) -> const TrainedRun& {
        for (const auto& r : rs)
            if (r.config.mixing.kind == MixingKind::spiral) return r;
        throw std::logic_error("no spiral run");
    };
    const TrainedRun& good = find(runs.two_d(1e-3));
    const TrainedRun& bad = find(runs.two_d(0.5));
    const int pairs = 30, T = 15;
    const std::uint64_t seed = 77;
    const RetrievalLibrary lib = build_library(good.config, good.model, 5000, seed);
    RetrievalLibrary bad_lib = lib;
    bad_lib.embeddings = encode(bad.model, lib.observations);
    const auto rows_good = evaluate_planning(lib, pairs, T, seed, "planning", "trained");
    const auto rows_oracle = evaluate_planning(oracle_library(lib), pairs, T, seed, "planning", "oracle");
    const auto rows_bad = evaluate_planning(bad_lib, pairs, T, seed, "planning", "collapsed");
    {
        std::ofstream os(fs::path(out_dir) / "planning.csv");
        std::vector<PlanningRow> all = rows_good;
        all.insert(all.end(), rows_oracle.begin(), rows_oracle.end());
        all.insert(all.end(), rows_bad.begin(), rows_bad.end());
        write_planning_csv(os, all);
    }
    const auto lengths = [](const std::vector<PlanningRow>& rows) {
        Vector v(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) v(static_cast<Eigen::Index>(i)) = rows[i].path_length;
        return v;
    };
    const Vector lg = lengths(rows_good), lo = lengths(rows_oracle), lb = lengths(rows_bad);
    // Bootstrap over pairs of the trained-minus-oracle mean; within noise
    // when the central 95% interval contains zero.
    Generator g(seed, Stream::bootstrap);
    const int reps = 4000;
    std::vector<double> diffs(reps);
    for (int b = 0; b < reps; ++b) {
        double d = 0.0;
        for (int i = 0; i < pairs; ++i) {
            const auto k = static_cast<Eigen::Index>(g.below(pairs));
            d += lg(k) - lo(k);
        }
        diffs[static_cast<std::size_t>(b)] = d / pairs;
    }
    std::sort(diffs.begin(), diffs.end());
    const double lo_q = diffs[static_cast<std::size_t>(0.025 * reps)], hi_q = diffs[static_cast<std::size_t>(0.975 * reps) - 1];
    const bool within = lo_q <= 0.0 && 0.0 <= hi_q;
    const bool worse = lb.mean() > lg.mean();
    return {within && worse, fmt("mean path length trained %.4f oracle %.4f collapsed %.4f; "
                                 "trained-oracle 95%% bootstrap interval [%.4f, %.4f]",
                                 lg.mean(), lo.mean(), lb.mean(), lo_q, hi_q)};
}

// 12. Finite-difference gradients for every loss and encoder architecture.
Verdict gradient_checks() {
    double worst = 0.0;
    int cases = 0;
    for (std::uint64_t inst = 0; inst < 3; ++inst) {
        const int dim = 4;
        const MixingSpec mix = build_coupling_mixing(dim, 2, 10 + inst);
        const LatentBatch z = sample_latents(16, dim, LatentDistribution::gaussian(), 20 + inst);
        const PairBatch p = ou_pair(z, broadcast_rho(0.9, dim), 30 + inst);
        const Matrix x = apply_mixing(mix, p.z.data), xp = apply_mixing(mix, p.z_prime.data);
        Generator g(inst, Stream::init);
        EncoderModel mlp = make_mlp({dim, 8, 8, dim}, 40 + inst);
        EncoderModel cpl = make_coupling_encoder(dim, 2, 50 + inst, 6);
        cpl.params += 0.3 * g.normal_matrix(cpl.params.size(), 1);
        for (const EncoderModel* m : {&mlp, &cpl})
            for (LossKind k : {LossKind::sigreg, LossKind::vicreg, LossKind::infonce}) {
                LossConfig c;
                c.kind = k;
                c.lambda = 0.4;
                c.n_slices = 6;
                c.sigma = 2.0;
                const auto loss = [&](const EncoderModel& mm, Vector* grad) {
                    Tape t;
                    const BoundParams bp = bind_params(t, mm);
                    const Var y = encoder_forward(t, mm, bp, t.constant(x));
                    const Var yp = encoder_forward(t, mm, bp, t.constant(xp));
                    const LossParts parts = total_loss(t, c, y, yp, Generator(inst, Stream::slices));
                    if (grad) {
                        t.backward(parts.total);
                        *grad = gather_grads(t, mm, bp);
                    }
                    return t.scalar(parts.total);
                };
                Vector analytic;
                loss(*m, &analytic);
                const Vector numeric = testing::central_difference(
                    [&](const Vector& v) {
                        EncoderModel mm = *m;
                        mm.params = v;
                        return loss(mm, nullptr);
                    },
                    m->params);
                worst = std::max(worst, testing::max_relative_error(analytic, numeric));
                ++cases;
            }
    }
    return {worst <= 1e-4, fmt("%d loss x architecture instances, worst relative error %.2e (limit 1e-4)", cases, worst)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string out_dir = "acceptance_out";
    std::vector<int> only;
    app.add_option("--out-dir", out_dir, "artifact directory");
    app.add_option("--only", only, "run a subset of criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(out_dir);
    const std::set<int> selected(only.begin(), only.end());
    const auto want = [&](int id) { return selected.empty() || selected.count(id) > 0; };

    Runs runs(out_dir);
    std::map<int, std::pair<Verdict, double>> verdicts;
    const auto run = [&](int id, const std::function<Verdict()>& f) {
        if (!want(id)) return;
        const auto t0 = Clock::now();
        Verdict v;
        try {
            v = f();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        std::printf("[%2d] %s (%.0f s)\n", id, v.pass ? "pass" : "fail", seconds_since(t0));
        std::fflush(stdout);
        verdicts[id] = {v, seconds_since(t0)};
    };

    // Cheap checks first; training-backed criteria share the runs cache.
    run(1, mehler_oracle);
    run(12, gradient_checks);
    run(9, dirichlet_checks);
    run(10, [&] { return lqr_checks(out_dir); });
    run(6, sl_affine);
    run(3, [&] { return identifiability_2d(runs); });
    run(8, [&] { return correlation_chain(runs); });
    run(11, [&] { return planning(runs, out_dir); });
    run(4, [&] { return scaling_trend(runs); });
    run(5, [&] { return gennorm_peak(runs); });
    run(7, [&] { return bound_audit_all(runs); });
    run(2, [&] {
        runs.two_d(1e-3);
        runs.two_d(0.5);
        return loss_floor(runs.all());
    });

    int failed = 0;
    std::printf("\n");
    for (const auto& [id, vs] : verdicts) {
        const auto& [v, sec] = vs;
        std::printf("criterion %2d %s  %s  [%.0f s]\n", id, v.pass ? "PASS" : "FAIL", v.detail.c_str(), sec);
        failed += !v.pass;
    }

    const std::vector<EvalReport> all = runs.all();
    write_results_csv((fs::path(out_dir) / "results_all.csv").string(), all);
    for (PlotKind k : {PlotKind::grid_heatmap, PlotKind::bound_scatter, PlotKind::gennorm_curve, PlotKind::loss_vs_r2})
        export_plot_data(all, k, out_dir);
    std::printf("%d criteria failed\n", failed);
    return failed == 0 ? 0 : 1;
}
