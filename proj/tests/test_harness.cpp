#include "idlab/harness.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace idlab;

namespace {

TrainConfig tiny(MixingKind kind = MixingKind::parabolic_shear) {
    TrainConfig c = desk_preset(kind);
    c.steps = 30;
    c.warmup = 10;
    c.batch = 64;
    c.hidden = 16;
    c.eval_count = 512;
    c.log_every = 5;
    return c;
}

std::string csv_row(const EvalReport& r) {
    std::ostringstream os;
    write_results_row(os, r);
    return os.str();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
    const auto d = std::filesystem::temp_directory_path() / ("idlab_" + name);
    std::filesystem::remove_all(d);
    return d;
}

}  // namespace

TEST(Config, RoundTripIsByteIdentical) {
    TrainConfig gn = desk_preset(MixingKind::sin_shear);
    gn.dist = LatentDistribution::gennorm(0.5);
    gn.channel = Channel::copula;
    gn.loss = method_loss(LossKind::vicreg);
    gn.seeds = {7, 8, 9, 10};
    TrainConfig sc = scaling_preset(8);
    sc.loss = method_loss(LossKind::sigreg, 8);
    sc.rho = Vector::LinSpaced(8, 0.5, 0.9);
    for (const TrainConfig& c : {desk_preset(), full_preset(MixingKind::parabolic_shear), gn, sc}) {
        const std::string a = serialize_config(c);
        const std::string b = serialize_config(parse_config(a));
        EXPECT_EQ(a, b);
        EXPECT_EQ(config_hash(c), config_hash(parse_config(a)));
    }
}

TEST(Config, RoundTripPreservesMaterializedMixing) {
    const TrainConfig c = scaling_preset(4, true, 17);
    const TrainConfig back = parse_config(serialize_config(c));
    const Matrix z = sample_latents(20, 4, LatentDistribution::gaussian(), 1).data;
    EXPECT_EQ((apply_mixing(c.mixing, z) - apply_mixing(back.mixing, z)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Config, HashTracksEveryField) {
    const TrainConfig base = desk_preset();
    TrainConfig a = base;
    a.loss.lambda = 2e-3;
    TrainConfig b = base;
    b.seeds.eval = 1;
    TrainConfig d = base;
    d.loss.sigreg_gain = 16.0;
    EXPECT_NE(config_hash(base), config_hash(a));
    EXPECT_NE(config_hash(base), config_hash(b));
    EXPECT_NE(config_hash(base), config_hash(d));
    EXPECT_EQ(config_hash(base).size(), 16u);
}

TEST(Config, DefaultsMirrorFullScaleTable) {
    const TrainConfig c;
    EXPECT_EQ(c.lr_base, 3e-3);
    EXPECT_EQ(c.batch, 256);
    EXPECT_EQ(c.steps, 20000);
    EXPECT_EQ(c.warmup, 10000);
    EXPECT_EQ(c.eval_count, 10000);
    EXPECT_EQ(c.clip_norm, 1.0);
    const TrainConfig d = desk_preset();
    EXPECT_EQ(d.steps, 4000);
    EXPECT_EQ(d.warmup, 2000);
}

TEST(Config, ValidationRejectsInconsistentSetups) {
    TrainConfig c = desk_preset();
    c.arch = Arch::coupling_inverse;
    EXPECT_THROW(c.validate(), ParameterError);
    c = desk_preset();
    c.dist = LatentDistribution::gennorm(1.0);
    EXPECT_THROW(c.validate(), ParameterError);
    c.channel = Channel::copula;
    EXPECT_NO_THROW(c.validate());
    c = desk_preset();
    c.warmup = c.steps + 1;
    EXPECT_THROW(c.validate(), ParameterError);
    c = desk_preset();
    c.rho = broadcast_rho(0.9, 3);
    EXPECT_THROW(c.validate(), ParameterError);
    EXPECT_THROW(parse_config("{\"run_id\": 1}"), std::exception);
}

TEST(Training, ZeroStepsEvaluatesInitialModel) {
    TrainConfig c = tiny();
    c.steps = 0;
    c.warmup = 0;
    const TrainResult r = run_training(c);
    EXPECT_TRUE(r.log.empty());
    EXPECT_EQ((r.model.params - init_model(c, c.seeds.init).params).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_TRUE(std::isfinite(r.report.r2_h_to_z));
    EXPECT_TRUE(std::isfinite(r.report.final_total));
    EXPECT_FALSE(r.report.underflow);
    EXPECT_EQ(r.report.config_hash, config_hash(c));
}

TEST(Training, EndToEndDeterministic) {
    const TrainConfig c = tiny();
    const TrainResult a = run_training(c), b = run_training(c);
    EXPECT_EQ((a.model.params - b.model.params).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(csv_row(a.report), csv_row(b.report));
    TrainConfig other = c;
    other.seeds.data = 1;
    EXPECT_NE(csv_row(run_training(other).report), csv_row(a.report));
}

TEST(Training, LogsAtCadenceAndLastStep) {
    const TrainResult r = run_training(tiny());
    ASSERT_FALSE(r.log.empty());
    EXPECT_EQ(r.log.front().step, 0);
    EXPECT_EQ(r.log.back().step, 29);
    EXPECT_EQ(r.log[1].step, 5);
    std::ostringstream os;
    write_training_log(os, r.log);
    EXPECT_EQ(os.str().substr(0, 36), "step,lr,total,align,reg,grad_norm\n0,");
}

TEST(Training, RestartsKeepLowestFinalLoss) {
    TrainConfig c = tiny();
    c.restarts = 3;
    const TrainResult best = run_training(c);
    TrainConfig single = c;
    single.restarts = 1;
    const TrainResult first = run_training(single);
    EXPECT_LE(best.report.final_total, first.report.final_total);
    EXPECT_EQ(best.report.restarts, 3);
}

TEST(Training, CouplingEncoderRuns) {
    TrainConfig c = scaling_preset(4);
    c.steps = 20;
    c.warmup = 5;
    c.batch = 32;
    c.eval_count = 256;
    c.restarts = 1;
    c.loss = method_loss(LossKind::vicreg, 4);
    const TrainResult r = run_training(c);
    EXPECT_EQ(r.report.dim, 4);
    EXPECT_TRUE(std::isfinite(r.report.r2_h_to_z));
}

TEST(Training, DivergenceBecomesFlaggedReport) {
    TrainConfig c = tiny();
    c.lr_base = 1e200;
    c.warmup = 0;
    const EvalReport r = run_or_flag(c);
    EXPECT_TRUE(r.diverged);
    EXPECT_GE(r.diverged_step, 0);
    EXPECT_FALSE(r.converged());
    EXPECT_THROW(run_training(c), TrainingDivergence);
}

TEST(Sweeps, SingleCellGridIsPassthrough) {
    const TrainConfig base = tiny();
    const auto rows = run_grid_sweep({1e-3}, {0.95}, {0}, base);
    ASSERT_EQ(rows.size(), 1u);
    TrainConfig c = base;
    c.run_id = rows[0].run_id;
    EXPECT_EQ(csv_row(rows[0]), csv_row(run_or_flag(c)));
}

TEST(Sweeps, RowsCarryTheirOwnConfigHash) {
    const TrainConfig base = tiny();
    const auto rows = run_grid_sweep({1e-3, 0.5}, {0.9}, {2}, base);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_NE(rows[0].config_hash, rows[1].config_hash);
    TrainConfig c = base;
    c.loss.lambda = 0.5;
    c.rho = broadcast_rho(0.9, 2);
    c.seeds.data = c.seeds.init = c.seeds.slices = 2;
    c.run_id = rows[1].run_id;
    EXPECT_EQ(rows[1].config_hash, config_hash(c));
}

TEST(Sweeps, GennormUsesCopulaChannelAndRecordsAlpha) {
    const auto rows = run_gennorm_sweep({1.0}, {LossKind::vicreg}, {0}, tiny());
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].alpha, 1.0);
    EXPECT_EQ(rows[0].dist, "gennorm");
    EXPECT_EQ(rows[0].method, "vicreg");
}

TEST(Export, EmptyResultsGiveHeadersOnly) {
    const auto dir = scratch_dir("export_empty");
    for (PlotKind k : {PlotKind::grid_heatmap, PlotKind::bound_scatter, PlotKind::gennorm_curve, PlotKind::loss_vs_r2}) {
        const std::string text = slurp(export_plot_data({}, k, dir.string()));
        EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1) << to_string(k);
    }
    std::filesystem::remove_all(dir);
}

TEST(Export, OneRowPerRunWithBoundPairs) {
    const auto dir = scratch_dir("export_rows");
    std::vector<EvalReport> rs(3);
    for (int i = 0; i < 3; ++i) {
        rs[i].run_id = "r" + std::to_string(i);
        rs[i].lambda = 1e-3;
        rs[i].rho = 0.5 + 0.1 * i;
        rs[i].seed = static_cast<std::uint64_t>(i);
        rs[i].bound_value = 0.1 * i;
        rs[i].procrustes_error = 0.01 * i;
    }
    const std::string grid = slurp(export_plot_data(rs, PlotKind::grid_heatmap, dir.string()));
    EXPECT_EQ(std::count(grid.begin(), grid.end(), '\n'), 4);
    std::istringstream is(slurp(export_plot_data(rs, PlotKind::bound_scatter, dir.string())));
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    std::getline(is, row);
    EXPECT_EQ(header.substr(0, 39), "run_id,method,bound_value,procrustes_er");
    EXPECT_EQ(row.substr(0, 4), "r1,,");
    EXPECT_EQ(std::stod(row.substr(4, row.find(',', 4) - 4)), 0.1);
    std::filesystem::remove_all(dir);
    EXPECT_EQ(plot_kind_from_string("gennorm_curve"), PlotKind::gennorm_curve);
    EXPECT_THROW(plot_kind_from_string("heat"), ParameterError);
}

TEST(Library, RowAlignedAndDeterministic) {
    const TrainConfig c = tiny();
    const EncoderModel m = init_model(c, 0);
    const RetrievalLibrary a = build_library(c, m, 300, 5), b = build_library(c, m, 300, 5);
    a.validate();
    EXPECT_EQ(a.count(), 300);
    EXPECT_EQ((a.embeddings - b.embeddings).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ((a.observations - apply_mixing(c.mixing, a.latents)).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ((a.embeddings - encode(m, a.observations)).cwiseAbs().maxCoeff(), 0.0);
    const RetrievalLibrary o = oracle_library(a);
    EXPECT_EQ((o.embeddings - a.latents).cwiseAbs().maxCoeff(), 0.0);
    const auto rows = evaluate_planning(o, 10, 15, 1, "r", "oracle");
    for (const auto& r : rows) EXPECT_GE(r.path_length, 1.0 - 1e-12);
}

TEST(Audits, MehlerGridCoversAllDegreePairs) {
    const auto rows = mehler_grid({0.3, 0.9}, 2, 20000, 1);
    ASSERT_EQ(rows.size(), 18u);
    EXPECT_EQ(rows[0].estimate, 1.0);
    EXPECT_TRUE(rows[0].passed());
    EXPECT_DOUBLE_EQ(rows[4].exact, 0.3);  // rho 0.3, k = j = 1
    EXPECT_EQ(mehler_grid({0.3, 0.9}, 2, 20000, 1)[7].estimate, rows[7].estimate);
}

TEST(Audits, BoundTallyCountsConvergedOnly) {
    std::vector<EvalReport> rs(4);
    for (auto& r : rs) r.r2_h_to_z = 0.95;
    rs[0].bound_pass = rs[1].bound_pass = true;
    rs[2].diverged = true;
    rs[3].r2_h_to_z = 0.5;
    const BoundTally t = bound_tally(rs);
    EXPECT_EQ(t.converged, 2);
    EXPECT_EQ(t.passed, 2);
    EXPECT_EQ(t.rate(), 1.0);
    EXPECT_EQ(bound_tally({}).rate(), 0.0);
}

TEST(Audits, GaussianPeakIsStrict) {
    std::vector<EvalReport> rs;
    for (double a : {1.0, 2.0, 4.0})
        for (int s = 0; s < 2; ++s) {
            EvalReport r;
            r.method = "vicreg";
            r.alpha = a;
            r.r2_h_to_z = (a == 2.0 ? 0.9 : 0.8) + 0.01 * s;
            rs.push_back(r);
        }
    const auto m = mean_r2_by_alpha(rs);
    EXPECT_NEAR(m.at("vicreg").at(2.0), 0.905, 1e-12);
    EXPECT_TRUE(gaussian_peak(m.at("vicreg")));
    EXPECT_FALSE(gaussian_peak({{1.0, 0.9}, {2.0, 0.9}}));
    EXPECT_FALSE(gaussian_peak({{1.0, 0.9}}));
}

TEST(Audits, SlRowGaussianIsAffine) {
    const SLRow g = sl_row(2.0, 1.0, 2000);
    EXPECT_NEAR(g.eigenvalues(1), 1.0, 0.01);
    EXPECT_GE(g.identity_cosine, 0.999);
    EXPECT_LT(g.affine_dev, sl_row(1.0, 1.0, 2000).affine_dev);
}

TEST(Audits, LqrBatchCyclesDims) {
    const auto rows = lqr_batch(4, 2, 3, 10);
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(std::get<1>(rows[0]), 2);
    EXPECT_EQ(std::get<1>(rows[1]), 3);
    EXPECT_EQ(std::get<0>(rows[3]), 13u);
    for (const auto& r : rows) EXPECT_LE(std::get<2>(r).gain_residual, 1e-8);
}
