#include "idlab/eval.hpp"
#include "idlab/mixing.hpp"
#include "idlab/spectral.hpp"
#include "idlab/world.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

using namespace idlab;

namespace {

Matrix gaussian(Eigen::Index n, int dim, std::uint64_t seed) {
    return sample_latents(n, dim, LatentDistribution::gaussian(), seed).data;
}

Matrix rotation90() {
    Matrix q(2, 2);
    q << 0, -1, 1, 0;
    return q;
}

}  // namespace

TEST(LinearR2, AffineTargetIsPerfect) {
    const Matrix s = gaussian(1000, 3, 1);
    const Matrix t = (2.0 * s).array() + 1.0;
    EXPECT_NEAR(linear_r2(s, t), 1.0, 1e-12);
}

TEST(LinearR2, IndependentTargetNearZero) {
    const double r2 = linear_r2(gaussian(20000, 2, 1), gaussian(20000, 2, 2));
    EXPECT_LT(std::abs(r2), 2e-3);
}

TEST(LinearR2, UsesHeldOutHalf) {
    // Train half is noise-free, test half is pure noise: a train-only score
    // would be 1.
    Matrix s = gaussian(2000, 1, 3), t = s;
    t.bottomRows(1000) = gaussian(1000, 1, 4);
    EXPECT_LT(linear_r2(s, t), 0.1);
    EXPECT_THROW(linear_r2(gaussian(3, 1, 1), gaussian(3, 1, 1)), ParameterError);
}

TEST(Procrustes, RecoversRotation) {
    const Matrix z = gaussian(500, 2, 5);
    const ProcrustesResult r = procrustes(z * rotation90().transpose(), z);
    EXPECT_NEAR(r.error, 0.0, 1e-20);
    EXPECT_LT((r.rotation - rotation90()).cwiseAbs().maxCoeff(), 1e-12);
    const ProcrustesResult id = procrustes(z, z);
    EXPECT_LT((id.rotation - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(id.error, 0.0, 1e-20);
}

TEST(Procrustes, HermitePerturbationEnergy) {
    const double a = 0.2;
    const Matrix z = gaussian(400000, 2, 6);
    Matrix h = z;
    h.col(0).array() += a * (z.col(1).array().square() - 1.0) / std::sqrt(2.0);
    const ProcrustesResult r = procrustes(h, z);
    EXPECT_NEAR(r.error, a * a, 0.02 * a * a);
}

TEST(Procrustes, ResultIsOrthogonal) {
    const Matrix z = gaussian(300, 5, 7);
    const Matrix h = z.array().tanh() + 0.3 * gaussian(300, 5, 8).array();
    const ProcrustesResult r = procrustes(h, z);
    EXPECT_LT((r.rotation.transpose() * r.rotation - Matrix::Identity(5, 5)).norm(), 1e-10);
}

TEST(Procrustes, ZeroCrossCovarianceIsDegenerate) {
    const ProcrustesResult r = procrustes(Matrix::Zero(10, 3), gaussian(10, 3, 1));
    EXPECT_TRUE(r.degenerate);
    EXPECT_EQ((r.rotation - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Procrustes, BeatsRandomRotations) {
    for (std::uint64_t inst = 0; inst < 5; ++inst) {
        const Matrix z = gaussian(400, 3, 20 + inst);
        const Matrix h = z + 0.5 * z.array().square().matrix() + 0.1 * gaussian(400, 3, 40 + inst);
        const ProcrustesResult best = procrustes(h, z);
        Generator g(inst, Stream::eval);
        for (int k = 0; k < 100; ++k) {
            const Matrix q = random_orthogonal(3, g);
            const double err = (h - z * q.transpose()).rowwise().squaredNorm().mean();
            EXPECT_LE(best.error, err + 1e-12);
        }
    }
}

TEST(Procrustes, LinearPlusOrthogonalResidualDecomposition) {
    const Eigen::Index rows = 5000;
    const Matrix z = whiten(gaussian(rows, 3, 9));
    Generator g(3, Stream::eval);
    const Matrix m = random_orthogonal(3, g) * Vector(Vector::LinSpaced(3, 0.7, 1.3)).asDiagonal();
    const Matrix table = hermite_table(z, 2)[2];
    // Project the residual off z so it is exactly orthogonal on the sample.
    Matrix resid = 0.3 * table;
    resid -= z * (z.transpose() * resid) / static_cast<double>(rows);
    const Matrix h = z * m.transpose() + resid;
    const ProcrustesResult r = procrustes(h, z);
    const double w_nl = resid.rowwise().squaredNorm().mean();
    EXPECT_NEAR(r.error, (m - r.rotation).squaredNorm() + w_nl, 1e-8);
}

TEST(OrthogonalityError, Examples) {
    Generator g(1, Stream::eval);
    EXPECT_NEAR(orthogonality_error(random_orthogonal(6, g)), 0.0, 1e-14);
    EXPECT_NEAR(orthogonality_error(2.0 * Matrix::Identity(4, 4)), 3.0, 1e-14);
}

TEST(BoundAudit, ArithmeticExamples) {
    EXPECT_EQ(recovery_bound(0.0, 0.0), 0.0);
    const double d = d_term_from(0.1, 0.5);
    EXPECT_NEAR(d, 0.2, 1e-15);
    EXPECT_NEAR(recovery_bound(0.1, d), 0.29, 1e-15);
    EXPECT_THROW(d_term_from(0.1, 1.0), ParameterError);
}

TEST(BoundAudit, IdentityEncoderPasses) {
    const double rho = 0.9;
    const LatentBatch z = sample_latents(5000, 2, LatentDistribution::gaussian(), 11);
    const PairBatch p = ou_pair(z, broadcast_rho(rho, 2), 12);
    const double align = (p.z.data - p.z_prime.data).rowwise().squaredNorm().mean();
    const BoundAudit a = bound_audit(p.z.data, p.z_prime.data, p.z.data, rho, align, 1);
    EXPECT_GE(a.delta_gap, 0.0);
    EXPECT_LT(a.eps_whitening, 0.1);
    EXPECT_NEAR(a.procrustes_error, 0.0, 1e-20);
    EXPECT_TRUE(a.passed);
    EXPECT_EQ(a.bound_value, recovery_bound(a.eps_whitening, d_term_from(a.delta_gap, rho)));
}

TEST(BoundAudit, NonlinearEncoderWithSmallBoundFails) {
    // A nonlinear but whitened-looking map with a tiny claimed loss: the
    // bound is small while the Procrustes error is large.
    const double rho = 0.9;
    const LatentBatch z = sample_latents(4000, 2, LatentDistribution::gaussian(), 13);
    const PairBatch p = ou_pair(z, broadcast_rho(rho, 2), 14);
    const MixingSpec spiral = make_mixing(MixingKind::spiral);
    const Matrix y = apply_mixing(spiral, p.z.data), yp = apply_mixing(spiral, p.z_prime.data);
    const BoundAudit a = bound_audit(y, yp, p.z.data, rho, 0.0, 2);
    EXPECT_EQ(a.delta_gap, 0.0);
    EXPECT_FALSE(a.passed);
}

TEST(BoundAudit, RejectsMismatchedShapes) {
    EXPECT_THROW(bound_audit(gaussian(10, 2, 1), gaussian(11, 2, 1), gaussian(10, 2, 1), 0.5, 0.1), ParameterError);
    EXPECT_THROW(bound_audit(gaussian(10, 2, 1), gaussian(10, 2, 1), gaussian(10, 3, 1), 0.5, 0.1), ParameterError);
}

TEST(EvalReport, RecomputedBoundIsBitStable) {
    EvalReport r;
    r.rho = 0.95;
    r.eps_whitening = 0.0123456789;
    r.delta_gap = 0.00042;
    r.d_term = d_term_from(r.delta_gap, r.rho);
    r.bound_value = recovery_bound(r.eps_whitening, r.d_term);
    EXPECT_EQ(r.recomputed_bound(), r.bound_value);
}

TEST(Aggregate, EmptyAndSingle) {
    EXPECT_TRUE(aggregate_reports({}).table.empty());
    EvalReport r;
    r.run_id = "a";
    r.method = "sigreg";
    r.r2_h_to_z = 0.97;
    r.final_align = 0.3;
    r.final_reg = 1.2;
    const AggregateSummary s = aggregate_reports({r});
    ASSERT_EQ(s.table.size(), 1u);
    EXPECT_EQ(s.table[0].run_id, "a");
    EXPECT_EQ(s.table[0].final_align, 0.3);
    EXPECT_EQ(s.table[0].r2_h_to_z, 0.97);
}

TEST(Aggregate, FiltersUnconvergedAndCorrelates) {
    std::vector<EvalReport> rs;
    for (int i = 0; i < 6; ++i) {
        EvalReport r;
        r.run_id = std::to_string(i);
        r.r2_h_to_z = 0.91 + 0.01 * i;
        r.final_align = 1.0 - 0.1 * i;
        rs.push_back(r);
    }
    rs[2].diverged = true;
    EvalReport bad;
    bad.r2_h_to_z = 0.5;
    rs.push_back(bad);
    const AggregateSummary s = aggregate_reports(rs);
    EXPECT_EQ(s.table.size(), 5u);
    EXPECT_NEAR(s.spearman_align_r2, -1.0, 1e-12);
}

TEST(Spearman, TiesAndDegenerateInput) {
    EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-15);
    const auto r = ranks({5.0, 1.0, 5.0, 2.0});
    EXPECT_EQ(r, (std::vector<double>{3.5, 1.0, 3.5, 2.0}));
    EXPECT_TRUE(std::isnan(spearman({1.0}, {2.0})));
    EXPECT_TRUE(std::isnan(spearman({1, 1, 1}, {1, 2, 3})));
}

TEST(ResultsCsv, HeaderAndRowShape) {
    std::ostringstream os;
    write_results_header(os);
    EvalReport r;
    r.run_id = "run7";
    r.bound_pass = true;
    write_results_row(os, r);
    std::istringstream is(os.str());
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    EXPECT_EQ(header.substr(0, 18), "run_id,seed,config");
    const auto commas = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
    EXPECT_EQ(commas(header), static_cast<long>(report_columns().size()) - 1);
    EXPECT_EQ(commas(row), commas(header));
    EXPECT_EQ(row.substr(0, 5), "run7,");
    EXPECT_EQ(to_json(r).at("bound_pass"), true);
}

TEST(ResultsCsv, ReadBackRoundTrips) {
    std::vector<EvalReport> rs(2);
    rs[0].run_id = "a";
    rs[0].seed = 18446744073709551615ull;
    rs[0].lambda = 1e-3;
    rs[0].r2_h_to_z = 0.1234567890123456789;
    rs[0].bound_pass = true;
    rs[0].diverged_step = -1;
    rs[1].run_id = "b";
    rs[1].method = "vicreg";
    rs[1].final_total = std::nan("");
    rs[1].diverged = true;
    rs[1].diverged_step = 17;
    const std::string path = (std::filesystem::temp_directory_path() / "idlab_results_rt.csv").string();
    write_results_csv(path, rs);
    const auto back = read_results_csv(path);
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        std::ostringstream a, b;
        write_results_row(a, rs[i]);
        write_results_row(b, back[i]);
        EXPECT_EQ(a.str(), b.str());
    }
    EXPECT_EQ(back[0].seed, rs[0].seed);
    EXPECT_TRUE(std::isnan(back[1].final_total));
    std::filesystem::remove(path);
    EXPECT_THROW(read_results_csv(path), ParameterError);
}
