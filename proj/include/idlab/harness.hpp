#pragma once

// Experiment orchestration: configs, the training loop, evaluation, seeded
// sweeps and plot-data export.

#include "idlab/common.hpp"
#include "idlab/eval.hpp"
#include "idlab/linalg.hpp"
#include "idlab/losses.hpp"
#include "idlab/mixing.hpp"
#include "idlab/nn.hpp"
#include "idlab/planning.hpp"
#include "idlab/rng.hpp"
#include "idlab/spectral.hpp"
#include "idlab/world.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace idlab {

enum class Channel { ou, copula, mixture };

inline std::string to_string(Channel c) {
    switch (c) {
        case Channel::ou: return "ou";
        case Channel::copula: return "copula";
        case Channel::mixture: return "mixture";
    }
    return "?";
}

inline Channel channel_from_string(const std::string& s) {
    if (s == "ou") return Channel::ou;
    if (s == "copula") return Channel::copula;
    if (s == "mixture") return Channel::mixture;
    throw ParameterError("unknown channel: " + s);
}

struct Seeds {
    std::uint64_t data = 0;
    std::uint64_t init = 0;
    std::uint64_t slices = 0;
    std::uint64_t eval = 0;
};

struct TrainConfig {
    std::string run_id = "run";
    MixingSpec mixing = make_mixing(MixingKind::spiral);
    LatentDistribution dist = LatentDistribution::gaussian();
    Channel channel = Channel::ou;
    Vector rho = broadcast_rho(0.95, 2);
    LossConfig loss;
    Arch arch = Arch::mlp;
    int hidden = 256;      ///< mlp width
    int coupling_width = kCouplingHidden;  ///< conditioner width of the coupling encoder
    int mlp_layers = 4;    ///< number of linear layers
    long steps = 20000;
    long warmup = 10000;
    int batch = 256;
    double lr_base = 3e-3;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    Seeds seeds;
    int eval_count = 10000;
    int restarts = 1;      ///< best-of-K by final loss
    int log_every = 1;

    int dim() const { return mixing.dim; }

    void validate() const {
        mixing.validate();
        dist.validate();
        validate_rho(rho, mixing.dim);
        loss.validate();
        require(steps >= 0, "steps must be non-negative");
        require(warmup >= 0 && warmup <= std::max(steps, 0L), "warmup must lie in [0, steps]");
        require(batch >= 8, "batch must be >= 8");
        require(lr_base > 0.0, "lr_base must be positive");
        require(weight_decay >= 0.0, "weight_decay must be non-negative");
        require(clip_norm > 0.0, "clip_norm must be positive");
        require(eval_count >= 16, "eval_count must be >= 16");
        require(restarts >= 1, "restarts must be >= 1");
        require(log_every >= 1, "log_every must be >= 1");
        require(hidden >= 1 && mlp_layers >= 1, "mlp shape must be positive");
        require(coupling_width >= 1, "coupling_width must be positive");
        if (arch == Arch::coupling_inverse)
            require(mixing.kind == MixingKind::coupling, "coupling_inverse encoder needs a coupling mixing");
        if (channel == Channel::ou)
            require(dist.is_gaussian(), "the OU channel is only stationary for Gaussian latents");
    }
};

// ---- presets ------------------------------------------------------------------

/// Full-scale 2-D defaults.
inline TrainConfig full_preset(MixingKind kind = MixingKind::spiral) {
    TrainConfig c;
    c.mixing = make_mixing(kind);
    c.run_id = to_string(kind);
    return c;
}

/// Desk-scale 2-D defaults: shorter schedule, narrower MLP.
inline TrainConfig desk_preset(MixingKind kind = MixingKind::spiral) {
    TrainConfig c = full_preset(kind);
    c.steps = 4000;
    c.warmup = 2000;
    c.hidden = 64;
    c.log_every = 10;
    return c;
}

/// Matched coupling encoder on an N-dimensional coupling mixing.
inline TrainConfig scaling_preset(int dim, bool desk = true, std::uint64_t param_seed = 3) {
    TrainConfig c = desk ? desk_preset() : full_preset();
    c.mixing = build_coupling_mixing(dim, 4, param_seed);
    c.rho = broadcast_rho(0.95, dim);
    c.arch = Arch::coupling_inverse;
    c.restarts = dim <= 32 ? 3 : 1;
    c.run_id = "coupling" + std::to_string(dim);
    return c;
}

/// Per-method loss settings used by the sweeps.
inline LossConfig method_loss(LossKind kind, int dim = 2) {
    LossConfig l;
    l.kind = kind;
    switch (kind) {
        case LossKind::sigreg:
            l.lambda = 1e-3;
            l.n_slices = dim <= 2 ? 16 : std::min(4 * dim, 256);
            break;
        case LossKind::vicreg:
            l.lambda = 0.5;
            break;
        case LossKind::infonce:
            l.lambda = 0.0;
            l.sigma = 1.0;
            break;
    }
    return l;
}

// ---- config serialization ---------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json rho = nlohmann::json::array();
    for (Eigen::Index i = 0; i < c.rho.size(); ++i) rho.push_back(c.rho(i));
    return nlohmann::json{
        {"run_id", c.run_id},
        {"mixing",
         {{"kind", to_string(c.mixing.kind)},
          {"dim", c.mixing.dim},
          {"layers", c.mixing.layers},
          {"param_seed", c.mixing.param_seed}}},
        {"dist", {{"kind", c.dist.is_gaussian() ? "gaussian" : "gennorm"}, {"alpha", c.dist.alpha}}},
        {"channel", to_string(c.channel)},
        {"rho", rho},
        {"loss",
         {{"kind", to_string(c.loss.kind)},
          {"lambda", c.loss.lambda},
          {"n_slices", c.loss.n_slices},
          {"sigma", c.loss.sigma},
          {"variance_w", c.loss.vic_weights.variance},
          {"covariance_w", c.loss.vic_weights.covariance},
          {"vic_eps", c.loss.vic_eps},
          {"sigreg_gain", c.loss.sigreg_gain}}},
        {"arch", to_string(c.arch)},
        {"hidden", c.hidden},
        {"coupling_width", c.coupling_width},
        {"mlp_layers", c.mlp_layers},
        {"steps", c.steps},
        {"warmup", c.warmup},
        {"batch", c.batch},
        {"lr_base", c.lr_base},
        {"weight_decay", c.weight_decay},
        {"clip_norm", c.clip_norm},
        {"seeds", {{"data", c.seeds.data}, {"init", c.seeds.init}, {"slices", c.seeds.slices}, {"eval", c.seeds.eval}}},
        {"eval_count", c.eval_count},
        {"restarts", c.restarts},
        {"log_every", c.log_every}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.run_id = j.at("run_id").get<std::string>();
    const auto& m = j.at("mixing");
    c.mixing = make_mixing(mixing_kind_from_string(m.at("kind").get<std::string>()), m.at("dim").get<int>(),
                           m.at("layers").get<int>(), m.at("param_seed").get<std::uint64_t>());
    const auto& d = j.at("dist");
    const std::string dk = d.at("kind").get<std::string>();
    require(dk == "gaussian" || dk == "gennorm", "unknown dist kind: " + dk);
    c.dist = dk == "gaussian" ? LatentDistribution::gaussian() : LatentDistribution::gennorm(d.at("alpha").get<double>());
    c.channel = channel_from_string(j.at("channel").get<std::string>());
    const auto rho = j.at("rho").get<std::vector<double>>();
    c.rho = Eigen::Map<const Vector>(rho.data(), static_cast<Eigen::Index>(rho.size()));
    const auto& l = j.at("loss");
    c.loss.kind = loss_kind_from_string(l.at("kind").get<std::string>());
    c.loss.lambda = l.at("lambda").get<double>();
    c.loss.n_slices = l.at("n_slices").get<int>();
    c.loss.sigma = l.at("sigma").get<double>();
    c.loss.vic_weights.variance = l.at("variance_w").get<double>();
    c.loss.vic_weights.covariance = l.at("covariance_w").get<double>();
    c.loss.vic_eps = l.at("vic_eps").get<double>();
    c.loss.sigreg_gain = l.at("sigreg_gain").get<double>();
    c.arch = arch_from_string(j.at("arch").get<std::string>());
    c.hidden = j.at("hidden").get<int>();
    c.coupling_width = j.at("coupling_width").get<int>();
    c.mlp_layers = j.at("mlp_layers").get<int>();
    c.steps = j.at("steps").get<long>();
    c.warmup = j.at("warmup").get<long>();
    c.batch = j.at("batch").get<int>();
    c.lr_base = j.at("lr_base").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.clip_norm = j.at("clip_norm").get<double>();
    const auto& s = j.at("seeds");
    c.seeds = {s.at("data").get<std::uint64_t>(), s.at("init").get<std::uint64_t>(),
               s.at("slices").get<std::uint64_t>(), s.at("eval").get<std::uint64_t>()};
    c.eval_count = j.at("eval_count").get<int>();
    c.restarts = j.at("restarts").get<int>();
    c.log_every = j.at("log_every").get<int>();
    c.validate();
    return c;
}

/// Canonical text form: keys sorted, two-space indent.
inline std::string serialize_config(const TrainConfig& c) { return to_json(c).dump(2) + "\n"; }

inline TrainConfig parse_config(const std::string& text) { return config_from_json(nlohmann::json::parse(text)); }

/// FNV-1a 64 of the canonical text, as 16 hex digits.
inline std::string config_hash(const TrainConfig& c) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : serialize_config(c)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---- data -----------------------------------------------------------------------

inline PairBatch make_pairs(const TrainConfig& c, Eigen::Index count, std::uint64_t latent_seed,
                            std::uint64_t noise_seed) {
    LatentBatch z = sample_latents(count, c.dim(), c.dist, latent_seed);
    PairBatch p;
    switch (c.channel) {
        case Channel::ou: p = ou_pair(z, c.rho, noise_seed); break;
        case Channel::copula: p = copula_pair(z, c.dist, c.rho, noise_seed); break;
        case Channel::mixture:
            require((c.rho.array() == c.rho(0)).all(), "the mixture channel takes a scalar rho");
            p = additive_pair(z, c.dist, c.rho(0), noise_seed);
            break;
    }
    p.x = apply_mixing(c.mixing, p.z.data);
    p.x_prime = apply_mixing(c.mixing, p.z_prime.data);
    return p;
}

/// The fixed evaluation pairs of a config.
inline PairBatch eval_pairs(const TrainConfig& c) {
    return make_pairs(c, c.eval_count, derive_seed(c.seeds.eval, Stream::eval, 0),
                      derive_seed(c.seeds.eval, Stream::eval, 1));
}

/// A frame library drawn from the config's world, embedded by the given encoder.
inline RetrievalLibrary build_library(const TrainConfig& c, const EncoderModel& m, Eigen::Index count,
                                      std::uint64_t seed) {
    RetrievalLibrary lib;
    lib.latents = sample_latents(count, c.dim(), c.dist, derive_seed(seed, Stream::planning, 0)).data;
    lib.observations = apply_mixing(c.mixing, lib.latents);
    lib.embeddings = encode(m, lib.observations);
    return lib;
}

/// The same library with the true latents as embeddings.
inline RetrievalLibrary oracle_library(RetrievalLibrary lib) {
    lib.embeddings = lib.latents;
    return lib;
}

inline EncoderModel init_model(const TrainConfig& c, std::uint64_t init_seed) {
    if (c.arch == Arch::coupling_inverse) return make_coupling_encoder(c.dim(), c.mixing.layers, init_seed, c.coupling_width);
    std::vector<int> dims{c.dim()};
    for (int k = 0; k + 1 < c.mlp_layers; ++k) dims.push_back(c.hidden);
    dims.push_back(c.dim());
    return make_mlp(dims, init_seed);
}

// ---- training -------------------------------------------------------------------

struct LogRow {
    long step = 0;
    double lr = 0.0;
    double total = 0.0;
    double align = 0.0;
    double reg = 0.0;
    double grad_norm = 0.0;
};

inline void write_training_log(std::ostream& os, const std::vector<LogRow>& log) {
    os << "step,lr,total,align,reg,grad_norm\n";
    os.precision(10);
    for (const auto& r : log)
        os << r.step << ',' << r.lr << ',' << r.total << ',' << r.align << ',' << r.reg << ',' << r.grad_norm << '\n';
}

/// Pre-clip gradient norms below this count as vanished.
inline constexpr double kUnderflowGradNorm = 1e-8;

struct TrainResult {
    EncoderModel model;
    std::vector<LogRow> log;
    EvalReport report;
};

namespace detail {

struct LossValues {
    double total = 0.0, align = 0.0, reg = 0.0;
};

/// Loss on the eval outputs, averaged over batch-sized chunks so batch-scaled
/// statistics stay on the training scale.
inline LossValues chunked_loss(const TrainConfig& c, const Matrix& y, const Matrix& yp) {
    LossValues out;
    const Eigen::Index b = c.batch;
    int chunks = 0;
    const Generator slices(c.seeds.slices, Stream::eval);
    for (Eigen::Index r = 0; r + b <= y.rows(); r += b, ++chunks) {
        Tape t;
        const LossParts p = total_loss(t, c.loss, t.constant(y.middleRows(r, b)), t.constant(yp.middleRows(r, b)),
                                       slices.substream(static_cast<std::uint64_t>(chunks)));
        out.total += t.scalar(p.total);
        out.align += t.scalar(p.align);
        out.reg += t.scalar(p.reg);
    }
    if (chunks > 0) {
        out.total /= chunks;
        out.align /= chunks;
        out.reg /= chunks;
    }
    return out;
}

inline void fill_eval(const TrainConfig& c, const EncoderModel& model, const PairBatch& ev, EvalReport& r) {
    const Matrix& z = ev.z.data;
    const Matrix h = encode(model, *ev.x);
    const Matrix hp = encode(model, *ev.x_prime);
    require(h.allFinite() && hp.allFinite(), "encoder produced non-finite outputs");
    r.r2_h_to_z = linear_r2(h, z);
    r.r2_z_to_h = linear_r2(z, h);

    const Eigen::Index train = z.rows() / 2, test = z.rows() - train;
    const LinearFit zh = ols_fit(z.topRows(train), h.topRows(train));
    r.orth_error = orthogonality_error(zh.weights.transpose());

    const Matrix yt = h.bottomRows(test), ypt = hp.bottomRows(test), zt = z.bottomRows(test);
    r.eval_align = (yt - ypt).rowwise().squaredNorm().mean();
    const BoundAudit a = bound_audit(yt, ypt, zt, c.rho.mean(), r.eval_align, c.seeds.eval);
    r.eps_whitening = a.eps_whitening;
    r.delta_gap = a.delta_gap;
    r.delta_gap_n = a.delta_gap_n;
    r.d_term = a.d_term;
    r.bound_value = a.bound_value;
    r.procrustes_error = a.procrustes_error;
    r.bound_slack = a.slack;
    r.bound_pass = a.passed;

    // Whitening map fitted on the first split, applied to the held-out one.
    const Matrix top = h.topRows(train);
    const Matrix w = inverse_sqrt_spd(covariance(top));
    const Vector d = ((yt - ypt) * w).rowwise().squaredNorm();
    r.whitened_align = d.mean();
    r.whitened_align_se =
        std::sqrt((d.array() - d.mean()).square().sum() / static_cast<double>(d.size() - 1) / static_cast<double>(d.size()));

    const LossValues lv = chunked_loss(c, h, hp);
    r.final_total = lv.total;
    r.final_align = lv.align;
    r.final_reg = lv.reg;
}

inline EvalReport report_header(const TrainConfig& c) {
    EvalReport r;
    r.run_id = c.run_id;
    r.seed = c.seeds.data;
    r.config_hash = config_hash(c);
    r.method = to_string(c.loss.kind);
    r.mixing = to_string(c.mixing.kind);
    r.dist = c.dist.is_gaussian() ? "gaussian" : "gennorm";
    r.alpha = c.dist.is_gaussian() ? 2.0 : c.dist.alpha;
    r.dim = c.dim();
    r.lambda = c.loss.lambda;
    r.rho = c.rho.mean();
    r.steps = c.steps;
    r.restarts = c.restarts;
    return r;
}

/// One training run from one initialization.
inline TrainResult train_once(const TrainConfig& c, std::uint64_t init_seed, const PairBatch& ev) {
    TrainResult out;
    out.model = init_model(c, init_seed);
    OptimizerState opt;
    opt.lr_base = c.lr_base;
    opt.weight_decay = c.weight_decay;
    const Generator slices(c.seeds.slices, Stream::slices);
    double min_norm = std::numeric_limits<double>::infinity();
    for (long step = 0; step < c.steps; ++step) {
        const auto s = static_cast<std::uint64_t>(step);
        const PairBatch p = make_pairs(c, c.batch, derive_seed(c.seeds.data, Stream::latents, s),
                                       derive_seed(c.seeds.data, Stream::noise, s));
        Tape t;
        const BoundParams bp = bind_params(t, out.model);
        const Var y = encoder_forward(t, out.model, bp, t.constant(*p.x));
        const Var yp = encoder_forward(t, out.model, bp, t.constant(*p.x_prime));
        const LossParts parts = total_loss(t, c.loss, y, yp, slices.substream(s));
        const double total = t.scalar(parts.total);
        if (!std::isfinite(total)) throw TrainingDivergence("non-finite loss", step);
        t.backward(parts.total);
        Vector g = gather_grads(t, out.model, bp);
        if (!g.allFinite()) throw TrainingDivergence("non-finite gradient", step);
        const double norm = clip_gradients(g, c.clip_norm);
        min_norm = std::min(min_norm, norm);
        const double lr = lr_at(step, c.steps, c.warmup, c.lr_base);
        adamw_step(opt, out.model.params, g, lr);
        if (step % c.log_every == 0 || step + 1 == c.steps)
            out.log.push_back({step, lr, total, t.scalar(parts.align), t.scalar(parts.reg), norm});
    }
    out.report = report_header(c);
    out.report.min_grad_norm = std::isfinite(min_norm) ? min_norm : 0.0;
    out.report.underflow = c.steps > 0 && min_norm < kUnderflowGradNorm;
    fill_eval(c, out.model, ev, out.report);
    return out;
}

}  // namespace detail

/// Full loop: online pairs, mix, encode both views, loss, clip, AdamW, schedule,
/// then evaluation on the fixed eval set. With restarts > 1 the run with the
/// lowest final eval loss is kept. Divergence throws TrainingDivergence.
inline TrainResult run_training(const TrainConfig& c) {
    c.validate();
    const PairBatch ev = eval_pairs(c);
    TrainResult best;
    for (int k = 0; k < c.restarts; ++k) {
        const std::uint64_t init = k == 0 ? c.seeds.init : derive_seed(c.seeds.init, Stream::init, static_cast<std::uint64_t>(k));
        TrainResult r = detail::train_once(c, init, ev);
        if (k == 0 || r.report.final_total < best.report.final_total) best = std::move(r);
    }
    return best;
}

/// Like run_training, but a divergence becomes a flagged report.
inline EvalReport run_or_flag(const TrainConfig& c) {
    try {
        return run_training(c).report;
    } catch (const TrainingDivergence& e) {
        EvalReport r = detail::report_header(c);
        r.diverged = true;
        r.diverged_step = e.step();
        return r;
    }
}

// ---- sweeps ---------------------------------------------------------------------

using ProgressFn = std::function<void(const EvalReport&)>;

namespace detail {
inline std::string fmt_num(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}
inline void set_seed(TrainConfig& c, std::uint64_t s) { c.seeds.data = c.seeds.init = c.seeds.slices = s; }
}  // namespace detail

/// lambda x rho x seed. The eval seed stays that of `base`.
inline std::vector<EvalReport> run_grid_sweep(const std::vector<double>& lambdas, const std::vector<double>& rhos,
                                              const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                                              const ProgressFn& progress = {}) {
    std::vector<EvalReport> out;
    for (double lam : lambdas)
        for (double rho : rhos)
            for (std::uint64_t s : seeds) {
                TrainConfig c = base;
                c.loss.lambda = lam;
                c.rho = broadcast_rho(rho, c.dim());
                detail::set_seed(c, s);
                c.run_id = "grid_" + to_string(c.mixing.kind) + "_l" + detail::fmt_num(lam) + "_r" +
                           detail::fmt_num(rho) + "_s" + std::to_string(s);
                out.push_back(run_or_flag(c));
                if (progress) progress(out.back());
            }
    return out;
}

/// Coupling mixing of each dimension with the matched encoder, per method.
/// `base` supplies the schedule; mixing, encoder and rho length follow dim.
inline std::vector<EvalReport> run_scaling_sweep(const std::vector<int>& dims, const std::vector<LossKind>& methods,
                                                 const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                                                 const ProgressFn& progress = {}) {
    std::vector<EvalReport> out;
    for (int n : dims)
        for (LossKind m : methods)
            for (std::uint64_t s : seeds) {
                TrainConfig c = base;
                c.mixing = build_coupling_mixing(n, base.mixing.kind == MixingKind::coupling ? base.mixing.layers : 4,
                                                 base.mixing.kind == MixingKind::coupling ? base.mixing.param_seed : 3);
                c.arch = Arch::coupling_inverse;
                c.rho = broadcast_rho(base.rho.mean(), n);
                c.loss = method_loss(m, n);
                c.restarts = n <= 32 ? 3 : 1;
                detail::set_seed(c, s);
                c.run_id = "scaling_" + to_string(m) + "_n" + std::to_string(n) + "_s" + std::to_string(s);
                out.push_back(run_or_flag(c));
                if (progress) progress(out.back());
            }
    return out;
}

/// Generalized-normal latents of each shape, per method, on base's mixing.
/// Pairs come from the copula channel, which is the OU channel at alpha = 2.
inline std::vector<EvalReport> run_gennorm_sweep(const std::vector<double>& alphas, const std::vector<LossKind>& methods,
                                                 const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                                                 const ProgressFn& progress = {}) {
    std::vector<EvalReport> out;
    for (double a : alphas)
        for (LossKind m : methods)
            for (std::uint64_t s : seeds) {
                TrainConfig c = base;
                c.dist = LatentDistribution::gennorm(a);
                c.channel = Channel::copula;
                c.loss = method_loss(m, c.dim());
                detail::set_seed(c, s);
                c.run_id = "gennorm_" + to_string(m) + "_a" + detail::fmt_num(a) + "_s" + std::to_string(s);
                out.push_back(run_or_flag(c));
                if (progress) progress(out.back());
            }
    return out;
}

// ---- plot data --------------------------------------------------------------------

enum class PlotKind { grid_heatmap, bound_scatter, gennorm_curve, loss_vs_r2 };

inline std::string to_string(PlotKind k) {
    switch (k) {
        case PlotKind::grid_heatmap: return "grid_heatmap";
        case PlotKind::bound_scatter: return "bound_scatter";
        case PlotKind::gennorm_curve: return "gennorm_curve";
        case PlotKind::loss_vs_r2: return "loss_vs_r2";
    }
    return "?";
}

inline PlotKind plot_kind_from_string(const std::string& s) {
    for (PlotKind k : {PlotKind::grid_heatmap, PlotKind::bound_scatter, PlotKind::gennorm_curve, PlotKind::loss_vs_r2})
        if (to_string(k) == s) return k;
    throw ParameterError("unknown plot kind: " + s);
}

/// Writes <out_dir>/<kind>.csv and returns its path. Schemas:
///   grid_heatmap:  lambda,rho,seed,r2_h_to_z,orth_error
///   bound_scatter: run_id,method,bound_value,procrustes_error,bound_slack,eps_whitening,delta_gap
///   gennorm_curve: method,alpha,seed,r2_h_to_z,orth_error
///   loss_vs_r2:    run_id,method,final_total,final_align,final_reg,r2_h_to_z
inline std::string export_plot_data(const std::vector<EvalReport>& results, PlotKind kind, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const std::string path = (std::filesystem::path(out_dir) / (to_string(kind) + ".csv")).string();
    std::ofstream os(path);
    require(static_cast<bool>(os), "cannot open " + path);
    os.precision(17);
    switch (kind) {
        case PlotKind::grid_heatmap:
            os << "lambda,rho,seed,r2_h_to_z,orth_error\n";
            for (const auto& r : results)
                os << r.lambda << ',' << r.rho << ',' << r.seed << ',' << r.r2_h_to_z << ',' << r.orth_error << '\n';
            break;
        case PlotKind::bound_scatter:
            os << "run_id,method,bound_value,procrustes_error,bound_slack,eps_whitening,delta_gap\n";
            for (const auto& r : results)
                os << r.run_id << ',' << r.method << ',' << r.bound_value << ',' << r.procrustes_error << ','
                   << r.bound_slack << ',' << r.eps_whitening << ',' << r.delta_gap << '\n';
            break;
        case PlotKind::gennorm_curve:
            os << "method,alpha,seed,r2_h_to_z,orth_error\n";
            for (const auto& r : results)
                os << r.method << ',' << r.alpha << ',' << r.seed << ',' << r.r2_h_to_z << ',' << r.orth_error << '\n';
            break;
        case PlotKind::loss_vs_r2:
            os << "run_id,method,final_total,final_align,final_reg,r2_h_to_z\n";
            for (const auto& r : results)
                os << r.run_id << ',' << r.method << ',' << r.final_total << ',' << r.final_align << ','
                   << r.final_reg << ',' << r.r2_h_to_z << '\n';
            break;
    }
    return path;
}

// ---- audits ---------------------------------------------------------------------

struct MehlerRow {
    double rho = 0.0;
    int k = 0, j = 0;
    double estimate = 0.0, standard_error = 0.0, exact = 0.0;

    bool passed() const { return std::abs(estimate - exact) <= 3.0 * standard_error; }
};

/// Mehler cross-moments for every (k, j) up to max_degree at each rho.
inline std::vector<MehlerRow> mehler_grid(const std::vector<double>& rhos, int max_degree, Eigen::Index samples,
                                          std::uint64_t seed) {
    std::vector<MehlerRow> out;
    std::uint64_t idx = 0;
    for (double rho : rhos) {
        // One sample per rho, shared across degrees.
        const LatentBatch z = sample_latents(samples, 1, LatentDistribution::gaussian(), derive_seed(seed, Stream::eval, idx++));
        const PairBatch p = ou_pair(z, broadcast_rho(rho, 1), derive_seed(seed, Stream::eval, idx++));
        const auto hz = hermite_table(p.z.data, max_degree), hzp = hermite_table(p.z_prime.data, max_degree);
        for (int k = 0; k <= max_degree; ++k)
            for (int j = 0; j <= max_degree; ++j) {
                const MonteCarloEstimate e = mean_and_se(hzp[static_cast<std::size_t>(k)].col(0).cwiseProduct(
                    hz[static_cast<std::size_t>(j)].col(0)));
                // Degree 0 against itself is exactly 1 with zero variance.
                out.push_back({rho, k, j, e.estimate, e.standard_error, k == j ? std::pow(rho, k) : 0.0});
            }
    }
    return out;
}

struct BoundTally {
    int converged = 0;
    int passed = 0;

    double rate() const { return converged == 0 ? 0.0 : static_cast<double>(passed) / converged; }
};

inline BoundTally bound_tally(const std::vector<EvalReport>& results) {
    BoundTally t;
    for (const auto& r : results)
        if (r.converged()) {
            ++t.converged;
            t.passed += r.bound_pass;
        }
    return t;
}

/// Seed-averaged r2 by method and alpha.
inline std::map<std::string, std::map<double, double>> mean_r2_by_alpha(const std::vector<EvalReport>& results) {
    std::map<std::string, std::map<double, std::pair<double, int>>> acc;
    for (const auto& r : results) {
        auto& cell = acc[r.method][r.alpha];
        cell.first += r.diverged ? 0.0 : r.r2_h_to_z;
        ++cell.second;
    }
    std::map<std::string, std::map<double, double>> out;
    for (const auto& [m, by_alpha] : acc)
        for (const auto& [a, cell] : by_alpha) out[m][a] = cell.first / cell.second;
    return out;
}

/// True when every method's seed-averaged r2 at alpha = 2 strictly exceeds
/// its value at every other alpha.
inline bool gaussian_peak(const std::map<double, double>& by_alpha) {
    const auto g = by_alpha.find(2.0);
    if (g == by_alpha.end()) return false;
    for (const auto& [a, r2] : by_alpha)
        if (a != 2.0 && !(g->second > r2)) return false;
    return true;
}

struct SLRow {
    double alpha = 0.0;
    Vector eigenvalues;
    double affine_dev = 0.0;  ///< of the first non-constant eigenfunction
    double identity_cosine = 0.0;
};

inline SLRow sl_row(double alpha, double k_coef = 1.0, int grid_size = 4000, int count = 4) {
    const StandardGenNorm g(alpha);
    const auto [lo, hi] = gennorm_sl_domain(alpha);
    const SLSpectrum s = sl_first_eigenfunctions([&](double x) { return g.log_pdf(x); }, k_coef, grid_size, lo, hi, count);
    SLRow r;
    r.alpha = alpha;
    r.eigenvalues = s.eigenvalues;
    const Vector phi = s.eigenfunctions.col(1);
    r.affine_dev = affine_deviation(phi, s.grid, s.density);
    const Vector w = s.density;
    const double num = (w.array() * phi.array() * s.grid.array()).sum();
    const double den = std::sqrt((w.array() * phi.array().square()).sum() * (w.array() * s.grid.array().square()).sum());
    r.identity_cosine = std::abs(num) / den;
    return r;
}

/// LQR rotation residuals on random problems; seeds are consecutive from base_seed.
inline std::vector<std::tuple<std::uint64_t, int, LQRResiduals>> lqr_batch(int problems, int min_dim, int max_dim,
                                                                             std::uint64_t base_seed) {
    require(problems >= 1 && min_dim >= 1 && max_dim >= min_dim, "lqr_batch: bad range");
    std::vector<std::tuple<std::uint64_t, int, LQRResiduals>> out;
    for (int i = 0; i < problems; ++i) {
        const std::uint64_t s = base_seed + static_cast<std::uint64_t>(i);
        const int dim = min_dim + i % (max_dim - min_dim + 1);
        out.emplace_back(s, dim, lqr_rotation_check(random_lqr_problem(dim, s), 16, s));
    }
    return out;
}


}  // namespace idlab
