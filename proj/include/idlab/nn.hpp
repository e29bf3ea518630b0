#pragma once

// Encoders (MLP and matched inverse-coupling stack), AdamW, LR schedule,
// gradient clipping and checkpoints.

#include "idlab/common.hpp"
#include "idlab/mixing.hpp"
#include "idlab/rng.hpp"
#include "idlab/tape.hpp"
#include "idlab/world.hpp"

#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace idlab {

enum class Arch { mlp, coupling_inverse };

inline std::string to_string(Arch a) { return a == Arch::mlp ? "mlp" : "coupling_inverse"; }
inline Arch arch_from_string(const std::string& s) {
    if (s == "mlp") return Arch::mlp;
    if (s == "coupling_inverse") return Arch::coupling_inverse;
    throw ParameterError("unknown encoder arch: " + s);
}

struct ParamSlot {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    Eigen::Index size() const { return rows * cols; }
};

/// Flat parameter vector plus a name -> (offset, shape) table.
///
/// For Arch::mlp, `dims` lists layer widths {in, hidden..., out}.
/// For Arch::coupling_inverse, `dims` is {n, layers, conditioner width}.
struct EncoderModel {
    Arch arch = Arch::mlp;
    std::vector<int> dims;
    Vector params;
    std::vector<ParamSlot> layout;

    int input_dim() const { return dims.front(); }
    int output_dim() const { return arch == Arch::mlp ? dims.back() : dims.front(); }

    const ParamSlot& slot(const std::string& name) const {
        for (const auto& s : layout)
            if (s.name == name) return s;
        throw ParameterError("no parameter named " + name);
    }

    Eigen::Map<Matrix> view(const std::string& name) {
        const ParamSlot& s = slot(name);
        return {params.data() + s.offset, s.rows, s.cols};
    }
    Eigen::Map<const Matrix> view(const std::string& name) const {
        const ParamSlot& s = slot(name);
        return {params.data() + s.offset, s.rows, s.cols};
    }

    void validate() const {
        Eigen::Index total = 0;
        for (const auto& s : layout) {
            require(s.offset == total, "param layout is not contiguous");
            total += s.size();
        }
        require(total == params.size(), "param vector length does not match layout");
    }
};

namespace detail {
inline void add_slot(EncoderModel& m, std::string name, Eigen::Index rows, Eigen::Index cols) {
    const Eigen::Index off = m.layout.empty() ? 0 : m.layout.back().offset + m.layout.back().size();
    m.layout.push_back({std::move(name), off, rows, cols});
}
inline void finish_layout(EncoderModel& m) {
    const Eigen::Index n = m.layout.empty() ? 0 : m.layout.back().offset + m.layout.back().size();
    m.params = Vector::Zero(n);
}
/// Uniform +-sqrt(6 / (fan_in + fan_out)).
inline void glorot(Eigen::Map<Matrix> w, Generator& g) {
    const double a = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = a * (2.0 * g.uniform() - 1.0);
}
}  // namespace detail

/// Linear -> GELU -> ... -> Linear with Glorot-uniform weights and zero biases.
inline EncoderModel make_mlp(const std::vector<int>& dims, std::uint64_t init_seed) {
    require(dims.size() >= 2, "mlp needs at least input and output widths");
    for (int d : dims) require(d >= 1, "mlp widths must be positive");
    EncoderModel m{Arch::mlp, dims, {}, {}};
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
        detail::add_slot(m, "W" + std::to_string(k), dims[k], dims[k + 1]);
        detail::add_slot(m, "b" + std::to_string(k), 1, dims[k + 1]);
    }
    detail::finish_layout(m);
    Generator g(init_seed, Stream::init);
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) detail::glorot(m.view("W" + std::to_string(k)), g);
    return m;
}

/// Learnable mirror of build_coupling_mixing. Layer k undoes mixing layer
/// L-1-k: b <- (b - t(a)) * exp(-s(a)), then x <- M_k x. Initialised to the
/// identity map (M_k = I, zero output layers) with Glorot first layers.
inline EncoderModel make_coupling_encoder(int dim, int layers, std::uint64_t init_seed, int width = kCouplingHidden) {
    require(dim >= 2 && dim % 2 == 0, "coupling encoder requires even dim >= 2");
    require(layers >= 1, "coupling encoder requires layers >= 1");
    require(width >= 1, "coupling encoder width must be positive");
    EncoderModel m{Arch::coupling_inverse, {dim, layers, width}, {}, {}};
    const int half = dim / 2;
    for (int l = 0; l < layers; ++l) {
        const std::string p = std::to_string(l) + ".";
        for (const char* net : {"s", "t"}) {
            detail::add_slot(m, p + net + ".W1", half, width);
            detail::add_slot(m, p + net + ".b1", 1, width);
            detail::add_slot(m, p + net + ".W2", width, dim - half);
            detail::add_slot(m, p + net + ".b2", 1, dim - half);
        }
        detail::add_slot(m, p + "M", dim, dim);
    }
    detail::finish_layout(m);
    Generator g(init_seed, Stream::init);
    for (int l = 0; l < layers; ++l) {
        const std::string p = std::to_string(l) + ".";
        detail::glorot(m.view(p + "s.W1"), g);
        detail::glorot(m.view(p + "t.W1"), g);
        m.view(p + "M").setIdentity();
    }
    return m;
}

/// Encoder parameters that realise the analytic inverse of a coupling mixing.
inline EncoderModel coupling_encoder_from_mixing(const MixingSpec& spec) {
    require(spec.kind == MixingKind::coupling, "coupling_encoder_from_mixing: not a coupling mixing");
    EncoderModel m = make_coupling_encoder(spec.dim, spec.layers, 0);
    for (int k = 0; k < spec.layers; ++k) {
        const CouplingLayer& layer = spec.coupling[static_cast<std::size_t>(spec.layers - 1 - k)];
        const std::string p = std::to_string(k) + ".";
        for (auto [net, src] : {std::pair{"s", &layer.scale}, std::pair{"t", &layer.shift}}) {
            m.view(p + net + ".W1") = src->w1;
            m.view(p + net + ".b1") = src->b1;
            m.view(p + net + ".W2") = src->w2;
            m.view(p + net + ".b2") = src->b2;
        }
        m.view(p + "M") = layer.rotation.transpose();
    }
    return m;
}

/// Parameter leaves bound on a tape, one per layout slot.
struct BoundParams {
    std::vector<Var> vars;
    const EncoderModel* model = nullptr;

    Var operator[](const std::string& name) const {
        for (std::size_t i = 0; i < model->layout.size(); ++i)
            if (model->layout[i].name == name) return vars[i];
        throw ParameterError("no parameter named " + name);
    }
    Var at(std::size_t i) const { return vars[i]; }
};

inline BoundParams bind_params(Tape& t, const EncoderModel& m, bool requires_grad = true) {
    BoundParams b{{}, &m};
    b.vars.reserve(m.layout.size());
    for (const auto& s : m.layout)
        b.vars.push_back(t.leaf(Eigen::Map<const Matrix>(m.params.data() + s.offset, s.rows, s.cols), requires_grad));
    return b;
}

/// Flat gradient vector aligned with model.params.
inline Vector gather_grads(const Tape& t, const EncoderModel& m, const BoundParams& b) {
    Vector g(m.params.size());
    for (std::size_t i = 0; i < m.layout.size(); ++i) {
        const auto& s = m.layout[i];
        const Matrix gi = t.grad(b.vars[i]);
        g.segment(s.offset, s.size()) = Eigen::Map<const Vector>(gi.data(), s.size());
    }
    return g;
}

inline Var mlp_forward(Tape& t, const EncoderModel& m, const BoundParams& p, Var x) {
    require(m.arch == Arch::mlp, "mlp_forward: model is not an mlp");
    require(t.value(x).cols() == m.input_dim(), "mlp_forward: input width mismatch");
    const std::size_t nl = m.dims.size() - 1;
    Var h = x;
    for (std::size_t k = 0; k < nl; ++k) {
        h = t.add_row(t.matmul(h, p.at(2 * k)), p.at(2 * k + 1));
        if (k + 1 < nl) h = t.gelu(h);
    }
    return h;
}

inline Var coupling_encoder_forward(Tape& t, const EncoderModel& m, const BoundParams& p, Var x) {
    require(m.arch == Arch::coupling_inverse, "coupling_encoder_forward: wrong arch");
    const int dim = m.dims[0], layers = m.dims[1], half = dim / 2;
    require(t.value(x).cols() == dim, "coupling_encoder_forward: input width mismatch");
    constexpr std::size_t kPerLayer = 9;
    Var h = x;
    for (int l = 0; l < layers; ++l) {
        const std::size_t o = static_cast<std::size_t>(l) * kPerLayer;
        const Var a = t.cols(h, 0, half);
        const Var b = t.cols(h, half, dim - half);
        const Var s = t.scale(t.tanh(small_net_forward(t, a, p.at(o), p.at(o + 1), p.at(o + 2), p.at(o + 3))),
                              kScaleBound);
        const Var sh = small_net_forward(t, a, p.at(o + 4), p.at(o + 5), p.at(o + 6), p.at(o + 7));
        h = t.hcat(a, t.mul(t.sub(b, sh), t.exp(t.scale(s, -1.0))));
        h = t.matmul_transposed(h, p.at(o + 8));
    }
    return h;
}

inline Var encoder_forward(Tape& t, const EncoderModel& m, const BoundParams& p, Var x) {
    return m.arch == Arch::mlp ? mlp_forward(t, m, p, x) : coupling_encoder_forward(t, m, p, x);
}

/// Forward pass that keeps its tape, for gradients w.r.t. params or inputs.
class ForwardPass {
public:
    ForwardPass(const EncoderModel& m, const Matrix& x, bool input_grad = false)
        : model_(&m), tape_(std::make_unique<Tape>()) {
        input_ = tape_->leaf(x, input_grad);
        params_ = bind_params(*tape_, m);
        output_ = encoder_forward(*tape_, m, params_, input_);
    }

    const Matrix& y() const { return tape_->value(output_); }
    Tape& tape() { return *tape_; }
    Var output() const { return output_; }

    /// Backpropagate d(objective)/dy = seed.
    void backward(const Matrix& seed) { tape_->backward(output_, seed); }
    Vector param_grad() const { return gather_grads(*tape_, *model_, params_); }
    Matrix input_grad() const { return tape_->grad(input_); }

private:
    const EncoderModel* model_;
    std::unique_ptr<Tape> tape_;
    Var input_;
    BoundParams params_;
    Var output_;
};

/// Encoder output without gradients, evaluated in row chunks.
inline Matrix encode(const EncoderModel& m, const Matrix& x, Eigen::Index chunk = 4096) {
    Matrix out(x.rows(), m.output_dim());
    for (Eigen::Index r = 0; r < x.rows(); r += chunk) {
        const Eigen::Index n = std::min(chunk, x.rows() - r);
        Tape t;
        const BoundParams p = bind_params(t, m, false);
        out.middleRows(r, n) = t.value(encoder_forward(t, m, p, t.constant(x.middleRows(r, n))));
    }
    return out;
}

// ---------------------------------------------------------------------------

struct OptimizerState {
    long step = 0;
    Vector m;
    Vector v;
    double lr_base = 3e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
};

/// One AdamW update: decoupled weight decay, then the bias-corrected Adam step.
inline void adamw_step(OptimizerState& st, Vector& params, const Vector& grads, double lr) {
    require(grads.size() == params.size(), "adamw: gradient length mismatch");
    if (!grads.allFinite()) throw TrainingDivergence("non-finite gradient", st.step);
    if (st.m.size() != params.size()) {
        st.m = Vector::Zero(params.size());
        st.v = Vector::Zero(params.size());
    }
    ++st.step;
    st.m = st.beta1 * st.m + (1.0 - st.beta1) * grads;
    st.v = st.beta2 * st.v + (1.0 - st.beta2) * grads.cwiseProduct(grads);
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    if (st.weight_decay != 0.0) params *= (1.0 - lr * st.weight_decay);
    params.array() -= lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + st.eps_adam);
}

/// Linear warmup 0 -> lr_base, then cosine decay to 0 at `total`.
inline double lr_at(long step, long total, long warmup, double lr_base) {
    require(step >= 0 && step < total, "lr_at: step out of range");
    require(warmup >= 0 && warmup <= total, "lr_at: warmup must lie in [0, total]");
    if (step < warmup) return lr_base * static_cast<double>(step) / static_cast<double>(warmup);
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return lr_base * 0.5 * (1.0 + std::cos(kPi * progress));
}

/// Rescale so the global L2 norm is at most max_norm. Returns the input norm.
inline double clip_gradients(Vector& grads, double max_norm) {
    require(max_norm > 0.0, "clip_gradients: max_norm must be positive");
    const double norm = grads.norm();
    if (norm > max_norm) grads *= max_norm / norm;
    return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints: <prefix>.bin holds the flat params in the batch binary format
// (one row); <prefix>.txt is a key=value descriptor.

inline void save_checkpoint(const std::string& prefix, const EncoderModel& m, std::uint64_t seed, long step) {
    {
        std::ofstream bin(prefix + ".bin", std::ios::binary);
        require(static_cast<bool>(bin), "cannot write " + prefix + ".bin");
        write_binary(bin, Matrix(m.params.transpose()));
    }
    std::ofstream txt(prefix + ".txt");
    require(static_cast<bool>(txt), "cannot write " + prefix + ".txt");
    txt << "arch=" << to_string(m.arch) << "\ndims=";
    for (std::size_t i = 0; i < m.dims.size(); ++i) txt << (i ? "," : "") << m.dims[i];
    txt << "\nseed=" << seed << "\nstep=" << step << "\n";
}

struct Checkpoint {
    EncoderModel model;
    std::uint64_t seed = 0;
    long step = 0;
};

inline Checkpoint load_checkpoint(const std::string& prefix) {
    std::ifstream txt(prefix + ".txt");
    require(static_cast<bool>(txt), "cannot read " + prefix + ".txt");
    std::map<std::string, std::string> kv;
    for (std::string line; std::getline(txt, line);) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    std::vector<int> dims;
    std::stringstream ds(kv.at("dims"));
    for (std::string d; std::getline(ds, d, ',');) dims.push_back(std::stoi(d));
    Checkpoint c;
    const Arch arch = arch_from_string(kv.at("arch"));
    c.model = arch == Arch::mlp ? make_mlp(dims, 0) : make_coupling_encoder(dims.at(0), dims.at(1), 0, dims.size() > 2 ? dims[2] : kCouplingHidden);
    c.seed = std::stoull(kv.at("seed"));
    c.step = std::stol(kv.at("step"));
    std::ifstream bin(prefix + ".bin", std::ios::binary);
    require(static_cast<bool>(bin), "cannot read " + prefix + ".bin");
    const Matrix p = read_binary(bin);
    require(p.size() == c.model.params.size(), "checkpoint parameter count mismatch");
    c.model.params = Eigen::Map<const Vector>(p.data(), p.size());
    return c;
}

}  // namespace idlab
