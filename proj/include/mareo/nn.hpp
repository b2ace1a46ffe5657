#pragma once

// Neural building blocks: convolutional encoder, temporal context
// normalization, LSTM controller cell, guided multi-head attention, MLPs.

#include "mareo/tensor.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace mareo {

// ---------------------------------------------------------------------------
// Parameter initialization helpers.  Each tensor draws from its own RNG
// stream keyed by name, so adding parameters never reshuffles existing ones.
// ---------------------------------------------------------------------------

inline Tensor init_uniform(const Dims& d, double limit, std::uint64_t seed, const std::string& name) {
    Rng rng(seed, stream_id(name));
    Tensor t = Tensor::uniform(d, -limit, limit, rng);
    t.set_requires_grad();
    return t;
}

inline Tensor init_he(const Dims& d, int fan_in, std::uint64_t seed, const std::string& name) {
    return init_uniform(d, std::sqrt(6.0 / fan_in), seed, name);
}

inline Tensor init_xavier(const Dims& d, int fan_in, int fan_out, std::uint64_t seed, const std::string& name) {
    return init_uniform(d, std::sqrt(6.0 / (fan_in + fan_out)), seed, name);
}

inline Tensor init_zeros_param(const Dims& d) {
    Tensor t = Tensor::zeros(d);
    t.set_requires_grad();
    return t;
}

// Bias init U(+-1/sqrt(fan_in)).  Zero biases leave the attention readout of
// a context-normalized grid exactly at the origin (uniform weights average
// zero-mean columns), killing the relational path at the start of training.
inline Tensor init_bias(const Dims& d, int fan_in, std::uint64_t seed, const std::string& name) {
    return init_uniform(d, 1.0 / std::sqrt(static_cast<double>(fan_in)), seed, name);
}

// Named parameter registry; registration order is the flat layout used by
// the optimizer and checkpoints.
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, const Tensor& t) {
        for (const auto& [n, p] : items) {
            if (n == name) throw StateError("parameter registered twice: " + name);
            if (p.same_node(t)) throw StateError("tensor registered under two names: " + name + " vs " + n);
        }
        items.emplace_back(name, t);
    }
    std::int64_t total() const {
        std::int64_t s = 0;
        for (const auto& [n, p] : items) s += p.size();
        return s;
    }
    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        out.reserve(items.size());
        for (const auto& [n, p] : items) out.push_back(p);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Encoder: five conv blocks, 3x3 kernels, pad 1, relu; 2x2 max pool after
// blocks 1-4.  Channels 1 -> 32 -> 64 -> 64 -> 128 -> 128, so a HxW input
// maps to a 128 x (H/16 * W/16) feature grid.
// ---------------------------------------------------------------------------

struct EncoderParams {
    static constexpr std::array<int, 6> kChannels = {1, 32, 64, 64, 128, 128};
    std::array<Tensor, 5> kernels;
    std::array<Tensor, 5> biases;

    static EncoderParams init(std::uint64_t seed) {
        EncoderParams p;
        for (int b = 0; b < 5; ++b) {
            const int ci = kChannels[static_cast<std::size_t>(b)];
            const int co = kChannels[static_cast<std::size_t>(b) + 1];
            p.kernels[static_cast<std::size_t>(b)] =
                init_he({co, ci, 3, 3}, ci * 9, seed, "encoder.k" + std::to_string(b));
            p.biases[static_cast<std::size_t>(b)] = init_bias({co}, ci * 9, seed, "encoder.b" + std::to_string(b));
        }
        return p;
    }
    void register_into(ParamRegistry& r, const std::string& prefix = "encoder") const {
        for (int b = 0; b < 5; ++b) {
            r.add(prefix + ".conv" + std::to_string(b + 1) + ".kernel", kernels[static_cast<std::size_t>(b)]);
            r.add(prefix + ".conv" + std::to_string(b + 1) + ".bias", biases[static_cast<std::size_t>(b)]);
        }
    }
};

// x[1,H,W] -> [128, (H/16)*(W/16)]
inline Tensor encoder_forward(const Tensor& x, const EncoderParams& p) {
    if (x.ndim() != 3 || x.dim(0) != 1) throw ShapeError("encoder_forward: need [1,H,W], got " + dims_str(x.shape()));
    if (x.dim(1) % 16 != 0 || x.dim(2) % 16 != 0)
        throw ShapeError("encoder_forward: spatial dims must be divisible by 16");
    Tensor h = x;
    for (int b = 0; b < 5; ++b) {
        h = relu(conv2d(h, p.kernels[static_cast<std::size_t>(b)], p.biases[static_cast<std::size_t>(b)], 1, 1));
        if (b < 4) h = maxpool2d(h, 2, 2);
    }
    return reshape(h, {h.dim(0), h.dim(1) * h.dim(2)});
}

// ---------------------------------------------------------------------------
// Temporal context normalization over the context positions of a feature
// grid: per channel, z-score across the n columns, then learned affine.
// ---------------------------------------------------------------------------

struct TcnParams {
    static constexpr double kEps = 1e-8;
    Tensor gamma;  // init 1
    Tensor beta;   // init 0

    static TcnParams init(int d_model) {
        TcnParams p;
        p.gamma = Tensor::ones({d_model});
        p.gamma.set_requires_grad();
        p.beta = init_zeros_param({d_model});
        return p;
    }
    void register_into(ParamRegistry& r, const std::string& prefix = "tcn") const {
        r.add(prefix + ".gamma", gamma);
        r.add(prefix + ".beta", beta);
    }
};

inline Tensor tcn_forward(const Tensor& z, const TcnParams& p) {
    if (z.ndim() != 2) throw ShapeError("tcn_forward: need [d,n]");
    const int d = z.dim(0), n = z.dim(1);
    if (n < 2) throw ValueError("tcn_forward: context must have at least 2 positions");
    if (p.gamma.dim(0) != d) throw ShapeError("tcn_forward: channel count mismatch");
    constexpr double eps = TcnParams::kEps;

    Tensor out = Tensor::alloc(z.shape());
    // cache per-channel stats for backward
    auto mu = std::make_shared<dvec>(static_cast<std::size_t>(d));
    auto sd = std::make_shared<dvec>(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) {
        const double* row = z.data().data() + static_cast<std::ptrdiff_t>(c) * n;
        double m = 0.0;
        for (int i = 0; i < n; ++i) m += row[i];
        m /= n;
        double v = 0.0;
        for (int i = 0; i < n; ++i) v += (row[i] - m) * (row[i] - m);
        v /= n;
        const double s = std::sqrt(v);
        (*mu)[static_cast<std::size_t>(c)] = m;
        (*sd)[static_cast<std::size_t>(c)] = s;
        const double g = p.gamma[c], b = p.beta[c], inv = 1.0 / (s + eps);
        double* orow = out.data().data() + static_cast<std::ptrdiff_t>(c) * n;
        for (int i = 0; i < n; ++i) orow[i] = g * (row[i] - m) * inv + b;
    }
    if (detail::should_record({&z, &p.gamma, &p.beta})) {
        auto zn = z.node_sp(), gn = p.gamma.node_sp(), bn = p.beta.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {zn, gn, bn}, [zn, gn, bn, on, mu, sd, d, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            for (int c = 0; c < d; ++c) {
                const double* x = zn->value.data() + static_cast<std::ptrdiff_t>(c) * n;
                const double* dy = go.data() + static_cast<std::ptrdiff_t>(c) * n;
                const double m = (*mu)[static_cast<std::size_t>(c)], s = (*sd)[static_cast<std::size_t>(c)];
                const double D = s + TcnParams::kEps, invD = 1.0 / D;
                const double g = gn->value[static_cast<std::size_t>(c)];
                if (detail::wants(gn) || detail::wants(bn)) {
                    double dg = 0.0, db = 0.0;
                    for (int i = 0; i < n; ++i) {
                        dg += dy[i] * (x[i] - m) * invD;
                        db += dy[i];
                    }
                    if (detail::wants(gn)) t.adj(gn)[static_cast<std::size_t>(c)] += dg;
                    if (detail::wants(bn)) t.adj(bn)[static_cast<std::size_t>(c)] += db;
                }
                if (detail::wants(zn)) {
                    double sum_d = 0.0, sum_du = 0.0;
                    for (int i = 0; i < n; ++i) {
                        sum_d += dy[i];
                        sum_du += dy[i] * (x[i] - m);
                    }
                    auto& gz = t.adj(zn);
                    double* gx = gz.data() + static_cast<std::ptrdiff_t>(c) * n;
                    // d/dx of gamma*(x-mu)/(sqrt(var)+eps); the sqrt path is
                    // skipped at zero variance, where it is not differentiable
                    const bool has_var = s > 1e-12;
                    for (int i = 0; i < n; ++i) {
                        double dx = g * invD * (dy[i] - sum_d / n);
                        if (has_var) dx -= g * (x[i] - m) * sum_du / (n * s * D * D);
                        gx[i] += dx;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// LSTM controller cell with three output heads (out, gain, query).
// ---------------------------------------------------------------------------

struct LstmParams {
    int input_size = 128;
    int hidden_size = 512;
    int out_size = 512;
    int gain_size = 128;
    int query_size = 128;

    Tensor w_x, w_h, bias;  // gates: input, forget, candidate, output
    Tensor w_out, b_out;
    Tensor w_g, b_g;
    Tensor w_q, b_q;

    static LstmParams init(std::uint64_t seed, int input_size = 128, int hidden_size = 512) {
        LstmParams p;
        p.input_size = input_size;
        p.hidden_size = hidden_size;
        const int h4 = 4 * hidden_size;
        const double lim = 1.0 / std::sqrt(static_cast<double>(hidden_size));
        p.w_x = init_uniform({h4, input_size}, lim, seed, "lstm.w_x");
        p.w_h = init_uniform({h4, hidden_size}, lim, seed, "lstm.w_h");
        p.bias = init_uniform({h4}, lim, seed, "lstm.bias");
        // forget-gate bias starts at exactly 1
        for (int i = hidden_size; i < 2 * hidden_size; ++i) p.bias.at(i) = 1.0;
        p.w_out = init_xavier({p.out_size, hidden_size}, hidden_size, p.out_size, seed, "lstm.w_out");
        p.b_out = init_bias({p.out_size}, hidden_size, seed, "lstm.b_out");
        p.w_g = init_xavier({p.gain_size, hidden_size}, hidden_size, p.gain_size, seed, "lstm.w_g");
        p.b_g = init_bias({p.gain_size}, hidden_size, seed, "lstm.b_g");
        p.w_q = init_xavier({p.query_size, hidden_size}, hidden_size, p.query_size, seed, "lstm.w_q");
        p.b_q = init_bias({p.query_size}, hidden_size, seed, "lstm.b_q");
        return p;
    }
    void register_into(ParamRegistry& r, const std::string& prefix = "controller") const {
        r.add(prefix + ".w_x", w_x);
        r.add(prefix + ".w_h", w_h);
        r.add(prefix + ".bias", bias);
        r.add(prefix + ".w_out", w_out);
        r.add(prefix + ".b_out", b_out);
        r.add(prefix + ".w_g", w_g);
        r.add(prefix + ".b_g", b_g);
        r.add(prefix + ".w_q", w_q);
        r.add(prefix + ".b_q", b_q);
    }
};

struct LstmStep {
    Tensor out;    // [512]
    Tensor gain;   // [128], sigmoid-bounded
    Tensor query;  // [128]
    Tensor h;      // [hidden]
    Tensor c;      // [hidden]
};

inline LstmStep lstm_step(const Tensor& input, const Tensor& h_prev, const Tensor& c_prev, const LstmParams& p) {
    const int H = p.hidden_size;
    if (input.ndim() != 1 || input.dim(0) != p.input_size) throw ShapeError("lstm_step: bad input shape");
    if (h_prev.dim(0) != H || c_prev.dim(0) != H) throw ShapeError("lstm_step: bad state shape");

    Tensor gates = add(affine(p.w_x, input, p.bias), matmul_vec(p.w_h, h_prev));
    Tensor i_g = sigmoid(slice(gates, 0, H));
    Tensor f_g = sigmoid(slice(gates, H, H));
    Tensor c_tilde = tanh_act(slice(gates, 2 * H, H));
    Tensor o_g = sigmoid(slice(gates, 3 * H, H));

    LstmStep s;
    s.c = add(mul(f_g, c_prev), mul(i_g, c_tilde));
    s.h = mul(o_g, tanh_act(s.c));
    s.out = affine(p.w_out, s.h, p.b_out);
    s.gain = sigmoid(affine(p.w_g, s.h, p.b_g));
    s.query = affine(p.w_q, s.h, p.b_q);
    return s;
}

// ---------------------------------------------------------------------------
// Guided multi-head attention: one query token against n key/value positions.
// ---------------------------------------------------------------------------

struct MhaParams {
    int d_model = 128;
    int n_heads = 8;
    Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;

    int head_dim() const { return d_model / n_heads; }

    static MhaParams init(std::uint64_t seed, int d_model = 128, int n_heads = 8) {
        if (d_model % n_heads != 0) throw ConfigError("mha: n_heads must divide d_model");
        MhaParams p;
        p.d_model = d_model;
        p.n_heads = n_heads;
        auto mk = [&](const char* name) { return init_xavier({d_model, d_model}, d_model, d_model, seed, std::string("mha.") + name); };
        p.w_q = mk("w_q");
        p.w_k = mk("w_k");
        p.w_v = mk("w_v");
        p.w_o = mk("w_o");
        p.b_q = init_bias({d_model}, d_model, seed, "mha.b_q");
        p.b_k = init_bias({d_model}, d_model, seed, "mha.b_k");
        p.b_v = init_bias({d_model}, d_model, seed, "mha.b_v");
        p.b_o = init_bias({d_model}, d_model, seed, "mha.b_o");
        return p;
    }
    void register_into(ParamRegistry& r, const std::string& prefix = "attention") const {
        r.add(prefix + ".w_q", w_q);
        r.add(prefix + ".b_q", b_q);
        r.add(prefix + ".w_k", w_k);
        r.add(prefix + ".b_k", b_k);
        r.add(prefix + ".w_v", w_v);
        r.add(prefix + ".b_v", b_v);
        r.add(prefix + ".w_o", w_o);
        r.add(prefix + ".b_o", b_o);
    }
};

struct AttentionResult {
    Tensor weights;  // [n_heads, n], rows sum to 1
    Tensor context;  // [d_model]
};

inline AttentionResult guided_attention(const Tensor& query, const Tensor& z_img, const MhaParams& p) {
    if (query.ndim() != 1 || query.dim(0) != p.d_model) throw ShapeError("guided_attention: bad query shape");
    if (z_img.ndim() != 2 || z_img.dim(0) != p.d_model) throw ShapeError("guided_attention: bad feature grid shape");
    const int dh = p.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor q = affine(p.w_q, query, p.b_q);
    Tensor K = add_colvec(matmul(p.w_k, z_img), p.b_k);
    Tensor V = add_colvec(matmul(p.w_v, z_img), p.b_v);

    std::vector<Tensor> weight_rows, head_outs;
    weight_rows.reserve(static_cast<std::size_t>(p.n_heads));
    head_outs.reserve(static_cast<std::size_t>(p.n_heads));
    for (int h = 0; h < p.n_heads; ++h) {
        Tensor qh = reshape(slice(q, h * dh, dh), {1, dh});
        Tensor Kh = slice_rows(K, h * dh, dh);
        Tensor Vh = slice_rows(V, h * dh, dh);
        Tensor scores = scale(matmul(qh, Kh), inv_sqrt);  // [1, n]
        Tensor w = softmax(scores, 1);
        weight_rows.push_back(reshape(w, {w.dim(1)}));
        head_outs.push_back(reshape(matmul(Vh, transpose(w)), {dh}));
    }
    AttentionResult res;
    res.weights = concat_rows(weight_rows);
    res.context = affine(p.w_o, concat(head_outs), p.b_o);
    return res;
}

// ---------------------------------------------------------------------------
// MLP: alternating affine/relu, final layer affine only.
// ---------------------------------------------------------------------------

struct MlpParams {
    std::vector<int> widths;
    std::vector<Tensor> weights, biases;

    static MlpParams init(std::vector<int> widths, std::uint64_t seed, const std::string& name) {
        if (widths.size() < 2) throw ConfigError("mlp: need at least in/out widths");
        MlpParams p;
        p.widths = std::move(widths);
        for (std::size_t l = 0; l + 1 < p.widths.size(); ++l) {
            p.weights.push_back(init_he({p.widths[l + 1], p.widths[l]}, p.widths[l], seed,
                                        name + ".w" + std::to_string(l)));
            p.biases.push_back(init_bias({p.widths[l + 1]}, p.widths[l], seed, name + ".b" + std::to_string(l)));
        }
        return p;
    }
    void register_into(ParamRegistry& r, const std::string& prefix) const {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            r.add(prefix + ".w" + std::to_string(l), weights[l]);
            r.add(prefix + ".b" + std::to_string(l), biases[l]);
        }
    }
};

inline Tensor mlp_forward(const Tensor& x, const MlpParams& p) {
    if (x.ndim() != 1 || x.dim(0) != p.widths.front()) throw ShapeError("mlp_forward: bad input shape");
    Tensor h = x;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        h = affine(p.weights[l], h, p.biases[l]);
        if (l + 1 < p.weights.size()) h = relu(h);
    }
    return h;
}

// Batched MLP over the columns of x[in, cols].
inline Tensor mlp_forward_cols(const Tensor& x, const MlpParams& p) {
    if (x.ndim() != 2 || x.dim(0) != p.widths.front()) throw ShapeError("mlp_forward_cols: bad input shape");
    Tensor h = x;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        h = add_colvec(matmul(p.weights[l], h), p.biases[l]);
        if (l + 1 < p.weights.size()) h = relu(h);
    }
    return h;
}

}  // namespace mareo
