#pragma once

// The memory- and attention-based reasoning model.
//
// Forward pass: encode the stimulus into a feature grid (with temporal
// context normalization across grid positions), then run T controller steps.
// Each step produces a query that guides multi-head attention over the grid;
// the attended context vector is written once into the memory bank.  From
// step 2 on, a learned weighting over the memory rows (gated per channel)
// feeds the next controller input.  After T steps a pairwise relational
// module summarizes the bank, and a decision head reads the relational
// vector concatenated with the controller's final output.
//
// Variants: self-attention (query derived from image content instead of the
// controller) and a relation network (pairwise module over all grid
// positions, no controller/attention/memory).

#include "mareo/nn.hpp"
#include "mareo/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace mareo {

enum class Variant { Guided, SelfAttention, RelationNetwork };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Guided: return "guided";
        case Variant::SelfAttention: return "self_attention";
        case Variant::RelationNetwork: return "relation_network";
    }
    return "?";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "guided") return Variant::Guided;
    if (s == "self_attention" || s == "sa") return Variant::SelfAttention;
    if (s == "relation_network" || s == "rn") return Variant::RelationNetwork;
    throw ConfigError("unknown variant: " + s);
}

struct Ablations {
    bool drop_wkt = false;     // uniform memory weighting
    bool drop_g = false;       // no per-channel gain on the memory read
    bool drop_out = false;     // decision head sees zeros for the controller output
    bool drop_allobj = false;  // relational vector replaced by zeros
    bool drop_tcn = false;     // skip context normalization

    bool any_memory_flag() const { return drop_wkt || drop_g || drop_out || drop_allobj; }
    std::vector<std::string> names() const {
        std::vector<std::string> v;
        if (drop_wkt) v.push_back("drop_wkt");
        if (drop_g) v.push_back("drop_g");
        if (drop_out) v.push_back("drop_out");
        if (drop_allobj) v.push_back("drop_allobj");
        if (drop_tcn) v.push_back("drop_tcn");
        return v;
    }
};

inline Ablations ablations_from_names(const std::vector<std::string>& names) {
    Ablations a;
    for (const std::string& n : names) {
        if (n == "drop_wkt" || n == "wkt") a.drop_wkt = true;
        else if (n == "drop_g" || n == "g") a.drop_g = true;
        else if (n == "drop_out" || n == "out") a.drop_out = true;
        else if (n == "drop_allobj" || n == "allobj") a.drop_allobj = true;
        else if (n == "drop_tcn" || n == "tcn") a.drop_tcn = true;
        else throw ConfigError("unknown ablation flag: " + n);
    }
    return a;
}

struct ModelConfig {
    int time_steps = 4;   // 6 for the 4-choice glyph tasks
    int n_heads = 8;
    int d_model = 128;
    int d_out = 512;
    int d_rel = 256;
    int input_size = 64;  // desk profile; 128 mirrors the full-scale profile
    int n_choices = 1;    // 1 = binary logit; 2 or 4 = multi-choice head
    Variant variant = Variant::Guided;
    Ablations ablations;
    int fw_grid = 4;  // attention maps are pooled to fw_grid^2 before the memory-weighting head

    void validate() const {
        if (time_steps < 2) throw ConfigError("time_steps must be >= 2");
        if (d_model % n_heads != 0) throw ConfigError("n_heads must divide d_model");
        if (input_size % 16 != 0 || input_size < 32) throw ConfigError("input_size must be a multiple of 16");
        if (n_choices != 1 && n_choices != 2 && n_choices != 4)
            throw ConfigError("n_choices must be 1, 2 or 4");
        if (variant == Variant::RelationNetwork && ablations.any_memory_flag())
            throw ConfigError("memory/controller ablations conflict with the relation-network variant");
    }
    int grid_side() const { return input_size / 16; }
    int grid_positions() const { return grid_side() * grid_side(); }
};

// ---------------------------------------------------------------------------
// Memory bank: write-once ordered store of context vectors.
// ---------------------------------------------------------------------------

class MemoryBank {
  public:
    explicit MemoryBank(int capacity) : capacity_(capacity) {}

    void write(const Tensor& z) {
        if (static_cast<int>(rows_.size()) >= capacity_) throw StateError("memory bank full");
        rows_.push_back(z);
    }
    const Tensor& row(int i) const { return rows_.at(static_cast<std::size_t>(i)); }
    const std::vector<Tensor>& rows() const { return rows_; }
    int size() const { return static_cast<int>(rows_.size()); }
    int capacity() const { return capacity_; }
    bool full() const { return size() == capacity_; }

  private:
    int capacity_;
    std::vector<Tensor> rows_;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct MareoParams {
    ModelConfig config;
    EncoderParams encoder;
    TcnParams tcn;
    LstmParams controller;
    MhaParams attention;
    Tensor fw_w, fw_b;        // pooled attention grid -> memory-row logits
    MlpParams g_theta1;       // pairwise relation MLP
    MlpParams g_theta2;       // combination layer (affine, relu applied at call)
    Tensor fphi_w, fphi_b;    // binary decision head
    Tensor choice_w, choice_b;  // k-choice head over concatenated relational vectors
    Tensor sa_w, sa_b;        // content-derived query projection (self-attention variant)

    bool has_controller() const { return config.variant != Variant::RelationNetwork; }

    static MareoParams init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        MareoParams p;
        p.config = cfg;
        p.encoder = EncoderParams::init(seed);
        p.tcn = TcnParams::init(cfg.d_model);
        p.g_theta1 = MlpParams::init({2 * cfg.d_model, cfg.d_rel, cfg.d_rel}, seed, "g_theta1");
        p.g_theta2 = MlpParams::init({cfg.d_rel, cfg.d_rel}, seed, "g_theta2");
        if (p.has_controller()) {
            p.controller = LstmParams::init(seed, cfg.d_model, cfg.d_out);
            p.attention = MhaParams::init(seed, cfg.d_model, cfg.n_heads);
            const int pooled = cfg.fw_grid * cfg.fw_grid;
            p.fw_w = init_xavier({cfg.time_steps, pooled}, pooled, cfg.time_steps, seed, "f_w.w");
            p.fw_b = init_bias({cfg.time_steps}, pooled, seed, "f_w.b");
        }
        if (cfg.n_choices == 1) {
            const int in = cfg.d_rel + cfg.d_out;
            p.fphi_w = init_xavier({1, in}, in, 1, seed, "f_phi.w");
            p.fphi_b = init_bias({1}, in, seed, "f_phi.b");
        } else {
            const int in = cfg.n_choices * cfg.d_rel;
            p.choice_w = init_xavier({cfg.n_choices, in}, in, cfg.n_choices, seed, "choice.w");
            p.choice_b = init_bias({cfg.n_choices}, in, seed, "choice.b");
        }
        if (cfg.variant == Variant::SelfAttention) {
            p.sa_w = init_xavier({cfg.d_model, cfg.d_model}, cfg.d_model, cfg.d_model, seed, "sa.w");
            p.sa_b = init_bias({cfg.d_model}, cfg.d_model, seed, "sa.b");
        }
        return p;
    }

    ParamRegistry registry() const {
        ParamRegistry r;
        encoder.register_into(r);
        tcn.register_into(r);
        if (has_controller()) {
            controller.register_into(r);
            attention.register_into(r);
            r.add("f_w.w", fw_w);
            r.add("f_w.b", fw_b);
        }
        g_theta1.register_into(r, "g_theta1");
        g_theta2.register_into(r, "g_theta2");
        if (config.n_choices == 1) {
            r.add("f_phi.w", fphi_w);
            r.add("f_phi.b", fphi_b);
        } else {
            r.add("choice.w", choice_w);
            r.add("choice.b", choice_b);
        }
        if (config.variant == Variant::SelfAttention) {
            r.add("sa.w", sa_w);
            r.add("sa.b", sa_b);
        }
        return r;
    }
};

// Exact optimizable-scalar counts, totalled and per sub-module.
struct ParamCount {
    std::int64_t total = 0;
    std::map<std::string, std::int64_t> by_module;
};

inline ParamCount param_count(const MareoParams& p) {
    ParamCount c;
    for (const auto& [name, t] : p.registry().items) {
        c.total += t.size();
        c.by_module[name.substr(0, name.find('.'))] += t.size();
    }
    return c;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

struct ForwardTrace {
    std::vector<std::vector<double>> w_k;    // per step, n_heads*n
    std::vector<std::vector<double>> w_kt;   // per step; entry 0 is empty (no read at t=1)
    std::vector<std::vector<double>> gain;   // per step, d_model
    std::vector<std::vector<double>> query;  // per step, d_model
    std::vector<double> all_obj;
    std::vector<double> out;
    std::vector<double> logits;
};

// Columns of the result enumerate ordered row pairs (i,j) of X[r,d],
// including i == j; column i*r+j is [X_i ; X_j].
inline Tensor pair_columns(const Tensor& X) {
    if (X.ndim() != 2) throw ShapeError("pair_columns: need [r,d]");
    const int r = X.dim(0), d = X.dim(1);
    Tensor out = Tensor::alloc({2 * d, r * r});
    const int cols = r * r;
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
            const int col = i * r + j;
            for (int k = 0; k < d; ++k) {
                out.at(static_cast<std::int64_t>(k) * cols + col) = X[static_cast<std::int64_t>(i) * d + k];
                out.at(static_cast<std::int64_t>(d + k) * cols + col) = X[static_cast<std::int64_t>(j) * d + k];
            }
        }
    if (detail::should_record({&X})) {
        auto xn = X.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, r, d, cols](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < r; ++j) {
                    const int col = i * r + j;
                    for (int k = 0; k < d; ++k) {
                        gx[static_cast<std::size_t>(i) * d + k] += go[static_cast<std::size_t>(k) * cols + col];
                        gx[static_cast<std::size_t>(j) * d + k] += go[static_cast<std::size_t>(d + k) * cols + col];
                    }
                }
        });
    }
    return out;
}

// Content-derived query for the self-attention variant: a learned projection
// of the mean-pooled feature grid, independent of the controller state.
inline Tensor sa_variant_query(const Tensor& z_img, const MareoParams& p) {
    if (p.config.variant != Variant::SelfAttention) throw StateError("sa_variant_query: not a self-attention model");
    return affine(p.sa_w, row_mean(z_img), p.sa_b);
}

struct MemoryRead {
    Tensor w_kt;  // weights over the first t-1 rows
    Tensor k_rt;  // gated read, d_model
};

// Weighted read over the first t-1 memory rows; rows at index >= t-1 do not
// exist yet (the current step's context vector is appended afterwards).
inline MemoryRead memory_read(const MemoryBank& M, const Tensor& w_k, const Tensor& gain, const MareoParams& p,
                              int t) {
    if (t < 2) throw StateError("memory_read: defined for t >= 2 only");
    const int avail = t - 1;
    if (M.size() < avail) throw StateError("memory_read: memory has " + std::to_string(M.size()) +
                                           " rows, step " + std::to_string(t) + " needs " + std::to_string(avail));
    if (M.size() == 0) throw StateError("memory_read: empty memory");

    MemoryRead res;
    if (p.config.ablations.drop_wkt) {
        res.w_kt = Tensor::full({avail}, 1.0 / avail);
    } else {
        Tensor head_mean = row_mean(transpose(w_k));            // [n]
        Tensor pooled = adaptive_avg_grid(head_mean, p.config.fw_grid);
        Tensor logits = affine(p.fw_w, pooled, p.fw_b);         // [T]
        res.w_kt = softmax(slice(logits, 0, avail));            // masked to existing rows
    }
    std::vector<Tensor> rows(M.rows().begin(), M.rows().begin() + avail);
    Tensor Mmat = concat_rows(rows);                            // [t-1, d]
    Tensor read = reshape(matmul(reshape(res.w_kt, {1, avail}), Mmat), {p.config.d_model});
    res.k_rt = p.config.ablations.drop_g ? read : mul(gain, read);
    return res;
}

// Pairwise relational summary over the full memory bank: sum of the relation
// MLP over all ordered row pairs (i == j included), through the combine layer.
inline Tensor relational_forward(const MemoryBank& M, const MareoParams& p) {
    if (!M.full()) throw StateError("relational_forward: memory bank not full");
    if (p.config.ablations.drop_allobj) return Tensor::zeros({p.config.d_rel});
    Tensor Mmat = concat_rows(M.rows());       // [T, d]
    Tensor pairs = pair_columns(Mmat);         // [2d, T^2]
    Tensor rel = mlp_forward_cols(pairs, p.g_theta1);
    Tensor summed = row_sum(rel);              // [d_rel]
    return relu(mlp_forward(summed, p.g_theta2));
}

struct TrunkResult {
    Tensor all_obj;
    Tensor out;  // controller output at t = T (zeros for the relation network)
    ForwardTrace trace;
};

namespace detail {

inline std::vector<double> snap(const Tensor& t) { return to_vector(t.data()); }

}  // namespace detail

// Shared portion of the forward pass: encoding, controller/attention loop,
// memory accumulation, relational summary.
inline TrunkResult mareo_trunk(const Tensor& x_in, const MareoParams& p) {
    const ModelConfig& cfg = p.config;
    if (x_in.ndim() != 3 || x_in.dim(0) != 1)
        throw ShapeError("mareo_trunk: need input [1,H,W], got " + dims_str(x_in.shape()));

    TrunkResult res;
    Tensor z = encoder_forward(x_in, p.encoder);
    if (!cfg.ablations.drop_tcn) z = tcn_forward(z, p.tcn);

    if (cfg.variant == Variant::RelationNetwork) {
        Tensor objects = transpose(z);  // grid positions as rows
        Tensor pairs = pair_columns(objects);
        Tensor rel = mlp_forward_cols(pairs, p.g_theta1);
        Tensor avg = row_mean(rel);  // averaged over all position pairs
        res.all_obj = relu(mlp_forward(avg, p.g_theta2));
        res.out = Tensor::zeros({cfg.d_out});
        res.trace.all_obj = detail::snap(res.all_obj);
        res.trace.out = detail::snap(res.out);
        return res;
    }

    Tensor sa_query;
    if (cfg.variant == Variant::SelfAttention) sa_query = sa_variant_query(z, p);

    MemoryBank M(cfg.time_steps);
    Tensor h = Tensor::zeros({cfg.d_out});
    Tensor c = Tensor::zeros({cfg.d_out});
    Tensor k_r = Tensor::zeros({cfg.d_model});
    Tensor out_T;
    for (int t = 1; t <= cfg.time_steps; ++t) {
        LstmStep step = lstm_step(k_r, h, c, p.controller);
        h = step.h;
        c = step.c;
        out_T = step.out;
        const Tensor& query = cfg.variant == Variant::SelfAttention ? sa_query : step.query;
        AttentionResult att = guided_attention(query, z, p.attention);

        res.trace.w_k.push_back(detail::snap(att.weights));
        res.trace.gain.push_back(detail::snap(step.gain));
        res.trace.query.push_back(detail::snap(query));

        if (t == 1) {
            k_r = Tensor::zeros({cfg.d_model});
            res.trace.w_kt.emplace_back();  // no read at the first step
        } else {
            MemoryRead rd = memory_read(M, att.weights, step.gain, p, t);
            k_r = rd.k_rt;
            res.trace.w_kt.push_back(detail::snap(rd.w_kt));
        }
        M.write(att.context);
    }

    res.all_obj = relational_forward(M, p);
    res.out = cfg.ablations.drop_out ? Tensor::zeros({cfg.d_out}) : out_T;
    res.trace.all_obj = detail::snap(res.all_obj);
    res.trace.out = detail::snap(res.out);
    return res;
}

struct ForwardResult {
    Tensor logit;  // [1]
    ForwardTrace trace;
};

// Binary-task forward: one logit; positive means class 1.
inline ForwardResult mareo_forward(const Tensor& x_in, const MareoParams& p) {
    if (p.config.n_choices != 1) throw ConfigError("mareo_forward: model has a multi-choice head");
    TrunkResult tr = mareo_trunk(x_in, p);
    ForwardResult res;
    res.logit = affine(p.fphi_w, concat({tr.all_obj, tr.out}), p.fphi_b);
    res.trace = std::move(tr.trace);
    res.trace.logits = detail::snap(res.logit);
    return res;
}

// Relation-network forward shares the trunk; named entry point for clarity.
inline ForwardResult rn_forward(const Tensor& x_in, const MareoParams& p) {
    if (p.config.variant != Variant::RelationNetwork) throw ConfigError("rn_forward: not a relation-network model");
    return mareo_forward(x_in, p);
}

struct MultiChoiceResult {
    Tensor logits;  // [k]
    std::vector<ForwardTrace> traces;
};

// k-stimulus forward: each stimulus runs the full trunk; the per-stimulus
// relational vectors are concatenated into a linear choice head.
inline MultiChoiceResult mareo_multichoice(const std::vector<Tensor>& stimuli, const MareoParams& p) {
    const int k = static_cast<int>(stimuli.size());
    if (k != 2 && k != 4) throw ConfigError("mareo_multichoice: need 2 or 4 stimuli");
    if (p.config.n_choices != k)
        throw ConfigError("mareo_multichoice: model head expects " + std::to_string(p.config.n_choices) +
                          " choices, got " + std::to_string(k));
    MultiChoiceResult res;
    std::vector<Tensor> rel_vecs;
    rel_vecs.reserve(static_cast<std::size_t>(k));
    for (const Tensor& s : stimuli) {
        TrunkResult tr = mareo_trunk(s, p);
        rel_vecs.push_back(tr.all_obj);
        res.traces.push_back(std::move(tr.trace));
    }
    res.logits = affine(p.choice_w, concat(rel_vecs), p.choice_b);
    return res;
}

}  // namespace mareo
