#pragma once

// Training loop, evaluation, checkpointing, metrics.
//
// Batches run per-sample tapes against shared read-only parameters, fanned
// out over a fixed worker count.  Each worker accumulates its samples' flat
// gradients in visit order and the partials reduce in worker order, so a run
// is bit-reproducible for a given (seed, workers) pair.  Shuffle order
// derives from (seed, epoch), which is what makes resumed training land on
// the same trajectory as an uninterrupted run.

#include "mareo/dataset.hpp"
#include "mareo/model.hpp"
#include "mareo/threads.hpp"

#include "json.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace mareo {

// ---------------------------------------------------------------------------
// Config serialization
// ---------------------------------------------------------------------------

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {
        {"time_steps", c.time_steps},   {"n_heads", c.n_heads},       {"d_model", c.d_model},
        {"d_out", c.d_out},             {"d_rel", c.d_rel},           {"input_size", c.input_size},
        {"n_choices", c.n_choices},     {"variant", variant_name(c.variant)},
        {"ablations", c.ablations.names()},                           {"fw_grid", c.fw_grid},
    };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.time_steps = j.value("time_steps", c.time_steps);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_model = j.value("d_model", c.d_model);
    c.d_out = j.value("d_out", c.d_out);
    c.d_rel = j.value("d_rel", c.d_rel);
    c.input_size = j.value("input_size", c.input_size);
    c.n_choices = j.value("n_choices", c.n_choices);
    c.variant = variant_from_name(j.value("variant", "guided"));
    c.ablations = ablations_from_names(j.value("ablations", std::vector<std::string>{}));
    c.fw_grid = j.value("fw_grid", c.fw_grid);
    c.validate();
    return c;
}

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 0.0;
    int batch_size = 32;
    int max_epochs = 100;
    double stop_threshold = 0.99;
    std::uint64_t seed = 0;
    bool deterministic = true;  // zeroes wall-time fields in metrics output
    int workers = default_workers();
    bool flip_augment = false;        // random horizontal/vertical flips
    double gaussian_noise_var = 0.0;  // input noise on train and val when > 0
    std::string metrics_path;         // JSONL, one epoch per line; empty = off
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size},
            {"max_epochs", c.max_epochs},
            {"stop_threshold", c.stop_threshold},
            {"seed", c.seed},
            {"deterministic", c.deterministic},
            {"workers", c.workers},
            {"flip_augment", c.flip_augment},
            {"gaussian_noise_var", c.gaussian_noise_var}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.stop_threshold = j.value("stop_threshold", c.stop_threshold);
    c.seed = j.value("seed", c.seed);
    c.deterministic = j.value("deterministic", c.deterministic);
    c.workers = j.value("workers", c.workers);
    c.flip_augment = j.value("flip_augment", c.flip_augment);
    c.gaussian_noise_var = j.value("gaussian_noise_var", c.gaussian_noise_var);
    if (c.lr <= 0.0) throw ConfigError("lr must be positive");
    if (c.max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    return c;
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

inline Tensor stimulus_tensor(std::span<const std::uint8_t> px, int h, int w, bool flip_h = false,
                              bool flip_v = false) {
    Tensor t = Tensor::alloc({1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int sy = flip_v ? h - 1 - y : y;
            const int sx = flip_h ? w - 1 - x : x;
            t.at(static_cast<std::int64_t>(y) * w + x) = px[static_cast<std::size_t>(sy) * w + sx] / 255.0;
        }
    return t;
}

inline void apply_gaussian_noise(Tensor& x, double variance, Rng& rng) {
    const double sigma = std::sqrt(variance);
    for (std::int64_t i = 0; i < x.size(); ++i) x.at(i) += sigma * rng.gaussian();
}

inline void apply_salt_pepper(Tensor& x, double p, Rng& rng) {
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double u = rng.uniform();
        if (u < p / 2) x.at(i) = 0.0;
        else if (u < p) x.at(i) = 1.0;
    }
}

struct InputNoise {
    enum class Kind { None, Gaussian, SaltPepper } kind = Kind::None;
    double param = 0.0;  // variance for gaussian, flip probability for salt&pepper
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Per-sample loss/prediction shared by train and eval
// ---------------------------------------------------------------------------

namespace detail {

struct SampleOutcome {
    Tensor loss;
    int predicted = 0;
    int target = 0;
};

inline SampleOutcome sample_forward(const MareoParams& p, const Dataset& ds, std::int64_t idx,
                                    bool flip_h, bool flip_v, const InputNoise& noise) {
    SampleOutcome out;
    out.target = ds.labels[static_cast<std::size_t>(idx)];
    auto prep = [&](int stim) {
        Tensor x = stimulus_tensor(ds.image(idx, stim), ds.h, ds.w, flip_h, flip_v);
        if (noise.kind == InputNoise::Kind::Gaussian) {
            Rng r(noise.seed, mix64(static_cast<std::uint64_t>(idx) * 131 + static_cast<std::uint64_t>(stim)));
            apply_gaussian_noise(x, noise.param, r);
        } else if (noise.kind == InputNoise::Kind::SaltPepper) {
            Rng r(noise.seed, mix64(static_cast<std::uint64_t>(idx) * 131 + static_cast<std::uint64_t>(stim)));
            apply_salt_pepper(x, noise.param, r);
        }
        return x;
    };
    if (ds.k == 1) {
        if (p.config.n_choices != 1) throw ConfigError("dataset is binary but model head is multi-choice");
        if (out.target != 0 && out.target != 1) throw ValueError("binary dataset with non-binary label");
        ForwardResult r = mareo_forward(prep(0), p);
        out.predicted = r.logit.item() > 0.0 ? 1 : 0;
        out.loss = bce_with_logits(r.logit, out.target);
    } else {
        if (p.config.n_choices != ds.k) throw ConfigError("dataset stimulus count does not match model head");
        std::vector<Tensor> stimuli;
        stimuli.reserve(static_cast<std::size_t>(ds.k));
        for (int s = 0; s < ds.k; ++s) stimuli.push_back(prep(s));
        MultiChoiceResult r = mareo_multichoice(stimuli, p);
        int best = 0;
        for (int k = 1; k < ds.k; ++k)
            if (r.logits[k] > r.logits[best]) best = k;  // lowest index wins ties
        out.predicted = best;
        out.loss = cross_entropy(r.logits, out.target);
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    std::vector<double> per_class_accuracy;
};

inline EvalResult evaluate(const MareoParams& p, const Dataset& ds, int workers = default_workers(),
                           const InputNoise& noise = {}) {
    if (ds.count() == 0) throw ValueError("evaluate: empty dataset");
    const std::int64_t n = ds.count();
    std::vector<double> losses(static_cast<std::size_t>(n));
    std::vector<int> correct(static_cast<std::size_t>(n));
    std::vector<int> targets(static_cast<std::size_t>(n));
    parallel_run(workers, [&](int w) {
        for (std::int64_t i = w; i < n; i += workers) {
            detail::SampleOutcome o = detail::sample_forward(p, ds, i, false, false, noise);
            losses[static_cast<std::size_t>(i)] = o.loss.item();
            correct[static_cast<std::size_t>(i)] = o.predicted == o.target ? 1 : 0;
            targets[static_cast<std::size_t>(i)] = o.target;
        }
    });
    EvalResult r;
    const int classes = ds.k == 1 ? 2 : ds.k;
    std::vector<std::int64_t> class_n(static_cast<std::size_t>(classes), 0), class_c(static_cast<std::size_t>(classes), 0);
    double loss_sum = 0.0;
    std::int64_t c = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        loss_sum += losses[static_cast<std::size_t>(i)];
        c += correct[static_cast<std::size_t>(i)];
        ++class_n[static_cast<std::size_t>(targets[static_cast<std::size_t>(i)])];
        class_c[static_cast<std::size_t>(targets[static_cast<std::size_t>(i)])] += correct[static_cast<std::size_t>(i)];
    }
    r.accuracy = static_cast<double>(c) / static_cast<double>(n);
    r.mean_loss = loss_sum / static_cast<double>(n);
    for (int k = 0; k < classes; ++k)
        r.per_class_accuracy.push_back(class_n[static_cast<std::size_t>(k)] == 0
                                           ? 0.0
                                           : static_cast<double>(class_c[static_cast<std::size_t>(k)]) /
                                                 static_cast<double>(class_n[static_cast<std::size_t>(k)]));
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints (MRC1): "MRC1" magic, u32 manifest length, JSON manifest
// listing tensor names/shapes/offsets, then raw little-endian doubles.
// ---------------------------------------------------------------------------

struct TrainState {
    int epochs_done = 0;
    double best_val = -1.0;
    int best_epoch = -1;
    bool stopped_early = false;
};

namespace detail {

struct PayloadWriter {
    std::vector<double> payload;
    nlohmann::json tensors = nlohmann::json::array();

    void add(const std::string& name, const Dims& shape, const double* data, std::int64_t n) {
        tensors.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}});
        payload.insert(payload.end(), data, data + n);
    }
};

}  // namespace detail

inline void checkpoint_save(const std::string& path, const MareoParams& p, const AdamState* opt = nullptr,
                            const TrainState* ts = nullptr,
                            const std::vector<std::pair<std::string, Tensor>>* extra = nullptr) {
    detail::PayloadWriter w;
    ParamRegistry reg = p.registry();
    for (const auto& [name, t] : reg.items) w.add(name, t.shape(), t.data().data(), t.size());
    nlohmann::json manifest{{"format", "MRC1"}, {"config", model_config_to_json(p.config)}};
    if (opt != nullptr) {
        const auto params = reg.tensors();
        for (std::size_t i = 0; i < params.size(); ++i) {
            w.add("adam.m/" + reg.items[i].first, params[i].shape(), opt->m[i].data(),
                  static_cast<std::int64_t>(opt->m[i].size()));
            w.add("adam.v/" + reg.items[i].first, params[i].shape(), opt->v[i].data(),
                  static_cast<std::int64_t>(opt->v[i].size()));
        }
        manifest["adam"] = {{"step", opt->step},
                            {"lr", opt->cfg.lr},
                            {"beta1", opt->cfg.beta1},
                            {"beta2", opt->cfg.beta2},
                            {"eps", opt->cfg.eps},
                            {"weight_decay", opt->cfg.weight_decay}};
    }
    if (ts != nullptr)
        manifest["train_state"] = {{"epochs_done", ts->epochs_done},
                                   {"best_val", ts->best_val},
                                   {"best_epoch", ts->best_epoch},
                                   {"stopped_early", ts->stopped_early}};
    if (extra != nullptr)
        for (const auto& [name, t] : *extra) w.add(name, t.shape(), t.data().data(), t.size());
    manifest["tensors"] = std::move(w.tensors);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("mrc1: cannot open for write: " + path);
    os.write("MRC1", 4);
    const std::string mtext = manifest.dump();
    const std::uint32_t mlen = static_cast<std::uint32_t>(mtext.size());
    unsigned char lenb[4] = {static_cast<unsigned char>(mlen & 0xff), static_cast<unsigned char>((mlen >> 8) & 0xff),
                             static_cast<unsigned char>((mlen >> 16) & 0xff),
                             static_cast<unsigned char>((mlen >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(lenb), 4);
    os.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    os.write(reinterpret_cast<const char*>(w.payload.data()),
             static_cast<std::streamsize>(w.payload.size() * sizeof(double)));
    if (!os) throw FormatError("mrc1: write failed: " + path);
}

struct CheckpointFile {
    nlohmann::json manifest;
    std::vector<double> payload;

    bool has(const std::string& name) const {
        for (const auto& t : manifest.at("tensors"))
            if (t.at("name") == name) return true;
        return false;
    }
    std::pair<const double*, Dims> tensor(const std::string& name) const {
        for (const auto& t : manifest.at("tensors"))
            if (t.at("name") == name) {
                Dims d = t.at("shape").get<Dims>();
                return {payload.data() + t.at("offset").get<std::size_t>(), d};
            }
        throw FormatError("mrc1: tensor not found: " + name);
    }
};

inline CheckpointFile checkpoint_open(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("mrc1: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "MRC1") throw FormatError("mrc1: bad magic in " + path);
    unsigned char lenb[4];
    is.read(reinterpret_cast<char*>(lenb), 4);
    if (!is) throw FormatError("mrc1: truncated manifest length");
    const std::uint32_t mlen = static_cast<std::uint32_t>(lenb[0]) | (static_cast<std::uint32_t>(lenb[1]) << 8) |
                               (static_cast<std::uint32_t>(lenb[2]) << 16) |
                               (static_cast<std::uint32_t>(lenb[3]) << 24);
    std::string mtext(mlen, '\0');
    is.read(mtext.data(), mlen);
    if (!is) throw FormatError("mrc1: truncated manifest");
    CheckpointFile f;
    f.manifest = nlohmann::json::parse(mtext);
    is.seekg(0, std::ios::end);
    const auto end = is.tellg();
    const std::streamoff payload_start = 8 + static_cast<std::streamoff>(mlen);
    const std::size_t doubles = static_cast<std::size_t>((end - payload_start) / 8);
    f.payload.resize(doubles);
    is.seekg(payload_start);
    is.read(reinterpret_cast<char*>(f.payload.data()), static_cast<std::streamsize>(doubles * 8));
    if (!is) throw FormatError("mrc1: truncated payload");
    return f;
}

// Restores parameters into an existing model; every registered tensor must
// be present with a matching shape.
inline void checkpoint_restore(const CheckpointFile& f, MareoParams& p, AdamState* opt = nullptr,
                               TrainState* ts = nullptr) {
    const ModelConfig stored = model_config_from_json(f.manifest.at("config"));
    const nlohmann::json stored_j = model_config_to_json(stored);
    if (stored_j != model_config_to_json(p.config))
        throw FormatError("mrc1: checkpoint was written for a different model config");
    ParamRegistry reg = p.registry();
    for (auto& [name, t] : reg.items) {
        auto [data, shape] = f.tensor(name);
        if (shape != t.shape()) throw FormatError("mrc1: shape mismatch for " + name);
        std::copy(data, data + t.size(), t.data().begin());
    }
    if (opt != nullptr) {
        if (!f.manifest.contains("adam")) throw FormatError("mrc1: checkpoint has no optimizer state");
        auto params = reg.tensors();
        opt->init(params);
        opt->step = f.manifest["adam"].at("step").get<std::int64_t>();
        opt->cfg.lr = f.manifest["adam"].at("lr").get<double>();
        opt->cfg.beta1 = f.manifest["adam"].at("beta1").get<double>();
        opt->cfg.beta2 = f.manifest["adam"].at("beta2").get<double>();
        opt->cfg.eps = f.manifest["adam"].at("eps").get<double>();
        opt->cfg.weight_decay = f.manifest["adam"].at("weight_decay").get<double>();
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto [m, ms] = f.tensor("adam.m/" + reg.items[i].first);
            auto [v, vs] = f.tensor("adam.v/" + reg.items[i].first);
            std::copy(m, m + params[i].size(), opt->m[i].begin());
            std::copy(v, v + params[i].size(), opt->v[i].begin());
        }
    }
    if (ts != nullptr && f.manifest.contains("train_state")) {
        ts->epochs_done = f.manifest["train_state"].at("epochs_done").get<int>();
        ts->best_val = f.manifest["train_state"].at("best_val").get<double>();
        ts->best_epoch = f.manifest["train_state"].at("best_epoch").get<int>();
        ts->stopped_early = f.manifest["train_state"].at("stopped_early").get<bool>();
    }
}

// Builds a fresh model from the stored config and restores it.
inline MareoParams checkpoint_load_model(const std::string& path) {
    CheckpointFile f = checkpoint_open(path);
    MareoParams p = MareoParams::init(model_config_from_json(f.manifest.at("config")), 0);
    checkpoint_restore(f, p);
    return p;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0;
    double seconds = 0.0;
};

struct RunRecord {
    std::vector<EpochRecord> epochs;
    TrainState state;
    double wall_seconds = 0.0;
    std::uint64_t train_hash = 0, val_hash = 0;
    nlohmann::json config_snapshot;
};

class Trainer {
  public:
    Trainer(MareoParams& params, TrainConfig cfg) : p_(params), cfg_(std::move(cfg)) {
        reg_ = p_.registry();
        params_ = reg_.tensors();
        offsets_.resize(params_.size() + 1, 0);
        for (std::size_t i = 0; i < params_.size(); ++i)
            offsets_[i + 1] = offsets_[i] + static_cast<std::size_t>(params_[i].size());
        frozen_.assign(params_.size(), false);
        opt_.cfg.lr = cfg_.lr;
        opt_.cfg.weight_decay = cfg_.weight_decay;
        opt_.init(params_);
    }

    // Freeze everything except parameters whose name starts with one of the
    // given prefixes.
    void freeze_except(const std::vector<std::string>& trainable_prefixes) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            bool trainable = false;
            for (const std::string& pre : trainable_prefixes)
                if (reg_.items[i].first.rfind(pre, 0) == 0) trainable = true;
            frozen_[i] = !trainable;
        }
    }
    const std::vector<bool>& frozen() const { return frozen_; }
    AdamState& optimizer() { return opt_; }
    TrainState& state() { return state_; }

    void resume_from(const std::string& checkpoint_path) {
        CheckpointFile f = checkpoint_open(checkpoint_path);
        checkpoint_restore(f, p_, &opt_, &state_);
        if (f.has("best/" + reg_.items[0].first)) {
            best_params_.clear();
            for (const auto& [name, t] : reg_.items) {
                auto [data, shape] = f.tensor("best/" + name);
                best_params_.emplace_back(std::vector<double>(data, data + t.size()));
            }
        }
    }

    void save_checkpoint(const std::string& path) const {
        std::vector<std::pair<std::string, Tensor>> extra;
        if (!best_params_.empty())
            for (std::size_t i = 0; i < reg_.items.size(); ++i)
                extra.emplace_back("best/" + reg_.items[i].first,
                                   Tensor::from(reg_.items[i].second.shape(), best_params_[i]));
        checkpoint_save(path, p_, &opt_, &state_, extra.empty() ? nullptr : &extra);
    }

    // Restores the best-validation parameter snapshot into the live model.
    void restore_best() {
        if (best_params_.empty()) return;
        for (std::size_t i = 0; i < params_.size(); ++i)
            std::copy(best_params_[i].begin(), best_params_[i].end(), params_[i].data().begin());
    }

    RunRecord fit(const Dataset& train, const Dataset& val) {
        if (train.count() == 0) throw ValueError("fit: empty training set");
        RunRecord rec;
        rec.train_hash = train.content_hash();
        rec.val_hash = val.content_hash();
        rec.config_snapshot = {{"model", model_config_to_json(p_.config)}, {"train", train_config_to_json(cfg_)}};
        const auto t_start = std::chrono::steady_clock::now();

        std::vector<std::int64_t> order(static_cast<std::size_t>(train.count()));
        std::iota(order.begin(), order.end(), 0);

        for (int epoch = state_.epochs_done; epoch < cfg_.max_epochs; ++epoch) {
            const auto e_start = std::chrono::steady_clock::now();
            run_epoch(train, epoch, order);

            EpochRecord er;
            er.epoch = epoch + 1;
            er.train_loss = last_train_loss_;
            er.train_acc = last_train_acc_;
            InputNoise val_noise;
            if (cfg_.gaussian_noise_var > 0.0)
                val_noise = {InputNoise::Kind::Gaussian, cfg_.gaussian_noise_var, mix64(cfg_.seed ^ 0x7a1ULL)};
            er.val_acc = val.count() > 0 ? evaluate(p_, val, cfg_.workers, val_noise).accuracy : 0.0;
            er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - e_start).count();
            rec.epochs.push_back(er);
            state_.epochs_done = epoch + 1;

            if (er.val_acc > state_.best_val) {
                state_.best_val = er.val_acc;
                state_.best_epoch = er.epoch;
                snapshot_best();
            }
            append_metrics(er);
            if (val.count() > 0 && er.val_acc >= cfg_.stop_threshold) {
                state_.stopped_early = true;
                break;
            }
        }
        rec.state = state_;
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        return rec;
    }

  private:
    void snapshot_best() {
        best_params_.clear();
        best_params_.reserve(params_.size());
        for (const Tensor& t : params_) best_params_.emplace_back(to_vector(t.data()));
    }

    void append_metrics(const EpochRecord& er) const {
        if (cfg_.metrics_path.empty()) return;
        std::ofstream os(cfg_.metrics_path, std::ios::app);
        nlohmann::json j{{"epoch", er.epoch},
                         {"train_loss", er.train_loss},
                         {"train_acc", er.train_acc},
                         {"val_acc", er.val_acc},
                         {"seconds", cfg_.deterministic ? 0.0 : er.seconds}};
        os << j.dump() << "\n";
    }

    void run_epoch(const Dataset& train, int epoch, std::vector<std::int64_t>& order) {
        Rng shuffle_rng(cfg_.seed, mix64(0x517ULL + static_cast<std::uint64_t>(epoch)));
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);

        const std::int64_t n = train.count();
        const int workers = std::max(1, cfg_.workers);
        if (partials_.size() != static_cast<std::size_t>(workers))
            partials_.assign(static_cast<std::size_t>(workers), std::vector<double>());

        double loss_sum = 0.0;
        std::int64_t correct = 0;
        InputNoise noise;
        if (cfg_.gaussian_noise_var > 0.0)
            noise = {InputNoise::Kind::Gaussian, cfg_.gaussian_noise_var,
                     mix64(cfg_.seed ^ (static_cast<std::uint64_t>(epoch) * 0x9e3779b97f4a7c15ULL))};

        for (std::int64_t start = 0; start < n; start += cfg_.batch_size) {
            const int b = static_cast<int>(std::min<std::int64_t>(cfg_.batch_size, n - start));
            std::vector<double> losses(static_cast<std::size_t>(b));
            std::vector<int> corrects(static_cast<std::size_t>(b));
            for (auto& part : partials_) part.assign(offsets_.back(), 0.0);

            parallel_run(workers, [&](int w) {
                for (int i = w; i < b; i += workers) {
                    const std::int64_t idx = order[static_cast<std::size_t>(start + i)];
                    bool fh = false, fv = false;
                    if (cfg_.flip_augment) {
                        Rng ar(cfg_.seed, mix64(0xf11aULL ^ (static_cast<std::uint64_t>(epoch) << 32) ^
                                                static_cast<std::uint64_t>(idx)));
                        fh = ar.bernoulli(0.5);
                        fv = ar.bernoulli(0.5);
                    }
                    Tape tape;
                    Tape::Scope scope(tape);
                    detail::SampleOutcome o = detail::sample_forward(p_, train, idx, fh, fv, noise);
                    losses[static_cast<std::size_t>(i)] = o.loss.item();
                    corrects[static_cast<std::size_t>(i)] = o.predicted == o.target ? 1 : 0;
                    tape.backward(o.loss, false);
                    std::vector<double>& part = partials_[static_cast<std::size_t>(w)];
                    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
                        const dvec* g = tape.grad_of(params_[pi]);
                        if (g == nullptr) continue;
                        double* dst = part.data() + offsets_[pi];
                        for (std::size_t k = 0; k < g->size(); ++k) dst[k] += (*g)[k];
                    }
                }
            });

            // deterministic reduce: worker order, then scale by 1/batch
            std::vector<double>& flat = partials_[0];
            for (int w = 1; w < workers; ++w)
                for (std::size_t k = 0; k < flat.size(); ++k) flat[k] += partials_[static_cast<std::size_t>(w)][k];
            const double inv_b = 1.0 / static_cast<double>(b);
            for (double& g : flat) g *= inv_b;

            double batch_loss = 0.0;
            for (int i = 0; i < b; ++i) {
                batch_loss += losses[static_cast<std::size_t>(i)];
                correct += corrects[static_cast<std::size_t>(i)];
            }
            batch_loss *= inv_b;
            loss_sum += batch_loss * b;
            if (!std::isfinite(batch_loss))
                throw NumericError("training loss is not finite (epoch " + std::to_string(epoch + 1) + ", batch at " +
                                   std::to_string(start) + ", seed " + std::to_string(cfg_.seed) + ")");

            adam_step_flat(params_, flat, opt_, &frozen_);
        }
        last_train_loss_ = loss_sum / static_cast<double>(n);
        last_train_acc_ = static_cast<double>(correct) / static_cast<double>(n);
    }

    MareoParams& p_;
    TrainConfig cfg_;
    ParamRegistry reg_;
    std::vector<Tensor> params_;
    std::vector<std::size_t> offsets_;
    std::vector<bool> frozen_;
    AdamState opt_;
    TrainState state_;
    std::vector<std::vector<double>> best_params_;
    std::vector<std::vector<double>> partials_;
    double last_train_loss_ = 0.0;
    double last_train_acc_ = 0.0;
};

}  // namespace mareo
