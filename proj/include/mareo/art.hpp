#pragma once

// Glyph-based abstract reasoning tasks: same-different (SD), relation match
// to sample (RMTS), distribution of three (Dist3), identity rules (ID).
// 100 procedural binary glyphs stand in for character assets; holdout
// regimes withhold m glyphs entirely for test.
//
// Task-relevant images are composed into a single stimulus per candidate:
// glyphs sit on fixed grid anchors (spaced >= 26 px) plus +-5 px integer
// jitter, so glyphs can never overlap.

#include "mareo/dataset.hpp"

#include <algorithm>
#include <array>
#include <string>
#include <vector>

namespace mareo::art {

constexpr int kGlyphSide = 16;
constexpr int kGlyphCount = 100;
constexpr int kJitterMax = 5;
constexpr double kMinGlyphDistance = 0.15;  // normalized Hamming
constexpr int kMinForeground = 40;

struct GlyphSet {
    std::vector<std::array<std::uint8_t, kGlyphSide * kGlyphSide>> masks;
    std::uint64_t seed = 0;
};

namespace detail {

// 4-connectivity over the foreground of a 6x6 cell mask
inline bool connected6(const std::array<std::uint8_t, 36>& cells) {
    int start = -1, total = 0;
    for (int i = 0; i < 36; ++i)
        if (cells[static_cast<std::size_t>(i)]) {
            if (start < 0) start = i;
            ++total;
        }
    if (total == 0) return false;
    std::array<std::uint8_t, 36> seen{};
    std::vector<int> stack{start};
    seen[static_cast<std::size_t>(start)] = 1;
    int reached = 0;
    while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        ++reached;
        const int y = cur / 6, x = cur % 6;
        const int dy[4] = {1, -1, 0, 0}, dx[4] = {0, 0, 1, -1};
        for (int d = 0; d < 4; ++d) {
            const int ny = y + dy[d], nx = x + dx[d];
            if (ny < 0 || ny >= 6 || nx < 0 || nx >= 6) continue;
            const int ni = ny * 6 + nx;
            if (cells[static_cast<std::size_t>(ni)] && !seen[static_cast<std::size_t>(ni)]) {
                seen[static_cast<std::size_t>(ni)] = 1;
                stack.push_back(ni);
            }
        }
    }
    return reached == total;
}

inline int hamming(const std::array<std::uint8_t, kGlyphSide * kGlyphSide>& a,
                   const std::array<std::uint8_t, kGlyphSide * kGlyphSide>& b) {
    int d = 0;
    for (int i = 0; i < kGlyphSide * kGlyphSide; ++i)
        d += a[static_cast<std::size_t>(i)] != b[static_cast<std::size_t>(i)] ? 1 : 0;
    return d;
}

}  // namespace detail

// Random 6x6 cell masks, 4-connected, nearest-upsampled to 16x16, rejected
// until all pairwise distances clear the floor.
inline GlyphSet gen_glyphs(std::uint64_t seed) {
    GlyphSet set;
    set.seed = seed;
    Rng rng(seed, stream_id("glyphs"));
    int attempts = 0;
    while (static_cast<int>(set.masks.size()) < kGlyphCount) {
        if (++attempts > 10000) throw GenerationError("gen_glyphs: rejection budget exhausted");
        std::array<std::uint8_t, 36> cells{};
        int fg = 0;
        for (auto& c : cells) {
            c = rng.bernoulli(0.5) ? 1 : 0;
            fg += c;
        }
        if (fg < 6 || !detail::connected6(cells)) continue;
        std::array<std::uint8_t, kGlyphSide * kGlyphSide> mask{};
        int px = 0;
        for (int y = 0; y < kGlyphSide; ++y)
            for (int x = 0; x < kGlyphSide; ++x) {
                const std::uint8_t v = cells[static_cast<std::size_t>((y * 6 / kGlyphSide) * 6 + (x * 6 / kGlyphSide))];
                mask[static_cast<std::size_t>(y * kGlyphSide + x)] = v;
                px += v;
            }
        if (px < kMinForeground) continue;
        bool ok = true;
        for (const auto& other : set.masks)
            if (detail::hamming(mask, other) < kMinGlyphDistance * kGlyphSide * kGlyphSide) {
                ok = false;
                break;
            }
        if (!ok) continue;
        set.masks.push_back(mask);
    }
    return set;
}

// ---------------------------------------------------------------------------
// Holdout regimes
// ---------------------------------------------------------------------------

struct HoldoutSplit {
    int m = 0;
    std::vector<int> train_ids, test_ids;

    static HoldoutSplit make(int m, std::uint64_t seed) {
        if (m != 0 && m != 50 && m != 85 && m != 95) throw ConfigError("holdout m must be 0, 50, 85 or 95");
        HoldoutSplit s;
        s.m = m;
        std::vector<int> ids(kGlyphCount);
        for (int i = 0; i < kGlyphCount; ++i) ids[static_cast<std::size_t>(i)] = i;
        if (m == 0) {
            s.train_ids = ids;
            s.test_ids = ids;
            return s;
        }
        Rng rng(seed, stream_id("holdout"));
        rng.shuffle(ids);
        s.train_ids.assign(ids.begin(), ids.begin() + (kGlyphCount - m));
        s.test_ids.assign(ids.begin() + (kGlyphCount - m), ids.end());
        return s;
    }
};

// ---------------------------------------------------------------------------
// Tasks and layouts
// ---------------------------------------------------------------------------

enum class ArtTask { SD, RMTS, Dist3, ID };

inline const char* art_task_name(ArtTask t) {
    switch (t) {
        case ArtTask::SD: return "sd";
        case ArtTask::RMTS: return "rmts";
        case ArtTask::Dist3: return "dist3";
        case ArtTask::ID: return "id";
    }
    return "?";
}

inline ArtTask art_task_from_name(const std::string& s) {
    if (s == "sd") return ArtTask::SD;
    if (s == "rmts") return ArtTask::RMTS;
    if (s == "dist3") return ArtTask::Dist3;
    if (s == "id") return ArtTask::ID;
    throw ConfigError("unknown art task: " + s);
}

// stimuli per sample: SD is a single binary stimulus; RMTS picks from 2,
// Dist3/ID from 4
inline int stimuli_per_sample(ArtTask t) {
    switch (t) {
        case ArtTask::SD: return 1;
        case ArtTask::RMTS: return 2;
        default: return 4;
    }
}

// six 16-px glyphs with 26-px anchor spacing need more room than 64 px
inline int canvas_for(ArtTask t) { return t == ArtTask::Dist3 || t == ArtTask::ID ? 96 : 64; }

// controller steps: the 4-choice tasks carry more context per stimulus
inline int time_steps_for(ArtTask t) { return t == ArtTask::Dist3 || t == ArtTask::ID ? 6 : 4; }

struct Anchor {
    int x, y;
};

inline std::vector<Anchor> layout_for(ArtTask t) {
    switch (t) {
        case ArtTask::SD: return {{13, 24}, {39, 24}};
        case ArtTask::RMTS: return {{13, 8}, {39, 8}, {13, 40}, {39, 40}};  // source pair over candidate pair
        default: return {{12, 14}, {40, 14}, {68, 14}, {12, 56}, {40, 56}, {68, 56}};  // two rows of three
    }
}

struct Jitter {
    int dx = 0, dy = 0;
};

// Paste glyphs at anchors + per-glyph jitter.  Anchor spacing >= 26 px makes
// overlap impossible for 16-px glyphs with +-5 px jitter.
inline std::vector<std::uint8_t> compose_stimulus(const GlyphSet& glyphs, const std::vector<int>& ids,
                                                  const std::vector<Anchor>& anchors,
                                                  const std::vector<Jitter>& jitter, int canvas) {
    if (ids.size() > anchors.size()) throw ConfigError("compose_stimulus: more glyphs than layout slots");
    if (ids.size() != jitter.size()) throw ConfigError("compose_stimulus: jitter count mismatch");
    std::vector<std::uint8_t> img(static_cast<std::size_t>(canvas) * canvas, 255);
    for (std::size_t g = 0; g < ids.size(); ++g) {
        if (std::abs(jitter[g].dx) > kJitterMax || std::abs(jitter[g].dy) > kJitterMax)
            throw ConfigError("compose_stimulus: jitter out of range");
        const int ox = anchors[g].x + jitter[g].dx;
        const int oy = anchors[g].y + jitter[g].dy;
        if (ox < 0 || oy < 0 || ox + kGlyphSide > canvas || oy + kGlyphSide > canvas)
            throw ConfigError("compose_stimulus: glyph out of canvas");
        const auto& mask = glyphs.masks.at(static_cast<std::size_t>(ids[g]));
        for (int y = 0; y < kGlyphSide; ++y)
            for (int x = 0; x < kGlyphSide; ++x)
                if (mask[static_cast<std::size_t>(y * kGlyphSide + x)])
                    img[static_cast<std::size_t>(oy + y) * canvas + (ox + x)] = 0;
    }
    return img;
}

struct ArtSample {
    ArtTask task;
    std::vector<std::vector<std::uint8_t>> stimuli;      // k rendered images
    std::vector<std::vector<int>> stimulus_glyph_ids;    // per stimulus, in slot order
    int answer = 0;  // candidate index, or binary label for SD
};

namespace detail {

inline std::uint64_t art_stream(ArtTask task, bool test_pool, std::int64_t index) {
    return mix64(mix64(static_cast<std::uint64_t>(task) + (test_pool ? 101 : 0)) ^
                 mix64(static_cast<std::uint64_t>(index) * 0x9e3779b97f4a7c15ULL));
}

inline int draw_id(const std::vector<int>& pool, Rng& rng) {
    return pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
}

inline int draw_id_except(const std::vector<int>& pool, Rng& rng, const std::vector<int>& taboo) {
    for (int t = 0; t < 1000; ++t) {
        const int id = draw_id(pool, rng);
        if (std::find(taboo.begin(), taboo.end(), id) == taboo.end()) return id;
    }
    throw ConfigError("art: not enough allowed glyphs for distractors");
}

inline std::vector<Jitter> draw_jitter(Rng& rng, std::size_t n) {
    std::vector<Jitter> j(n);
    for (auto& v : j) {
        v.dx = rng.uniform_int(-kJitterMax, kJitterMax);
        v.dy = rng.uniform_int(-kJitterMax, kJitterMax);
    }
    return j;
}

}  // namespace detail

// Pure function of (task, split, pool, seed, index).
inline ArtSample gen_art_sample(ArtTask task, const GlyphSet& glyphs, const HoldoutSplit& split, bool test_pool,
                                std::uint64_t seed, std::int64_t index) {
    const std::vector<int>& pool = test_pool ? split.test_ids : split.train_ids;
    if (pool.size() < 4) throw ConfigError("art: glyph pool too small");
    Rng rng(seed, detail::art_stream(task, test_pool, index));
    const std::vector<Anchor> anchors = layout_for(task);
    const int canvas = canvas_for(task);

    ArtSample s;
    s.task = task;
    switch (task) {
        case ArtTask::SD: {
            const int label = index % 2 == 0 ? 1 : 0;  // 1 = same
            const int a = detail::draw_id(pool, rng);
            const int b = label == 1 ? a : detail::draw_id_except(pool, rng, {a});
            s.stimulus_glyph_ids.push_back({a, b});
            s.stimuli.push_back(compose_stimulus(glyphs, {a, b}, anchors, detail::draw_jitter(rng, 2), canvas));
            s.answer = label;
            return s;
        }
        case ArtTask::RMTS: {
            const bool source_same = index % 2 == 0;
            const int a = detail::draw_id(pool, rng);
            const int b = source_same ? a : detail::draw_id_except(pool, rng, {a});
            const int c = detail::draw_id(pool, rng);                       // same-pair candidate
            const int d = detail::draw_id(pool, rng);                       // different-pair candidate
            const int e = detail::draw_id_except(pool, rng, {d});
            std::array<std::array<int, 2>, 2> candidates;
            const int correct_slot = rng.uniform_int(0, 1);
            const std::array<int, 2> same_pair{c, c}, diff_pair{d, e};
            candidates[static_cast<std::size_t>(correct_slot)] = source_same ? same_pair : diff_pair;
            candidates[static_cast<std::size_t>(1 - correct_slot)] = source_same ? diff_pair : same_pair;
            for (int k = 0; k < 2; ++k) {
                const std::vector<int> ids{a, b, candidates[static_cast<std::size_t>(k)][0],
                                           candidates[static_cast<std::size_t>(k)][1]};
                s.stimulus_glyph_ids.push_back(ids);
                s.stimuli.push_back(compose_stimulus(glyphs, ids, anchors, detail::draw_jitter(rng, 4), canvas));
            }
            s.answer = correct_slot;
            return s;
        }
        case ArtTask::Dist3: {
            // a permuted triple on top; the second row misses its last item
            const int a = detail::draw_id(pool, rng);
            const int b = detail::draw_id_except(pool, rng, {a});
            const int c = detail::draw_id_except(pool, rng, {a, b});
            std::vector<int> row1{a, b, c}, row2{a, b, c};
            rng.shuffle(row1);
            rng.shuffle(row2);
            const int missing = row2[2];
            std::vector<int> options{missing};
            while (options.size() < 4) options.push_back(detail::draw_id_except(pool, rng, options));
            Rng slot_rng(rng.next_u64());
            slot_rng.shuffle(options);
            const int answer = static_cast<int>(std::find(options.begin(), options.end(), missing) - options.begin());
            for (int k = 0; k < 4; ++k) {
                const std::vector<int> ids{row1[0], row1[1], row1[2], row2[0], row2[1], options[static_cast<std::size_t>(k)]};
                s.stimulus_glyph_ids.push_back(ids);
                s.stimuli.push_back(compose_stimulus(glyphs, ids, anchors, detail::draw_jitter(rng, 6), canvas));
            }
            s.answer = answer;
            return s;
        }
        case ArtTask::ID: {
            const bool aba = index % 2 == 0;  // else ABB
            const int a = detail::draw_id(pool, rng);
            const int b = detail::draw_id_except(pool, rng, {a});
            const int c = detail::draw_id(pool, rng);
            const int d = detail::draw_id_except(pool, rng, {c});
            const int correct = aba ? c : d;
            std::vector<int> options{correct};
            while (options.size() < 4) options.push_back(detail::draw_id_except(pool, rng, options));
            Rng slot_rng(rng.next_u64());
            slot_rng.shuffle(options);
            const int answer = static_cast<int>(std::find(options.begin(), options.end(), correct) - options.begin());
            for (int k = 0; k < 4; ++k) {
                const std::vector<int> ids{a, b, aba ? a : b, c, d, options[static_cast<std::size_t>(k)]};
                s.stimulus_glyph_ids.push_back(ids);
                s.stimuli.push_back(compose_stimulus(glyphs, ids, anchors, detail::draw_jitter(rng, 6), canvas));
            }
            s.answer = answer;
            return s;
        }
    }
    throw ConfigError("art: unknown task");
}

inline Dataset gen_art(ArtTask task, const GlyphSet& glyphs, const HoldoutSplit& split, bool test_pool,
                       std::uint64_t seed, int n) {
    Dataset ds;
    ds.h = canvas_for(task);
    ds.w = ds.h;
    ds.k = stimuli_per_sample(task);
    for (int i = 0; i < n; ++i) {
        ArtSample s = gen_art_sample(task, glyphs, split, test_pool, seed, i);
        std::vector<std::uint8_t> flat;
        flat.reserve(static_cast<std::size_t>(ds.sample_bytes()));
        for (const auto& img : s.stimuli) flat.insert(flat.end(), img.begin(), img.end());
        ds.append(static_cast<std::uint8_t>(s.answer), flat);
    }
    return ds;
}

// Desk-profile sample counts: one fifth of the full-scale protocol, with the
// m=95 combinatoric caps scaled the same way.
struct ArtCounts {
    int train = 0, test = 0;
};

inline ArtCounts desk_counts(ArtTask task, int m) {
    auto scaled = [](int full) { return std::max(8, full / 5); };
    switch (task) {
        case ArtTask::SD:
            if (m == 0) return {scaled(18810), scaled(990)};
            if (m == 50) return {scaled(4900), scaled(4900)};
            if (m == 85) return {scaled(420), scaled(10000)};
            return {8, scaled(10000)};
        case ArtTask::RMTS:
            if (m == 95) return {scaled(480), scaled(10000)};
            return {scaled(10000), scaled(10000)};
        case ArtTask::Dist3:
            if (m == 95) return {scaled(360), scaled(10000)};
            return {scaled(10000), scaled(10000)};
        case ArtTask::ID:
            if (m == 95) return {scaled(8640), scaled(10000)};
            return {scaled(10000), scaled(10000)};
    }
    return {};
}

}  // namespace mareo::art
