#include <catch2/catch_amalgamated.hpp>

#include "mareo/art.hpp"

#include <set>

using namespace mareo;
using namespace mareo::art;

namespace {

// flood-fill component count over black pixels of a rendered stimulus
int black_components(const std::vector<std::uint8_t>& img, int canvas) {
    std::vector<int> seen(img.size(), 0);
    int comps = 0;
    for (int start = 0; start < canvas * canvas; ++start) {
        if (img[static_cast<std::size_t>(start)] != 0 || seen[static_cast<std::size_t>(start)]) continue;
        ++comps;
        std::vector<int> stack{start};
        seen[static_cast<std::size_t>(start)] = 1;
        while (!stack.empty()) {
            const int cur = stack.back();
            stack.pop_back();
            const int y = cur / canvas, x = cur % canvas;
            const int dy[4] = {1, -1, 0, 0}, dx[4] = {0, 0, 1, -1};
            for (int d = 0; d < 4; ++d) {
                const int ny = y + dy[d], nx = x + dx[d];
                if (ny < 0 || ny >= canvas || nx < 0 || nx >= canvas) continue;
                const int ni = ny * canvas + nx;
                if (img[static_cast<std::size_t>(ni)] == 0 && !seen[static_cast<std::size_t>(ni)]) {
                    seen[static_cast<std::size_t>(ni)] = 1;
                    stack.push_back(ni);
                }
            }
        }
    }
    return comps;
}

bool glyph_connected(const std::array<std::uint8_t, 256>& mask) {
    std::vector<std::uint8_t> img(256);
    for (int i = 0; i < 256; ++i) img[static_cast<std::size_t>(i)] = mask[static_cast<std::size_t>(i)] ? 0 : 255;
    return black_components(img, 16) == 1;
}

const GlyphSet& glyphs() {
    static GlyphSet g = gen_glyphs(4242);
    return g;
}

}  // namespace

TEST_CASE("glyph set: determinism, separation, connectivity, mass") {
    const GlyphSet& g = glyphs();
    REQUIRE(g.masks.size() == 100);
    GlyphSet g2 = gen_glyphs(4242);
    CHECK(g.masks == g2.masks);
    GlyphSet g3 = gen_glyphs(4243);
    CHECK(g.masks != g3.masks);

    // exhaustive pair scan (4950 pairs)
    int min_d = 256;
    for (std::size_t i = 0; i < 100; ++i)
        for (std::size_t j = i + 1; j < 100; ++j) {
            int d = 0;
            for (int p = 0; p < 256; ++p) d += g.masks[i][static_cast<std::size_t>(p)] != g.masks[j][static_cast<std::size_t>(p)];
            min_d = std::min(min_d, d);
        }
    CHECK(min_d >= static_cast<int>(0.15 * 256));

    for (const auto& m : g.masks) {
        int fg = 0;
        for (int p = 0; p < 256; ++p) fg += m[static_cast<std::size_t>(p)];
        CHECK(fg >= 40);
        CHECK(glyph_connected(m));
    }
}

TEST_CASE("holdout splits") {
    HoldoutSplit all = HoldoutSplit::make(0, 9);
    CHECK(all.train_ids.size() == 100);
    CHECK(all.train_ids == all.test_ids);

    for (int m : {50, 85, 95}) {
        HoldoutSplit s = HoldoutSplit::make(m, 9);
        CHECK(static_cast<int>(s.test_ids.size()) == m);
        CHECK(static_cast<int>(s.train_ids.size()) == 100 - m);
        std::set<int> train(s.train_ids.begin(), s.train_ids.end()), test(s.test_ids.begin(), s.test_ids.end());
        for (int id : test) CHECK(train.count(id) == 0);
        HoldoutSplit again = HoldoutSplit::make(m, 9);
        CHECK(again.train_ids == s.train_ids);
    }
    CHECK_THROWS_AS(HoldoutSplit::make(40, 9), ConfigError);
}

TEST_CASE("compose: zero jitter hits anchors, components separate") {
    const GlyphSet& g = glyphs();
    auto anchors = layout_for(ArtTask::SD);
    std::vector<std::uint8_t> img = compose_stimulus(g, {0, 1}, anchors, {{0, 0}, {0, 0}}, 64);
    // each glyph's pixels appear exactly at anchor + mask offsets
    for (int gi = 0; gi < 2; ++gi)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                const bool on = g.masks[static_cast<std::size_t>(gi)][static_cast<std::size_t>(y * 16 + x)] != 0;
                const std::size_t px = static_cast<std::size_t>(anchors[static_cast<std::size_t>(gi)].y + y) * 64 +
                                       anchors[static_cast<std::size_t>(gi)].x + x;
                CHECK((img[px] == 0) == on);
            }
    CHECK(black_components(img, 64) == 2);

    CHECK_THROWS_AS(compose_stimulus(g, {0, 1}, anchors, {{6, 0}, {0, 0}}, 64), ConfigError);
    CHECK_THROWS_AS(compose_stimulus(g, {0, 1, 2}, anchors, {{0, 0}, {0, 0}, {0, 0}}, 64), ConfigError);
}

TEST_CASE("jitter stays within bounds and reaches them") {
    HoldoutSplit split = HoldoutSplit::make(0, 9);
    const auto anchors = layout_for(ArtTask::SD);
    int max_seen = 0;
    for (int i = 0; i < 2000; ++i) {
        ArtSample s = gen_art_sample(ArtTask::SD, glyphs(), split, false, 77, i);
        // recover each glyph's jitter by exact mask matching over all offsets
        for (int gi = 0; gi < 2; ++gi) {
            const auto& mask = glyphs().masks[static_cast<std::size_t>(s.stimulus_glyph_ids[0][static_cast<std::size_t>(gi)])];
            bool found = false;
            for (int dy = -5; dy <= 5 && !found; ++dy)
                for (int dx = -5; dx <= 5 && !found; ++dx) {
                    bool match = true;
                    for (int y = 0; y < 16 && match; ++y)
                        for (int x = 0; x < 16; ++x) {
                            const std::size_t px = static_cast<std::size_t>(anchors[static_cast<std::size_t>(gi)].y + dy + y) * 64 +
                                                   anchors[static_cast<std::size_t>(gi)].x + dx + x;
                            if ((s.stimuli[0][px] == 0) != (mask[static_cast<std::size_t>(y * 16 + x)] != 0)) {
                                match = false;
                                break;
                            }
                        }
                    if (match) {
                        found = true;
                        max_seen = std::max({max_seen, std::abs(dx), std::abs(dy)});
                    }
                }
            CHECK(found);  // some in-range offset reproduces the glyph exactly
        }
    }
    CHECK(max_seen == 5);
}

TEST_CASE("sd samples: same id means label 1") {
    HoldoutSplit split = HoldoutSplit::make(0, 9);
    for (int i = 0; i < 40; ++i) {
        ArtSample s = gen_art_sample(ArtTask::SD, glyphs(), split, false, 3, i);
        REQUIRE(s.stimuli.size() == 1);
        const auto& ids = s.stimulus_glyph_ids[0];
        CHECK((ids[0] == ids[1]) == (s.answer == 1));
        CHECK(s.answer == (i % 2 == 0 ? 1 : 0));
        CHECK(black_components(s.stimuli[0], 64) == (ids[0] == ids[1] ? 2 : 2));
    }
}

TEST_CASE("rmts: answer candidate matches the source relation") {
    HoldoutSplit split = HoldoutSplit::make(0, 9);
    for (int i = 0; i < 60; ++i) {
        ArtSample s = gen_art_sample(ArtTask::RMTS, glyphs(), split, false, 5, i);
        REQUIRE(s.stimuli.size() == 2);
        const bool source_same = s.stimulus_glyph_ids[0][0] == s.stimulus_glyph_ids[0][1];
        for (int k = 0; k < 2; ++k) {
            const auto& ids = s.stimulus_glyph_ids[static_cast<std::size_t>(k)];
            const bool cand_same = ids[2] == ids[3];
            CHECK((cand_same == source_same) == (k == s.answer));
        }
    }
}

TEST_CASE("dist3: answer completes the permuted triple") {
    HoldoutSplit split = HoldoutSplit::make(0, 9);
    for (int i = 0; i < 60; ++i) {
        ArtSample s = gen_art_sample(ArtTask::Dist3, glyphs(), split, false, 7, i);
        REQUIRE(s.stimuli.size() == 4);
        const auto& row1 = s.stimulus_glyph_ids[0];
        const std::set<int> triple{row1[0], row1[1], row1[2]};
        CHECK(triple.size() == 3);
        for (int k = 0; k < 4; ++k) {
            const auto& ids = s.stimulus_glyph_ids[static_cast<std::size_t>(k)];
            const std::set<int> row2{ids[3], ids[4], ids[5]};
            const bool completes = row2 == triple;
            CHECK(completes == (k == s.answer));
        }
    }
}

TEST_CASE("id task: pattern-consistent candidate wins, A != B enforced") {
    HoldoutSplit split = HoldoutSplit::make(0, 9);
    for (int i = 0; i < 60; ++i) {
        ArtSample s = gen_art_sample(ArtTask::ID, glyphs(), split, false, 8, i);
        const auto& r = s.stimulus_glyph_ids[0];
        const int A = r[0], B = r[1], third = r[2];
        CHECK(A != B);
        const bool aba = third == A;
        CHECK((aba || third == B));
        const int C = r[3], D = r[4];
        const int correct = aba ? C : D;
        for (int k = 0; k < 4; ++k)
            CHECK((s.stimulus_glyph_ids[static_cast<std::size_t>(k)][5] == correct) == (k == s.answer));
    }
}

TEST_CASE("holdout discipline: test stimuli only use held-out glyphs") {
    HoldoutSplit split = HoldoutSplit::make(50, 21);
    const std::set<int> train(split.train_ids.begin(), split.train_ids.end());
    for (int i = 0; i < 500; ++i) {
        ArtSample s = gen_art_sample(ArtTask::RMTS, glyphs(), split, true, 31, i);
        for (const auto& ids : s.stimulus_glyph_ids)
            for (int id : ids) CHECK(train.count(id) == 0);
    }
    // and train samples never use held-out glyphs
    const std::set<int> test(split.test_ids.begin(), split.test_ids.end());
    for (int i = 0; i < 500; ++i) {
        ArtSample s = gen_art_sample(ArtTask::SD, glyphs(), split, false, 31, i);
        for (const auto& ids : s.stimulus_glyph_ids)
            for (int id : ids) CHECK(test.count(id) == 0);
    }
}

TEST_CASE("answer slots are roughly uniform") {
    HoldoutSplit split = HoldoutSplit::make(0, 9);
    std::array<int, 4> counts{};
    const int n = 2000;
    for (int i = 0; i < n; ++i) {
        ArtSample s = gen_art_sample(ArtTask::Dist3, glyphs(), split, false, 11, i);
        ++counts[static_cast<std::size_t>(s.answer)];
    }
    // chi-square against uniform over 4 slots, 3 dof; 11.34 is the 1% point
    double chi2 = 0.0;
    for (int k = 0; k < 4; ++k) {
        const double e = n / 4.0;
        chi2 += (counts[static_cast<std::size_t>(k)] - e) * (counts[static_cast<std::size_t>(k)] - e) / e;
    }
    CHECK(chi2 < 11.34);
}

TEST_CASE("art datasets round-trip with multi-stimulus samples") {
    HoldoutSplit split = HoldoutSplit::make(0, 9);
    Dataset ds = gen_art(ArtTask::Dist3, glyphs(), split, false, 13, 6);
    CHECK(ds.k == 4);
    CHECK(ds.h == 96);
    dataset_write("/tmp/mareo_test_art.mrd", ds);
    Dataset back = dataset_read("/tmp/mareo_test_art.mrd");
    CHECK(back.pixels == ds.pixels);
    CHECK(back.k == 4);

    // generation is a pure function of its inputs
    Dataset again = gen_art(ArtTask::Dist3, glyphs(), split, false, 13, 6);
    CHECK(again.content_hash() == ds.content_hash());
}

TEST_CASE("desk counts follow the one-fifth profile with m=95 caps") {
    CHECK(desk_counts(ArtTask::SD, 0).train == 3762);
    CHECK(desk_counts(ArtTask::SD, 95).train == 8);
    CHECK(desk_counts(ArtTask::Dist3, 95).train == 72);
    CHECK(desk_counts(ArtTask::RMTS, 95).train == 96);
    CHECK(desk_counts(ArtTask::ID, 95).train == 1728);
    CHECK(desk_counts(ArtTask::RMTS, 50).train == 2000);
}
