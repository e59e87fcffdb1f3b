#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "anchorkit/anchor_pipeline.hpp"
#include "anchorkit/common.hpp"
#include "anchorkit/denoiser.hpp"
#include "anchorkit/schedule.hpp"
#include "anchorkit/tensor.hpp"
#include "anchorkit/threading.hpp"

using namespace anchorkit;

namespace {

LatentGrid random_grid(int c, int h, int w, std::uint32_t seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    LatentGrid g(c, h, w);
    for (auto& v : g.data) v = uni(rng);
    return g;
}

Matrix random_matrix(int rows, int cols, std::uint32_t seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Matrix m(rows, cols);
    for (auto& v : m.data) v = uni(rng);
    return m;
}

bool bitwise_equal(const LatentGrid& a, const LatentGrid& b) {
    return a.channels == b.channels && a.height == b.height && a.width == b.width &&
           a.data == b.data;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

bool bitwise_equal(const std::vector<LatentGrid>& a, const std::vector<LatentGrid>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!bitwise_equal(a[i], b[i])) return false;
    return true;
}

double max_abs(const LatentGrid& a, const LatentGrid& b) {
    REQUIRE(a.data.size() == b.data.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

double l2_dist(const LatentGrid& a, const LatentGrid& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return std::sqrt(s);
}

double grid_mean(const LatentGrid& g) {
    double s = 0.0;
    for (double v : g.data) s += v;
    return s / double(g.data.size());
}

TapRecord make_record(std::uint32_t seed, int n_mats, int n_grids) {
    TapRecord rec;
    for (int i = 0; i < n_mats; ++i) rec.mats.push_back(random_matrix(3, 4, seed + 10 * i));
    for (int i = 0; i < n_grids; ++i) rec.grids.push_back(random_grid(2, 3, 5, seed + 1000 + i));
    return rec;
}

bool same_record(const TapRecord& a, const TapRecord& b) {
    if (a.mats.size() != b.mats.size() || a.grids.size() != b.grids.size()) return false;
    for (std::size_t i = 0; i < a.mats.size(); ++i)
        if (!bitwise_equal(a.mats[i], b.mats[i])) return false;
    for (std::size_t i = 0; i < a.grids.size(); ++i)
        if (!bitwise_equal(a.grids[i], b.grids[i])) return false;
    return true;
}

std::string temp_path(const std::string& leaf) {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "ak_anchor_tests";
    fs::create_directories(dir);
    return (dir / leaf).string();
}

}  // namespace

TEST_CASE("anchor sampling walks the interval grid and keeps the last frame") {
    AnchorSet a = sample_anchors(73, 24);
    CHECK(a.frame_indices == std::vector<int>{0, 24, 48, 72});
    CHECK(a.interval == 24);

    CHECK(sample_anchors(75, 24).frame_indices == std::vector<int>{0, 24, 48, 72, 74});
    CHECK(sample_anchors(25, 24).frame_indices == std::vector<int>{0, 24});
    CHECK(sample_anchors(48, 24).frame_indices == std::vector<int>{0, 24, 47});
    CHECK(sample_anchors(2, 1).frame_indices == std::vector<int>{0, 1});
    CHECK(sample_anchors(10, 3).frame_indices == std::vector<int>{0, 3, 6, 9});
    CHECK(sample_anchors(10, 100).frame_indices == std::vector<int>{0, 9});

    for (int n : {2, 7, 24, 25, 73, 120}) {
        for (int k : {1, 5, 24}) {
            AnchorSet s = sample_anchors(n, k);
            CAPTURE(n);
            CAPTURE(k);
            REQUIRE(s.frame_indices.size() >= 2);
            CHECK(s.frame_indices.front() == 0);
            CHECK(s.frame_indices.back() == n - 1);
            CHECK(std::is_sorted(s.frame_indices.begin(), s.frame_indices.end()));
            CHECK(std::adjacent_find(s.frame_indices.begin(), s.frame_indices.end()) ==
                  s.frame_indices.end());
            for (std::size_t i = 0; i + 1 < s.frame_indices.size(); ++i)
                CHECK(s.frame_indices[i + 1] - s.frame_indices[i] <= k);
        }
    }
}

TEST_CASE("anchor sampling rejects degenerate inputs") {
    CHECK_THROWS_WITH_AS(sample_anchors(1, 24), "sample_anchors: need at least 2 frames, got 1",
                         contract_error);
    CHECK_THROWS_WITH_AS(sample_anchors(10, 0), "sample_anchors: interval must be >= 1, got 0",
                         contract_error);
    CHECK_THROWS_WITH_AS(sample_anchors(10, -3), "sample_anchors: interval must be >= 1, got -3",
                         contract_error);
}

TEST_CASE("injection step counts round the ratio into the step budget") {
    CHECK(injection_step_count(0.44, 50) == 22);
    CHECK(injection_step_count(0.65, 50) == 33);
    CHECK(injection_step_count(0.0, 50) == 0);
    CHECK(injection_step_count(1.0, 50) == 50);
    CHECK(injection_step_count(0.44, 25) == 11);
    CHECK(injection_step_count(0.45, 10) == 5);  // half rounds away from zero
    CHECK(injection_step_count(0.04, 10) == 0);

    CHECK_THROWS_WITH_AS(injection_step_count(-0.1, 50),
                         doctest::Contains("injection ratio must lie in [0, 1]"), config_error);
    CHECK_THROWS_WITH_AS(injection_step_count(1.5, 50),
                         doctest::Contains("injection ratio must lie in [0, 1]"), config_error);
    CHECK_THROWS_WITH_AS(injection_step_count(0.5, 0),
                         "injection_step_count: num_steps must be positive", contract_error);
}

TEST_CASE("fusing a shared frame averages the two copies exactly") {
    LatentGrid l = random_grid(3, 5, 7, 11);
    LatentGrid r = random_grid(3, 5, 7, 12);
    LatentGrid out = fuse_pair_copies(l, r);
    REQUIRE(out.data.size() == l.data.size());
    for (std::size_t i = 0; i < out.data.size(); ++i)
        CHECK(out.data[i] == 0.5 * (l.data[i] + r.data[i]));

    // Averaging a frame with itself reproduces it bit-for-bit.
    CHECK(bitwise_equal(fuse_pair_copies(l, l), l));

    LatentGrid bad(3, 5, 8);
    CHECK_THROWS_WITH_AS(fuse_pair_copies(l, bad), doctest::Contains("shared frame copies"),
                         contract_error);
}

TEST_CASE("shared-frame fusion passes endpoints through and averages interiors") {
    std::vector<std::pair<LatentGrid, LatentGrid>> outs;
    for (int p = 0; p < 3; ++p)
        outs.emplace_back(random_grid(2, 4, 4, 20 + 2 * p), random_grid(2, 4, 4, 21 + 2 * p));

    std::vector<LatentGrid> fused = fuse_shared(outs);
    REQUIRE(fused.size() == 4);  // M pairs -> M+1 frames, M-1 of them merged
    CHECK(bitwise_equal(fused[0], outs[0].first));
    CHECK(bitwise_equal(fused[3], outs[2].second));
    for (int j = 1; j <= 2; ++j)
        for (std::size_t i = 0; i < fused[j].data.size(); ++i)
            CHECK(fused[j].data[i] ==
                  0.5 * (outs[j - 1].second.data[i] + outs[j].first.data[i]));

    std::vector<std::pair<LatentGrid, LatentGrid>> one = {outs[0]};
    std::vector<LatentGrid> pair_only = fuse_shared(one);
    REQUIRE(pair_only.size() == 2);
    CHECK(bitwise_equal(pair_only[0], outs[0].first));
    CHECK(bitwise_equal(pair_only[1], outs[0].second));

    CHECK_THROWS_WITH_AS(fuse_shared({}), "fuse_shared: no pair outputs", contract_error);
}

TEST_CASE("pair conditions attach the two anchors' structural maps") {
    Condition base;
    base.text = std::vector<double>{0.25, -0.5};
    base.structural_mask = std::vector<int>{1};

    std::vector<LatentGrid> maps;
    for (int i = 0; i < 3; ++i) maps.push_back(random_grid(1, 4, 4, 40 + i));

    Condition c1 = condition_for_pair(base, &maps, 1);
    REQUIRE(c1.structural_map.has_value());
    REQUIRE(c1.structural_map_b.has_value());
    CHECK(bitwise_equal(*c1.structural_map, maps[1]));
    CHECK(bitwise_equal(*c1.structural_map_b, maps[2]));
    CHECK(c1.text == base.text);
    CHECK(c1.structural_mask == base.structural_mask);

    Condition c0 = condition_for_pair(base, nullptr, 0);
    CHECK_FALSE(c0.structural_map.has_value());
    CHECK_FALSE(c0.structural_map_b.has_value());
    CHECK(c0.text == base.text);
}

TEST_CASE("feature cache round-trips records in memory") {
    FeatureCache cache;
    CHECK_FALSE(cache.on_disk());
    CHECK(cache.record_count() == 0);

    TapKey ka{1, 2, 0, TapKind::conv_activation};
    TapKey kb{1, 2, 0, TapKind::attention_kv};  // same slot, different kind
    TapKey kc{0, 5, 2, TapKind::conv_activation};
    TapRecord ra = make_record(1, 0, 2);
    TapRecord rb = make_record(2, 4, 0);
    TapRecord rc = make_record(3, 1, 1);
    cache.put(ka, make_record(1, 0, 2));
    cache.put(kb, make_record(2, 4, 0));
    cache.put(kc, make_record(3, 1, 1));
    CHECK(cache.record_count() == 3);

    TapRecord out;
    REQUIRE(cache.get(ka, out));
    CHECK(same_record(out, ra));
    REQUIRE(cache.get(kb, out));
    CHECK(same_record(out, rb));
    REQUIRE(cache.get(kc, out));
    CHECK(same_record(out, rc));
    CHECK_FALSE(cache.get(TapKey{9, 9, 9, TapKind::conv_activation}, out));

    CHECK_THROWS_WITH_AS(cache.put(ka, make_record(4, 1, 1)),
                         "feature cache: duplicate tap key (pair 1, timestep 2, layer 0)",
                         contract_error);
}

TEST_CASE("feature cache spills to disk and reads back bit-exactly") {
    const std::string path = temp_path("spill.asfc");
    std::filesystem::remove(path);

    std::vector<TapKey> keys = {
        {0, 0, 0, TapKind::conv_activation}, {0, 0, 1, TapKind::attention_kv},
        {0, 0, 2, TapKind::conv_activation}, {3, 7, 1, TapKind::attention_kv},
        {2, 1, 0, TapKind::conv_activation},
    };
    std::vector<TapRecord> recs;
    for (std::size_t i = 0; i < keys.size(); ++i)
        recs.push_back(make_record(100 + std::uint32_t(i), int(i % 3), int((i + 1) % 3) + 1));

    {
        FeatureCache cache = FeatureCache::spill_to(path);
        CHECK(cache.on_disk());
        for (std::size_t i = 0; i < keys.size(); ++i) {
            TapRecord copy = recs[i];
            cache.put(keys[i], std::move(copy));
        }
        CHECK(cache.record_count() == keys.size());

        TapRecord out;
        CHECK_THROWS_WITH_AS(cache.get(keys[0], out),
                             "feature cache: finish_writes() must run before reads",
                             contract_error);
        CHECK_THROWS_WITH_AS(cache.put(keys[0], make_record(9, 1, 1)),
                             "feature cache: duplicate tap key (pair 0, timestep 0, layer 0)",
                             contract_error);

        cache.finish_writes();
        for (std::size_t i = 0; i < keys.size(); ++i) {
            CAPTURE(i);
            REQUIRE(cache.get(keys[i], out));
            CHECK(same_record(out, recs[i]));
        }
        CHECK_FALSE(cache.get(TapKey{7, 7, 7, TapKind::conv_activation}, out));
        CHECK_THROWS_WITH_AS(cache.put(TapKey{8, 8, 8, TapKind::conv_activation},
                                       make_record(9, 1, 1)),
                             "feature cache is read-only", contract_error);
    }

    FeatureCache reader = FeatureCache::open(path);
    CHECK(reader.on_disk());
    CHECK(reader.record_count() == keys.size());
    TapRecord out;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        CAPTURE(i);
        REQUIRE(reader.get(keys[i], out));
        CHECK(same_record(out, recs[i]));
    }
    CHECK_FALSE(reader.get(TapKey{7, 7, 7, TapKind::conv_activation}, out));
    CHECK_THROWS_WITH_AS(reader.put(TapKey{6, 6, 6, TapKind::conv_activation},
                                    make_record(9, 1, 1)),
                         "feature cache is read-only", contract_error);
}

TEST_CASE("feature cache files carry a magic, version, and finalization marker") {
    CHECK_THROWS_WITH_AS(FeatureCache::open(temp_path("missing.asfc")),
                         doctest::Contains("cannot open feature cache file"), io_error);

    const std::string garbage = temp_path("garbage.asfc");
    {
        std::ofstream os(garbage, std::ios::binary);
        os << "this is not a cache file at all, padding padding padding";
    }
    CHECK_THROWS_WITH_AS(FeatureCache::open(garbage),
                         doctest::Contains("not a feature cache file"), format_error);

    const std::string future = temp_path("future.asfc");
    {
        std::ofstream os(future, std::ios::binary);
        os.write("ASFC", 4);
        const std::uint32_t version = 2;
        const std::uint64_t index_offset = 0;
        os.write(reinterpret_cast<const char*>(&version), sizeof(version));
        os.write(reinterpret_cast<const char*>(&index_offset), sizeof(index_offset));
    }
    CHECK_THROWS_WITH_AS(FeatureCache::open(future), "unsupported feature cache version 2",
                         format_error);

    const std::string unfinished = temp_path("unfinished.asfc");
    std::filesystem::remove(unfinished);
    {
        FeatureCache cache = FeatureCache::spill_to(unfinished);
        cache.put(TapKey{0, 0, 0, TapKind::conv_activation}, make_record(5, 1, 1));
        // dropped without finish_writes()
    }
    CHECK_THROWS_WITH_AS(FeatureCache::open(unfinished),
                         doctest::Contains("feature cache file was not finalized"), format_error);
}

TEST_CASE("anchor inversion matches a hand-rolled serial pair loop bit-for-bit") {
    const int n = 20;
    NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);
    AnalyticPairDenoiser den(sched, make_default_mixture(3, 8, 8));

    std::vector<LatentGrid> anchors;
    for (int i = 0; i < 4; ++i) anchors.push_back(random_grid(3, 8, 8, 300 + i));
    Condition cond;
    cond.text = std::vector<double>{0.1, -0.2, 0.3};

    // Reference: the public pieces composed in the documented order, one pair
    // at a time.
    std::vector<std::vector<LatentGrid>> ref_steps;
    {
        std::vector<LatentGrid> x = anchors;
        for (int t = 0; t <= n - 2; ++t) {
            std::vector<std::pair<LatentGrid, LatentGrid>> stepped;
            for (std::size_t p = 0; p + 1 < x.size(); ++p) {
                LatentGrid ea, eb;
                den.eps_pair(x[p], x[p + 1], t, cond, nullptr, nullptr, nullptr, ea, eb);
                stepped.emplace_back(ddim_invert_step(x[p], ea, t, sched),
                                     ddim_invert_step(x[p + 1], eb, t, sched));
            }
            x = fuse_shared(stepped);
            ref_steps.push_back(x);
        }
    }

    std::vector<std::vector<LatentGrid>> lib_steps;
    std::vector<std::size_t> pair_counts;
    StageOptions opt;
    opt.on_step = [&](int t, const std::vector<LatentGrid>& xs) {
        CHECK(t == int(lib_steps.size()));
        lib_steps.push_back(xs);
    };
    opt.on_pair_copies = [&](int, const std::vector<std::pair<LatentGrid, LatentGrid>>& st) {
        pair_counts.push_back(st.size());
    };
    std::vector<LatentGrid> noised = invert_anchors(anchors, cond, sched, den, nullptr, nullptr, opt);

    REQUIRE(lib_steps.size() == std::size_t(n - 1));
    REQUIRE(pair_counts.size() == std::size_t(n - 1));
    for (std::size_t c : pair_counts) CHECK(c == 3);  // 4 anchors -> 3 pairs
    for (std::size_t s = 0; s < lib_steps.size(); ++s) {
        CAPTURE(s);
        CHECK(bitwise_equal(lib_steps[s], ref_steps[s]));
    }
    CHECK(bitwise_equal(noised, ref_steps.back()));
}

TEST_CASE("identical anchors stay identical through inversion") {
    const int n = 12;
    NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);
    AnalyticPairDenoiser den(sched, make_default_mixture(2, 6, 6));

    LatentGrid seed_frame = random_grid(2, 6, 6, 77);
    std::vector<LatentGrid> anchors(3, seed_frame);

    int steps_seen = 0;
    StageOptions opt;
    opt.on_step = [&](int, const std::vector<LatentGrid>& xs) {
        ++steps_seen;
        REQUIRE(xs.size() == 3);
        CHECK(bitwise_equal(xs[1], xs[0]));
        CHECK(bitwise_equal(xs[2], xs[0]));
    };
    std::ostringstream log;
    opt.fusion_log = &log;
    std::vector<LatentGrid> noised = invert_anchors(anchors, Condition{}, sched, den, nullptr,
                                                    nullptr, opt);
    CHECK(steps_seen == n - 1);
    CHECK(bitwise_equal(noised[1], noised[0]));
    CHECK(bitwise_equal(noised[2], noised[0]));
    // Identical neighbours leave nothing for fusion to reconcile.
    std::string line;
    std::istringstream is(log.str());
    while (std::getline(is, line)) {
        CHECK(line.find("max_shared_gap=0.000000e+00") != std::string::npos);
    }
}

TEST_CASE("stage results are bit-identical across thread counts") {
    const int n = 8;
    NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);
    PairNetDenoiser den(sched, make_pairnet_weights(PairNetConfig{}, 424242));

    std::vector<LatentGrid> anchors;
    for (int i = 0; i < 5; ++i) anchors.push_back(random_grid(3, 16, 16, 500 + i));
    Condition inv_cond;
    inv_cond.text = std::vector<double>(8, 0.0);

    FeatureCache cache_serial;
    std::vector<LatentGrid> noised_serial =
        invert_anchors(anchors, inv_cond, sched, den, &cache_serial);

    ThreadPool pool(4);
    StageOptions par;
    par.pool = &pool;
    FeatureCache cache_pool;
    std::vector<LatentGrid> noised_pool =
        invert_anchors(anchors, inv_cond, sched, den, &cache_pool, nullptr, par);

    CHECK(bitwise_equal(noised_pool, noised_serial));
    CHECK(cache_pool.record_count() == cache_serial.record_count());

    Condition edit_cond;
    edit_cond.text = std::vector<double>(8, 0.4);
    GuidanceConfig g;
    g.text_scale = 2.5;
    g.structural_scale = 0.0;
    InjectionConfig inj;
    inj.attn_ratio = 0.5;
    inj.conv_ratio = 0.75;

    std::vector<LatentGrid> edited_serial =
        edit_anchors(noised_serial, &cache_serial, edit_cond, g, inj, sched, den);
    std::vector<LatentGrid> edited_pool =
        edit_anchors(noised_pool, &cache_pool, edit_cond, g, inj, sched, den, nullptr, par);
    CHECK(bitwise_equal(edited_pool, edited_serial));
}

TEST_CASE("inversion records every tap the editor will replay") {
    const int n = 6;
    NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);
    PairNetDenoiser den(sched, make_pairnet_weights(PairNetConfig{}, 31337));

    std::vector<LatentGrid> anchors;
    for (int i = 0; i < 3; ++i) anchors.push_back(random_grid(3, 16, 16, 600 + i));

    FeatureCache cache;
    invert_anchors(anchors, Condition{}, sched, den, &cache);

    // Three tap records per (pair, timestep): conv layer 0, attention layer 1,
    // conv layer 2. The noisiest timestep is captured by the extra pass.
    CHECK(cache.record_count() == std::size_t(2 * n * 3));
    TapRecord rec;
    for (int p = 0; p < 2; ++p) {
        for (int t = 0; t < n; ++t) {
            CAPTURE(p);
            CAPTURE(t);
            REQUIRE(cache.get(TapKey{p, t, 0, TapKind::conv_activation}, rec));
            CHECK(rec.grids.size() == 2);  // one activation grid per frame
            REQUIRE(cache.get(TapKey{p, t, 1, TapKind::attention_kv}, rec));
            CHECK(rec.mats.size() == 4);  // K and V for both frames
            REQUIRE(cache.get(TapKey{p, t, 2, TapKind::conv_activation}, rec));
            CHECK(rec.grids.size() == 2);
        }
    }
    CHECK_FALSE(cache.get(TapKey{2, 0, 0, TapKind::conv_activation}, rec));
    CHECK_FALSE(cache.get(TapKey{0, n, 0, TapKind::conv_activation}, rec));

    AnalyticPairDenoiser plain(sched, make_default_mixture(3, 8, 8));
    std::vector<LatentGrid> small = {random_grid(3, 8, 8, 1), random_grid(3, 8, 8, 2)};
    FeatureCache c2;
    CHECK_THROWS_WITH_AS(invert_anchors(small, Condition{}, sched, plain, &c2),
                         "this denoiser cannot capture feature taps", unsupported_error);
}

TEST_CASE("stage entry points reject malformed anchor sets") {
    NoiseSchedule sched = make_linear_schedule(4, 1e-7, 0.15 / 4);
    AnalyticPairDenoiser den(sched, make_default_mixture(2, 4, 4));
    GuidanceConfig g;
    InjectionConfig inj;
    inj.attn_ratio = 0.0;
    inj.conv_ratio = 0.0;

    std::vector<LatentGrid> one = {random_grid(2, 4, 4, 5)};
    CHECK_THROWS_WITH_AS(invert_anchors(one, Condition{}, sched, den, nullptr),
                         "invert_anchors: need at least two anchor latents, got 1",
                         contract_error);
    CHECK_THROWS_WITH_AS(edit_anchors(one, nullptr, Condition{}, g, inj, sched, den),
                         "edit_anchors: need at least two anchor latents, got 1", contract_error);

    std::vector<LatentGrid> mismatched = {random_grid(2, 4, 4, 5), random_grid(2, 4, 5, 6)};
    CHECK_THROWS_WITH_AS(invert_anchors(mismatched, Condition{}, sched, den, nullptr),
                         doctest::Contains("anchor latents"), contract_error);

    std::vector<LatentGrid> pairlike = {random_grid(2, 4, 4, 5), random_grid(2, 4, 4, 6)};
    std::vector<LatentGrid> maps = {random_grid(2, 4, 4, 7)};  // one short
    CHECK_THROWS_WITH_AS(invert_anchors(pairlike, Condition{}, sched, den, nullptr, &maps),
                         "invert_anchors: per-anchor structural maps must match the anchor count",
                         contract_error);
    CHECK_THROWS_WITH_AS(edit_anchors(pairlike, nullptr, Condition{}, g, inj, sched, den, &maps),
                         "edit_anchors: per-anchor structural maps must match the anchor count",
                         contract_error);
}

TEST_CASE("fusion log lines report the stage, timestep, and copy gap") {
    const int n = 3;
    NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);
    AnalyticPairDenoiser den(sched, make_default_mixture(3, 4, 4));

    std::vector<LatentGrid> two = {random_grid(3, 4, 4, 1), random_grid(3, 4, 4, 2)};
    std::ostringstream invert_log;
    StageOptions opt;
    opt.fusion_log = &invert_log;
    invert_anchors(two, Condition{}, sched, den, nullptr, nullptr, opt);
    // A single pair has no shared interior frame, so the gap is exactly zero.
    CHECK(invert_log.str() ==
          "invert t=0 pairs=1 max_shared_gap=0.000000e+00\n"
          "invert t=1 pairs=1 max_shared_gap=0.000000e+00\n");

    std::vector<LatentGrid> three = {random_grid(3, 4, 4, 3), random_grid(3, 4, 4, 4),
                                     random_grid(3, 4, 4, 5)};
    std::vector<LatentGrid> noised = invert_anchors(three, Condition{}, sched, den, nullptr);

    std::ostringstream edit_log;
    std::vector<double> gaps;
    StageOptions eopt;
    eopt.fusion_log = &edit_log;
    eopt.on_pair_copies = [&](int, const std::vector<std::pair<LatentGrid, LatentGrid>>& st) {
        double gap = 0.0;
        for (std::size_t p = 1; p < st.size(); ++p)
            gap = std::max(gap, max_abs(st[p - 1].second, st[p].first));
        gaps.push_back(gap);
    };
    GuidanceConfig g;
    g.text_scale = 1.0;
    g.structural_scale = 0.0;
    InjectionConfig inj;
    inj.attn_ratio = 0.0;
    inj.conv_ratio = 0.0;
    edit_anchors(noised, nullptr, Condition{}, g, inj, sched, den, nullptr, eopt);

    std::istringstream is(edit_log.str());
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(is, line)) lines.push_back(line);
    REQUIRE(lines.size() == std::size_t(n - 1));
    REQUIRE(gaps.size() == lines.size());
    for (std::size_t i = 0; i < lines.size(); ++i) {
        CAPTURE(i);
        char expect[128];
        std::snprintf(expect, sizeof(expect), "edit t=%d pairs=2 max_shared_gap=%.6e",
                      n - 1 - int(i), gaps[i]);
        CHECK(lines[i] == expect);
    }
}

TEST_CASE("editing inverts the inversion when guidance reproduces the inversion condition") {
    GuidanceConfig g;
    g.text_scale = 1.0;      // reproduces the conditioned eps exactly
    g.structural_scale = 0.0;
    InjectionConfig inj;
    inj.attn_ratio = 0.0;
    inj.conv_ratio = 0.0;

    for (auto [n, tol] : {std::pair<int, double>{50, 1e-3}, {200, 2e-4}}) {
        CAPTURE(n);
        NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);
        AnalyticPairDenoiser den(sched, make_default_mixture(3, 8, 8));
        std::vector<LatentGrid> anchors;
        for (int i = 0; i < 4; ++i) anchors.push_back(random_grid(3, 8, 8, 100 + i));
        Condition cond;

        std::vector<LatentGrid> noised = invert_anchors(anchors, cond, sched, den, nullptr);
        std::vector<LatentGrid> back = edit_anchors(noised, nullptr, cond, g, inj, sched, den);
        REQUIRE(back.size() == anchors.size());
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            CAPTURE(i);
            CHECK(max_abs(back[i], anchors[i]) <= tol);
        }
    }
}

TEST_CASE("replaying cached features pulls edited anchors toward the originals") {
    const int n = 10;
    NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);

    for (std::uint32_t seed : {1u, 2u, 3u}) {
        CAPTURE(seed);
        PairNetDenoiser den(sched, make_pairnet_weights(PairNetConfig{}, 9000 + seed));
        std::vector<LatentGrid> anchors;
        for (int i = 0; i < 3; ++i) anchors.push_back(random_grid(3, 16, 16, seed * 10 + i));

        Condition inv_cond;
        inv_cond.text = std::vector<double>(8, 0.0);
        FeatureCache cache;
        std::vector<LatentGrid> noised = invert_anchors(anchors, inv_cond, sched, den, &cache);

        Condition edit_cond;
        edit_cond.text = std::vector<double>(8, 0.5);
        GuidanceConfig g;
        g.text_scale = 3.0;
        g.structural_scale = 0.0;
        InjectionConfig full;
        full.attn_ratio = 1.0;
        full.conv_ratio = 1.0;
        InjectionConfig off;
        off.attn_ratio = 0.0;
        off.conv_ratio = 0.0;

        std::vector<LatentGrid> with_taps =
            edit_anchors(noised, &cache, edit_cond, g, full, sched, den);
        std::vector<LatentGrid> without_taps =
            edit_anchors(noised, nullptr, edit_cond, g, off, sched, den);

        double d_taps = 0.0, d_plain = 0.0;
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            d_taps += l2_dist(with_taps[i], anchors[i]);
            d_plain += l2_dist(without_taps[i], anchors[i]);
        }
        CHECK(d_taps < d_plain);
    }
}

TEST_CASE("editing without taps or cache fails loudly") {
    const int n = 4;
    NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);
    GuidanceConfig g;
    InjectionConfig full;
    full.attn_ratio = 1.0;
    full.conv_ratio = 1.0;

    std::vector<LatentGrid> pair8 = {random_grid(3, 8, 8, 1), random_grid(3, 8, 8, 2)};
    AnalyticPairDenoiser plain(sched, make_default_mixture(3, 8, 8));
    FeatureCache cache;
    CHECK_THROWS_WITH_AS(edit_anchors(pair8, &cache, Condition{}, g, full, sched, plain),
                         "this denoiser cannot replay feature taps", unsupported_error);

    PairNetDenoiser net(sched, make_pairnet_weights(PairNetConfig{}, 5));
    std::vector<LatentGrid> pair16 = {random_grid(3, 16, 16, 1), random_grid(3, 16, 16, 2)};
    CHECK_THROWS_WITH_AS(edit_anchors(pair16, nullptr, Condition{}, g, full, sched, net),
                         "edit_anchors: feature injection requested without an inversion cache",
                         contract_error);

    InjectionConfig off;
    off.attn_ratio = 0.0;
    off.conv_ratio = 0.0;
    GuidanceConfig passthrough;
    passthrough.text_scale = 1.0;
    passthrough.structural_scale = 0.0;
    CHECK_NOTHROW(edit_anchors(pair16, nullptr, Condition{}, passthrough, off, sched, net));
}

TEST_CASE("per-step fusion keeps anchors at least as coherent as the ablation") {
    const int n = 50;
    NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);
    AnalyticPairDenoiser den(sched, make_default_mixture(3, 8, 8));

    // Anchors sit near distinct mixture modes so adjacent pairs pull against
    // each other and fusion has real disagreements to reconcile.
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> jig(-0.02, 0.02);
    const double levels[5] = {0.2, 0.8, 0.2, 0.5, 0.8};
    std::vector<LatentGrid> anchors;
    for (int i = 0; i < 5; ++i) {
        LatentGrid grid(3, 8, 8, levels[i]);
        for (auto& v : grid.data) v += jig(rng);
        anchors.push_back(grid);
    }

    Condition cond;
    std::vector<LatentGrid> noised = invert_anchors(anchors, cond, sched, den, nullptr);

    GuidanceConfig g;
    g.text_scale = 1.0;
    g.structural_scale = 0.0;
    InjectionConfig inj;
    inj.attn_ratio = 0.0;
    inj.conv_ratio = 0.0;

    auto variance_of = [](const std::vector<LatentGrid>& xs) {
        std::vector<double> means;
        for (const auto& x : xs) means.push_back(grid_mean(x));
        double mu = 0.0;
        for (double m : means) mu += m;
        mu /= double(means.size());
        double v = 0.0;
        for (double m : means) v += (m - mu) * (m - mu);
        return v / double(means.size());
    };

    std::vector<double> v_fused, v_ablation;
    StageOptions fo;
    fo.on_step = [&](int, const std::vector<LatentGrid>& xs) { v_fused.push_back(variance_of(xs)); };
    StageOptions ao;
    ao.on_step = [&](int, const std::vector<LatentGrid>& xs) {
        v_ablation.push_back(variance_of(xs));
    };

    std::vector<LatentGrid> fused =
        edit_anchors(noised, nullptr, cond, g, inj, sched, den, nullptr, fo, true);
    std::vector<LatentGrid> ablated =
        edit_anchors(noised, nullptr, cond, g, inj, sched, den, nullptr, ao, false);

    REQUIRE(v_fused.size() == std::size_t(n - 1));
    REQUIRE(v_ablation.size() == std::size_t(n - 1));
    int non_increasing = 0;
    for (std::size_t t = 0; t < v_fused.size(); ++t)
        if (v_fused[t] <= v_ablation[t] + 1e-15) ++non_increasing;
    // The cross-anchor variance under per-step fusion must not exceed the
    // no-fusion ablation on at least 90% of timesteps.
    CHECK(non_increasing * 10 >= int(v_fused.size()) * 9);
    CHECK(variance_of(fused) <= variance_of(ablated));
}

TEST_CASE("disabling fusion evolves every pair independently") {
    const int n = 9;
    NoiseSchedule sched = make_linear_schedule(n, 1e-7, 0.15 / n);
    AnalyticPairDenoiser den(sched, make_default_mixture(3, 6, 6));

    std::vector<LatentGrid> anchors;
    for (int i = 0; i < 4; ++i) anchors.push_back(random_grid(3, 6, 6, 800 + i));
    Condition cond;
    std::vector<LatentGrid> noised = invert_anchors(anchors, cond, sched, den, nullptr);

    GuidanceConfig g;
    g.text_scale = 1.0;
    g.structural_scale = 0.0;
    InjectionConfig inj;
    inj.attn_ratio = 0.0;
    inj.conv_ratio = 0.0;

    // Reference: each pair runs its own full trajectory with no exchange, and
    // shared frames are averaged only once at the end.
    std::vector<std::pair<LatentGrid, LatentGrid>> pstate;
    for (std::size_t p = 0; p + 1 < noised.size(); ++p)
        pstate.emplace_back(noised[p], noised[p + 1]);
    for (int t = n - 1; t >= 1; --t) {
        for (auto& [xa, xb] : pstate) {
            LatentGrid ea, eb;
            guided_pair_eps(xa, xb, t, cond, g, den, nullptr, nullptr, nullptr, ea, eb);
            xa = ddim_step(xa, ea, t, sched);
            xb = ddim_step(xb, eb, t, sched);
        }
    }
    std::vector<LatentGrid> ref = fuse_shared(pstate);

    std::vector<LatentGrid> ablated =
        edit_anchors(noised, nullptr, cond, g, inj, sched, den, nullptr, {}, false);
    CHECK(bitwise_equal(ablated, ref));

    std::vector<LatentGrid> fused = edit_anchors(noised, nullptr, cond, g, inj, sched, den);
    REQUIRE(fused.size() == ablated.size());
    double diff = 0.0;
    for (std::size_t i = 0; i < fused.size(); ++i) diff = std::max(diff, max_abs(fused[i], ablated[i]));
    CHECK(diff > 0.0);  // fusion feeds back into the trajectories, so they part ways
}
