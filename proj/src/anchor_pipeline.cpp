#include "anchorkit/anchor_pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "anchorkit/common.hpp"

namespace anchorkit {

AnchorSet sample_anchors(int num_frames, int k) {
    require(num_frames >= 2, "sample_anchors: need at least 2 frames, got " +
                                 std::to_string(num_frames));
    require(k >= 1, "sample_anchors: interval must be >= 1, got " + std::to_string(k));
    AnchorSet set;
    set.interval = k;
    for (int i = 0; i < num_frames; i += k) set.frame_indices.push_back(i);
    if (set.frame_indices.back() != num_frames - 1) set.frame_indices.push_back(num_frames - 1);
    return set;
}

int injection_step_count(double ratio, int num_steps) {
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw config_error("injection ratio must lie in [0, 1], got " + std::to_string(ratio));
    require(num_steps >= 1, "injection_step_count: num_steps must be positive");
    return static_cast<int>(std::lround(ratio * num_steps));
}

LatentGrid fuse_pair_copies(const LatentGrid& left_copy, const LatentGrid& right_copy) {
    require_same_shape(left_copy, right_copy, "shared frame copies");
    LatentGrid out(left_copy.channels, left_copy.height, left_copy.width);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = 0.5 * (left_copy.data[i] + right_copy.data[i]);
    return out;
}

std::vector<LatentGrid> fuse_shared(
    const std::vector<std::pair<LatentGrid, LatentGrid>>& pair_outputs) {
    require(!pair_outputs.empty(), "fuse_shared: no pair outputs");
    const int pairs = static_cast<int>(pair_outputs.size());
    std::vector<LatentGrid> out;
    out.reserve(pair_outputs.size() + 1);
    out.push_back(pair_outputs.front().first);
    for (int j = 1; j < pairs; ++j)
        out.push_back(fuse_pair_copies(pair_outputs[j - 1].second, pair_outputs[j].first));
    out.push_back(pair_outputs.back().second);
    return out;
}

// ---------------------------------------------------------------------------
// FeatureCache

namespace {

constexpr char k_cache_magic[4] = {'A', 'S', 'F', 'C'};
constexpr std::uint32_t k_cache_version = 1;

void cache_write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void cache_write_u64(std::ostream& os, std::uint64_t v) {
    cache_write_u32(os, static_cast<std::uint32_t>(v));
    cache_write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t cache_read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw format_error("feature cache: unexpected end of file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t cache_read_u64(std::istream& is) {
    std::uint64_t lo = cache_read_u32(is);
    std::uint64_t hi = cache_read_u32(is);
    return lo | (hi << 32);
}

void cache_write_doubles(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void cache_read_doubles(std::istream& is, std::vector<double>& v) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw format_error("feature cache: truncated record payload");
}

void write_record(std::ostream& os, const TapKey& key, const TapRecord& rec) {
    cache_write_u32(os, static_cast<std::uint32_t>(key.pair));
    cache_write_u32(os, static_cast<std::uint32_t>(key.timestep));
    cache_write_u32(os, static_cast<std::uint32_t>(key.layer));
    cache_write_u32(os, static_cast<std::uint32_t>(key.kind));
    cache_write_u32(os, static_cast<std::uint32_t>(rec.mats.size()));
    for (const Matrix& m : rec.mats) {
        cache_write_u32(os, static_cast<std::uint32_t>(m.rows));
        cache_write_u32(os, static_cast<std::uint32_t>(m.cols));
        cache_write_doubles(os, m.data);
    }
    cache_write_u32(os, static_cast<std::uint32_t>(rec.grids.size()));
    for (const LatentGrid& g : rec.grids) {
        cache_write_u32(os, static_cast<std::uint32_t>(g.channels));
        cache_write_u32(os, static_cast<std::uint32_t>(g.height));
        cache_write_u32(os, static_cast<std::uint32_t>(g.width));
        cache_write_doubles(os, g.data);
    }
}

TapKey read_record_key(std::istream& is) {
    TapKey key;
    key.pair = static_cast<int>(cache_read_u32(is));
    key.timestep = static_cast<int>(cache_read_u32(is));
    key.layer = static_cast<int>(cache_read_u32(is));
    std::uint32_t kind = cache_read_u32(is);
    if (kind > 1) throw format_error("feature cache: bad tap kind " + std::to_string(kind));
    key.kind = static_cast<TapKind>(kind);
    return key;
}

TapRecord read_record_body(std::istream& is) {
    TapRecord rec;
    std::uint32_t n_mats = cache_read_u32(is);
    if (n_mats > 64) throw format_error("feature cache: implausible matrix count");
    rec.mats.reserve(n_mats);
    for (std::uint32_t i = 0; i < n_mats; ++i) {
        std::uint32_t rows = cache_read_u32(is);
        std::uint32_t cols = cache_read_u32(is);
        if (rows == 0 || cols == 0 || rows > (1u << 20) || cols > (1u << 20))
            throw format_error("feature cache: implausible matrix shape");
        Matrix m(static_cast<int>(rows), static_cast<int>(cols));
        cache_read_doubles(is, m.data);
        rec.mats.push_back(std::move(m));
    }
    std::uint32_t n_grids = cache_read_u32(is);
    if (n_grids > 64) throw format_error("feature cache: implausible grid count");
    rec.grids.reserve(n_grids);
    for (std::uint32_t i = 0; i < n_grids; ++i) {
        std::uint32_t c = cache_read_u32(is);
        std::uint32_t h = cache_read_u32(is);
        std::uint32_t w = cache_read_u32(is);
        if (c == 0 || h == 0 || w == 0 || c > (1u << 16) || h > (1u << 20) || w > (1u << 20))
            throw format_error("feature cache: implausible grid shape");
        LatentGrid g(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
        cache_read_doubles(is, g.data);
        rec.grids.push_back(std::move(g));
    }
    return rec;
}

}  // namespace

FeatureCache FeatureCache::spill_to(const std::string& path) {
    FeatureCache cache;
    cache.mode_ = Mode::spill;
    cache.path_ = path;
    cache.out_.open(path, std::ios::binary | std::ios::trunc);
    if (!cache.out_) throw io_error("cannot create feature cache file: " + path);
    cache.out_.write(k_cache_magic, 4);
    cache_write_u32(cache.out_, k_cache_version);
    cache_write_u64(cache.out_, 0);  // index offset, patched by finish_writes
    return cache;
}

FeatureCache FeatureCache::open(const std::string& path) {
    FeatureCache cache;
    cache.mode_ = Mode::read;
    cache.path_ = path;
    cache.in_.open(path, std::ios::binary);
    if (!cache.in_) throw io_error("cannot open feature cache file: " + path);
    char magic[4];
    cache.in_.read(magic, 4);
    if (!cache.in_ || std::memcmp(magic, k_cache_magic, 4) != 0)
        throw format_error("not a feature cache file: " + path);
    std::uint32_t version = cache_read_u32(cache.in_);
    if (version != k_cache_version)
        throw format_error("unsupported feature cache version " + std::to_string(version));
    std::uint64_t index_offset = cache_read_u64(cache.in_);
    if (index_offset == 0)
        throw format_error("feature cache file was not finalized: " + path);
    cache.in_.seekg(static_cast<std::streamoff>(index_offset));
    std::uint64_t count = cache_read_u64(cache.in_);
    if (count > (1ull << 32)) throw format_error("feature cache: implausible record count");
    for (std::uint64_t i = 0; i < count; ++i) {
        TapKey key = read_record_key(cache.in_);
        std::uint64_t off = cache_read_u64(cache.in_);
        cache.offsets_[key] = off;
    }
    return cache;
}

void FeatureCache::put(const TapKey& key, TapRecord&& rec) {
    std::lock_guard<std::mutex> lock(*mu_);
    if (mode_ == Mode::read)
        throw contract_error("feature cache is read-only");
    if (mode_ == Mode::memory) {
        auto [it, inserted] = mem_.emplace(key, std::move(rec));
        (void)it;
        require(inserted, "feature cache: duplicate tap key (pair " + std::to_string(key.pair) +
                              ", timestep " + std::to_string(key.timestep) + ", layer " +
                              std::to_string(key.layer) + ")");
        return;
    }
    auto [it, inserted] = offsets_.emplace(key, static_cast<std::uint64_t>(out_.tellp()));
    (void)it;
    require(inserted, "feature cache: duplicate tap key (pair " + std::to_string(key.pair) +
                          ", timestep " + std::to_string(key.timestep) + ", layer " +
                          std::to_string(key.layer) + ")");
    write_record(out_, key, rec);
    if (!out_) throw io_error("failed writing feature cache record to " + path_);
}

bool FeatureCache::get(const TapKey& key, TapRecord& out) const {
    std::lock_guard<std::mutex> lock(*mu_);
    if (mode_ == Mode::memory) {
        auto it = mem_.find(key);
        if (it == mem_.end()) return false;
        out = it->second;
        return true;
    }
    if (mode_ == Mode::spill)
        throw contract_error("feature cache: finish_writes() must run before reads");
    auto it = offsets_.find(key);
    if (it == offsets_.end()) return false;
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(it->second));
    TapKey stored = read_record_key(in_);
    if (!(stored == key)) throw format_error("feature cache: index does not match records");
    out = read_record_body(in_);
    return true;
}

void FeatureCache::finish_writes() {
    std::lock_guard<std::mutex> lock(*mu_);
    if (mode_ != Mode::spill) return;
    std::uint64_t index_offset = static_cast<std::uint64_t>(out_.tellp());
    cache_write_u64(out_, static_cast<std::uint64_t>(offsets_.size()));
    for (const auto& [key, off] : offsets_) {
        cache_write_u32(out_, static_cast<std::uint32_t>(key.pair));
        cache_write_u32(out_, static_cast<std::uint32_t>(key.timestep));
        cache_write_u32(out_, static_cast<std::uint32_t>(key.layer));
        cache_write_u32(out_, static_cast<std::uint32_t>(key.kind));
        cache_write_u64(out_, off);
    }
    out_.seekp(8);
    cache_write_u64(out_, index_offset);
    out_.flush();
    if (!out_) throw io_error("failed finalizing feature cache " + path_);
    out_.close();
    in_.open(path_, std::ios::binary);
    if (!in_) throw io_error("cannot reopen feature cache file: " + path_);
    mode_ = Mode::read;
}

std::size_t FeatureCache::record_count() const {
    std::lock_guard<std::mutex> lock(*mu_);
    return mode_ == Mode::memory ? mem_.size() : offsets_.size();
}

// ---------------------------------------------------------------------------
// Stage 1 passes

Condition condition_for_pair(const Condition& cond, const std::vector<LatentGrid>* per_anchor_maps,
                             int pair) {
    if (!per_anchor_maps) return cond;
    Condition c = cond;
    c.structural_map = (*per_anchor_maps)[pair];
    c.structural_map_b = (*per_anchor_maps)[pair + 1];
    return c;
}

namespace {

void check_anchor_inputs(const std::vector<LatentGrid>& anchors,
                         const std::vector<LatentGrid>* per_anchor_maps, const char* where) {
    require(anchors.size() >= 2,
            std::string(where) + ": need at least two anchor latents, got " +
                std::to_string(anchors.size()));
    for (const LatentGrid& a : anchors) require_same_shape(anchors.front(), a, "anchor latents");
    if (per_anchor_maps)
        require(per_anchor_maps->size() == anchors.size(),
                std::string(where) + ": per-anchor structural maps must match the anchor count");
}

void run_pairs(ThreadPool* pool, int pairs, const std::function<void(int)>& body) {
    if (pool)
        pool->parallel_for(pairs, body);
    else
        for (int p = 0; p < pairs; ++p) body(p);
}

double max_shared_gap(const std::vector<std::pair<LatentGrid, LatentGrid>>& stepped) {
    double gap = 0.0;
    for (std::size_t p = 1; p < stepped.size(); ++p)
        gap = std::max(gap, max_abs_diff(stepped[p - 1].second, stepped[p].first));
    return gap;
}

void log_fusion(std::ostream* log, const char* stage, int t,
                const std::vector<std::pair<LatentGrid, LatentGrid>>& stepped) {
    if (!log) return;
    char line[128];
    std::snprintf(line, sizeof(line), "%s t=%d pairs=%zu max_shared_gap=%.6e", stage, t,
                  stepped.size(), max_shared_gap(stepped));
    (*log) << line << '\n';
}

}  // namespace

std::vector<LatentGrid> invert_anchors(const std::vector<LatentGrid>& anchors,
                                       const Condition& inv_cond, const NoiseSchedule& schedule,
                                       const PairDenoiser& den, FeatureCache* cache,
                                       const std::vector<LatentGrid>* per_anchor_maps,
                                       const StageOptions& opt) {
    check_anchor_inputs(anchors, per_anchor_maps, "invert_anchors");
    if (cache && !den.supports_taps())
        throw unsupported_error("this denoiser cannot capture feature taps");
    const int pairs = static_cast<int>(anchors.size()) - 1;
    const int n = schedule.num_steps;
    std::vector<LatentGrid> x = anchors;
    std::vector<std::pair<LatentGrid, LatentGrid>> stepped(pairs);
    for (int t = 0; t <= n - 2; ++t) {
        std::function<void(int)> body = [&](int p) {
            Condition cp = condition_for_pair(inv_cond, per_anchor_maps, p);
            TapIO io;
            io.mode = TapIO::Mode::capture;
            io.store = cache;
            io.pair_index = p;
            LatentGrid ea, eb;
            den.eps_pair(x[p], x[p + 1], t, cp, cache ? &io : nullptr, nullptr, nullptr, ea, eb);
            stepped[p] = {ddim_invert_step(x[p], ea, t, schedule),
                          ddim_invert_step(x[p + 1], eb, t, schedule)};
        };
        run_pairs(opt.pool, pairs, body);
        log_fusion(opt.fusion_log, "invert", t, stepped);
        if (opt.on_pair_copies) opt.on_pair_copies(t, stepped);
        x = fuse_shared(stepped);
        if (opt.on_step) opt.on_step(t, x);
    }
    if (cache) {
        // Editing consumes taps at t = n-1 first, but the inversion recursion
        // stops stepping at t = n-2; one extra capture-only evaluation of the
        // fully noised latents fills in the noisiest timestep.
        std::function<void(int)> body = [&](int p) {
            Condition cp = condition_for_pair(inv_cond, per_anchor_maps, p);
            TapIO io;
            io.mode = TapIO::Mode::capture;
            io.store = cache;
            io.pair_index = p;
            LatentGrid ea, eb;
            den.eps_pair(x[p], x[p + 1], n - 1, cp, &io, nullptr, nullptr, ea, eb);
        };
        run_pairs(opt.pool, pairs, body);
    }
    return x;
}

std::vector<LatentGrid> edit_anchors(const std::vector<LatentGrid>& noised, FeatureCache* cache,
                                     const Condition& edit_cond, const GuidanceConfig& guidance,
                                     const InjectionConfig& inj, const NoiseSchedule& schedule,
                                     const PairDenoiser& den,
                                     const std::vector<LatentGrid>* per_anchor_maps,
                                     const StageOptions& opt, bool fuse) {
    check_anchor_inputs(noised, per_anchor_maps, "edit_anchors");
    const int n = schedule.num_steps;
    const int attn_steps = injection_step_count(inj.attn_ratio, n);
    const int conv_steps = injection_step_count(inj.conv_ratio, n);
    const bool wants_injection = attn_steps > 0 || conv_steps > 0;
    if (wants_injection && !den.supports_taps())
        throw unsupported_error("this denoiser cannot replay feature taps");
    if (wants_injection && !cache)
        throw contract_error("edit_anchors: feature injection requested without an inversion cache");
    const int pairs = static_cast<int>(noised.size()) - 1;

    // fuse = false is the ablation: pairs evolve independently and shared
    // frames are only reconciled once at the very end.
    std::vector<std::pair<LatentGrid, LatentGrid>> pstate(pairs);
    std::vector<LatentGrid> x;
    if (fuse) {
        x = noised;
    } else {
        for (int p = 0; p < pairs; ++p) pstate[p] = {noised[p], noised[p + 1]};
    }

    std::vector<std::pair<LatentGrid, LatentGrid>> stepped(pairs);
    for (int t = n - 1; t >= 1; --t) {
        const int step_index = (n - 1) - t;  // 0 = noisiest editing step
        const bool attn_on = wants_injection && step_index < attn_steps;
        const bool conv_on = wants_injection && step_index < conv_steps;
        const bool inject = attn_on || conv_on;
        std::function<void(int)> body = [&](int p) {
            Condition cp = condition_for_pair(edit_cond, per_anchor_maps, p);
            TapIO io;
            io.mode = TapIO::Mode::inject;
            io.store = cache;
            io.pair_index = p;
            io.attention_active = attn_on;
            io.conv_active = conv_on;
            const LatentGrid& xa = fuse ? x[p] : pstate[p].first;
            const LatentGrid& xb = fuse ? x[p + 1] : pstate[p].second;
            LatentGrid ea, eb;
            guided_pair_eps(xa, xb, t, cp, guidance, den, inject ? &io : nullptr, nullptr, nullptr,
                            ea, eb, nullptr);
            stepped[p] = {ddim_step(xa, ea, t, schedule), ddim_step(xb, eb, t, schedule)};
        };
        run_pairs(opt.pool, pairs, body);
        log_fusion(opt.fusion_log, "edit", t, stepped);
        if (opt.on_pair_copies) opt.on_pair_copies(t, stepped);
        if (fuse) {
            x = fuse_shared(stepped);
            if (opt.on_step) opt.on_step(t, x);
        } else {
            pstate = stepped;
            if (opt.on_step) opt.on_step(t, fuse_shared(stepped));
        }
    }
    if (!fuse) x = fuse_shared(pstate);
    return x;
}

}  // namespace anchorkit
