#ifndef ANCHORKIT_ANCHOR_PIPELINE_HPP
#define ANCHORKIT_ANCHOR_PIPELINE_HPP

#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "anchorkit/denoiser.hpp"
#include "anchorkit/schedule.hpp"
#include "anchorkit/threading.hpp"

namespace anchorkit {

// Anchor frame indices: {0, K, 2K, ...} plus the last frame when it is not
// already a multiple of K.
struct AnchorSet {
    std::vector<int> frame_indices;
    int interval = 24;
};

AnchorSet sample_anchors(int num_frames, int k);

struct InjectionConfig {
    double attn_ratio = 0.44;
    double conv_ratio = 0.65;
};

// round(ratio * num_steps): how many of the noisiest editing steps replay
// cached features.
int injection_step_count(double ratio, int num_steps);

// Elementwise 0.5 * (left_copy + right_copy). Every place that merges the
// two copies of a shared frame goes through this one function so results
// agree bit-for-bit across the pipelines.
LatentGrid fuse_pair_copies(const LatentGrid& left_copy, const LatentGrid& right_copy);

// Average the two copies of every shared interior frame; endpoints pass
// through. pair_outputs[p] holds the stepped (left, right) latents of pair
// p = (anchor p, anchor p+1).
std::vector<LatentGrid> fuse_shared(
    const std::vector<std::pair<LatentGrid, LatentGrid>>& pair_outputs);

// ---------------------------------------------------------------------------
// FeatureCache: tap records captured during inversion, keyed by
// (pair, timestep, layer, kind). Lives in memory by default; the CLI spills
// to a file during inversion and reads it back record-by-record while
// editing, so the cache never has to fit in memory.

struct TapKeyHash {
    std::size_t operator()(const TapKey& k) const {
        std::uint64_t v = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.pair)) << 32) ^
                          (static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.timestep)) << 8) ^
                          (static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.layer)) << 2) ^
                          static_cast<std::uint64_t>(k.kind);
        v = (v ^ (v >> 30)) * 0xbf58476d1ce4e5b9ULL;
        return static_cast<std::size_t>(v ^ (v >> 31));
    }
};

class FeatureCache : public TapStore {
public:
    FeatureCache() = default;  // in-memory

    // Write-through spill: put() streams each record to `path`; call
    // finish_writes() before reading. Records hold doubles, so replay is
    // bit-exact.
    static FeatureCache spill_to(const std::string& path);
    // Open an existing cache file for reading.
    static FeatureCache open(const std::string& path);

    void put(const TapKey& key, TapRecord&& rec) override;
    bool get(const TapKey& key, TapRecord& out) const override;

    void finish_writes();
    std::size_t record_count() const;
    bool on_disk() const { return !path_.empty(); }

private:
    enum class Mode { memory, spill, read };
    Mode mode_ = Mode::memory;
    std::string path_;
    std::unordered_map<TapKey, TapRecord, TapKeyHash> mem_;
    std::unordered_map<TapKey, std::uint64_t, TapKeyHash> offsets_;
    mutable std::ofstream out_;
    mutable std::ifstream in_;
    // Owned so the cache stays movable (spill_to/open return by value).
    mutable std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
};

// ---------------------------------------------------------------------------
// Stage 1 passes. Both run every adjacent anchor pair per timestep and fuse
// the shared interior frames afterwards; pairs may execute in parallel since
// each writes its own slot and fusion runs after a barrier.

struct StageOptions {
    ThreadPool* pool = nullptr;
    std::ostream* fusion_log = nullptr;
    // Called after each fused timestep with (timestep, current latents);
    // used by diagnostics and tests.
    std::function<void(int, const std::vector<LatentGrid>&)> on_step;
    // Called with the raw per-pair stepped outputs before shared frames are
    // merged, so callers can inspect how far the two copies drift apart.
    std::function<void(int, const std::vector<std::pair<LatentGrid, LatentGrid>>&)> on_pair_copies;
};

// Pair conditions: when per_anchor_maps is given (size = anchor count), pair
// p is conditioned with structural maps (maps[p], maps[p+1]) on top of
// `cond`'s text/mask parts.
Condition condition_for_pair(const Condition& cond, const std::vector<LatentGrid>* per_anchor_maps,
                             int pair);

// DDIM-invert all anchors pairwise under the inversion condition, fusing
// shared frames each timestep. When `cache` is given every tap of every
// (pair, timestep) is captured, including a capture-only evaluation at the
// noisiest step (which inversion itself never steps through but editing
// consumes first). Returns the fully noised anchor latents.
std::vector<LatentGrid> invert_anchors(const std::vector<LatentGrid>& anchors,
                                       const Condition& inv_cond, const NoiseSchedule& schedule,
                                       const PairDenoiser& den, FeatureCache* cache,
                                       const std::vector<LatentGrid>* per_anchor_maps = nullptr,
                                       const StageOptions& opt = {});

// Guided editing from the noised latents back to clean anchors, replaying
// cached attention features for the first round(attn_ratio*num_steps) steps
// and conv features for the first round(conv_ratio*num_steps) steps.
// `fuse` = false is the information-flow ablation: pairs evolve
// independently and shared frames are averaged once at the end.
std::vector<LatentGrid> edit_anchors(const std::vector<LatentGrid>& noised, FeatureCache* cache,
                                     const Condition& edit_cond,
                                     const GuidanceConfig& guidance, const InjectionConfig& inj,
                                     const NoiseSchedule& schedule, const PairDenoiser& den,
                                     const std::vector<LatentGrid>* per_anchor_maps = nullptr,
                                     const StageOptions& opt = {}, bool fuse = true);

}  // namespace anchorkit

#endif
