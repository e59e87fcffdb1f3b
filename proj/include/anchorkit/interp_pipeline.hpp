#ifndef ANCHORKIT_INTERP_PIPELINE_HPP
#define ANCHORKIT_INTERP_PIPELINE_HPP

#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "anchorkit/anchor_pipeline.hpp"
#include "anchorkit/denoiser.hpp"
#include "anchorkit/io.hpp"
#include "anchorkit/metrics.hpp"
#include "anchorkit/schedule.hpp"
#include "anchorkit/threading.hpp"
#include "anchorkit/vision.hpp"

namespace anchorkit {

// ---------------------------------------------------------------------------
// Control signals: per-frame edge maps plus frame-to-frame flow fields from
// the original footage, encoded into token-space residuals for the denoiser.

struct ControlStack {
    std::vector<EdgeMap> edges;   // one per frame, original order of the branch
    std::vector<FlowField> flows; // flows[j]: frame j -> j+1 in branch order
    double strength = 1.0;
};

struct ControlEncoderConfig {
    int feat = 8;        // channels in each conv path
    int mlp_hidden = 16; // fusion MLP width
    int out_dim = 4;     // residual channels; must match the denoiser token width
    int token_grid = 8;  // residual spatial grid (tokens = token_grid^2)
};

// Two 5-layer conv encoders (edge path: 1 channel in, flow path: 2 channels
// in; three stride-2 layers then two residual stride-1 layers), concatenated
// channel-wise and fused by a 3-layer 1x1-conv MLP down to out_dim channels.
struct ControlEncoderWeights {
    ControlEncoderConfig cfg;
    std::uint32_t seed = 0;
    std::vector<double> edge_w[5], edge_b[5];
    std::vector<double> flow_w[5], flow_b[5];
    std::vector<double> mlp_w[3], mlp_b[3];
};

ControlEncoderWeights make_control_weights(const ControlEncoderConfig& cfg, std::uint32_t seed);
void save_control_weights(const std::string& path, const ControlEncoderWeights& w);
ControlEncoderWeights load_control_weights(const std::string& path);

// Luma reduction of a [0,1] latent-space frame (3 channels -> Rec.601 gray,
// 1 channel passthrough, otherwise channel mean).
GrayImage grid_to_gray(const LatentGrid& frame);

// Edge maps and pairwise flows of the segment originals, in forward or
// reversed frame order. Flows are always computed on the order given, so the
// reversed stack sees genuinely reversed motion.
ControlStack encode_controls(const std::vector<LatentGrid>& originals, const VisionParams& params,
                             bool reversed, double strength);

// Token-space residual for frame j of the stack. Linear in strength:
// doubling stack.strength doubles the result exactly. Returns a
// (token_grid^2 x out_dim) matrix.
Matrix control_residual(const ControlStack& stack, int j, const ControlEncoderWeights& w);

// Residuals for every stack position, in stack order. Frees each flow field
// as soon as its residual is built, so a segment's flows never have to stay
// resident alongside the latents.
std::vector<Matrix> stack_residuals(ControlStack& stack, const ControlEncoderWeights& w);

// ---------------------------------------------------------------------------
// Segment interpolation

struct SegmentJob {
    LatentGrid start_anchor;  // edited anchor f'_i
    LatentGrid end_anchor;    // edited anchor f'_{i+1}
    int segment_len = 0;      // L = frames between anchors inclusive minus one
    std::uint64_t seed = 0;
    // Optional explicit per-frame starting noise (size L+1). When empty,
    // frame j draws from derive_seed(seed, j); passing the mirrored list
    // reproduces a run on the reversed segment exactly.
    std::vector<LatentGrid> initial_noise;
};

// Bookkeeping of the durable tensor blocks the interpolator holds (blocks
// that live across at least one full timestep: latents, branch buffers,
// originals and flows during control encoding). Per-evaluation temporaries
// are call-scoped and O(threads), independent of segment and video length,
// so they stay outside this accounting. Tests assert the tracked working
// set stays within budget.
struct MemoryTracker {
    std::size_t current = 0;
    std::size_t peak = 0;
    void add(std::size_t bytes) {
        current += bytes;
        if (current > peak) peak = current;
    }
    void sub(std::size_t bytes) { current -= bytes < current ? bytes : current; }
};

struct InterpOptions {
    // Precomputed control-residual matrices, both indexed by global frame
    // (size L+1). The reverse entries come from the stack encoded on the
    // reversed frame order (global frame j is reversed position L-j).
    // Leaving both null disables control residuals.
    const std::vector<Matrix>* forward_residuals = nullptr;
    const std::vector<Matrix>* reverse_residuals = nullptr;
    // Per-frame structural edge maps (size L+1, branch-order-independent);
    // expanded to latent-sized condition maps per pair evaluation so they
    // never sit resident at latent size.
    const std::vector<EdgeMap>* per_frame_edges = nullptr;
    ThreadPool* pool = nullptr;
    MemoryTracker* tracker = nullptr;
    std::ostream* log = nullptr;
};

// Cross-branch blend at global frame j of L: (L-j)/L forward + j/L reverse,
// with exact zero-weight skipping so j=0 is the forward value bit-for-bit
// and j=L the reverse value.
LatentGrid blend_frames(const LatentGrid& fwd, const LatentGrid& rev, int j, int segment_len);

// Deterministic two-branch interpolation of one segment. Both branches start
// from the same shared per-frame noise, clamp their anchor endpoint every
// step, run the guided pairwise denoiser with in-branch shared-frame fusion,
// and are cross-blended per timestep; both continue from the blended state.
// Returns the L-1 interior frames (empty when the segment has length 1).
std::vector<LatentGrid> interpolate_segment(const SegmentJob& job, const NoiseSchedule& schedule,
                                            const PairDenoiser& den, const GuidanceConfig& guidance,
                                            const Condition& cond, const InterpOptions& opt = {});

// ---------------------------------------------------------------------------
// End-to-end pipeline

struct FrameSink {
    virtual ~FrameSink() = default;
    virtual void append(const RgbImage& frame) = 0;
};

struct WriterSink : FrameSink {
    FrameSequenceWriter* writer = nullptr;
    explicit WriterSink(FrameSequenceWriter& w) : writer(&w) {}
    void append(const RgbImage& frame) override { writer->append(frame); }
};

struct MemorySink : FrameSink {
    std::vector<RgbImage> frames;
    void append(const RgbImage& frame) override { frames.push_back(frame); }
};

struct PipelineConfig {
    int anchor_interval = 24;
    int num_steps = 50;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double text_scale = 6.0;
    double structural_scale = 0.8;
    double attn_ratio = 0.44;
    double conv_ratio = 0.65;
    double control_strength = 1.0;
    VisionParams vision;
    std::uint64_t seed = 0;
    int threads = 1;
    std::string denoiser = "pairnet";  // "pairnet" | "analytic"
    std::uint32_t weight_seed = 7;
    std::vector<double> invert_text;  // empty = null text condition
    std::vector<double> edit_text;
    bool structural_edges = true;  // pairnet only: edge maps of the originals as c_J
    bool verbose = false;
};

struct PipelineResult {
    int frames_out = 0;
    int anchor_count = 0;
    std::size_t tracked_peak_bytes = 0;   // interpolation working set (see MemoryTracker)
    std::size_t segment_block_bytes = 0;  // one (K+1)-frame latent block
    double stage1_seconds = 0.0;
    double stage2_seconds = 0.0;
};

// Build the denoiser a config asks for (also validates config/denoiser
// compatibility: the analytic denoiser has no taps or control inputs).
std::unique_ptr<PairDenoiser> make_denoiser(const PipelineConfig& cfg,
                                            const NoiseSchedule& schedule, int channels,
                                            int height, int width);

// Stage 2 alone: stream every segment between consecutive edited anchors
// into `sink` (anchor frames included, so the output covers the full input
// range). Exposed for the CLI's interpolate command.
struct Stage2Result {
    int frames_out = 0;
    std::size_t tracked_peak_bytes = 0;
    std::size_t segment_block_bytes = 0;
    double seconds = 0.0;
};
Stage2Result run_stage2(const FrameSource& input, const std::vector<LatentGrid>& edited,
                        const AnchorSet& anchors, const PipelineConfig& cfg,
                        const PairDenoiser& den, const NoiseSchedule& schedule, FrameSink& sink,
                        ThreadPool* pool, std::ostream* log = nullptr);

// Full run: sample anchors, invert (capturing features), edit (replaying
// them), then stream segment interpolation into `sink` frame by frame.
// `workdir` holds the spilled feature cache; empty keeps it in memory.
PipelineResult run_pipeline(const FrameSource& input, FrameSink& sink, const PipelineConfig& cfg,
                            const std::string& workdir, std::ostream* log = nullptr);

// [0,1] grid <-> 8-bit frame conversions used at the pipeline boundary.
LatentGrid frame_to_grid(const RgbImage& img);
RgbImage grid_to_frame(const LatentGrid& grid);

// Structural condition grid for one frame: its edge map broadcast to
// `channels` and scaled down so it nudges the denoiser input rather than
// dominating it. Shared by the pipeline and the standalone invert/edit
// commands so both stages condition on identical maps.
LatentGrid structural_map_from_edges(const EdgeMap& edges, int channels);

}  // namespace anchorkit

#endif
