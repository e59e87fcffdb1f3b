#ifndef ANCHORKIT_METRICS_HPP
#define ANCHORKIT_METRICS_HPP

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "anchorkit/io.hpp"
#include "anchorkit/vision.hpp"

namespace anchorkit {

// Random access to a frame sequence, in memory or on disk, so metrics never
// need the whole video resident.
struct FrameSource {
    virtual ~FrameSource() = default;
    virtual int count() const = 0;
    virtual RgbImage frame(int index) const = 0;
};

struct MemoryFrames : FrameSource {
    std::vector<RgbImage> frames;
    MemoryFrames() = default;
    explicit MemoryFrames(std::vector<RgbImage> f) : frames(std::move(f)) {}
    int count() const override { return static_cast<int>(frames.size()); }
    RgbImage frame(int index) const override { return frames.at(static_cast<std::size_t>(index)); }
};

struct DiskFrames : FrameSource {
    FrameSequence seq;
    explicit DiskFrames(FrameSequence s) : seq(std::move(s)) {}
    int count() const override { return seq.count; }
    RgbImage frame(int index) const override { return seq.frame(index); }
};

// ---------------------------------------------------------------------------
// Embedders. Every embed() result has unit L2 norm (an all-zero input maps
// to the first basis vector).

struct Embedder {
    virtual ~Embedder() = default;
    virtual int dim() const = 0;
    virtual std::vector<double> embed(const RgbImage& frame, int frame_index) const = 0;
    virtual bool supports_text() const { return false; }
};

// Deterministic pixel-level embedder: 8x8 mean-pooled grayscale (64 values)
// concatenated with an 8-bin gradient-orientation histogram weighted by
// gradient magnitude, then L2-normalized.
struct ToyEmbedder : Embedder {
    int dim() const override { return 72; }
    std::vector<double> embed(const RgbImage& frame, int frame_index) const override;
};

// Per-frame vectors precomputed out-of-repo (e.g. CLIP/DINO) and read from
// an embedding sidecar file; vectors are L2-normalized on load. The frame
// index selects the vector; pixels are ignored.
struct ExternalEmbedder : Embedder {
    std::vector<std::vector<double>> vectors;

    explicit ExternalEmbedder(const std::string& path);
    int dim() const override;
    std::vector<double> embed(const RgbImage& frame, int frame_index) const override;
    bool supports_text() const override { return true; }
};

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// ---------------------------------------------------------------------------
// Metrics. All similarity values are reported x100.

// mean cosine between frames 24 apart; needs >= 25 frames.
double sim_star(const FrameSource& frames, const Embedder& emb);
// mean cosine between every 24th frame and frame 0; needs >= 25 frames.
double sim_dagger(const FrameSource& frames, const Embedder& emb);
// mean cosine between adjacent frames; needs >= 2 frames.
double sim_adjacent(const FrameSource& frames, const Embedder& emb);

// Mean L1 residual (x100) between edited_i and edited_{i+1} warped backward
// along flow computed on the originals; pixels are masked by warp validity
// and forward-backward flow consistency (< 1 px). Frames whose mask is empty
// are skipped with a warning.
double warp_error(const FrameSource& original, const FrameSource& edited,
                  const VisionParams& params, std::ostream* warnings = nullptr);

// Mean binary edge-map disagreement (x100) per frame.
double canny_error(const FrameSource& original, const FrameSource& edited,
                   const VisionParams& params);

// Shannon entropy (bits) of the 256-bin grayscale histogram.
double entropy(const GrayImage& img);
double entropy_mean(const FrameSource& frames);

// Mean cosine (x100) between frame embeddings and a prompt embedding; only
// meaningful for embedders with a text space.
double text_sim(const FrameSource& frames, const std::vector<double>& prompt_embedding,
                const Embedder& emb);

struct MetricsReport {
    double sim_star = 0.0;
    double sim_dagger = 0.0;
    double sim_adjacent = 0.0;
    double warp_error = 0.0;
    double canny_error = 0.0;
    double entropy_mean = 0.0;
    std::optional<double> text_sim;

    std::string to_json() const;
    std::string to_key_values() const;
};

// Full report: similarity/entropy metrics on the edited frames, warp and
// canny errors between original and edited. text_sim is filled only when a
// prompt embedding is given.
MetricsReport compute_metrics(const FrameSource& original, const FrameSource& edited,
                              const Embedder& emb, const VisionParams& params,
                              const std::vector<double>* prompt_embedding = nullptr,
                              std::ostream* warnings = nullptr);

}  // namespace anchorkit

#endif
