#ifndef ANCHORKIT_DENOISER_HPP
#define ANCHORKIT_DENOISER_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "anchorkit/schedule.hpp"
#include "anchorkit/tensor.hpp"
#include "anchorkit/threading.hpp"

namespace anchorkit {

// Conditioning bundle for a denoiser evaluation. Either aspect may be absent
// (the null condition). The structural signal is denoiser-specific: a
// component-restriction mask for the analytic mixture, or per-frame guidance
// maps added to the input for the pair network (`structural_map` for the
// first frame, `structural_map_b` for the partner; when only the first is
// set it applies to both frames).
struct Condition {
    std::optional<std::vector<double>> text;
    std::optional<LatentGrid> structural_map;
    std::optional<LatentGrid> structural_map_b;
    std::optional<std::vector<int>> structural_mask;

    bool has_structural() const {
        return structural_map.has_value() || structural_map_b.has_value() ||
               structural_mask.has_value();
    }
    Condition without_text() const {
        Condition c = *this;
        c.text.reset();
        return c;
    }
    Condition without_structural() const {
        Condition c = *this;
        c.structural_map.reset();
        c.structural_map_b.reset();
        c.structural_mask.reset();
        return c;
    }
};

struct GuidanceConfig {
    double text_scale = 6.0;
    double structural_scale = 0.8;
};

// ---------------------------------------------------------------------------
// Analytic denoiser: an isotropic Gaussian mixture prior for which the exact
// posterior-mean noise estimate has a closed form.

struct MixtureComponent {
    double weight = 0.0;
    double variance = 1.0;  // isotropic sigma^2
    LatentGrid mean;
};

struct GaussianMixture {
    std::vector<MixtureComponent> components;
    void validate() const;  // weights positive and summing to 1, variances > 0
};

// Exact eps for x_t ~ sqrt(abar_t) x0 + sqrt(1-abar_t) n, x0 ~ mixture.
// Text conditioning shifts every component mean by the scalar mean of the
// text vector; a structural mask restricts the mixture to the listed
// components. Responsibilities are computed in log space.
LatentGrid analytic_eps(const LatentGrid& x_t, int t, const NoiseSchedule& schedule,
                        const GaussianMixture& mixture, const Condition& cond);

// Broad three-component mixture over constant frames; the stock prior for
// analytic-denoiser runs on [0,1]-scaled frames.
GaussianMixture make_default_mixture(int channels, int height, int width);

// Per-component posterior responsibilities at (x_t, t); same conditioning
// rules as analytic_eps. Exposed for test oracles.
std::vector<double> mixture_responsibilities(const LatentGrid& x_t, int t,
                                             const NoiseSchedule& schedule,
                                             const GaussianMixture& mixture,
                                             const Condition& cond);

// Joint evaluation over a frame pair: responsibilities come from the
// concatenated pair likelihood (each component models both frames around the
// same mean), so the two eps outputs are coupled. The per-frame sums of
// squares are combined commutatively, making the result exactly
// swap-symmetric.
void analytic_pair_eps(const LatentGrid& a, const LatentGrid& b, int t,
                       const NoiseSchedule& schedule, const GaussianMixture& mixture,
                       const Condition& cond, LatentGrid& eps_a, LatentGrid& eps_b);

// ---------------------------------------------------------------------------
// Bidirectional cross-frame attention.

struct AttentionWeights {
    int dim = 0;
    Matrix w_q, w_k, w_v;  // shared by both frames of a pair
    Matrix w_out;          // output projection applied by the pair network
};

// Row-wise softmax(Q K^T / sqrt(d)) V.
Matrix scaled_attention(const Matrix& q, const Matrix& k, const Matrix& v);

// One bidirectional exchange: each frame attends to itself and to its
// partner with the same shared projections, and the two results are summed.
// Returns (new_i, new_j). The output projection is left to the caller.
std::pair<Matrix, Matrix> bidir_attention(const Matrix& z_i, const Matrix& z_j,
                                          const AttentionWeights& w);

// ---------------------------------------------------------------------------
// Feature taps: capture internal activations during one pass, replay them
// into a later pass. Keys are (pair, timestep, layer, kind).

enum class TapKind : std::uint8_t { attention_kv = 0, conv_activation = 1 };

struct TapKey {
    int pair = 0;
    int timestep = 0;
    int layer = 0;
    TapKind kind = TapKind::conv_activation;

    bool operator==(const TapKey& o) const {
        return pair == o.pair && timestep == o.timestep && layer == o.layer && kind == o.kind;
    }
};

// attention_kv records hold {K_a, V_a, K_b, V_b}; conv_activation records
// hold the two frames' post-activation feature grids.
struct TapRecord {
    std::vector<Matrix> mats;
    std::vector<LatentGrid> grids;
};

struct TapStore {
    virtual ~TapStore() = default;
    virtual void put(const TapKey& key, TapRecord&& rec) = 0;
    // Copies the record into `out`; returns false when the key is absent.
    // By-value reads keep disk-backed stores safe under concurrent lookups.
    virtual bool get(const TapKey& key, TapRecord& out) const = 0;
};

struct TapIO {
    enum class Mode { capture, inject };
    Mode mode = Mode::capture;
    TapStore* store = nullptr;
    int pair_index = 0;
    // In inject mode these select which tap kinds are replayed; a kind that
    // is off leaves the freshly computed features in place.
    bool attention_active = true;
    bool conv_active = true;
};

// ---------------------------------------------------------------------------
// Pair network: a small deterministic two-frame eps model with tap points.
// Layer numbering for taps: 0 = post-conv1 activation (conv_activation),
// 1 = token attention K/V (attention_kv), 2 = post-conv2 activation
// (conv_activation).

struct PairNetConfig {
    int in_channels = 3;
    int hidden = 4;
    int text_dim = 8;
    int token_grid = 8;
};

struct PairNetWeights {
    PairNetConfig cfg;
    std::uint32_t seed = 0;
    std::vector<double> conv1_w, conv1_b;  // 3x3 stride-2 in->hidden
    Matrix text_proj;                      // hidden x text_dim
    AttentionWeights attn;                 // dim = hidden
    std::vector<double> conv2_w, conv2_b;  // 1x1 hidden->hidden
    std::vector<double> head_w, head_b;    // 1x1 hidden->in
};

// Deterministic init; every value is exactly representable in binary32 so
// weight files round-trip bit-exactly.
PairNetWeights make_pairnet_weights(const PairNetConfig& cfg, std::uint32_t seed);

void save_pairnet_weights(const std::string& path, const PairNetWeights& w);
PairNetWeights load_pairnet_weights(const std::string& path);

// Optional per-frame control residual, added to the post-attention tokens.
// Shape: token count x hidden.
std::pair<LatentGrid, LatentGrid> pairnet_eps(const LatentGrid& a, const LatentGrid& b, int t,
                                              const NoiseSchedule& schedule, const Condition& cond,
                                              const PairNetWeights& w, const TapIO* taps,
                                              const Matrix* control_a, const Matrix* control_b);

// ---------------------------------------------------------------------------
// Guidance. eps_fn(x, variant) evaluates one conditioning variant; exactly
// three evaluations are made: (null text, structural), (text, structural),
// (text, null structural). Output:
//   e1 + sT (e2 - e1) + sJ (e2 - e3)
// combined in coefficient form so sT=1, sJ=0 reproduces e2 bit-exactly and
// sT=0, sJ=0 reproduces e1 bit-exactly.
using EpsFn = std::function<LatentGrid(const LatentGrid& x, const Condition& cond)>;

LatentGrid guided_eps(const LatentGrid& x_t, const Condition& cond, const GuidanceConfig& g,
                      const EpsFn& eps_fn);

// ---------------------------------------------------------------------------
// Denoiser interface used by both pipelines. Implementations must be pure
// functions of their arguments (no hidden state) so results are
// reproducible across thread counts.

struct PairDenoiser {
    virtual ~PairDenoiser() = default;
    virtual bool supports_taps() const { return false; }
    virtual void eps_pair(const LatentGrid& a, const LatentGrid& b, int t, const Condition& cond,
                          const TapIO* taps, const Matrix* control_a, const Matrix* control_b,
                          LatentGrid& eps_a, LatentGrid& eps_b) const = 0;
};

// Joint analytic mixture evaluation over the pair (analytic_pair_eps).
struct AnalyticPairDenoiser : PairDenoiser {
    const NoiseSchedule* schedule = nullptr;
    GaussianMixture mixture;

    AnalyticPairDenoiser(const NoiseSchedule& s, GaussianMixture m)
        : schedule(&s), mixture(std::move(m)) {}
    void eps_pair(const LatentGrid& a, const LatentGrid& b, int t, const Condition& cond,
                  const TapIO* taps, const Matrix* control_a, const Matrix* control_b,
                  LatentGrid& eps_a, LatentGrid& eps_b) const override;
};

struct PairNetDenoiser : PairDenoiser {
    const NoiseSchedule* schedule = nullptr;
    PairNetWeights weights;

    PairNetDenoiser(const NoiseSchedule& s, PairNetWeights w)
        : schedule(&s), weights(std::move(w)) {}
    bool supports_taps() const override { return true; }
    void eps_pair(const LatentGrid& a, const LatentGrid& b, int t, const Condition& cond,
                  const TapIO* taps, const Matrix* control_a, const Matrix* control_b,
                  LatentGrid& eps_a, LatentGrid& eps_b) const override;
};

// Three-evaluation guidance over a pair denoiser. Taps, when given, must be
// in inject mode (a guided pass has no single trajectory to capture) and are
// replayed into all three evaluations. The optional pool runs the three
// evaluations in parallel.
void guided_pair_eps(const LatentGrid& a, const LatentGrid& b, int t, const Condition& cond,
                     const GuidanceConfig& g, const PairDenoiser& den, const TapIO* taps,
                     const Matrix* control_a, const Matrix* control_b, LatentGrid& eps_a,
                     LatentGrid& eps_b, ThreadPool* pool = nullptr);

}  // namespace anchorkit

#endif
