#include "anchorkit/interp_pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>

#include "anchorkit/common.hpp"
#include "anchorkit/nn_ops.hpp"

namespace anchorkit {

// ---------------------------------------------------------------------------
// Control encoder

namespace {

double init_value(Rng& rng, double scale) {
    return static_cast<double>(static_cast<float>(rng.uniform(-scale, scale)));
}

std::vector<double> init_vec(Rng& rng, std::size_t n, double scale) {
    std::vector<double> v(n);
    for (double& x : v) x = init_value(rng, scale);
    return v;
}

std::size_t grid_bytes(const LatentGrid& g) { return g.data.size() * sizeof(double); }

}  // namespace

ControlEncoderWeights make_control_weights(const ControlEncoderConfig& cfg, std::uint32_t seed) {
    if (cfg.feat <= 0 || cfg.mlp_hidden <= 0 || cfg.out_dim <= 0 || cfg.token_grid <= 0)
        throw contract_error("control encoder config dims must be positive");
    ControlEncoderWeights w;
    w.cfg = cfg;
    w.seed = seed;
    Rng rng(derive_seed(seed, 0xC041));
    const int f = cfg.feat;
    auto conv_path = [&](std::vector<double>* ws, std::vector<double>* bs, int in0) {
        for (int l = 0; l < 5; ++l) {
            int in = l == 0 ? in0 : f;
            ws[l] = init_vec(rng, static_cast<std::size_t>(f) * in * 9, 1.0 / std::sqrt(9.0 * in));
            bs[l] = init_vec(rng, static_cast<std::size_t>(f), 0.1);
        }
    };
    conv_path(w.edge_w, w.edge_b, 1);
    conv_path(w.flow_w, w.flow_b, 2);
    const int dims[4] = {2 * f, cfg.mlp_hidden, cfg.mlp_hidden, cfg.out_dim};
    for (int l = 0; l < 3; ++l) {
        w.mlp_w[l] = init_vec(rng, static_cast<std::size_t>(dims[l + 1]) * dims[l],
                              1.0 / std::sqrt(static_cast<double>(dims[l])));
        w.mlp_b[l] = init_vec(rng, static_cast<std::size_t>(dims[l + 1]), 0.1);
    }
    return w;
}

void save_control_weights(const std::string& path, const ControlEncoderWeights& w) {
    TensorFile tf;
    tf.seed = w.seed;
    auto u32 = [](int v) { return static_cast<std::uint32_t>(v); };
    auto push = [&tf](std::vector<std::uint32_t> dims, const std::vector<double>& d) {
        TensorFile::Entry e;
        e.dims = std::move(dims);
        e.data.reserve(d.size());
        for (double x : d) e.data.push_back(static_cast<float>(x));
        tf.tensors.push_back(std::move(e));
    };
    const ControlEncoderConfig& c = w.cfg;
    push({u32(c.feat), u32(c.mlp_hidden), u32(c.out_dim), u32(c.token_grid)},
         {double(c.feat), double(c.mlp_hidden), double(c.out_dim), double(c.token_grid)});
    for (int l = 0; l < 5; ++l) {
        int in = l == 0 ? 1 : c.feat;
        push({u32(c.feat), u32(in), 3, 3}, w.edge_w[l]);
        push({u32(c.feat)}, w.edge_b[l]);
    }
    for (int l = 0; l < 5; ++l) {
        int in = l == 0 ? 2 : c.feat;
        push({u32(c.feat), u32(in), 3, 3}, w.flow_w[l]);
        push({u32(c.feat)}, w.flow_b[l]);
    }
    const int dims[4] = {2 * c.feat, c.mlp_hidden, c.mlp_hidden, c.out_dim};
    for (int l = 0; l < 3; ++l) {
        push({u32(dims[l + 1]), u32(dims[l])}, w.mlp_w[l]);
        push({u32(dims[l + 1])}, w.mlp_b[l]);
    }
    save_tensor_file(path, tf);
}

ControlEncoderWeights load_control_weights(const std::string& path) {
    TensorFile tf = load_tensor_file(path);
    if (tf.tensors.size() != 27) throw format_error(path + ": expected 27 tensors");
    const std::vector<float>& meta = tf.tensors[0].data;
    if (meta.size() != 4) throw format_error(path + ": bad config tensor");
    ControlEncoderConfig cfg;
    cfg.feat = static_cast<int>(meta[0]);
    cfg.mlp_hidden = static_cast<int>(meta[1]);
    cfg.out_dim = static_cast<int>(meta[2]);
    cfg.token_grid = static_cast<int>(meta[3]);

    ControlEncoderWeights w;
    w.cfg = cfg;
    w.seed = tf.seed;
    std::size_t next = 1;
    auto take = [&](std::size_t expect) {
        const std::vector<float>& src = tf.tensors[next++].data;
        if (src.size() != expect) throw format_error(path + ": tensor size mismatch");
        std::vector<double> v(src.size());
        for (std::size_t i = 0; i < src.size(); ++i) v[i] = static_cast<double>(src[i]);
        return v;
    };
    for (int l = 0; l < 5; ++l) {
        int in = l == 0 ? 1 : cfg.feat;
        w.edge_w[l] = take(static_cast<std::size_t>(cfg.feat) * in * 9);
        w.edge_b[l] = take(static_cast<std::size_t>(cfg.feat));
    }
    for (int l = 0; l < 5; ++l) {
        int in = l == 0 ? 2 : cfg.feat;
        w.flow_w[l] = take(static_cast<std::size_t>(cfg.feat) * in * 9);
        w.flow_b[l] = take(static_cast<std::size_t>(cfg.feat));
    }
    const int dims[4] = {2 * cfg.feat, cfg.mlp_hidden, cfg.mlp_hidden, cfg.out_dim};
    for (int l = 0; l < 3; ++l) {
        w.mlp_w[l] = take(static_cast<std::size_t>(dims[l + 1]) * dims[l]);
        w.mlp_b[l] = take(static_cast<std::size_t>(dims[l + 1]));
    }
    return w;
}

GrayImage grid_to_gray(const LatentGrid& frame) {
    GrayImage g(frame.height, frame.width);
    if (frame.channels == 3) {
        for (int y = 0; y < frame.height; ++y)
            for (int x = 0; x < frame.width; ++x)
                g.at(y, x) = 0.299 * frame.at(0, y, x) + 0.587 * frame.at(1, y, x) +
                             0.114 * frame.at(2, y, x);
    } else if (frame.channels == 1) {
        for (int y = 0; y < frame.height; ++y)
            for (int x = 0; x < frame.width; ++x) g.at(y, x) = frame.at(0, y, x);
    } else {
        for (int y = 0; y < frame.height; ++y)
            for (int x = 0; x < frame.width; ++x) {
                std::vector<double> ch(static_cast<std::size_t>(frame.channels));
                for (int c = 0; c < frame.channels; ++c)
                    ch[static_cast<std::size_t>(c)] = frame.at(c, y, x);
                g.at(y, x) = pairwise_mean(ch);
            }
    }
    return g;
}

ControlStack encode_controls(const std::vector<LatentGrid>& originals, const VisionParams& params,
                             bool reversed, double strength) {
    require(originals.size() >= 2, "encode_controls: segment needs at least two frames");
    if (!(strength >= 0.0))
        throw config_error("control strength must be >= 0, got " + std::to_string(strength));
    const int n = static_cast<int>(originals.size());
    std::vector<GrayImage> gray(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        int src = reversed ? n - 1 - i : i;
        gray[static_cast<std::size_t>(i)] = grid_to_gray(originals[static_cast<std::size_t>(src)]);
    }
    ControlStack stack;
    stack.strength = strength;
    stack.edges.reserve(static_cast<std::size_t>(n));
    stack.flows.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const GrayImage& g = gray[static_cast<std::size_t>(i)];
        stack.edges.push_back(canny(g, params.canny_sigma, params.canny_low, params.canny_high));
        if (i == 0)
            stack.flows.emplace_back(g.height, g.width);  // first frame: zero flow
        else
            stack.flows.push_back(optical_flow(gray[static_cast<std::size_t>(i - 1)], g,
                                               params.flow_lambda, params.flow_iters));
    }
    return stack;
}

namespace {

LatentGrid conv_path_forward(const LatentGrid& input, const std::vector<double>* ws,
                             const std::vector<double>* bs, int f) {
    LatentGrid y = conv3x3(input, ws[0], bs[0], f, 2);
    tanh_inplace(y);
    for (int l = 1; l <= 2; ++l) {
        y = conv3x3(y, ws[l], bs[l], f, 2);
        tanh_inplace(y);
    }
    for (int l = 3; l <= 4; ++l) {
        LatentGrid r = conv3x3(y, ws[l], bs[l], f, 1);
        tanh_inplace(r);
        y += r;  // residual connection
    }
    return y;
}

}  // namespace

Matrix control_residual(const ControlStack& stack, int j, const ControlEncoderWeights& w) {
    require(j >= 0 && j < static_cast<int>(stack.edges.size()),
            "control_residual: frame index " + std::to_string(j) + " out of range");
    require(stack.edges.size() == stack.flows.size(),
            "control_residual: edge/flow counts differ");
    const EdgeMap& e = stack.edges[static_cast<std::size_t>(j)];
    const FlowField& fl = stack.flows[static_cast<std::size_t>(j)];
    require(e.height == fl.height && e.width == fl.width,
            "control_residual: edge/flow shapes differ");
    const ControlEncoderConfig& cfg = w.cfg;

    LatentGrid edge_in(1, e.height, e.width);
    for (std::size_t i = 0; i < e.data.size(); ++i)
        edge_in.data[i] = static_cast<double>(e.data[i]);
    LatentGrid flow_in(2, fl.height, fl.width);
    std::copy(fl.dx.begin(), fl.dx.end(), flow_in.data.begin());
    std::copy(fl.dy.begin(), fl.dy.end(), flow_in.data.begin() + static_cast<std::ptrdiff_t>(fl.dx.size()));

    LatentGrid edge_feat = conv_path_forward(edge_in, w.edge_w, w.edge_b, cfg.feat);
    LatentGrid flow_feat = conv_path_forward(flow_in, w.flow_w, w.flow_b, cfg.feat);

    LatentGrid cat(2 * cfg.feat, edge_feat.height, edge_feat.width);
    std::copy(edge_feat.data.begin(), edge_feat.data.end(), cat.data.begin());
    std::copy(flow_feat.data.begin(), flow_feat.data.end(),
              cat.data.begin() + static_cast<std::ptrdiff_t>(edge_feat.data.size()));

    LatentGrid m = conv1x1(cat, w.mlp_w[0], w.mlp_b[0], cfg.mlp_hidden);
    tanh_inplace(m);
    m = conv1x1(m, w.mlp_w[1], w.mlp_b[1], cfg.mlp_hidden);
    tanh_inplace(m);
    m = conv1x1(m, w.mlp_w[2], w.mlp_b[2], cfg.out_dim);

    if (m.height < cfg.token_grid || m.width < cfg.token_grid)
        throw contract_error("control_residual: frame too small for a " +
                             std::to_string(cfg.token_grid) + "x" +
                             std::to_string(cfg.token_grid) + " token grid");
    Matrix tokens = pool_tokens(m, cfg.token_grid, cfg.token_grid);
    for (double& v : tokens.data) v *= stack.strength;
    return tokens;
}

std::vector<Matrix> stack_residuals(ControlStack& stack, const ControlEncoderWeights& w) {
    std::vector<Matrix> res;
    res.reserve(stack.edges.size());
    for (std::size_t j = 0; j < stack.edges.size(); ++j) {
        res.push_back(control_residual(stack, static_cast<int>(j), w));
        stack.flows[j] = FlowField();
    }
    return res;
}

// ---------------------------------------------------------------------------
// Segment interpolation

LatentGrid blend_frames(const LatentGrid& fwd, const LatentGrid& rev, int j, int segment_len) {
    require(segment_len >= 1, "blend_frames: segment length must be >= 1");
    require(j >= 0 && j <= segment_len, "blend_frames: frame index out of range");
    require_same_shape(fwd, rev, "branch frames");
    // Weights (L-j)/L and j/L; a zero weight skips its operand entirely so
    // the endpoints are returned bit-for-bit.
    if (j == 0) return fwd;
    if (j == segment_len) return rev;
    const double w_f = static_cast<double>(segment_len - j) / static_cast<double>(segment_len);
    const double w_r = static_cast<double>(j) / static_cast<double>(segment_len);
    LatentGrid out(fwd.channels, fwd.height, fwd.width);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = w_f * fwd.data[i] + w_r * rev.data[i];
    return out;
}

std::vector<LatentGrid> interpolate_segment(const SegmentJob& job, const NoiseSchedule& schedule,
                                            const PairDenoiser& den, const GuidanceConfig& guidance,
                                            const Condition& cond, const InterpOptions& opt) {
    if (job.segment_len < 1)
        throw contract_error("interpolate_segment: segment length is zero (needs two frames)");
    const int seg_len = job.segment_len;
    const int frames = seg_len + 1;
    require_same_shape(job.start_anchor, job.end_anchor, "segment anchors");
    if (!job.initial_noise.empty()) {
        require(static_cast<int>(job.initial_noise.size()) == frames,
                "interpolate_segment: explicit noise must cover every frame");
        for (const LatentGrid& g : job.initial_noise)
            require_same_shape(job.start_anchor, g, "explicit noise");
    }
    if (opt.per_frame_edges)
        require(static_cast<int>(opt.per_frame_edges->size()) == frames,
                "interpolate_segment: per-frame edge maps must cover every frame");
    const bool has_res = opt.forward_residuals || opt.reverse_residuals;
    if (has_res) {
        require(opt.forward_residuals && opt.reverse_residuals,
                "interpolate_segment: forward and reverse residuals must come together");
        require(static_cast<int>(opt.forward_residuals->size()) == frames &&
                    static_cast<int>(opt.reverse_residuals->size()) == frames,
                "interpolate_segment: control residuals must cover every frame");
    }

    MemoryTracker local_tracker;
    MemoryTracker* trk = opt.tracker ? opt.tracker : &local_tracker;
    const std::size_t frame_bytes = grid_bytes(job.start_anchor);

    auto residual_for = [&](bool forward_branch, int j) -> const Matrix* {
        if (!has_res) return nullptr;
        if (forward_branch) return &(*opt.forward_residuals)[static_cast<std::size_t>(j)];
        return &(*opt.reverse_residuals)[static_cast<std::size_t>(j)];
    };

    // Shared initial noise; both branches start from the same draw.
    std::vector<LatentGrid> x(static_cast<std::size_t>(frames));
    for (int j = 0; j < frames; ++j) {
        if (!job.initial_noise.empty()) {
            x[static_cast<std::size_t>(j)] = job.initial_noise[static_cast<std::size_t>(j)];
        } else {
            LatentGrid g(job.start_anchor.channels, job.start_anchor.height,
                         job.start_anchor.width);
            Rng rng(derive_seed(job.seed, static_cast<std::uint64_t>(j)));
            fill_normal(g, rng);
            x[static_cast<std::size_t>(j)] = std::move(g);
        }
    }
    trk->add(static_cast<std::size_t>(frames) * frame_bytes);
    x[0] = job.start_anchor;
    x[static_cast<std::size_t>(seg_len)] = job.end_anchor;

    // Structural maps are expanded from the byte edge maps per evaluation;
    // the latent-sized copies only live for the call.
    const int ch = job.start_anchor.channels;
    auto pair_condition = [&](int p) {
        Condition cp = cond;
        if (opt.per_frame_edges) {
            cp.structural_map =
                structural_map_from_edges((*opt.per_frame_edges)[static_cast<std::size_t>(p)], ch);
            cp.structural_map_b = structural_map_from_edges(
                (*opt.per_frame_edges)[static_cast<std::size_t>(p + 1)], ch);
        }
        return cp;
    };

    std::vector<LatentGrid> fwd(static_cast<std::size_t>(frames));
    const int n = schedule.num_steps;
    for (int t = n - 1; t >= 1; --t) {
        // Forward branch over all pairs, shared frames fused in stream.
        trk->add(static_cast<std::size_t>(frames) * frame_bytes);
        {
            LatentGrid carry;
            for (int p = 0; p < seg_len; ++p) {
                Condition cp = pair_condition(p);
                LatentGrid ea, eb;
                guided_pair_eps(x[static_cast<std::size_t>(p)],
                                x[static_cast<std::size_t>(p + 1)], t, cp, guidance, den, nullptr,
                                residual_for(true, p), residual_for(true, p + 1), ea, eb, opt.pool);
                LatentGrid ya = ddim_step(x[static_cast<std::size_t>(p)], ea, t, schedule);
                LatentGrid yb = ddim_step(x[static_cast<std::size_t>(p + 1)], eb, t, schedule);
                fwd[static_cast<std::size_t>(p)] =
                    (p == 0) ? std::move(ya) : fuse_pair_copies(carry, ya);
                carry = std::move(yb);
            }
            fwd[static_cast<std::size_t>(seg_len)] = std::move(carry);
        }
        fwd[0] = job.start_anchor;  // forward branch clamps its anchor every step

        // Reverse branch: the reversed-order trajectory expressed on global
        // indices (the denoiser is exactly swap-symmetric, so evaluating each
        // pair in global order is bit-identical to the literal reversed run);
        // each finished frame is cross-blended into x immediately.
        {
            LatentGrid carry;
            for (int p = 0; p < seg_len; ++p) {
                Condition cp = pair_condition(p);
                LatentGrid ea, eb;
                guided_pair_eps(x[static_cast<std::size_t>(p)],
                                x[static_cast<std::size_t>(p + 1)], t, cp, guidance, den, nullptr,
                                residual_for(false, p), residual_for(false, p + 1), ea, eb,
                                opt.pool);
                LatentGrid ya = ddim_step(x[static_cast<std::size_t>(p)], ea, t, schedule);
                LatentGrid yb = ddim_step(x[static_cast<std::size_t>(p + 1)], eb, t, schedule);
                LatentGrid rev_val = (p == 0) ? std::move(ya) : fuse_pair_copies(carry, ya);
                carry = std::move(yb);
                x[static_cast<std::size_t>(p)] =
                    blend_frames(fwd[static_cast<std::size_t>(p)], rev_val, p, seg_len);
                fwd[static_cast<std::size_t>(p)] = LatentGrid();
                trk->sub(frame_bytes);
            }
        }
        // Reverse branch clamps its anchor (global frame L); weight j/L = 1
        // there, so the blend is the clamped anchor exactly.
        x[static_cast<std::size_t>(seg_len)] =
            blend_frames(fwd[static_cast<std::size_t>(seg_len)], job.end_anchor, seg_len, seg_len);
        fwd[static_cast<std::size_t>(seg_len)] = LatentGrid();
        trk->sub(frame_bytes);
    }

    std::vector<LatentGrid> interior;
    interior.reserve(static_cast<std::size_t>(seg_len > 1 ? seg_len - 1 : 0));
    for (int j = 1; j < seg_len; ++j) interior.push_back(std::move(x[static_cast<std::size_t>(j)]));
    trk->sub(static_cast<std::size_t>(frames) * frame_bytes);
    return interior;
}

// ---------------------------------------------------------------------------
// End-to-end pipeline

LatentGrid frame_to_grid(const RgbImage& img) {
    LatentGrid g(3, img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                g.at(c, y, x) = static_cast<double>(img.at(y, x, c)) / 255.0;
    return g;
}

RgbImage grid_to_frame(const LatentGrid& grid) {
    require(grid.channels == 3, "grid_to_frame: need a 3-channel grid");
    RgbImage img(grid.width, grid.height);
    for (int y = 0; y < grid.height; ++y)
        for (int x = 0; x < grid.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = grid.at(c, y, x);
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
    return img;
}

LatentGrid structural_map_from_edges(const EdgeMap& edges, int channels) {
    constexpr double k_edge_map_scale = 0.25;
    LatentGrid m(channels, edges.height, edges.width);
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < edges.height; ++y)
            for (int x = 0; x < edges.width; ++x)
                m.at(c, y, x) = k_edge_map_scale * static_cast<double>(edges.at(y, x));
    return m;
}

namespace {

template <typename Fn>
auto with_stage(const char* stage, int segment, Fn&& fn) {
    auto tag = [&](const std::string& what) {
        std::string where = std::string("stage ") + stage;
        if (segment >= 0) where += " (segment " + std::to_string(segment) + ")";
        return where + ": " + what;
    };
    try {
        return fn();
    } catch (const contract_error& e) {
        throw contract_error(tag(e.what()));
    } catch (const config_error& e) {
        throw config_error(tag(e.what()));
    } catch (const unsupported_error& e) {
        throw unsupported_error(tag(e.what()));
    } catch (const format_error& e) {
        throw format_error(tag(e.what()));
    } catch (const io_error& e) {
        throw io_error(tag(e.what()));
    }
}

std::size_t read_vm_hwm_kb() {
    std::FILE* f = std::fopen("/proc/self/status", "r");
    if (!f) return 0;
    char line[256];
    std::size_t kb = 0;
    while (std::fgets(line, sizeof(line), f)) {
        if (std::sscanf(line, "VmHWM: %zu kB", &kb) == 1) break;
    }
    std::fclose(f);
    return kb;
}

}  // namespace

std::unique_ptr<PairDenoiser> make_denoiser(const PipelineConfig& cfg,
                                            const NoiseSchedule& schedule, int channels,
                                            int height, int width) {
    if (cfg.denoiser != "pairnet" && cfg.denoiser != "analytic")
        throw config_error("unknown denoiser '" + cfg.denoiser + "' (expected pairnet or analytic)");
    if (cfg.threads < 1 || cfg.threads > 256)
        throw config_error("threads must lie in [1, 256], got " + std::to_string(cfg.threads));
    if (!(cfg.control_strength >= 0.0)) throw config_error("control strength must be >= 0");
    if (cfg.denoiser == "analytic") {
        if (cfg.attn_ratio != 0.0 || cfg.conv_ratio != 0.0)
            throw config_error(
                "the analytic denoiser has no feature taps; set attn_ratio and conv_ratio to 0");
        if (cfg.control_strength != 0.0)
            throw config_error(
                "the analytic denoiser has no control inputs; set control_strength to 0");
        return std::make_unique<AnalyticPairDenoiser>(
            schedule, make_default_mixture(channels, height, width));
    }
    PairNetConfig net_cfg;
    return std::make_unique<PairNetDenoiser>(schedule,
                                             make_pairnet_weights(net_cfg, cfg.weight_seed));
}

Stage2Result run_stage2(const FrameSource& input, const std::vector<LatentGrid>& edited,
                        const AnchorSet& anchors, const PipelineConfig& cfg,
                        const PairDenoiser& den, const NoiseSchedule& schedule, FrameSink& sink,
                        ThreadPool* pool, std::ostream* log) {
    const int n_anchors = static_cast<int>(anchors.frame_indices.size());
    require(n_anchors >= 2, "run_stage2: need at least two anchors");
    require(static_cast<int>(edited.size()) == n_anchors,
            "run_stage2: edited anchor count " + std::to_string(edited.size()) +
                " does not match the sampled anchors (" + std::to_string(n_anchors) + ")");
    const bool analytic = cfg.denoiser == "analytic";
    const bool use_structural = !analytic && cfg.structural_edges;
    const bool use_controls = !analytic && cfg.control_strength > 0.0;

    if (use_controls) {
        // Three stride-2 halvings (ceil) must still cover the token grid.
        PairNetConfig net_cfg;
        const int need = 8 * (net_cfg.token_grid - 1) + 1;
        const LatentGrid& f0 = edited.front();
        if (f0.height < need || f0.width < need)
            throw config_error("control residuals need frames of at least " +
                               std::to_string(need) + " px per side, got " +
                               std::to_string(f0.width) + "x" + std::to_string(f0.height) +
                               "; set control_strength to 0 for small frames");
    }

    Condition edit_cond;
    if (!cfg.edit_text.empty()) edit_cond.text = cfg.edit_text;
    GuidanceConfig guidance{cfg.text_scale, cfg.structural_scale};

    auto t0 = std::chrono::steady_clock::now();
    Stage2Result result;
    const std::size_t frame_bytes = grid_bytes(edited.front());
    result.segment_block_bytes = static_cast<std::size_t>(cfg.anchor_interval + 1) * frame_bytes;

    ControlEncoderWeights ctrl_weights;
    if (use_controls) {
        ControlEncoderConfig ctrl_cfg;
        PairNetConfig net_cfg;
        ctrl_cfg.out_dim = net_cfg.hidden;
        ctrl_cfg.token_grid = net_cfg.token_grid;
        ctrl_weights = make_control_weights(ctrl_cfg, cfg.weight_seed + 1);
    }

    MemoryTracker tracker;
    for (int s = 0; s < n_anchors - 1; ++s) {
        auto ts0 = std::chrono::steady_clock::now();
        const int a0 = anchors.frame_indices[static_cast<std::size_t>(s)];
        const int a1 = anchors.frame_indices[static_cast<std::size_t>(s + 1)];
        const int seg_len = a1 - a0;
        sink.append(grid_to_frame(edited[static_cast<std::size_t>(s)]));
        result.frames_out += 1;
        if (seg_len >= 2) {
            std::vector<LatentGrid> interior = with_stage("interpolate", s, [&] {
                SegmentJob job;
                job.start_anchor = edited[static_cast<std::size_t>(s)];
                job.end_anchor = edited[static_cast<std::size_t>(s + 1)];
                job.segment_len = seg_len;
                job.seed = derive_seed(cfg.seed, 0x5E60u + static_cast<std::uint64_t>(s));

                InterpOptions iopt;
                iopt.pool = pool;
                iopt.tracker = &tracker;
                iopt.log = cfg.verbose ? log : nullptr;

                std::vector<EdgeMap> seg_edges;
                std::vector<Matrix> res_f, res_r;
                if (use_controls) {
                    // Originals and flows stay resident only while the stacks
                    // are encoded and reduced to token residuals.
                    std::vector<LatentGrid> originals;
                    originals.reserve(static_cast<std::size_t>(seg_len + 1));
                    for (int j = a0; j <= a1; ++j)
                        originals.push_back(frame_to_grid(input.frame(j)));
                    tracker.add(originals.size() * frame_bytes);
                    ControlStack f_stack =
                        encode_controls(originals, cfg.vision, false, cfg.control_strength);
                    ControlStack r_stack =
                        encode_controls(originals, cfg.vision, true, cfg.control_strength);
                    const std::size_t flow_bytes =
                        2 * originals.size() * static_cast<std::size_t>(job.start_anchor.height) *
                        static_cast<std::size_t>(job.start_anchor.width) * 2 * sizeof(double);
                    tracker.add(flow_bytes);
                    tracker.sub(originals.size() * frame_bytes);
                    originals.clear();
                    originals.shrink_to_fit();
                    res_f = stack_residuals(f_stack, ctrl_weights);
                    std::vector<Matrix> rev = stack_residuals(r_stack, ctrl_weights);
                    // Reverse stack position i is global frame L-i.
                    res_r.assign(std::make_move_iterator(rev.rbegin()),
                                 std::make_move_iterator(rev.rend()));
                    tracker.sub(flow_bytes);
                    iopt.forward_residuals = &res_f;
                    iopt.reverse_residuals = &res_r;
                    if (use_structural) seg_edges = std::move(f_stack.edges);
                } else if (use_structural) {
                    seg_edges.reserve(static_cast<std::size_t>(seg_len + 1));
                    for (int j = a0; j <= a1; ++j) {
                        GrayImage g = rgb_to_gray(input.frame(j));
                        seg_edges.push_back(canny(g, cfg.vision.canny_sigma, cfg.vision.canny_low,
                                                  cfg.vision.canny_high));
                    }
                }
                if (use_structural) iopt.per_frame_edges = &seg_edges;
                return interpolate_segment(job, schedule, den, guidance, edit_cond, iopt);
            });
            for (LatentGrid& g : interior) {
                sink.append(grid_to_frame(g));
                result.frames_out += 1;
                g = LatentGrid();
            }
        }
        auto ts1 = std::chrono::steady_clock::now();
        if (log)
            (*log) << "segment " << s << " frames=" << (a1 - a0)
                   << " time=" << std::chrono::duration<double>(ts1 - ts0).count() << "s\n";
    }
    sink.append(grid_to_frame(edited.back()));
    result.frames_out += 1;

    auto t1 = std::chrono::steady_clock::now();
    result.seconds = std::chrono::duration<double>(t1 - t0).count();
    result.tracked_peak_bytes = tracker.peak;
    if (log) {
        (*log) << "stage2 segments=" << (n_anchors - 1) << " time=" << result.seconds << "s\n"
               << "interp tracked peak bytes=" << tracker.peak
               << " segment block bytes=" << result.segment_block_bytes << "\n";
        std::size_t hwm = read_vm_hwm_kb();
        if (hwm) (*log) << "process VmHWM=" << hwm << " kB\n";
    }
    return result;
}

PipelineResult run_pipeline(const FrameSource& input, FrameSink& sink, const PipelineConfig& cfg,
                            const std::string& workdir, std::ostream* log) {
    const int n_frames = input.count();
    require(n_frames >= 2,
            "pipeline needs at least two input frames, got " + std::to_string(n_frames));

    const AnchorSet anchors = sample_anchors(n_frames, cfg.anchor_interval);
    const int n_anchors = static_cast<int>(anchors.frame_indices.size());
    const NoiseSchedule schedule =
        make_linear_schedule(cfg.num_steps, cfg.beta_start, cfg.beta_end);

    RgbImage probe = input.frame(0);
    std::unique_ptr<PairDenoiser> den =
        make_denoiser(cfg, schedule, 3, probe.height, probe.width);
    const bool analytic = cfg.denoiser == "analytic";
    const bool use_structural = !analytic && cfg.structural_edges;
    const bool use_cache = !analytic && (injection_step_count(cfg.attn_ratio, cfg.num_steps) > 0 ||
                                         injection_step_count(cfg.conv_ratio, cfg.num_steps) > 0);

    std::unique_ptr<ThreadPool> pool;
    if (cfg.threads > 1) pool = std::make_unique<ThreadPool>(cfg.threads);

    Condition inv_cond, edit_cond;
    if (!cfg.invert_text.empty()) inv_cond.text = cfg.invert_text;
    if (!cfg.edit_text.empty()) edit_cond.text = cfg.edit_text;
    GuidanceConfig guidance{cfg.text_scale, cfg.structural_scale};
    InjectionConfig inj{cfg.attn_ratio, cfg.conv_ratio};

    PipelineResult result;
    result.anchor_count = n_anchors;

    auto t0 = std::chrono::steady_clock::now();

    // Stage 1: anchor latents, structural maps, inversion with feature
    // capture, then guided editing with feature replay.
    std::vector<LatentGrid> anchor_latents;
    std::vector<LatentGrid> anchor_maps;
    with_stage("load-anchors", -1, [&] {
        anchor_latents.reserve(static_cast<std::size_t>(n_anchors));
        for (int idx : anchors.frame_indices) {
            RgbImage f = input.frame(idx);
            anchor_latents.push_back(frame_to_grid(f));
            if (use_structural) {
                GrayImage g = rgb_to_gray(f);
                anchor_maps.push_back(structural_map_from_edges(
                    canny(g, cfg.vision.canny_sigma, cfg.vision.canny_low, cfg.vision.canny_high),
                    3));
            }
        }
    });
    const std::vector<LatentGrid>* maps_ptr = use_structural ? &anchor_maps : nullptr;

    FeatureCache cache;
    if (use_cache && !workdir.empty()) cache = FeatureCache::spill_to(workdir + "/features.asfc");

    StageOptions stage_opt;
    stage_opt.pool = pool.get();
    stage_opt.fusion_log = cfg.verbose ? log : nullptr;

    std::vector<LatentGrid> noised = with_stage("invert", -1, [&] {
        return invert_anchors(anchor_latents, inv_cond, schedule, *den,
                              use_cache ? &cache : nullptr, maps_ptr, stage_opt);
    });
    if (use_cache) cache.finish_writes();
    anchor_latents.clear();
    anchor_latents.shrink_to_fit();

    std::vector<LatentGrid> edited = with_stage("edit", -1, [&] {
        return edit_anchors(noised, use_cache ? &cache : nullptr, edit_cond, guidance, inj,
                            schedule, *den, maps_ptr, stage_opt);
    });
    noised.clear();
    noised.shrink_to_fit();
    anchor_maps.clear();
    anchor_maps.shrink_to_fit();

    auto t1 = std::chrono::steady_clock::now();
    result.stage1_seconds = std::chrono::duration<double>(t1 - t0).count();
    if (log)
        (*log) << "stage1 anchors=" << n_anchors << " time=" << result.stage1_seconds << "s\n";

    Stage2Result s2 = run_stage2(input, edited, anchors, cfg, *den, schedule, sink, pool.get(), log);
    result.frames_out = s2.frames_out;
    result.tracked_peak_bytes = s2.tracked_peak_bytes;
    result.segment_block_bytes = s2.segment_block_bytes;
    result.stage2_seconds = s2.seconds;
    return result;
}

}  // namespace anchorkit
