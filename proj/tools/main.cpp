// anchorkit command line: synthetic fixtures, the classical vision utilities,
// the two pipeline stages (standalone and end to end) and the metrics report.
//
// Exit codes: 0 success, 2 usage/config/contract errors, 1 I/O and format
// errors. Every run writes a fully-resolved config echo beside its outputs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "anchorkit/anchor_pipeline.hpp"
#include "anchorkit/common.hpp"
#include "anchorkit/denoiser.hpp"
#include "anchorkit/fixtures.hpp"
#include "anchorkit/interp_pipeline.hpp"
#include "anchorkit/io.hpp"
#include "anchorkit/metrics.hpp"
#include "anchorkit/schedule.hpp"
#include "anchorkit/tensor.hpp"
#include "anchorkit/threading.hpp"
#include "anchorkit/vision.hpp"

namespace fs = std::filesystem;
using namespace anchorkit;

namespace {

// ---------------------------------------------------------------------------
// Settings: PipelineConfig plus the string-typed mirrors the parser binds to.

struct ToolConfig {
    PipelineConfig pc;
    std::string invert_text_csv;
    std::string edit_text_csv;
    int structural_edges = 1;
    std::string config_path;
};

const std::set<std::string>& config_keys() {
    static const std::set<std::string> keys = {
        "anchor_interval", "steps",        "beta_start",       "beta_end",
        "text_scale",      "structural_scale", "attn_ratio",   "conv_ratio",
        "control_strength", "canny_sigma", "canny_low",        "canny_high",
        "flow_lambda",     "flow_iters",   "seed",             "threads",
        "denoiser",        "weight_seed",  "invert_text",      "edit_text",
        "structural_edges", "verbose"};
    return keys;
}

std::uint64_t parse_u64(const std::string& s, const char* key) {
    try {
        std::size_t pos = 0;
        unsigned long long v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (...) {
        throw config_error(std::string(key) + " must be an unsigned integer, got '" + s + "'");
    }
}

std::vector<double> parse_text_list(const std::string& csv, const char* key) {
    std::vector<double> out;
    if (csv.empty()) return out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t pos = 0;
            double v = std::stod(tok, &pos);
            while (pos < tok.size() && std::isspace(static_cast<unsigned char>(tok[pos]))) ++pos;
            if (pos != tok.size()) throw std::invalid_argument(tok);
            out.push_back(v);
        } catch (...) {
            throw config_error(std::string(key) + ": invalid number '" + tok + "'");
        }
    }
    return out;
}

// Options registered for one subcommand, keyed by config name so the config
// file can fill in whatever the command line left untouched.
using OptionMap = std::map<std::string, CLI::Option*>;

OptionMap bind_common(CLI::App* cmd, ToolConfig& tc) {
    OptionMap m;
    PipelineConfig& pc = tc.pc;
    m["anchor_interval"] =
        cmd->add_option("--anchor-interval", pc.anchor_interval, "anchor spacing in frames");
    m["steps"] = cmd->add_option("--steps", pc.num_steps, "diffusion steps");
    m["beta_start"] = cmd->add_option("--beta-start", pc.beta_start, "linear schedule start");
    m["beta_end"] = cmd->add_option("--beta-end", pc.beta_end, "linear schedule end");
    m["text_scale"] = cmd->add_option("--text-scale", pc.text_scale, "text guidance scale");
    m["structural_scale"] =
        cmd->add_option("--structural-scale", pc.structural_scale, "structural guidance scale");
    m["attn_ratio"] = cmd->add_option("--attn-ratio", pc.attn_ratio,
                                      "attention injection window as a fraction of steps");
    m["conv_ratio"] = cmd->add_option("--conv-ratio", pc.conv_ratio,
                                      "conv-feature injection window as a fraction of steps");
    m["control_strength"] = cmd->add_option("--control-strength", pc.control_strength,
                                            "edge/flow control residual strength");
    m["canny_sigma"] =
        cmd->add_option("--canny-sigma", pc.vision.canny_sigma, "edge detector smoothing sigma");
    m["canny_low"] = cmd->add_option("--canny-low", pc.vision.canny_low, "hysteresis low threshold");
    m["canny_high"] =
        cmd->add_option("--canny-high", pc.vision.canny_high, "hysteresis high threshold");
    m["flow_lambda"] =
        cmd->add_option("--flow-lambda", pc.vision.flow_lambda, "optical flow smoothness weight");
    m["flow_iters"] =
        cmd->add_option("--flow-iters", pc.vision.flow_iters, "optical flow iterations");
    m["seed"] = cmd->add_option("--seed", pc.seed, "run seed");
    m["threads"] = cmd->add_option("--threads", pc.threads, "worker threads");
    m["denoiser"] = cmd->add_option("--denoiser", pc.denoiser, "pairnet | analytic");
    m["weight_seed"] = cmd->add_option("--weight-seed", pc.weight_seed, "denoiser weight seed");
    m["invert_text"] = cmd->add_option("--invert-text", tc.invert_text_csv,
                                       "comma-separated inversion text embedding");
    m["edit_text"] =
        cmd->add_option("--edit-text", tc.edit_text_csv, "comma-separated edit text embedding");
    m["structural_edges"] =
        cmd->add_option("--structural-edges", tc.structural_edges,
                        "1 = condition the denoiser on original edge maps (pairnet only)");
    m["verbose"] = cmd->add_flag("--verbose", pc.verbose, "log per-step fusion detail");
    cmd->add_option("--config", tc.config_path,
                    "key=value config file; explicit flags take precedence");
    return m;
}

// Config-file merge, then the string-typed mirrors become their real types.
void finalize_settings(ToolConfig& tc, const OptionMap& opts) {
    PipelineConfig& pc = tc.pc;
    pc.structural_edges = tc.structural_edges != 0;
    if (!tc.config_path.empty()) {
        ConfigMap m = parse_config_file(tc.config_path);
        reject_unknown_keys(m, config_keys());
        auto unset = [&](const char* key) {
            auto it = opts.find(key);
            return it == opts.end() || it->second->count() == 0;
        };
        if (unset("anchor_interval"))
            pc.anchor_interval = config_get_int(m, "anchor_interval", pc.anchor_interval);
        if (unset("steps")) pc.num_steps = config_get_int(m, "steps", pc.num_steps);
        if (unset("beta_start")) pc.beta_start = config_get_double(m, "beta_start", pc.beta_start);
        if (unset("beta_end")) pc.beta_end = config_get_double(m, "beta_end", pc.beta_end);
        if (unset("text_scale")) pc.text_scale = config_get_double(m, "text_scale", pc.text_scale);
        if (unset("structural_scale"))
            pc.structural_scale = config_get_double(m, "structural_scale", pc.structural_scale);
        if (unset("attn_ratio")) pc.attn_ratio = config_get_double(m, "attn_ratio", pc.attn_ratio);
        if (unset("conv_ratio")) pc.conv_ratio = config_get_double(m, "conv_ratio", pc.conv_ratio);
        if (unset("control_strength"))
            pc.control_strength = config_get_double(m, "control_strength", pc.control_strength);
        if (unset("canny_sigma"))
            pc.vision.canny_sigma = config_get_double(m, "canny_sigma", pc.vision.canny_sigma);
        if (unset("canny_low"))
            pc.vision.canny_low = config_get_double(m, "canny_low", pc.vision.canny_low);
        if (unset("canny_high"))
            pc.vision.canny_high = config_get_double(m, "canny_high", pc.vision.canny_high);
        if (unset("flow_lambda"))
            pc.vision.flow_lambda = config_get_double(m, "flow_lambda", pc.vision.flow_lambda);
        if (unset("flow_iters"))
            pc.vision.flow_iters = config_get_int(m, "flow_iters", pc.vision.flow_iters);
        if (unset("seed") && m.count("seed")) pc.seed = parse_u64(m.at("seed"), "seed");
        if (unset("threads")) pc.threads = config_get_int(m, "threads", pc.threads);
        if (unset("denoiser")) pc.denoiser = config_get_string(m, "denoiser", pc.denoiser);
        if (unset("weight_seed") && m.count("weight_seed"))
            pc.weight_seed =
                static_cast<std::uint32_t>(parse_u64(m.at("weight_seed"), "weight_seed"));
        if (unset("invert_text"))
            tc.invert_text_csv = config_get_string(m, "invert_text", tc.invert_text_csv);
        if (unset("edit_text"))
            tc.edit_text_csv = config_get_string(m, "edit_text", tc.edit_text_csv);
        if (unset("structural_edges"))
            pc.structural_edges =
                config_get_int(m, "structural_edges", pc.structural_edges ? 1 : 0) != 0;
        if (unset("verbose")) pc.verbose = config_get_int(m, "verbose", pc.verbose ? 1 : 0) != 0;
    }
    pc.invert_text = parse_text_list(tc.invert_text_csv, "invert_text");
    pc.edit_text = parse_text_list(tc.edit_text_csv, "edit_text");
}

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

ConfigMap resolved_config(const ToolConfig& tc) {
    const PipelineConfig& pc = tc.pc;
    ConfigMap m;
    m["anchor_interval"] = std::to_string(pc.anchor_interval);
    m["steps"] = std::to_string(pc.num_steps);
    m["beta_start"] = fmt_g(pc.beta_start);
    m["beta_end"] = fmt_g(pc.beta_end);
    m["text_scale"] = fmt_g(pc.text_scale);
    m["structural_scale"] = fmt_g(pc.structural_scale);
    m["attn_ratio"] = fmt_g(pc.attn_ratio);
    m["conv_ratio"] = fmt_g(pc.conv_ratio);
    m["control_strength"] = fmt_g(pc.control_strength);
    m["canny_sigma"] = fmt_g(pc.vision.canny_sigma);
    m["canny_low"] = fmt_g(pc.vision.canny_low);
    m["canny_high"] = fmt_g(pc.vision.canny_high);
    m["flow_lambda"] = fmt_g(pc.vision.flow_lambda);
    m["flow_iters"] = std::to_string(pc.vision.flow_iters);
    m["seed"] = std::to_string(pc.seed);
    m["threads"] = std::to_string(pc.threads);
    m["denoiser"] = pc.denoiser;
    m["weight_seed"] = std::to_string(pc.weight_seed);
    m["invert_text"] = tc.invert_text_csv;
    m["edit_text"] = tc.edit_text_csv;
    m["structural_edges"] = pc.structural_edges ? "1" : "0";
    m["verbose"] = pc.verbose ? "1" : "0";
    return m;
}

// The echo lands next to the command's outputs: inside an output directory,
// or beside an output file.
void write_echo(const ToolConfig& tc, const std::string& out, bool out_is_dir) {
    fs::path dir = out_is_dir ? fs::path(out) : fs::path(out).parent_path();
    if (dir.empty()) dir = ".";
    write_config_echo((dir / "config_echo.txt").string(), resolved_config(tc));
}

// ---------------------------------------------------------------------------
// Shared stage-1 plumbing for invert / edit-anchors.

struct AnchorInputs {
    FrameSequence seq;
    AnchorSet anchors;
    std::vector<LatentGrid> latents;
    std::vector<LatentGrid> maps;  // empty unless structural conditioning is on
};

AnchorInputs load_anchor_inputs(const std::string& frames_dir, const PipelineConfig& pc,
                                bool use_structural) {
    AnchorInputs in;
    in.seq = FrameSequence::open(frames_dir);
    in.anchors = sample_anchors(in.seq.count, pc.anchor_interval);
    for (int idx : in.anchors.frame_indices) {
        RgbImage f = in.seq.frame(idx);
        in.latents.push_back(frame_to_grid(f));
        if (use_structural) {
            GrayImage g = rgb_to_gray(f);
            in.maps.push_back(structural_map_from_edges(
                canny(g, pc.vision.canny_sigma, pc.vision.canny_low, pc.vision.canny_high), 3));
        }
    }
    return in;
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Each throws; main maps exception types to exit codes.

void run_fixtures(const ToolConfig& tc, const std::string& out, const std::string& kind,
                  int frames, int width, int height) {
    FixtureSpec spec;
    spec.kind = kind;
    spec.frames = frames;
    spec.width = width;
    spec.height = height;
    spec.seed = tc.pc.seed;
    write_fixture(spec, out);
    write_echo(tc, out, true);
    std::cout << "wrote " << frames << " " << kind << " frames (" << width << "x" << height
              << ") to " << out << "\n";
}

void run_canny(const ToolConfig& tc, const std::string& input, const std::string& output) {
    const VisionParams& vp = tc.pc.vision;
    GrayImage g = rgb_to_gray(read_ppm(input));
    EdgeMap e = canny(g, vp.canny_sigma, vp.canny_low, vp.canny_high);
    RgbImage img(e.width, e.height);
    long on = 0;
    for (int y = 0; y < e.height; ++y)
        for (int x = 0; x < e.width; ++x) {
            std::uint8_t v = e.at(y, x) ? 255 : 0;
            on += e.at(y, x) ? 1 : 0;
            img.at(y, x, 0) = img.at(y, x, 1) = img.at(y, x, 2) = v;
        }
    write_ppm(output, img);
    write_echo(tc, output, false);
    std::cout << "canny: " << on << " edge pixels of " << (e.width * e.height) << "\n";
}

void run_flow(const ToolConfig& tc, const std::string& path_a, const std::string& path_b,
              const std::string& output) {
    const VisionParams& vp = tc.pc.vision;
    GrayImage a = rgb_to_gray(read_ppm(path_a));
    GrayImage b = rgb_to_gray(read_ppm(path_b));
    FlowField f = optical_flow(a, b, vp.flow_lambda, vp.flow_iters);
    LatentGrid g(2, f.height, f.width);
    double mag = 0.0;
    for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) {
            g.at(0, y, x) = f.dx[f.idx(y, x)];
            g.at(1, y, x) = f.dy[f.idx(y, x)];
            mag += std::sqrt(f.dx[f.idx(y, x)] * f.dx[f.idx(y, x)] +
                             f.dy[f.idx(y, x)] * f.dy[f.idx(y, x)]);
        }
    save_latents(output, {g});
    write_echo(tc, output, false);
    std::cout << "flow: mean magnitude " << fmt_g(mag / (f.height * f.width)) << " px\n";
}

void run_warp(const ToolConfig& tc, const std::string& input, const std::string& flow_path,
              const std::string& output, const std::string& mask_out) {
    RgbImage img = read_ppm(input);
    std::vector<LatentGrid> grids = load_latents(flow_path);
    if (grids.size() != 1 || grids[0].channels != 2)
        throw config_error("flow file must hold exactly one 2-channel grid (dx, dy)");
    const LatentGrid& g = grids[0];
    if (g.height != img.height || g.width != img.width)
        throw config_error("flow size " + std::to_string(g.width) + "x" +
                           std::to_string(g.height) + " does not match image " +
                           std::to_string(img.width) + "x" + std::to_string(img.height));
    FlowField f(g.height, g.width);
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
            f.dx[f.idx(y, x)] = g.at(0, y, x);
            f.dy[f.idx(y, x)] = g.at(1, y, x);
        }
    std::vector<std::uint8_t> mask;
    RgbImage warped = warp_rgb(img, f, mask_out.empty() ? nullptr : &mask);
    write_ppm(output, warped);
    if (!mask_out.empty()) {
        RgbImage mimg(img.width, img.height);
        long valid = 0;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                std::uint8_t v = mask[static_cast<std::size_t>(y) * img.width + x] ? 255 : 0;
                valid += v ? 1 : 0;
                mimg.at(y, x, 0) = mimg.at(y, x, 1) = mimg.at(y, x, 2) = v;
            }
        write_ppm(mask_out, mimg);
        std::cout << "warp: " << valid << " of " << (img.width * img.height)
                  << " pixels in bounds\n";
    } else {
        std::cout << "warp: " << img.width << "x" << img.height << " done\n";
    }
    write_echo(tc, output, false);
}

void run_invert(const ToolConfig& tc, const std::string& frames_dir, const std::string& out,
                const std::string& cache_path) {
    const PipelineConfig& pc = tc.pc;
    const NoiseSchedule schedule = make_linear_schedule(pc.num_steps, pc.beta_start, pc.beta_end);
    const bool analytic = pc.denoiser == "analytic";
    if (analytic && !cache_path.empty())
        throw config_error("the analytic denoiser has no feature taps; omit --cache");
    AnchorInputs in = load_anchor_inputs(frames_dir, pc, !analytic && pc.structural_edges);
    std::unique_ptr<PairDenoiser> den =
        make_denoiser(pc, schedule, 3, in.seq.height, in.seq.width);

    std::unique_ptr<ThreadPool> pool;
    if (pc.threads > 1) pool = std::make_unique<ThreadPool>(pc.threads);
    StageOptions opt;
    opt.pool = pool.get();
    opt.fusion_log = pc.verbose ? &std::cerr : nullptr;

    Condition inv_cond;
    if (!pc.invert_text.empty()) inv_cond.text = pc.invert_text;

    FeatureCache cache;
    const bool capture = !cache_path.empty();
    if (capture) cache = FeatureCache::spill_to(cache_path);
    std::vector<LatentGrid> noised =
        invert_anchors(in.latents, inv_cond, schedule, *den, capture ? &cache : nullptr,
                       in.maps.empty() ? nullptr : &in.maps, opt);
    if (capture) cache.finish_writes();
    save_latents(out, noised);
    write_echo(tc, out, false);
    std::cout << "inverted " << noised.size() << " anchors over " << pc.num_steps << " steps";
    if (capture) std::cout << ", cached " << cache.record_count() << " feature records";
    std::cout << "\n";
}

void run_edit_anchors(const ToolConfig& tc, const std::string& frames_dir,
                      const std::string& noised_path, const std::string& cache_path,
                      const std::string& out) {
    const PipelineConfig& pc = tc.pc;
    const NoiseSchedule schedule = make_linear_schedule(pc.num_steps, pc.beta_start, pc.beta_end);
    const bool analytic = pc.denoiser == "analytic";
    AnchorInputs in = load_anchor_inputs(frames_dir, pc, !analytic && pc.structural_edges);
    std::unique_ptr<PairDenoiser> den =
        make_denoiser(pc, schedule, 3, in.seq.height, in.seq.width);

    std::vector<LatentGrid> noised = load_latents(noised_path);
    if (noised.size() != in.anchors.frame_indices.size())
        throw config_error("noised anchor count " + std::to_string(noised.size()) +
                           " does not match the " +
                           std::to_string(in.anchors.frame_indices.size()) +
                           " anchors sampled from " + frames_dir);

    InjectionConfig inj{pc.attn_ratio, pc.conv_ratio};
    const bool wants_injection = injection_step_count(inj.attn_ratio, pc.num_steps) > 0 ||
                                 injection_step_count(inj.conv_ratio, pc.num_steps) > 0;
    FeatureCache cache;
    bool use_cache = false;
    if (!analytic && wants_injection) {
        if (cache_path.empty())
            throw config_error(
                "feature injection is on (attn_ratio/conv_ratio > 0) but no --cache was given; "
                "run invert with --cache first");
        if (!fs::exists(cache_path))
            throw config_error("missing inversion cache: '" + cache_path +
                               "'; run invert first");
        cache = FeatureCache::open(cache_path);
        use_cache = true;
    }

    std::unique_ptr<ThreadPool> pool;
    if (pc.threads > 1) pool = std::make_unique<ThreadPool>(pc.threads);
    StageOptions opt;
    opt.pool = pool.get();
    opt.fusion_log = pc.verbose ? &std::cerr : nullptr;

    Condition edit_cond;
    if (!pc.edit_text.empty()) edit_cond.text = pc.edit_text;
    GuidanceConfig guidance{pc.text_scale, pc.structural_scale};

    std::vector<LatentGrid> edited =
        edit_anchors(noised, use_cache ? &cache : nullptr, edit_cond, guidance, inj, schedule,
                     *den, in.maps.empty() ? nullptr : &in.maps, opt);
    save_latents(out, edited);
    write_echo(tc, out, false);
    std::cout << "edited " << edited.size() << " anchors (text scale " << fmt_g(pc.text_scale)
              << ", structural scale " << fmt_g(pc.structural_scale) << ")\n";
}

void run_interpolate(const ToolConfig& tc, const std::string& frames_dir,
                     const std::string& edited_path, const std::string& out_dir) {
    const PipelineConfig& pc = tc.pc;
    const NoiseSchedule schedule = make_linear_schedule(pc.num_steps, pc.beta_start, pc.beta_end);
    FrameSequence seq = FrameSequence::open(frames_dir);
    DiskFrames src(seq);
    AnchorSet anchors = sample_anchors(seq.count, pc.anchor_interval);
    std::vector<LatentGrid> edited = load_latents(edited_path);
    if (edited.size() != anchors.frame_indices.size())
        throw config_error("edited anchor count " + std::to_string(edited.size()) +
                           " does not match the " + std::to_string(anchors.frame_indices.size()) +
                           " anchors sampled from " + frames_dir);
    std::unique_ptr<PairDenoiser> den = make_denoiser(pc, schedule, 3, seq.height, seq.width);
    std::unique_ptr<ThreadPool> pool;
    if (pc.threads > 1) pool = std::make_unique<ThreadPool>(pc.threads);

    FrameSequenceWriter writer(out_dir, seq.width, seq.height);
    WriterSink sink(writer);
    std::ofstream log(out_dir + "/run_log.txt");
    Stage2Result r = run_stage2(src, edited, anchors, pc, *den, schedule, sink, pool.get(), &log);
    writer.finalize();
    write_echo(tc, out_dir, true);
    std::cout << "interpolated " << r.frames_out << " frames in " << fmt_g(r.seconds) << "s\n";
}

void run_pipeline_cmd(const ToolConfig& tc, const std::string& frames_dir,
                      const std::string& out_dir) {
    const PipelineConfig& pc = tc.pc;
    FrameSequence seq = FrameSequence::open(frames_dir);
    DiskFrames src(seq);
    FrameSequenceWriter writer(out_dir, seq.width, seq.height);
    WriterSink sink(writer);
    std::ofstream log(out_dir + "/run_log.txt");
    PipelineResult r = run_pipeline(src, sink, pc, out_dir, &log);
    writer.finalize();
    write_echo(tc, out_dir, true);
    std::cout << "pipeline: " << r.frames_out << " frames, " << r.anchor_count << " anchors, "
              << "stage1 " << fmt_g(r.stage1_seconds) << "s, stage2 " << fmt_g(r.stage2_seconds)
              << "s\n";
}

void run_metrics(const ToolConfig& tc, const std::string& original_dir,
                 const std::string& edited_dir, const std::string& out_json,
                 const std::string& embeddings_path, const std::string& prompt_path) {
    DiskFrames original(FrameSequence::open(original_dir));
    DiskFrames edited(FrameSequence::open(edited_dir));
    std::unique_ptr<Embedder> emb;
    if (embeddings_path.empty())
        emb = std::make_unique<ToyEmbedder>();
    else
        emb = std::make_unique<ExternalEmbedder>(embeddings_path);

    std::vector<double> prompt;
    if (!prompt_path.empty()) {
        std::vector<std::vector<float>> vecs = load_embeddings(prompt_path);
        if (vecs.empty()) throw config_error("prompt embedding file holds no vectors");
        prompt.assign(vecs[0].begin(), vecs[0].end());
    }

    MetricsReport rep = compute_metrics(original, edited, *emb, tc.pc.vision,
                                        prompt.empty() ? nullptr : &prompt, &std::cerr);
    std::ofstream f(out_json);
    if (!f) throw io_error("cannot write " + out_json);
    f << rep.to_json() << "\n";
    write_echo(tc, out_json, false);
    std::cout << rep.to_key_values();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"anchor-based long-video editing toolkit"};
    app.name("anchorkit");
    app.require_subcommand(1);
    app.set_version_flag("--version", "anchorkit 0.1.0");

    ToolConfig tc;

    // fixtures
    std::string fx_out, fx_kind = "translate";
    int fx_frames = 25, fx_width = 64, fx_height = 64;
    CLI::App* fixtures = app.add_subcommand("fixtures", "render a synthetic frame sequence");
    fixtures->add_option("--out", fx_out, "target directory")->required();
    fixtures->add_option("--kind", fx_kind, "translate | static | mix | noise");
    fixtures->add_option("--frames", fx_frames, "frame count");
    fixtures->add_option("--width", fx_width, "frame width");
    fixtures->add_option("--height", fx_height, "frame height");
    OptionMap fixtures_opts = bind_common(fixtures, tc);
    fixtures->callback([&] {
        finalize_settings(tc, fixtures_opts);
        run_fixtures(tc, fx_out, fx_kind, fx_frames, fx_width, fx_height);
    });

    // canny
    std::string cn_in, cn_out;
    CLI::App* cn = app.add_subcommand("canny", "edge map of one frame");
    cn->add_option("--input", cn_in, "input PPM")->required();
    cn->add_option("--output", cn_out, "output PPM (edges white)")->required();
    OptionMap cn_opts = bind_common(cn, tc);
    cn->callback([&] {
        finalize_settings(tc, cn_opts);
        run_canny(tc, cn_in, cn_out);
    });

    // flow
    std::string fl_a, fl_b, fl_out;
    CLI::App* fl = app.add_subcommand("flow", "dense optical flow between two frames");
    fl->add_option("--a", fl_a, "first frame PPM")->required();
    fl->add_option("--b", fl_b, "second frame PPM")->required();
    fl->add_option("--output", fl_out, "output latent file (2 channels: dx, dy)")->required();
    OptionMap fl_opts = bind_common(fl, tc);
    fl->callback([&] {
        finalize_settings(tc, fl_opts);
        run_flow(tc, fl_a, fl_b, fl_out);
    });

    // warp
    std::string wp_in, wp_flow, wp_out, wp_mask;
    CLI::App* wp = app.add_subcommand("warp", "warp a frame backward along a flow field");
    wp->add_option("--input", wp_in, "input PPM")->required();
    wp->add_option("--flow", wp_flow, "flow latent file from the flow command")->required();
    wp->add_option("--output", wp_out, "output PPM")->required();
    wp->add_option("--mask-out", wp_mask, "optional PPM of in-bounds pixels");
    OptionMap wp_opts = bind_common(wp, tc);
    wp->callback([&] {
        finalize_settings(tc, wp_opts);
        run_warp(tc, wp_in, wp_flow, wp_out, wp_mask);
    });

    // invert
    std::string iv_frames, iv_out, iv_cache;
    CLI::App* iv = app.add_subcommand(
        "invert", "deterministically noise the anchor frames, capturing denoiser features");
    iv->add_option("--frames", iv_frames, "input frame directory")->required();
    iv->add_option("--out", iv_out, "output latent file of noised anchors")->required();
    iv->add_option("--cache", iv_cache, "feature cache file to write (needed for edit-anchors)");
    OptionMap iv_opts = bind_common(iv, tc);
    iv->callback([&] {
        finalize_settings(tc, iv_opts);
        run_invert(tc, iv_frames, iv_out, iv_cache);
    });

    // edit-anchors
    std::string ed_frames, ed_noised, ed_cache, ed_out;
    CLI::App* ed = app.add_subcommand(
        "edit-anchors", "guided re-denoising of noised anchors with feature injection");
    ed->add_option("--frames", ed_frames, "original frame directory (for structural maps)")
        ->required();
    ed->add_option("--noised", ed_noised, "noised anchor latents from invert")->required();
    ed->add_option("--cache", ed_cache, "feature cache written by invert");
    ed->add_option("--out", ed_out, "output latent file of edited anchors")->required();
    OptionMap ed_opts = bind_common(ed, tc);
    ed->callback([&] {
        finalize_settings(tc, ed_opts);
        run_edit_anchors(tc, ed_frames, ed_noised, ed_cache, ed_out);
    });

    // interpolate
    std::string it_frames, it_edited, it_out;
    CLI::App* it = app.add_subcommand(
        "interpolate", "propagate edited anchors across every segment (stage 2 only)");
    it->add_option("--frames", it_frames, "original frame directory")->required();
    it->add_option("--edited", it_edited, "edited anchor latents")->required();
    it->add_option("--out", it_out, "output frame directory")->required();
    OptionMap it_opts = bind_common(it, tc);
    it->callback([&] {
        finalize_settings(tc, it_opts);
        run_interpolate(tc, it_frames, it_edited, it_out);
    });

    // pipeline
    std::string pl_frames, pl_out;
    CLI::App* pl = app.add_subcommand("pipeline", "full run: invert, edit, interpolate");
    pl->add_option("--frames", pl_frames, "input frame directory")->required();
    pl->add_option("--out", pl_out, "output directory (frames, cache, log)")->required();
    OptionMap pl_opts = bind_common(pl, tc);
    pl->callback([&] {
        finalize_settings(tc, pl_opts);
        run_pipeline_cmd(tc, pl_frames, pl_out);
    });

    // metrics
    std::string mt_orig, mt_edit, mt_out, mt_emb, mt_prompt;
    CLI::App* mt = app.add_subcommand("metrics", "similarity/consistency report for an edit");
    mt->add_option("--original", mt_orig, "original frame directory")->required();
    mt->add_option("--edited", mt_edit, "edited frame directory")->required();
    mt->add_option("--out", mt_out, "output JSON report path")->required();
    mt->add_option("--embeddings", mt_emb, "precomputed per-frame embedding file");
    mt->add_option("--prompt-embedding", mt_prompt, "embedding file whose first vector is the prompt");
    OptionMap mt_opts = bind_common(mt, tc);
    mt->callback([&] {
        finalize_settings(tc, mt_opts);
        run_metrics(tc, mt_orig, mt_edit, mt_out, mt_emb, mt_prompt);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);  // --help / --version
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const config_error& e) {
        std::cerr << "anchorkit: config error: " << e.what() << "\n";
        return 2;
    } catch (const contract_error& e) {
        std::cerr << "anchorkit: contract error: " << e.what() << "\n";
        return 2;
    } catch (const unsupported_error& e) {
        std::cerr << "anchorkit: unsupported: " << e.what() << "\n";
        return 2;
    } catch (const format_error& e) {
        std::cerr << "anchorkit: format error: " << e.what() << "\n";
        return 1;
    } catch (const io_error& e) {
        std::cerr << "anchorkit: i/o error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "anchorkit: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
