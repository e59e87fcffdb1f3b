#include "anchorkit/metrics.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

namespace anchorkit {

// ---------------------------------------------------------------------------
// embedders

std::vector<double> ToyEmbedder::embed(const RgbImage& frame, int) const {
    GrayImage g = rgb_to_gray(frame);
    std::vector<double> v(72, 0.0);
    for (int r = 0; r < 8; ++r) {
        int y0 = r * g.height / 8, y1 = (r + 1) * g.height / 8;
        for (int c = 0; c < 8; ++c) {
            int x0 = c * g.width / 8, x1 = (c + 1) * g.width / 8;
            double acc = 0.0;
            int cnt = 0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                    acc += g.at(y, x);
                    ++cnt;
                }
            v[static_cast<std::size_t>(r) * 8 + c] = cnt ? acc / cnt : 0.0;
        }
    }
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
            int xm = x > 0 ? x - 1 : 0, xp = x < g.width - 1 ? x + 1 : g.width - 1;
            int ym = y > 0 ? y - 1 : 0, yp = y < g.height - 1 ? y + 1 : g.height - 1;
            double gx = 0.5 * (g.at(y, xp) - g.at(y, xm));
            double gy = 0.5 * (g.at(yp, x) - g.at(ym, x));
            double mag = std::sqrt(gx * gx + gy * gy);
            if (mag <= 0.0) continue;
            int bin = static_cast<int>(std::floor((std::atan2(gy, gx) + M_PI) / (M_PI / 4.0)));
            if (bin > 7) bin = 7;
            if (bin < 0) bin = 0;
            v[static_cast<std::size_t>(64 + bin)] += mag;
        }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (double& x : v) x /= norm;
    else
        v[0] = 1.0;
    return v;
}

ExternalEmbedder::ExternalEmbedder(const std::string& path) {
    std::vector<std::vector<float>> raw = load_embeddings(path);
    vectors.reserve(raw.size());
    for (const auto& r : raw) {
        std::vector<double> v(r.begin(), r.end());
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 0.0)
            for (double& x : v) x /= norm;
        else
            v[0] = 1.0;
        vectors.push_back(std::move(v));
    }
}

int ExternalEmbedder::dim() const {
    return vectors.empty() ? 0 : static_cast<int>(vectors[0].size());
}

std::vector<double> ExternalEmbedder::embed(const RgbImage&, int frame_index) const {
    if (frame_index < 0 || frame_index >= static_cast<int>(vectors.size()))
        throw contract_error("external embedder: no vector for frame " +
                             std::to_string(frame_index) + " (file has " +
                             std::to_string(vectors.size()) + ")");
    return vectors[static_cast<std::size_t>(frame_index)];
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw contract_error("cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---------------------------------------------------------------------------
// similarity metrics

namespace {

std::vector<std::vector<double>> embed_all(const FrameSource& frames, const Embedder& emb) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(frames.count()));
    for (int i = 0; i < frames.count(); ++i)
        out[static_cast<std::size_t>(i)] = emb.embed(frames.frame(i), i);
    return out;
}

}  // namespace

double sim_star(const FrameSource& frames, const Embedder& emb) {
    int n = frames.count();
    if (n < 25) throw contract_error("sim_star: needs at least 25 frames, got " +
                                     std::to_string(n));
    std::vector<std::vector<double>> e = embed_all(frames, emb);
    std::vector<double> vals;
    for (int i = 0; i + 24 < n; ++i)
        vals.push_back(cosine(e[static_cast<std::size_t>(i)], e[static_cast<std::size_t>(i + 24)]));
    return pairwise_mean(vals) * 100.0;
}

double sim_dagger(const FrameSource& frames, const Embedder& emb) {
    int n = frames.count();
    if (n < 25) throw contract_error("sim_dagger: needs at least 25 frames, got " +
                                     std::to_string(n));
    std::vector<std::vector<double>> e = embed_all(frames, emb);
    std::vector<double> vals;
    for (int k = 1; 24 * k < n; ++k)
        vals.push_back(cosine(e[static_cast<std::size_t>(24 * k)], e[0]));
    return pairwise_mean(vals) * 100.0;
}

double sim_adjacent(const FrameSource& frames, const Embedder& emb) {
    int n = frames.count();
    if (n < 2) throw contract_error("sim_adjacent: needs at least 2 frames");
    std::vector<std::vector<double>> e = embed_all(frames, emb);
    std::vector<double> vals;
    for (int i = 0; i + 1 < n; ++i)
        vals.push_back(cosine(e[static_cast<std::size_t>(i)], e[static_cast<std::size_t>(i + 1)]));
    return pairwise_mean(vals) * 100.0;
}

// ---------------------------------------------------------------------------
// structural metrics

double warp_error(const FrameSource& original, const FrameSource& edited,
                  const VisionParams& params, std::ostream* warnings) {
    int n = original.count();
    if (edited.count() != n)
        throw contract_error("warp_error: frame counts differ");
    if (n < 2) throw contract_error("warp_error: needs at least 2 frames");

    std::vector<double> per_frame;
    GrayImage go_next = rgb_to_gray(original.frame(0));
    GrayImage ge_next = rgb_to_gray(edited.frame(0));
    for (int i = 0; i + 1 < n; ++i) {
        GrayImage go_i = std::move(go_next);
        GrayImage ge_i = std::move(ge_next);
        go_next = rgb_to_gray(original.frame(i + 1));
        ge_next = rgb_to_gray(edited.frame(i + 1));
        if (go_i.height != ge_i.height || go_i.width != ge_i.width)
            throw contract_error("warp_error: original/edited dimensions differ");

        FlowField fwd = optical_flow(go_i, go_next, params.flow_lambda, params.flow_iters);
        FlowField bwd = optical_flow(go_next, go_i, params.flow_lambda, params.flow_iters);
        WarpResult warped = warp(ge_next, fwd);

        // forward-backward consistency: sample the backward flow where the
        // forward flow points and require the roundtrip be under a pixel
        GrayImage bdx(go_i.height, go_i.width), bdy(go_i.height, go_i.width);
        bdx.data = bwd.dx;
        bdy.data = bwd.dy;
        WarpResult wbdx = warp(bdx, fwd);
        WarpResult wbdy = warp(bdy, fwd);

        std::vector<double> diffs;
        for (int y = 0; y < go_i.height; ++y)
            for (int x = 0; x < go_i.width; ++x) {
                std::size_t p = fwd.idx(y, x);
                if (!warped.mask[p] || !wbdx.mask[p]) continue;
                double rx = fwd.dx[p] + wbdx.image.at(y, x);
                double ry = fwd.dy[p] + wbdy.image.at(y, x);
                if (std::sqrt(rx * rx + ry * ry) >= 1.0) continue;
                diffs.push_back(std::fabs(warped.image.at(y, x) - ge_i.at(y, x)));
            }
        if (diffs.empty()) {
            if (warnings)
                (*warnings) << "warp_error: frame " << i << " skipped (empty mask)\n";
            continue;
        }
        per_frame.push_back(pairwise_mean(diffs));
    }
    if (per_frame.empty())
        throw contract_error("warp_error: every frame pair had an empty mask");
    return pairwise_mean(per_frame) * 100.0;
}

double canny_error(const FrameSource& original, const FrameSource& edited,
                   const VisionParams& params) {
    int n = original.count();
    if (edited.count() != n)
        throw contract_error("canny_error: frame counts differ");
    if (n < 1) throw contract_error("canny_error: empty sequence");
    std::vector<double> per_frame;
    for (int i = 0; i < n; ++i) {
        GrayImage go = rgb_to_gray(original.frame(i));
        GrayImage ge = rgb_to_gray(edited.frame(i));
        if (go.height != ge.height || go.width != ge.width)
            throw contract_error("canny_error: original/edited dimensions differ");
        EdgeMap eo = canny(go, params.canny_sigma, params.canny_low, params.canny_high);
        EdgeMap ee = canny(ge, params.canny_sigma, params.canny_low, params.canny_high);
        long disagree = 0;
        for (std::size_t p = 0; p < eo.data.size(); ++p)
            disagree += eo.data[p] != ee.data[p] ? 1 : 0;
        per_frame.push_back(static_cast<double>(disagree) / static_cast<double>(eo.data.size()));
    }
    return pairwise_mean(per_frame) * 100.0;
}

double entropy(const GrayImage& img) {
    long hist[256] = {0};
    for (double v : img.data) {
        int bin = static_cast<int>(std::floor(v * 256.0));
        if (bin > 255) bin = 255;
        if (bin < 0) bin = 0;
        ++hist[bin];
    }
    double total = static_cast<double>(img.data.size());
    double h = 0.0;
    for (long c : hist) {
        if (c == 0) continue;
        double p = static_cast<double>(c) / total;
        h -= p * std::log2(p);
    }
    return h;
}

double entropy_mean(const FrameSource& frames) {
    int n = frames.count();
    if (n < 1) throw contract_error("entropy_mean: empty sequence");
    std::vector<double> vals;
    for (int i = 0; i < n; ++i) vals.push_back(entropy(rgb_to_gray(frames.frame(i))));
    return pairwise_mean(vals);
}

double text_sim(const FrameSource& frames, const std::vector<double>& prompt_embedding,
                const Embedder& emb) {
    if (!emb.supports_text())
        throw unsupported_error(
            "text_sim: the pixel-level embedder has no text space; use an external embedding "
            "file");
    if (static_cast<int>(prompt_embedding.size()) != emb.dim())
        throw contract_error("text_sim: prompt embedding dimension " +
                             std::to_string(prompt_embedding.size()) + " != embedder dimension " +
                             std::to_string(emb.dim()));
    int n = frames.count();
    if (n < 1) throw contract_error("text_sim: empty sequence");
    std::vector<double> vals;
    for (int i = 0; i < n; ++i)
        vals.push_back(cosine(emb.embed(frames.frame(i), i), prompt_embedding));
    return pairwise_mean(vals) * 100.0;
}

// ---------------------------------------------------------------------------
// report

std::string MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["sim_star"] = sim_star;
    j["sim_dagger"] = sim_dagger;
    j["sim_adjacent"] = sim_adjacent;
    j["warp_error"] = warp_error;
    j["canny_error"] = canny_error;
    j["entropy_mean"] = entropy_mean;
    if (text_sim) j["text_sim"] = *text_sim;
    return j.dump(2);
}

std::string MetricsReport::to_key_values() const {
    std::ostringstream os;
    os.precision(17);
    os << "sim_star=" << sim_star << "\n";
    os << "sim_dagger=" << sim_dagger << "\n";
    os << "sim_adjacent=" << sim_adjacent << "\n";
    os << "warp_error=" << warp_error << "\n";
    os << "canny_error=" << canny_error << "\n";
    os << "entropy_mean=" << entropy_mean << "\n";
    if (text_sim) os << "text_sim=" << *text_sim << "\n";
    return os.str();
}

MetricsReport compute_metrics(const FrameSource& original, const FrameSource& edited,
                              const Embedder& emb, const VisionParams& params,
                              const std::vector<double>* prompt_embedding,
                              std::ostream* warnings) {
    MetricsReport r;
    r.sim_star = sim_star(edited, emb);
    r.sim_dagger = sim_dagger(edited, emb);
    r.sim_adjacent = sim_adjacent(edited, emb);
    r.warp_error = warp_error(original, edited, params, warnings);
    r.canny_error = canny_error(original, edited, params);
    r.entropy_mean = entropy_mean(edited);
    if (prompt_embedding) r.text_sim = text_sim(edited, *prompt_embedding, emb);
    return r;
}

}  // namespace anchorkit
