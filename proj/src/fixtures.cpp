#include "anchorkit/fixtures.hpp"

#include <algorithm>
#include <cmath>

#include "anchorkit/common.hpp"

namespace anchorkit {

namespace {

GrayImage make_texture(int h, int w, std::uint64_t seed) {
    GrayImage g(h, w);
    Rng rng(seed);
    for (double& v : g.data) v = rng.uniform();
    g = gaussian_blur(g, 2.0);
    auto [lo_it, hi_it] = std::minmax_element(g.data.begin(), g.data.end());
    double lo = *lo_it, hi = *hi_it;
    if (hi > lo) {
        for (double& v : g.data) v = 0.15 + 0.7 * (v - lo) / (hi - lo);
    } else {
        for (double& v : g.data) v = 0.5;
    }
    // Hard-edged boxes on top of the smooth texture so the frames carry
    // gradients strong enough for edge detection.
    for (int i = 0; i < 4; ++i) {
        int bw = w / 8 + static_cast<int>(rng.uniform() * (w / 8));
        int bh = h / 8 + static_cast<int>(rng.uniform() * (h / 8));
        int by = static_cast<int>(rng.uniform() * (h - bh));
        int bx = static_cast<int>(rng.uniform() * (w - bw));
        double v = (i % 2 == 0) ? 0.92 : 0.08;
        for (int y = by; y < by + bh; ++y)
            for (int x = bx; x < bx + bw; ++x) g.at(y, x) = v;
    }
    return g;
}

std::uint8_t to_byte(double v) {
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

void tint(RgbImage& img, int y, int x, double t) {
    img.at(y, x, 0) = to_byte(t);
    img.at(y, x, 1) = to_byte(0.8 * t + 0.1);
    img.at(y, x, 2) = to_byte(0.6 * t + 0.2);
}

}  // namespace

FixtureRenderer::FixtureRenderer(const FixtureSpec& spec) : spec_(spec) {
    require(spec.frames >= 1, "fixture: frame count must be >= 1");
    require(spec.width >= 16 && spec.height >= 16, "fixture: frames must be at least 16x16");
    if (spec.kind != "translate" && spec.kind != "static" && spec.kind != "mix" &&
        spec.kind != "noise")
        throw config_error("unknown fixture kind '" + spec.kind +
                           "' (expected translate, static, mix, or noise)");
    tex_a_ = make_texture(spec.height, spec.width, derive_seed(spec.seed, 0xA));
    if (spec_.kind == "mix") tex_b_ = make_texture(spec.height, spec.width, derive_seed(spec.seed, 0xB));
}

RgbImage FixtureRenderer::frame(int index) const {
    require(index >= 0 && index < spec_.frames,
            "fixture: frame index " + std::to_string(index) + " out of range");
    const int h = spec_.height, w = spec_.width;
    RgbImage img(w, h);
    if (spec_.kind == "noise") {
        Rng rng(derive_seed(spec_.seed, 0xF000u + static_cast<std::uint64_t>(index)));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) tint(img, y, x, rng.uniform());
        return img;
    }
    if (spec_.kind == "mix") {
        double alpha = spec_.frames > 1
                           ? static_cast<double>(index) / static_cast<double>(spec_.frames - 1)
                           : 0.0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                tint(img, y, x, (1.0 - alpha) * tex_a_.at(y, x) + alpha * tex_b_.at(y, x));
        return img;
    }
    const int shift = spec_.kind == "translate" ? index : 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int sx = ((x - shift) % w + w) % w;
            tint(img, y, x, tex_a_.at(y, sx));
        }
    return img;
}

void write_fixture(const FixtureSpec& spec, const std::string& dir) {
    FixtureRenderer render(spec);
    FrameSequenceWriter writer(dir, spec.width, spec.height);
    for (int i = 0; i < spec.frames; ++i) writer.append(render.frame(i));
    writer.finalize();
}

}  // namespace anchorkit
