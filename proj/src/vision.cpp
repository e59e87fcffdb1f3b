#include "anchorkit/vision.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace anchorkit {

double luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    return (0.299 * r + 0.587 * g + 0.114 * b) / 255.0;
}

GrayImage rgb_to_gray(const RgbImage& img) {
    GrayImage out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.at(y, x) = luma(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    return out;
}

namespace {

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

GrayImage gaussian_blur(const GrayImage& img, double sigma) {
    if (!(sigma > 0.0)) throw contract_error("gaussian_blur: sigma must be positive");
    int radius = static_cast<int>(std::ceil(3.0 * sigma));
    int side = 2 * radius + 1;
    if (img.height < side || img.width < side)
        throw contract_error("gaussian_blur: image smaller than the kernel (" +
                             std::to_string(side) + "x" + std::to_string(side) + ")");
    std::vector<double> kernel(static_cast<std::size_t>(side) * side);
    double total = 0.0;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
            double w = std::exp(-(double(dy) * dy + double(dx) * dx) / (2.0 * sigma * sigma));
            kernel[static_cast<std::size_t>(dy + radius) * side + (dx + radius)] = w;
            total += w;
        }
    for (double& w : kernel) w /= total;

    GrayImage out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double acc = 0.0;
            for (int dy = -radius; dy <= radius; ++dy) {
                int sy = clampi(y + dy, 0, img.height - 1);
                for (int dx = -radius; dx <= radius; ++dx) {
                    int sx = clampi(x + dx, 0, img.width - 1);
                    acc += kernel[static_cast<std::size_t>(dy + radius) * side + (dx + radius)] *
                           img.at(sy, sx);
                }
            }
            out.at(y, x) = acc;
        }
    return out;
}

void sobel_gradients(const GrayImage& img, GrayImage& gx, GrayImage& gy) {
    gx = GrayImage(img.height, img.width);
    gy = GrayImage(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            auto p = [&](int dy, int dx) {
                return img.at(clampi(y + dy, 0, img.height - 1),
                              clampi(x + dx, 0, img.width - 1));
            };
            gx.at(y, x) =
                p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
            gy.at(y, x) =
                p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
        }
}

EdgeMap canny(const GrayImage& img, double sigma, double low, double high) {
    if (!(low > 0.0 && low < high && high < 1.0))
        throw contract_error("canny: thresholds must satisfy 0 < low < high < 1");
    GrayImage blurred = gaussian_blur(img, sigma);
    GrayImage gx, gy;
    sobel_gradients(blurred, gx, gy);

    int h = img.height, w = img.width;
    GrayImage mag(h, w);
    for (std::size_t i = 0; i < mag.data.size(); ++i)
        mag.data[i] = std::sqrt(gx.data[i] * gx.data[i] + gy.data[i] * gy.data[i]);

    // non-maximum suppression; sectors: 0 = E/W, 1 = NE/SW, 2 = N/S, 3 = NW/SE
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(h) * w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double m = mag.at(y, x);
            if (m <= 0.0) continue;
            double angle = std::atan2(gy.at(y, x), gx.at(y, x));
            if (angle < 0.0) angle += M_PI;  // direction is unsigned
            int sector = static_cast<int>(std::floor((angle + M_PI / 8.0) / (M_PI / 4.0))) % 4;
            // y grows downward, so sector 1 (angle ~ pi/4) is the main
            // diagonal. n1 is the along-gradient neighbor earlier in raster
            // order.
            int n1y = 0, n1x = 0;
            switch (sector) {
                case 0: n1y = 0; n1x = -1; break;   // E/W
                case 1: n1y = -1; n1x = -1; break;  // main diagonal
                case 2: n1y = -1; n1x = 0; break;   // N/S
                default: n1y = -1; n1x = 1; break;  // anti-diagonal
            }
            auto magat = [&](int yy, int xx) {
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
                return mag.at(yy, xx);
            };
            double prev = magat(y + n1y, x + n1x);
            double next = magat(y - n1y, x - n1x);
            if (m > prev && m >= next) keep[static_cast<std::size_t>(y) * w + x] = 1;
        }

    // hysteresis: grow from strong pixels through weak ones, 8-connected
    EdgeMap out(h, w);
    std::deque<std::pair<int, int>> frontier;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (keep[static_cast<std::size_t>(y) * w + x] && mag.at(y, x) >= high) {
                out.at(y, x) = 1;
                frontier.emplace_back(y, x);
            }
    while (!frontier.empty()) {
        auto [y, x] = frontier.front();
        frontier.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (dy == 0 && dx == 0) continue;
                int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                if (out.at(yy, xx)) continue;
                if (keep[static_cast<std::size_t>(yy) * w + xx] && mag.at(yy, xx) >= low) {
                    out.at(yy, xx) = 1;
                    frontier.emplace_back(yy, xx);
                }
            }
    }
    return out;
}

FlowField optical_flow(const GrayImage& a, const GrayImage& b, double lambda, int iters) {
    if (a.height != b.height || a.width != b.width)
        throw contract_error("optical_flow: image dimensions differ");
    if (!(lambda > 0.0)) throw contract_error("optical_flow: lambda must be positive");
    if (iters <= 0) throw contract_error("optical_flow: iteration count must be positive");

    int h = a.height, w = a.width;
    std::vector<double> ix(static_cast<std::size_t>(h) * w), iy(ix.size()), it(ix.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            auto cd = [&](const GrayImage& im, int axis) {
                if (axis == 0)
                    return 0.5 * (im.at(y, clampi(x + 1, 0, w - 1)) -
                                  im.at(y, clampi(x - 1, 0, w - 1)));
                return 0.5 * (im.at(clampi(y + 1, 0, h - 1), x) -
                              im.at(clampi(y - 1, 0, h - 1), x));
            };
            std::size_t i = static_cast<std::size_t>(y) * w + x;
            ix[i] = 0.5 * (cd(a, 0) + cd(b, 0));
            iy[i] = 0.5 * (cd(a, 1) + cd(b, 1));
            it[i] = b.at(y, x) - a.at(y, x);
        }

    FlowField cur(h, w), nxt(h, w);
    for (int iter = 0; iter < iters; ++iter) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                auto mean4 = [&](const std::vector<double>& f) {
                    return 0.25 * (f[cur.idx(clampi(y - 1, 0, h - 1), x)] +
                                   f[cur.idx(clampi(y + 1, 0, h - 1), x)] +
                                   f[cur.idx(y, clampi(x - 1, 0, w - 1))] +
                                   f[cur.idx(y, clampi(x + 1, 0, w - 1))]);
                };
                std::size_t i = cur.idx(y, x);
                double ubar = mean4(cur.dx);
                double vbar = mean4(cur.dy);
                double t = (ix[i] * ubar + iy[i] * vbar + it[i]) /
                           (lambda + ix[i] * ix[i] + iy[i] * iy[i]);
                nxt.dx[i] = ubar - ix[i] * t;
                nxt.dy[i] = vbar - iy[i] * t;
            }
        std::swap(cur, nxt);
    }
    return cur;
}

WarpResult warp(const GrayImage& img, const FlowField& flow) {
    if (img.height != flow.height || img.width != flow.width)
        throw contract_error("warp: flow dimensions differ from image");
    int h = img.height, w = img.width;
    WarpResult res;
    res.image = GrayImage(h, w);
    res.mask.assign(static_cast<std::size_t>(h) * w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            std::size_t i = flow.idx(y, x);
            double sx = x + flow.dx[i];
            double sy = y + flow.dy[i];
            if (sx < 0.0 || sx > w - 1 || sy < 0.0 || sy > h - 1) continue;
            int x0 = static_cast<int>(std::floor(sx));
            int y0 = static_cast<int>(std::floor(sy));
            int x1 = std::min(x0 + 1, w - 1);
            int y1 = std::min(y0 + 1, h - 1);
            double fx = sx - x0;
            double fy = sy - y0;
            res.image.at(y, x) = (1.0 - fy) * ((1.0 - fx) * img.at(y0, x0) + fx * img.at(y0, x1)) +
                                 fy * ((1.0 - fx) * img.at(y1, x0) + fx * img.at(y1, x1));
            res.mask[i] = 1;
        }
    return res;
}

RgbImage warp_rgb(const RgbImage& img, const FlowField& flow, std::vector<std::uint8_t>* mask) {
    if (img.height != flow.height || img.width != flow.width)
        throw contract_error("warp: flow dimensions differ from image");
    GrayImage plane(img.height, img.width);
    RgbImage out(img.width, img.height);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) plane.at(y, x) = img.at(y, x, c) / 255.0;
        WarpResult r = warp(plane, flow);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double v = std::clamp(r.image.at(y, x), 0.0, 1.0);
                out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        if (c == 0 && mask) *mask = r.mask;
    }
    return out;
}

}  // namespace anchorkit
