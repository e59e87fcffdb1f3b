#ifndef ANCHORKIT_VISION_HPP
#define ANCHORKIT_VISION_HPP

#include <cstdint>
#include <utility>
#include <vector>

#include "anchorkit/io.hpp"
#include "anchorkit/tensor.hpp"

namespace anchorkit {

// Intensities in [0,1].
struct GrayImage {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    GrayImage() = default;
    GrayImage(int h, int w, double fill = 0.0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {
        if (h <= 0 || w <= 0) throw contract_error("GrayImage: dimensions must be positive");
    }
    double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

struct EdgeMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;  // 0 or 1

    EdgeMap() = default;
    EdgeMap(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}
    std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

// Per-pixel displacement in pixels; out(p) samples in(p + flow(p)) when
// warping backward.
struct FlowField {
    int height = 0;
    int width = 0;
    std::vector<double> dx, dy;

    FlowField() = default;
    FlowField(int h, int w)
        : height(h), width(w), dx(static_cast<std::size_t>(h) * w, 0.0),
          dy(static_cast<std::size_t>(h) * w, 0.0) {}
    std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }
};

// Shared knobs for the classical kernels (defaults are the desk settings).
struct VisionParams {
    double canny_sigma = 1.4;
    double canny_low = 0.1;
    double canny_high = 0.3;
    double flow_lambda = 0.1;
    int flow_iters = 100;
};

// luma weights 0.299 / 0.587 / 0.114
GrayImage rgb_to_gray(const RgbImage& img);
double luma(std::uint8_t r, std::uint8_t g, std::uint8_t b);

// Truncated Gaussian smoothing, radius ceil(3*sigma), replicated borders.
// The 2D kernel is built directly from exp(-(dy^2+dx^2)/(2 sigma^2)) and the
// window is accumulated in raster order so independently written code can
// reproduce results bit-for-bit.
GrayImage gaussian_blur(const GrayImage& img, double sigma);

// Unnormalized 3x3 Sobel, replicated borders. A hard unit step lands at
// magnitude 4; after the default detection blur (sigma 1.4) about 2.1, so
// the stock thresholds on [0,1] images sit well below real edges.
void sobel_gradients(const GrayImage& img, GrayImage& gx, GrayImage& gy);

// blur -> Sobel -> non-maximum suppression (4-sector angles; of the two
// neighbors along the gradient, the one earlier in raster order is compared
// strictly to break plateau ties one pixel wide) -> double-threshold
// hysteresis with 8-connectivity.
EdgeMap canny(const GrayImage& img, double sigma = 1.4, double low = 0.1, double high = 0.3);

// Horn-Schunck: flow starts at zero; each iteration moves (u,v) toward the
// 4-neighbour mean corrected by the optical-flow constraint, with smoothness
// weight lambda. Jacobi (double-buffered) updates.
FlowField optical_flow(const GrayImage& a, const GrayImage& b, double lambda = 0.1,
                       int iters = 100);

// Backward warp with bilinear sampling; mask marks pixels whose source
// sample stayed inside the image.
struct WarpResult {
    GrayImage image;
    std::vector<std::uint8_t> mask;  // 1 = valid
};
WarpResult warp(const GrayImage& img, const FlowField& flow);
RgbImage warp_rgb(const RgbImage& img, const FlowField& flow, std::vector<std::uint8_t>* mask);

}  // namespace anchorkit

#endif
