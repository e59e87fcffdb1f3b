#ifndef ANCHORKIT_NN_OPS_HPP
#define ANCHORKIT_NN_OPS_HPP

#include <cmath>
#include <vector>

#include "anchorkit/tensor.hpp"

namespace anchorkit {

// Small dense building blocks shared by the pair network and the control
// encoders. All loops are plain and deterministic.

// 3x3 convolution, zero padding 1, configurable stride.
// w layout: [out][in][ky][kx], b length out. Output dims are ceil(h/stride).
inline LatentGrid conv3x3(const LatentGrid& in, const std::vector<double>& w,
                          const std::vector<double>& b, int out_channels, int stride) {
    int oh = (in.height + stride - 1) / stride;
    int ow = (in.width + stride - 1) / stride;
    LatentGrid out(out_channels, oh, ow);
    for (int oc = 0; oc < out_channels; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                int cy = oy * stride;
                int cx = ox * stride;
                double acc = b[oc];
                for (int ic = 0; ic < in.channels; ++ic) {
                    const double* wk =
                        &w[((static_cast<std::size_t>(oc) * in.channels + ic) * 9)];
                    for (int ky = -1; ky <= 1; ++ky) {
                        int y = cy + ky;
                        if (y < 0 || y >= in.height) continue;
                        for (int kx = -1; kx <= 1; ++kx) {
                            int x = cx + kx;
                            if (x < 0 || x >= in.width) continue;
                            acc += wk[(ky + 1) * 3 + (kx + 1)] * in.at(ic, y, x);
                        }
                    }
                }
                out.at(oc, oy, ox) = acc;
            }
        }
    }
    return out;
}

// 1x1 convolution (per-pixel linear map across channels).
inline LatentGrid conv1x1(const LatentGrid& in, const std::vector<double>& w,
                          const std::vector<double>& b, int out_channels) {
    LatentGrid out(out_channels, in.height, in.width);
    int hw = in.height * in.width;
    for (int oc = 0; oc < out_channels; ++oc) {
        double* dst = &out.data[static_cast<std::size_t>(oc) * hw];
        for (int p = 0; p < hw; ++p) dst[p] = b[oc];
        for (int ic = 0; ic < in.channels; ++ic) {
            double wv = w[static_cast<std::size_t>(oc) * in.channels + ic];
            const double* src = &in.data[static_cast<std::size_t>(ic) * hw];
            for (int p = 0; p < hw; ++p) dst[p] += wv * src[p];
        }
    }
    return out;
}

inline void tanh_inplace(LatentGrid& g) {
    for (double& v : g.data) v = std::tanh(v);
}

// Average-pool a feature grid onto a (th x tw) token grid; tokens are
// channel vectors, row-major over the token grid.
inline Matrix pool_tokens(const LatentGrid& feat, int th, int tw) {
    Matrix tokens(th * tw, feat.channels);
    for (int r = 0; r < th; ++r) {
        int y0 = r * feat.height / th;
        int y1 = (r + 1) * feat.height / th;
        for (int c = 0; c < tw; ++c) {
            int x0 = c * feat.width / tw;
            int x1 = (c + 1) * feat.width / tw;
            double inv = 1.0 / (static_cast<double>(y1 - y0) * (x1 - x0));
            for (int ch = 0; ch < feat.channels; ++ch) {
                double acc = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) acc += feat.at(ch, y, x);
                tokens.at(r * tw + c, ch) = acc * inv;
            }
        }
    }
    return tokens;
}

// Broadcast token vectors back over their pooling blocks and add into feat.
inline void add_tokens_upsampled(LatentGrid& feat, const Matrix& tokens, int th, int tw) {
    if (tokens.rows != th * tw || tokens.cols != feat.channels)
        throw contract_error("add_tokens_upsampled: token grid mismatch");
    for (int r = 0; r < th; ++r) {
        int y0 = r * feat.height / th;
        int y1 = (r + 1) * feat.height / th;
        for (int c = 0; c < tw; ++c) {
            int x0 = c * feat.width / tw;
            int x1 = (c + 1) * feat.width / tw;
            for (int ch = 0; ch < feat.channels; ++ch) {
                double v = tokens.at(r * tw + c, ch);
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) feat.at(ch, y, x) += v;
            }
        }
    }
}

// Nearest-neighbour upsample to an explicit size.
inline LatentGrid upsample_nearest(const LatentGrid& in, int h, int w) {
    LatentGrid out(in.channels, h, w);
    for (int c = 0; c < in.channels; ++c)
        for (int y = 0; y < h; ++y) {
            int sy = y * in.height / h;
            for (int x = 0; x < w; ++x)
                out.at(c, y, x) = in.at(c, sy, x * in.width / w);
        }
    return out;
}

}  // namespace anchorkit

#endif
