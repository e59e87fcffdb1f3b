#ifndef ANCHORKIT_TENSOR_HPP
#define ANCHORKIT_TENSOR_HPP

#include <cstddef>
#include <string>
#include <vector>

#include "anchorkit/common.hpp"

namespace anchorkit {

// A single frame's latent: channels x height x width, row-major doubles.
// At desk scale frames and latents share this representation (identity
// encoder/decoder); pixel data lives in [0,1].
struct LatentGrid {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    LatentGrid() = default;
    LatentGrid(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w), data(checked_size(c, h, w), fill) {}

    static std::size_t checked_size(int c, int h, int w) {
        if (c <= 0 || h <= 0 || w <= 0)
            throw contract_error("LatentGrid: dimensions must be positive");
        return static_cast<std::size_t>(c) * h * w;
    }

    std::size_t size() const { return data.size(); }

    double& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    bool same_shape(const LatentGrid& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }

    std::string shape_str() const {
        return std::to_string(channels) + "x" + std::to_string(height) + "x" +
               std::to_string(width);
    }
};

inline void require_same_shape(const LatentGrid& a, const LatentGrid& b,
                               const char* where) {
    if (!a.same_shape(b))
        throw contract_error(std::string(where) + ": shape mismatch " +
                             a.shape_str() + " vs " + b.shape_str());
}

inline bool all_finite(const LatentGrid& g) {
    for (double v : g.data)
        if (!std::isfinite(v)) return false;
    return true;
}

inline LatentGrid& operator+=(LatentGrid& a, const LatentGrid& b) {
    require_same_shape(a, b, "operator+=");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
    return a;
}

inline LatentGrid& operator-=(LatentGrid& a, const LatentGrid& b) {
    require_same_shape(a, b, "operator-=");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] -= b.data[i];
    return a;
}

inline LatentGrid& operator*=(LatentGrid& a, double s) {
    for (double& v : a.data) v *= s;
    return a;
}

// a += s * b
inline void axpy(LatentGrid& a, double s, const LatentGrid& b) {
    require_same_shape(a, b, "axpy");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += s * b.data[i];
}

inline double max_abs_diff(const LatentGrid& a, const LatentGrid& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double d = std::fabs(a.data[i] - b.data[i]);
        if (d > m) m = d;
    }
    return m;
}

inline void fill_normal(LatentGrid& g, Rng& rng) {
    for (double& v : g.data) v = rng.normal();
}

// Dense row-major matrix of doubles. Token features in the attention
// blocks are (tokens x dim) matrices.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw contract_error("matmul: inner dimension mismatch");
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            double v = a.at(i, k);
            if (v == 0.0) continue;
            for (int j = 0; j < b.cols; ++j) out.at(i, j) += v * b.at(k, j);
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

}  // namespace anchorkit

#endif
