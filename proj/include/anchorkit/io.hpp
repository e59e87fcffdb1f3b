#ifndef ANCHORKIT_IO_HPP
#define ANCHORKIT_IO_HPP

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "anchorkit/tensor.hpp"

namespace anchorkit {

// ---------------------------------------------------------------------------
// Latent files: magic "ANCH", version, then n latent grids of identical
// shape. All integers little-endian 32-bit, payload 32-bit float.

void save_latents(const std::string& path, const std::vector<LatentGrid>& grids);
std::vector<LatentGrid> load_latents(const std::string& path);

// ---------------------------------------------------------------------------
// Weight files: magic "ASWT", version, seed, then a list of shaped f32
// tensors.

struct TensorFile {
    struct Entry {
        std::vector<std::uint32_t> dims;
        std::vector<float> data;
    };
    std::uint32_t seed = 0;
    std::vector<Entry> tensors;
};

void save_tensor_file(const std::string& path, const TensorFile& tf);
TensorFile load_tensor_file(const std::string& path);

// ---------------------------------------------------------------------------
// Embedding files: magic "ASEM", count, dim, then count f32 vectors.

void save_embeddings(const std::string& path, const std::vector<std::vector<float>>& vecs);
std::vector<std::vector<float>> load_embeddings(const std::string& path);

// ---------------------------------------------------------------------------
// Frames: binary 8-bit P6 PPM, and directories of numbered frames described
// by a manifest.

struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // interleaved rgb

    RgbImage() = default;
    RgbImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3) {}
    std::uint8_t& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    std::uint8_t at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
};

void write_ppm(const std::string& path, const RgbImage& img);
RgbImage read_ppm(const std::string& path);

std::string frame_filename(int index);  // zero-padded "000042.ppm"

// A directory of frames named 000000.ppm.. with a manifest.txt holding
// count/width/height/format. Frames are read lazily, one at a time.
struct FrameSequence {
    std::string dir;
    int count = 0;
    int width = 0;
    int height = 0;

    static FrameSequence open(const std::string& dir);
    RgbImage frame(int index) const;
};

// Streaming writer so a long output sequence never lives in memory at once.
struct FrameSequenceWriter {
    std::string dir;
    int width = 0;
    int height = 0;
    int written = 0;

    FrameSequenceWriter(const std::string& dir, int width, int height);
    void append(const RgbImage& img);
    void finalize();  // writes manifest.txt
};

// ---------------------------------------------------------------------------
// Config files: one key=value per line, '#' comments, blank lines ignored.
// Ordered map so echo output is stable.

using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_text(const std::string& text);
ConfigMap parse_config_file(const std::string& path);
// Throws config_error naming the first key not in `allowed`.
void reject_unknown_keys(const ConfigMap& cfg, const std::set<std::string>& allowed);
// Echo of the effective settings, written next to every run's outputs.
void write_config_echo(const std::string& path, const ConfigMap& cfg);

double config_get_double(const ConfigMap& cfg, const std::string& key, double fallback);
int config_get_int(const ConfigMap& cfg, const std::string& key, int fallback);
std::string config_get_string(const ConfigMap& cfg, const std::string& key,
                              const std::string& fallback);

}  // namespace anchorkit

#endif
