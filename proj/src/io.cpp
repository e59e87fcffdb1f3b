#include "anchorkit/io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace anchorkit {

namespace {

constexpr std::uint32_t k_latent_version = 1;
constexpr std::uint32_t k_weight_version = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw format_error(path + ": truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, const float* v, std::size_t n) {
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * 4));
}

void read_f32(std::istream& is, float* v, std::size_t n, const std::string& path) {
    is.read(reinterpret_cast<char*>(v), static_cast<std::streamsize>(n * 4));
    if (!is) throw format_error(path + ": truncated file");
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    return os;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    return is;
}

void expect_magic(std::istream& is, const char* magic, const std::string& path) {
    char got[4];
    is.read(got, 4);
    if (!is || std::memcmp(got, magic, 4) != 0)
        throw format_error(path + ": bad magic, expected " + magic);
}

}  // namespace

// ---------------------------------------------------------------------------
// latents

void save_latents(const std::string& path, const std::vector<LatentGrid>& grids) {
    if (grids.empty()) throw contract_error("save_latents: no grids");
    for (const LatentGrid& g : grids) require_same_shape(g, grids[0], "save_latents");
    std::ofstream os = open_out(path);
    os.write("ANCH", 4);
    write_u32(os, k_latent_version);
    write_u32(os, static_cast<std::uint32_t>(grids.size()));
    write_u32(os, static_cast<std::uint32_t>(grids[0].channels));
    write_u32(os, static_cast<std::uint32_t>(grids[0].height));
    write_u32(os, static_cast<std::uint32_t>(grids[0].width));
    std::vector<float> buf;
    for (const LatentGrid& g : grids) {
        buf.resize(g.data.size());
        for (std::size_t i = 0; i < g.data.size(); ++i) buf[i] = static_cast<float>(g.data[i]);
        write_f32(os, buf.data(), buf.size());
    }
    if (!os) throw io_error("write failed: " + path);
}

std::vector<LatentGrid> load_latents(const std::string& path) {
    std::ifstream is = open_in(path);
    expect_magic(is, "ANCH", path);
    std::uint32_t version = read_u32(is, path);
    if (version != k_latent_version)
        throw format_error(path + ": unsupported version " + std::to_string(version));
    std::uint32_t n = read_u32(is, path);
    std::uint32_t c = read_u32(is, path);
    std::uint32_t h = read_u32(is, path);
    std::uint32_t w = read_u32(is, path);
    if (n == 0 || c == 0 || h == 0 || w == 0 || c > 4096 || h > 65536 || w > 65536)
        throw format_error(path + ": implausible dimensions");
    std::vector<LatentGrid> grids;
    grids.reserve(n);
    std::vector<float> buf(static_cast<std::size_t>(c) * h * w);
    for (std::uint32_t i = 0; i < n; ++i) {
        read_f32(is, buf.data(), buf.size(), path);
        LatentGrid g(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
        for (std::size_t p = 0; p < buf.size(); ++p) g.data[p] = static_cast<double>(buf[p]);
        grids.push_back(std::move(g));
    }
    return grids;
}

// ---------------------------------------------------------------------------
// weights

void save_tensor_file(const std::string& path, const TensorFile& tf) {
    std::ofstream os = open_out(path);
    os.write("ASWT", 4);
    write_u32(os, k_weight_version);
    write_u32(os, tf.seed);
    write_u32(os, static_cast<std::uint32_t>(tf.tensors.size()));
    for (const TensorFile::Entry& e : tf.tensors) {
        std::size_t expect = 1;
        for (std::uint32_t d : e.dims) expect *= d;
        if (e.dims.empty() || expect != e.data.size())
            throw contract_error("save_tensor_file: dims do not match payload");
        write_u32(os, static_cast<std::uint32_t>(e.dims.size()));
        for (std::uint32_t d : e.dims) write_u32(os, d);
        write_f32(os, e.data.data(), e.data.size());
    }
    if (!os) throw io_error("write failed: " + path);
}

TensorFile load_tensor_file(const std::string& path) {
    std::ifstream is = open_in(path);
    expect_magic(is, "ASWT", path);
    std::uint32_t version = read_u32(is, path);
    if (version != k_weight_version)
        throw format_error(path + ": unsupported version " + std::to_string(version));
    TensorFile tf;
    tf.seed = read_u32(is, path);
    std::uint32_t n = read_u32(is, path);
    if (n > 4096) throw format_error(path + ": implausible tensor count");
    tf.tensors.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        std::uint32_t ndims = read_u32(is, path);
        if (ndims == 0 || ndims > 8) throw format_error(path + ": bad tensor rank");
        TensorFile::Entry& e = tf.tensors[i];
        e.dims.resize(ndims);
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < ndims; ++d) {
            e.dims[d] = read_u32(is, path);
            if (e.dims[d] == 0 || e.dims[d] > (1u << 24))
                throw format_error(path + ": bad tensor dim");
            total *= e.dims[d];
        }
        if (total > (1u << 28)) throw format_error(path + ": tensor too large");
        e.data.resize(total);
        read_f32(is, e.data.data(), total, path);
    }
    return tf;
}

// ---------------------------------------------------------------------------
// embeddings

void save_embeddings(const std::string& path, const std::vector<std::vector<float>>& vecs) {
    if (vecs.empty()) throw contract_error("save_embeddings: no vectors");
    std::size_t dim = vecs[0].size();
    for (const auto& v : vecs)
        if (v.size() != dim) throw contract_error("save_embeddings: ragged vectors");
    std::ofstream os = open_out(path);
    os.write("ASEM", 4);
    write_u32(os, static_cast<std::uint32_t>(vecs.size()));
    write_u32(os, static_cast<std::uint32_t>(dim));
    for (const auto& v : vecs) write_f32(os, v.data(), v.size());
    if (!os) throw io_error("write failed: " + path);
}

std::vector<std::vector<float>> load_embeddings(const std::string& path) {
    std::ifstream is = open_in(path);
    expect_magic(is, "ASEM", path);
    std::uint32_t n = read_u32(is, path);
    std::uint32_t dim = read_u32(is, path);
    if (n == 0 || dim == 0 || dim > (1u << 20))
        throw format_error(path + ": implausible embedding header");
    std::vector<std::vector<float>> vecs(n, std::vector<float>(dim));
    for (auto& v : vecs) read_f32(is, v.data(), dim, path);
    return vecs;
}

// ---------------------------------------------------------------------------
// ppm frames

void write_ppm(const std::string& path, const RgbImage& img) {
    if (img.width <= 0 || img.height <= 0) throw contract_error("write_ppm: empty image");
    std::ofstream os = open_out(path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.data.data()),
             static_cast<std::streamsize>(img.data.size()));
    if (!os) throw io_error("write failed: " + path);
}

namespace {

// Reads one whitespace-delimited token, skipping '#' comments, as PPM allows.
std::string ppm_token(std::istream& is, const std::string& path) {
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
        if (ch == '#') {
            while ((ch = is.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw format_error(path + ": truncated header");
    return tok;
}

int ppm_int(std::istream& is, const std::string& path) {
    std::string tok = ppm_token(is, path);
    try {
        std::size_t used = 0;
        int v = std::stoi(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw format_error(path + ": bad header token '" + tok + "'");
    }
}

}  // namespace

RgbImage read_ppm(const std::string& path) {
    std::ifstream is = open_in(path);
    std::string magic = ppm_token(is, path);
    if (magic != "P6") throw format_error(path + ": not a binary P6 ppm");
    int w = ppm_int(is, path);
    int h = ppm_int(is, path);
    int maxval = ppm_int(is, path);
    if (w <= 0 || h <= 0 || w > 65536 || h > 65536)
        throw format_error(path + ": bad dimensions");
    if (maxval != 255) throw format_error(path + ": only 8-bit (maxval 255) supported");
    // single whitespace byte separates header from payload; token reader
    // already consumed it
    RgbImage img(w, h);
    is.read(reinterpret_cast<char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
    if (!is) throw format_error(path + ": truncated pixel data");
    return img;
}

std::string frame_filename(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06d.ppm", index);
    return buf;
}

FrameSequence FrameSequence::open(const std::string& dir) {
    std::string manifest = dir + "/manifest.txt";
    ConfigMap cfg = parse_config_file(manifest);
    reject_unknown_keys(cfg, {"count", "width", "height", "format"});
    FrameSequence seq;
    seq.dir = dir;
    seq.count = config_get_int(cfg, "count", -1);
    seq.width = config_get_int(cfg, "width", -1);
    seq.height = config_get_int(cfg, "height", -1);
    std::string format = config_get_string(cfg, "format", "");
    if (seq.count <= 0 || seq.width <= 0 || seq.height <= 0)
        throw format_error(manifest + ": count/width/height must be positive");
    if (format != "ppm") throw format_error(manifest + ": unsupported format '" + format + "'");
    for (int i = 0; i < seq.count; ++i) {
        std::string p = dir + "/" + frame_filename(i);
        if (!std::filesystem::exists(p))
            throw format_error(dir + ": missing frame " + frame_filename(i) +
                               " (gaps are not allowed)");
    }
    return seq;
}

RgbImage FrameSequence::frame(int index) const {
    if (index < 0 || index >= count)
        throw contract_error("frame index " + std::to_string(index) + " out of range");
    RgbImage img = read_ppm(dir + "/" + frame_filename(index));
    if (img.width != width || img.height != height)
        throw format_error(dir + "/" + frame_filename(index) + ": frame size " +
                           std::to_string(img.width) + "x" + std::to_string(img.height) +
                           " does not match manifest " + std::to_string(width) + "x" +
                           std::to_string(height));
    return img;
}

FrameSequenceWriter::FrameSequenceWriter(const std::string& d, int w, int h)
    : dir(d), width(w), height(h) {
    if (w <= 0 || h <= 0) throw contract_error("FrameSequenceWriter: bad dimensions");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io_error("cannot create directory: " + dir);
}

void FrameSequenceWriter::append(const RgbImage& img) {
    if (img.width != width || img.height != height)
        throw contract_error("FrameSequenceWriter: frame size mismatch");
    write_ppm(dir + "/" + frame_filename(written), img);
    ++written;
}

void FrameSequenceWriter::finalize() {
    ConfigMap cfg;
    cfg["count"] = std::to_string(written);
    cfg["width"] = std::to_string(width);
    cfg["height"] = std::to_string(height);
    cfg["format"] = "ppm";
    write_config_echo(dir + "/manifest.txt", cfg);
}

// ---------------------------------------------------------------------------
// config

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::size_t b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        std::size_t e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        std::size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0)
            throw config_error("config line " + std::to_string(lineno) +
                               ": expected key=value, got '" + line + "'");
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        auto trim = [](std::string s) {
            std::size_t b2 = s.find_first_not_of(" \t");
            if (b2 == std::string::npos) return std::string();
            std::size_t e2 = s.find_last_not_of(" \t");
            return s.substr(b2, e2 - b2 + 1);
        };
        key = trim(key);
        val = trim(val);
        if (key.empty())
            throw config_error("config line " + std::to_string(lineno) + ": empty key");
        if (cfg.count(key))
            throw config_error("config: duplicate key '" + key + "'");
        cfg[key] = val;
    }
    return cfg;
}

ConfigMap parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    try {
        return parse_config_text(ss.str());
    } catch (const config_error& e) {
        throw config_error(path + ": " + e.what());
    }
}

void reject_unknown_keys(const ConfigMap& cfg, const std::set<std::string>& allowed) {
    for (const auto& kv : cfg)
        if (!allowed.count(kv.first))
            throw config_error("unknown config key '" + kv.first + "'");
}

void write_config_echo(const std::string& path, const ConfigMap& cfg) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot open for writing: " + path);
    for (const auto& kv : cfg) os << kv.first << "=" << kv.second << "\n";
    if (!os) throw io_error("write failed: " + path);
}

double config_get_double(const ConfigMap& cfg, const std::string& key, double fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    try {
        std::size_t used = 0;
        double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(it->second);
        return v;
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "': expected a number, got '" + it->second +
                           "'");
    }
}

int config_get_int(const ConfigMap& cfg, const std::string& key, int fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    try {
        std::size_t used = 0;
        long v = std::stol(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(it->second);
        return static_cast<int>(v);
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "': expected an integer, got '" + it->second +
                           "'");
    }
}

std::string config_get_string(const ConfigMap& cfg, const std::string& key,
                              const std::string& fallback) {
    auto it = cfg.find(key);
    return it == cfg.end() ? fallback : it->second;
}

}  // namespace anchorkit
