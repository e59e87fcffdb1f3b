#include "anchorkit/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "anchorkit/io.hpp"
#include "anchorkit/nn_ops.hpp"

namespace anchorkit {

// ---------------------------------------------------------------------------
// analytic mixture denoiser

void GaussianMixture::validate() const {
    if (components.empty()) throw contract_error("mixture: no components");
    double wsum = 0.0;
    for (std::size_t k = 0; k < components.size(); ++k) {
        const MixtureComponent& c = components[k];
        if (!(c.weight > 0.0))
            throw contract_error("mixture: component " + std::to_string(k) +
                                 " weight must be positive");
        if (!(c.variance > 0.0))
            throw contract_error("mixture: component " + std::to_string(k) +
                                 " variance must be positive");
        require_same_shape(c.mean, components[0].mean, "mixture means");
        wsum += c.weight;
    }
    if (std::fabs(wsum - 1.0) > 1e-12)
        throw contract_error("mixture: weights sum to " + std::to_string(wsum) + ", expected 1");
}

GaussianMixture make_default_mixture(int channels, int height, int width) {
    GaussianMixture m;
    const double levels[3] = {0.2, 0.5, 0.8};
    const double weights[3] = {0.3, 0.4, 0.3};
    for (int i = 0; i < 3; ++i) {
        MixtureComponent c;
        c.weight = weights[i];
        c.variance = 4.0;  // broad prior: near-linear posterior on [0,1] frames
        c.mean = LatentGrid(channels, height, width, levels[i]);
        m.components.push_back(std::move(c));
    }
    m.validate();
    return m;
}

namespace {

double text_offset(const Condition& cond) {
    if (!cond.text || cond.text->empty()) return 0.0;
    return pairwise_mean(*cond.text);
}

std::vector<int> active_components(const GaussianMixture& mix, const Condition& cond) {
    if (!cond.structural_mask) {
        std::vector<int> all(mix.components.size());
        for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
        return all;
    }
    const std::vector<int>& mask = *cond.structural_mask;
    if (mask.empty()) throw contract_error("structural mask selects no components");
    for (int k : mask)
        if (k < 0 || k >= static_cast<int>(mix.components.size()))
            throw contract_error("structural mask index " + std::to_string(k) + " out of range");
    return mask;
}

struct PosteriorEval {
    std::vector<int> active;
    std::vector<double> gamma;    // responsibilities over `active`
    std::vector<double> var_eff;  // abar*var + (1-abar), per active component
    double abar = 0.0;
    double offset = 0.0;
};

PosteriorEval eval_posterior(const LatentGrid& x_t, int t, const NoiseSchedule& schedule,
                             const GaussianMixture& mixture, const Condition& cond) {
    mixture.validate();
    if (t < 0 || t >= schedule.num_steps)
        throw contract_error("analytic_eps: timestep " + std::to_string(t) + " out of range");
    require_same_shape(x_t, mixture.components[0].mean, "analytic_eps");

    PosteriorEval pe;
    pe.abar = schedule.alpha_bars[static_cast<std::size_t>(t)];
    if (!(pe.abar < 1.0))
        throw contract_error("analytic_eps: alpha_bar must be < 1 at the evaluated step");
    pe.offset = text_offset(cond);
    pe.active = active_components(mixture, cond);

    double sqrt_abar = std::sqrt(pe.abar);
    double one_minus = 1.0 - pe.abar;
    std::size_t n = x_t.data.size();
    double dims = static_cast<double>(n);

    std::vector<double> logw(pe.active.size());
    pe.var_eff.resize(pe.active.size());
    for (std::size_t a = 0; a < pe.active.size(); ++a) {
        const MixtureComponent& c = mixture.components[static_cast<std::size_t>(pe.active[a])];
        double veff = pe.abar * c.variance + one_minus;
        pe.var_eff[a] = veff;
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = x_t.data[i] - sqrt_abar * (c.mean.data[i] + pe.offset);
            ss += d * d;
        }
        logw[a] = std::log(c.weight) - 0.5 * dims * std::log(2.0 * M_PI * veff) -
                  ss / (2.0 * veff);
    }

    double mx = *std::max_element(logw.begin(), logw.end());
    double denom = 0.0;
    for (double lw : logw) denom += std::exp(lw - mx);
    pe.gamma.resize(pe.active.size());
    for (std::size_t a = 0; a < pe.active.size(); ++a)
        pe.gamma[a] = std::exp(logw[a] - mx) / denom;
    return pe;
}

}  // namespace

std::vector<double> mixture_responsibilities(const LatentGrid& x_t, int t,
                                             const NoiseSchedule& schedule,
                                             const GaussianMixture& mixture,
                                             const Condition& cond) {
    PosteriorEval pe = eval_posterior(x_t, t, schedule, mixture, cond);
    std::vector<double> out(mixture.components.size(), 0.0);
    for (std::size_t a = 0; a < pe.active.size(); ++a)
        out[static_cast<std::size_t>(pe.active[a])] = pe.gamma[a];
    return out;
}

namespace {

// eps for one frame given externally fixed responsibilities.
LatentGrid eps_from_gamma(const LatentGrid& x, const GaussianMixture& mixture,
                          const PosteriorEval& pe) {
    double sqrt_abar = std::sqrt(pe.abar);
    double one_minus = 1.0 - pe.abar;
    LatentGrid ex0(x.channels, x.height, x.width);
    for (std::size_t a = 0; a < pe.active.size(); ++a) {
        const MixtureComponent& c = mixture.components[static_cast<std::size_t>(pe.active[a])];
        double inv = 1.0 / pe.var_eff[a];
        double cx = pe.gamma[a] * sqrt_abar * c.variance * inv;
        double cm = pe.gamma[a] * one_minus * inv;
        for (std::size_t i = 0; i < x.data.size(); ++i)
            ex0.data[i] += cx * x.data[i] + cm * (c.mean.data[i] + pe.offset);
    }
    double inv_sqrt = 1.0 / std::sqrt(one_minus);
    LatentGrid eps(x.channels, x.height, x.width);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        eps.data[i] = (x.data[i] - sqrt_abar * ex0.data[i]) * inv_sqrt;
    return eps;
}

}  // namespace

void analytic_pair_eps(const LatentGrid& a, const LatentGrid& b, int t,
                       const NoiseSchedule& schedule, const GaussianMixture& mixture,
                       const Condition& cond, LatentGrid& eps_a, LatentGrid& eps_b) {
    mixture.validate();
    require_same_shape(a, b, "analytic_pair_eps");
    if (t < 0 || t >= schedule.num_steps)
        throw contract_error("analytic_pair_eps: timestep " + std::to_string(t) + " out of range");
    require_same_shape(a, mixture.components[0].mean, "analytic_pair_eps");

    PosteriorEval pe;
    pe.abar = schedule.alpha_bars[static_cast<std::size_t>(t)];
    if (!(pe.abar < 1.0))
        throw contract_error("analytic_pair_eps: alpha_bar must be < 1 at the evaluated step");
    pe.offset = text_offset(cond);
    pe.active = active_components(mixture, cond);

    double sqrt_abar = std::sqrt(pe.abar);
    double one_minus = 1.0 - pe.abar;
    std::size_t n = a.data.size();
    double dims = 2.0 * static_cast<double>(n);

    auto frame_ss = [&](const LatentGrid& x, const MixtureComponent& c) {
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = x.data[i] - sqrt_abar * (c.mean.data[i] + pe.offset);
            ss += d * d;
        }
        return ss;
    };

    std::vector<double> logw(pe.active.size());
    pe.var_eff.resize(pe.active.size());
    for (std::size_t k = 0; k < pe.active.size(); ++k) {
        const MixtureComponent& c = mixture.components[static_cast<std::size_t>(pe.active[k])];
        double veff = pe.abar * c.variance + one_minus;
        pe.var_eff[k] = veff;
        // the two frame sums are combined with one commutative add, so the
        // responsibilities are bit-identical under a swapped pair
        double ss = frame_ss(a, c) + frame_ss(b, c);
        logw[k] = std::log(c.weight) - 0.5 * dims * std::log(2.0 * M_PI * veff) -
                  ss / (2.0 * veff);
    }
    double mx = *std::max_element(logw.begin(), logw.end());
    double denom = 0.0;
    for (double lw : logw) denom += std::exp(lw - mx);
    pe.gamma.resize(pe.active.size());
    for (std::size_t k = 0; k < pe.active.size(); ++k)
        pe.gamma[k] = std::exp(logw[k] - mx) / denom;

    eps_a = eps_from_gamma(a, mixture, pe);
    eps_b = eps_from_gamma(b, mixture, pe);
}

LatentGrid analytic_eps(const LatentGrid& x_t, int t, const NoiseSchedule& schedule,
                        const GaussianMixture& mixture, const Condition& cond) {
    PosteriorEval pe = eval_posterior(x_t, t, schedule, mixture, cond);
    double sqrt_abar = std::sqrt(pe.abar);
    double one_minus = 1.0 - pe.abar;

    // E[x0 | x_t] = sum_k gamma_k m_k with
    // m_k = (sqrt(abar) var_k x_t + (1-abar) mu_k) / (abar var_k + 1-abar)
    LatentGrid ex0(x_t.channels, x_t.height, x_t.width);
    for (std::size_t a = 0; a < pe.active.size(); ++a) {
        const MixtureComponent& c = mixture.components[static_cast<std::size_t>(pe.active[a])];
        double inv = 1.0 / pe.var_eff[a];
        double cx = pe.gamma[a] * sqrt_abar * c.variance * inv;
        double cm = pe.gamma[a] * one_minus * inv;
        for (std::size_t i = 0; i < x_t.data.size(); ++i)
            ex0.data[i] += cx * x_t.data[i] + cm * (c.mean.data[i] + pe.offset);
    }

    double inv_sqrt = 1.0 / std::sqrt(one_minus);
    LatentGrid eps(x_t.channels, x_t.height, x_t.width);
    for (std::size_t i = 0; i < x_t.data.size(); ++i)
        eps.data[i] = (x_t.data[i] - sqrt_abar * ex0.data[i]) * inv_sqrt;
    return eps;
}

// ---------------------------------------------------------------------------
// attention

Matrix scaled_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    if (q.cols != k.cols) throw contract_error("attention: q/k dim mismatch");
    if (k.rows != v.rows) throw contract_error("attention: k/v token count mismatch");
    double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));
    Matrix out(q.rows, v.cols);
    std::vector<double> logits(static_cast<std::size_t>(k.rows));
    for (int i = 0; i < q.rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k.rows; ++j) {
            double dot = 0.0;
            for (int d = 0; d < q.cols; ++d) dot += q.at(i, d) * k.at(j, d);
            logits[static_cast<std::size_t>(j)] = dot * scale;
            mx = std::max(mx, dot * scale);
        }
        double denom = 0.0;
        for (int j = 0; j < k.rows; ++j) {
            double e = std::exp(logits[static_cast<std::size_t>(j)] - mx);
            logits[static_cast<std::size_t>(j)] = e;
            denom += e;
        }
        double inv = 1.0 / denom;
        for (int j = 0; j < k.rows; ++j) {
            double a = logits[static_cast<std::size_t>(j)] * inv;
            for (int d = 0; d < v.cols; ++d) out.at(i, d) += a * v.at(j, d);
        }
    }
    return out;
}

std::pair<Matrix, Matrix> bidir_attention(const Matrix& z_i, const Matrix& z_j,
                                          const AttentionWeights& w) {
    if (z_i.cols != w.dim || z_j.cols != w.dim)
        throw contract_error("bidir_attention: token dim does not match weights");
    Matrix qi = matmul(z_i, w.w_q), ki = matmul(z_i, w.w_k), vi = matmul(z_i, w.w_v);
    Matrix qj = matmul(z_j, w.w_q), kj = matmul(z_j, w.w_k), vj = matmul(z_j, w.w_v);
    Matrix out_i = scaled_attention(qi, ki, vi);
    Matrix out_j = scaled_attention(qj, kj, vj);
    Matrix cross_i = scaled_attention(qi, kj, vj);
    Matrix cross_j = scaled_attention(qj, ki, vi);
    for (std::size_t p = 0; p < out_i.data.size(); ++p) out_i.data[p] += cross_i.data[p];
    for (std::size_t p = 0; p < out_j.data.size(); ++p) out_j.data[p] += cross_j.data[p];
    return {std::move(out_i), std::move(out_j)};
}

// ---------------------------------------------------------------------------
// pair network

namespace {

// Uniform in (-scale, scale), truncated to binary32.
double init_value(Rng& rng, double scale) {
    return static_cast<double>(static_cast<float>(rng.uniform(-scale, scale)));
}

std::vector<double> init_vec(Rng& rng, std::size_t n, double scale) {
    std::vector<double> v(n);
    for (double& x : v) x = init_value(rng, scale);
    return v;
}

Matrix init_mat(Rng& rng, int rows, int cols, double scale) {
    Matrix m(rows, cols);
    for (double& x : m.data) x = init_value(rng, scale);
    return m;
}

}  // namespace

PairNetWeights make_pairnet_weights(const PairNetConfig& cfg, std::uint32_t seed) {
    if (cfg.in_channels <= 0 || cfg.hidden <= 0 || cfg.text_dim <= 0 || cfg.token_grid <= 0)
        throw contract_error("pairnet config dims must be positive");
    PairNetWeights w;
    w.cfg = cfg;
    w.seed = seed;
    Rng rng(derive_seed(seed, 0xA11C));
    int c = cfg.in_channels, h = cfg.hidden;
    w.conv1_w = init_vec(rng, static_cast<std::size_t>(h) * c * 9, 1.0 / std::sqrt(9.0 * c));
    w.conv1_b = init_vec(rng, static_cast<std::size_t>(h), 0.1);
    w.text_proj = init_mat(rng, h, cfg.text_dim, 1.0 / std::sqrt(double(cfg.text_dim)));
    w.attn.dim = h;
    double as = 1.0 / std::sqrt(double(h));
    w.attn.w_q = init_mat(rng, h, h, as);
    w.attn.w_k = init_mat(rng, h, h, as);
    w.attn.w_v = init_mat(rng, h, h, as);
    w.attn.w_out = init_mat(rng, h, h, as);
    w.conv2_w = init_vec(rng, static_cast<std::size_t>(h) * h, as);
    w.conv2_b = init_vec(rng, static_cast<std::size_t>(h), 0.1);
    w.head_w = init_vec(rng, static_cast<std::size_t>(c) * h, as);
    w.head_b = init_vec(rng, static_cast<std::size_t>(c), 0.1);
    return w;
}

void save_pairnet_weights(const std::string& path, const PairNetWeights& w) {
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
    const PairNetConfig& c = w.cfg;
    push({4}, {double(c.in_channels), double(c.hidden), double(c.text_dim), double(c.token_grid)});
    push({u32(c.hidden), u32(c.in_channels), 3, 3}, w.conv1_w);
    push({u32(c.hidden)}, w.conv1_b);
    push({u32(c.hidden), u32(c.text_dim)}, w.text_proj.data);
    push({u32(c.hidden), u32(c.hidden)}, w.attn.w_q.data);
    push({u32(c.hidden), u32(c.hidden)}, w.attn.w_k.data);
    push({u32(c.hidden), u32(c.hidden)}, w.attn.w_v.data);
    push({u32(c.hidden), u32(c.hidden)}, w.attn.w_out.data);
    push({u32(c.hidden), u32(c.hidden)}, w.conv2_w);
    push({u32(c.hidden)}, w.conv2_b);
    push({u32(c.in_channels), u32(c.hidden)}, w.head_w);
    push({u32(c.in_channels)}, w.head_b);
    save_tensor_file(path, tf);
}

PairNetWeights load_pairnet_weights(const std::string& path) {
    TensorFile tf = load_tensor_file(path);
    if (tf.tensors.size() != 12) throw format_error(path + ": expected 12 tensors");
    const std::vector<float>& meta = tf.tensors[0].data;
    if (meta.size() != 4) throw format_error(path + ": bad config tensor");
    PairNetConfig cfg;
    cfg.in_channels = static_cast<int>(meta[0]);
    cfg.hidden = static_cast<int>(meta[1]);
    cfg.text_dim = static_cast<int>(meta[2]);
    cfg.token_grid = static_cast<int>(meta[3]);

    PairNetWeights w;
    w.cfg = cfg;
    w.seed = tf.seed;
    auto as_vec = [&](int idx, std::size_t expect) {
        const std::vector<float>& src = tf.tensors[static_cast<std::size_t>(idx)].data;
        if (src.size() != expect) throw format_error(path + ": tensor size mismatch");
        std::vector<double> v(src.size());
        for (std::size_t i = 0; i < src.size(); ++i) v[i] = static_cast<double>(src[i]);
        return v;
    };
    auto as_mat = [&](int idx, int rows, int cols) {
        Matrix m(rows, cols);
        m.data = as_vec(idx, static_cast<std::size_t>(rows) * cols);
        return m;
    };
    int c = cfg.in_channels, h = cfg.hidden;
    w.conv1_w = as_vec(1, static_cast<std::size_t>(h) * c * 9);
    w.conv1_b = as_vec(2, static_cast<std::size_t>(h));
    w.text_proj = as_mat(3, h, cfg.text_dim);
    w.attn.dim = h;
    w.attn.w_q = as_mat(4, h, h);
    w.attn.w_k = as_mat(5, h, h);
    w.attn.w_v = as_mat(6, h, h);
    w.attn.w_out = as_mat(7, h, h);
    w.conv2_w = as_vec(8, static_cast<std::size_t>(h) * h);
    w.conv2_b = as_vec(9, static_cast<std::size_t>(h));
    w.head_w = as_vec(10, static_cast<std::size_t>(c) * h);
    w.head_b = as_vec(11, static_cast<std::size_t>(c));
    return w;
}

namespace {

std::string tap_name(const TapKey& key) {
    return "(layer " + std::to_string(key.layer) + ", timestep " + std::to_string(key.timestep) +
           ")";
}

TapRecord require_tap(const TapIO& io, const TapKey& key) {
    TapRecord rec;
    if (!io.store->get(key, rec))
        throw contract_error("missing injected features for tap " + tap_name(key));
    return rec;
}

}  // namespace

std::pair<LatentGrid, LatentGrid> pairnet_eps(const LatentGrid& a, const LatentGrid& b, int t,
                                              const NoiseSchedule& schedule, const Condition& cond,
                                              const PairNetWeights& w, const TapIO* taps,
                                              const Matrix* control_a, const Matrix* control_b) {
    require_same_shape(a, b, "pairnet_eps");
    if (t < 0 || t >= schedule.num_steps)
        throw contract_error("pairnet_eps: timestep " + std::to_string(t) + " out of range");
    const PairNetConfig& cfg = w.cfg;
    if (a.channels != cfg.in_channels)
        throw contract_error("pairnet_eps: input channels do not match weights");
    if (taps && !taps->store) throw contract_error("pairnet_eps: tap io without store");
    if (cond.text && static_cast<int>(cond.text->size()) != cfg.text_dim)
        throw contract_error("pairnet_eps: text dim does not match weights");

    // timestep scalar folded in as a bias, so eps depends on t
    double tval = (schedule.num_steps > 1)
                      ? static_cast<double>(t) / static_cast<double>(schedule.num_steps - 1)
                      : 0.0;

    std::vector<double> text_bias(static_cast<std::size_t>(cfg.hidden), 0.0);
    if (cond.text)
        for (int r = 0; r < cfg.hidden; ++r) {
            double acc = 0.0;
            for (int cc = 0; cc < cfg.text_dim; ++cc)
                acc += w.text_proj.at(r, cc) * (*cond.text)[static_cast<std::size_t>(cc)];
            text_bias[static_cast<std::size_t>(r)] = acc;
        }

    // frame a gets structural_map; frame b gets structural_map_b when present,
    // else the shared map
    auto stem = [&](const LatentGrid& x, bool is_b) {
        LatentGrid in = x;
        const std::optional<LatentGrid>& map =
            (is_b && cond.structural_map_b) ? cond.structural_map_b : cond.structural_map;
        if (map) {
            require_same_shape(in, *map, "pairnet structural map");
            in += *map;
        }
        LatentGrid u = conv3x3(in, w.conv1_w, w.conv1_b, cfg.hidden, 2);
        int hw = u.height * u.width;
        for (int ch = 0; ch < cfg.hidden; ++ch) {
            double bias = text_bias[static_cast<std::size_t>(ch)] + tval;
            double* d = &u.data[static_cast<std::size_t>(ch) * hw];
            for (int p = 0; p < hw; ++p) d[p] += bias;
        }
        tanh_inplace(u);
        return u;
    };

    LatentGrid ua = stem(a, false);
    LatentGrid ub = stem(b, true);

    bool inject = taps && taps->mode == TapIO::Mode::inject;
    bool capture = taps && taps->mode == TapIO::Mode::capture;
    auto key = [&](int layer, TapKind kind) {
        TapKey k;
        k.pair = taps->pair_index;
        k.timestep = t;
        k.layer = layer;
        k.kind = kind;
        return k;
    };

    if (capture) {
        TapRecord rec;
        rec.grids = {ua, ub};
        taps->store->put(key(0, TapKind::conv_activation), std::move(rec));
    } else if (inject && taps->conv_active) {
        TapRecord rec = require_tap(*taps, key(0, TapKind::conv_activation));
        if (rec.grids.size() != 2) throw contract_error("injected conv record malformed");
        require_same_shape(rec.grids[0], ua, "injected conv features");
        ua = std::move(rec.grids[0]);
        ub = std::move(rec.grids[1]);
    }

    int th = std::min(cfg.token_grid, ua.height);
    int tw = std::min(cfg.token_grid, ua.width);
    Matrix za = pool_tokens(ua, th, tw);
    Matrix zb = pool_tokens(ub, th, tw);

    Matrix qa = matmul(za, w.attn.w_q), ka = matmul(za, w.attn.w_k), va = matmul(za, w.attn.w_v);
    Matrix qb = matmul(zb, w.attn.w_q), kb = matmul(zb, w.attn.w_k), vb = matmul(zb, w.attn.w_v);

    if (capture) {
        TapRecord rec;
        rec.mats = {ka, va, kb, vb};
        taps->store->put(key(1, TapKind::attention_kv), std::move(rec));
    } else if (inject && taps->attention_active) {
        TapRecord rec = require_tap(*taps, key(1, TapKind::attention_kv));
        if (rec.mats.size() != 4 || rec.mats[0].rows != ka.rows || rec.mats[0].cols != ka.cols)
            throw contract_error("injected attention features have wrong shape");
        ka = std::move(rec.mats[0]);
        va = std::move(rec.mats[1]);
        kb = std::move(rec.mats[2]);
        vb = std::move(rec.mats[3]);
    }

    Matrix aa = scaled_attention(qa, ka, va);
    Matrix ca = scaled_attention(qa, kb, vb);
    Matrix ab = scaled_attention(qb, kb, vb);
    Matrix cb = scaled_attention(qb, ka, va);
    for (std::size_t p = 0; p < aa.data.size(); ++p) aa.data[p] += ca.data[p];
    for (std::size_t p = 0; p < ab.data.size(); ++p) ab.data[p] += cb.data[p];
    Matrix oa = matmul(aa, w.attn.w_out);
    Matrix ob = matmul(ab, w.attn.w_out);

    auto add_control = [&](Matrix& m, const Matrix* ctrl, const char* side) {
        if (!ctrl) return;
        if (ctrl->rows != m.rows || ctrl->cols != m.cols)
            throw contract_error(std::string("control residual shape mismatch on frame ") + side);
        for (std::size_t p = 0; p < m.data.size(); ++p) m.data[p] += ctrl->data[p];
    };
    add_control(oa, control_a, "a");
    add_control(ob, control_b, "b");

    auto finish = [&](LatentGrid& u, const Matrix& tok) {
        add_tokens_upsampled(u, tok, th, tw);
        LatentGrid v = conv1x1(u, w.conv2_w, w.conv2_b, cfg.hidden);
        tanh_inplace(v);
        return v;
    };

    LatentGrid va2 = finish(ua, oa);
    LatentGrid vb2 = finish(ub, ob);
    if (capture) {
        TapRecord rec;
        rec.grids = {va2, vb2};
        taps->store->put(key(2, TapKind::conv_activation), std::move(rec));
    } else if (inject && taps->conv_active) {
        TapRecord rec = require_tap(*taps, key(2, TapKind::conv_activation));
        if (rec.grids.size() != 2) throw contract_error("injected conv record malformed");
        require_same_shape(rec.grids[0], va2, "injected conv features");
        va2 = std::move(rec.grids[0]);
        vb2 = std::move(rec.grids[1]);
    }

    auto head = [&](const LatentGrid& v, const LatentGrid& x) {
        LatentGrid y = conv1x1(v, w.head_w, w.head_b, cfg.in_channels);
        return upsample_nearest(y, x.height, x.width);
    };
    return {head(va2, a), head(vb2, b)};
}

// ---------------------------------------------------------------------------
// guidance

namespace {

// out = sum of coeff[i]*term[i] skipping zero coefficients; the first kept
// term initialises out by scaling, so a lone coefficient of 1 is an exact
// copy.
LatentGrid combine_terms(const double* coeff, const LatentGrid* const* term, int n) {
    int first = -1;
    for (int i = 0; i < n; ++i)
        if (coeff[i] != 0.0) {
            first = i;
            break;
        }
    if (first < 0) throw contract_error("guidance: all coefficients are zero");
    LatentGrid out = *term[first];
    out *= coeff[first];
    for (int i = first + 1; i < n; ++i) {
        if (coeff[i] == 0.0) continue;
        axpy(out, coeff[i], *term[i]);
    }
    return out;
}

void guidance_coeffs(const GuidanceConfig& g, double* c) {
    c[0] = 1.0 - g.text_scale;                    // eps(null text, structural)
    c[1] = g.text_scale + g.structural_scale;     // eps(text, structural)
    c[2] = -g.structural_scale;                   // eps(text, null structural)
}

}  // namespace

LatentGrid guided_eps(const LatentGrid& x_t, const Condition& cond, const GuidanceConfig& g,
                      const EpsFn& eps_fn) {
    LatentGrid e_base = eps_fn(x_t, cond.without_text());
    LatentGrid e_full = eps_fn(x_t, cond);
    LatentGrid e_text = eps_fn(x_t, cond.without_structural());
    double c[3];
    guidance_coeffs(g, c);
    const LatentGrid* terms[3] = {&e_base, &e_full, &e_text};
    return combine_terms(c, terms, 3);
}

// ---------------------------------------------------------------------------
// denoiser implementations

void AnalyticPairDenoiser::eps_pair(const LatentGrid& a, const LatentGrid& b, int t,
                                    const Condition& cond, const TapIO* taps,
                                    const Matrix* control_a, const Matrix* control_b,
                                    LatentGrid& eps_a, LatentGrid& eps_b) const {
    if (taps && taps->mode == TapIO::Mode::inject)
        throw unsupported_error("analytic denoiser has no feature taps");
    if (control_a || control_b)
        throw unsupported_error("analytic denoiser takes no control residual");
    analytic_pair_eps(a, b, t, *schedule, mixture, cond, eps_a, eps_b);
}

void PairNetDenoiser::eps_pair(const LatentGrid& a, const LatentGrid& b, int t,
                               const Condition& cond, const TapIO* taps, const Matrix* control_a,
                               const Matrix* control_b, LatentGrid& eps_a,
                               LatentGrid& eps_b) const {
    std::pair<LatentGrid, LatentGrid> e =
        pairnet_eps(a, b, t, *schedule, cond, weights, taps, control_a, control_b);
    eps_a = std::move(e.first);
    eps_b = std::move(e.second);
}

void guided_pair_eps(const LatentGrid& a, const LatentGrid& b, int t, const Condition& cond,
                     const GuidanceConfig& g, const PairDenoiser& den, const TapIO* taps,
                     const Matrix* control_a, const Matrix* control_b, LatentGrid& eps_a,
                     LatentGrid& eps_b, ThreadPool* pool) {
    if (taps && taps->mode == TapIO::Mode::capture)
        throw contract_error("guided_pair_eps: capture through a guided pass is ambiguous");
    Condition variants[3] = {cond.without_text(), cond, cond.without_structural()};
    LatentGrid ea[3], eb[3];
    auto eval = [&](std::size_t i) {
        den.eps_pair(a, b, t, variants[i], taps, control_a, control_b, ea[i], eb[i]);
    };
    if (pool)
        pool->parallel_for(3, eval);
    else
        for (std::size_t i = 0; i < 3; ++i) eval(i);

    double c[3];
    guidance_coeffs(g, c);
    const LatentGrid* ta[3] = {&ea[0], &ea[1], &ea[2]};
    const LatentGrid* tb[3] = {&eb[0], &eb[1], &eb[2]};
    eps_a = combine_terms(c, ta, 3);
    eps_b = combine_terms(c, tb, 3);
}

}  // namespace anchorkit
