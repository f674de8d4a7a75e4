#pragma once

// Symmetric dual-tower denoiser over patch latents: two identical small
// transformer stacks (independent weights), each block running AdaLN'd
// self-attention, cross-attention over condition tokens, an optional
// residual cross-attention over the other tower's same-depth tokens, and an
// AdaLN'd feed-forward. Action conditioning follows the dual-path scheme:
// c = SiLU(t_emb + MLP1(a)) drives per-block timestep coefficients, MLP2(a)
// adds explicit modulation offsets.

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dualflow/checkpoint.hpp"
#include "dualflow/geometry.hpp"
#include "dualflow/optim.hpp"
#include "dualflow/rng.hpp"
#include "dualflow/tensor.hpp"

namespace dualflow::dit {

using geom::ActionVector;

struct TowerDims {
    int frames = 12;      // chunk length
    int frame_size = 32;  // square frames
    int patch = 4;        // invertible patchify, non-overlapping
    int width = 64;
    int heads = 4;
    int blocks = 2;
    int ffn_hidden = 128;
    int t_feats = 32;  // sinusoidal timestep features
    int n_tasks = 1;

    int grid() const { return frame_size / patch; }
    int tokens_per_frame() const { return grid() * grid(); }
    int latent_channels() const { return patch * patch * 3; }
};

// ---------------------------------------------------------------------------
// invertible patch-latent codec (stands in for the pretrained VAEs)

/// Non-overlapping p x p patches flattened to channels with a fixed affine
/// map per plane channel. Exactly invertible.
struct LatentCodec {
    int size = 32;
    int patch = 4;
    std::array<double, 3> shift{0.5, 0.5, 0.5};
    std::array<double, 3> scale{2.0, 2.0, 2.0};

    int grid() const { return size / patch; }
    int channels() const { return patch * patch * 3; }

    /// planes: T frames of H*W*3 data -> latent [T, S, C].
    Tensor encode(const std::vector<const std::vector<double>*>& planes) const {
        const int g = grid(), s = g * g, c = channels();
        const int t_count = static_cast<int>(planes.size());
        std::vector<double> out(static_cast<size_t>(t_count) * s * c);
        for (int t = 0; t < t_count; ++t) {
            const auto& img = *planes[t];
            for (int gy = 0; gy < g; ++gy)
                for (int gx = 0; gx < g; ++gx)
                    for (int py = 0; py < patch; ++py)
                        for (int px = 0; px < patch; ++px)
                            for (int ch = 0; ch < 3; ++ch) {
                                const size_t src =
                                    ((static_cast<size_t>(gy * patch + py) * size) + gx * patch + px) * 3 + ch;
                                const size_t dst = ((static_cast<size_t>(t) * s + gy * g + gx) * c) +
                                                   (py * patch + px) * 3 + ch;
                                out[dst] = (img[src] - shift[ch]) * scale[ch];
                            }
        }
        return Tensor::from_data({t_count, s, c}, std::move(out));
    }

    /// latent [T, S, C] -> T planes of H*W*3 data.
    std::vector<std::vector<double>> decode(const Tensor& latent) const {
        const int g = grid(), s = g * g, c = channels();
        const Shape& sh = latent.shape();
        if (sh.size() != 3 || sh[1] != s || sh[2] != c)
            tensor_fail("codec decode: latent shape " + shape_str(sh) + " does not match grid");
        const int t_count = sh[0];
        std::vector<std::vector<double>> planes(t_count,
                                                std::vector<double>(static_cast<size_t>(size) * size * 3));
        const auto& d = latent.data();
        for (int t = 0; t < t_count; ++t)
            for (int gy = 0; gy < g; ++gy)
                for (int gx = 0; gx < g; ++gx)
                    for (int py = 0; py < patch; ++py)
                        for (int px = 0; px < patch; ++px)
                            for (int ch = 0; ch < 3; ++ch) {
                                const size_t dst =
                                    ((static_cast<size_t>(gy * patch + py) * size) + gx * patch + px) * 3 + ch;
                                const size_t src = ((static_cast<size_t>(t) * s + gy * g + gx) * c) +
                                                   (py * patch + px) * 3 + ch;
                                planes[t][dst] = d[src] / scale[ch] + shift[ch];
                            }
        return planes;
    }
};

inline LatentCodec rgb_codec(const TowerDims& dims) {
    LatentCodec c;
    c.size = dims.frame_size;
    c.patch = dims.patch;
    c.shift = {0.5, 0.5, 0.5};
    c.scale = {2.0, 2.0, 2.0};
    return c;
}

/// World coordinates stay inside the unit workspace with z below 0.6, so a
/// fixed affine keeps pointmap latents near [-1, 1].
inline LatentCodec pointmap_codec(const TowerDims& dims) {
    LatentCodec c;
    c.size = dims.frame_size;
    c.patch = dims.patch;
    c.shift = {0.5, 0.5, 0.3};
    c.scale = {2.0, 2.0, 10.0 / 3.0};
    return c;
}

// ---------------------------------------------------------------------------
// layers

struct LinearLayer {
    Tensor w, b;  // w: [in, out]

    static LinearLayer init(int in, int out, SeededRng& rng, double w_scale = -1.0) {
        LinearLayer l;
        const double s = w_scale > 0 ? w_scale : std::sqrt(2.0 / (in + out));
        l.w = Tensor::randn({in, out}, rng, s, true);
        l.b = Tensor::zeros({out}, true);
        return l;
    }

    static LinearLayer zero(int in, int out) {
        LinearLayer l;
        l.w = Tensor::zeros({in, out}, true);
        l.b = Tensor::zeros({out}, true);
        return l;
    }

    Tensor apply(const Tensor& x) const {  // x: [n, in]
        return add(matmul(x, w), reshape(b, {1, b.shape()[0]}));
    }

    void collect(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

struct Mlp {
    LinearLayer l1, l2;

    static Mlp init(int in, int hidden, int out, SeededRng& rng, double last_scale = -1.0) {
        Mlp m;
        m.l1 = LinearLayer::init(in, hidden, rng);
        m.l2 = LinearLayer::init(hidden, out, rng, last_scale);
        return m;
    }

    Tensor apply(const Tensor& x) const { return l2.apply(silu(l1.apply(x))); }

    void collect(const std::string& prefix, ParamMap& out) const {
        l1.collect(prefix + ".l1", out);
        l2.collect(prefix + ".l2", out);
    }
};

struct AttentionWeights {
    LinearLayer wq, wk, wv, wo;
    int heads = 4;

    static AttentionWeights init(int width, int heads, SeededRng& rng, bool zero_out_proj = false) {
        AttentionWeights a;
        a.heads = heads;
        a.wq = LinearLayer::init(width, width, rng);
        a.wk = LinearLayer::init(width, width, rng);
        a.wv = LinearLayer::init(width, width, rng);
        a.wo = zero_out_proj ? LinearLayer::zero(width, width) : LinearLayer::init(width, width, rng);
        return a;
    }

    /// Multi-head scaled dot-product attention; queries from q_in, keys and
    /// values from kv_in. Both are [tokens, width].
    Tensor apply(const Tensor& q_in, const Tensor& kv_in) const {
        Tensor q = wq.apply(q_in), k = wk.apply(kv_in), v = wv.apply(kv_in);
        return wo.apply(scaled_dot_attention(q, k, v, heads));
    }

    void collect(const std::string& prefix, ParamMap& out) const {
        wq.collect(prefix + ".wq", out);
        wk.collect(prefix + ".wk", out);
        wv.collect(prefix + ".wv", out);
        wo.collect(prefix + ".wo", out);
    }
};

// ---------------------------------------------------------------------------
// conditioning

/// Sinusoidal features of a scalar timestep in [0, 1]. Frequencies span
/// 1..50 so the embedding is smooth at 1e-6 perturbations yet separates the
/// sampler's grid points.
inline std::vector<double> timestep_features(double t, int n_feats) {
    if (!(t >= 0.0 && t <= 1.0))
        tensor_fail("timestep_features: t must lie in [0, 1], got " + std::to_string(t));
    std::vector<double> f(static_cast<size_t>(n_feats));
    const int pairs = n_feats / 2;
    for (int j = 0; j < pairs; ++j) {
        const double omega = std::exp(std::log(50.0) * j / std::max(1, pairs - 1));
        f[2 * j] = std::sin(omega * t);
        f[2 * j + 1] = std::cos(omega * t);
    }
    return f;
}

/// Shared conditioning modules: the timestep embedding map and the two
/// action MLPs of the dual-path scheme.
struct ActionConditioner {
    LinearLayer t_proj;  // sinusoidal features -> width
    Mlp mlp1;            // action -> width (fused with t_emb into c)
    Mlp mlp2;            // action -> 3*width modulation offsets
    int t_feats = 32;

    static ActionConditioner init(const TowerDims& dims, SeededRng& rng) {
        ActionConditioner c;
        c.t_feats = dims.t_feats;
        c.t_proj = LinearLayer::init(dims.t_feats, dims.width, rng);
        c.mlp1 = Mlp::init(7, dims.width, dims.width, rng);
        c.mlp2 = Mlp::init(7, dims.width, 3 * dims.width, rng, 0.1);
        return c;
    }

    /// t_emb = SiLU(W * sin_feats(t) + b); deterministic in t.
    Tensor timestep_embed(double t) const {
        Tensor f = Tensor::from_data({1, t_feats}, timestep_features(t, t_feats));
        return silu(t_proj.apply(f));  // [1, width]
    }

    /// One action row: c = SiLU(t_emb + MLP1(a)), offsets = MLP2(a) split
    /// into (gamma_a, beta_a, alpha_a).
    struct Conditioned {
        Tensor c;        // [1, width]
        Tensor gamma_a;  // [1, width]
        Tensor beta_a;
        Tensor alpha_a;
    };

    Conditioned condition(const ActionVector& normalized, const Tensor& t_emb) const {
        Tensor a = Tensor::from_data({1, 7}, {normalized.dx, normalized.dy, normalized.dz,
                                              normalized.droll, normalized.dpitch,
                                              normalized.dyaw, normalized.gripper_width});
        Tensor c = silu(add(t_emb, mlp1.apply(a)));
        Tensor off = mlp2.apply(a);
        const int d = c.shape()[1];
        return {c, slice(off, 1, 0, d), slice(off, 1, d, 2 * d), slice(off, 1, 2 * d, 3 * d)};
    }

    /// Whole action sequence: rows stacked to [T, width] each.
    struct SequenceConditioned {
        Tensor c, gamma_a, beta_a, alpha_a;  // all [T, width]
    };

    SequenceConditioned condition_sequence(const std::vector<ActionVector>& actions,
                                           const Tensor& t_emb) const {
        std::vector<double> flat;
        flat.reserve(actions.size() * 7);
        for (const auto& a : actions) {
            const auto arr = a.to_array();
            flat.insert(flat.end(), arr.begin(), arr.end());
        }
        Tensor a = Tensor::from_data({static_cast<int>(actions.size()), 7}, std::move(flat));
        Tensor c = silu(add(t_emb, mlp1.apply(a)));  // t_emb [1,D] broadcasts over rows
        Tensor off = mlp2.apply(a);
        const int d = c.shape()[1];
        return {c, slice(off, 1, 0, d), slice(off, 1, d, 2 * d), slice(off, 1, 2 * d, 3 * d)};
    }

    void collect(ParamMap& out) const {
        t_proj.collect("timestep_embed", out);
        mlp1.collect("action_mlp1", out);
        mlp2.collect("action_mlp2", out);
    }
};

// ---------------------------------------------------------------------------
// AdaLN residual block, Eq. form: x + alpha * Block(Norm(x) * (1 + gamma) + beta)

inline Tensor adaln_block(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          const Tensor& alpha, const std::function<Tensor(const Tensor&)>& block) {
    Tensor modulated = add(mul(layer_norm(x), add_scalar(gamma, 1.0)), beta);
    return add(x, mul(alpha, block(modulated)));
}

// ---------------------------------------------------------------------------
// towers

struct TowerBlockWeights {
    AttentionWeights self_attn, cond_attn, tower_attn;
    Mlp ffn;
    LinearLayer mod_self, mod_ffn;  // c -> 3*width timestep-derived coefficients

    static TowerBlockWeights init(const TowerDims& dims, SeededRng& rng) {
        TowerBlockWeights b;
        b.self_attn = AttentionWeights::init(dims.width, dims.heads, rng);
        b.cond_attn = AttentionWeights::init(dims.width, dims.heads, rng);
        // zero output projection: joint mode starts exactly at the
        // independently trained towers
        b.tower_attn = AttentionWeights::init(dims.width, dims.heads, rng, true);
        b.ffn = Mlp::init(dims.width, dims.ffn_hidden, dims.width, rng);
        b.mod_self = LinearLayer::init(dims.width, 3 * dims.width, rng, 0.05);
        b.mod_ffn = LinearLayer::init(dims.width, 3 * dims.width, rng, 0.05);
        return b;
    }

    void collect(const std::string& prefix, ParamMap& out) const {
        self_attn.collect(prefix + ".self_attn", out);
        cond_attn.collect(prefix + ".cond_attn", out);
        tower_attn.collect(prefix + ".tower_attn", out);
        ffn.collect(prefix + ".ffn", out);
        mod_self.collect(prefix + ".mod_self", out);
        mod_ffn.collect(prefix + ".mod_ffn", out);
    }
};

struct TowerWeights {
    LinearLayer input_proj;   // latent channels -> width
    LinearLayer cond_proj;    // first-frame latent channels -> width
    LinearLayer output_proj;  // width -> latent channels
    std::vector<TowerBlockWeights> blocks;

    static TowerWeights init(const TowerDims& dims, SeededRng& rng) {
        TowerWeights t;
        t.input_proj = LinearLayer::init(dims.latent_channels(), dims.width, rng);
        t.cond_proj = LinearLayer::init(dims.latent_channels(), dims.width, rng);
        t.output_proj = LinearLayer::init(dims.width, dims.latent_channels(), rng);
        for (int b = 0; b < dims.blocks; ++b) t.blocks.push_back(TowerBlockWeights::init(dims, rng));
        return t;
    }

    void collect(const std::string& prefix, ParamMap& out) const {
        input_proj.collect(prefix + ".input_proj", out);
        cond_proj.collect(prefix + ".cond_proj", out);
        output_proj.collect(prefix + ".output_proj", out);
        for (size_t b = 0; b < blocks.size(); ++b)
            blocks[b].collect(prefix + ".block" + std::to_string(b), out);
    }
};

/// Fixed sinusoidal position features for (frame, row, col) token
/// coordinates; 16 temporal + 24 row + 24 col dims at the default width.
inline Tensor position_features(const TowerDims& dims, int frames) {
    const int g = dims.grid();
    const int s = dims.tokens_per_frame();
    const int d = dims.width;
    std::vector<double> out(static_cast<size_t>(frames) * s * d, 0.0);
    const int t_dims = d / 4;            // pairs: t_dims/2
    const int r_dims = (d - t_dims) / 2;  // row block; remainder goes to col
    for (int f = 0; f < frames; ++f)
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx) {
                double* row = out.data() + (static_cast<size_t>(f) * s + gy * g + gx) * d;
                for (int j = 0; j < t_dims / 2; ++j) {
                    const double w = std::exp(std::log(8.0) * j / std::max(1, t_dims / 2 - 1));
                    row[2 * j] = std::sin(w * f / dims.frames);
                    row[2 * j + 1] = std::cos(w * f / dims.frames);
                }
                for (int j = 0; j < r_dims / 2; ++j) {
                    const double w = std::exp(std::log(16.0) * j / std::max(1, r_dims / 2 - 1));
                    row[t_dims + 2 * j] = std::sin(w * gy / static_cast<double>(g));
                    row[t_dims + 2 * j + 1] = std::cos(w * gy / static_cast<double>(g));
                }
                const int c0 = t_dims + r_dims;
                for (int j = 0; j < (d - c0) / 2; ++j) {
                    const double w = std::exp(std::log(16.0) * j / std::max(1, (d - c0) / 2 - 1));
                    row[c0 + 2 * j] = std::sin(w * gx / static_cast<double>(g));
                    row[c0 + 2 * j + 1] = std::cos(w * gx / static_cast<double>(g));
                }
            }
    return Tensor::from_data({frames, s, d}, std::move(out));
}

/// Everything a tower needs per condition set: task embedding, first-frame
/// memory tokens, per-frame AdaLN coefficients.
struct ConditionSet {
    int task = 0;
    std::vector<ActionVector> actions;  // normalized, one per frame
    Tensor first_frame_latent;          // [1, S, C] clean latent of frame 0
    double timestep = 0.0;
};

namespace detail {

struct TowerRuntime {
    const TowerWeights* weights;
    const TowerDims* dims;
    Tensor mem;                      // [S+1, width] condition memory
    std::vector<std::array<Tensor, 6>> coeffs;  // per block: g1 b1 a1 g2 b2 a2, each [T,1,width]
    int frames;

    Tensor reshape_flat(const Tensor& x3) const {
        return reshape(x3, {frames * dims->tokens_per_frame(), dims->width});
    }
    Tensor reshape_tokens(const Tensor& x2) const {
        return reshape(x2, {frames, dims->tokens_per_frame(), dims->width});
    }

    Tensor phase_a(int b, const Tensor& x) const {
        const auto& blk = weights->blocks[b];
        const auto& cf = coeffs[b];
        Tensor y = adaln_block(x, cf[0], cf[1], cf[2], [&](const Tensor& m) {
            return reshape_tokens(blk.self_attn.apply(reshape_flat(m), reshape_flat(m)));
        });
        Tensor ln = layer_norm(y);
        return add(y, reshape_tokens(blk.cond_attn.apply(reshape_flat(ln), mem)));
    }

    Tensor cross(int b, const Tensor& x, const Tensor& other_tokens) const {
        const auto& blk = weights->blocks[b];
        Tensor ln = layer_norm(x);
        return add(x, reshape_tokens(blk.tower_attn.apply(reshape_flat(ln), other_tokens)));
    }

    Tensor phase_b(int b, const Tensor& x) const {
        const auto& blk = weights->blocks[b];
        const auto& cf = coeffs[b];
        return adaln_block(x, cf[3], cf[4], cf[5],
                           [&](const Tensor& m) { return reshape_tokens(blk.ffn.apply(reshape_flat(m))); });
    }

    Tensor finish(const Tensor& x) const {
        return reshape(weights->output_proj.apply(reshape_flat(layer_norm(x))),
                       {frames, dims->tokens_per_frame(), dims->latent_channels()});
    }
};

inline TowerRuntime prepare_tower(const TowerWeights& w, const TowerDims& dims,
                                  const ActionConditioner& cond, const Tensor& task_table,
                                  const ConditionSet& cs) {
    if (static_cast<int>(cs.actions.size()) == 0)
        tensor_fail("tower_forward: condition set has no actions");
    const int t_count = static_cast<int>(cs.actions.size());
    TowerRuntime rt;
    rt.weights = &w;
    rt.dims = &dims;
    rt.frames = t_count;
    // condition memory: one task token plus first-frame tokens
    const int s = dims.tokens_per_frame();
    Tensor ff = reshape(cs.first_frame_latent, {s, dims.latent_channels()});
    Tensor ff_tokens = add(w.cond_proj.apply(ff),
                           reshape(slice(position_features(dims, 1), 0, 0, 1), {s, dims.width}));
    Tensor task_row = slice(task_table, 0, cs.task, cs.task + 1);
    rt.mem = concat({task_row, ff_tokens}, 0);
    // per-frame dual-path coefficients
    Tensor t_emb = cond.timestep_embed(cs.timestep);
    auto seq = cond.condition_sequence(cs.actions, t_emb);
    const int d = dims.width;
    for (const auto& blk : w.blocks) {
        Tensor mod_self = blk.mod_self.apply(seq.c);  // [T, 3D]
        Tensor mod_ffn = blk.mod_ffn.apply(seq.c);
        auto part = [&](const Tensor& m, int i) {
            return reshape(slice(m, 1, i * d, (i + 1) * d), {t_count, 1, d});
        };
        auto offs = [&](const Tensor& o) { return reshape(o, {t_count, 1, d}); };
        rt.coeffs.push_back({add(part(mod_self, 0), offs(seq.gamma_a)),
                             add(part(mod_self, 1), offs(seq.beta_a)),
                             add(part(mod_self, 2), offs(seq.alpha_a)),
                             add(part(mod_ffn, 0), offs(seq.gamma_a)),
                             add(part(mod_ffn, 1), offs(seq.beta_a)),
                             add(part(mod_ffn, 2), offs(seq.alpha_a))});
    }
    return rt;
}

inline Tensor embed_input(const TowerRuntime& rt, const Tensor& z) {
    const auto& dims = *rt.dims;
    const Shape& sh = z.shape();
    if (sh.size() != 3 || sh[1] != dims.tokens_per_frame() || sh[2] != dims.latent_channels())
        tensor_fail("tower_forward: latent shape " + shape_str(sh) + " does not match dims");
    if (sh[0] != rt.frames)
        tensor_fail("tower_forward: latent frames " + std::to_string(sh[0]) +
                    " do not match action count " + std::to_string(rt.frames));
    Tensor x = rt.reshape_tokens(
        rt.weights->input_proj.apply(reshape(z, {rt.frames * dims.tokens_per_frame(),
                                                 dims.latent_channels()})));
    return add(x, position_features(dims, rt.frames));
}

}  // namespace detail

/// Independent-mode forward, or joint-mode against a fixed per-depth token
/// stream from the other tower. Returns the predicted velocity field with
/// the latent's shape.
inline Tensor tower_forward(const TowerWeights& w, const TowerDims& dims,
                            const ActionConditioner& cond, const Tensor& task_table,
                            const Tensor& z_t, const ConditionSet& cs,
                            const std::optional<std::vector<Tensor>>& other_tower_tokens = std::nullopt) {
    auto rt = detail::prepare_tower(w, dims, cond, task_table, cs);
    if (other_tower_tokens && static_cast<int>(other_tower_tokens->size()) != dims.blocks)
        tensor_fail("tower_forward: expected one token stream per block");
    Tensor x = detail::embed_input(rt, z_t);
    const int n_tokens = rt.frames * dims.tokens_per_frame();
    for (int b = 0; b < dims.blocks; ++b) {
        x = rt.phase_a(b, x);
        if (other_tower_tokens) {
            const Tensor& other = (*other_tower_tokens)[b];
            if (other.shape().size() != 2 || other.shape()[0] != n_tokens ||
                other.shape()[1] != dims.width)
                tensor_fail("tower_forward: other tower tokens shape " + shape_str(other.shape()) +
                            " mismatches " + shape_str({n_tokens, dims.width}));
            x = rt.cross(b, x, other);
        }
        x = rt.phase_b(b, x);
    }
    return rt.finish(x);
}

/// Block-synchronous joint forward: at every depth each tower attends over
/// the other's tokens taken after that depth's self- and condition
/// attention, then both run their feed-forward.
inline std::pair<Tensor, Tensor> dual_forward(const TowerWeights& video, const TowerWeights& pointmap,
                                              const TowerDims& dims, const ActionConditioner& cond,
                                              const Tensor& task_table, const Tensor& z_v,
                                              const Tensor& z_p, const ConditionSet& cond_v,
                                              const ConditionSet& cond_p) {
    if (cond_v.timestep != cond_p.timestep)
        tensor_fail("dual_forward: towers must share one timestep, got " +
                    std::to_string(cond_v.timestep) + " and " + std::to_string(cond_p.timestep));
    auto rt_v = detail::prepare_tower(video, dims, cond, task_table, cond_v);
    auto rt_p = detail::prepare_tower(pointmap, dims, cond, task_table, cond_p);
    Tensor x_v = detail::embed_input(rt_v, z_v);
    Tensor x_p = detail::embed_input(rt_p, z_p);
    for (int b = 0; b < dims.blocks; ++b) {
        Tensor a_v = rt_v.phase_a(b, x_v);
        Tensor a_p = rt_p.phase_a(b, x_p);
        Tensor c_v = rt_v.cross(b, a_v, rt_p.reshape_flat(a_p));
        Tensor c_p = rt_p.cross(b, a_p, rt_v.reshape_flat(a_v));
        x_v = rt_v.phase_b(b, c_v);
        x_p = rt_p.phase_b(b, c_p);
    }
    return {rt_v.finish(x_v), rt_p.finish(x_p)};
}

// ---------------------------------------------------------------------------
// model bundle

/// Both towers plus every shared conditioning module and the dataset action
/// statistics; the unit that checkpoints move around.
struct ModelBundle {
    TowerDims dims;
    TowerWeights video, pointmap;
    ActionConditioner cond;
    Tensor task_table;  // [n_tasks, width]
    geom::ActionStats action_stats;

    static ModelBundle init(const TowerDims& dims, uint64_t seed) {
        ModelBundle m;
        m.dims = dims;
        SeededRng rng(hash_combine(seed, 0x746f776572ULL));
        m.video = TowerWeights::init(dims, rng);
        m.pointmap = TowerWeights::init(dims, rng);
        m.cond = ActionConditioner::init(dims, rng);
        m.task_table = Tensor::randn({dims.n_tasks, dims.width}, rng, 0.3, true);
        for (int i = 0; i < 7; ++i) {
            m.action_stats.lo[i] = -1;
            m.action_stats.hi[i] = 1;
        }
        return m;
    }

    ParamMap params() const {
        ParamMap out;
        video.collect("video_tower", out);
        pointmap.collect("pointmap_tower", out);
        cond.collect(out);
        out.emplace_back("task_embed.table", task_table);
        return out;
    }

    void save(const std::string& path) const {
        ParamMap all = params();
        all.emplace_back("action_stats.lo",
                         Tensor::from_data({7}, {action_stats.lo.begin(), action_stats.lo.end()}));
        all.emplace_back("action_stats.hi",
                         Tensor::from_data({7}, {action_stats.hi.begin(), action_stats.hi.end()}));
        save_checkpoint(path, all);
    }

    void load(const std::string& path) {
        auto entries = load_checkpoint(path);
        restore_params(entries, params());
        for (const auto& e : entries) {
            if (e.name == "action_stats.lo")
                std::copy(e.values.begin(), e.values.end(), action_stats.lo.begin());
            if (e.name == "action_stats.hi")
                std::copy(e.values.begin(), e.values.end(), action_stats.hi.begin());
        }
    }
};

}  // namespace dualflow::dit
