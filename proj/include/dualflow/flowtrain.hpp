#pragma once

// Rectified-flow training: straight-line noisy latents z^t = t z + (1-t) e,
// constant velocity target z - e, mean-squared flow loss, weighted joint
// objective, the Euler sampler, and the stage trainer (independent per-tower
// fine-tuning and joint training with shared timestep and frozen FFNs).

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dualflow/dualtower.hpp"
#include "dualflow/microenv.hpp"
#include "dualflow/optim.hpp"
#include "dualflow/tensor.hpp"

namespace dualflow::flow {

inline Tensor make_noisy(const Tensor& z, const Tensor& eps, double t) {
    if (z.shape() != eps.shape())
        tensor_fail("make_noisy: latent shape " + shape_str(z.shape()) + " does not match noise " +
                    shape_str(eps.shape()));
    if (!(t >= 0.0 && t <= 1.0))
        tensor_fail("make_noisy: t must lie in [0, 1], got " + std::to_string(t));
    return add(mul_scalar(z, t), mul_scalar(eps, 1.0 - t));
}

inline Tensor velocity_target(const Tensor& z, const Tensor& eps) {
    if (z.shape() != eps.shape())
        tensor_fail("velocity_target: shapes " + shape_str(z.shape()) + " and " +
                    shape_str(eps.shape()) + " differ");
    return sub(z, eps);
}

inline Tensor flow_loss(const Tensor& v_pred, const Tensor& v_target) {
    if (v_pred.shape() != v_target.shape())
        tensor_fail("flow_loss: shapes " + shape_str(v_pred.shape()) + " and " +
                    shape_str(v_target.shape()) + " differ");
    Tensor diff = sub(v_pred, v_target);
    return mean_all(mul(diff, diff));
}

inline Tensor joint_loss(const Tensor& loss_v, const Tensor& loss_p, double lambda_v,
                         double lambda_p) {
    return add(mul_scalar(loss_v, lambda_v), mul_scalar(loss_p, lambda_p));
}

// ---------------------------------------------------------------------------
// Euler sampler for the flow ODE

using VelocityFn = std::function<Tensor(const Tensor& z, double t)>;
using JointVelocityFn =
    std::function<std::pair<Tensor, Tensor>(const Tensor& z_v, const Tensor& z_p, double t)>;

/// z starts at the noise sample and integrates dz = v(z, t) dt with n
/// uniform steps at t = i/n. Exact for a constant velocity field.
inline Tensor euler_sample(const VelocityFn& velocity, const Tensor& noise, int steps) {
    if (steps < 1) tensor_fail("euler_sample: need at least one step");
    Tensor z = noise;
    const double dt = 1.0 / steps;
    for (int i = 0; i < steps; ++i)
        z = add(z, mul_scalar(velocity(z, static_cast<double>(i) / steps), dt));
    return z;
}

/// Lockstep variant: both modalities share the Euler schedule and each
/// velocity evaluation sees the other's current latent.
inline std::pair<Tensor, Tensor> euler_sample_joint(const JointVelocityFn& velocity,
                                                    const Tensor& noise_v, const Tensor& noise_p,
                                                    int steps) {
    if (steps < 1) tensor_fail("euler_sample_joint: need at least one step");
    Tensor z_v = noise_v, z_p = noise_p;
    const double dt = 1.0 / steps;
    for (int i = 0; i < steps; ++i) {
        auto [v_v, v_p] = velocity(z_v, z_p, static_cast<double>(i) / steps);
        z_v = add(z_v, mul_scalar(v_v, dt));
        z_p = add(z_p, mul_scalar(v_p, dt));
    }
    return {z_v, z_p};
}

// ---------------------------------------------------------------------------
// stage training

enum class Stage { kVideo, kPointmap, kJoint };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::kVideo: return "video";
        case Stage::kPointmap: return "pointmap";
        case Stage::kJoint: return "joint";
    }
    return "?";
}

struct TrainConfig {
    Stage stage = Stage::kJoint;
    double lambda_v = 0.85;
    double lambda_p = 0.15;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int batch_size = 1;
    int steps = 200;
    bool freeze_ffn = true;  // applies to the joint stage
    uint64_t seed = 0;
};

struct LossRow {
    int step;
    double l_v, l_p, l_total;
};

struct TrainResult {
    std::vector<LossRow> curve;
};

/// One training sample: a chunk of clean latents with its conditioning.
struct ChunkSample {
    Tensor z_v, z_p;    // [T, S, C]
    Tensor ff_v, ff_p;  // [1, S, C] clean first-frame latents
    std::vector<geom::ActionVector> actions;  // normalized
    int task = 0;
};

/// Dataset adapter: renders-to-latents with the initial frames cached.
class LatentDataset {
public:
    LatentDataset(const env::DemoDataset& ds, const dit::TowerDims& dims,
                  const geom::ActionStats& stats)
        : ds_(&ds), stats_(stats), rgb_codec_(dit::rgb_codec(dims)),
          pm_codec_(dit::pointmap_codec(dims)), chunk_len_(dims.frames) {
        if (ds.episodes.empty()) tensor_fail("latent dataset: no episodes");
        initial_.reserve(ds.episodes.size());
        for (const auto& ep : ds.episodes) initial_.push_back(env::render(ep.initial_state, ds.spec));
        const int horizon = static_cast<int>(ds.episodes.front().frames.size());
        if (horizon < chunk_len_)
            tensor_fail("latent dataset: episodes shorter than one chunk");
        max_start_ = horizon - chunk_len_;
    }

    int chunk_len() const { return chunk_len_; }

    /// Draws (episode, start) and encodes the chunk. Draw order is part of
    /// the determinism contract: episode, start, then nothing else.
    ChunkSample sample(SeededRng& rng) const {
        const int e = static_cast<int>(rng.below(static_cast<int64_t>(ds_->episodes.size())));
        const int start = static_cast<int>(rng.below(max_start_ + 1));
        return make(e, start);
    }

    ChunkSample make(int episode, int start) const {
        const auto& ep = ds_->episodes[episode];
        const auto& spec = ds_->spec;
        ChunkSample s;
        s.task = ep.initial_state.task;
        std::vector<const std::vector<double>*> rgb_planes, pm_planes;
        std::vector<std::vector<double>> pm_storage;
        pm_storage.reserve(chunk_len_);
        for (int i = 0; i < chunk_len_; ++i) {
            rgb_planes.push_back(&ep.frames[start + i].rgb);
            pm_storage.push_back(geom::build_pointmap(ep.depths[start + i], spec.size, spec.size,
                                                      spec.camera.k, spec.camera.ext)
                                     .xyz);
        }
        for (const auto& pm : pm_storage) pm_planes.push_back(&pm);
        s.z_v = rgb_codec_.encode(rgb_planes);
        s.z_p = pm_codec_.encode(pm_planes);
        // conditioning observation: the frame preceding the chunk
        const std::vector<double>* obs_rgb;
        std::vector<double> obs_pm;
        if (start == 0) {
            obs_rgb = &initial_[episode].rgb.rgb;
            obs_pm = geom::build_pointmap(initial_[episode].depth, spec.size, spec.size,
                                          spec.camera.k, spec.camera.ext)
                         .xyz;
        } else {
            obs_rgb = &ep.frames[start - 1].rgb;
            obs_pm = geom::build_pointmap(ep.depths[start - 1], spec.size, spec.size, spec.camera.k,
                                          spec.camera.ext)
                         .xyz;
        }
        s.ff_v = rgb_codec_.encode({obs_rgb});
        s.ff_p = pm_codec_.encode({&obs_pm});
        s.actions.reserve(chunk_len_);
        for (int i = 0; i < chunk_len_; ++i)
            s.actions.push_back(geom::normalize_action(ep.actions[start + i], stats_));
        return s;
    }

private:
    const env::DemoDataset* ds_;
    geom::ActionStats stats_;
    dit::LatentCodec rgb_codec_, pm_codec_;
    int chunk_len_;
    int max_start_;
    std::vector<env::RenderOut> initial_;
};

inline bool is_ffn_param(const std::string& name) {
    return name.find(".ffn.") != std::string::npos;
}

/// Parameters updated by a stage. The joint stage freezes feed-forward
/// weights; their gradients are still computed and then discarded.
inline ParamMap stage_params(const dit::ModelBundle& bundle, Stage stage, bool freeze_ffn) {
    ParamMap all = bundle.params();
    ParamMap out;
    for (const auto& [name, t] : all) {
        const bool video_p = name.rfind("video_tower", 0) == 0;
        const bool pointmap_p = name.rfind("pointmap_tower", 0) == 0;
        if (stage == Stage::kVideo && pointmap_p) continue;
        if (stage == Stage::kPointmap && video_p) continue;
        if (stage == Stage::kJoint && freeze_ffn && is_ffn_param(name)) continue;
        out.emplace_back(name, t);
    }
    return out;
}

/// Runs steps [start_step, cfg.steps) of one stage. Per-step randomness is
/// derived from (seed, step), so a run resumed from a checkpointed optimizer
/// continues the exact uninterrupted trajectory.
inline TrainResult train_stage(const TrainConfig& cfg, const LatentDataset& data,
                               dit::ModelBundle& bundle, Adam& opt, int start_step = 0) {
    const ParamMap active = stage_params(bundle, cfg.stage, cfg.freeze_ffn);
    const ParamMap all = bundle.params();
    opt.config().lr = cfg.lr;
    opt.config().beta1 = cfg.beta1;
    opt.config().beta2 = cfg.beta2;
    TrainResult result;
    const auto& dims = bundle.dims;
    const Shape latent_shape{dims.frames, dims.tokens_per_frame(), dims.latent_channels()};
    for (int stepi = start_step; stepi < cfg.steps; ++stepi) {
        SeededRng rng(hash_combine(cfg.seed, static_cast<uint64_t>(stepi)));
        Adam::zero_grads(all);
        double sum_v = 0, sum_p = 0, sum_total = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            ChunkSample s = data.sample(rng);
            const double t = rng.uniform();
            Tensor eps_v = Tensor::randn(latent_shape, rng);
            Tensor eps_p = Tensor::randn(latent_shape, rng);
            dit::ConditionSet cs_v{s.task, s.actions, s.ff_v, t};
            dit::ConditionSet cs_p{s.task, s.actions, s.ff_p, t};
            Tensor loss;
            double l_v = 0, l_p = 0;
            if (cfg.stage == Stage::kVideo) {
                Tensor v = dit::tower_forward(bundle.video, dims, bundle.cond, bundle.task_table,
                                              make_noisy(s.z_v, eps_v, t), cs_v);
                loss = flow_loss(v, velocity_target(s.z_v, eps_v));
                l_v = loss.value();
            } else if (cfg.stage == Stage::kPointmap) {
                Tensor v = dit::tower_forward(bundle.pointmap, dims, bundle.cond, bundle.task_table,
                                              make_noisy(s.z_p, eps_p, t), cs_p);
                loss = flow_loss(v, velocity_target(s.z_p, eps_p));
                l_p = loss.value();
            } else {
                auto [v_v, v_p] = dit::dual_forward(bundle.video, bundle.pointmap, dims, bundle.cond,
                                                    bundle.task_table, make_noisy(s.z_v, eps_v, t),
                                                    make_noisy(s.z_p, eps_p, t), cs_v, cs_p);
                Tensor lv = flow_loss(v_v, velocity_target(s.z_v, eps_v));
                Tensor lp = flow_loss(v_p, velocity_target(s.z_p, eps_p));
                l_v = lv.value();
                l_p = lp.value();
                loss = joint_loss(lv, lp, cfg.lambda_v, cfg.lambda_p);
            }
            loss = mul_scalar(loss, 1.0 / cfg.batch_size);
            loss.backward();
            sum_v += l_v / cfg.batch_size;
            sum_p += l_p / cfg.batch_size;
            sum_total += loss.value();
        }
        opt.step(active);
        result.curve.push_back({stepi, sum_v, sum_p, sum_total});
    }
    return result;
}

}  // namespace dualflow::flow
