#pragma once

// Imagined-rollout engine: chunked autoregressive generation conditioned on
// action sequences, observation feedback into the policy every k-th frame,
// and flexible-view rendering of imagined trajectories.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualflow/dualtower.hpp"
#include "dualflow/flowtrain.hpp"
#include "dualflow/geometry.hpp"
#include "dualflow/io.hpp"
#include "dualflow/rng.hpp"

namespace dualflow::wm {

using geom::ActionVector;
using geom::Camera;
using geom::Image;
using geom::Pointmap;

struct FramePair {
    Image rgb;       // values in [0, 1]
    Pointmap pm;     // world coordinates, unclamped
};

struct RolloutConfig {
    int chunk_len = 12;
    int feedback_stride = 8;  // policy sees a fresh imagined frame every k steps
    int sampler_steps = 8;
    uint64_t seed = 0;
    std::vector<Camera> cameras;
};

struct ImaginedTrajectory {
    std::vector<FramePair> frames;          // one per action
    std::vector<ActionVector> actions;      // raw gripper-frame commands
    std::vector<int> chunk_boundaries;      // start index of every generated chunk
};

/// Samples one action in the policy's normalized space; returns the action
/// and its log-density. Defined as a callback so the rollout engine does not
/// depend on any concrete policy type.
using PolicySampler =
    std::function<std::pair<ActionVector, double>(const Image& obs, int task, SeededRng& rng)>;

namespace detail {

inline Tensor encode_rgb(const dit::ModelBundle& bundle, const Image& im) {
    return dit::rgb_codec(bundle.dims).encode({&im.rgb});
}

inline Tensor encode_pm(const dit::ModelBundle& bundle, const Pointmap& pm) {
    return dit::pointmap_codec(bundle.dims).encode({&pm.xyz});
}

}  // namespace detail

/// Generates one chunk of frames from the observation s0 under the given
/// raw action sequence. Deterministic in (weights, inputs, seed).
inline std::vector<FramePair> rollout_chunk(const dit::ModelBundle& bundle, const FramePair& s0,
                                            const std::vector<ActionVector>& actions, int task,
                                            uint64_t seed, int sampler_steps = 8) {
    const auto& dims = bundle.dims;
    if (static_cast<int>(actions.size()) != dims.frames)
        tensor_fail("rollout_chunk: expected " + std::to_string(dims.frames) + " actions, got " +
                    std::to_string(actions.size()));
    NoGradGuard ng;
    std::vector<ActionVector> norm;
    norm.reserve(actions.size());
    for (const auto& a : actions) norm.push_back(geom::normalize_action(a, bundle.action_stats));
    Tensor ff_v = detail::encode_rgb(bundle, s0.rgb);
    Tensor ff_p = detail::encode_pm(bundle, s0.pm);
    SeededRng rng(seed);
    const Shape latent_shape{dims.frames, dims.tokens_per_frame(), dims.latent_channels()};
    Tensor eps_v = Tensor::randn(latent_shape, rng);
    Tensor eps_p = Tensor::randn(latent_shape, rng);
    auto velocity = [&](const Tensor& z_v, const Tensor& z_p, double t) {
        dit::ConditionSet cs_v{task, norm, ff_v, t};
        dit::ConditionSet cs_p{task, norm, ff_p, t};
        return dit::dual_forward(bundle.video, bundle.pointmap, dims, bundle.cond,
                                 bundle.task_table, z_v, z_p, cs_v, cs_p);
    };
    auto [z_v, z_p] = flow::euler_sample_joint(velocity, eps_v, eps_p, sampler_steps);
    auto rgb_planes = dit::rgb_codec(dims).decode(z_v);
    auto pm_planes = dit::pointmap_codec(dims).decode(z_p);
    std::vector<FramePair> out(dims.frames);
    for (int t = 0; t < dims.frames; ++t) {
        out[t].rgb.height = dims.frame_size;
        out[t].rgb.width = dims.frame_size;
        out[t].rgb.rgb = std::move(rgb_planes[t]);
        for (auto& v : out[t].rgb.rgb) v = std::clamp(v, 0.0, 1.0);
        out[t].pm.height = dims.frame_size;
        out[t].pm.width = dims.frame_size;
        out[t].pm.xyz = std::move(pm_planes[t]);
    }
    return out;
}

/// Chunked autoregressive generation: each chunk is conditioned on the final
/// frame of the previous one; a trailing partial chunk repeats the last
/// action and is trimmed. Per-chunk noise comes from hash(seed, chunk).
inline ImaginedTrajectory autoregressive_rollout(const dit::ModelBundle& bundle, const FramePair& s0,
                                                 const std::vector<ActionVector>& actions, int task,
                                                 const RolloutConfig& cfg) {
    const int total = static_cast<int>(actions.size());
    if (total < 1) tensor_fail("autoregressive_rollout: need at least one action");
    ImaginedTrajectory traj;
    traj.actions = actions;
    const int chunk_len = bundle.dims.frames;
    FramePair current = s0;
    for (int start = 0; start < total; start += chunk_len) {
        std::vector<ActionVector> chunk_actions;
        chunk_actions.reserve(chunk_len);
        for (int i = 0; i < chunk_len; ++i)
            chunk_actions.push_back(actions[std::min(start + i, total - 1)]);
        auto frames = rollout_chunk(bundle, current, chunk_actions, task,
                                    hash_combine(cfg.seed, static_cast<uint64_t>(start / chunk_len)),
                                    cfg.sampler_steps);
        traj.chunk_boundaries.push_back(start);
        current = frames.back();
        for (int i = 0; i < chunk_len && start + i < total; ++i)
            traj.frames.push_back(std::move(frames[i]));
    }
    return traj;
}

struct PolicyRollout {
    ImaginedTrajectory traj;
    std::vector<ActionVector> actions_norm;  // what the policy emitted
    std::vector<double> logprobs;            // one per action, at sampling time
    std::vector<int> query_steps;            // {0, k, 2k, ...}
    std::vector<Image> obs;                  // observation used for each step's action
};

/// Closed-loop imagined rollout: the policy is queried at steps 0, k, 2k on
/// the most recent fully generated frame, emitting k-action chunks executed
/// open-loop; generation catches up whenever a full model chunk of actions
/// is available.
inline PolicyRollout policy_in_the_loop_rollout(const dit::ModelBundle& bundle,
                                                const PolicySampler& policy, const FramePair& s0,
                                                int task, int horizon, const RolloutConfig& cfg) {
    if (horizon < 1) tensor_fail("policy rollout: horizon must be positive");
    if (cfg.feedback_stride < 1) tensor_fail("policy rollout: feedback stride must be positive");
    const int chunk_len = bundle.dims.frames;
    PolicyRollout out;
    SeededRng policy_rng(hash_combine(cfg.seed, 0x706f6c696379ULL));
    FramePair current = s0;
    int generated_upto = 0;  // frames generated so far
    auto generate_ready_chunks = [&](int actions_available) {
        while (generated_upto + chunk_len <= actions_available) {
            std::vector<ActionVector> chunk_actions(
                out.traj.actions.begin() + generated_upto,
                out.traj.actions.begin() + generated_upto + chunk_len);
            auto frames = rollout_chunk(
                bundle, current, chunk_actions, task,
                hash_combine(cfg.seed, static_cast<uint64_t>(generated_upto / chunk_len)),
                cfg.sampler_steps);
            out.traj.chunk_boundaries.push_back(generated_upto);
            current = frames.back();
            for (auto& f : frames) out.traj.frames.push_back(std::move(f));
            generated_upto += chunk_len;
        }
    };
    for (int q = 0; q < horizon; q += cfg.feedback_stride) {
        generate_ready_chunks(q);
        const Image& obs = out.traj.frames.empty() ? s0.rgb : out.traj.frames.back().rgb;
        out.query_steps.push_back(q);
        const int n_actions = std::min(cfg.feedback_stride, horizon - q);
        for (int i = 0; i < n_actions; ++i) {
            auto [a_norm, logp] = policy(obs, task, policy_rng);
            out.actions_norm.push_back(a_norm);
            out.logprobs.push_back(logp);
            out.obs.push_back(obs);
            out.traj.actions.push_back(geom::denormalize_action(a_norm, bundle.action_stats));
        }
    }
    // final chunks, padding the trailing partial chunk with the last action
    while (generated_upto < horizon) {
        std::vector<ActionVector> chunk_actions;
        for (int i = 0; i < chunk_len; ++i)
            chunk_actions.push_back(
                out.traj.actions[std::min(generated_upto + i, horizon - 1)]);
        auto frames = rollout_chunk(
            bundle, current, chunk_actions, task,
            hash_combine(cfg.seed, static_cast<uint64_t>(generated_upto / chunk_len)),
            cfg.sampler_steps);
        out.traj.chunk_boundaries.push_back(generated_upto);
        current = frames.back();
        for (int i = 0; i < chunk_len && generated_upto + i < horizon; ++i)
            out.traj.frames.push_back(std::move(frames[i]));
        generated_upto += chunk_len;
    }
    out.traj.frames.resize(horizon);
    return out;
}

/// Per-frame reprojection of (pointmap, rgb) into the target camera.
inline std::vector<Image> render_trajectory(const ImaginedTrajectory& traj, const Camera& camera) {
    std::vector<Image> out;
    out.reserve(traj.frames.size());
    for (const auto& f : traj.frames)
        out.push_back(geom::project_to_view(f.pm, f.rgb, camera.k, camera.ext).image);
    return out;
}

/// Serializes a trajectory to a directory: PPM previews, raw tensors, and a
/// JSON manifest with actions, seeds, chunk boundaries and cameras.
inline void save_trajectory(const std::string& dir, const ImaginedTrajectory& traj,
                            const RolloutConfig& cfg, int task) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["frames"] = traj.frames.size();
    manifest["task"] = task;
    manifest["seed"] = cfg.seed;
    manifest["sampler_steps"] = cfg.sampler_steps;
    manifest["chunk_boundaries"] = traj.chunk_boundaries;
    nlohmann::json actions = nlohmann::json::array();
    for (const auto& a : traj.actions) {
        auto arr = a.to_array();
        actions.push_back(std::vector<double>(arr.begin(), arr.end()));
    }
    manifest["actions"] = actions;
    nlohmann::json cameras = nlohmann::json::array();
    for (const auto& c : cfg.cameras) {
        nlohmann::json cam;
        cam["k"] = {c.k.fx, c.k.fy, c.k.cx, c.k.cy};
        cam["r"] = std::vector<double>(c.ext.R.m.begin(), c.ext.R.m.end());
        cam["t"] = {c.ext.t.x, c.ext.t.y, c.ext.t.z};
        cameras.push_back(cam);
    }
    manifest["cameras"] = cameras;
    for (size_t i = 0; i < traj.frames.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04zu", i);
        io::write_ppm(dir + "/" + name + ".ppm", traj.frames[i].rgb);
        io::write_f64(dir + "/" + name + ".rgb.f64",
                      "rgb v1 " + std::to_string(traj.frames[i].rgb.height) + " " +
                          std::to_string(traj.frames[i].rgb.width),
                      traj.frames[i].rgb.rgb);
        io::write_pointmap(dir + "/" + name + ".pm.f64", traj.frames[i].pm);
    }
    io::write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

}  // namespace dualflow::wm
