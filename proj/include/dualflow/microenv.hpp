#pragma once

// Deterministic 2.5-D tabletop micro-environment: planar gripper motion plus
// height and yaw over a textured table, exact ray-cast rendering with
// analytic depth, a scripted expert, and a small trainable clip classifier
// used as success evaluator and reward model.

#include <algorithm>
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

namespace dualflow::env {

using geom::ActionStats;
using geom::ActionVector;
using geom::Camera;
using geom::Image;
using geom::Mat3;
using geom::Vec3;

// workspace and interaction constants (meters / radians)
inline constexpr double kWorkLo = 0.05, kWorkHi = 0.95;
inline constexpr double kZLo = 0.03, kZHi = 0.60;
inline constexpr double kMaxStep = 0.08;        // per-axis translation clamp
inline constexpr double kMaxYawStep = 0.25;
inline constexpr double kMaxWidth = 0.20;
inline constexpr double kObjHalfX = 0.055, kObjHalfY = 0.055, kObjHalfZ = 0.05;
inline constexpr double kObjRestZ = kObjHalfZ;  // object center height at rest
inline constexpr double kGraspWidth = 0.11;     // width below this engages a grasp
inline constexpr double kGraspXY = 0.06;
inline constexpr double kGraspZTol = 0.08;
inline constexpr double kOpenWidth = 0.16;
inline constexpr double kClosedWidth = 0.06;
inline constexpr double kHoverZ = 0.28;
inline constexpr double kGraspZ = 0.10;
inline constexpr double kLiftZ = 0.25;
inline constexpr double kGoalRadius = 0.12;

struct ObjectState {
    double x = 0.5, y = 0.5, z = kObjRestZ, yaw = 0.0;
    bool held = false;
};

struct GoalRegion {
    double x = 0.5, y = 0.5, radius = kGoalRadius;
};

struct EnvState {
    double gx = 0.5, gy = 0.5, gz = 0.25, gyaw = 0.0;  // gripper pose
    double width = kOpenWidth;
    std::vector<ObjectState> objects;
    GoalRegion goal;
    int task = 0;  // index of the object that must reach the goal
};

inline double wrap_angle(double a) {
    while (a > M_PI) a -= 2 * M_PI;
    while (a < -M_PI) a += 2 * M_PI;
    return a;
}

/// Ground-truth dynamics. Roll/pitch deltas are accepted and ignored; the
/// gripper width is an absolute command. Pure function, no noise.
inline EnvState step(const EnvState& state, const ActionVector& a) {
    EnvState s = state;
    s.gx = std::clamp(s.gx + std::clamp(a.dx, -kMaxStep, kMaxStep), kWorkLo, kWorkHi);
    s.gy = std::clamp(s.gy + std::clamp(a.dy, -kMaxStep, kMaxStep), kWorkLo, kWorkHi);
    s.gz = std::clamp(s.gz + std::clamp(a.dz, -kMaxStep, kMaxStep), kZLo, kZHi);
    s.gyaw = wrap_angle(s.gyaw + std::clamp(a.dyaw, -kMaxYawStep, kMaxYawStep));
    s.width = std::clamp(a.gripper_width, 0.0, kMaxWidth);

    int held_idx = -1;
    for (size_t i = 0; i < s.objects.size(); ++i)
        if (s.objects[i].held) held_idx = static_cast<int>(i);

    if (held_idx >= 0 && s.width >= kGraspWidth) {
        s.objects[held_idx].held = false;
        s.objects[held_idx].z = kObjRestZ;  // instant drop, no physics
        held_idx = -1;
    }
    if (held_idx < 0 && s.width < kGraspWidth) {
        double best = kGraspXY;
        int best_i = -1;
        for (size_t i = 0; i < s.objects.size(); ++i) {
            const auto& o = s.objects[i];
            const double d = std::hypot(o.x - s.gx, o.y - s.gy);
            if (d < best && std::abs(o.z - s.gz) < kGraspZTol) {
                best = d;
                best_i = static_cast<int>(i);
            }
        }
        if (best_i >= 0) {
            s.objects[best_i].held = true;
            held_idx = best_i;
        }
    }
    if (held_idx >= 0) {
        s.objects[held_idx].x = s.gx;
        s.objects[held_idx].y = s.gy;
        s.objects[held_idx].z = s.gz;
    }
    return s;
}

inline bool success(const EnvState& s, int task) {
    if (task < 0 || task >= static_cast<int>(s.objects.size())) return false;
    const auto& o = s.objects[task];
    if (o.held) return false;
    if (std::abs(o.z - kObjRestZ) > 0.01) return false;
    return std::hypot(o.x - s.goal.x, o.y - s.goal.y) < s.goal.radius;
}

// ---------------------------------------------------------------------------
// rendering

struct RenderSpec {
    int size = 32;
    Camera camera;
    bool valid = false;
};

/// Default top-down camera over the unit workspace: 32x32, the table exactly
/// fills the view from 1.5 m.
inline RenderSpec default_render_spec(int size = 32) {
    RenderSpec spec;
    spec.size = size;
    spec.camera.k = {1.5 * size, 1.5 * size, size / 2.0, size / 2.0};
    spec.camera.ext.R.m = {1, 0, 0, 0, -1, 0, 0, 0, -1};
    const Vec3 center{0.5, 0.5, 1.5};
    const Vec3 rc = spec.camera.ext.R * center;
    spec.camera.ext.t = {-rc.x, -rc.y, -rc.z};
    spec.valid = true;
    return spec;
}

/// Side cameras used for flexible-view rendering of imagined trajectories.
/// All of them keep every pixel ray pointed at the table plane.
inline std::vector<Camera> standard_camera_set(int size = 32) {
    const geom::CameraIntrinsics k{1.5 * size, 1.5 * size, size / 2.0, size / 2.0};
    std::vector<Camera> cams;
    cams.push_back(default_render_spec(size).camera);
    cams.push_back(geom::lookat_camera({0.5, -0.35, 1.30}, {0.5, 0.5, 0.0}, {0, 0, 1}, k));
    cams.push_back(geom::lookat_camera({-0.30, 0.5, 1.25}, {0.5, 0.5, 0.0}, {0, 0, 1}, k));
    return cams;
}

namespace detail {

struct Box {
    Vec3 center;
    Vec3 half;
    double yaw;
    Vec3 color;
};

// slab test in the box's yaw-rotated local frame; returns entry distance
inline bool ray_box(const Vec3& origin, const Vec3& dir, const Box& b, double& t_hit) {
    const double c = std::cos(-b.yaw), s = std::sin(-b.yaw);
    const Vec3 ro{c * (origin.x - b.center.x) - s * (origin.y - b.center.y),
                  s * (origin.x - b.center.x) + c * (origin.y - b.center.y),
                  origin.z - b.center.z};
    const Vec3 rd{c * dir.x - s * dir.y, s * dir.x + c * dir.y, dir.z};
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    const double o[3] = {ro.x, ro.y, ro.z};
    const double d[3] = {rd.x, rd.y, rd.z};
    const double h[3] = {b.half.x, b.half.y, b.half.z};
    for (int i = 0; i < 3; ++i) {
        if (std::abs(d[i]) < 1e-15) {
            if (std::abs(o[i]) > h[i]) return false;
            continue;
        }
        double ta = (-h[i] - o[i]) / d[i];
        double tb = (h[i] - o[i]) / d[i];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    if (t0 <= 1e-12) return false;
    t_hit = t0;
    return true;
}

inline std::vector<Box> scene_boxes(const EnvState& s) {
    std::vector<Box> boxes;
    for (size_t i = 0; i < s.objects.size(); ++i) {
        const auto& o = s.objects[i];
        const Vec3 color = (static_cast<int>(i) == s.task) ? Vec3{0.82, 0.15, 0.12}
                                                           : Vec3{0.15, 0.30, 0.80};
        boxes.push_back({{o.x, o.y, o.z}, {kObjHalfX, kObjHalfY, kObjHalfZ}, o.yaw, color});
    }
    // two fingers separated by the commanded width plus a palm bar
    const double c = std::cos(s.gyaw), sn = std::sin(s.gyaw);
    const double off = s.width / 2 + 0.012;
    const Vec3 fhalf{0.012, 0.020, 0.050};
    const Vec3 gcol{0.16, 0.16, 0.22};
    boxes.push_back({{s.gx + c * off, s.gy + sn * off, s.gz}, fhalf, s.gyaw, gcol});
    boxes.push_back({{s.gx - c * off, s.gy - sn * off, s.gz}, fhalf, s.gyaw, gcol});
    boxes.push_back(
        {{s.gx, s.gy, s.gz + 0.062}, {off + 0.012, 0.018, 0.012}, s.gyaw, {0.28, 0.28, 0.34}});
    return boxes;
}

inline Vec3 table_color(double x, double y, const GoalRegion& goal) {
    if (std::hypot(x - goal.x, y - goal.y) < goal.radius) return {0.20, 0.62, 0.30};
    const int cx = static_cast<int>(std::floor(x / 0.125));
    const int cy = static_cast<int>(std::floor(y / 0.125));
    const double g = ((cx + cy) % 2 == 0) ? 0.40 : 0.32;
    return {g, g, g};
}

}  // namespace detail

struct RenderOut {
    Image rgb;
    std::vector<double> depth;  // camera-frame z per pixel, always positive
};

/// Exact flat-shaded rendering: per pixel the nearest surface along the ray
/// through integer pixel coordinates; depth is the camera-frame z of the hit.
inline RenderOut render(const EnvState& state, const RenderSpec& spec) {
    if (!spec.valid) throw std::invalid_argument("render: spec not initialized");
    const int n = spec.size;
    RenderOut out;
    out.rgb.height = n;
    out.rgb.width = n;
    out.rgb.rgb.resize(static_cast<size_t>(n) * n * 3);
    out.depth.resize(static_cast<size_t>(n) * n);
    const auto boxes = detail::scene_boxes(state);
    const Vec3 origin = geom::camera_center(spec.camera.ext);
    for (int v = 0; v < n; ++v)
        for (int u = 0; u < n; ++u) {
            // direction with unit camera-frame z, so ray parameter == depth
            const Vec3 dir = spec.camera.ext.R.transposed_mul(
                {(u - spec.camera.k.cx) / spec.camera.k.fx,
                 (v - spec.camera.k.cy) / spec.camera.k.fy, 1.0});
            double best = std::numeric_limits<double>::infinity();
            Vec3 color{0, 0, 0};
            if (dir.z < -1e-12) {
                const double t_plane = -origin.z / dir.z;
                if (t_plane > 0) {
                    best = t_plane;
                    const Vec3 hit = origin + dir * t_plane;
                    color = detail::table_color(hit.x, hit.y, state.goal);
                }
            }
            for (const auto& b : boxes) {
                double t;
                if (detail::ray_box(origin, dir, b, t) && t < best) {
                    best = t;
                    color = b.color;
                }
            }
            if (!std::isfinite(best))
                throw std::runtime_error(
                    "render: pixel ray misses the scene; camera must face the table");
            double* px = out.rgb.px(v, u);
            px[0] = color.x;
            px[1] = color.y;
            px[2] = color.z;
            out.depth[static_cast<size_t>(v) * n + u] = best;
        }
    return out;
}

// ---------------------------------------------------------------------------
// scripted expert

/// Proportional pick-and-place controller: approach above the object, align
/// yaw, descend, close, lift, carry to the goal, release. The xy error is
/// corrected on every step (no phase latching), which keeps the controller
/// stable under injected action noise. Reaches success within 40 steps from
/// any valid initial state.
inline ActionVector expert_policy(const EnvState& s, int task) {
    if (task < 0 || task >= static_cast<int>(s.objects.size()))
        throw std::invalid_argument("expert_policy: no object for task " + std::to_string(task));
    const auto& obj = s.objects[task];
    ActionVector a;
    auto clampd = [](double v) { return std::clamp(v, -kMaxStep, kMaxStep); };

    if (success(s, task)) {
        a.gripper_width = kOpenWidth;
        return a;
    }
    if (obj.held) {
        a.gripper_width = kClosedWidth;
        const double dxy = std::hypot(s.goal.x - s.gx, s.goal.y - s.gy);
        a.dz = clampd(kLiftZ - s.gz);
        if (s.gz > kLiftZ - 0.06) {
            a.dx = clampd(s.goal.x - s.gx);
            a.dy = clampd(s.goal.y - s.gy);
        }
        if (dxy <= 0.04) a.gripper_width = kOpenWidth;  // release over the goal
        return a;
    }
    const double dxy = std::hypot(obj.x - s.gx, obj.y - s.gy);
    a.dx = clampd(obj.x - s.gx);
    a.dy = clampd(obj.y - s.gy);
    a.dz = clampd((dxy > 0.04 ? kHoverZ : kGraspZ) - s.gz);
    // fingers are symmetric under a half-turn
    double dyaw = wrap_angle(obj.yaw - s.gyaw);
    if (dyaw > M_PI / 2) dyaw -= M_PI;
    if (dyaw < -M_PI / 2) dyaw += M_PI;
    a.dyaw = std::clamp(dyaw, -kMaxYawStep, kMaxYawStep);
    a.gripper_width =
        (dxy <= 0.05 && std::abs(s.gz - kGraspZ) <= 0.04) ? kClosedWidth : kOpenWidth;
    return a;
}

// ---------------------------------------------------------------------------
// dataset generation

struct Episode {
    EnvState initial_state;
    std::vector<ActionVector> actions;
    std::vector<Image> frames;                // frame i is the state after action i
    std::vector<std::vector<double>> depths;  // aligned with frames
    bool success_flag = false;
    uint64_t seed = 0;
};

struct DemoDataset {
    std::vector<Episode> episodes;
    ActionStats stats;
    RenderSpec spec;
    int horizon = 48;
};

enum class PolicyMix { kExpert, kNoisyExpert, kBasePolicy };

/// Observation-driven action source used for the base-policy mix.
using ObsPolicyFn = std::function<ActionVector(const Image& obs, int task, SeededRng& rng)>;

inline EnvState random_initial_state(SeededRng& rng) {
    EnvState s;
    s.gx = 0.5;
    s.gy = 0.5;
    s.gz = 0.25;
    s.gyaw = 0.0;
    s.width = kOpenWidth;
    ObjectState o;
    o.x = rng.uniform(0.15, 0.85);
    o.y = rng.uniform(0.15, 0.85);
    o.yaw = rng.uniform(-M_PI, M_PI);
    s.objects = {o};
    // goal at least 0.2 away from the object
    for (int tries = 0; tries < 1000; ++tries) {
        s.goal.x = rng.uniform(0.15, 0.85);
        s.goal.y = rng.uniform(0.15, 0.85);
        if (std::hypot(s.goal.x - o.x, s.goal.y - o.y) >= 0.2) break;
    }
    s.goal.radius = kGoalRadius;
    s.task = 0;
    return s;
}

// expert action component ranges, used to scale the noisy-expert noise
inline constexpr double kNoiseRanges[7] = {2 * kMaxStep, 2 * kMaxStep, 2 * kMaxStep,
                                           2 * kMaxYawStep, 2 * kMaxYawStep, 2 * kMaxYawStep,
                                           kOpenWidth - kClosedWidth};

inline DemoDataset generate_dataset(int n_episodes, PolicyMix mix, uint64_t seed,
                                    const RenderSpec& spec, int horizon = 48,
                                    double noise_scale = 0.3,
                                    const ObsPolicyFn* base_policy = nullptr) {
    if (n_episodes < 1) throw std::invalid_argument("generate_dataset: need at least one episode");
    if (mix == PolicyMix::kBasePolicy && !base_policy)
        throw std::invalid_argument("generate_dataset: base-policy mix needs a policy");
    DemoDataset ds;
    ds.spec = spec;
    ds.horizon = horizon;
    ds.episodes.reserve(n_episodes);
    for (int e = 0; e < n_episodes; ++e) {
        const uint64_t ep_seed = hash_combine(seed, static_cast<uint64_t>(e));
        SeededRng rng(ep_seed);
        Episode ep;
        ep.seed = ep_seed;
        ep.initial_state = random_initial_state(rng);
        EnvState s = ep.initial_state;
        Image obs = render(s, spec).rgb;
        for (int t = 0; t < horizon; ++t) {
            ActionVector a;
            if (mix == PolicyMix::kBasePolicy) {
                a = (*base_policy)(obs, s.task, rng);
            } else {
                a = expert_policy(s, s.task);
                if (mix == PolicyMix::kNoisyExpert) {
                    auto arr = a.to_array();
                    for (int i = 0; i < 7; ++i)
                        arr[i] += noise_scale * kNoiseRanges[i] * rng.normal();
                    arr[6] = std::clamp(arr[6], 0.0, kMaxWidth);
                    a = ActionVector::from_array(arr);
                }
            }
            s = step(s, a);
            RenderOut r = render(s, spec);
            ep.actions.push_back(a);
            ep.frames.push_back(std::move(r.rgb));
            ep.depths.push_back(std::move(r.depth));
            obs = ep.frames.back();
        }
        ep.success_flag = success(s, s.task);
        ds.episodes.push_back(std::move(ep));
    }
    // per-component min/max over every stored action
    for (int i = 0; i < 7; ++i) {
        ds.stats.lo[i] = std::numeric_limits<double>::infinity();
        ds.stats.hi[i] = -std::numeric_limits<double>::infinity();
    }
    for (const auto& ep : ds.episodes)
        for (const auto& a : ep.actions) {
            auto arr = a.to_array();
            for (int i = 0; i < 7; ++i) {
                ds.stats.lo[i] = std::min(ds.stats.lo[i], arr[i]);
                ds.stats.hi[i] = std::max(ds.stats.hi[i], arr[i]);
            }
        }
    return ds;
}

// ---------------------------------------------------------------------------
// clip reward model (success evaluator V and reward model R in one network)

inline constexpr int kPoolGrid = 8;    // frames mean-pooled to 8x8 per channel
inline constexpr int kClipLen = 6;
inline constexpr int kClipStride = 3;

inline constexpr int kFrameChannels = 8;

/// 8x8 mean-pooled frame features. Beyond raw RGB, each cell carries soft
/// color-mask channels and their in-cell products, so spatial coincidences
/// (object over goal, fingers at object) survive pooling regardless of where
/// in the workspace they happen.
inline std::vector<double> pooled_frame_features(const Image& im) {
    const int cell = im.height / kPoolGrid;
    std::vector<double> out(kPoolGrid * kPoolGrid * kFrameChannels, 0.0);
    for (int gy = 0; gy < kPoolGrid; ++gy)
        for (int gx = 0; gx < kPoolGrid; ++gx) {
            double acc[kFrameChannels] = {};
            for (int dy = 0; dy < cell; ++dy)
                for (int dx = 0; dx < cell; ++dx) {
                    const double* px = im.px(gy * cell + dy, gx * cell + dx);
                    const double r = px[0], g = px[1], b = px[2];
                    acc[0] += r - 0.5;
                    acc[1] += g - 0.5;
                    acc[2] += b - 0.5;
                    acc[3] += std::max(0.0, r - std::max(g, b));        // object-ish
                    acc[4] += std::max(0.0, g - std::max(r, b));        // goal-ish
                    acc[5] += 3.0 * std::max(0.0, 0.3 - std::max({r, g, b}));  // gripper-ish
                }
            const double inv = 1.0 / (cell * cell);
            const size_t base = (static_cast<size_t>(gy) * kPoolGrid + gx) * kFrameChannels;
            for (int c = 0; c < 6; ++c) out[base + c] = acc[c] * inv;
            out[base + 6] = 8.0 * out[base + 3] * out[base + 4];  // object-goal coincidence
            out[base + 7] = 8.0 * out[base + 3] * out[base + 5];  // object-gripper coincidence
        }
    return out;
}

inline constexpr int kGlobalFeatDim = 14;

/// Translation-invariant global statistics of one pooled frame: mask masses,
/// peaks, pairwise centroid distances and coincidence totals. Absolute
/// positions are deliberately absent so the classifier cannot memorize
/// episode layouts.
inline std::vector<double> global_frame_features(const Image& im) {
    const auto pf = pooled_frame_features(im);
    const int cells = kPoolGrid * kPoolGrid;
    double mass[3] = {}, peak[3] = {}, cx[3] = {}, cy[3] = {};
    const int chans[3] = {3, 4, 5};  // object / goal / gripper masks
    for (int k = 0; k < 3; ++k) {
        for (int cell = 0; cell < cells; ++cell) {
            const double v = pf[cell * kFrameChannels + chans[k]];
            mass[k] += v;
            peak[k] = std::max(peak[k], v);
            cx[k] += v * (cell % kPoolGrid);
            cy[k] += v * (cell / kPoolGrid);
        }
        const double m = std::max(mass[k], 1e-6);
        cx[k] /= m;
        cy[k] /= m;
    }
    double coinc_rg = 0, coinc_rd = 0, rgb_mean[3] = {};
    for (int cell = 0; cell < cells; ++cell) {
        coinc_rg += pf[cell * kFrameChannels + 6];
        coinc_rd += pf[cell * kFrameChannels + 7];
        for (int c = 0; c < 3; ++c) rgb_mean[c] += pf[cell * kFrameChannels + c] / cells;
    }
    auto cdist = [&](int a, int b) {
        return std::hypot(cx[a] - cx[b], cy[a] - cy[b]) / kPoolGrid;
    };
    return {mass[0] / 4, mass[1] / 4, mass[2] / 4, peak[0],     peak[1],
            peak[2],     cdist(0, 1), cdist(0, 2), cdist(1, 2), coinc_rg,
            coinc_rd,    rgb_mean[0], rgb_mean[1], rgb_mean[2]};
}

/// Clip descriptor from mean-pooled frame features: clip mean, first and
/// last frame, signed first-to-last delta, and mean absolute frame
/// differences.
inline std::vector<double> clip_features(const std::vector<Image>& clip) {
    if (clip.empty()) throw std::invalid_argument("clip_features: empty clip");
    const int fd = kGlobalFeatDim;
    std::vector<std::vector<double>> pf;
    pf.reserve(clip.size());
    for (const auto& f : clip) pf.push_back(global_frame_features(f));
    std::vector<double> out(5 * fd, 0.0);
    for (const auto& p : pf)
        for (int i = 0; i < fd; ++i) out[i] += p[i] / static_cast<double>(clip.size());
    for (int i = 0; i < fd; ++i) out[fd + i] = pf.front()[i];
    for (int i = 0; i < fd; ++i) out[2 * fd + i] = pf.back()[i];
    for (int i = 0; i < fd; ++i) out[3 * fd + i] = 2.0 * (pf.back()[i] - pf.front()[i]);
    if (clip.size() > 1) {
        const double scale = 5.0 / static_cast<double>(clip.size() - 1);
        for (size_t t = 1; t < pf.size(); ++t)
            for (int i = 0; i < fd; ++i)
                out[4 * fd + i] += scale * std::abs(pf[t][i] - pf[t - 1][i]);
    }
    return out;
}

inline constexpr int clip_feature_dim(int) { return 5 * kGlobalFeatDim; }

class ClipRewardModel {
public:
    static constexpr int kHidden = 64;

    ClipRewardModel() = default;

    ClipRewardModel(int n_tasks, int clip_len, uint64_t seed) : feat_dim_(clip_feature_dim(clip_len)) {
        SeededRng rng(hash_combine(seed, 0x52657761ULL));
        const double s1 = std::sqrt(2.0 / (feat_dim_ + kHidden));
        const double s2 = std::sqrt(2.0 / (kHidden + 1));
        w1_ = Tensor::randn({feat_dim_, kHidden}, rng, s1, true);
        b1_ = Tensor::zeros({kHidden}, true);
        task_ = Tensor::randn({n_tasks, kHidden}, rng, 0.1, true);
        w2_ = Tensor::randn({kHidden, 1}, rng, s2, true);
        b2_ = Tensor::zeros({1}, true);
    }

    bool defined() const { return w1_.defined(); }
    int feature_dim() const { return feat_dim_; }

    Tensor logit_graph(const std::vector<double>& features, int task) const {
        Tensor x = Tensor::from_data({1, feat_dim_}, features);
        Tensor h = silu(add(add(matmul(x, w1_), reshape(b1_, {1, kHidden})),
                            slice(task_, 0, task, task + 1)));
        Tensor z = add(matmul(h, w2_), reshape(b2_, {1, 1}));
        return reshape(z, {});
    }

    /// Success confidence in [0, 1] for an L-frame clip.
    double score(const std::vector<Image>& clip, int task) const {
        NoGradGuard ng;
        return sigmoid_val(logit_graph(clip_features(clip), task).value());
    }

    ParamMap params() const {
        return {{"reward_model.w1", w1_},
                {"reward_model.b1", b1_},
                {"reward_model.task", task_},
                {"reward_model.w2", w2_},
                {"reward_model.b2", b2_}};
    }

    void save(const std::string& path) const {
        ParamMap all = params();
        all.emplace_back("reward_model.meta",
                         Tensor::from_data({2}, {static_cast<double>(task_.shape()[0]),
                                                 static_cast<double>(feat_dim_)}));
        save_checkpoint(path, all);
    }

    static ClipRewardModel load(const std::string& path) {
        auto entries = load_checkpoint(path);
        int n_tasks = 1;
        for (const auto& e : entries)
            if (e.name == "reward_model.meta") n_tasks = static_cast<int>(e.values[0]);
        ClipRewardModel m(n_tasks, kClipLen, 0);
        restore_params(entries, m.params());
        return m;
    }

private:
    int feat_dim_ = 0;
    Tensor w1_, b1_, task_, w2_, b2_;
};

struct RewardModelConfig {
    int clip_len = kClipLen;
    int clip_stride = kClipStride;
    int train_steps = 4000;
    int batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 3e-4;
    double feature_noise = 0.01;  // augmentation during training
    uint64_t seed = 0;
};

struct RewardModelResult {
    ClipRewardModel model;
    double heldout_accuracy = 0.0;
    int n_train_clips = 0;
    int n_heldout_clips = 0;
};

/// Binary cross-entropy training of the clip classifier on episode-outcome
/// labels, with an 80/20 split by episode.
inline RewardModelResult train_reward_model(const DemoDataset& ds, const RewardModelConfig& cfg) {
    bool any_pos = false, any_neg = false;
    for (const auto& ep : ds.episodes) (ep.success_flag ? any_pos : any_neg) = true;
    if (!any_pos || !any_neg)
        throw std::invalid_argument(
            "train_reward_model: dataset must contain both successes and failures");

    struct Sample {
        std::vector<double> features;
        int task;
        double label;
    };
    std::vector<Sample> train, heldout;
    const size_t n_train_eps = (ds.episodes.size() * 8 + 9) / 10;
    for (size_t e = 0; e < ds.episodes.size(); ++e) {
        const auto& ep = ds.episodes[e];
        auto& sink = (e < n_train_eps) ? train : heldout;
        for (int start = 0; start + cfg.clip_len <= static_cast<int>(ep.frames.size());
             start += cfg.clip_stride) {
            std::vector<Image> clip(ep.frames.begin() + start,
                                    ep.frames.begin() + start + cfg.clip_len);
            sink.push_back({clip_features(clip), ep.initial_state.task,
                            ep.success_flag ? 1.0 : 0.0});
        }
    }
    if (train.empty() || heldout.empty())
        throw std::invalid_argument("train_reward_model: dataset too small for a split");

    int n_tasks = 1;
    for (const auto& s : train) n_tasks = std::max(n_tasks, s.task + 1);
    RewardModelResult res;
    res.model = ClipRewardModel(n_tasks, cfg.clip_len, cfg.seed);
    res.n_train_clips = static_cast<int>(train.size());
    res.n_heldout_clips = static_cast<int>(heldout.size());
    Adam opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    const ParamMap params = res.model.params();
    for (int stepi = 0; stepi < cfg.train_steps; ++stepi) {
        SeededRng rng(hash_combine(hash_combine(cfg.seed, 0x7472ULL), stepi));
        Adam::zero_grads(params);
        Tensor loss = Tensor::scalar(0.0);
        for (int b = 0; b < cfg.batch_size; ++b) {
            const Sample& s = train[static_cast<size_t>(rng.below(train.size()))];
            std::vector<double> feats = s.features;
            for (auto& v : feats) v += cfg.feature_noise * rng.normal();
            Tensor z = clamp(res.model.logit_graph(feats, s.task), -15.0, 15.0);
            // softplus(z) - z*y
            Tensor bce = sub(log_op(add_scalar(exp_op(z), 1.0)), mul_scalar(z, s.label));
            loss = add(loss, bce);
        }
        loss = mul_scalar(loss, 1.0 / cfg.batch_size);
        loss.backward();
        opt.step(params);
    }
    int correct = 0;
    {
        NoGradGuard ng;
        for (const auto& s : heldout) {
            const double p = sigmoid_val(res.model.logit_graph(s.features, s.task).value());
            if ((p > 0.5) == (s.label > 0.5)) ++correct;
        }
    }
    res.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(heldout.size());
    return res;
}

}  // namespace dualflow::env
