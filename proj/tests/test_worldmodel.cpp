#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "dualflow/microenv.hpp"
#include "dualflow/worldmodel.hpp"

using namespace dualflow;
using namespace dualflow::wm;

namespace {

dit::TowerDims tiny_dims() {
    dit::TowerDims d;
    d.frames = 3;
    d.frame_size = 16;
    d.patch = 4;
    d.width = 64;
    d.heads = 4;
    d.blocks = 2;
    d.ffn_hidden = 64;
    return d;
}

dit::ModelBundle tiny_bundle(uint64_t seed = 1) {
    dit::ModelBundle b = dit::ModelBundle::init(tiny_dims(), seed);
    b.action_stats.lo = {-0.1, -0.1, -0.1, -0.3, -0.3, -0.3, 0.0};
    b.action_stats.hi = {0.1, 0.1, 0.1, 0.3, 0.3, 0.3, 0.2};
    return b;
}

FramePair env_frame(uint64_t seed = 2) {
    SeededRng rng(seed);
    env::EnvState s = env::random_initial_state(rng);
    env::RenderSpec spec = env::default_render_spec(16);
    env::RenderOut r = env::render(s, spec);
    FramePair fp;
    fp.rgb = r.rgb;
    fp.pm = geom::build_pointmap(r.depth, spec.size, spec.size, spec.camera.k, spec.camera.ext);
    return fp;
}

std::vector<geom::ActionVector> constant_actions(int n, double dx = 0.05) {
    std::vector<geom::ActionVector> out(n);
    for (auto& a : out) {
        a.dx = dx;
        a.gripper_width = 0.16;
    }
    return out;
}

RolloutConfig tiny_config(uint64_t seed = 7) {
    RolloutConfig cfg;
    cfg.chunk_len = 3;
    cfg.feedback_stride = 2;
    cfg.sampler_steps = 2;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("rollout chunk obeys the shape and range contract") {
    dit::ModelBundle bundle = tiny_bundle();
    FramePair s0 = env_frame();
    auto frames = rollout_chunk(bundle, s0, constant_actions(3), 0, 11, 2);
    REQUIRE(frames.size() == 3);
    for (const auto& f : frames) {
        REQUIRE(f.rgb.height == 16);
        for (double v : f.rgb.rgb) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
        for (double v : f.pm.xyz) REQUIRE(std::isfinite(v));
    }
}

TEST_CASE("rollout chunk rejects a wrong action count") {
    dit::ModelBundle bundle = tiny_bundle();
    REQUIRE_THROWS(rollout_chunk(bundle, env_frame(), constant_actions(5), 0, 11, 2));
}

TEST_CASE("identical inputs and seed give bitwise-identical chunks") {
    dit::ModelBundle bundle = tiny_bundle();
    FramePair s0 = env_frame();
    auto a = rollout_chunk(bundle, s0, constant_actions(3), 0, 42, 2);
    auto b = rollout_chunk(bundle, s0, constant_actions(3), 0, 42, 2);
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].rgb.rgb == b[i].rgb.rgb);
        REQUIRE(a[i].pm.xyz == b[i].pm.xyz);
    }
    auto c = rollout_chunk(bundle, s0, constant_actions(3), 0, 43, 2);
    bool differs = false;
    for (size_t i = 0; i < a.size() && !differs; ++i) differs = a[i].rgb.rgb != c[i].rgb.rgb;
    REQUIRE(differs);
}

TEST_CASE("single-chunk autoregressive rollout reduces to rollout_chunk") {
    dit::ModelBundle bundle = tiny_bundle();
    FramePair s0 = env_frame();
    RolloutConfig cfg = tiny_config();
    auto traj = autoregressive_rollout(bundle, s0, constant_actions(3), 0, cfg);
    auto direct = rollout_chunk(bundle, s0, constant_actions(3), 0, hash_combine(cfg.seed, 0),
                                cfg.sampler_steps);
    REQUIRE(traj.frames.size() == 3);
    REQUIRE(traj.chunk_boundaries == std::vector<int>{0});
    for (size_t i = 0; i < 3; ++i) REQUIRE(traj.frames[i].rgb.rgb == direct[i].rgb.rgb);
}

TEST_CASE("the second chunk is conditioned on the first chunk's final frame") {
    dit::ModelBundle bundle = tiny_bundle();
    FramePair s0 = env_frame();
    RolloutConfig cfg = tiny_config(99);
    auto actions = constant_actions(6);
    auto traj = autoregressive_rollout(bundle, s0, actions, 0, cfg);
    REQUIRE(traj.frames.size() == 6);
    REQUIRE(traj.chunk_boundaries == std::vector<int>{0, 3});

    std::vector<geom::ActionVector> first(actions.begin(), actions.begin() + 3);
    std::vector<geom::ActionVector> second(actions.begin() + 3, actions.end());
    auto chunk1 = rollout_chunk(bundle, s0, first, 0, hash_combine(cfg.seed, 0), cfg.sampler_steps);
    FramePair mid;
    mid.rgb = chunk1.back().rgb;
    mid.pm = chunk1.back().pm;
    auto chunk2 =
        rollout_chunk(bundle, mid, second, 0, hash_combine(cfg.seed, 1), cfg.sampler_steps);
    for (int i = 0; i < 3; ++i) {
        REQUIRE(traj.frames[i].rgb.rgb == chunk1[i].rgb.rgb);
        REQUIRE(traj.frames[3 + i].rgb.rgb == chunk2[i].rgb.rgb);
    }
}

TEST_CASE("a trailing partial chunk is padded and trimmed to the horizon") {
    dit::ModelBundle bundle = tiny_bundle();
    RolloutConfig cfg = tiny_config();
    auto traj = autoregressive_rollout(bundle, env_frame(), constant_actions(4), 0, cfg);
    REQUIRE(traj.frames.size() == 4);
    REQUIRE(traj.chunk_boundaries == std::vector<int>{0, 3});
    REQUIRE_THROWS(autoregressive_rollout(bundle, env_frame(), {}, 0, cfg));
}

TEST_CASE("policy rollout queries at the feedback cadence on fresh frames") {
    dit::ModelBundle bundle = tiny_bundle();
    RolloutConfig cfg = tiny_config(5);
    int calls = 0;
    PolicySampler policy = [&](const Image&, int, SeededRng& rng) {
        ++calls;
        geom::ActionVector a;
        a.dx = rng.uniform(-1, 1);
        return std::make_pair(a, -0.5);
    };
    PolicyRollout r = policy_in_the_loop_rollout(bundle, policy, env_frame(), 0, 6, cfg);
    REQUIRE(r.query_steps == std::vector<int>{0, 2, 4});
    REQUIRE(r.traj.frames.size() == 6);
    REQUIRE(r.actions_norm.size() == 6);
    REQUIRE(r.logprobs.size() == 6);
    REQUIRE(calls == 6);
    // queries at 0 and 2 see the initial frame; by step 4 a chunk exists
    REQUIRE(r.obs[0].rgb == env_frame().rgb.rgb);
    REQUIRE(r.obs[2].rgb == env_frame().rgb.rgb);
    REQUIRE(r.obs[4].rgb == r.traj.frames[2].rgb.rgb);
}

TEST_CASE("a single query covers the whole horizon when k equals it") {
    dit::ModelBundle bundle = tiny_bundle();
    RolloutConfig cfg = tiny_config(6);
    cfg.feedback_stride = 4;
    int queries = 0;
    PolicySampler policy = [&](const Image&, int, SeededRng&) {
        geom::ActionVector a;
        return std::make_pair(a, 0.0);
    };
    PolicyRollout r = policy_in_the_loop_rollout(bundle, policy, env_frame(), 0, 4, cfg);
    (void)queries;
    REQUIRE(r.query_steps == std::vector<int>{0});
    REQUIRE(r.traj.frames.size() == 4);
}

TEST_CASE("deterministic policies give reproducible rollouts and log-probs") {
    dit::ModelBundle bundle = tiny_bundle();
    RolloutConfig cfg = tiny_config(13);
    PolicySampler policy = [](const Image& obs, int, SeededRng& rng) {
        geom::ActionVector a;
        a.dx = 0.3 * obs.rgb[0] + 0.01 * rng.uniform();  // seeded, obs-dependent
        return std::make_pair(a, -1.25);
    };
    PolicyRollout a = policy_in_the_loop_rollout(bundle, policy, env_frame(), 0, 5, cfg);
    PolicyRollout b = policy_in_the_loop_rollout(bundle, policy, env_frame(), 0, 5, cfg);
    REQUIRE(a.logprobs == b.logprobs);
    for (size_t i = 0; i < a.traj.frames.size(); ++i)
        REQUIRE(a.traj.frames[i].rgb.rgb == b.traj.frames[i].rgb.rgb);
    for (size_t i = 0; i < a.actions_norm.size(); ++i)
        REQUIRE(a.actions_norm[i].to_array() == b.actions_norm[i].to_array());
}

TEST_CASE("recorded log-probs match recomputing the sampler density") {
    dit::ModelBundle bundle = tiny_bundle();
    RolloutConfig cfg = tiny_config(17);
    // unit-variance gaussian sampler with a closed-form density
    auto density = [](const geom::ActionVector& a) {
        double lp = 0;
        for (double v : a.to_array()) lp += -0.5 * (v * v + std::log(2 * M_PI));
        return lp;
    };
    PolicySampler policy = [&](const Image&, int, SeededRng& rng) {
        geom::ActionVector a;
        std::array<double, 7> arr{};
        for (auto& v : arr) v = rng.normal();
        a = geom::ActionVector::from_array(arr);
        return std::make_pair(a, density(a));
    };
    PolicyRollout r = policy_in_the_loop_rollout(bundle, policy, env_frame(), 0, 6, cfg);
    for (size_t i = 0; i < r.actions_norm.size(); ++i)
        REQUIRE(std::abs(r.logprobs[i] - density(r.actions_norm[i])) < 1e-10);
}

TEST_CASE("rendering from the source camera reproduces real frames") {
    env::RenderSpec spec = env::default_render_spec(16);
    SeededRng rng(3);
    env::EnvState s = env::random_initial_state(rng);
    ImaginedTrajectory traj;
    for (int t = 0; t < 3; ++t) {
        env::RenderOut r = env::render(s, spec);
        FramePair fp;
        fp.rgb = r.rgb;
        fp.pm = geom::build_pointmap(r.depth, spec.size, spec.size, spec.camera.k,
                                     spec.camera.ext);
        traj.frames.push_back(fp);
        traj.actions.push_back({});
        s = env::step(s, env::expert_policy(s, s.task));
    }
    auto video = render_trajectory(traj, spec.camera);
    REQUIRE(video.size() == 3);
    for (size_t t = 0; t < 3; ++t) REQUIRE(video[t].rgb == traj.frames[t].rgb.rgb);
}

TEST_CASE("different cameras give different videos of a moving scene") {
    env::RenderSpec spec = env::default_render_spec(16);
    SeededRng rng(4);
    env::EnvState s = env::random_initial_state(rng);
    ImaginedTrajectory traj;
    for (int t = 0; t < 4; ++t) {
        env::RenderOut r = env::render(s, spec);
        FramePair fp;
        fp.rgb = r.rgb;
        fp.pm = geom::build_pointmap(r.depth, spec.size, spec.size, spec.camera.k,
                                     spec.camera.ext);
        traj.frames.push_back(fp);
        s = env::step(s, env::expert_policy(s, s.task));
    }
    auto cams = env::standard_camera_set(16);
    auto vid_a = render_trajectory(traj, cams[0]);
    auto vid_b = render_trajectory(traj, cams[1]);
    double diff = 0;
    for (size_t t = 0; t < vid_a.size(); ++t)
        for (size_t i = 0; i < vid_a[t].rgb.size(); ++i)
            diff += std::abs(vid_a[t].rgb[i] - vid_b[t].rgb[i]);
    REQUIRE(diff / (vid_a.size() * vid_a[0].rgb.size()) > 0.0);
}

TEST_CASE("an empty trajectory renders an empty video") {
    ImaginedTrajectory traj;
    auto video = render_trajectory(traj, env::default_render_spec(16).camera);
    REQUIRE(video.empty());
}

TEST_CASE("trajectories serialize to a manifest directory") {
    dit::ModelBundle bundle = tiny_bundle();
    RolloutConfig cfg = tiny_config(21);
    cfg.cameras = env::standard_camera_set(16);
    auto traj = autoregressive_rollout(bundle, env_frame(), constant_actions(3), 0, cfg);
    const std::string dir = "traj_serialize_test";
    save_trajectory(dir, traj, cfg, 0);
    namespace fs = std::filesystem;
    REQUIRE(fs::exists(dir + "/manifest.json"));
    REQUIRE(fs::exists(dir + "/frame_0000.ppm"));
    REQUIRE(fs::exists(dir + "/frame_0002.pm.f64"));
    auto manifest = nlohmann::json::parse(io::read_file(dir + "/manifest.json"));
    REQUIRE(manifest["frames"] == 3);
    REQUIRE(manifest["chunk_boundaries"] == std::vector<int>{0});
    REQUIRE(manifest["actions"].size() == 3);
    REQUIRE(manifest["cameras"].size() == 3);
    geom::Pointmap pm = io::read_pointmap(dir + "/frame_0001.pm.f64");
    REQUIRE(pm.xyz == traj.frames[1].pm.xyz);
    fs::remove_all(dir);
}
