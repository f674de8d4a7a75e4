#pragma once

// Run configuration: one key=value text file holding every knob across
// modules. Unknown keys are rejected; defaults carry the reference
// hyperparameters (loss weights 0.85/0.15, chunk 12, feedback stride 8,
// group size 8, learning rate 5e-6, clip 0.20/0.28, temperature 1.6).

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dualflow/dualtower.hpp"
#include "dualflow/geometry.hpp"
#include "dualflow/io.hpp"
#include "dualflow/microenv.hpp"

namespace dualflow::cfg {

struct RunConfig {
    // run identity and paths
    uint64_t seed = 0;
    std::string out_root = "runs/default";
    std::string policy_ckpt;  // optional explicit policy to load

    // dataset generation
    int episodes = 128;
    int horizon = 48;
    std::string policy_mix = "noisy-expert";  // expert | noisy-expert | base-policy
    double noise_scale = 0.3;
    int frame_size = 32;

    // world-model dimensions
    int chunk_len = 12;
    int patch = 4;
    int width = 64;
    int heads = 4;
    int blocks = 2;
    int ffn_hidden = 128;

    // flow-matching training
    double lambda_v = 0.85;
    double lambda_p = 0.15;
    double wm_lr = 1e-3;
    int wm_batch = 1;
    int wm_steps_video = 400;
    int wm_steps_pointmap = 400;
    int wm_steps_joint = 2000;

    // rollouts
    int feedback_stride = 8;
    int sampler_steps = 8;
    int optimize_sampler_steps = 4;

    // reward model
    int rm_steps = 4000;
    double rm_lr = 1e-3;
    int rm_clip_len = 6;
    int rm_clip_stride = 3;

    // policy and behavior cloning
    int policy_hidden = 64;
    int bc_steps = 1500;
    double bc_lr = 1e-3;

    // GRPO
    int group_size = 8;
    double clip_low = 0.20;
    double clip_high = 0.28;
    double kl_weight = 0.01;
    double policy_lr = 5e-6;
    double temperature = 1.6;
    int batch_size = 64;
    int mini_batch = 128;
    int epochs_per_group = 4;
    double discount = 1.0;
    int rollout_budget = 128;
    int optimize_horizon = 24;

    // OEPL / TTPA
    double oepl_beta = 0.5;
    double delta_safe = 0.5;
    int max_replans = 3;
    int ttpa_horizon = 8;

    // evaluation
    int eval_episodes = 128;
    int threads = 2;

    // default camera: fx fy cx cy, row-major R (9), t (3)
    std::string camera = "48 48 16 16 1 0 0 0 -1 0 0 0 -1 -0.5 0.5 1.5";

    template <class F>
    void visit_fields(F&& f) {
        f("seed", seed);
        f("out_root", out_root);
        f("policy_ckpt", policy_ckpt);
        f("episodes", episodes);
        f("horizon", horizon);
        f("policy_mix", policy_mix);
        f("noise_scale", noise_scale);
        f("frame_size", frame_size);
        f("chunk_len", chunk_len);
        f("patch", patch);
        f("width", width);
        f("heads", heads);
        f("blocks", blocks);
        f("ffn_hidden", ffn_hidden);
        f("lambda_v", lambda_v);
        f("lambda_p", lambda_p);
        f("wm_lr", wm_lr);
        f("wm_batch", wm_batch);
        f("wm_steps_video", wm_steps_video);
        f("wm_steps_pointmap", wm_steps_pointmap);
        f("wm_steps_joint", wm_steps_joint);
        f("feedback_stride", feedback_stride);
        f("sampler_steps", sampler_steps);
        f("optimize_sampler_steps", optimize_sampler_steps);
        f("rm_steps", rm_steps);
        f("rm_lr", rm_lr);
        f("rm_clip_len", rm_clip_len);
        f("rm_clip_stride", rm_clip_stride);
        f("policy_hidden", policy_hidden);
        f("bc_steps", bc_steps);
        f("bc_lr", bc_lr);
        f("group_size", group_size);
        f("clip_low", clip_low);
        f("clip_high", clip_high);
        f("kl_weight", kl_weight);
        f("policy_lr", policy_lr);
        f("temperature", temperature);
        f("batch_size", batch_size);
        f("mini_batch", mini_batch);
        f("epochs_per_group", epochs_per_group);
        f("discount", discount);
        f("rollout_budget", rollout_budget);
        f("optimize_horizon", optimize_horizon);
        f("oepl_beta", oepl_beta);
        f("delta_safe", delta_safe);
        f("max_replans", max_replans);
        f("ttpa_horizon", ttpa_horizon);
        f("eval_episodes", eval_episodes);
        f("threads", threads);
        f("camera", camera);
    }

    void set(const std::string& key, const std::string& value) {
        bool found = false;
        visit_fields([&](const char* name, auto& field) {
            if (found || key != name) return;
            found = true;
            using T = std::decay_t<decltype(field)>;
            std::istringstream is(value);
            if constexpr (std::is_same_v<T, std::string>) {
                field = value;
            } else {
                T parsed{};
                is >> parsed;
                if (is.fail())
                    throw std::invalid_argument("config: cannot parse value '" + value +
                                                "' for key '" + key + "'");
                field = parsed;
            }
        });
        if (!found) throw std::invalid_argument("config: unknown key '" + key + "'");
    }

    static RunConfig from_string(const std::string& text) {
        RunConfig cfg;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                            " is not key=value");
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    static RunConfig from_file(const std::string& path) {
        return from_string(io::read_file(path));
    }

    /// Sorted key=value view; the hash input and the form embedded in
    /// artifacts.
    std::string canonical() {
        std::map<std::string, std::string> kv;
        visit_fields([&](const char* name, auto& field) {
            using T = std::decay_t<decltype(field)>;
            if constexpr (std::is_same_v<T, std::string>)
                kv[name] = field;
            else if constexpr (std::is_same_v<T, double>)
                kv[name] = io::format_double(field);
            else
                kv[name] = std::to_string(field);
        });
        std::ostringstream os;
        for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
        return os.str();
    }

    std::string hash_hex() {
        uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
        for (unsigned char c : canonical()) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

    dit::TowerDims tower_dims() const {
        dit::TowerDims d;
        d.frames = chunk_len;
        d.frame_size = frame_size;
        d.patch = patch;
        d.width = width;
        d.heads = heads;
        d.blocks = blocks;
        d.ffn_hidden = ffn_hidden;
        d.n_tasks = 1;
        return d;
    }

    geom::Camera parse_camera() const {
        std::istringstream is(camera);
        std::vector<double> v;
        double x;
        while (is >> x) v.push_back(x);
        if (v.size() != 16)
            throw std::invalid_argument("config: camera needs 16 numbers (fx fy cx cy R[9] t[3]), got " +
                                        std::to_string(v.size()));
        geom::Camera cam;
        cam.k = {v[0], v[1], v[2], v[3]};
        std::copy_n(v.begin() + 4, 9, cam.ext.R.m.begin());
        cam.ext.t = {v[13], v[14], v[15]};
        cam.ext.validate(1e-6);
        return cam;
    }

    env::RenderSpec render_spec() const {
        env::RenderSpec spec;
        spec.size = frame_size;
        spec.camera = parse_camera();
        // the default camera string is written for 32 px; rescale intrinsics
        // when the frame size differs
        if (frame_size != 32) {
            const double scale = frame_size / 32.0;
            spec.camera.k.fx *= scale;
            spec.camera.k.fy *= scale;
            spec.camera.k.cx *= scale;
            spec.camera.k.cy *= scale;
        }
        spec.valid = true;
        return spec;
    }
};

}  // namespace dualflow::cfg
