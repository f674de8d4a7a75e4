#pragma once

// Demo dataset persistence: a JSON manifest (episodes, stats, seeds), one
// raw f64 blob per episode, and PPM previews of the first and final frames.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualflow/io.hpp"
#include "dualflow/microenv.hpp"

namespace dualflow::io {

inline nlohmann::json state_to_json(const env::EnvState& s) {
    nlohmann::json j;
    j["gripper"] = {s.gx, s.gy, s.gz, s.gyaw, s.width};
    j["goal"] = {s.goal.x, s.goal.y, s.goal.radius};
    j["task"] = s.task;
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects) objs.push_back({o.x, o.y, o.z, o.yaw, o.held});
    j["objects"] = objs;
    return j;
}

inline env::EnvState state_from_json(const nlohmann::json& j) {
    env::EnvState s;
    s.gx = j["gripper"][0];
    s.gy = j["gripper"][1];
    s.gz = j["gripper"][2];
    s.gyaw = j["gripper"][3];
    s.width = j["gripper"][4];
    s.goal.x = j["goal"][0];
    s.goal.y = j["goal"][1];
    s.goal.radius = j["goal"][2];
    s.task = j["task"];
    for (const auto& o : j["objects"]) {
        env::ObjectState obj;
        obj.x = o[0];
        obj.y = o[1];
        obj.z = o[2];
        obj.yaw = o[3];
        obj.held = o[4];
        s.objects.push_back(obj);
    }
    return s;
}

/// Episode blob layout per step: action (7) | rgb (size*size*3) | depth (size*size).
inline void save_dataset(const std::string& dir, const env::DemoDataset& ds,
                         const std::string& config_hash, uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "demo-dataset v1";
    manifest["config_hash"] = config_hash;
    manifest["seed"] = seed;
    manifest["frame_size"] = ds.spec.size;
    manifest["horizon"] = ds.horizon;
    manifest["action_stats"] = {std::vector<double>(ds.stats.lo.begin(), ds.stats.lo.end()),
                                std::vector<double>(ds.stats.hi.begin(), ds.stats.hi.end())};
    nlohmann::json eps = nlohmann::json::array();
    for (size_t e = 0; e < ds.episodes.size(); ++e) {
        const auto& ep = ds.episodes[e];
        char name[32];
        std::snprintf(name, sizeof(name), "ep%04zu", e);
        nlohmann::json em;
        em["file"] = std::string(name) + ".bin";
        em["seed"] = ep.seed;
        em["success"] = ep.success_flag;
        em["steps"] = ep.actions.size();
        em["initial_state"] = state_to_json(ep.initial_state);
        eps.push_back(em);
        std::vector<double> blob;
        const size_t step_len = 7 + ep.frames[0].rgb.size() + ep.depths[0].size();
        blob.reserve(ep.actions.size() * step_len);
        for (size_t t = 0; t < ep.actions.size(); ++t) {
            const auto arr = ep.actions[t].to_array();
            blob.insert(blob.end(), arr.begin(), arr.end());
            blob.insert(blob.end(), ep.frames[t].rgb.begin(), ep.frames[t].rgb.end());
            blob.insert(blob.end(), ep.depths[t].begin(), ep.depths[t].end());
        }
        write_f64(dir + "/" + name + ".bin", "episode v1", blob);
        write_ppm(dir + "/" + name + "_first.ppm", ep.frames.front());
        write_ppm(dir + "/" + name + "_last.ppm", ep.frames.back());
    }
    manifest["episodes"] = eps;
    write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

/// Reads only the action statistics from a dataset manifest.
inline geom::ActionStats load_dataset_stats(const std::string& dir) {
    auto manifest = nlohmann::json::parse(read_file(dir + "/manifest.json"));
    geom::ActionStats stats;
    for (int i = 0; i < 7; ++i) {
        stats.lo[i] = manifest["action_stats"][0][i];
        stats.hi[i] = manifest["action_stats"][1][i];
    }
    return stats;
}

inline env::DemoDataset load_dataset(const std::string& dir) {
    auto manifest = nlohmann::json::parse(read_file(dir + "/manifest.json"));
    if (manifest["format"] != "demo-dataset v1") io_fail("unknown dataset format in " + dir);
    env::DemoDataset ds;
    const int size = manifest["frame_size"];
    ds.spec = env::default_render_spec(size);
    ds.horizon = manifest["horizon"];
    for (int i = 0; i < 7; ++i) {
        ds.stats.lo[i] = manifest["action_stats"][0][i];
        ds.stats.hi[i] = manifest["action_stats"][1][i];
    }
    for (const auto& em : manifest["episodes"]) {
        env::Episode ep;
        ep.seed = em["seed"];
        ep.success_flag = em["success"];
        ep.initial_state = state_from_json(em["initial_state"]);
        const int steps = em["steps"];
        std::vector<double> blob = read_f64(dir + "/" + em["file"].get<std::string>());
        const size_t rgb_len = static_cast<size_t>(size) * size * 3;
        const size_t depth_len = static_cast<size_t>(size) * size;
        const size_t step_len = 7 + rgb_len + depth_len;
        if (blob.size() != step_len * steps) io_fail("episode blob size mismatch in " + dir);
        for (int t = 0; t < steps; ++t) {
            const double* p = blob.data() + t * step_len;
            std::array<double, 7> arr;
            std::copy_n(p, 7, arr.begin());
            ep.actions.push_back(geom::ActionVector::from_array(arr));
            geom::Image im;
            im.height = size;
            im.width = size;
            im.rgb.assign(p + 7, p + 7 + rgb_len);
            ep.frames.push_back(std::move(im));
            ep.depths.emplace_back(p + 7 + rgb_len, p + step_len);
        }
        ds.episodes.push_back(std::move(ep));
    }
    return ds;
}

}  // namespace dualflow::io
