// Reproducible experiment driver: dataset generation, two-stage world-model
// training, reward-model training, IEPL/OEPL optimization, evaluation with
// optional TTPA gating, and metrics aggregation.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <string>

#include "dualflow/config.hpp"
#include "dualflow/dataset_io.hpp"
#include "dualflow/flowtrain.hpp"
#include "dualflow/policyopt.hpp"
#include "dualflow/worldmodel.hpp"

namespace fs = std::filesystem;
using namespace dualflow;
using json = nlohmann::json;

namespace {

struct Paths {
    std::string root;
    std::string dataset() const { return root + "/dataset"; }
    std::string world(const std::string& stage) const { return root + "/world_" + stage + ".ckpt"; }
    std::string optstate(const std::string& stage) const {
        return root + "/optstate_" + stage + ".ckpt";
    }
    std::string runstate(const std::string& stage) const {
        return root + "/runstate_" + stage + ".json";
    }
    std::string loss_csv(const std::string& stage) const { return root + "/loss_" + stage + ".csv"; }
    std::string reward() const { return root + "/reward.ckpt"; }
    std::string reward_meta() const { return root + "/reward_meta.json"; }
    std::string policy(const std::string& tag) const { return root + "/policy_" + tag + ".ckpt"; }
    std::string curve(const std::string& tag) const { return root + "/curve_" + tag + ".csv"; }
    std::string metrics(const std::string& tag) const { return root + "/metrics_" + tag + ".json"; }
    std::string episodes_csv(const std::string& tag) const {
        return root + "/episodes_" + tag + ".csv";
    }
    std::string audit(const std::string& tag) const { return root + "/ttpa_audit_" + tag + ".jsonl"; }
};

env::PolicyMix parse_mix(const std::string& name) {
    if (name == "expert") return env::PolicyMix::kExpert;
    if (name == "noisy-expert") return env::PolicyMix::kNoisyExpert;
    if (name == "base-policy") return env::PolicyMix::kBasePolicy;
    throw std::invalid_argument("unknown policy mix '" + name + "'");
}

dit::ModelBundle load_bundle(cfg::RunConfig& rc, const std::string& path) {
    dit::ModelBundle bundle = dit::ModelBundle::init(rc.tower_dims(), rc.seed);
    bundle.load(path);
    return bundle;
}

rl::GaussianPolicy load_or_clone_base_policy(cfg::RunConfig& rc, const Paths& p) {
    rl::GaussianPolicy policy(rc.frame_size, 1, rc.seed, rc.policy_hidden);
    policy.set_temperature(rc.temperature);
    const std::string src = !rc.policy_ckpt.empty() ? rc.policy_ckpt : p.policy("base");
    if (fs::exists(src)) {
        policy.load(src);
        return policy;
    }
    // behavior-clone a base policy from the dataset, then persist it
    std::cout << "optimize: no policy checkpoint, behavior-cloning a base policy\n";
    env::DemoDataset ds = io::load_dataset(p.dataset());
    rl::bc_train(policy, ds, ds.stats,
                 {.steps = rc.bc_steps, .batch_size = 16, .lr = rc.bc_lr, .seed = rc.seed});
    policy.save(p.policy("base"));
    return policy;
}

rl::TrajectoryEvaluator clip_model_evaluator(const env::ClipRewardModel& model, int clip_len,
                                             int clip_stride, double beta) {
    return [&model, clip_len, clip_stride, beta](const std::vector<geom::Image>& video, int task) {
        std::vector<geom::Image> padded = video;
        while (static_cast<int>(padded.size()) < clip_len) padded.push_back(padded.back());
        rl::OeplRewardConfig rcfg;
        rcfg.clip_len = clip_len;
        rcfg.clip_stride = clip_stride;
        rcfg.beta = beta;
        rcfg.reward_model = [&model](const std::vector<geom::Image>& clip, int t) {
            return model.score(clip, t);
        };
        return rl::oepl_return(rl::oepl_clip_rewards(padded, task, rcfg), beta);
    };
}

// ---------------------------------------------------------------------------

int cmd_gen_data(cfg::RunConfig& rc, bool force) {
    if (rc.episodes < 1) throw std::invalid_argument("gen-data: episodes must be >= 1");
    Paths p{rc.out_root};
    if (fs::exists(p.dataset()) && !fs::is_empty(p.dataset()) && !force)
        throw std::invalid_argument("gen-data: " + p.dataset() +
                                    " exists and is not empty (use --force)");
    fs::create_directories(p.dataset());
    env::DemoDataset ds = env::generate_dataset(rc.episodes, parse_mix(rc.policy_mix), rc.seed,
                                                rc.render_spec(), rc.horizon, rc.noise_scale);
    io::save_dataset(p.dataset(), ds, rc.hash_hex(), rc.seed);
    int wins = 0;
    for (const auto& ep : ds.episodes) wins += ep.success_flag;
    std::cout << "gen-data: wrote " << ds.episodes.size() << " episodes (" << wins
              << " successes) to " << p.dataset() << "\n";
    return 0;
}

int cmd_train_world(cfg::RunConfig& rc, const std::string& stage, bool resume) {
    Paths p{rc.out_root};
    flow::TrainConfig tc;
    tc.lambda_v = rc.lambda_v;
    tc.lambda_p = rc.lambda_p;
    tc.lr = rc.wm_lr;
    tc.batch_size = rc.wm_batch;
    tc.seed = hash_combine(rc.seed, std::hash<std::string>{}(stage));
    if (stage == "video") {
        tc.stage = flow::Stage::kVideo;
        tc.steps = rc.wm_steps_video;
    } else if (stage == "pointmap") {
        tc.stage = flow::Stage::kPointmap;
        tc.steps = rc.wm_steps_pointmap;
    } else if (stage == "joint") {
        tc.stage = flow::Stage::kJoint;
        tc.steps = rc.wm_steps_joint;
        std::string missing;
        if (!fs::exists(p.world("video"))) missing += "video";
        if (!fs::exists(p.world("pointmap"))) missing += missing.empty() ? "pointmap" : ", pointmap";
        if (!missing.empty())
            throw std::invalid_argument("train-world joint: missing stage-1 checkpoints: " + missing);
    } else {
        throw std::invalid_argument("train-world: stage must be video, pointmap or joint");
    }

    env::DemoDataset ds = io::load_dataset(p.dataset());
    dit::ModelBundle bundle = dit::ModelBundle::init(rc.tower_dims(), rc.seed);
    bundle.action_stats = ds.stats;
    Adam opt;
    int start_step = 0;
    if (resume && fs::exists(p.runstate(stage))) {
        auto rs = json::parse(io::read_file(p.runstate(stage)));
        if (rs["config_hash"] != rc.hash_hex())
            throw std::invalid_argument("train-world: runstate config hash differs; not resuming");
        start_step = rs["step"];
        bundle.load(p.world(stage));
        for (const auto& e : load_checkpoint(p.optstate(stage)))
            opt.load_state_tensor(e.name, e.values);
        opt.set_step_count(rs["opt_steps"]);
        std::cout << "train-world: resuming " << stage << " at step " << start_step << "\n";
    } else if (stage == "joint") {
        // warm start: video tower and shared modules from the video stage,
        // pointmap tower parameters from the pointmap stage
        bundle.load(p.world("video"));
        auto entries = load_checkpoint(p.world("pointmap"));
        ParamMap pm_params;
        for (const auto& [name, t] : bundle.params())
            if (name.rfind("pointmap_tower", 0) == 0) pm_params.emplace_back(name, t);
        restore_params(entries, pm_params);
    }

    flow::LatentDataset data(ds, bundle.dims, ds.stats);
    flow::TrainResult result = flow::train_stage(tc, data, bundle, opt, start_step);

    bundle.save(p.world(stage));
    save_checkpoint(p.optstate(stage), opt.state_tensors());
    json rs;
    rs["stage"] = stage;
    rs["step"] = tc.steps;
    rs["opt_steps"] = opt.step_count();
    rs["seed"] = rc.seed;
    rs["config_hash"] = rc.hash_hex();
    io::write_file(p.runstate(stage), rs.dump(2) + "\n");
    std::ofstream csv(p.loss_csv(stage), start_step > 0 ? std::ios::app : std::ios::trunc);
    if (start_step == 0) csv << "step,l_v,l_p,l_total\n";
    for (const auto& row : result.curve)
        csv << row.step << "," << io::format_double(row.l_v) << "," << io::format_double(row.l_p)
            << "," << io::format_double(row.l_total) << "\n";
    std::cout << "train-world: stage " << stage << " done at step " << tc.steps << ", final loss "
              << (result.curve.empty() ? 0.0 : result.curve.back().l_total) << "\n";
    return 0;
}

int cmd_train_reward(cfg::RunConfig& rc) {
    Paths p{rc.out_root};
    env::DemoDataset ds = io::load_dataset(p.dataset());
    env::RewardModelConfig rmc;
    rmc.clip_len = rc.rm_clip_len;
    rmc.clip_stride = rc.rm_clip_stride;
    rmc.train_steps = rc.rm_steps;
    rmc.lr = rc.rm_lr;
    rmc.seed = rc.seed;
    env::RewardModelResult res = env::train_reward_model(ds, rmc);
    res.model.save(p.reward());
    json meta;
    meta["heldout_accuracy"] = res.heldout_accuracy;
    meta["train_clips"] = res.n_train_clips;
    meta["heldout_clips"] = res.n_heldout_clips;
    meta["config_hash"] = rc.hash_hex();
    meta["seed"] = rc.seed;
    io::write_file(p.reward_meta(), meta.dump(2) + "\n");
    std::cout << "train-reward: held-out accuracy " << res.heldout_accuracy << "\n";
    return 0;
}

int cmd_optimize(cfg::RunConfig& rc, const std::string& paradigm) {
    Paths p{rc.out_root};
    if (!fs::exists(p.world("joint")))
        throw std::invalid_argument("optimize: missing world model checkpoint " + p.world("joint"));
    dit::ModelBundle bundle = load_bundle(rc, p.world("joint"));
    rl::GaussianPolicy policy = load_or_clone_base_policy(rc, p);

    rl::GrpoConfig grpo;
    grpo.group_size = rc.group_size;
    grpo.clip_low = rc.clip_low;
    grpo.clip_high = rc.clip_high;
    grpo.kl_weight = rc.kl_weight;
    grpo.lr = rc.policy_lr;
    grpo.temperature = rc.temperature;
    grpo.batch_size = rc.batch_size;
    grpo.mini_batch = rc.mini_batch;
    grpo.epochs_per_group = rc.epochs_per_group;
    grpo.discount = rc.discount;

    rl::OptimizeResult result;
    if (paradigm == "iepl") {
        env::DemoDataset demos = io::load_dataset(p.dataset());
        rl::IeplConfig icfg;
        icfg.grpo = grpo;
        icfg.horizon = rc.optimize_horizon;
        icfg.rollout_budget = rc.rollout_budget;
        icfg.sampler_steps = rc.optimize_sampler_steps;
        icfg.feedback_stride = rc.feedback_stride;
        icfg.seed = hash_combine(rc.seed, 0x6965ULL);
        icfg.threads = rc.threads;
        icfg.cameras = env::standard_camera_set(rc.frame_size);
        result = rl::iepl_train(policy, bundle, demos, icfg);
    } else if (paradigm == "oepl") {
        if (!fs::exists(p.reward()))
            throw std::invalid_argument("optimize: oepl needs the reward model " + p.reward());
        env::ClipRewardModel model = env::ClipRewardModel::load(p.reward());
        rl::OeplConfig ocfg;
        ocfg.grpo = grpo;
        ocfg.horizon = rc.optimize_horizon;
        ocfg.rollout_budget = rc.rollout_budget;
        ocfg.sampler_steps = rc.optimize_sampler_steps;
        ocfg.feedback_stride = rc.feedback_stride;
        ocfg.seed = hash_combine(rc.seed, 0x6f65ULL);
        ocfg.threads = rc.threads;
        ocfg.reward.clip_len = rc.rm_clip_len;
        ocfg.reward.clip_stride = rc.rm_clip_stride;
        ocfg.reward.beta = rc.oepl_beta;
        ocfg.reward.reward_model = [&model](const std::vector<geom::Image>& clip, int task) {
            return model.score(clip, task);
        };
        result = rl::oepl_train(policy, bundle, ocfg);
    } else {
        throw std::invalid_argument("optimize: paradigm must be iepl or oepl");
    }

    policy.save(p.policy(paradigm));
    io::CsvWriter csv(p.curve(paradigm), {"iteration", "mean_return", "std_return", "loss", "kl"});
    for (const auto& row : result.curve)
        csv.row({static_cast<double>(row.iteration), row.mean_return, row.std_return, row.loss,
                 row.kl});
    csv.close();
    json metrics;
    metrics["paradigm"] = paradigm;
    metrics["rollouts_used"] = result.rollouts_used;
    metrics["rollout_budget"] = rc.rollout_budget;
    metrics["partial_group_dropped"] = result.partial_group_dropped;
    metrics["iterations"] = result.curve.size();
    metrics["config_hash"] = rc.hash_hex();
    metrics["seed"] = rc.seed;
    io::write_file(p.metrics("optimize_" + paradigm), metrics.dump(2) + "\n");
    std::cout << "optimize: " << paradigm << " used " << result.rollouts_used << " of "
              << rc.rollout_budget << " rollouts over " << result.curve.size() << " iterations\n";
    return 0;
}

int cmd_eval(cfg::RunConfig& rc, const std::string& policy_path, bool with_ttpa,
             const std::string& tag) {
    Paths p{rc.out_root};
    rl::GaussianPolicy policy(rc.frame_size, 1, rc.seed, rc.policy_hidden);
    policy.set_temperature(rc.temperature);
    const std::string src = !policy_path.empty()
                                ? policy_path
                                : (!rc.policy_ckpt.empty() ? rc.policy_ckpt : p.policy("base"));
    if (!fs::exists(src)) throw std::invalid_argument("eval: missing policy checkpoint " + src);
    policy.load(src);

    geom::ActionStats stats = io::load_dataset_stats(p.dataset());
    rl::EvalConfig ec;
    ec.n_episodes = rc.eval_episodes;
    ec.horizon = rc.horizon;
    ec.feedback_stride = rc.feedback_stride;
    ec.seed = rc.seed;
    ec.threads = rc.threads;
    ec.sampler_steps = rc.optimize_sampler_steps;
    ec.with_ttpa = with_ttpa;
    ec.ttpa.delta_safe = rc.delta_safe;
    ec.ttpa.max_replans = rc.max_replans;
    ec.ttpa.horizon = rc.ttpa_horizon;

    rl::EvalResult result;
    if (with_ttpa) {
        if (!fs::exists(p.world("joint")))
            throw std::invalid_argument("eval: TTPA needs the world model " + p.world("joint"));
        if (!fs::exists(p.reward()))
            throw std::invalid_argument("eval: TTPA needs the reward model " + p.reward());
        dit::ModelBundle bundle = load_bundle(rc, p.world("joint"));
        env::ClipRewardModel model = env::ClipRewardModel::load(p.reward());
        rl::TrajectoryEvaluator evaluator =
            clip_model_evaluator(model, rc.rm_clip_len, rc.rm_clip_stride, rc.oepl_beta);
        result = rl::evaluate_policy(policy, stats, rc.render_spec(), ec, &bundle, &evaluator);
    } else {
        result = rl::evaluate_policy(policy, stats, rc.render_spec(), ec);
    }

    io::CsvWriter csv(p.episodes_csv(tag), {"episode", "success"});
    for (size_t e = 0; e < result.per_episode.size(); ++e)
        csv.row({static_cast<double>(e), static_cast<double>(result.per_episode[e])});
    csv.close();
    json metrics;
    metrics["tag"] = tag;
    metrics["policy"] = src;
    metrics["with_ttpa"] = with_ttpa;
    metrics["episodes"] = rc.eval_episodes;
    metrics["success_rate"] = result.success_rate;
    metrics["config_hash"] = rc.hash_hex();
    metrics["seed"] = rc.seed;
    io::write_file(p.metrics(tag), metrics.dump(2) + "\n");
    if (with_ttpa) {
        std::ostringstream lines;
        for (const auto& a : result.audits) {
            json rec;
            rec["episode"] = a.episode;
            rec["step"] = a.step;
            rec["fallback"] = a.fallback;
            json cands = json::array();
            for (const auto& c : a.candidates)
                cands.push_back(
                    {{"seed", c.seed}, {"confidence", c.confidence}, {"executed", c.executed}});
            rec["candidates"] = cands;
            lines << rec.dump() << "\n";
        }
        io::write_file(p.audit(tag), lines.str());
    }
    std::cout << "eval[" << tag << "]: success rate " << result.success_rate << " over "
              << rc.eval_episodes << " episodes\n";
    return 0;
}

int cmd_report(cfg::RunConfig& rc) {
    Paths p{rc.out_root};
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(p.root))
        if (entry.path().filename().string().rfind("metrics_", 0) == 0)
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::ofstream csv(p.root + "/report.csv", std::ios::trunc);
    csv << "file,metric,value\n";
    for (const auto& f : files) {
        auto m = json::parse(io::read_file(f.string()));
        const std::string name = f.filename().string();
        if (m.contains("success_rate"))
            csv << name << ",success_rate," << io::format_double(m["success_rate"].get<double>())
                << "\n";
        if (m.contains("rollouts_used"))
            csv << name << ",rollouts_used," << m["rollouts_used"].get<int>() << "\n";
    }
    csv.close();
    std::cout << "report: wrote " << p.root << "/report.csv (" << files.size() << " inputs)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "dual-tower flow world model and policy optimization on a tabletop micro-environment"};
    app.require_subcommand(1);
    std::string config_path;
    auto add_config = [&config_path](CLI::App* sub) {
        sub->add_option("--config", config_path, "run configuration file (key = value lines)");
    };

    bool force = false;
    auto* gen = app.add_subcommand(
        "gen-data", "generate a demonstration dataset; writes manifest.json, per-episode "
                    "raw tensors and PPM previews under <out_root>/dataset");
    gen->add_flag("--force", force, "overwrite a non-empty dataset directory");
    add_config(gen);

    std::string stage;
    bool resume = false;
    auto* tw = app.add_subcommand(
        "train-world",
        "train one world-model stage; writes world_<stage>.ckpt and loss_<stage>.csv with "
        "columns step,l_v,l_p,l_total");
    tw->add_option("--stage", stage, "video | pointmap | joint")->required();
    tw->add_flag("--resume", resume, "continue from the saved run state");
    add_config(tw);

    auto* tr = app.add_subcommand("train-reward",
                                  "train the clip success classifier; writes reward.ckpt and "
                                  "reward_meta.json with the held-out accuracy");
    add_config(tr);

    std::string paradigm;
    auto* opt = app.add_subcommand(
        "optimize",
        "policy optimization in imagined rollouts; writes policy_<paradigm>.ckpt and "
        "curve_<paradigm>.csv with columns iteration,mean_return,std_return,loss,kl");
    opt->add_option("--paradigm", paradigm, "iepl | oepl")->required();
    add_config(opt);

    std::string policy_path, tag = "base";
    bool with_ttpa = false;
    auto* ev = app.add_subcommand(
        "eval",
        "true-environment evaluation; writes metrics_<tag>.json and episodes_<tag>.csv with "
        "columns episode,success, plus ttpa_audit_<tag>.jsonl under --with-ttpa");
    ev->add_option("--policy", policy_path, "policy checkpoint (default: policy_base.ckpt)");
    ev->add_option("--tag", tag, "label for the emitted metrics files");
    ev->add_flag("--with-ttpa", with_ttpa, "gate every action chunk through imagined rollouts");
    add_config(ev);

    auto* rep = app.add_subcommand(
        "report", "aggregate metrics_*.json into report.csv with columns file,metric,value");
    add_config(rep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        app.exit(e);
        return 1;
    }

    try {
        cfg::RunConfig rc =
            config_path.empty() ? cfg::RunConfig{} : cfg::RunConfig::from_file(config_path);
        fs::create_directories(rc.out_root);
        if (app.got_subcommand("gen-data")) return cmd_gen_data(rc, force);
        if (app.got_subcommand("train-world")) return cmd_train_world(rc, stage, resume);
        if (app.got_subcommand("train-reward")) return cmd_train_reward(rc);
        if (app.got_subcommand("optimize")) return cmd_optimize(rc, paradigm);
        if (app.got_subcommand("eval")) return cmd_eval(rc, policy_path, with_ttpa, tag);
        if (app.got_subcommand("report")) return cmd_report(rc);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
