#pragma once

// Unified world-model-based policy optimization: a diagonal-Gaussian policy
// with closed-form log-densities, group-relative advantages with a clipped
// importance-ratio objective and KL penalty, perceptual-imitation rewards
// (IEPL), clip-discriminator rewards with temporally increasing weights
// (OEPL), and pre-execution gating (TTPA).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <mutex>
#include <thread>
#include <vector>

#include "dualflow/checkpoint.hpp"
#include "dualflow/geometry.hpp"
#include "dualflow/microenv.hpp"
#include "dualflow/optim.hpp"
#include "dualflow/rng.hpp"
#include "dualflow/tensor.hpp"
#include "dualflow/worldmodel.hpp"

namespace dualflow::rl {

using geom::ActionVector;
using geom::Image;

// ---------------------------------------------------------------------------
// policy

/// Small flattened trunk over the RGB observation plus a task embedding,
/// with a per-dimension mean head and state-independent log-standard
/// deviations. The temperature multiplies the standard deviation in both
/// sampling and density evaluation.
class GaussianPolicy {
public:
    static constexpr int kActionDim = 7;

    GaussianPolicy() = default;

    GaussianPolicy(int frame_size, int n_tasks, uint64_t seed, int hidden = 64)
        : frame_size_(frame_size), obs_dim_(frame_size * frame_size * 3), hidden_(hidden) {
        SeededRng rng(hash_combine(seed, 0x706f6cULL));
        w1_ = Tensor::randn({obs_dim_, hidden}, rng, std::sqrt(2.0 / (obs_dim_ + hidden)), true);
        b1_ = Tensor::zeros({hidden}, true);
        task_ = Tensor::randn({n_tasks, hidden}, rng, 0.1, true);
        w2_ = Tensor::randn({hidden, hidden}, rng, std::sqrt(2.0 / (2 * hidden)), true);
        b2_ = Tensor::zeros({hidden}, true);
        wm_ = Tensor::randn({hidden, kActionDim}, rng, 0.01, true);
        bm_ = Tensor::zeros({kActionDim}, true);
        logstd_ = Tensor::full({kActionDim}, std::log(0.3), true);
    }

    bool defined() const { return w1_.defined(); }
    double temperature() const { return temperature_; }
    void set_temperature(double t) { temperature_ = t; }
    int frame_size() const { return frame_size_; }

    Tensor mean_graph(const Image& obs, int task) const {
        std::vector<double> x(obs.rgb.size());
        for (size_t i = 0; i < x.size(); ++i) x[i] = 2.0 * (obs.rgb[i] - 0.5);
        Tensor in = Tensor::from_data({1, obs_dim_}, std::move(x));
        Tensor h1 = silu(add(add(matmul(in, w1_), reshape(b1_, {1, hidden_})),
                             slice(task_, 0, task, task + 1)));
        Tensor h2 = silu(add(matmul(h1, w2_), reshape(b2_, {1, hidden_})));
        return add(matmul(h2, wm_), reshape(bm_, {1, kActionDim}));  // [1, 7]
    }

    /// Effective stddev: exp(clamped log-std) times temperature.
    Tensor std_graph() const {
        return mul_scalar(exp_op(clamp(logstd_, -5.0, 1.5)), temperature_);
    }

    /// Diagonal-Gaussian log-density of a normalized action, as a graph.
    Tensor logprob_graph(const Image& obs, int task, const ActionVector& action) const {
        const auto arr = action.to_array();
        Tensor a = Tensor::from_data({1, kActionDim}, {arr.begin(), arr.end()});
        Tensor mu = mean_graph(obs, task);
        Tensor sigma = reshape(std_graph(), {1, kActionDim});
        Tensor zscore = div(sub(a, mu), sigma);
        Tensor terms = add(mul_scalar(mul(zscore, zscore), 0.5), log_op(sigma));
        return neg(add_scalar(sum_all(terms), 0.5 * kActionDim * std::log(2.0 * M_PI)));
    }

    double logprob(const Image& obs, int task, const ActionVector& action) const {
        NoGradGuard ng;
        return logprob_graph(obs, task, action).value();
    }

    /// Draws a normalized action and returns its log-density.
    std::pair<ActionVector, double> sample(const Image& obs, int task, SeededRng& rng) const {
        NoGradGuard ng;
        Tensor mu = mean_graph(obs, task);
        Tensor sigma = std_graph();
        std::array<double, kActionDim> arr{};
        for (int d = 0; d < kActionDim; ++d)
            arr[d] = mu.data()[d] + sigma.data()[d] * rng.normal();
        ActionVector a = ActionVector::from_array(arr);
        return {a, logprob(obs, task, a)};
    }

    GaussianPolicy clone() const {
        GaussianPolicy c;
        c.frame_size_ = frame_size_;
        c.obs_dim_ = obs_dim_;
        c.hidden_ = hidden_;
        c.temperature_ = temperature_;
        c.w1_ = w1_.detach(true);
        c.b1_ = b1_.detach(true);
        c.task_ = task_.detach(true);
        c.w2_ = w2_.detach(true);
        c.b2_ = b2_.detach(true);
        c.wm_ = wm_.detach(true);
        c.bm_ = bm_.detach(true);
        c.logstd_ = logstd_.detach(true);
        return c;
    }

    ParamMap params() const {
        return {{"policy.w1", w1_}, {"policy.b1", b1_}, {"policy.task", task_},
                {"policy.w2", w2_}, {"policy.b2", b2_}, {"policy.wm", wm_},
                {"policy.bm", bm_}, {"policy.logstd", logstd_}};
    }

    void save(const std::string& path) const { save_checkpoint(path, params()); }
    void load(const std::string& path) { restore_params(load_checkpoint(path), params()); }

    wm::PolicySampler sampler() const {
        return [this](const Image& obs, int task, SeededRng& rng) {
            return sample(obs, task, rng);
        };
    }

private:
    int frame_size_ = 32;
    int obs_dim_ = 32 * 32 * 3;
    int hidden_ = 64;
    double temperature_ = 1.6;
    Tensor w1_, b1_, task_, w2_, b2_, wm_, bm_, logstd_;
};

// ---------------------------------------------------------------------------
// rewards

/// L2 distance averaged over a 3-level mean-pool pyramid (full, 1/2, 1/4
/// resolution); levels weighted equally. Symmetric, zero iff identical.
inline double perceptual_distance(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw std::invalid_argument("perceptual_distance: frame shapes differ, " +
                                    std::to_string(a.width) + "x" + std::to_string(a.height) +
                                    " vs " + std::to_string(b.width) + "x" +
                                    std::to_string(b.height));
    auto level_rms = [](const std::vector<double>& x, const std::vector<double>& y) {
        double s = 0;
        for (size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
        return std::sqrt(s / x.size());
    };
    auto downsample = [](const std::vector<double>& src, int h, int w) {
        std::vector<double> dst(static_cast<size_t>(h / 2) * (w / 2) * 3, 0.0);
        for (int v = 0; v < h / 2; ++v)
            for (int u = 0; u < w / 2; ++u)
                for (int c = 0; c < 3; ++c) {
                    double acc = 0;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            acc += src[((static_cast<size_t>(2 * v + dy) * w) + 2 * u + dx) * 3 + c];
                    dst[((static_cast<size_t>(v) * (w / 2)) + u) * 3 + c] = acc / 4.0;
                }
        return dst;
    };
    double total = level_rms(a.rgb, b.rgb);
    std::vector<double> xa = a.rgb, xb = b.rgb;
    int h = a.height, w = a.width;
    for (int level = 1; level < 3; ++level) {
        xa = downsample(xa, h, w);
        xb = downsample(xb, h, w);
        h /= 2;
        w /= 2;
        total += level_rms(xa, xb);
    }
    return total / 3.0;
}

using DistanceFn = std::function<double(const Image&, const Image&)>;

/// Negative accumulated perceptual distance between corresponding frames of
/// two videos rendered from the same camera. discount = 1 gives the plain
/// sum; mean_mode divides by the frame count.
inline double iepl_reward(const std::vector<Image>& policy_video,
                          const std::vector<Image>& expert_video, const DistanceFn& dist,
                          double discount = 1.0, bool mean_mode = false) {
    if (policy_video.size() != expert_video.size())
        throw std::invalid_argument("iepl_reward: video lengths differ, " +
                                    std::to_string(policy_video.size()) + " vs " +
                                    std::to_string(expert_video.size()));
    double total = 0;
    double weight = 1.0;
    for (size_t t = 0; t < policy_video.size(); ++t) {
        total += weight * dist(policy_video[t], expert_video[t]);
        weight *= discount;
    }
    if (mean_mode && !policy_video.empty()) total /= static_cast<double>(policy_video.size());
    return -total;
}

/// Scores clips of L consecutive frames at the configured stride.
using ClipRewardFn = std::function<double(const std::vector<Image>&, int task)>;

struct OeplRewardConfig {
    int clip_len = 6;
    int clip_stride = 3;
    double beta = 0.5;  // temporally increasing weights; 0 gives uniform
    ClipRewardFn reward_model;
};

inline std::vector<double> oepl_clip_rewards(const std::vector<Image>& video, int task,
                                             const OeplRewardConfig& cfg) {
    if (static_cast<int>(video.size()) < cfg.clip_len)
        throw std::invalid_argument("oepl_clip_rewards: video of " +
                                    std::to_string(video.size()) + " frames is shorter than L=" +
                                    std::to_string(cfg.clip_len));
    std::vector<double> out;
    for (int start = 0; start + cfg.clip_len <= static_cast<int>(video.size());
         start += cfg.clip_stride) {
        std::vector<Image> clip(video.begin() + start, video.begin() + start + cfg.clip_len);
        out.push_back(std::clamp(cfg.reward_model(clip, task), 0.0, 1.0));
    }
    return out;
}

/// Softmax-over-index weights w_i proportional to exp(beta * i).
inline std::vector<double> oepl_weights(int n, double beta) {
    if (n < 1) throw std::invalid_argument("oepl_weights: need at least one clip");
    std::vector<double> w(n);
    double mx = beta * n;
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        w[i] = std::exp(beta * (i + 1) - mx);
        sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
}

inline double oepl_return(const std::vector<double>& clip_rewards, double beta) {
    if (clip_rewards.empty()) throw std::invalid_argument("oepl_return: no clip rewards");
    const auto w = oepl_weights(static_cast<int>(clip_rewards.size()), beta);
    double r = 0;
    for (size_t i = 0; i < w.size(); ++i) r += w[i] * clip_rewards[i];
    return r;
}

// ---------------------------------------------------------------------------
// GRPO

struct GrpoConfig {
    int group_size = 8;
    double clip_low = 0.20;
    double clip_high = 0.28;
    double kl_weight = 0.01;
    double lr = 5e-6;
    double temperature = 1.6;
    int batch_size = 64;      // caps trajectories consumed per optimization pass
    int mini_batch = 128;     // caps states in the KL average
    double discount = 1.0;
    bool mean_reward = false;
    int epochs_per_group = 4;
};

/// Group-normalized advantages with population statistics; a group with
/// (near-)equal returns yields all-zero advantages.
inline std::vector<double> group_advantages(const std::vector<double>& returns) {
    if (returns.size() < 2)
        throw std::invalid_argument("group_advantages: need a group of at least 2");
    const double k = static_cast<double>(returns.size());
    double mu = 0;
    for (double r : returns) mu += r;
    mu /= k;
    double var = 0;
    for (double r : returns) var += (r - mu) * (r - mu);
    const double sigma = std::sqrt(var / k);
    std::vector<double> adv(returns.size(), 0.0);
    if (sigma < 1e-8) return adv;
    for (size_t i = 0; i < returns.size(); ++i) adv[i] = (returns[i] - mu) / sigma;
    return adv;
}

struct TrajectoryRecord {
    std::vector<Image> obs;                  // observation used at each step
    std::vector<ActionVector> actions_norm;  // sampled normalized actions
    std::vector<double> logprobs_old;        // densities at sampling time
    double ret = 0.0;
    int task = 0;
};

struct GroupBatch {
    std::vector<TrajectoryRecord> trajectories;
    std::vector<double> advantages;
};

/// Closed-form KL(N(mu_t, s_t) || N(mu_r, s_r)) summed over dimensions.
inline Tensor gaussian_kl(const Tensor& mu_t, const Tensor& sigma_t, const Tensor& mu_r,
                          const Tensor& sigma_r) {
    Tensor var_ratio = div(mul(sigma_t, sigma_t), mul(sigma_r, sigma_r));
    Tensor mean_term = div(mul(sub(mu_t, mu_r), sub(mu_t, mu_r)), mul(sigma_r, sigma_r));
    Tensor log_term = sub(log_op(sigma_r), log_op(sigma_t));
    return sum_all(add(log_term, add_scalar(mul_scalar(add(var_ratio, mean_term), 0.5), -0.5)));
}

struct GrpoObjectiveOut {
    Tensor loss;           // graph, ready for backward
    double surrogate = 0;  // mean clipped surrogate (diagnostic)
    double kl = 0;
    int dropped = 0;       // trajectories discarded for non-finite ratios
};

/// Clipped-ratio surrogate over trajectory-level importance ratios plus a
/// closed-form Gaussian KL penalty averaged over visited states. Trajectories
/// with non-finite ratios are dropped and the group renormalized.
inline GrpoObjectiveOut grpo_objective(const GroupBatch& group, const GaussianPolicy& policy,
                                       const GaussianPolicy& ref_policy, const GrpoConfig& cfg) {
    if (group.trajectories.size() != group.advantages.size())
        throw std::invalid_argument("grpo_objective: advantage count mismatch");
    // screen ratios without building graphs
    std::vector<size_t> keep;
    std::vector<double> kept_returns;
    {
        NoGradGuard ng;
        for (size_t k = 0; k < group.trajectories.size(); ++k) {
            const auto& tr = group.trajectories[k];
            double delta = 0;
            for (size_t t = 0; t < tr.actions_norm.size(); ++t)
                delta += policy.logprob(tr.obs[t], tr.task, tr.actions_norm[t]) -
                         tr.logprobs_old[t];
            if (std::isfinite(std::exp(delta))) {
                keep.push_back(k);
                kept_returns.push_back(tr.ret);
            }
        }
    }
    GrpoObjectiveOut out;
    out.dropped = static_cast<int>(group.trajectories.size() - keep.size());
    if (keep.size() < 2) throw std::invalid_argument("grpo_objective: group collapsed");
    std::vector<double> adv = group.advantages;
    if (out.dropped > 0) {
        std::cerr << "grpo: dropped " << out.dropped << " trajectories with non-finite ratios\n";
        adv = group_advantages(kept_returns);
    } else {
        std::vector<double> kept_adv;
        for (size_t i : keep) kept_adv.push_back(group.advantages[i]);
        adv = kept_adv;
    }

    Tensor surrogate_sum = Tensor::scalar(0.0);
    Tensor kl_sum = Tensor::scalar(0.0);
    int n_states = 0;
    const int max_traj = std::min<int>(static_cast<int>(keep.size()), cfg.batch_size);
    for (int i = 0; i < max_traj; ++i) {
        const auto& tr = group.trajectories[keep[i]];
        Tensor delta = Tensor::scalar(0.0);
        double old_sum = 0;
        for (size_t t = 0; t < tr.actions_norm.size(); ++t) {
            delta = add(delta, policy.logprob_graph(tr.obs[t], tr.task, tr.actions_norm[t]));
            old_sum += tr.logprobs_old[t];
        }
        Tensor rho = exp_op(clamp(add_scalar(delta, -old_sum), -60.0, 60.0));
        Tensor clipped = clamp(rho, 1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
        Tensor surr = minimum(mul_scalar(rho, adv[i]), mul_scalar(clipped, adv[i]));
        surrogate_sum = add(surrogate_sum, surr);
        // KL against the reference, over this trajectory's visited states
        for (size_t t = 0; t < tr.obs.size() && n_states < cfg.mini_batch; ++t) {
            Tensor mu_r, sigma_r;
            {
                NoGradGuard ng;  // the reference side carries no gradient
                mu_r = ref_policy.mean_graph(tr.obs[t], tr.task);
                sigma_r = reshape(ref_policy.std_graph(), {1, GaussianPolicy::kActionDim});
            }
            Tensor mu_t = policy.mean_graph(tr.obs[t], tr.task);
            Tensor sigma_t = reshape(policy.std_graph(), {1, GaussianPolicy::kActionDim});
            kl_sum = add(kl_sum, gaussian_kl(mu_t, sigma_t, mu_r, sigma_r));
            ++n_states;
        }
    }
    Tensor mean_surr = mul_scalar(surrogate_sum, 1.0 / max_traj);
    Tensor mean_kl = n_states > 0 ? mul_scalar(kl_sum, 1.0 / n_states) : Tensor::scalar(0.0);
    out.loss = add(neg(mean_surr), mul_scalar(mean_kl, cfg.kl_weight));
    out.surrogate = mean_surr.value();
    out.kl = mean_kl.value();
    return out;
}

// ---------------------------------------------------------------------------
// TTPA

struct TtpaConfig {
    double delta_safe = 0.5;
    int max_replans = 3;
    int horizon = 8;  // action chunk length verified per decision

    void validate() const {
        if (delta_safe < 0.0 || delta_safe > 1.0)
            throw std::invalid_argument("ttpa: delta_safe must lie in [0, 1]");
        if (max_replans < 0) throw std::invalid_argument("ttpa: max_replans must be >= 0");
    }
};

enum class TtpaDecision { kExecute, kReplan };

/// Execute only on strict confidence: c > delta_safe.
inline TtpaDecision ttpa_decide(double confidence, const TtpaConfig& cfg) {
    cfg.validate();
    if (!(confidence >= 0.0 && confidence <= 1.0))
        throw std::invalid_argument("ttpa_decide: confidence must lie in [0, 1]");
    return confidence > cfg.delta_safe ? TtpaDecision::kExecute : TtpaDecision::kReplan;
}

/// Scores an imagined video; plugs in the trained clip model by default but
/// accepts any scorer (for oracle-gating tests).
using TrajectoryEvaluator = std::function<double(const std::vector<Image>&, int task)>;

struct TtpaCandidate {
    uint64_t seed = 0;
    double confidence = 0;
    bool executed = false;
};

struct TtpaStepResult {
    std::vector<ActionVector> actions_norm;  // the chunk chosen for execution
    std::vector<TtpaCandidate> audit;        // one record per candidate
    int replans = 0;
    bool fallback = false;  // no candidate passed; best one executed
};

/// Samples candidate chunks from the policy, imagines each with the world
/// model, scores with the evaluator, and executes the first passing chunk.
/// After max_replans failures the highest-confidence candidate runs.
inline TtpaStepResult ttpa_step(const GaussianPolicy& policy, const dit::ModelBundle& bundle,
                                const TrajectoryEvaluator& evaluator, const wm::FramePair& state,
                                int task, const TtpaConfig& cfg, const wm::RolloutConfig& rollout,
                                uint64_t seed) {
    cfg.validate();
    TtpaStepResult out;
    std::vector<std::vector<ActionVector>> candidates;
    double best_conf = -1;
    int best_idx = -1;
    for (int attempt = 0; attempt <= cfg.max_replans; ++attempt) {
        const uint64_t cand_seed = hash_combine(seed, static_cast<uint64_t>(attempt));
        SeededRng rng(cand_seed);
        std::vector<ActionVector> chunk_norm;
        std::vector<ActionVector> chunk_raw;
        for (int i = 0; i < cfg.horizon; ++i) {
            auto [a, lp] = policy.sample(state.rgb, task, rng);
            chunk_norm.push_back(a);
            chunk_raw.push_back(geom::denormalize_action(a, bundle.action_stats));
        }
        wm::RolloutConfig rc = rollout;
        rc.seed = hash_combine(cand_seed, 0x774dULL);
        auto traj = wm::autoregressive_rollout(bundle, state, chunk_raw, task, rc);
        std::vector<Image> video;
        video.reserve(traj.frames.size());
        for (const auto& f : traj.frames) video.push_back(f.rgb);
        const double conf = std::clamp(evaluator(video, task), 0.0, 1.0);
        candidates.push_back(chunk_norm);
        const bool execute = ttpa_decide(conf, cfg) == TtpaDecision::kExecute;
        out.audit.push_back({cand_seed, conf, execute});
        if (conf > best_conf) {
            best_conf = conf;
            best_idx = attempt;
        }
        if (execute) {
            out.actions_norm = std::move(chunk_norm);
            out.replans = attempt;
            return out;
        }
        out.replans = attempt;
    }
    out.fallback = true;
    out.actions_norm = candidates[best_idx];
    out.audit[best_idx].executed = true;
    return out;
}

// ---------------------------------------------------------------------------
// shared trainer plumbing

struct PolicyCurveRow {
    int iteration = 0;
    double mean_return = 0;
    double std_return = 0;
    double loss = 0;
    double kl = 0;
};

struct OptimizeResult {
    std::vector<PolicyCurveRow> curve;
    int rollouts_used = 0;
    bool partial_group_dropped = false;
};

namespace detail {

/// Index-parallel loop; each index gets deterministic work, results land by
/// index, so the thread count never changes the outcome. The first worker
/// exception is rethrown on the calling thread.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    for (int w = 0; w < std::min(threads, n); ++w)
        pool.emplace_back([&] {
            try {
                for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
                next.store(n);  // drain remaining work
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

inline wm::FramePair frame_pair_of(const env::EnvState& s, const env::RenderSpec& spec) {
    env::RenderOut r = env::render(s, spec);
    wm::FramePair fp;
    fp.rgb = std::move(r.rgb);
    fp.pm = geom::build_pointmap(r.depth, spec.size, spec.size, spec.camera.k, spec.camera.ext);
    return fp;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// behavior cloning

struct BcConfig {
    int steps = 1500;
    int batch_size = 16;
    double lr = 1e-3;
    uint64_t seed = 0;
    /// Averaging window for the regression target. With open-loop execution
    /// of k-action chunks, targets averaged over the next k steps reproduce
    /// the demonstrated displacement when the mean action is repeated.
    int target_window = 1;
    bool successful_only = false;
};

/// Gaussian negative log-likelihood regression of dataset actions given the
/// preceding frame; fits both the mean head and the log-stds. Translation
/// and rotation targets are averaged over the window; the width command is
/// taken from the window's first step.
inline void bc_train(GaussianPolicy& policy, const env::DemoDataset& ds,
                     const geom::ActionStats& stats, const BcConfig& cfg) {
    if (ds.episodes.empty()) throw std::invalid_argument("bc_train: empty dataset");
    std::vector<size_t> usable;
    for (size_t e = 0; e < ds.episodes.size(); ++e)
        if (!cfg.successful_only || ds.episodes[e].success_flag) usable.push_back(e);
    if (usable.empty()) throw std::invalid_argument("bc_train: no usable episodes");
    std::vector<env::RenderOut> initial;
    initial.reserve(ds.episodes.size());
    for (const auto& ep : ds.episodes) initial.push_back(env::render(ep.initial_state, ds.spec));
    Adam opt({.lr = cfg.lr});
    const ParamMap params = policy.params();
    for (int stepi = 0; stepi < cfg.steps; ++stepi) {
        SeededRng rng(hash_combine(hash_combine(cfg.seed, 0x6263ULL), stepi));
        Adam::zero_grads(params);
        Tensor loss = Tensor::scalar(0.0);
        for (int b = 0; b < cfg.batch_size; ++b) {
            const size_t e = usable[static_cast<size_t>(rng.below(usable.size()))];
            const auto& ep = ds.episodes[e];
            const int t = static_cast<int>(rng.below(static_cast<int64_t>(ep.actions.size())));
            const Image& obs = (t == 0) ? initial[e].rgb : ep.frames[t - 1];
            std::array<double, 7> acc{};
            const int window =
                std::min<int>(cfg.target_window, static_cast<int>(ep.actions.size()) - t);
            for (int i = 0; i < window; ++i) {
                const auto arr = ep.actions[t + i].to_array();
                for (int d = 0; d < 6; ++d) acc[d] += arr[d] / window;
            }
            acc[6] = ep.actions[t].gripper_width;
            const ActionVector target =
                geom::normalize_action(ActionVector::from_array(acc), stats);
            loss = add(loss, neg(policy.logprob_graph(obs, ep.initial_state.task, target)));
        }
        loss = mul_scalar(loss, 1.0 / cfg.batch_size);
        loss.backward();
        opt.step(params);
    }
}

// ---------------------------------------------------------------------------
// IEPL

struct IeplConfig {
    GrpoConfig grpo;
    int horizon = 24;
    int rollout_budget = 128;  // policy rollouts consumed in the world model
    int sampler_steps = 4;
    int feedback_stride = 8;
    uint64_t seed = 0;
    int threads = 2;
    std::vector<geom::Camera> cameras;
    DistanceFn distance = perceptual_distance;
};

/// Alternates imagined policy/expert rollout pairs rendered from a shared
/// camera, perceptual-imitation rewards, and GRPO updates.
inline OptimizeResult iepl_train(GaussianPolicy& policy, const dit::ModelBundle& bundle,
                                 const env::DemoDataset& demos, const IeplConfig& cfg) {
    if (demos.episodes.empty()) throw std::invalid_argument("iepl_train: no expert demos");
    // imitate successful episodes only; failed rollouts are not demonstrations
    std::vector<size_t> demo_idx;
    for (size_t e = 0; e < demos.episodes.size(); ++e)
        if (demos.episodes[e].success_flag) demo_idx.push_back(e);
    if (demo_idx.empty())
        throw std::invalid_argument("iepl_train: dataset has no successful episodes to imitate");
    const int iterations = cfg.rollout_budget / cfg.grpo.group_size;
    OptimizeResult result;
    result.partial_group_dropped = (cfg.rollout_budget % cfg.grpo.group_size) != 0;
    GaussianPolicy ref = policy.clone();  // frozen snapshot before optimization
    Adam opt({.lr = cfg.grpo.lr});
    const ParamMap params = policy.params();
    const auto cameras = cfg.cameras.empty() ? std::vector<geom::Camera>{demos.spec.camera}
                                             : cfg.cameras;
    for (int it = 0; it < iterations; ++it) {
        const int k_group = cfg.grpo.group_size;
        GroupBatch group;
        group.trajectories.resize(k_group);
        std::vector<double> returns(k_group, 0.0);
        GaussianPolicy rollout_policy = policy.clone();  // pi_old for this iteration
        detail::parallel_for(k_group, cfg.threads, [&](int k) {
            const uint64_t traj_seed =
                hash_combine(hash_combine(cfg.seed, static_cast<uint64_t>(it)),
                             static_cast<uint64_t>(k));
            SeededRng pick(hash_combine(traj_seed, 0x646174ULL));
            const auto& ep = demos.episodes[demo_idx[static_cast<size_t>(
                pick.below(static_cast<int64_t>(demo_idx.size())))]];
            const geom::Camera& cam = cameras[static_cast<size_t>(pick.below(cameras.size()))];
            wm::FramePair s0 = detail::frame_pair_of(ep.initial_state, demos.spec);
            const int task = ep.initial_state.task;
            // expert rollout under its recorded actions
            std::vector<ActionVector> expert_actions(
                ep.actions.begin(), ep.actions.begin() + std::min<size_t>(cfg.horizon, ep.actions.size()));
            wm::RolloutConfig rc;
            rc.sampler_steps = cfg.sampler_steps;
            rc.feedback_stride = cfg.feedback_stride;
            rc.seed = hash_combine(traj_seed, 0x657870ULL);
            auto expert_traj = wm::autoregressive_rollout(bundle, s0, expert_actions, task, rc);
            // policy rollout, closed loop
            rc.seed = hash_combine(traj_seed, 0x706f6cULL);
            auto rollout = wm::policy_in_the_loop_rollout(bundle, rollout_policy.sampler(), s0,
                                                          task, static_cast<int>(expert_actions.size()), rc);
            auto policy_video = wm::render_trajectory(rollout.traj, cam);
            auto expert_video = wm::render_trajectory(expert_traj, cam);
            returns[k] = iepl_reward(policy_video, expert_video, cfg.distance, cfg.grpo.discount,
                                     cfg.grpo.mean_reward);
            TrajectoryRecord rec;
            rec.obs = std::move(rollout.obs);
            rec.actions_norm = std::move(rollout.actions_norm);
            rec.logprobs_old = std::move(rollout.logprobs);
            rec.ret = returns[k];
            rec.task = task;
            group.trajectories[k] = std::move(rec);
        });
        result.rollouts_used += k_group;
        group.advantages = group_advantages(returns);
        double mu = 0, var = 0;
        for (double r : returns) mu += r / k_group;
        for (double r : returns) var += (r - mu) * (r - mu) / k_group;
        PolicyCurveRow row;
        row.iteration = it;
        row.mean_return = mu;
        row.std_return = std::sqrt(var);
        for (int epoch = 0; epoch < cfg.grpo.epochs_per_group; ++epoch) {
            Adam::zero_grads(params);
            auto obj = grpo_objective(group, policy, ref, cfg.grpo);
            obj.loss.backward();
            opt.step(params);
            row.loss = obj.loss.value();
            row.kl = obj.kl;
        }
        result.curve.push_back(row);
    }
    return result;
}

// ---------------------------------------------------------------------------
// OEPL

struct OeplConfig {
    GrpoConfig grpo;
    OeplRewardConfig reward;
    int horizon = 24;
    int rollout_budget = 128;
    int sampler_steps = 4;
    int feedback_stride = 8;
    uint64_t seed = 0;
    int threads = 2;
};

/// Open exploration: policy-in-the-loop rollouts scored by the clip reward
/// model with temporally increasing weights, then GRPO updates.
inline OptimizeResult oepl_train(GaussianPolicy& policy, const dit::ModelBundle& bundle,
                                 const OeplConfig& cfg) {
    if (!cfg.reward.reward_model) throw std::invalid_argument("oepl_train: no reward model");
    if (cfg.horizon < cfg.reward.clip_len)
        throw std::invalid_argument("oepl_train: horizon " + std::to_string(cfg.horizon) +
                                    " is shorter than one clip of " +
                                    std::to_string(cfg.reward.clip_len));
    const int iterations = cfg.rollout_budget / cfg.grpo.group_size;
    OptimizeResult result;
    result.partial_group_dropped = (cfg.rollout_budget % cfg.grpo.group_size) != 0;
    GaussianPolicy ref = policy.clone();
    Adam opt({.lr = cfg.grpo.lr});
    const ParamMap params = policy.params();
    env::RenderSpec spec = env::default_render_spec(policy.frame_size());
    for (int it = 0; it < iterations; ++it) {
        const int k_group = cfg.grpo.group_size;
        GroupBatch group;
        group.trajectories.resize(k_group);
        std::vector<double> returns(k_group, 0.0);
        GaussianPolicy rollout_policy = policy.clone();
        detail::parallel_for(k_group, cfg.threads, [&](int k) {
            const uint64_t traj_seed =
                hash_combine(hash_combine(hash_combine(cfg.seed, 0x6f65ULL),
                                          static_cast<uint64_t>(it)),
                             static_cast<uint64_t>(k));
            SeededRng init_rng(hash_combine(traj_seed, 0x737461ULL));
            env::EnvState s = env::random_initial_state(init_rng);
            wm::FramePair s0 = detail::frame_pair_of(s, spec);
            wm::RolloutConfig rc;
            rc.sampler_steps = cfg.sampler_steps;
            rc.feedback_stride = cfg.feedback_stride;
            rc.seed = hash_combine(traj_seed, 0x706f6cULL);
            auto rollout = wm::policy_in_the_loop_rollout(bundle, rollout_policy.sampler(), s0,
                                                          s.task, cfg.horizon, rc);
            std::vector<Image> video;
            video.reserve(rollout.traj.frames.size());
            for (const auto& f : rollout.traj.frames) video.push_back(f.rgb);
            returns[k] = oepl_return(oepl_clip_rewards(video, s.task, cfg.reward), cfg.reward.beta);
            TrajectoryRecord rec;
            rec.obs = std::move(rollout.obs);
            rec.actions_norm = std::move(rollout.actions_norm);
            rec.logprobs_old = std::move(rollout.logprobs);
            rec.ret = returns[k];
            rec.task = s.task;
            group.trajectories[k] = std::move(rec);
        });
        result.rollouts_used += k_group;
        group.advantages = group_advantages(returns);
        double mu = 0, var = 0;
        for (double r : returns) mu += r / k_group;
        for (double r : returns) var += (r - mu) * (r - mu) / k_group;
        PolicyCurveRow row;
        row.iteration = it;
        row.mean_return = mu;
        row.std_return = std::sqrt(var);
        for (int epoch = 0; epoch < cfg.grpo.epochs_per_group; ++epoch) {
            Adam::zero_grads(params);
            auto obj = grpo_objective(group, policy, ref, cfg.grpo);
            obj.loss.backward();
            opt.step(params);
            row.loss = obj.loss.value();
            row.kl = obj.kl;
        }
        result.curve.push_back(row);
    }
    return result;
}

// ---------------------------------------------------------------------------
// true-environment evaluation

struct EvalConfig {
    int n_episodes = 128;
    int horizon = 48;
    int feedback_stride = 8;
    uint64_t seed = 0;
    int threads = 2;
    bool with_ttpa = false;
    TtpaConfig ttpa;
    int sampler_steps = 4;
    /// Test hook: when set, TTPA gating scores candidate chunks with this
    /// ground-truth oracle instead of imagined rollouts.
    std::function<double(const env::EnvState&, const std::vector<ActionVector>& chunk_norm)>
        oracle_gate;
};

struct TtpaEpisodeAudit {
    int episode = 0;
    int step = 0;
    std::vector<TtpaCandidate> candidates;
    bool fallback = false;
};

struct EvalResult {
    std::vector<uint8_t> per_episode;
    double success_rate = 0;
    std::vector<TtpaEpisodeAudit> audits;
};

/// Runs the policy in the true environment at the configured query cadence,
/// optionally gating every chunk through TTPA with imagined rollouts.
/// Success is measured on the final state.
inline EvalResult evaluate_policy(const GaussianPolicy& policy, const geom::ActionStats& stats,
                                  const env::RenderSpec& spec, const EvalConfig& cfg,
                                  const dit::ModelBundle* bundle = nullptr,
                                  const TrajectoryEvaluator* evaluator = nullptr) {
    if (cfg.with_ttpa && !cfg.oracle_gate && (!bundle || !evaluator))
        throw std::invalid_argument("evaluate_policy: TTPA needs a world model and evaluator");
    EvalResult result;
    result.per_episode.assign(cfg.n_episodes, 0);
    std::vector<std::vector<TtpaEpisodeAudit>> audits(cfg.n_episodes);
    detail::parallel_for(cfg.n_episodes, cfg.threads, [&](int e) {
        const uint64_t ep_seed = hash_combine(hash_combine(cfg.seed, 0x6576ULL),
                                              static_cast<uint64_t>(e));
        SeededRng rng(ep_seed);
        env::EnvState s = env::random_initial_state(rng);
        for (int q = 0; q < cfg.horizon; q += cfg.feedback_stride) {
            const int n_actions = std::min(cfg.feedback_stride, cfg.horizon - q);
            std::vector<ActionVector> chunk_norm;
            if (cfg.with_ttpa && cfg.oracle_gate) {
                // ground-truth gating: same decision rule, oracle confidence
                const Image obs = env::render(s, spec).rgb;
                const uint64_t gate_seed = hash_combine(ep_seed, static_cast<uint64_t>(q));
                double best_conf = -1;
                std::vector<ActionVector> best;
                TtpaEpisodeAudit audit;
                audit.episode = e;
                audit.step = q;
                for (int attempt = 0; attempt <= cfg.ttpa.max_replans; ++attempt) {
                    const uint64_t cand_seed = hash_combine(gate_seed, static_cast<uint64_t>(attempt));
                    SeededRng crng(cand_seed);
                    std::vector<ActionVector> cand;
                    for (int i = 0; i < n_actions; ++i)
                        cand.push_back(policy.sample(obs, s.task, crng).first);
                    const double conf = std::clamp(cfg.oracle_gate(s, cand), 0.0, 1.0);
                    const bool execute = ttpa_decide(conf, cfg.ttpa) == TtpaDecision::kExecute;
                    audit.candidates.push_back({cand_seed, conf, execute});
                    if (conf > best_conf) {
                        best_conf = conf;
                        best = cand;
                    }
                    if (execute) {
                        chunk_norm = std::move(cand);
                        break;
                    }
                }
                if (chunk_norm.empty()) {
                    chunk_norm = std::move(best);
                    audit.fallback = true;
                }
                audits[e].push_back(std::move(audit));
            } else if (cfg.with_ttpa) {
                wm::FramePair fp = detail::frame_pair_of(s, spec);
                wm::RolloutConfig rc;
                rc.sampler_steps = cfg.sampler_steps;
                rc.feedback_stride = cfg.feedback_stride;
                TtpaConfig tc = cfg.ttpa;
                tc.horizon = n_actions;
                TtpaStepResult step_res =
                    ttpa_step(policy, *bundle, *evaluator, fp, s.task, tc, rc,
                              hash_combine(ep_seed, static_cast<uint64_t>(q)));
                chunk_norm = std::move(step_res.actions_norm);
                TtpaEpisodeAudit audit;
                audit.episode = e;
                audit.step = q;
                audit.candidates = std::move(step_res.audit);
                audit.fallback = step_res.fallback;
                audits[e].push_back(std::move(audit));
            } else {
                const Image obs = env::render(s, spec).rgb;
                SeededRng arng(hash_combine(ep_seed, static_cast<uint64_t>(q)));
                for (int i = 0; i < n_actions; ++i)
                    chunk_norm.push_back(policy.sample(obs, s.task, arng).first);
            }
            for (const auto& a : chunk_norm)
                s = env::step(s, geom::denormalize_action(a, stats));
        }
        result.per_episode[e] = env::success(s, s.task) ? 1 : 0;
    });
    int wins = 0;
    for (uint8_t v : result.per_episode) wins += v;
    result.success_rate = static_cast<double>(wins) / cfg.n_episodes;
    for (auto& a : audits)
        for (auto& rec : a) result.audits.push_back(std::move(rec));
    return result;
}

}  // namespace dualflow::rl
