#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dualflow/tensor.hpp"

namespace dualflow {

/// Named parameter list; iteration order is construction order and is part
/// of the determinism contract.
using ParamMap = std::vector<std::pair<std::string, Tensor>>;

inline Tensor find_param(const ParamMap& params, const std::string& name) {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    tensor_fail("find_param: no parameter named " + name);
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled decay, applied with the update
};

/// Adaptive-moment gradient descent. Moments live here keyed by parameter
/// name so they can be checkpointed alongside the weights.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    AdamConfig& config() { return cfg_; }
    const AdamConfig& config() const { return cfg_; }
    int64_t step_count() const { return t_; }
    void set_step_count(int64_t t) { t_ = t; }

    /// Applies one update from the accumulated leaf gradients, then leaves
    /// the gradients untouched (callers zero them between steps).
    void step(const ParamMap& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (const auto& [name, param] : params) {
            Tensor p = param;
            if (p.grad().empty()) continue;  // parameter untouched by this loss
            auto& m = moment(m_, name, p.numel());
            auto& v = moment(v_, name, p.numel());
            const auto& g = p.grad();
            auto& w = p.mutable_data();
            for (size_t i = 0; i < w.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
            }
        }
    }

    static void zero_grads(const ParamMap& params) {
        for (const auto& [name, param] : params) {
            Tensor p = param;
            p.zero_grad();
        }
    }

    /// Moments exported as tensors for checkpointing (names get m./v. prefixes).
    ParamMap state_tensors() const {
        ParamMap out;
        for (const auto& [name, m] : m_)
            out.emplace_back("adam.m." + name, Tensor::from_data({static_cast<int>(m.size())}, m));
        for (const auto& [name, v] : v_)
            out.emplace_back("adam.v." + name, Tensor::from_data({static_cast<int>(v.size())}, v));
        return out;
    }

    void load_state_tensor(const std::string& name, const std::vector<double>& values) {
        if (name.rfind("adam.m.", 0) == 0)
            m_[name.substr(7)] = values;
        else if (name.rfind("adam.v.", 0) == 0)
            v_[name.substr(7)] = values;
        else
            tensor_fail("adam: unknown state tensor " + name);
    }

private:
    std::vector<double>& moment(std::map<std::string, std::vector<double>>& store,
                                const std::string& name, int64_t n) {
        auto it = store.find(name);
        if (it == store.end())
            it = store.emplace(name, std::vector<double>(static_cast<size_t>(n), 0.0)).first;
        return it->second;
    }

    AdamConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace dualflow
