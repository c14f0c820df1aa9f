#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fdsl/common.hpp"
#include "fdsl/vit.hpp"

namespace fdsl {

struct AdamWConfig {
    double lr = 5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Decoupled-weight-decay Adam. Decay applies only to matrix weights; biases,
// layer-norm parameters, the class token and the position table are exempt.
class AdamW {
public:
    AdamW(const VitParams<float>& params, AdamWConfig cfg) : cfg_(cfg) {
        params.for_each([this](const std::string& name, const tensor32& t) {
            m_.emplace_back(t.numel(), 0.0f);
            v_.emplace_back(t.numel(), 0.0f);
            const bool exempt = t.rank() < 2 || name == "cls_token" || name == "pos_embed";
            decay_.push_back(!exempt);
        });
    }

    void step(VitParams<float>& params, const VitParams<float>& grads, double lr_now) {
        ++t_;
        const float b1 = static_cast<float>(cfg_.beta1);
        const float b2 = static_cast<float>(cfg_.beta2);
        const float corr1 = 1.0f - std::pow(b1, static_cast<float>(t_));
        const float corr2 = 1.0f - std::pow(b2, static_cast<float>(t_));
        const float lr = static_cast<float>(lr_now);
        const float eps = static_cast<float>(cfg_.eps);
        const float wd = static_cast<float>(cfg_.weight_decay);

        std::vector<tensor32*> ps;
        params.for_each([&ps](const std::string&, tensor32& t) { ps.push_back(&t); });
        std::vector<const tensor32*> gs;
        grads.for_each([&gs](const std::string&, const tensor32& t) { gs.push_back(&t); });
        if (ps.size() != m_.size() || gs.size() != m_.size())
            throw shape_error("AdamW: parameter/gradient layout mismatch");

        for (std::size_t i = 0; i < ps.size(); ++i) {
            float* p = ps[i]->ptr();
            const float* g = gs[i]->ptr();
            float* m = m_[i].data();
            float* v = v_[i].data();
            const float decay = decay_[i] ? wd : 0.0f;
            const std::size_t n = ps[i]->numel();
            for (std::size_t j = 0; j < n; ++j) {
                m[j] = b1 * m[j] + (1.0f - b1) * g[j];
                v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
                const float mhat = m[j] / corr1;
                const float vhat = v[j] / corr2;
                p[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + decay * p[j]);
            }
        }
    }

private:
    AdamWConfig cfg_;
    long long t_ = 0;
    std::vector<std::vector<float>> m_, v_;
    std::vector<bool> decay_;
};

// Linear warmup to base_lr, then cosine decay to zero.
inline double cosine_warmup_lr(long long step, long long total_steps, long long warmup_steps,
                               double base_lr) {
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const long long decay_steps = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps);
    const double pi = 3.14159265358979323846;
    return 0.5 * base_lr * (1.0 + std::cos(pi * std::min(1.0, std::max(0.0, progress))));
}

} // namespace fdsl
