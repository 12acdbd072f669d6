#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "sgpt/io.hpp"
#include "sgpt/model.hpp"

namespace sgpt {

struct TrainConfig {
    int steps = 1000;
    int batch_size = 16;
    int seq_len = 256;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    uint64_t seed = 0;

    void validate(const ModelConfig& model) const {
        if (steps < 1) throw std::invalid_argument("train: steps must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (seq_len < 2 || seq_len > model.max_seq)
            throw std::invalid_argument("train: seq_len must be in [2, max_seq]");
        if (grad_clip <= 0) throw std::invalid_argument("train: grad_clip must be > 0");
    }
};

template <typename S>
using GradMapT = std::map<std::string, TensorT<S>>;

template <typename S>
GradMapT<S> zero_grads_like(const CheckpointT<S>& ckpt) {
    GradMapT<S> grads;
    for (const auto& [name, t] : ckpt.tensors) grads[name] = TensorT<S>(t.shape);
    return grads;
}

// Forward + full backward for one sequence. Returns the (unscaled) mean
// cross entropy of predicting targets from inputs; gradients of
// loss_scale * loss are accumulated into `grads`.
template <typename S>
double loss_and_grad(const CheckpointT<S>& ckpt, const std::vector<int>& inputs,
                     const std::vector<int>& targets, GradMapT<S>& grads,
                     double loss_scale = 1.0) {
    if (inputs.size() != targets.size() || inputs.empty())
        throw std::invalid_argument("loss_and_grad: inputs and targets must align");
    const ModelConfig& cfg = ckpt.config;
    ActivationsT<S> acts;
    forward(ckpt, inputs, /*want_trace=*/false, &acts);
    double loss = cross_entropy_mean(acts.logits, targets);

    TensorT<S> dlogits = cross_entropy_grad(acts.logits, targets, loss_scale);
    const TensorT<S>& emb = ckpt.tensor(names::embedding);

    TensorT<S> d_final;
    if (cfg.tie_embeddings) {
        // logits = final_norm_out * embedding^T
        d_final = TensorT<S>({dlogits.rows(), cfg.d_model});
        detail::as_mat(d_final).noalias() = detail::as_mat(dlogits) * detail::as_mat(emb);
        TensorT<S>& demb = grads[names::embedding];
        detail::as_mat(demb).noalias() +=
            detail::as_mat(dlogits).transpose() * detail::as_mat(acts.final_norm_out);
    } else {
        d_final = matmul_grad_a(dlogits, ckpt.tensor(names::head));
        add_inplace(grads[names::head], matmul_grad_b(acts.final_norm_out, dlogits));
    }

    TensorT<S> dx;
    rms_norm_grad(acts.x[cfg.n_layers], ckpt.tensor(names::final_norm), cfg.eps, d_final, dx,
                  grads[names::final_norm]);

    for (int i = cfg.n_layers - 1; i >= 0; --i) {
        const BlockActsT<S>& a = acts.blocks[i];
        const int heads = ckpt.heads(i);
        const int dh = cfg.head_dim();

        // FFN half: X_{i+1} = gelu(a_norm * w1) * w2 + A
        TensorT<S> d_mid = dx;  // residual path into A_{i+1}
        TensorT<S> d_act = matmul_grad_a(dx, ckpt.tensor(names::block(i, "ffn.w2")));
        add_inplace(grads[names::block(i, "ffn.w2")], matmul_grad_b(a.ffn_act, dx));
        TensorT<S> d_pre = gelu_grad(a.ffn_pre, d_act);
        add_inplace(grads[names::block(i, "ffn.w1")], matmul_grad_b(a.a_norm, d_pre));
        TensorT<S> d_anorm = matmul_grad_a(d_pre, ckpt.tensor(names::block(i, "ffn.w1")));
        TensorT<S> d_from_norm2;
        rms_norm_grad(a.residual_mid, ckpt.tensor(names::block(i, "norm2.gain")), cfg.eps,
                      d_anorm, d_from_norm2, grads[names::block(i, "norm2.gain")]);
        add_inplace(d_mid, d_from_norm2);

        // attention half: A_{i+1} = ctx * wo + X_i
        TensorT<S> d_prev = d_mid;  // residual path into X_i
        TensorT<S> d_ctx = matmul_grad_a(d_mid, ckpt.tensor(names::block(i, "attn.wo")));
        add_inplace(grads[names::block(i, "attn.wo")], matmul_grad_b(a.ctx, d_mid));
        TensorT<S> dq, dk, dv;
        detail::attention_backward(a.q, a.k, a.v, a.probs, d_ctx, heads, dh, dq, dk, dv);
        dq = detail::rope_heads(dq, heads, dh, cfg.rope_theta, /*invert=*/true);
        dk = detail::rope_heads(dk, heads, dh, cfg.rope_theta, /*invert=*/true);
        TensorT<S> d_xnorm = matmul_grad_a(dq, ckpt.tensor(names::block(i, "attn.wq")));
        add_inplace(d_xnorm, matmul_grad_a(dk, ckpt.tensor(names::block(i, "attn.wk"))));
        add_inplace(d_xnorm, matmul_grad_a(dv, ckpt.tensor(names::block(i, "attn.wv"))));
        add_inplace(grads[names::block(i, "attn.wq")], matmul_grad_b(a.x_norm, dq));
        add_inplace(grads[names::block(i, "attn.wk")], matmul_grad_b(a.x_norm, dk));
        add_inplace(grads[names::block(i, "attn.wv")], matmul_grad_b(a.x_norm, dv));
        TensorT<S> d_from_norm1;
        rms_norm_grad(acts.x[i], ckpt.tensor(names::block(i, "norm1.gain")), cfg.eps, d_xnorm,
                      d_from_norm1, grads[names::block(i, "norm1.gain")]);
        add_inplace(d_prev, d_from_norm1);
        dx = std::move(d_prev);
    }

    TensorT<S>& demb = grads[names::embedding];
    const int d = cfg.d_model;
    for (size_t t = 0; t < inputs.size(); ++t) {
        S* grow = demb.data.data() + static_cast<size_t>(inputs[t]) * d;
        const S* xrow = dx.data.data() + t * d;
        for (int j = 0; j < d; ++j) grow[j] += xrow[j];
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    GradMapT<float> m, v;
    long long t = 0;
};

inline AdamState init_adam(const Checkpoint& ckpt) {
    AdamState s;
    s.m = zero_grads_like(ckpt);
    s.v = zero_grads_like(ckpt);
    return s;
}

// One optimizer step with global-L2-norm gradient clipping. Iteration is in
// tensor-name order, so updates are deterministic.
inline void adam_step(Checkpoint& ckpt, const GradMapT<float>& grads, AdamState& state,
                      const TrainConfig& cfg) {
    state.t += 1;
    double norm_sq = 0.0;
    for (const auto& [name, g] : grads)
        for (float x : g.data) norm_sq += static_cast<double>(x) * x;
    double norm = std::sqrt(norm_sq);
    float clip_scale = norm > cfg.grad_clip ? static_cast<float>(cfg.grad_clip / norm) : 1.0f;

    const float b1 = static_cast<float>(cfg.adam_beta1);
    const float b2 = static_cast<float>(cfg.adam_beta2);
    const float corr1 = static_cast<float>(1.0 - std::pow(cfg.adam_beta1, state.t));
    const float corr2 = static_cast<float>(1.0 - std::pow(cfg.adam_beta2, state.t));
    const float lr = static_cast<float>(cfg.learning_rate);
    const float eps = static_cast<float>(cfg.adam_eps);

    for (auto& [name, w] : ckpt.tensors) {
        const Tensor& g = grads.at(name);
        Tensor& m = state.m.at(name);
        Tensor& v = state.v.at(name);
        for (size_t i = 0; i < w.data.size(); ++i) {
            float gi = g.data[i] * clip_scale;
            m.data[i] = b1 * m.data[i] + (1.0f - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0f - b2) * gi * gi;
            float mhat = m.data[i] / corr1;
            float vhat = v.data[i] / corr2;
            w.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// training loop

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<double> losses;  // one mean loss per step
};

inline std::string loss_curve_csv(const std::vector<double>& losses) {
    std::string out = "step,loss\n";
    for (size_t i = 0; i < losses.size(); ++i)
        out += std::to_string(i) + "," + fmt_double(losses[i]) + "\n";
    return out;
}

// Next-token training on random corpus windows from a seeded generator.
// Fully deterministic given cfg.seed.
inline TrainResult train(Checkpoint ckpt, const TokenStream& corpus, const TrainConfig& cfg,
                         bool verbose = false) {
    cfg.validate(ckpt.config);
    if (corpus.size() < static_cast<size_t>(cfg.seq_len) + 1)
        throw std::invalid_argument("train: corpus of " + std::to_string(corpus.size()) +
                                    " bytes is shorter than seq_len+1");
    Rng rng(cfg.seed);
    AdamState adam = init_adam(ckpt);
    GradMapT<float> grads = zero_grads_like(ckpt);
    std::vector<double> losses;
    losses.reserve(cfg.steps);
    const uint64_t max_start = corpus.size() - cfg.seq_len;  // window needs seq_len+1 bytes

    for (int step = 0; step < cfg.steps; ++step) {
        for (auto& [name, g] : grads) std::fill(g.data.begin(), g.data.end(), 0.0f);
        double step_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            size_t start = static_cast<size_t>(rng.below(max_start));
            std::vector<int> window = corpus.window(start, cfg.seq_len + 1);
            std::vector<int> inputs(window.begin(), window.end() - 1);
            std::vector<int> targets(window.begin() + 1, window.end());
            step_loss += loss_and_grad(ckpt, inputs, targets, grads, 1.0 / cfg.batch_size);
        }
        step_loss /= cfg.batch_size;
        if (!std::isfinite(step_loss))
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
        adam_step(ckpt, grads, adam, cfg);
        losses.push_back(step_loss);
        if (verbose && (step + 1) % 50 == 0)
            std::fprintf(stderr, "step %d/%d loss %.4f\n", step + 1, cfg.steps, step_loss);
    }

    ckpt.metadata["train.seed"] = std::to_string(cfg.seed);
    ckpt.metadata["train.steps"] = std::to_string(cfg.steps);
    ckpt.metadata["train.corpus"] = corpus.id;
    return TrainResult{std::move(ckpt), std::move(losses)};
}

// ---------------------------------------------------------------------------
// gradient check

// Compares the analytic gradient against central finite differences
// (f(w+h) - f(w-h)) / 2h, both evaluated in 64-bit, on n_probes randomly
// selected scalar weights. Returns the max relative error with the
// denominator floored at 0.1: gradients below that scale are compared
// absolutely (implied atol = 0.1 * rtol), since central-difference
// truncation on this loss reaches ~5e-6 absolute at h = 1e-3, far above
// a pure relative 1e-4 of a 1e-2-scale gradient yet far below the error a
// wrong backward term produces.
template <typename S>
double grad_check(const CheckpointT<S>& ckpt, const std::vector<int>& tokens, int n_probes,
                  double h) {
    if (n_probes < 1) throw std::invalid_argument("grad_check: n_probes must be >= 1");
    if (h <= 0) throw std::invalid_argument("grad_check: h must be > 0");
    if (tokens.size() < 2) throw std::invalid_argument("grad_check: need at least 2 tokens");

    CheckpointT<double> dckpt = ckpt.template cast<double>();
    std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
    std::vector<int> targets(tokens.begin() + 1, tokens.end());

    GradMapT<double> grads = zero_grads_like(dckpt);
    loss_and_grad(dckpt, inputs, targets, grads);

    std::vector<std::string> tensor_names;
    std::vector<size_t> cumulative{0};
    for (const auto& [name, t] : dckpt.tensors) {
        tensor_names.push_back(name);
        cumulative.push_back(cumulative.back() + t.numel());
    }
    const size_t total = cumulative.back();

    auto loss_at = [&]() {
        ForwardTraceT<double> tr = forward(dckpt, inputs);
        return cross_entropy_mean(tr.logits, targets);
    };

    Rng rng(0x9e3779b9);
    double max_rel = 0.0;
    for (int p = 0; p < n_probes; ++p) {
        size_t flat = rng.below(total);
        size_t which = 0;
        while (cumulative[which + 1] <= flat) ++which;
        TensorT<double>& t = dckpt.tensor(tensor_names[which]);
        size_t idx = flat - cumulative[which];
        double w0 = t.data[idx];
        t.data[idx] = w0 + h;
        double up = loss_at();
        t.data[idx] = w0 - h;
        double down = loss_at();
        t.data[idx] = w0;
        double fd = (up - down) / (2.0 * h);
        double analytic = grads.at(tensor_names[which]).data[idx];
        double rel = std::abs(analytic - fd) /
                     std::max({std::abs(analytic), std::abs(fd), 0.1});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace sgpt
