#pragma once

#include <cstring>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "sgpt/tensor.hpp"

namespace sgpt {

// Hyperparameters of the byte-level decoder-only transformer. The vocab is
// pinned to 256 (token id == byte value).
struct ModelConfig {
    int n_layers = 12;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 512;
    int vocab = 256;
    int max_seq = 256;
    double rope_theta = 10000.0;
    bool tie_embeddings = false;
    double eps = 1e-5;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
        if (vocab != 256) throw std::invalid_argument("config: vocab must be 256 (byte-level)");
        if (max_seq < 2) throw std::invalid_argument("config: max_seq must be >= 2");
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
            throw std::invalid_argument("config: d_model must be a positive multiple of n_heads");
        if (head_dim() % 2 != 0)
            throw std::invalid_argument("config: head dimension must be even for RoPE");
        if (d_ff < 1) throw std::invalid_argument("config: d_ff must be >= 1");
        if (eps <= 0) throw std::invalid_argument("config: eps must be > 0");
    }

    bool operator==(const ModelConfig&) const = default;
};

namespace names {
inline std::string block(int i, const std::string& suffix) {
    return "block." + std::to_string(i) + "." + suffix;
}
inline constexpr const char* embedding = "embedding";
inline constexpr const char* head = "head";
inline constexpr const char* final_norm = "final_norm.gain";
}  // namespace names

// All weights of a model plus its config and provenance metadata. Tensors
// are keyed by canonical name:
//   embedding                  [vocab x d]
//   block.<i>.attn.{wq,wk,wv}  [d x heads_i*d_head]
//   block.<i>.attn.wo          [heads_i*d_head x d]
//   block.<i>.ffn.w1           [d x d_ff]
//   block.<i>.ffn.w2           [d_ff x d]
//   block.<i>.norm{1,2}.gain   [d]
//   final_norm.gain            [d]
//   head                       [d x vocab]   (absent when tie_embeddings)
// heads_per_layer starts uniform at config.n_heads and is decremented by
// head removal, so layers may end up with different head counts.
template <typename S>
struct CheckpointT {
    ModelConfig config;
    std::vector<int> heads_per_layer;
    std::map<std::string, TensorT<S>> tensors;
    std::map<std::string, std::string> metadata;

    const TensorT<S>& tensor(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::out_of_range("checkpoint: missing tensor " + name);
        return it->second;
    }
    TensorT<S>& tensor(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::out_of_range("checkpoint: missing tensor " + name);
        return it->second;
    }

    int heads(int layer) const { return heads_per_layer.at(layer); }

    // Appends a history.<n> metadata entry; n is the next free index.
    void record_history(const std::string& event) {
        int n = 0;
        while (metadata.count("history." + std::to_string(n))) ++n;
        metadata["history." + std::to_string(n)] = event;
    }

    template <typename U>
    CheckpointT<U> cast() const {
        CheckpointT<U> out;
        out.config = config;
        out.heads_per_layer = heads_per_layer;
        out.metadata = metadata;
        for (const auto& [name, t] : tensors) out.tensors[name] = t.template cast<U>();
        return out;
    }

    void validate() const {
        config.validate();
        const int d = config.d_model, dh = config.head_dim();
        if (heads_per_layer.size() != static_cast<size_t>(config.n_layers))
            throw std::invalid_argument("checkpoint: heads_per_layer has wrong length");
        auto expect = [&](const std::string& name, std::vector<int> shape) {
            const auto& t = tensor(name);
            if (t.shape != shape)
                throw std::invalid_argument("checkpoint: tensor " + name + " has shape " +
                                            t.shape_str() + ", expected " +
                                            TensorT<S>(shape).shape_str());
        };
        expect(names::embedding, {config.vocab, d});
        expect(names::final_norm, {d});
        if (config.tie_embeddings) {
            if (tensors.count(names::head))
                throw std::invalid_argument("checkpoint: tied embeddings but head tensor present");
        } else {
            expect(names::head, {d, config.vocab});
        }
        for (int i = 0; i < config.n_layers; ++i) {
            int h = heads_per_layer[i];
            if (h < 1 || h > config.n_heads)
                throw std::invalid_argument("checkpoint: bad head count at block " +
                                            std::to_string(i));
            expect(names::block(i, "attn.wq"), {d, h * dh});
            expect(names::block(i, "attn.wk"), {d, h * dh});
            expect(names::block(i, "attn.wv"), {d, h * dh});
            expect(names::block(i, "attn.wo"), {h * dh, d});
            expect(names::block(i, "ffn.w1"), {d, config.d_ff});
            expect(names::block(i, "ffn.w2"), {config.d_ff, d});
            expect(names::block(i, "norm1.gain"), {d});
            expect(names::block(i, "norm2.gain"), {d});
        }
        size_t expected = 2 + (config.tie_embeddings ? 0 : 1) +
                          static_cast<size_t>(config.n_layers) * 8;
        if (tensors.size() != expected)
            throw std::invalid_argument("checkpoint: unexpected tensor count");
    }
};

using Checkpoint = CheckpointT<float>;

// GPT-style init: normal(0, 0.02) projections, unit norm gains.
inline Checkpoint init_checkpoint(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.heads_per_layer.assign(cfg.n_layers, cfg.n_heads);
    const int d = cfg.d_model;
    const double stddev = 0.02;
    ckpt.tensors[names::embedding] = Tensor::randn({cfg.vocab, d}, rng, stddev);
    for (int i = 0; i < cfg.n_layers; ++i) {
        ckpt.tensors[names::block(i, "attn.wq")] = Tensor::randn({d, d}, rng, stddev);
        ckpt.tensors[names::block(i, "attn.wk")] = Tensor::randn({d, d}, rng, stddev);
        ckpt.tensors[names::block(i, "attn.wv")] = Tensor::randn({d, d}, rng, stddev);
        ckpt.tensors[names::block(i, "attn.wo")] = Tensor::randn({d, d}, rng, stddev);
        ckpt.tensors[names::block(i, "ffn.w1")] = Tensor::randn({d, cfg.d_ff}, rng, stddev);
        ckpt.tensors[names::block(i, "ffn.w2")] = Tensor::randn({cfg.d_ff, d}, rng, stddev);
        ckpt.tensors[names::block(i, "norm1.gain")] = Tensor::full({d}, 1.0f);
        ckpt.tensors[names::block(i, "norm2.gain")] = Tensor::full({d}, 1.0f);
    }
    ckpt.tensors[names::final_norm] = Tensor::full({d}, 1.0f);
    if (!cfg.tie_embeddings)
        ckpt.tensors[names::head] = Tensor::randn({d, cfg.vocab}, rng, stddev);
    ckpt.metadata["init.seed"] = std::to_string(seed);
    return ckpt;
}

// Exact count of scalar weights.
template <typename S>
long long count_params(const CheckpointT<S>& ckpt) {
    long long n = 0;
    for (const auto& [name, t] : ckpt.tensors) n += static_cast<long long>(t.numel());
    return n;
}

template <typename S>
long long per_block_params(const ModelConfig& cfg) {
    long long d = cfg.d_model, dff = cfg.d_ff;
    return 4 * d * d + 2 * d * dff + 2 * d;
}

// Residual-stream record of a forward pass. hidden_states holds
// [X_0 .. X_L] when traced, otherwise only [X_0, X_L].
template <typename S>
struct ForwardTraceT {
    std::vector<TensorT<S>> hidden_states;
    std::vector<TensorT<S>> post_attention;  // A_1 .. A_L, traced runs only
    TensorT<S> logits;                       // [T x vocab]
};

using ForwardTrace = ForwardTraceT<float>;

// Per-block activation stash for the backward pass.
template <typename S>
struct BlockActsT {
    TensorT<S> x_norm;             // rms_norm(X_i)            [T x d]
    TensorT<S> q, k, v;            // q/k post-RoPE            [T x hd]
    std::vector<TensorT<S>> probs; // per-head attention       [T x T]
    TensorT<S> ctx;                // attention context        [T x hd]
    TensorT<S> residual_mid;       // A_{i+1}                  [T x d]
    TensorT<S> a_norm;             // rms_norm(A_{i+1})        [T x d]
    TensorT<S> ffn_pre;            // a_norm * w1              [T x d_ff]
    TensorT<S> ffn_act;            // gelu(ffn_pre)            [T x d_ff]
};

template <typename S>
struct ActivationsT {
    std::vector<TensorT<S>> x;              // X_0 .. X_L
    std::vector<BlockActsT<S>> blocks;      // per block
    TensorT<S> final_norm_out;              // [T x d]
    TensorT<S> logits;                      // [T x vocab]
};

namespace detail {

// Causal multi-head attention with RoPE on queries and keys. Head h reads
// the column slice [h*dh, (h+1)*dh) of q/k/v and writes the matching slice
// of ctx; slices are strided views into the [T x heads*dh] buffers.
template <typename S>
void attention_forward(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v, int heads,
                       int dh, std::vector<TensorT<S>>& probs_out, TensorT<S>& ctx) {
    using Mat = EMat<S>;
    using Stride = Eigen::OuterStride<>;
    const int T = q.rows();
    const int hd = heads * dh;
    const S scale = S(1) / std::sqrt(S(dh));
    ctx = TensorT<S>({T, hd});
    probs_out.resize(heads);
    for (int h = 0; h < heads; ++h) {
        Eigen::Map<const Mat, 0, Stride> qh(q.data.data() + h * dh, T, dh, Stride(hd));
        Eigen::Map<const Mat, 0, Stride> kh(k.data.data() + h * dh, T, dh, Stride(hd));
        Eigen::Map<const Mat, 0, Stride> vh(v.data.data() + h * dh, T, dh, Stride(hd));
        TensorT<S> scores({T, T});
        EMap<S>(scores.data.data(), T, T).noalias() = qh * kh.transpose() * scale;
        // causal mask, then row softmax
        for (int i = 0; i < T; ++i) {
            S* row = scores.data.data() + static_cast<size_t>(i) * T;
            for (int j = i + 1; j < T; ++j) row[j] = -std::numeric_limits<S>::infinity();
        }
        TensorT<S> p = softmax_rows(scores);
        Eigen::Map<Mat, 0, Stride> ctxh(ctx.data.data() + h * dh, T, dh, Stride(hd));
        ctxh.noalias() = ECMap<S>(p.data.data(), T, T) * vh;
        probs_out[h] = std::move(p);
    }
}

template <typename S>
void attention_backward(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                        const std::vector<TensorT<S>>& probs, const TensorT<S>& d_ctx, int heads,
                        int dh, TensorT<S>& dq, TensorT<S>& dk, TensorT<S>& dv) {
    using Mat = EMat<S>;
    using Stride = Eigen::OuterStride<>;
    const int T = q.rows();
    const int hd = heads * dh;
    const S scale = S(1) / std::sqrt(S(dh));
    dq = TensorT<S>({T, hd});
    dk = TensorT<S>({T, hd});
    dv = TensorT<S>({T, hd});
    for (int h = 0; h < heads; ++h) {
        Eigen::Map<const Mat, 0, Stride> qh(q.data.data() + h * dh, T, dh, Stride(hd));
        Eigen::Map<const Mat, 0, Stride> kh(k.data.data() + h * dh, T, dh, Stride(hd));
        Eigen::Map<const Mat, 0, Stride> vh(v.data.data() + h * dh, T, dh, Stride(hd));
        Eigen::Map<const Mat, 0, Stride> dch(d_ctx.data.data() + h * dh, T, dh, Stride(hd));
        const TensorT<S>& p = probs[h];
        TensorT<S> dp({T, T});
        EMap<S>(dp.data.data(), T, T).noalias() = dch * vh.transpose();
        TensorT<S> ds = softmax_rows_grad(p, dp);  // masked entries have p == 0, grad 0
        Eigen::Map<Mat, 0, Stride> dqh(dq.data.data() + h * dh, T, dh, Stride(hd));
        Eigen::Map<Mat, 0, Stride> dkh(dk.data.data() + h * dh, T, dh, Stride(hd));
        Eigen::Map<Mat, 0, Stride> dvh(dv.data.data() + h * dh, T, dh, Stride(hd));
        ECMap<S> dsm(ds.data.data(), T, T);
        dqh.noalias() = dsm * kh * scale;
        dkh.noalias() = dsm.transpose() * qh * scale;
        dvh.noalias() = ECMap<S>(p.data.data(), T, T).transpose() * dch;
    }
}

// RoPE over the per-head column slices of a [T x heads*dh] buffer.
template <typename S>
TensorT<S> rope_heads(const TensorT<S>& x, int heads, int dh, double theta, bool invert) {
    TensorT<S> out(x.shape);
    const int hd = heads * dh;
    for (int t = 0; t < x.rows(); ++t) {
        const S* in_row = x.data.data() + static_cast<size_t>(t) * hd;
        S* out_row = out.data.data() + static_cast<size_t>(t) * hd;
        for (int h = 0; h < heads; ++h)
            rope_rotate_row(in_row + h * dh, out_row + h * dh, dh, t, theta, invert);
    }
    return out;
}

}  // namespace detail

// Applies block i to the residual stream X ([T x d]), optionally stashing
// activations for the backward pass.
template <typename S>
TensorT<S> apply_block(const CheckpointT<S>& ckpt, int i, const TensorT<S>& x,
                       BlockActsT<S>* acts = nullptr) {
    const ModelConfig& cfg = ckpt.config;
    const int heads = ckpt.heads(i);
    const int dh = cfg.head_dim();
    BlockActsT<S> local;
    BlockActsT<S>& a = acts ? *acts : local;

    a.x_norm = rms_norm(x, ckpt.tensor(names::block(i, "norm1.gain")), cfg.eps);
    a.q = detail::rope_heads(matmul(a.x_norm, ckpt.tensor(names::block(i, "attn.wq"))), heads, dh,
                             cfg.rope_theta, false);
    a.k = detail::rope_heads(matmul(a.x_norm, ckpt.tensor(names::block(i, "attn.wk"))), heads, dh,
                             cfg.rope_theta, false);
    a.v = matmul(a.x_norm, ckpt.tensor(names::block(i, "attn.wv")));
    detail::attention_forward(a.q, a.k, a.v, heads, dh, a.probs, a.ctx);
    TensorT<S> attn_out = matmul(a.ctx, ckpt.tensor(names::block(i, "attn.wo")));
    a.residual_mid = add(attn_out, x);  // A_{i+1} = ATTN(LN(X_i)) + X_i

    a.a_norm = rms_norm(a.residual_mid, ckpt.tensor(names::block(i, "norm2.gain")), cfg.eps);
    a.ffn_pre = matmul(a.a_norm, ckpt.tensor(names::block(i, "ffn.w1")));
    a.ffn_act = gelu(a.ffn_pre);
    TensorT<S> ffn_out = matmul(a.ffn_act, ckpt.tensor(names::block(i, "ffn.w2")));
    return add(ffn_out, a.residual_mid);  // X_{i+1} = FFN(LN(A_{i+1})) + A_{i+1}
}

template <typename S>
void check_tokens(const CheckpointT<S>& ckpt, const std::vector<int>& tokens) {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    if (tokens.size() > static_cast<size_t>(ckpt.config.max_seq))
        throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                    " exceeds max_seq " + std::to_string(ckpt.config.max_seq));
    for (size_t t = 0; t < tokens.size(); ++t)
        if (tokens[t] < 0 || tokens[t] >= ckpt.config.vocab)
            throw std::out_of_range("forward: token " + std::to_string(tokens[t]) +
                                    " out of range at position " + std::to_string(t));
}

// Full forward pass. want_trace keeps every X_i and A_{i+1}; otherwise the
// trace carries only X_0 and X_L. `acts` (trainer use) stashes everything
// needed for backward.
template <typename S>
ForwardTraceT<S> forward(const CheckpointT<S>& ckpt, const std::vector<int>& tokens,
                         bool want_trace = false, ActivationsT<S>* acts = nullptr) {
    check_tokens(ckpt, tokens);
    const ModelConfig& cfg = ckpt.config;
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.d_model;

    TensorT<S> x({T, d});
    const TensorT<S>& emb = ckpt.tensor(names::embedding);
    for (int t = 0; t < T; ++t)
        std::memcpy(x.data.data() + static_cast<size_t>(t) * d,
                    emb.data.data() + static_cast<size_t>(tokens[t]) * d, sizeof(S) * d);

    ForwardTraceT<S> trace;
    if (acts) {
        acts->x.clear();
        acts->blocks.resize(cfg.n_layers);
        acts->x.push_back(x);
    }
    trace.hidden_states.push_back(x);  // X_0

    BlockActsT<S> scratch;
    for (int i = 0; i < cfg.n_layers; ++i) {
        BlockActsT<S>* ba = acts ? &acts->blocks[i] : (want_trace ? &scratch : nullptr);
        TensorT<S> next = apply_block(ckpt, i, x, ba);
        if (want_trace) trace.post_attention.push_back(ba->residual_mid);
        x = std::move(next);
        if (acts) acts->x.push_back(x);
        if (want_trace) trace.hidden_states.push_back(x);
    }
    if (!want_trace) trace.hidden_states.push_back(x);  // X_L

    TensorT<S> final_out = rms_norm(x, ckpt.tensor(names::final_norm), cfg.eps);
    if (cfg.tie_embeddings) {
        // logits = final_out * embedding^T
        trace.logits = TensorT<S>({T, cfg.vocab});
        detail::as_mat(trace.logits).noalias() =
            detail::as_mat(final_out) * detail::as_mat(emb).transpose();
    } else {
        trace.logits = matmul(final_out, ckpt.tensor(names::head));
    }
    if (acts) {
        acts->final_norm_out = std::move(final_out);
        acts->logits = trace.logits;
    }
    return trace;
}

// Greedy decoding; ties broken by the lowest token id.
template <typename S>
std::vector<int> greedy_generate(const CheckpointT<S>& ckpt, const std::vector<int>& prompt,
                                 int max_new) {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (prompt.size() + static_cast<size_t>(max_new) > static_cast<size_t>(ckpt.config.max_seq))
        throw std::invalid_argument("generate: prompt plus max_new exceeds max_seq");
    std::vector<int> tokens = prompt;
    for (int step = 0; step < max_new; ++step) {
        ForwardTraceT<S> trace = forward(ckpt, tokens);
        const int n = ckpt.config.vocab;
        const S* row =
            trace.logits.data.data() + (static_cast<size_t>(tokens.size()) - 1) * n;
        int best = 0;
        for (int j = 1; j < n; ++j)
            if (row[j] > row[best]) best = j;
        tokens.push_back(best);
    }
    return tokens;
}

}  // namespace sgpt
