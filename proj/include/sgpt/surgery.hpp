#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "sgpt/metrics.hpp"
#include "sgpt/model.hpp"

namespace sgpt {

// Which blocks to delete, plus where the choice came from (kept as
// provenance in checkpoint metadata).
struct PruneSpec {
    std::vector<int> layers;  // sorted, unique
    std::string source = "explicit-list";  // or "metric"
    std::string metric;                    // when source == "metric"
    std::vector<double> score_snapshot;    // per-layer scores at decision time

    void validate(int n_layers) const {
        std::set<int> seen;
        for (int l : layers) {
            if (l < 0 || l >= n_layers)
                throw std::out_of_range("prune: layer index " + std::to_string(l) +
                                        " out of range [0, " + std::to_string(n_layers) + ")");
            if (!seen.insert(l).second)
                throw std::invalid_argument("prune: duplicate layer index " + std::to_string(l));
        }
        if (layers.size() >= static_cast<size_t>(n_layers))
            throw std::invalid_argument("prune: cannot remove all " +
                                        std::to_string(n_layers) + " blocks");
    }

    json to_json() const {
        json j;
        j["layers"] = layers;
        j["source"] = source;
        if (!metric.empty()) j["metric"] = metric;
        if (!score_snapshot.empty()) j["score_snapshot"] = score_snapshot;
        return j;
    }
};

// First k entries of a removal ordering, as a deletion set.
inline PruneSpec select_prune_set(const std::vector<int>& order, int k,
                                  const std::string& metric = "",
                                  const std::vector<double>& scores = {}) {
    if (k < 0 || k >= static_cast<int>(order.size()))
        throw std::out_of_range("prune: k = " + std::to_string(k) +
                                " out of range [0, " + std::to_string(order.size()) + ")");
    PruneSpec spec;
    spec.layers.assign(order.begin(), order.begin() + k);
    std::sort(spec.layers.begin(), spec.layers.end());
    spec.source = metric.empty() ? "explicit-list" : "metric";
    spec.metric = metric;
    spec.score_snapshot = scores;
    return spec;
}

// k = floor(ratio * L).
inline int ratio_to_k(double ratio, int n_layers) {
    if (ratio < 0.0 || ratio >= 1.0)
        throw std::invalid_argument("prune: ratio must be in [0, 1)");
    return static_cast<int>(std::floor(ratio * n_layers));
}

// Deletes the given blocks; survivors keep their weights bit for bit and
// are re-indexed densely in their original relative order. Everything that
// is not a block tensor is untouched.
inline Checkpoint remove_layers(const Checkpoint& ckpt, const PruneSpec& spec) {
    spec.validate(ckpt.config.n_layers);
    std::set<int> removed(spec.layers.begin(), spec.layers.end());

    Checkpoint out;
    out.config = ckpt.config;
    out.config.n_layers = ckpt.config.n_layers - static_cast<int>(removed.size());
    out.metadata = ckpt.metadata;
    const char* suffixes[] = {"attn.wq", "attn.wk", "attn.wv", "attn.wo",
                              "ffn.w1",  "ffn.w2",  "norm1.gain", "norm2.gain"};
    int next = 0;
    for (int i = 0; i < ckpt.config.n_layers; ++i) {
        if (removed.count(i)) continue;
        for (const char* s : suffixes)
            out.tensors[names::block(next, s)] = ckpt.tensor(names::block(i, s));
        out.heads_per_layer.push_back(ckpt.heads(i));
        ++next;
    }
    out.tensors[names::embedding] = ckpt.tensor(names::embedding);
    out.tensors[names::final_norm] = ckpt.tensor(names::final_norm);
    if (!ckpt.config.tie_embeddings) out.tensors[names::head] = ckpt.tensor(names::head);

    json event;
    event["op"] = "remove_layers";
    event["spec"] = spec.to_json();
    out.record_history(event.dump());
    return out;
}

// Deletes one attention head: the head's column slices of wq/wk/wv and the
// matching row slice of wo. The block's output dimensionality is unchanged
// and the FFN is untouched.
inline Checkpoint remove_head(const Checkpoint& ckpt, int layer, int head) {
    if (layer < 0 || layer >= ckpt.config.n_layers)
        throw std::out_of_range("remove_head: layer " + std::to_string(layer) +
                                " out of range [0, " + std::to_string(ckpt.config.n_layers) +
                                ")");
    const int h = ckpt.heads(layer);
    if (head < 0 || head >= h)
        throw std::out_of_range("remove_head: head " + std::to_string(head) +
                                " out of range [0, " + std::to_string(h) + ")");
    if (h < 2)
        throw std::invalid_argument("remove_head: cannot remove the last remaining head of layer " +
                                    std::to_string(layer));
    const int dh = ckpt.config.head_dim();
    const int d = ckpt.config.d_model;

    Checkpoint out = ckpt;
    out.heads_per_layer[layer] = h - 1;

    // wq/wk/wv: [d x h*dh] -> drop columns [head*dh, (head+1)*dh)
    for (const char* s : {"attn.wq", "attn.wk", "attn.wv"}) {
        const Tensor& src = ckpt.tensor(names::block(layer, s));
        Tensor dst({d, (h - 1) * dh});
        for (int r = 0; r < d; ++r) {
            const float* in = src.data.data() + static_cast<size_t>(r) * h * dh;
            float* o = dst.data.data() + static_cast<size_t>(r) * (h - 1) * dh;
            std::memcpy(o, in, sizeof(float) * head * dh);
            std::memcpy(o + head * dh, in + (head + 1) * dh, sizeof(float) * (h - 1 - head) * dh);
        }
        out.tensors[names::block(layer, s)] = std::move(dst);
    }
    // wo: [h*dh x d] -> drop rows [head*dh, (head+1)*dh)
    {
        const Tensor& src = ckpt.tensor(names::block(layer, "attn.wo"));
        Tensor dst({(h - 1) * dh, d});
        std::memcpy(dst.data.data(), src.data.data(),
                    sizeof(float) * static_cast<size_t>(head) * dh * d);
        std::memcpy(dst.data.data() + static_cast<size_t>(head) * dh * d,
                    src.data.data() + static_cast<size_t>(head + 1) * dh * d,
                    sizeof(float) * static_cast<size_t>(h - 1 - head) * dh * d);
        out.tensors[names::block(layer, "attn.wo")] = std::move(dst);
    }

    json event;
    event["op"] = "remove_head";
    event["layer"] = layer;
    event["head"] = head;
    out.record_history(event.dump());
    return out;
}

// ---------------------------------------------------------------------------
// round-to-nearest weight quantization

struct QuantSpec {
    int bits = 8;

    void validate() const {
        if (bits != 8) throw std::invalid_argument("quantize: only 8-bit supported");
    }
};

// Symmetric per-row RTN: each row w of a 2-D tensor becomes
// round(w / s) * s with s = max|w| / 127, stored back as floats. The last
// float rounding can push an element a hair past the s/2 error bound on
// near-half ties, so such elements are nudged one ulp back toward w; the
// quantizer therefore satisfies |w - w_hat| <= s/2 elementwise by
// construction.
inline void rtn_quantize_row(float* row, int n) {
    double maxabs = 0.0;
    for (int j = 0; j < n; ++j) maxabs = std::max(maxabs, std::abs(static_cast<double>(row[j])));
    if (maxabs == 0.0) return;
    const double s = maxabs / 127.0;
    for (int j = 0; j < n; ++j) {
        double w = row[j];
        double q = std::round(w / s);
        q = std::clamp(q, -127.0, 127.0);
        float deq = static_cast<float>(q * s);
        while (std::abs(w - static_cast<double>(deq)) > s / 2.0)
            deq = std::nextafter(deq, static_cast<float>(w));
        row[j] = deq;
    }
}

// Applies RTN to every 2-D projection matrix (embedding, head, attention
// and FFN projections); 1-D norm gains are excluded.
inline Checkpoint quantize_rtn(const Checkpoint& ckpt, const QuantSpec& spec) {
    spec.validate();
    Checkpoint out = ckpt;
    for (auto& [name, t] : out.tensors) {
        if (t.shape.size() != 2) continue;
        const int cols = t.cols();
        for (int r = 0; r < t.rows(); ++r)
            rtn_quantize_row(t.data.data() + static_cast<size_t>(r) * cols, cols);
    }
    json event;
    event["op"] = "quantize_rtn";
    event["bits"] = spec.bits;
    out.record_history(event.dump());
    return out;
}

}  // namespace sgpt
