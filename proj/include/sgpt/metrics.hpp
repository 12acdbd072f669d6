#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "sgpt/io.hpp"
#include "sgpt/model.hpp"
#include "sgpt/rng.hpp"

namespace sgpt {

// Streaming per-layer accumulators gathered while running calibration text
// through the dense model. For layer i the statistics relate its input
// hidden state X_i to its output X_{i+1}, per token row:
//   cos_sum    += cosine(X_{i,t}, X_{i+1,t})
//   relmag_sum += |X_{i+1,t} - X_{i,t}| / |X_{i+1,t}|
//   norm_sum   += |X_{i,t}|
// Sums are 64-bit. Token rows with a zero-norm operand contribute nothing
// to the affected sum; they are counted in the warning counters instead.
struct TraceStats {
    int n_layers = 0;
    std::vector<double> cos_sum, relmag_sum, norm_sum;
    std::vector<long long> zero_norm_skips_cos, zero_norm_skips_relmag;
    long long token_count = 0;

    explicit TraceStats(int layers = 0)
        : n_layers(layers),
          cos_sum(layers, 0.0),
          relmag_sum(layers, 0.0),
          norm_sum(layers, 0.0),
          zero_norm_skips_cos(layers, 0),
          zero_norm_skips_relmag(layers, 0) {}

    // Partial stats combine by plain addition; accumulate_trace merges
    // per-window partials in window order.
    void merge(const TraceStats& other) {
        if (other.n_layers != n_layers)
            throw std::invalid_argument("trace stats: layer count mismatch");
        for (int i = 0; i < n_layers; ++i) {
            cos_sum[i] += other.cos_sum[i];
            relmag_sum[i] += other.relmag_sum[i];
            norm_sum[i] += other.norm_sum[i];
            zero_norm_skips_cos[i] += other.zero_norm_skips_cos[i];
            zero_norm_skips_relmag[i] += other.zero_norm_skips_relmag[i];
        }
        token_count += other.token_count;
    }
};

namespace detail {

// One token row: x = X_{i,t}, y = X_{i+1,t}. The cosine denominator is
// sqrt(nx * ny) rather than sqrt(nx) * sqrt(ny): with x and y bit-identical
// (a residual-identity block) IEEE guarantees sqrt(s * s) == s, so the
// cosine is exactly 1 and the layer's BI exactly 0.
inline void accumulate_token(TraceStats& stats, int layer, const float* x, const float* y,
                             int d) {
    double dot = 0.0, nx = 0.0, ny = 0.0, dsq = 0.0;
    for (int j = 0; j < d; ++j) {
        double xv = x[j], yv = y[j];
        dot += xv * yv;
        nx += xv * xv;
        ny += yv * yv;
        double diff = yv - xv;
        dsq += diff * diff;
    }
    if (nx > 0.0 && ny > 0.0) {
        double c = dot / std::sqrt(nx * ny);
        stats.cos_sum[layer] += std::clamp(c, -1.0, 1.0);
    } else {
        stats.zero_norm_skips_cos[layer] += 1;
    }
    if (ny > 0.0) {
        stats.relmag_sum[layer] += std::sqrt(dsq) / std::sqrt(ny);
    } else {
        stats.zero_norm_skips_relmag[layer] += 1;
    }
    stats.norm_sum[layer] += std::sqrt(nx);
}

}  // namespace detail

// Stats for a single traced window.
inline TraceStats window_trace_stats(const Checkpoint& ckpt, const std::vector<int>& window) {
    const int L = ckpt.config.n_layers;
    const int d = ckpt.config.d_model;
    TraceStats stats(L);
    ForwardTrace trace = forward(ckpt, window, /*want_trace=*/true);
    const int T = static_cast<int>(window.size());
    for (int i = 0; i < L; ++i) {
        const Tensor& x = trace.hidden_states[i];
        const Tensor& y = trace.hidden_states[i + 1];
        for (int t = 0; t < T; ++t)
            detail::accumulate_token(stats, i, x.data.data() + static_cast<size_t>(t) * d,
                                     y.data.data() + static_cast<size_t>(t) * d, d);
    }
    stats.token_count = T;
    return stats;
}

// Runs every window through the dense model with tracing and streams the
// per-token statistics; hidden states are dropped after each window.
// Per-window partials are reduced in window order, so any batching of the
// same window list produces identical stats.
inline TraceStats accumulate_trace(const Checkpoint& ckpt,
                                   const std::vector<std::vector<int>>& windows) {
    if (windows.empty()) throw std::invalid_argument("accumulate_trace: empty window set");
    TraceStats stats(ckpt.config.n_layers);
    for (const auto& w : windows) {
        if (w.empty()) throw std::invalid_argument("accumulate_trace: empty window");
        stats.merge(window_trace_stats(ckpt, w));
    }
    return stats;
}

// BI_i = 1 - mean token cosine between X_i and X_{i+1}; in [0, 2].
inline std::vector<double> bi_scores(const TraceStats& stats) {
    if (stats.token_count <= 0) throw std::invalid_argument("bi_scores: empty trace stats");
    std::vector<double> out(stats.n_layers);
    for (int i = 0; i < stats.n_layers; ++i)
        out[i] = 1.0 - stats.cos_sum[i] / static_cast<double>(stats.token_count);
    return out;
}

// Mean of |f(x)| / |x + f(x)| per token, where f(x) = X_{i+1} - X_i and
// x + f(x) = X_{i+1} (ratio of L2 norms, not an elementwise ratio).
inline std::vector<double> relative_magnitude_scores(const TraceStats& stats) {
    if (stats.token_count <= 0)
        throw std::invalid_argument("relative_magnitude_scores: empty trace stats");
    std::vector<double> out(stats.n_layers);
    for (int i = 0; i < stats.n_layers; ++i)
        out[i] = stats.relmag_sum[i] / static_cast<double>(stats.token_count);
    return out;
}

// Mean L2 norm of the layer's input hidden state.
inline std::vector<double> norm_scores(const TraceStats& stats) {
    if (stats.token_count <= 0) throw std::invalid_argument("norm_scores: empty trace stats");
    std::vector<double> out(stats.n_layers);
    for (int i = 0; i < stats.n_layers; ++i)
        out[i] = stats.norm_sum[i] / static_cast<double>(stats.token_count);
    return out;
}

// ---------------------------------------------------------------------------
// removal strategies

enum class Strategy { Sequential, Reverse, RelMag, Bi, Norm, Random };

inline Strategy parse_strategy(const std::string& name) {
    if (name == "sequential" || name == "seq") return Strategy::Sequential;
    if (name == "reverse") return Strategy::Reverse;
    if (name == "relmag") return Strategy::RelMag;
    if (name == "bi") return Strategy::Bi;
    if (name == "norm") return Strategy::Norm;
    if (name == "random") return Strategy::Random;
    throw std::invalid_argument("unknown strategy \"" + name +
                                "\" (expected sequential|reverse|relmag|bi|norm|random)");
}

inline std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Sequential: return "sequential";
        case Strategy::Reverse: return "reverse";
        case Strategy::RelMag: return "relmag";
        case Strategy::Bi: return "bi";
        case Strategy::Norm: return "norm";
        case Strategy::Random: return "random";
    }
    throw std::invalid_argument("unknown strategy");
}

inline bool strategy_needs_scores(Strategy s) {
    return s == Strategy::Bi || s == Strategy::RelMag || s == Strategy::Norm;
}

// Full removal ordering, first element removed first:
//   sequential -> 0,1,...   reverse -> L-1,...,0
//   bi/relmag/norm -> ascending score, ties to the lower layer index
//   random -> seeded shuffle
inline std::vector<int> removal_order(Strategy strategy, int n_layers,
                                      const std::vector<double>* scores = nullptr,
                                      uint64_t seed = 0) {
    if (n_layers < 1) throw std::invalid_argument("removal_order: n_layers must be >= 1");
    std::vector<int> order(n_layers);
    std::iota(order.begin(), order.end(), 0);
    switch (strategy) {
        case Strategy::Sequential:
            return order;
        case Strategy::Reverse:
            std::reverse(order.begin(), order.end());
            return order;
        case Strategy::Random: {
            Rng rng(seed);
            return rng.permutation(n_layers);
        }
        case Strategy::Bi:
        case Strategy::RelMag:
        case Strategy::Norm: {
            if (!scores || scores->size() != static_cast<size_t>(n_layers))
                throw std::invalid_argument("removal_order: strategy " +
                                            strategy_name(strategy) +
                                            " requires a full per-layer score list");
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                return (*scores)[a] < (*scores)[b];
            });
            return order;
        }
    }
    throw std::invalid_argument("removal_order: unknown strategy");
}

// ---------------------------------------------------------------------------
// importance report

struct CalibrationConfig {
    int n_windows = 64;
    int window_len = 256;
    uint64_t seed = 0;
};

struct ImportanceReport {
    std::map<std::string, std::vector<double>> scores;       // metric -> per-layer
    std::map<std::string, std::vector<int>> removal_orders;  // strategy -> layer order
    std::string corpus_id;
    int n_windows = 0;
    int window_len = 0;
    uint64_t seed = 0;

    json to_json() const {
        json j;
        json sc = json::object();
        for (const auto& [k, v] : scores) sc[k] = v;
        j["scores"] = sc;
        json ro = json::object();
        for (const auto& [k, v] : removal_orders) ro[k] = v;
        j["removal_order"] = ro;
        j["calibration"] = {{"corpus", corpus_id},
                            {"n_windows", n_windows},
                            {"window_len", window_len},
                            {"seed", seed}};
        return j;
    }

    // Plot-ready per-layer score table.
    std::string scores_csv() const {
        std::string out = "layer,bi,relmag,norm\n";
        const auto& bi = scores.at("bi");
        const auto& rm = scores.at("relmag");
        const auto& nm = scores.at("norm");
        for (size_t i = 0; i < bi.size(); ++i)
            out += std::to_string(i) + "," + fmt_double(bi[i]) + "," + fmt_double(rm[i]) + "," +
                   fmt_double(nm[i]) + "\n";
        return out;
    }
};

// One-shot scoring on the dense model: calibration windows come from the
// head of the corpus, scores and every strategy's ordering are computed
// once and fixed.
inline ImportanceReport compute_importance(const Checkpoint& ckpt, const TokenStream& corpus,
                                           const CalibrationConfig& calib) {
    int window_len = std::min(calib.window_len, ckpt.config.max_seq);
    TraceStats stats = accumulate_trace(ckpt, head_windows(corpus, calib.n_windows, window_len));
    ImportanceReport report;
    report.scores["bi"] = bi_scores(stats);
    report.scores["relmag"] = relative_magnitude_scores(stats);
    report.scores["norm"] = norm_scores(stats);
    report.corpus_id = corpus.id;
    report.n_windows = calib.n_windows;
    report.window_len = window_len;
    report.seed = calib.seed;
    const int L = ckpt.config.n_layers;
    for (Strategy s : {Strategy::Sequential, Strategy::Reverse, Strategy::RelMag, Strategy::Bi,
                       Strategy::Norm, Strategy::Random}) {
        const std::vector<double>* scores =
            strategy_needs_scores(s) ? &report.scores.at(strategy_name(s)) : nullptr;
        report.removal_orders[strategy_name(s)] = removal_order(s, L, scores, calib.seed);
    }
    return report;
}

}  // namespace sgpt
