#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sgpt/metrics.hpp"
#include "sgpt/model.hpp"
#include "sgpt/surgery.hpp"

namespace sgpt {

struct EvalReport {
    double perplexity = 0.0;
    double nll_mean = 0.0;
    long long n_predicted_tokens = 0;
    long long param_count = 0;
    std::string corpus_id;
    int window_len = 0;
    int stride = 0;

    json to_json() const {
        json j;
        j["perplexity"] = perplexity;
        j["nll_mean"] = nll_mean;
        j["n_predicted_tokens"] = n_predicted_tokens;
        j["param_count"] = param_count;
        j["corpus"] = corpus_id;
        j["window_len"] = window_len;
        j["stride"] = stride;
        return j;
    }
};

// Sliding-window perplexity: windows start at multiples of stride
// (stride == window by default, i.e. non-overlapping), each window predicts
// its tokens 1..window-1, and the trailing partial window is dropped.
// NLL is accumulated in 64-bit in window order.
inline EvalReport perplexity(const Checkpoint& ckpt, const TokenStream& corpus, int window,
                             int stride = 0) {
    if (stride == 0) stride = window;
    if (window < 2) throw std::invalid_argument("eval: window must be >= 2");
    if (window > ckpt.config.max_seq)
        throw std::invalid_argument("eval: window exceeds model max_seq");
    if (stride < 1) throw std::invalid_argument("eval: stride must be >= 1");
    if (corpus.size() < static_cast<size_t>(window))
        throw std::invalid_argument("eval: corpus of " + std::to_string(corpus.size()) +
                                    " bytes is shorter than one window of " +
                                    std::to_string(window));
    double total_nll = 0.0;
    long long total_tokens = 0;
    for (size_t start = 0; start + window <= corpus.size(); start += stride) {
        std::vector<int> tokens = corpus.window(start, window);
        ForwardTrace trace = forward(ckpt, tokens);
        std::vector<int> targets(tokens.begin() + 1, tokens.end());
        // mean over this window's window-1 predictions
        Tensor logits;
        logits.shape = {window - 1, ckpt.config.vocab};
        logits.data.assign(trace.logits.data.begin(),
                           trace.logits.data.end() - ckpt.config.vocab);
        total_nll += cross_entropy_mean(logits, targets) * (window - 1);
        total_tokens += window - 1;
    }
    EvalReport report;
    report.nll_mean = total_nll / total_tokens;
    report.perplexity = std::exp(report.nll_mean);
    report.n_predicted_tokens = total_tokens;
    report.param_count = count_params(ckpt);
    report.corpus_id = corpus.id;
    report.window_len = window;
    report.stride = stride;
    return report;
}

// base over pruned perplexity, capped at 1; 1 means no degradation.
inline double retained_ratio(const EvalReport& base, const EvalReport& pruned) {
    if (base.corpus_id != pruned.corpus_id || base.window_len != pruned.window_len ||
        base.stride != pruned.stride)
        throw std::invalid_argument("retained_ratio: reports use different corpora or windows");
    return std::min(1.0, base.perplexity / pruned.perplexity);
}

// ---------------------------------------------------------------------------
// ablations

struct LayerAblationRow {
    int layer;
    double ppl;
    double delta_ppl;
};

struct LayerAblationReport {
    EvalReport baseline;
    std::vector<LayerAblationRow> rows;

    std::string csv() const {
        std::string out = "layer,ppl,delta_ppl\n";
        for (const auto& r : rows)
            out += std::to_string(r.layer) + "," + fmt_double(r.ppl) + "," +
                   fmt_double(r.delta_ppl) + "\n";
        return out;
    }
};

// Perplexity after deleting each single layer.
inline LayerAblationReport single_layer_ablation(const Checkpoint& ckpt,
                                                 const TokenStream& corpus, int window,
                                                 int stride = 0) {
    if (ckpt.config.n_layers < 2)
        throw std::invalid_argument("layer ablation: need at least 2 layers");
    LayerAblationReport report;
    report.baseline = perplexity(ckpt, corpus, window, stride);
    for (int i = 0; i < ckpt.config.n_layers; ++i) {
        PruneSpec spec;
        spec.layers = {i};
        Checkpoint pruned = remove_layers(ckpt, spec);
        EvalReport r = perplexity(pruned, corpus, window, stride);
        report.rows.push_back({i, r.perplexity, r.perplexity - report.baseline.perplexity});
    }
    return report;
}

struct HeadAblationRow {
    int layer;
    int head;
    double ppl;
};

struct HeadAblationReport {
    EvalReport baseline;
    std::vector<HeadAblationRow> rows;

    std::string csv() const {
        std::string out = "layer,head,ppl\n";
        for (const auto& r : rows)
            out += std::to_string(r.layer) + "," + std::to_string(r.head) + "," +
                   fmt_double(r.ppl) + "\n";
        return out;
    }
};

// Perplexity after deleting each single attention head.
inline HeadAblationReport single_head_ablation(const Checkpoint& ckpt, const TokenStream& corpus,
                                               int window, int stride = 0) {
    for (int i = 0; i < ckpt.config.n_layers; ++i)
        if (ckpt.heads(i) < 2)
            throw std::invalid_argument("head ablation: layer " + std::to_string(i) +
                                        " has fewer than 2 heads");
    HeadAblationReport report;
    report.baseline = perplexity(ckpt, corpus, window, stride);
    for (int i = 0; i < ckpt.config.n_layers; ++i)
        for (int h = 0; h < ckpt.heads(i); ++h) {
            Checkpoint cut = remove_head(ckpt, i, h);
            EvalReport r = perplexity(cut, corpus, window, stride);
            report.rows.push_back({i, h, r.perplexity});
        }
    return report;
}

// ---------------------------------------------------------------------------
// prune-ratio sweep

struct SweepRow {
    int k_removed = 0;
    double ratio = 0.0;
    std::vector<int> removed_layers;
    double perplexity = 0.0;
    double retained = 0.0;
};

struct SweepReport {
    std::string strategy;
    std::vector<SweepRow> rows;
    std::string corpus_id;
    int window_len = 0;
    int stride = 0;

    json to_json() const {
        json j;
        j["strategy"] = strategy;
        j["corpus"] = corpus_id;
        j["window_len"] = window_len;
        j["stride"] = stride;
        json rows_j = json::array();
        for (const auto& r : rows) {
            rows_j.push_back({{"k_removed", r.k_removed},
                              {"ratio", r.ratio},
                              {"removed_layers", r.removed_layers},
                              {"perplexity", r.perplexity},
                              {"retained_ratio", r.retained}});
        }
        j["rows"] = rows_j;
        return j;
    }

    std::string csv() const {
        std::string out = "k_removed,ratio,removed_layers,perplexity,retained_ratio\n";
        for (const auto& r : rows) {
            std::string layers;
            for (size_t i = 0; i < r.removed_layers.size(); ++i)
                layers += (i ? ";" : "") + std::to_string(r.removed_layers[i]);
            out += std::to_string(r.k_removed) + "," + fmt_double(r.ratio) + "," + layers +
                   "," + fmt_double(r.perplexity) + "," + fmt_double(r.retained) + "\n";
        }
        return out;
    }
};

// Sweep over k = 0..k_max removals along a fixed (one-shot) ordering.
inline SweepReport prune_sweep_with_order(const Checkpoint& ckpt, const TokenStream& corpus,
                                          const std::string& strategy_label,
                                          const std::vector<int>& order, int k_max, int window,
                                          int stride = 0) {
    const int L = ckpt.config.n_layers;
    if (k_max < 1 || k_max >= L)
        throw std::invalid_argument("sweep: k_max must be in [1, n_layers)");
    SweepReport report;
    report.strategy = strategy_label;
    double base_ppl = 0.0;
    for (int k = 0; k <= k_max; ++k) {
        PruneSpec spec = select_prune_set(order, k);
        Checkpoint pruned = remove_layers(ckpt, spec);
        EvalReport r = perplexity(pruned, corpus, window, stride);
        if (k == 0) {
            base_ppl = r.perplexity;
            report.corpus_id = r.corpus_id;
            report.window_len = r.window_len;
            report.stride = r.stride;
        }
        SweepRow row;
        row.k_removed = k;
        row.ratio = static_cast<double>(k) / L;
        row.removed_layers = spec.layers;
        row.perplexity = r.perplexity;
        row.retained = std::min(1.0, base_ppl / r.perplexity);
        report.rows.push_back(std::move(row));
    }
    return report;
}

// One-shot scores on the dense model, then prune the ordering's prefixes.
inline SweepReport prune_sweep(const Checkpoint& ckpt, const TokenStream& corpus,
                               Strategy strategy, int k_max, int window, int stride = 0,
                               const CalibrationConfig& calib = {}) {
    std::vector<int> order;
    if (strategy_needs_scores(strategy)) {
        ImportanceReport imp = compute_importance(ckpt, corpus, calib);
        order = imp.removal_orders.at(strategy_name(strategy));
    } else {
        order = removal_order(strategy, ckpt.config.n_layers, nullptr, calib.seed);
    }
    return prune_sweep_with_order(ckpt, corpus, strategy_name(strategy), order, k_max, window,
                                  stride);
}

// ---------------------------------------------------------------------------
// generation probe

struct GenerationSample {
    std::vector<int> continuation;
    std::string text;  // continuation bytes, non-printables escaped as \xNN
    double distinct_bigram_ratio = 1.0;
};

inline std::string escape_bytes(const std::vector<int>& tokens) {
    std::string out;
    for (int t : tokens) {
        char c = static_cast<char>(t);
        if (t >= 0x20 && t < 0x7f && c != '\\') {
            out += c;
        } else {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\x%02x", t & 0xff);
            out += buf;
        }
    }
    return out;
}

inline double distinct_bigram_ratio(const std::vector<int>& tokens) {
    if (tokens.size() < 2) return 1.0;
    std::set<std::pair<int, int>> seen;
    for (size_t i = 0; i + 1 < tokens.size(); ++i) seen.insert({tokens[i], tokens[i + 1]});
    return static_cast<double>(seen.size()) / static_cast<double>(tokens.size() - 1);
}

// Greedy continuations plus a crude repetition statistic. Qualitative: no
// threshold, the numbers are for side-by-side comparison of checkpoints.
inline std::vector<GenerationSample> generation_probe(const Checkpoint& ckpt,
                                                      const std::vector<std::vector<int>>& prompts,
                                                      int max_new) {
    if (prompts.empty()) throw std::invalid_argument("generation probe: no prompts");
    std::vector<GenerationSample> out;
    for (const auto& prompt : prompts) {
        std::vector<int> full = greedy_generate(ckpt, prompt, max_new);
        GenerationSample s;
        s.continuation.assign(full.begin() + prompt.size(), full.end());
        s.text = escape_bytes(s.continuation);
        s.distinct_bigram_ratio = distinct_bigram_ratio(s.continuation);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// rank statistics

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("spearman: need two equal series of length >= 2");
    auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double cov = 0, va = 0, vb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0 || vb == 0) return 0.0;
    return cov / std::sqrt(va * vb);
}

}  // namespace sgpt
