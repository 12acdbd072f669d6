#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgpt/rng.hpp"

namespace sgpt {

// Dense row-major tensor of 32-bit floats (double in the gradient-check
// instantiation). Shapes are 1-D or 2-D; tensors are plain values and all
// operations below are pure functions, so sharing a tensor across threads
// is safe once constructed.
template <typename S>
struct TensorT {
    std::vector<int> shape;
    std::vector<S> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> shp) : shape(std::move(shp)) {
        data.assign(numel_of(shape), S(0));
    }

    static TensorT zeros(std::vector<int> shp) { return TensorT(std::move(shp)); }

    static TensorT full(std::vector<int> shp, S value) {
        TensorT t(std::move(shp));
        for (auto& x : t.data) x = value;
        return t;
    }

    static TensorT from(std::vector<int> shp, std::vector<S> values) {
        TensorT t;
        t.shape = std::move(shp);
        if (values.size() != numel_of(t.shape))
            throw std::invalid_argument("tensor: data length does not match shape");
        t.data = std::move(values);
        return t;
    }

    static TensorT identity(int n) {
        TensorT t({n, n});
        for (int i = 0; i < n; ++i) t.data[static_cast<size_t>(i) * n + i] = S(1);
        return t;
    }

    static TensorT randn(std::vector<int> shp, Rng& rng, double stddev) {
        TensorT t(std::move(shp));
        for (auto& x : t.data) x = static_cast<S>(rng.normal() * stddev);
        return t;
    }

    static size_t numel_of(const std::vector<int>& shp) {
        size_t n = 1;
        for (int d : shp) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    size_t numel() const { return data.size(); }
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }

    S& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
    S at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? " x " : "") << shape[i];
        os << "]";
        return os.str();
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;

template <typename S>
bool bits_equal(const TensorT<S>& a, const TensorT<S>& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(S)) == 0;
}

template <typename S>
bool all_finite(const TensorT<S>& t) {
    for (S x : t.data)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

namespace detail {
template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

template <typename S>
ECMap<S> as_mat(const TensorT<S>& t) {
    if (t.shape.size() != 2)
        throw std::invalid_argument("expected 2-D tensor, got shape " + t.shape_str());
    return ECMap<S>(t.data.data(), t.rows(), t.cols());
}
template <typename S>
EMap<S> as_mat(TensorT<S>& t) {
    if (t.shape.size() != 2)
        throw std::invalid_argument("expected 2-D tensor, got shape " + t.shape_str());
    return EMap<S>(t.data.data(), t.rows(), t.cols());
}
}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

// C = A * B. Accumulation order is a fixed function of the operand shapes
// (single-threaded Eigen kernel), so repeated runs are bit-identical.
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.cols() != b.rows())
        throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() + " vs " +
                                    b.shape_str());
    TensorT<S> out({a.rows(), b.cols()});
    detail::as_mat(out).noalias() = detail::as_mat(a) * detail::as_mat(b);
    return out;
}

// Gradient transforms for C = A * B: dA = dC * B^T, dB = A^T * dC.
template <typename S>
TensorT<S> matmul_grad_a(const TensorT<S>& d_out, const TensorT<S>& b) {
    if (d_out.shape.size() != 2 || b.shape.size() != 2 || d_out.cols() != b.cols())
        throw std::invalid_argument("matmul_grad_a: shape mismatch " + d_out.shape_str() +
                                    " vs " + b.shape_str());
    TensorT<S> out({d_out.rows(), b.rows()});
    detail::as_mat(out).noalias() = detail::as_mat(d_out) * detail::as_mat(b).transpose();
    return out;
}

template <typename S>
TensorT<S> matmul_grad_b(const TensorT<S>& a, const TensorT<S>& d_out) {
    if (a.shape.size() != 2 || d_out.shape.size() != 2 || a.rows() != d_out.rows())
        throw std::invalid_argument("matmul_grad_b: shape mismatch " + a.shape_str() + " vs " +
                                    d_out.shape_str());
    TensorT<S> out({a.cols(), d_out.cols()});
    detail::as_mat(out).noalias() = detail::as_mat(a).transpose() * detail::as_mat(d_out);
    return out;
}

// ---------------------------------------------------------------------------
// softmax

// Row-wise softmax with per-row max subtraction.
template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
    if (x.shape.size() != 2)
        throw std::invalid_argument("softmax_rows: expected 2-D tensor, got " + x.shape_str());
    TensorT<S> out(x.shape);
    const int m = x.rows(), k = x.cols();
    for (int i = 0; i < m; ++i) {
        const S* row = x.data.data() + static_cast<size_t>(i) * k;
        S* orow = out.data.data() + static_cast<size_t>(i) * k;
        S mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        S sum = S(0);
        for (int j = 0; j < k; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < k; ++j) orow[j] /= sum;
    }
    return out;
}

// dX for Y = softmax_rows(X): dx = y .* (dy - sum(dy .* y)) per row.
template <typename S>
TensorT<S> softmax_rows_grad(const TensorT<S>& y, const TensorT<S>& d_out) {
    if (y.shape != d_out.shape)
        throw std::invalid_argument("softmax_rows_grad: shape mismatch " + y.shape_str() +
                                    " vs " + d_out.shape_str());
    TensorT<S> dx(y.shape);
    const int m = y.rows(), k = y.cols();
    for (int i = 0; i < m; ++i) {
        const S* yr = y.data.data() + static_cast<size_t>(i) * k;
        const S* dr = d_out.data.data() + static_cast<size_t>(i) * k;
        S* xr = dx.data.data() + static_cast<size_t>(i) * k;
        S dot = S(0);
        for (int j = 0; j < k; ++j) dot += yr[j] * dr[j];
        for (int j = 0; j < k; ++j) xr[j] = yr[j] * (dr[j] - dot);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// RMS norm

// Row-wise RMS normalization: y = x / sqrt(mean(x^2) + eps) .* gain.
template <typename S>
TensorT<S> rms_norm(const TensorT<S>& x, const TensorT<S>& gain, double eps) {
    if (x.shape.size() != 2 || gain.numel() != static_cast<size_t>(x.cols()))
        throw std::invalid_argument("rms_norm: shape mismatch " + x.shape_str() + " vs gain " +
                                    gain.shape_str());
    TensorT<S> out(x.shape);
    const int m = x.rows(), d = x.cols();
    for (int i = 0; i < m; ++i) {
        const S* row = x.data.data() + static_cast<size_t>(i) * d;
        S* orow = out.data.data() + static_cast<size_t>(i) * d;
        S ms = S(0);
        for (int j = 0; j < d; ++j) ms += row[j] * row[j];
        S r = S(1) / std::sqrt(ms / S(d) + S(eps));
        for (int j = 0; j < d; ++j) orow[j] = row[j] * r * gain.data[j];
    }
    return out;
}

// Gradients of rms_norm with respect to x and gain; d_gain accumulates
// across rows.
template <typename S>
void rms_norm_grad(const TensorT<S>& x, const TensorT<S>& gain, double eps,
                   const TensorT<S>& d_out, TensorT<S>& dx, TensorT<S>& d_gain) {
    const int m = x.rows(), d = x.cols();
    dx = TensorT<S>(x.shape);
    if (d_gain.numel() != static_cast<size_t>(d)) d_gain = TensorT<S>({d});
    for (int i = 0; i < m; ++i) {
        const S* xr = x.data.data() + static_cast<size_t>(i) * d;
        const S* dr = d_out.data.data() + static_cast<size_t>(i) * d;
        S* dxr = dx.data.data() + static_cast<size_t>(i) * d;
        S ms = S(0);
        for (int j = 0; j < d; ++j) ms += xr[j] * xr[j];
        S inv = S(1) / (ms / S(d) + S(eps));
        S r = std::sqrt(inv);
        S dot = S(0);  // sum_j d_out_j * gain_j * x_j
        for (int j = 0; j < d; ++j) dot += dr[j] * gain.data[j] * xr[j];
        S coef = r * inv / S(d) * dot;  // r^3 / d * dot
        for (int j = 0; j < d; ++j) {
            dxr[j] = r * gain.data[j] * dr[j] - coef * xr[j];
            d_gain.data[j] += dr[j] * xr[j] * r;
        }
    }
}

// ---------------------------------------------------------------------------
// RoPE

template <typename S>
void rope_rotate_row(const S* in, S* out, int d, int position, double theta, bool invert) {
    for (int j = 0; j < d / 2; ++j) {
        double freq = std::pow(theta, -2.0 * j / d);
        double angle = position * freq;
        if (invert) angle = -angle;
        S c = static_cast<S>(std::cos(angle));
        S s = static_cast<S>(std::sin(angle));
        S x0 = in[2 * j], x1 = in[2 * j + 1];
        out[2 * j] = x0 * c - x1 * s;
        out[2 * j + 1] = x0 * s + x1 * c;
    }
}

// Rotates consecutive element pairs of each row by p * theta^(-2j/d), where
// p is the row's position. Works on a [T x d_head] layout.
template <typename S>
TensorT<S> rope_apply(const TensorT<S>& x, const std::vector<int>& positions, double theta) {
    if (x.shape.size() != 2 || x.cols() % 2 != 0)
        throw std::invalid_argument("rope_apply: head dimension must be even, got " +
                                    x.shape_str());
    if (positions.size() != static_cast<size_t>(x.rows()))
        throw std::invalid_argument("rope_apply: positions length does not match rows");
    TensorT<S> out(x.shape);
    const int d = x.cols();
    for (int t = 0; t < x.rows(); ++t)
        rope_rotate_row(x.data.data() + static_cast<size_t>(t) * d,
                        out.data.data() + static_cast<size_t>(t) * d, d, positions[t], theta,
                        /*invert=*/false);
    return out;
}

// The rotation is orthogonal, so the gradient transform is the inverse
// rotation applied to d_out.
template <typename S>
TensorT<S> rope_apply_grad(const TensorT<S>& d_out, const std::vector<int>& positions,
                           double theta) {
    TensorT<S> out(d_out.shape);
    const int d = d_out.cols();
    for (int t = 0; t < d_out.rows(); ++t)
        rope_rotate_row(d_out.data.data() + static_cast<size_t>(t) * d,
                        out.data.data() + static_cast<size_t>(t) * d, d, positions[t], theta,
                        /*invert=*/true);
    return out;
}

// ---------------------------------------------------------------------------
// cross entropy

// Mean of -log softmax(logits)[target] over positions, accumulated in
// 64-bit regardless of S.
template <typename S>
double cross_entropy_mean(const TensorT<S>& logits, const std::vector<int>& targets) {
    if (logits.shape.size() != 2 || targets.size() != static_cast<size_t>(logits.rows()))
        throw std::invalid_argument("cross_entropy_mean: logits " + logits.shape_str() +
                                    " vs " + std::to_string(targets.size()) + " targets");
    const int n = logits.cols();
    double total = 0.0;
    for (int t = 0; t < logits.rows(); ++t) {
        int target = targets[t];
        if (target < 0 || target >= n)
            throw std::out_of_range("cross_entropy_mean: target " + std::to_string(target) +
                                    " out of range [0, " + std::to_string(n) + ") at position " +
                                    std::to_string(t));
        const S* row = logits.data.data() + static_cast<size_t>(t) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
        total += mx + std::log(denom) - row[target];
    }
    return total / logits.rows();
}

// dlogits of scale * cross_entropy_mean: scale * (softmax - onehot) / T.
template <typename S>
TensorT<S> cross_entropy_grad(const TensorT<S>& logits, const std::vector<int>& targets,
                              double scale) {
    const int n = logits.cols();
    const int rows = logits.rows();
    TensorT<S> dl(logits.shape);
    for (int t = 0; t < rows; ++t) {
        const S* row = logits.data.data() + static_cast<size_t>(t) * n;
        S* drow = dl.data.data() + static_cast<size_t>(t) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
        double k = scale / rows;
        for (int j = 0; j < n; ++j) {
            double p = std::exp(row[j] - mx) / denom;
            drow[j] = static_cast<S>((p - (j == targets[t] ? 1.0 : 0.0)) * k);
        }
    }
    return dl;
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)

template <typename S>
S gelu_scalar(S x) {
    const S c0 = S(0.7978845608028654);  // sqrt(2/pi)
    const S c1 = S(0.044715);
    return S(0.5) * x * (S(1) + std::tanh(c0 * (x + c1 * x * x * x)));
}

template <typename S>
S gelu_grad_scalar(S x) {
    const S c0 = S(0.7978845608028654);
    const S c1 = S(0.044715);
    S u = c0 * (x + c1 * x * x * x);
    S t = std::tanh(u);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * c0 * (S(1) + S(3) * c1 * x * x);
}

template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
    TensorT<S> out;
    out.shape = x.shape;
    out.data.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i) out.data[i] = gelu_scalar(x.data[i]);
    return out;
}

template <typename S>
TensorT<S> gelu_grad(const TensorT<S>& x, const TensorT<S>& d_out) {
    TensorT<S> dx;
    dx.shape = x.shape;
    dx.data.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i)
        dx.data[i] = d_out.data[i] * gelu_grad_scalar(x.data[i]);
    return dx;
}

// ---------------------------------------------------------------------------
// small helpers

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument("add: shape mismatch " + a.shape_str() + " vs " +
                                    b.shape_str());
    TensorT<S> out;
    out.shape = a.shape;
    out.data.resize(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

template <typename S>
void add_inplace(TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument("add_inplace: shape mismatch " + a.shape_str() + " vs " +
                                    b.shape_str());
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace sgpt
