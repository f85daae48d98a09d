#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tqvsr/rng.hpp"
#include "tqvsr/types.hpp"

namespace tqvsr::nn {

// Dense 2-D tensor node. float for training, double for finite-difference
// verification; the whole op set below is templated on the scalar.
template <typename T>
struct TensorData {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily; same length as value once touched
    bool needs_grad = false;
    std::string name;

    size_t size() const { return value.size(); }
    T& at(size_t r, size_t c) { return value[r * cols + c]; }
    T at(size_t r, size_t c) const { return value[r * cols + c]; }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
    void zero_grad() {
        grad.assign(value.size(), T(0));
    }
    bool has_grad() const { return grad.size() == value.size(); }
};

template <typename T>
using TensorPtr = std::shared_ptr<TensorData<T>>;

template <typename T>
TensorPtr<T> make_tensor(size_t rows, size_t cols, bool needs_grad = false) {
    auto t = std::make_shared<TensorData<T>>();
    t->rows = rows;
    t->cols = cols;
    t->value.assign(rows * cols, T(0));
    t->needs_grad = needs_grad;
    return t;
}

template <typename T>
TensorPtr<T> tensor_from(const FloatMatrix& m) {
    auto t = make_tensor<T>(m.rows, m.cols);
    for (size_t i = 0; i < m.data.size(); ++i) t->value[i] = static_cast<T>(m.data[i]);
    return t;
}

template <typename T>
using EigenMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstEigenMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
EigenMap<T> as_eigen(TensorData<T>& t) {
    return EigenMap<T>(t.value.data(), static_cast<long>(t.rows), static_cast<long>(t.cols));
}
template <typename T>
ConstEigenMap<T> as_eigen(const TensorData<T>& t) {
    return ConstEigenMap<T>(t.value.data(), static_cast<long>(t.rows), static_cast<long>(t.cols));
}
template <typename T>
EigenMap<T> grad_eigen(TensorData<T>& t) {
    t.ensure_grad();
    return EigenMap<T>(t.grad.data(), static_cast<long>(t.rows), static_cast<long>(t.cols));
}

// Records backward closures in forward order; backward() replays them in
// reverse. A tape is single-owner for the duration of one forward/backward.
template <typename T>
class Tape {
public:
    void record(std::function<void()> back) { ops_.push_back(std::move(back)); }

    void backward(const TensorPtr<T>& root) {
        if (root->size() != 1)
            throw std::invalid_argument("backward root must be a scalar tensor");
        root->ensure_grad();
        root->grad[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    size_t size() const { return ops_.size(); }

private:
    std::vector<std::function<void()>> ops_;
};

namespace detail {

template <typename T>
bool flows(const TensorPtr<T>& t) {
    return t->needs_grad;
}

template <typename T>
bool out_grad_ready(const TensorPtr<T>& t) {
    return t->has_grad();
}

inline void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---- primitive ops -------------------------------------------------------

template <typename T>
TensorPtr<T> matmul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check(a->cols == b->rows, "matmul: inner dimensions disagree");
    auto out = make_tensor<T>(a->rows, b->cols, a->needs_grad || b->needs_grad);
    as_eigen(*out).noalias() = as_eigen(*a) * as_eigen(*b);
    if (out->needs_grad) {
        tape.record([a, b, out]() {
            if (!detail::out_grad_ready(out)) return;
            ConstEigenMap<T> g(out->grad.data(), static_cast<long>(out->rows),
                               static_cast<long>(out->cols));
            if (a->needs_grad) grad_eigen(*a).noalias() += g * as_eigen(*b).transpose();
            if (b->needs_grad) grad_eigen(*b).noalias() += as_eigen(*a).transpose() * g;
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> transpose(Tape<T>& tape, const TensorPtr<T>& a) {
    auto out = make_tensor<T>(a->cols, a->rows, a->needs_grad);
    for (size_t r = 0; r < a->rows; ++r)
        for (size_t c = 0; c < a->cols; ++c) out->at(c, r) = a->at(r, c);
    if (out->needs_grad) {
        tape.record([a, out]() {
            if (!detail::out_grad_ready(out)) return;
            a->ensure_grad();
            for (size_t r = 0; r < a->rows; ++r)
                for (size_t c = 0; c < a->cols; ++c)
                    a->grad[r * a->cols + c] += out->grad[c * out->cols + r];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check(a->rows == b->rows && a->cols == b->cols, "add: shape mismatch");
    auto out = make_tensor<T>(a->rows, a->cols, a->needs_grad || b->needs_grad);
    for (size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] + b->value[i];
    if (out->needs_grad) {
        tape.record([a, b, out]() {
            if (!detail::out_grad_ready(out)) return;
            if (a->needs_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

// Adds a 1 x d row vector to every row of a.
template <typename T>
TensorPtr<T> add_rowvec(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& v) {
    detail::check(v->rows == 1 && v->cols == a->cols, "add_rowvec: vector shape mismatch");
    auto out = make_tensor<T>(a->rows, a->cols, a->needs_grad || v->needs_grad);
    for (size_t r = 0; r < a->rows; ++r)
        for (size_t c = 0; c < a->cols; ++c) out->at(r, c) = a->at(r, c) + v->value[c];
    if (out->needs_grad) {
        tape.record([a, v, out]() {
            if (!detail::out_grad_ready(out)) return;
            if (a->needs_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (v->needs_grad) {
                v->ensure_grad();
                for (size_t r = 0; r < a->rows; ++r)
                    for (size_t c = 0; c < a->cols; ++c) v->grad[c] += out->grad[r * a->cols + c];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& a, T factor) {
    auto out = make_tensor<T>(a->rows, a->cols, a->needs_grad);
    for (size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * factor;
    if (out->needs_grad) {
        tape.record([a, out, factor]() {
            if (!detail::out_grad_ready(out)) return;
            a->ensure_grad();
            for (size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * factor;
        });
    }
    return out;
}

// Elementwise multiply by a constant (no gradient to the mask). Dropout.
template <typename T>
TensorPtr<T> mul_const(Tape<T>& tape, const TensorPtr<T>& a, std::shared_ptr<std::vector<T>> mask) {
    detail::check(mask->size() == a->size(), "mul_const: mask size mismatch");
    auto out = make_tensor<T>(a->rows, a->cols, a->needs_grad);
    for (size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * (*mask)[i];
    if (out->needs_grad) {
        tape.record([a, out, mask]() {
            if (!detail::out_grad_ready(out)) return;
            a->ensure_grad();
            for (size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * (*mask)[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> concat_rows(Tape<T>& tape, const std::vector<TensorPtr<T>>& parts) {
    detail::check(!parts.empty(), "concat_rows: no parts");
    const size_t cols = parts[0]->cols;
    size_t rows = 0;
    bool needs = false;
    for (const auto& p : parts) {
        detail::check(p->cols == cols, "concat_rows: column mismatch");
        rows += p->rows;
        needs = needs || p->needs_grad;
    }
    auto out = make_tensor<T>(rows, cols, needs);
    size_t r0 = 0;
    for (const auto& p : parts) {
        std::copy(p->value.begin(), p->value.end(), out->value.begin() + static_cast<long>(r0 * cols));
        r0 += p->rows;
    }
    if (needs) {
        tape.record([parts, out, cols]() {
            if (!detail::out_grad_ready(out)) return;
            size_t r = 0;
            for (const auto& p : parts) {
                if (p->needs_grad) {
                    p->ensure_grad();
                    for (size_t i = 0; i < p->size(); ++i) p->grad[i] += out->grad[r * cols + i];
                }
                r += p->rows;
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> slice_rows(Tape<T>& tape, const TensorPtr<T>& a, size_t r0, size_t r1) {
    detail::check(r0 < r1 && r1 <= a->rows, "slice_rows: bad range");
    auto out = make_tensor<T>(r1 - r0, a->cols, a->needs_grad);
    std::copy(a->value.begin() + static_cast<long>(r0 * a->cols),
              a->value.begin() + static_cast<long>(r1 * a->cols), out->value.begin());
    if (out->needs_grad) {
        tape.record([a, out, r0]() {
            if (!detail::out_grad_ready(out)) return;
            a->ensure_grad();
            for (size_t i = 0; i < out->size(); ++i) a->grad[r0 * a->cols + i] += out->grad[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> slice_cols(Tape<T>& tape, const TensorPtr<T>& a, size_t c0, size_t c1) {
    detail::check(c0 < c1 && c1 <= a->cols, "slice_cols: bad range");
    const size_t w = c1 - c0;
    auto out = make_tensor<T>(a->rows, w, a->needs_grad);
    for (size_t r = 0; r < a->rows; ++r)
        std::copy(a->value.begin() + static_cast<long>(r * a->cols + c0),
                  a->value.begin() + static_cast<long>(r * a->cols + c1),
                  out->value.begin() + static_cast<long>(r * w));
    if (out->needs_grad) {
        tape.record([a, out, c0, w]() {
            if (!detail::out_grad_ready(out)) return;
            a->ensure_grad();
            for (size_t r = 0; r < a->rows; ++r)
                for (size_t c = 0; c < w; ++c)
                    a->grad[r * a->cols + c0 + c] += out->grad[r * w + c];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> concat_cols(Tape<T>& tape, const std::vector<TensorPtr<T>>& parts) {
    detail::check(!parts.empty(), "concat_cols: no parts");
    const size_t rows = parts[0]->rows;
    size_t cols = 0;
    bool needs = false;
    for (const auto& p : parts) {
        detail::check(p->rows == rows, "concat_cols: row mismatch");
        cols += p->cols;
        needs = needs || p->needs_grad;
    }
    auto out = make_tensor<T>(rows, cols, needs);
    size_t c0 = 0;
    for (const auto& p : parts) {
        for (size_t r = 0; r < rows; ++r)
            std::copy(p->value.begin() + static_cast<long>(r * p->cols),
                      p->value.begin() + static_cast<long>((r + 1) * p->cols),
                      out->value.begin() + static_cast<long>(r * cols + c0));
        c0 += p->cols;
    }
    if (needs) {
        tape.record([parts, out, rows, cols]() {
            if (!detail::out_grad_ready(out)) return;
            size_t c = 0;
            for (const auto& p : parts) {
                if (p->needs_grad) {
                    p->ensure_grad();
                    for (size_t r = 0; r < rows; ++r)
                        for (size_t k = 0; k < p->cols; ++k)
                            p->grad[r * p->cols + k] += out->grad[r * cols + c + k];
                }
                c += p->cols;
            }
        });
    }
    return out;
}

// Embedding lookup: out row i = table row indices[i].
template <typename T>
TensorPtr<T> gather_rows(Tape<T>& tape, const TensorPtr<T>& table,
                         const std::vector<size_t>& indices) {
    for (size_t idx : indices)
        detail::check(idx < table->rows, "gather_rows: index out of range");
    auto out = make_tensor<T>(indices.size(), table->cols, table->needs_grad);
    for (size_t i = 0; i < indices.size(); ++i)
        std::copy(table->value.begin() + static_cast<long>(indices[i] * table->cols),
                  table->value.begin() + static_cast<long>((indices[i] + 1) * table->cols),
                  out->value.begin() + static_cast<long>(i * table->cols));
    if (out->needs_grad) {
        tape.record([table, out, indices]() {
            if (!detail::out_grad_ready(out)) return;
            table->ensure_grad();
            for (size_t i = 0; i < indices.size(); ++i)
                for (size_t c = 0; c < table->cols; ++c)
                    table->grad[indices[i] * table->cols + c] += out->grad[i * table->cols + c];
        });
    }
    return out;
}

// Row i = sum of table rows over spans[i], or zero when spans[i] is empty.
template <typename T>
TensorPtr<T> span_sum_rows(Tape<T>& tape, const TensorPtr<T>& table,
                           const std::vector<std::optional<std::pair<size_t, size_t>>>& spans) {
    for (const auto& s : spans)
        if (s) detail::check(s->first < s->second && s->second <= table->rows,
                             "span_sum_rows: span out of range");
    auto out = make_tensor<T>(spans.size(), table->cols, table->needs_grad);
    for (size_t i = 0; i < spans.size(); ++i) {
        if (!spans[i]) continue;
        for (size_t r = spans[i]->first; r < spans[i]->second; ++r)
            for (size_t c = 0; c < table->cols; ++c)
                out->at(i, c) += table->at(r, c);
    }
    if (out->needs_grad) {
        tape.record([table, out, spans]() {
            if (!detail::out_grad_ready(out)) return;
            table->ensure_grad();
            for (size_t i = 0; i < spans.size(); ++i) {
                if (!spans[i]) continue;
                for (size_t r = spans[i]->first; r < spans[i]->second; ++r)
                    for (size_t c = 0; c < table->cols; ++c)
                        table->grad[r * table->cols + c] += out->grad[i * table->cols + c];
            }
        });
    }
    return out;
}

// Row-wise layer norm with affine parameters. Epsilon is added to the
// variance, so a constant row normalizes to zero pre-affine.
template <typename T>
TensorPtr<T> layer_norm(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, T eps = T(1e-12)) {
    detail::check(gamma->rows == 1 && gamma->cols == x->cols, "layer_norm: gamma shape");
    detail::check(beta->rows == 1 && beta->cols == x->cols, "layer_norm: beta shape");
    const size_t n = x->rows, d = x->cols;
    auto out = make_tensor<T>(n, d, x->needs_grad || gamma->needs_grad || beta->needs_grad);
    auto xhat = std::make_shared<std::vector<T>>(n * d);
    auto inv_std = std::make_shared<std::vector<T>>(n);
    for (size_t r = 0; r < n; ++r) {
        T mean = 0;
        for (size_t c = 0; c < d; ++c) mean += x->at(r, c);
        mean /= static_cast<T>(d);
        T var = 0;
        for (size_t c = 0; c < d; ++c) {
            const T dv = x->at(r, c) - mean;
            var += dv * dv;
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (size_t c = 0; c < d; ++c) {
            const T xh = (x->at(r, c) - mean) * is;
            (*xhat)[r * d + c] = xh;
            out->at(r, c) = gamma->value[c] * xh + beta->value[c];
        }
    }
    if (out->needs_grad) {
        tape.record([x, gamma, beta, out, xhat, inv_std, n, d]() {
            if (!detail::out_grad_ready(out)) return;
            for (size_t r = 0; r < n; ++r) {
                const T* gout = out->grad.data() + r * d;
                const T* xh = xhat->data() + r * d;
                if (gamma->needs_grad) {
                    gamma->ensure_grad();
                    for (size_t c = 0; c < d; ++c) gamma->grad[c] += gout[c] * xh[c];
                }
                if (beta->needs_grad) {
                    beta->ensure_grad();
                    for (size_t c = 0; c < d; ++c) beta->grad[c] += gout[c];
                }
                if (x->needs_grad) {
                    x->ensure_grad();
                    T mean_g = 0, mean_gx = 0;
                    for (size_t c = 0; c < d; ++c) {
                        const T g = gout[c] * gamma->value[c];
                        mean_g += g;
                        mean_gx += g * xh[c];
                    }
                    mean_g /= static_cast<T>(d);
                    mean_gx /= static_cast<T>(d);
                    for (size_t c = 0; c < d; ++c) {
                        const T g = gout[c] * gamma->value[c];
                        x->grad[r * d + c] += (g - mean_g - xh[c] * mean_gx) * (*inv_std)[r];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> gelu(Tape<T>& tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->rows, x->cols, x->needs_grad);
    static const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    static const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
    for (size_t i = 0; i < x->size(); ++i) {
        const T v = x->value[i];
        out->value[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    }
    if (out->needs_grad) {
        tape.record([x, out]() {
            if (!detail::out_grad_ready(out)) return;
            x->ensure_grad();
            for (size_t i = 0; i < x->size(); ++i) {
                const T v = x->value[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                x->grad[i] += out->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// Row-wise softmax. When key_mask is given (size = cols), masked columns get
// exactly zero probability and are excluded from max/sum, so padding keys
// cannot perturb unmasked outputs even by rounding.
template <typename T>
TensorPtr<T> softmax_rows(Tape<T>& tape, const TensorPtr<T>& x,
                          std::shared_ptr<const std::vector<uint8_t>> key_mask = nullptr) {
    if (key_mask) detail::check(key_mask->size() == x->cols, "softmax_rows: mask size mismatch");
    const size_t n = x->rows, m = x->cols;
    auto out = make_tensor<T>(n, m, x->needs_grad);
    for (size_t r = 0; r < n; ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (size_t c = 0; c < m; ++c)
            if (!key_mask || (*key_mask)[c]) mx = std::max(mx, x->at(r, c));
        T sum = 0;
        for (size_t c = 0; c < m; ++c) {
            if (key_mask && !(*key_mask)[c]) continue;
            const T e = std::exp(x->at(r, c) - mx);
            out->at(r, c) = e;
            sum += e;
        }
        detail::check(sum > 0, "softmax_rows: all keys masked in a row");
        for (size_t c = 0; c < m; ++c) out->at(r, c) /= sum;
        if (key_mask)
            for (size_t c = 0; c < m; ++c)
                if (!(*key_mask)[c]) out->at(r, c) = T(0);
    }
    if (out->needs_grad) {
        tape.record([x, out, key_mask, n, m]() {
            if (!detail::out_grad_ready(out)) return;
            x->ensure_grad();
            for (size_t r = 0; r < n; ++r) {
                T dot = 0;
                for (size_t c = 0; c < m; ++c) dot += out->grad[r * m + c] * out->value[r * m + c];
                for (size_t c = 0; c < m; ++c) {
                    if (key_mask && !(*key_mask)[c]) continue;
                    x->grad[r * m + c] +=
                        out->value[r * m + c] * (out->grad[r * m + c] - dot);
                }
            }
        });
    }
    return out;
}

// Row-wise log softmax with the max-shift, so a 1-wide row gives exactly 0.
template <typename T>
TensorPtr<T> log_softmax_rows(Tape<T>& tape, const TensorPtr<T>& x) {
    const size_t n = x->rows, m = x->cols;
    auto out = make_tensor<T>(n, m, x->needs_grad);
    auto probs = std::make_shared<std::vector<T>>(n * m);
    for (size_t r = 0; r < n; ++r) {
        T mx = x->at(r, 0);
        for (size_t c = 1; c < m; ++c) mx = std::max(mx, x->at(r, c));
        T sum = 0;
        for (size_t c = 0; c < m; ++c) sum += std::exp(x->at(r, c) - mx);
        const T lse = mx + std::log(sum);
        for (size_t c = 0; c < m; ++c) {
            out->at(r, c) = x->at(r, c) - lse;
            (*probs)[r * m + c] = std::exp(out->at(r, c));
        }
    }
    if (out->needs_grad) {
        tape.record([x, out, probs, n, m]() {
            if (!detail::out_grad_ready(out)) return;
            x->ensure_grad();
            for (size_t r = 0; r < n; ++r) {
                T gsum = 0;
                for (size_t c = 0; c < m; ++c) gsum += out->grad[r * m + c];
                for (size_t c = 0; c < m; ++c)
                    x->grad[r * m + c] += out->grad[r * m + c] - (*probs)[r * m + c] * gsum;
            }
        });
    }
    return out;
}

// Inverted dropout. With enabled=false this is the identity (no tape entry).
template <typename T>
TensorPtr<T> dropout(Tape<T>& tape, const TensorPtr<T>& x, double p, Rng& rng, bool enabled) {
    if (!enabled || p <= 0.0) return x;
    detail::check(p < 1.0, "dropout: p must be < 1");
    auto mask = std::make_shared<std::vector<T>>(x->size());
    const T keep_scale = T(1.0 / (1.0 - p));
    for (auto& v : *mask) v = (rng.uniform() < p) ? T(0) : keep_scale;
    return mul_const(tape, x, mask);
}

template <typename T>
TensorPtr<T> diag(Tape<T>& tape, const TensorPtr<T>& x) {
    detail::check(x->rows == x->cols, "diag: square matrix required");
    const size_t n = x->rows;
    auto out = make_tensor<T>(n, 1, x->needs_grad);
    for (size_t i = 0; i < n; ++i) out->value[i] = x->at(i, i);
    if (out->needs_grad) {
        tape.record([x, out, n]() {
            if (!detail::out_grad_ready(out)) return;
            x->ensure_grad();
            for (size_t i = 0; i < n; ++i) x->grad[i * n + i] += out->grad[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> mean_all(Tape<T>& tape, const TensorPtr<T>& x) {
    detail::check(x->size() > 0, "mean_all: empty tensor");
    auto out = make_tensor<T>(1, 1, x->needs_grad);
    T s = 0;
    for (T v : x->value) s += v;
    out->value[0] = s / static_cast<T>(x->size());
    if (out->needs_grad) {
        tape.record([x, out]() {
            if (!detail::out_grad_ready(out)) return;
            x->ensure_grad();
            const T g = out->grad[0] / static_cast<T>(x->size());
            for (size_t i = 0; i < x->size(); ++i) x->grad[i] += g;
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(1, 1, x->needs_grad);
    T s = 0;
    for (T v : x->value) s += v;
    out->value[0] = s;
    if (out->needs_grad) {
        tape.record([x, out]() {
            if (!detail::out_grad_ready(out)) return;
            x->ensure_grad();
            for (size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[0];
        });
    }
    return out;
}

// L2-normalizes every row. Rows must have nonzero norm.
template <typename T>
TensorPtr<T> l2_normalize_rows(Tape<T>& tape, const TensorPtr<T>& x) {
    const size_t n = x->rows, d = x->cols;
    auto out = make_tensor<T>(n, d, x->needs_grad);
    auto inv_norm = std::make_shared<std::vector<T>>(n);
    for (size_t r = 0; r < n; ++r) {
        T sq = 0;
        for (size_t c = 0; c < d; ++c) sq += x->at(r, c) * x->at(r, c);
        const T norm = std::sqrt(sq);
        if (!(norm > T(0)) || !std::isfinite(static_cast<double>(norm)))
            throw std::runtime_error("l2_normalize_rows: zero or non-finite row norm");
        (*inv_norm)[r] = T(1) / norm;
        for (size_t c = 0; c < d; ++c) out->at(r, c) = x->at(r, c) * (*inv_norm)[r];
    }
    if (out->needs_grad) {
        tape.record([x, out, inv_norm, n, d]() {
            if (!detail::out_grad_ready(out)) return;
            x->ensure_grad();
            for (size_t r = 0; r < n; ++r) {
                T dot = 0;
                for (size_t c = 0; c < d; ++c) dot += out->grad[r * d + c] * out->value[r * d + c];
                for (size_t c = 0; c < d; ++c)
                    x->grad[r * d + c] +=
                        (out->grad[r * d + c] - out->value[r * d + c] * dot) * (*inv_norm)[r];
            }
        });
    }
    return out;
}

template <typename T>
bool all_finite(const TensorPtr<T>& x) {
    for (T v : x->value)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

}  // namespace tqvsr::nn
