#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tqvsr/io.hpp"
#include "tqvsr/rng.hpp"
#include "tqvsr/tensor.hpp"

namespace tqvsr::nn {

// Named parameter with Adam state. m and v start at zero, step at 0.
template <typename T>
struct Parameter {
    std::string name;
    TensorPtr<T> tensor;
    std::vector<T> adam_m;
    std::vector<T> adam_v;
    uint64_t step = 0;
};

// Registration-ordered parameter table. Order is the serialization and
// initialization order, so it must be stable across runs.
template <typename T>
class ParamStore {
public:
    TensorPtr<T> create(const std::string& name, size_t rows, size_t cols) {
        auto t = make_tensor<T>(rows, cols, /*needs_grad=*/true);
        t->name = name;
        Parameter<T> p;
        p.name = name;
        p.tensor = t;
        p.adam_m.assign(t->size(), T(0));
        p.adam_v.assign(t->size(), T(0));
        params_.push_back(std::move(p));
        return t;
    }

    std::vector<Parameter<T>>& all() { return params_; }
    const std::vector<Parameter<T>>& all() const { return params_; }

    Parameter<T>* find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    void zero_grads() {
        for (auto& p : params_) p.tensor->zero_grad();
    }

    size_t total_coords() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.tensor->size();
        return n;
    }

private:
    std::vector<Parameter<T>> params_;
};

struct AdamConfig {
    double lr = 3e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One Adam update with bias correction over every parameter that has an
// accumulated gradient. Fails fast (with the parameter name) on NaN grads.
template <typename T>
void adam_step(ParamStore<T>& params, const AdamConfig& cfg) {
    for (auto& p : params.all()) {
        auto& t = *p.tensor;
        if (!t.has_grad()) t.ensure_grad();
        for (T g : t.grad)
            if (!std::isfinite(static_cast<double>(g)))
                throw std::runtime_error("non-finite gradient in parameter '" + p.name + "'");
        p.step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
        for (size_t i = 0; i < t.size(); ++i) {
            const double g = static_cast<double>(t.grad[i]);
            p.adam_m[i] = static_cast<T>(cfg.beta1 * static_cast<double>(p.adam_m[i]) +
                                         (1.0 - cfg.beta1) * g);
            p.adam_v[i] = static_cast<T>(cfg.beta2 * static_cast<double>(p.adam_v[i]) +
                                         (1.0 - cfg.beta2) * g * g);
            const double mhat = static_cast<double>(p.adam_m[i]) / bc1;
            const double vhat = static_cast<double>(p.adam_v[i]) / bc2;
            t.value[i] = static_cast<T>(static_cast<double>(t.value[i]) -
                                        cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// ---- transformer pieces ---------------------------------------------------

template <typename T>
struct LinearParams {
    TensorPtr<T> w;  // in x out
    TensorPtr<T> b;  // 1 x out
};

template <typename T>
TensorPtr<T> linear(Tape<T>& tape, const TensorPtr<T>& x, const LinearParams<T>& p) {
    return add_rowvec(tape, matmul(tape, x, p.w), p.b);
}

template <typename T>
struct AttentionParams {
    LinearParams<T> q, k, v, o;
};

template <typename T>
struct BlockParams {
    AttentionParams<T> attn;
    TensorPtr<T> ln1_gamma, ln1_beta;
    LinearParams<T> ffn1, ffn2;
    TensorPtr<T> ln2_gamma, ln2_beta;
};

// Scaled dot-product multi-head self attention. key_mask marks positions
// that may be attended to; masked keys get exactly zero weight. Optionally
// returns the per-head attention maps (row-stacked) for diagnostics.
template <typename T>
TensorPtr<T> multi_head_self_attention(Tape<T>& tape, const TensorPtr<T>& x,
                                       const AttentionParams<T>& p, size_t heads,
                                       std::shared_ptr<const std::vector<uint8_t>> key_mask,
                                       double attn_dropout, Rng* rng, bool train,
                                       std::vector<FloatMatrix>* attn_out = nullptr) {
    const size_t d = x->cols;
    detail::check(d % heads == 0, "attention: model dim not divisible by head count");
    const size_t dk = d / heads;
    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));

    auto q = linear(tape, x, p.q);
    auto k = linear(tape, x, p.k);
    auto v = linear(tape, x, p.v);

    std::vector<TensorPtr<T>> head_outputs;
    head_outputs.reserve(heads);
    for (size_t h = 0; h < heads; ++h) {
        auto qh = slice_cols(tape, q, h * dk, (h + 1) * dk);
        auto kh = slice_cols(tape, k, h * dk, (h + 1) * dk);
        auto vh = slice_cols(tape, v, h * dk, (h + 1) * dk);
        auto scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt_dk);
        auto probs = softmax_rows(tape, scores, key_mask);
        if (attn_out) {
            FloatMatrix m(probs->rows, probs->cols);
            for (size_t i = 0; i < probs->size(); ++i)
                m.data[i] = static_cast<float>(probs->value[i]);
            attn_out->push_back(std::move(m));
        }
        if (train && attn_dropout > 0.0 && rng)
            probs = dropout(tape, probs, attn_dropout, *rng, true);
        head_outputs.push_back(matmul(tape, probs, vh));
    }
    auto merged = heads == 1 ? head_outputs[0] : concat_cols(tape, head_outputs);
    return linear(tape, merged, p.o);
}

template <typename T>
TensorPtr<T> feed_forward(Tape<T>& tape, const TensorPtr<T>& x, const BlockParams<T>& p) {
    return linear(tape, gelu(tape, linear(tape, x, p.ffn1)), p.ffn2);
}

// Post-LN transformer block: x = LN(x + Attn(x)); x = LN(x + FFN(x)).
template <typename T>
TensorPtr<T> transformer_block(Tape<T>& tape, const TensorPtr<T>& x, const BlockParams<T>& p,
                               size_t heads, std::shared_ptr<const std::vector<uint8_t>> key_mask,
                               double hidden_dropout, Rng* rng, bool train,
                               std::vector<FloatMatrix>* attn_out = nullptr) {
    auto a = multi_head_self_attention(tape, x, p.attn, heads, key_mask, hidden_dropout, rng,
                                       train, attn_out);
    if (train && hidden_dropout > 0.0 && rng) a = dropout(tape, a, hidden_dropout, *rng, true);
    auto x1 = layer_norm(tape, add(tape, x, a), p.ln1_gamma, p.ln1_beta);
    auto f = feed_forward(tape, x1, p);
    if (train && hidden_dropout > 0.0 && rng) f = dropout(tape, f, hidden_dropout, *rng, true);
    return layer_norm(tape, add(tape, x1, f), p.ln2_gamma, p.ln2_beta);
}

// ---- initialization -------------------------------------------------------

// Truncated normal (sigma 0.02, clipped at 2 sigma) for weight matrices and
// embedding tables; zeros for biases; ones for layer-norm gains. Draws in
// registration order from the "init" substream.
template <typename T>
void init_params(ParamStore<T>& params, uint64_t master_seed, double sigma = 0.02) {
    Rng rng = substream(master_seed, "init");
    for (auto& p : params.all()) {
        auto& t = *p.tensor;
        const bool is_bias = p.name.ends_with(".b") || p.name.ends_with("beta");
        const bool is_gain = p.name.ends_with("gamma");
        for (auto& v : t.value) {
            if (is_gain)
                v = T(1);
            else if (is_bias)
                v = T(0);
            else
                v = static_cast<T>(rng.truncated_gaussian(sigma));
        }
    }
}

// ---- finite-difference gradient checking ----------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    size_t coords_checked = 0;
    std::string worst_param;
    size_t worst_index = 0;
};

// Central differences against reverse-mode gradients over a sampled subset of
// coordinates (at least one per parameter tensor). build_loss must be a
// deterministic scalar computation; run with dropout off. Relative error uses
// |a - n| / max(|a| + |n|, 1e-6) and treats both-below-1e-7 as zero.
template <typename T>
GradCheckReport grad_check(ParamStore<T>& params,
                           const std::function<TensorPtr<T>(Tape<T>&)>& build_loss,
                           size_t target_coords, double h, Rng& rng) {
    const auto forward_loss = [&]() {
        Tape<T> scratch;
        auto out = build_loss(scratch);
        return static_cast<double>(out->value[0]);
    };

    params.zero_grads();
    Tape<T> tape;
    auto loss = build_loss(tape);
    if (!all_finite(loss)) throw std::runtime_error("grad_check: non-finite loss");
    tape.backward(loss);

    const size_t total = params.total_coords();
    GradCheckReport report;
    for (auto& p : params.all()) {
        auto& t = *p.tensor;
        size_t n_samples = std::max<size_t>(
            1, (target_coords * t.size() + total - 1) / std::max<size_t>(total, 1));
        n_samples = std::min(n_samples, t.size());
        for (size_t s = 0; s < n_samples; ++s) {
            const size_t idx = static_cast<size_t>(rng.below(t.size()));
            const T saved = t.value[idx];
            t.value[idx] = saved + static_cast<T>(h);
            const double fp = forward_loss();
            t.value[idx] = saved - static_cast<T>(h);
            const double fm = forward_loss();
            t.value[idx] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("grad_check: non-finite loss during perturbation");
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = static_cast<double>(t.grad[idx]);
            double err = 0.0;
            if (std::fabs(numeric) >= 1e-7 || std::fabs(analytic) >= 1e-7)
                err = std::fabs(analytic - numeric) /
                      std::max(std::fabs(analytic) + std::fabs(numeric), 1e-6);
            ++report.coords_checked;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = p.name;
                report.worst_index = idx;
            }
        }
    }
    return report;
}

// ---- checkpoints -----------------------------------------------------------

// Checkpoint file: magic "TQVC", u32 version, u32-length JSON header (model
// config + step), u64 n_params, per parameter (name, u32 rows, u32 cols,
// f32 values), u8 has_optimizer_state, then per parameter (m, v, u64 step).
// No timestamps anywhere: same-seed runs produce byte-identical files.
inline constexpr char kCheckpointMagic[4] = {'T', 'Q', 'V', 'C'};
inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& params,
                     const std::string& header_json, bool with_optimizer_state) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
    os.write(kCheckpointMagic, 4);
    io::write_u32(os, kCheckpointVersion);
    io::write_u32(os, static_cast<uint32_t>(header_json.size()));
    os.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));
    io::write_u64(os, params.all().size());
    for (const auto& p : params.all()) {
        io::write_string(os, p.name);
        io::write_u32(os, static_cast<uint32_t>(p.tensor->rows));
        io::write_u32(os, static_cast<uint32_t>(p.tensor->cols));
        for (T v : p.tensor->value) io::write_f32(os, static_cast<float>(v));
    }
    os.put(with_optimizer_state ? 1 : 0);
    if (with_optimizer_state) {
        for (const auto& p : params.all()) {
            for (T v : p.adam_m) io::write_f32(os, static_cast<float>(v));
            for (T v : p.adam_v) io::write_f32(os, static_cast<float>(v));
            io::write_u64(os, p.step);
        }
    }
    if (!os) throw std::runtime_error("checkpoint write failed: '" + path.string() + "'");
}

// Loads values (and optimizer state when present) into an already-built
// ParamStore whose names and shapes must match the file.
template <typename T>
std::string load_checkpoint(const std::filesystem::path& path, ParamStore<T>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw std::runtime_error("'" + path.string() + "' is not a checkpoint file");
    if (io::read_u32(is) != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version in '" + path.string() + "'");
    const uint32_t header_len = io::read_u32(is);
    std::string header(header_len, '\0');
    is.read(header.data(), header_len);
    const uint64_t n_params = io::read_u64(is);
    if (n_params != params.all().size())
        throw std::runtime_error("checkpoint parameter count mismatch");
    for (auto& p : params.all()) {
        const std::string name = io::read_string(is);
        const uint32_t rows = io::read_u32(is);
        const uint32_t cols = io::read_u32(is);
        if (name != p.name || rows != p.tensor->rows || cols != p.tensor->cols)
            throw std::runtime_error("checkpoint entry '" + name + "' does not match model '" +
                                     p.name + "'");
        for (auto& v : p.tensor->value) v = static_cast<T>(io::read_f32(is));
    }
    const int has_opt = is.get();
    if (has_opt == 1) {
        for (auto& p : params.all()) {
            for (auto& v : p.adam_m) v = static_cast<T>(io::read_f32(is));
            for (auto& v : p.adam_v) v = static_cast<T>(io::read_f32(is));
            p.step = io::read_u64(is);
        }
    }
    return header;
}

}  // namespace tqvsr::nn
