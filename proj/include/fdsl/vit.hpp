#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fdsl/common.hpp"
#include "fdsl/image.hpp"
#include "fdsl/parallel.hpp"
#include "fdsl/rng.hpp"
#include "fdsl/tensor.hpp"

namespace fdsl {

struct ModelConfig {
    int image_h = 64;
    int image_w = 64;
    int channels = 1;
    int patch = 8;
    int dim = 64;        // token width D
    int heads = 4;
    int head_dim = 16;
    int layers = 4;
    int classes = 10;
    int mlp_hidden = 128;

    int grid_h() const { return image_h / patch; }
    int grid_w() const { return image_w / patch; }
    int n_patches() const { return grid_h() * grid_w(); }
    int tokens() const { return n_patches() + 1; }
    int patch_dim() const { return patch * patch * channels; }

    void validate() const {
        if (image_h < 1 || image_w < 1 || channels < 1 || patch < 1)
            throw config_error("ModelConfig: bad image/patch dims");
        if (image_h % patch != 0 || image_w % patch != 0)
            throw config_error("ModelConfig: image dims must be divisible by patch");
        if (heads < 1 || head_dim < 1 || heads * head_dim != dim)
            throw config_error("ModelConfig: heads * head_dim must equal dim");
        if (layers < 1 || classes < 1 || mlp_hidden < 1)
            throw config_error("ModelConfig: bad layer/class/mlp counts");
    }

    // Desk-scale default. Structurally a DeiT but sized for a CPU.
    static ModelConfig nano(int classes_, int image = 64, int channels_ = 1, int layers_ = 4) {
        ModelConfig cfg;
        cfg.image_h = cfg.image_w = image;
        cfg.channels = channels_;
        cfg.patch = 8;
        cfg.dim = 64;
        cfg.heads = 4;
        cfg.head_dim = 16;
        cfg.layers = layers_;
        cfg.classes = classes_;
        cfg.mlp_hidden = 128;
        return cfg;
    }
};

template <class T>
struct VitLayerParams {
    basic_tensor<T> ln1_g, ln1_b;      // {D}
    basic_tensor<T> wq, wk, wv;        // {h, D, d}
    basic_tensor<T> wo;                // {h*d, D}
    basic_tensor<T> ln2_g, ln2_b;      // {D}
    basic_tensor<T> mlp_w1, mlp_b1;    // {D, M}, {M}
    basic_tensor<T> mlp_w2, mlp_b2;    // {M, D}, {D}
};

// All trainable weights. Tensor iteration order is fixed; the checkpoint
// format and the optimizer state both rely on it.
template <class T>
struct VitParams {
    basic_tensor<T> embed;             // {P*P*C, D}
    basic_tensor<T> cls_token;         // {1, D}
    basic_tensor<T> pos_embed;         // {N+1, D}
    std::vector<VitLayerParams<T>> layers;
    basic_tensor<T> final_g, final_b;  // {D}
    basic_tensor<T> head_w;            // {D, K}
    basic_tensor<T> head_b;            // {K}

    template <class Fn>
    void for_each(Fn&& fn) {
        fn("embed", embed);
        fn("cls_token", cls_token);
        fn("pos_embed", pos_embed);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            fn(p + "ln1.g", layers[l].ln1_g);
            fn(p + "ln1.b", layers[l].ln1_b);
            fn(p + "attn.wq", layers[l].wq);
            fn(p + "attn.wk", layers[l].wk);
            fn(p + "attn.wv", layers[l].wv);
            fn(p + "attn.wo", layers[l].wo);
            fn(p + "ln2.g", layers[l].ln2_g);
            fn(p + "ln2.b", layers[l].ln2_b);
            fn(p + "mlp.w1", layers[l].mlp_w1);
            fn(p + "mlp.b1", layers[l].mlp_b1);
            fn(p + "mlp.w2", layers[l].mlp_w2);
            fn(p + "mlp.b2", layers[l].mlp_b2);
        }
        fn("final_norm.g", final_g);
        fn("final_norm.b", final_b);
        fn("head.w", head_w);
        fn("head.b", head_b);
    }

    template <class Fn>
    void for_each(Fn&& fn) const {
        const_cast<VitParams*>(this)->for_each(
            [&fn](const std::string& name, basic_tensor<T>& t) {
                fn(name, static_cast<const basic_tensor<T>&>(t));
            });
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for_each([&n](const std::string&, const basic_tensor<T>& t) { n += t.numel(); });
        return n;
    }

    template <class U>
    VitParams<U> cast() const {
        VitParams<U> out = make_vit_params<U>(layers.size());
        auto src = collect();
        std::size_t i = 0;
        out.for_each([&](const std::string&, basic_tensor<U>& t) {
            t = src[i++]->template cast<U>();
        });
        return out;
    }

    std::vector<const basic_tensor<T>*> collect() const {
        std::vector<const basic_tensor<T>*> out;
        for_each([&out](const std::string&, const basic_tensor<T>& t) { out.push_back(&t); });
        return out;
    }

    static VitParams<T> make_shaped(const ModelConfig& cfg) {
        cfg.validate();
        VitParams<T> p;
        const int D = cfg.dim, d = cfg.head_dim, h = cfg.heads, M = cfg.mlp_hidden;
        p.embed = basic_tensor<T>({cfg.patch_dim(), D});
        p.cls_token = basic_tensor<T>({1, D});
        p.pos_embed = basic_tensor<T>({cfg.tokens(), D});
        p.layers.resize(cfg.layers);
        for (VitLayerParams<T>& l : p.layers) {
            l.ln1_g = basic_tensor<T>({D});
            l.ln1_b = basic_tensor<T>({D});
            l.wq = basic_tensor<T>({h, D, d});
            l.wk = basic_tensor<T>({h, D, d});
            l.wv = basic_tensor<T>({h, D, d});
            l.wo = basic_tensor<T>({h * d, D});
            l.ln2_g = basic_tensor<T>({D});
            l.ln2_b = basic_tensor<T>({D});
            l.mlp_w1 = basic_tensor<T>({D, M});
            l.mlp_b1 = basic_tensor<T>({M});
            l.mlp_w2 = basic_tensor<T>({M, D});
            l.mlp_b2 = basic_tensor<T>({D});
        }
        p.final_g = basic_tensor<T>({D});
        p.final_b = basic_tensor<T>({D});
        p.head_w = basic_tensor<T>({D, cfg.classes});
        p.head_b = basic_tensor<T>({cfg.classes});
        return p;
    }

private:
    template <class U>
    static VitParams<U> make_vit_params(std::size_t n_layers) {
        VitParams<U> p;
        p.layers.resize(n_layers);
        return p;
    }
    template <class U>
    friend struct VitParams;
};

// Truncated-normal(0.02) weights, unit layer-norm gains, zero biases. One
// sequential stream over the fixed tensor order keeps this reproducible.
template <class T>
VitParams<T> init_vit_params(const ModelConfig& cfg, std::uint64_t seed) {
    VitParams<T> p = VitParams<T>::make_shaped(cfg);
    Rng rng(mix_seed(seed, 0x1417u));
    p.for_each([&rng](const std::string& name, basic_tensor<T>& t) {
        const bool is_gain = name.ends_with("norm.g") || name.ends_with("ln1.g") ||
                             name.ends_with("ln2.g");
        const bool is_bias = name.ends_with(".b") || name.ends_with(".b1") ||
                             name.ends_with(".b2");
        if (is_gain) {
            t.fill(T(1));
        } else if (is_bias) {
            t.fill(T(0));
        } else {
            for (T& v : t.data) v = static_cast<T>(rng.trunc_gauss(0.02));
        }
    });
    return p;
}

// Non-overlapping P x P patches in row-major patch order, each flattened
// (rows, cols, channels), pixel values scaled to [0, 1].
template <class T = float>
basic_tensor<T> patchify(const Image& img, int patch) {
    if (patch < 1 || img.width % patch != 0 || img.height % patch != 0)
        throw shape_error("patchify: image dims must be divisible by patch size");
    const int gw = img.width / patch, gh = img.height / patch;
    const int pd = patch * patch * img.channels;
    basic_tensor<T> out({gh * gw, pd});
    T* dst = out.ptr();
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc)
            for (int r = 0; r < patch; ++r)
                for (int c = 0; c < patch; ++c)
                    for (int ch = 0; ch < img.channels; ++ch)
                        *dst++ = static_cast<T>(
                            img.at(pc * patch + c, pr * patch + r, ch) / T(255));
    return out;
}

namespace detail {

constexpr double kLnEps = 1e-5;

template <class T>
void ln_forward(const T* x, const T* g, const T* b, T* y, T* mean, T* rstd, int n, int dim) {
    for (int i = 0; i < n; ++i) {
        const T* xr = x + static_cast<std::size_t>(i) * dim;
        T* yr = y + static_cast<std::size_t>(i) * dim;
        T mu = T(0);
        for (int j = 0; j < dim; ++j) mu += xr[j];
        mu /= T(dim);
        T var = T(0);
        for (int j = 0; j < dim; ++j) {
            const T c = xr[j] - mu;
            var += c * c;
        }
        var /= T(dim);
        const T r = T(1) / std::sqrt(var + T(kLnEps));
        mean[i] = mu;
        rstd[i] = r;
        for (int j = 0; j < dim; ++j) yr[j] = g[j] * (xr[j] - mu) * r + b[j];
    }
}

// dX += backprop of layer norm; dg/db accumulated.
template <class T>
void ln_backward(const T* dy, const T* x, const T* mean, const T* rstd, const T* g, T* dx,
                 T* dg, T* db, int n, int dim) {
    for (int i = 0; i < n; ++i) {
        const T* dyr = dy + static_cast<std::size_t>(i) * dim;
        const T* xr = x + static_cast<std::size_t>(i) * dim;
        T* dxr = dx + static_cast<std::size_t>(i) * dim;
        const T mu = mean[i], r = rstd[i];
        T m1 = T(0), m2 = T(0);
        for (int j = 0; j < dim; ++j) {
            const T xhat = (xr[j] - mu) * r;
            const T dxhat = dyr[j] * g[j];
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
            m1 += dxhat;
            m2 += dxhat * xhat;
        }
        m1 /= T(dim);
        m2 /= T(dim);
        for (int j = 0; j < dim; ++j) {
            const T xhat = (xr[j] - mu) * r;
            const T dxhat = dyr[j] * g[j];
            dxr[j] += r * (dxhat - m1 - xhat * m2);
        }
    }
}

template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
    return cdf + x * pdf;
}

template <class T>
void softmax_backward_rows(const T* a, const T* da, T* ds, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        const T* ar = a + static_cast<std::size_t>(i) * cols;
        const T* dar = da + static_cast<std::size_t>(i) * cols;
        T* dsr = ds + static_cast<std::size_t>(i) * cols;
        T dot = T(0);
        for (int j = 0; j < cols; ++j) dot += ar[j] * dar[j];
        for (int j = 0; j < cols; ++j) dsr[j] = ar[j] * (dar[j] - dot);
    }
}

} // namespace detail

// Scaled dot-product attention with the row-wise softmax, returning the
// attention weights alongside the output.
template <class T>
std::pair<basic_tensor<T>, basic_tensor<T>> attention_with_weights(const basic_tensor<T>& q,
                                                                   const basic_tensor<T>& k,
                                                                   const basic_tensor<T>& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() ||
        k.rows() != v.rows())
        throw shape_error("attention: incompatible shapes");
    basic_tensor<T> scores({q.rows(), k.rows()});
    gemm_nt(q.ptr(), k.ptr(), scores.ptr(), q.rows(), q.cols(), k.rows(), false);
    const T scale = T(1) / std::sqrt(T(q.cols()));
    for (T& s : scores.data) s *= scale;
    softmax_rows(scores);
    basic_tensor<T> out({q.rows(), v.cols()});
    gemm_nn(scores.ptr(), v.ptr(), out.ptr(), q.rows(), k.rows(), v.cols(), false);
    return {std::move(out), std::move(scores)};
}

template <class T>
basic_tensor<T> attention(const basic_tensor<T>& q, const basic_tensor<T>& k,
                          const basic_tensor<T>& v) {
    return attention_with_weights(q, k, v).first;
}

namespace detail {

// Multi-head attention on x {n, D}. Writes per-head q/k/v {h,n,d}, attention
// weights {h,n,n}, per-head outputs {h,n,d} and the projected result {n,D}.
// The concat-then-project step is folded into per-head row blocks of wo.
template <class T>
void msa_forward(const basic_tensor<T>& x, const VitLayerParams<T>& lp, int heads, int hd,
                 basic_tensor<T>& q, basic_tensor<T>& k, basic_tensor<T>& v,
                 basic_tensor<T>& attn, basic_tensor<T>& head_out, basic_tensor<T>& out) {
    const int n = x.rows(), D = x.cols();
    const std::size_t nd = static_cast<std::size_t>(n) * hd;
    const std::size_t nn = static_cast<std::size_t>(n) * n;
    const T scale = T(1) / std::sqrt(T(hd));
    for (int i = 0; i < heads; ++i) {
        const std::size_t w_off = static_cast<std::size_t>(i) * D * hd;
        gemm_nn(x.ptr(), lp.wq.ptr() + w_off, q.ptr() + i * nd, n, D, hd, false);
        gemm_nn(x.ptr(), lp.wk.ptr() + w_off, k.ptr() + i * nd, n, D, hd, false);
        gemm_nn(x.ptr(), lp.wv.ptr() + w_off, v.ptr() + i * nd, n, D, hd, false);
        T* a = attn.ptr() + i * nn;
        gemm_nt(q.ptr() + i * nd, k.ptr() + i * nd, a, n, hd, n, false);
        for (std::size_t s = 0; s < nn; ++s) a[s] *= scale;
        for (int r = 0; r < n; ++r) {
            T* row = a + static_cast<std::size_t>(r) * n;
            T mx = row[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            T sum = T(0);
            for (int j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            for (int j = 0; j < n; ++j) row[j] /= sum;
        }
        gemm_nn(a, v.ptr() + i * nd, head_out.ptr() + i * nd, n, n, hd, false);
        gemm_nn(head_out.ptr() + i * nd, lp.wo.ptr() + static_cast<std::size_t>(i) * hd * D,
                out.ptr(), n, hd, D, i > 0);
    }
}

} // namespace detail

// Standalone multi-head self-attention: returns the projected output and the
// per-head attention matrices {h, n, n}.
template <class T>
std::pair<basic_tensor<T>, basic_tensor<T>> msa(const basic_tensor<T>& x,
                                                const VitLayerParams<T>& lp) {
    if (x.rank() != 2) throw shape_error("msa: expected rank-2 input");
    const int heads = lp.wq.shape.at(0), D = lp.wq.shape.at(1), hd = lp.wq.shape.at(2);
    if (x.cols() != D) throw shape_error("msa: input width does not match weights");
    const int n = x.rows();
    basic_tensor<T> q({heads, n, hd}), k({heads, n, hd}), v({heads, n, hd});
    basic_tensor<T> attn({heads, n, n}), head_out({heads, n, hd}), out({n, D});
    detail::msa_forward(x, lp, heads, hd, q, k, v, attn, head_out, out);
    return {std::move(out), std::move(attn)};
}

// Per-layer/per-head attention matrices plus the normed class-token
// representation that feeds the classifier head.
template <class T>
struct ForwardTrace {
    std::vector<basic_tensor<T>> attention; // per layer {h, n, n}
    basic_tensor<T> pre_head;               // {D}
};

namespace detail {

template <class T>
struct LayerCache {
    basic_tensor<T> ln_attn, ln_attn_mean, ln_attn_rstd;
    basic_tensor<T> q, k, v, attn, head_out;
    basic_tensor<T> z_mid;
    basic_tensor<T> ln_mlp, ln_mlp_mean, ln_mlp_rstd;
    basic_tensor<T> mlp_pre, mlp_act;
    basic_tensor<T> z_out;
};

template <class T>
struct ForwardCache {
    basic_tensor<T> z0;
    std::vector<LayerCache<T>> layers;
    basic_tensor<T> cls_norm; // {1, D}
    basic_tensor<T> cls_mean, cls_rstd;
    basic_tensor<T> logits;

    void ensure(const ModelConfig& cfg) {
        const int n = cfg.tokens(), D = cfg.dim, h = cfg.heads, d = cfg.head_dim,
                  M = cfg.mlp_hidden;
        if (z0.same_shape({n, D}) && layers.size() == static_cast<std::size_t>(cfg.layers) &&
            logits.same_shape({cfg.classes}))
            return;
        z0 = basic_tensor<T>({n, D});
        layers.assign(cfg.layers, {});
        for (LayerCache<T>& lc : layers) {
            lc.ln_attn = basic_tensor<T>({n, D});
            lc.ln_attn_mean = basic_tensor<T>({n});
            lc.ln_attn_rstd = basic_tensor<T>({n});
            lc.q = basic_tensor<T>({h, n, d});
            lc.k = basic_tensor<T>({h, n, d});
            lc.v = basic_tensor<T>({h, n, d});
            lc.attn = basic_tensor<T>({h, n, n});
            lc.head_out = basic_tensor<T>({h, n, d});
            lc.z_mid = basic_tensor<T>({n, D});
            lc.ln_mlp = basic_tensor<T>({n, D});
            lc.ln_mlp_mean = basic_tensor<T>({n});
            lc.ln_mlp_rstd = basic_tensor<T>({n});
            lc.mlp_pre = basic_tensor<T>({n, M});
            lc.mlp_act = basic_tensor<T>({n, M});
            lc.z_out = basic_tensor<T>({n, D});
        }
        cls_norm = basic_tensor<T>({1, D});
        cls_mean = basic_tensor<T>({1});
        cls_rstd = basic_tensor<T>({1});
        logits = basic_tensor<T>({cfg.classes});
    }
};

template <class T>
void check_block_finite(const basic_tensor<T>& t, int layer, const char* what) {
    for (const T& v : t.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw nonfinite_error(strfmt("non-finite activation at layer %d (%s)", layer, what));
}

template <class T>
void forward_cached(const basic_tensor<T>& x_p, const VitParams<T>& params,
                    const ModelConfig& cfg, ForwardCache<T>& cache) {
    const int n = cfg.tokens(), N = cfg.n_patches(), D = cfg.dim, M = cfg.mlp_hidden;
    if (!x_p.same_shape({N, cfg.patch_dim()}))
        throw shape_error("forward: patch tensor shape mismatch");
    if (!params.pos_embed.same_shape({n, D}))
        throw shape_error("forward: params do not match config");
    cache.ensure(cfg);

    // z0 = [cls; x_p * embed] + pos
    gemm_nn(x_p.ptr(), params.embed.ptr(), cache.z0.ptr() + D, N, cfg.patch_dim(), D, false);
    for (int j = 0; j < D; ++j) cache.z0.data[j] = params.cls_token.data[j];
    for (std::size_t s = 0; s < cache.z0.numel(); ++s)
        cache.z0.data[s] += params.pos_embed.data[s];
    check_block_finite(cache.z0, -1, "embedding");

    const basic_tensor<T>* z_prev = &cache.z0;
    for (int l = 0; l < cfg.layers; ++l) {
        LayerCache<T>& lc = cache.layers[l];
        const VitLayerParams<T>& lp = params.layers[l];

        detail::ln_forward(z_prev->ptr(), lp.ln1_g.ptr(), lp.ln1_b.ptr(), lc.ln_attn.ptr(),
                           lc.ln_attn_mean.ptr(), lc.ln_attn_rstd.ptr(), n, D);
        detail::msa_forward(lc.ln_attn, lp, cfg.heads, cfg.head_dim, lc.q, lc.k, lc.v, lc.attn,
                            lc.head_out, lc.z_mid);
        for (std::size_t s = 0; s < lc.z_mid.numel(); ++s) lc.z_mid.data[s] += z_prev->data[s];
        check_block_finite(lc.z_mid, l, "attention");

        detail::ln_forward(lc.z_mid.ptr(), lp.ln2_g.ptr(), lp.ln2_b.ptr(), lc.ln_mlp.ptr(),
                           lc.ln_mlp_mean.ptr(), lc.ln_mlp_rstd.ptr(), n, D);
        gemm_nn(lc.ln_mlp.ptr(), lp.mlp_w1.ptr(), lc.mlp_pre.ptr(), n, D, M, false);
        for (int r = 0; r < n; ++r) {
            T* row = lc.mlp_pre.ptr() + static_cast<std::size_t>(r) * M;
            for (int j = 0; j < M; ++j) row[j] += lp.mlp_b1.data[j];
        }
        for (std::size_t s = 0; s < lc.mlp_pre.numel(); ++s)
            lc.mlp_act.data[s] = detail::gelu(lc.mlp_pre.data[s]);
        gemm_nn(lc.mlp_act.ptr(), lp.mlp_w2.ptr(), lc.z_out.ptr(), n, M, D, false);
        for (int r = 0; r < n; ++r) {
            T* row = lc.z_out.ptr() + static_cast<std::size_t>(r) * D;
            for (int j = 0; j < D; ++j) row[j] += lp.mlp_b2.data[j];
        }
        for (std::size_t s = 0; s < lc.z_out.numel(); ++s) lc.z_out.data[s] += lc.z_mid.data[s];
        check_block_finite(lc.z_out, l, "mlp");
        z_prev = &lc.z_out;
    }

    detail::ln_forward(z_prev->ptr(), params.final_g.ptr(), params.final_b.ptr(),
                       cache.cls_norm.ptr(), cache.cls_mean.ptr(), cache.cls_rstd.ptr(), 1, D);
    gemm_nn(cache.cls_norm.ptr(), params.head_w.ptr(), cache.logits.ptr(), 1, D, cfg.classes,
            false);
    for (int j = 0; j < cfg.classes; ++j) cache.logits.data[j] += params.head_b.data[j];
    check_block_finite(cache.logits, cfg.layers, "head");
}

} // namespace detail

// Full forward pass: logits for the image plus the attention trace.
template <class T = float>
std::pair<basic_tensor<T>, ForwardTrace<T>> forward(const Image& img,
                                                    const VitParams<T>& params,
                                                    const ModelConfig& cfg) {
    cfg.validate();
    if (img.width != cfg.image_w || img.height != cfg.image_h || img.channels != cfg.channels)
        throw shape_error("forward: image does not match config");
    const basic_tensor<T> x_p = patchify<T>(img, cfg.patch);
    detail::ForwardCache<T> cache;
    detail::forward_cached(x_p, params, cfg, cache);
    ForwardTrace<T> trace;
    trace.attention.reserve(cfg.layers);
    for (const auto& lc : cache.layers) trace.attention.push_back(lc.attn);
    trace.pre_head = basic_tensor<T>({cfg.dim}, cache.cls_norm.data);
    return {cache.logits, std::move(trace)};
}

// -log softmax(logits)[label], via the log-sum-exp trick.
template <class T>
T cross_entropy(const basic_tensor<T>& logits, int label) {
    if (logits.rank() != 1) throw shape_error("cross_entropy: expected rank-1 logits");
    const int k = static_cast<int>(logits.numel());
    if (label < 0 || label >= k) throw label_error("cross_entropy: label out of range");
    T mx = logits.data[0];
    for (const T& v : logits.data) mx = std::max(mx, v);
    T sum = T(0);
    for (const T& v : logits.data) sum += std::exp(v - mx);
    return mx + std::log(sum) - logits.data[label];
}

namespace detail {

// Backprop through the cached forward pass. Gradients are zeroed first.
// Returns the sample loss.
template <class T>
T backward_cached(const basic_tensor<T>& x_p, int label, const VitParams<T>& params,
                  const ModelConfig& cfg, ForwardCache<T>& cache, VitParams<T>& grads) {
    forward_cached(x_p, params, cfg, cache);
    const T loss = cross_entropy(cache.logits, label);

    grads.for_each([](const std::string&, basic_tensor<T>& t) { t.fill(T(0)); });

    const int n = cfg.tokens(), N = cfg.n_patches(), D = cfg.dim, M = cfg.mlp_hidden,
              K = cfg.classes, h = cfg.heads, hd = cfg.head_dim;
    const std::size_t nd = static_cast<std::size_t>(n) * hd;
    const std::size_t nn = static_cast<std::size_t>(n) * n;

    // d loss / d logits = softmax - onehot
    basic_tensor<T> dlogits({K});
    {
        T mx = cache.logits.data[0];
        for (const T& v : cache.logits.data) mx = std::max(mx, v);
        T sum = T(0);
        for (int j = 0; j < K; ++j) {
            dlogits.data[j] = std::exp(cache.logits.data[j] - mx);
            sum += dlogits.data[j];
        }
        for (int j = 0; j < K; ++j) dlogits.data[j] /= sum;
        dlogits.data[label] -= T(1);
    }

    // head
    gemm_tn(cache.cls_norm.ptr(), dlogits.ptr(), grads.head_w.ptr(), D, 1, K, true);
    for (int j = 0; j < K; ++j) grads.head_b.data[j] += dlogits.data[j];
    basic_tensor<T> dcls_norm({1, D});
    gemm_nt(dlogits.ptr(), params.head_w.ptr(), dcls_norm.ptr(), 1, K, D, false);

    // final norm feeds only the class-token row of z_L
    basic_tensor<T> dz({n, D});
    const basic_tensor<T>& z_last = cfg.layers > 0 ? cache.layers.back().z_out : cache.z0;
    detail::ln_backward(dcls_norm.ptr(), z_last.ptr(), cache.cls_mean.ptr(),
                        cache.cls_rstd.ptr(), params.final_g.ptr(), dz.ptr(),
                        grads.final_g.ptr(), grads.final_b.ptr(), 1, D);

    basic_tensor<T> d_ln({n, D}), dmid({n, D});
    basic_tensor<T> dmlp_act({n, M}), dmlp_pre({n, M});
    basic_tensor<T> dhead({n, hd}), dattn({n, n}), dscore({n, n});
    basic_tensor<T> dq({n, hd}), dk({n, hd}), dv({n, hd});

    for (int l = cfg.layers - 1; l >= 0; --l) {
        LayerCache<T>& lc = cache.layers[l];
        const VitLayerParams<T>& lp = params.layers[l];
        VitLayerParams<T>& lg = grads.layers[l];
        const basic_tensor<T>& z_in = l > 0 ? cache.layers[l - 1].z_out : cache.z0;

        // z_out = z_mid + mlp(ln2(z_mid)); dz currently holds d z_out
        dmid.data = dz.data; // residual path
        gemm_nt(dz.ptr(), lp.mlp_w2.ptr(), dmlp_act.ptr(), n, D, M, false);
        gemm_tn(lc.mlp_act.ptr(), dz.ptr(), lg.mlp_w2.ptr(), M, n, D, true);
        for (int r = 0; r < n; ++r) {
            const T* row = dz.ptr() + static_cast<std::size_t>(r) * D;
            for (int j = 0; j < D; ++j) lg.mlp_b2.data[j] += row[j];
        }
        for (std::size_t s = 0; s < dmlp_pre.numel(); ++s)
            dmlp_pre.data[s] = dmlp_act.data[s] * detail::gelu_grad(lc.mlp_pre.data[s]);
        gemm_tn(lc.ln_mlp.ptr(), dmlp_pre.ptr(), lg.mlp_w1.ptr(), D, n, M, true);
        for (int r = 0; r < n; ++r) {
            const T* row = dmlp_pre.ptr() + static_cast<std::size_t>(r) * M;
            for (int j = 0; j < M; ++j) lg.mlp_b1.data[j] += row[j];
        }
        d_ln.fill(T(0));
        gemm_nt(dmlp_pre.ptr(), lp.mlp_w1.ptr(), d_ln.ptr(), n, M, D, false);
        detail::ln_backward(d_ln.ptr(), lc.z_mid.ptr(), lc.ln_mlp_mean.ptr(),
                            lc.ln_mlp_rstd.ptr(), lp.ln2_g.ptr(), dmid.ptr(), lg.ln2_g.ptr(),
                            lg.ln2_b.ptr(), n, D);

        // z_mid = z_in + msa(ln1(z_in)); dmid holds d z_mid
        dz.data = dmid.data; // residual path into z_in
        d_ln.fill(T(0));
        for (int i = 0; i < h; ++i) {
            const std::size_t w_off = static_cast<std::size_t>(i) * D * hd;
            const T* wo_i = lp.wo.ptr() + static_cast<std::size_t>(i) * hd * D;
            // through output projection
            gemm_nt(dmid.ptr(), wo_i, dhead.ptr(), n, D, hd, false);
            gemm_tn(lc.head_out.ptr() + i * nd, dmid.ptr(),
                    lg.wo.ptr() + static_cast<std::size_t>(i) * hd * D, hd, n, D, true);
            // through attention
            const T* a = lc.attn.ptr() + i * nn;
            gemm_nt(dhead.ptr(), lc.v.ptr() + i * nd, dattn.ptr(), n, hd, n, false);
            gemm_tn(a, dhead.ptr(), dv.ptr(), n, n, hd, false);
            detail::softmax_backward_rows(a, dattn.ptr(), dscore.ptr(), n, n);
            const T scale = T(1) / std::sqrt(T(hd));
            for (T& s : dscore.data) s *= scale;
            gemm_nn(dscore.ptr(), lc.k.ptr() + i * nd, dq.ptr(), n, n, hd, false);
            // dk = dscore^T * q
            gemm_tn(dscore.ptr(), lc.q.ptr() + i * nd, dk.ptr(), n, n, hd, false);
            // projections
            gemm_tn(lc.ln_attn.ptr(), dq.ptr(), lg.wq.ptr() + w_off, D, n, hd, true);
            gemm_tn(lc.ln_attn.ptr(), dk.ptr(), lg.wk.ptr() + w_off, D, n, hd, true);
            gemm_tn(lc.ln_attn.ptr(), dv.ptr(), lg.wv.ptr() + w_off, D, n, hd, true);
            gemm_nt(dq.ptr(), lp.wq.ptr() + w_off, d_ln.ptr(), n, hd, D, true);
            gemm_nt(dk.ptr(), lp.wk.ptr() + w_off, d_ln.ptr(), n, hd, D, true);
            gemm_nt(dv.ptr(), lp.wv.ptr() + w_off, d_ln.ptr(), n, hd, D, true);
        }
        detail::ln_backward(d_ln.ptr(), z_in.ptr(), lc.ln_attn_mean.ptr(),
                            lc.ln_attn_rstd.ptr(), lp.ln1_g.ptr(), dz.ptr(), lg.ln1_g.ptr(),
                            lg.ln1_b.ptr(), n, D);
    }

    // dz now holds d z0
    for (std::size_t s = 0; s < dz.numel(); ++s) grads.pos_embed.data[s] += dz.data[s];
    for (int j = 0; j < D; ++j) grads.cls_token.data[j] += dz.data[j];
    gemm_tn(x_p.ptr(), dz.ptr() + D, grads.embed.ptr(), cfg.patch_dim(), N, D, true);
    return loss;
}

} // namespace detail

template <class T>
struct BackwardResult {
    VitParams<T> grads;
    T loss = T(0);
    basic_tensor<T> logits;
};

// Analytic gradients of cross_entropy(forward(image), label) w.r.t. every
// parameter tensor.
template <class T = float>
BackwardResult<T> backward(const Image& img, int label, const VitParams<T>& params,
                           const ModelConfig& cfg) {
    cfg.validate();
    const basic_tensor<T> x_p = patchify<T>(img, cfg.patch);
    detail::ForwardCache<T> cache;
    BackwardResult<T> result;
    result.grads = VitParams<T>::make_shaped(cfg);
    result.loss = detail::backward_cached(x_p, label, params, cfg, cache, result.grads);
    result.logits = cache.logits;
    return result;
}

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0; // worst |analytic - numeric| / tensor gradient scale
    double max_abs_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst_rel_err = 0.0;
};

// Per-tensor relative error between two gradient sets, normalized by the
// tensor's own gradient magnitude so near-zero entries do not blow up the
// ratio. Shared by grad_check and by tests that corrupt gradients on purpose.
inline GradCheckReport compare_gradients(const std::vector<std::string>& names,
                                         const std::vector<std::vector<double>>& analytic,
                                         const std::vector<std::vector<double>>& numeric) {
    GradCheckReport report;
    for (std::size_t t = 0; t < names.size(); ++t) {
        double scale = 0.0, max_abs = 0.0;
        for (std::size_t i = 0; i < analytic[t].size(); ++i) {
            scale = std::max({scale, std::fabs(analytic[t][i]), std::fabs(numeric[t][i])});
            max_abs = std::max(max_abs, std::fabs(analytic[t][i] - numeric[t][i]));
        }
        GradCheckEntry entry;
        entry.name = names[t];
        entry.max_abs_err = max_abs;
        entry.max_rel_err = scale > 0.0 ? max_abs / scale : 0.0;
        report.worst_rel_err = std::max(report.worst_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

// Central finite differences over every parameter on a random image/label,
// in double precision. FD evaluations parallelize over parameter indices;
// the comparison is per-slot, so the result is thread-count independent.
inline GradCheckReport grad_check(const ModelConfig& cfg, std::uint64_t seed,
                                  double eps = 1e-3, int threads = 0) {
    cfg.validate();
    VitParams<double> params = init_vit_params<double>(cfg, mix_seed(seed, 0x6bu));
    Rng rng(mix_seed(seed, 0x1064u));
    Image img(cfg.image_w, cfg.image_h, cfg.channels);
    for (std::uint8_t& p : img.pixels) p = static_cast<std::uint8_t>(rng.index(256));
    const int label = static_cast<int>(rng.index(cfg.classes));
    const basic_tensor<double> x_p = patchify<double>(img, cfg.patch);

    detail::ForwardCache<double> cache;
    VitParams<double> grads = VitParams<double>::make_shaped(cfg);
    detail::backward_cached(x_p, label, params, cfg, cache, grads);

    std::vector<std::string> names;
    std::vector<basic_tensor<double>*> tensors;
    params.for_each([&](const std::string& name, basic_tensor<double>& t) {
        names.push_back(name);
        tensors.push_back(&t);
    });

    std::vector<std::vector<double>> analytic, numeric;
    std::size_t total = 0;
    {
        std::size_t ti = 0;
        grads.for_each([&](const std::string&, basic_tensor<double>& g) {
            analytic.emplace_back(g.data.begin(), g.data.end());
            numeric.emplace_back(g.numel(), 0.0);
            total += g.numel();
            (void)ti;
        });
    }

    // flat index -> (tensor, element)
    std::vector<std::pair<std::size_t, std::size_t>> slot(total);
    {
        std::size_t flat = 0;
        for (std::size_t t = 0; t < tensors.size(); ++t)
            for (std::size_t i = 0; i < tensors[t]->numel(); ++i) slot[flat++] = {t, i};
    }

    parallel_for(total, resolve_threads(threads), [&](std::size_t lo, std::size_t hi) {
        VitParams<double> local = params; // private copy to perturb
        std::vector<basic_tensor<double>*> local_tensors;
        local.for_each([&](const std::string&, basic_tensor<double>& t) {
            local_tensors.push_back(&t);
        });
        detail::ForwardCache<double> local_cache;
        for (std::size_t f = lo; f < hi; ++f) {
            auto [t, i] = slot[f];
            double& value = local_tensors[t]->data[i];
            const double saved = value;
            value = saved + eps;
            detail::forward_cached(x_p, local, cfg, local_cache);
            const double up = cross_entropy(local_cache.logits, label);
            value = saved - eps;
            detail::forward_cached(x_p, local, cfg, local_cache);
            const double down = cross_entropy(local_cache.logits, label);
            value = saved;
            numeric[t][i] = (up - down) / (2.0 * eps);
        }
    });

    return compare_gradients(names, analytic, numeric);
}

// Bilinear regrid of the learned position embeddings when the fine-tuning
// resolution differs from pre-training; the class-token row is untouched.
template <class T>
basic_tensor<T> interpolate_pos_embed(const basic_tensor<T>& pos, int old_gh, int old_gw,
                                      int new_gh, int new_gw) {
    const int D = pos.cols();
    if (pos.rows() != old_gh * old_gw + 1)
        throw shape_error("interpolate_pos_embed: grid does not match rows");
    basic_tensor<T> out({new_gh * new_gw + 1, D});
    for (int j = 0; j < D; ++j) out.data[j] = pos.data[j];
    for (int r = 0; r < new_gh; ++r) {
        const double sr = new_gh > 1
                              ? static_cast<double>(r) * (old_gh - 1) / (new_gh - 1)
                              : 0.0;
        const int r0 = static_cast<int>(sr), r1 = std::min(r0 + 1, old_gh - 1);
        const double fr = sr - r0;
        for (int c = 0; c < new_gw; ++c) {
            const double sc = new_gw > 1
                                  ? static_cast<double>(c) * (old_gw - 1) / (new_gw - 1)
                                  : 0.0;
            const int c0 = static_cast<int>(sc), c1 = std::min(c0 + 1, old_gw - 1);
            const double fc = sc - c0;
            T* dst = out.ptr() + static_cast<std::size_t>(r * new_gw + c + 1) * D;
            const T* p00 = pos.ptr() + static_cast<std::size_t>(r0 * old_gw + c0 + 1) * D;
            const T* p01 = pos.ptr() + static_cast<std::size_t>(r0 * old_gw + c1 + 1) * D;
            const T* p10 = pos.ptr() + static_cast<std::size_t>(r1 * old_gw + c0 + 1) * D;
            const T* p11 = pos.ptr() + static_cast<std::size_t>(r1 * old_gw + c1 + 1) * D;
            for (int j = 0; j < D; ++j) {
                const double top = p00[j] + fc * (p01[j] - p00[j]);
                const double bot = p10[j] + fc * (p11[j] - p10[j]);
                dst[j] = static_cast<T>(top + fr * (bot - top));
            }
        }
    }
    return out;
}

} // namespace fdsl
