#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "fdsl/common.hpp"
#include "fdsl/image.hpp"
#include "fdsl/tensor.hpp"
#include "fdsl/vit.hpp"

namespace fdsl {

// Cyclic Jacobi eigensolver for symmetric matrices. Returns eigenvalues in
// descending order and the matching eigenvectors as columns.
inline std::pair<std::vector<double>, tensor64> jacobi_eigh(tensor64 a) {
    if (a.rank() != 2 || a.rows() != a.cols()) throw shape_error("jacobi_eigh: need square");
    const int n = a.rows();
    tensor64 v({n, n});
    for (int i = 0; i < n; ++i) v(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-22) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::fabs(apq) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::vector<double> evals(n);
    for (int i = 0; i < n; ++i) evals[i] = a(i, i);
    std::stable_sort(order.begin(), order.end(),
                     [&evals](int x, int y) { return evals[x] > evals[y]; });
    std::vector<double> sorted(n);
    tensor64 vs({n, n});
    for (int i = 0; i < n; ++i) {
        sorted[i] = evals[order[i]];
        for (int k = 0; k < n; ++k) vs(k, i) = v(k, order[i]);
    }
    return {std::move(sorted), std::move(vs)};
}

namespace detail {

inline std::uint8_t to_u8(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Min-max normalize a block to [0,255]; constant blocks map to all zeros.
inline void minmax_to_u8(const std::vector<double>& values, std::vector<std::uint8_t>& out) {
    double lo = values[0], hi = values[0];
    for (double v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    out.resize(values.size());
    if (hi - lo < 1e-12) {
        std::fill(out.begin(), out.end(), 0);
        return;
    }
    for (std::size_t i = 0; i < values.size(); ++i)
        out[i] = to_u8(255.0 * (values[i] - lo) / (hi - lo));
}

} // namespace detail

struct FiltersResult {
    Image grid;                          // tiled filter visualizations
    tensor64 components;                 // {top_k, P*P*C}
    std::vector<double> variance_ratio;  // per component, PCA mode only
};

// Visualize the patch projection: principal components of the D learned
// filters (each a P*P*C vector), or the raw leading columns when raw = true.
inline FiltersResult embedding_filters(const VitParams<float>& params, const ModelConfig& cfg,
                                       int top_k, bool raw = false) {
    cfg.validate();
    const int f = cfg.patch_dim(), dim = cfg.dim;
    if (!params.embed.same_shape({f, dim}))
        throw shape_error("embedding_filters: embed tensor shape mismatch");
    if (top_k < 1 || top_k > (raw ? dim : f))
        throw shape_error("embedding_filters: top_k out of range");

    FiltersResult result;
    result.components = tensor64({top_k, f});
    if (raw) {
        for (int k = 0; k < top_k; ++k)
            for (int i = 0; i < f; ++i)
                result.components(k, i) = static_cast<double>(params.embed(i, k));
    } else {
        // PCA over the D filters
        std::vector<double> mean(f, 0.0);
        for (int i = 0; i < f; ++i) {
            for (int j = 0; j < dim; ++j) mean[i] += params.embed(i, j);
            mean[i] /= dim;
        }
        tensor64 cov({f, f});
        for (int j = 0; j < dim; ++j) {
            std::vector<double> centered(f);
            for (int i = 0; i < f; ++i) centered[i] = params.embed(i, j) - mean[i];
            for (int r = 0; r < f; ++r)
                for (int c = r; c < f; ++c) cov(r, c) += centered[r] * centered[c];
        }
        double trace = 0.0;
        for (int r = 0; r < f; ++r) {
            for (int c = r; c < f; ++c) {
                cov(r, c) /= dim;
                cov(c, r) = cov(r, c);
            }
            trace += cov(r, r);
        }
        auto [evals, evecs] = jacobi_eigh(cov);
        for (int k = 0; k < top_k; ++k) {
            for (int i = 0; i < f; ++i) result.components(k, i) = evecs(i, k);
            result.variance_ratio.push_back(trace > 0 ? std::max(0.0, evals[k]) / trace : 0.0);
        }
    }

    // tile: ceil(sqrt(top_k)) columns, 1px separators
    const int p = cfg.patch, ch = cfg.channels;
    const int tile_cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(top_k))));
    const int tile_rows = (top_k + tile_cols - 1) / tile_cols;
    result.grid = Image(tile_cols * (p + 1) - 1, tile_rows * (p + 1) - 1, ch == 3 ? 3 : 1);
    std::vector<double> block(static_cast<std::size_t>(p) * p * ch);
    std::vector<std::uint8_t> quant;
    for (int k = 0; k < top_k; ++k) {
        for (std::size_t i = 0; i < block.size(); ++i) block[i] = result.components(k, i);
        detail::minmax_to_u8(block, quant);
        const int tr = k / tile_cols, tcid = k % tile_cols;
        for (int r = 0; r < p; ++r)
            for (int c = 0; c < p; ++c)
                for (int z = 0; z < ch; ++z)
                    result.grid.at(tcid * (p + 1) + c, tr * (p + 1) + r, z) =
                        quant[(static_cast<std::size_t>(r) * p + c) * ch + z];
    }
    return result;
}

struct PosSimResult {
    tensor64 grid; // {N, N} cosine similarities between patch position embeddings
    Image tiled;   // one g x g tile per patch position
};

// Cosine similarity of every patch position embedding against all others;
// the class-token row is excluded.
inline PosSimResult pos_embed_similarity(const VitParams<float>& params,
                                         const ModelConfig& cfg) {
    cfg.validate();
    const int n = cfg.n_patches(), dim = cfg.dim;
    if (!params.pos_embed.same_shape({n + 1, dim}))
        throw shape_error("pos_embed_similarity: pos_embed shape mismatch");
    PosSimResult result;
    result.grid = tensor64({n, n});
    std::vector<double> norms(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < dim; ++j) {
            const double v = params.pos_embed(i + 1, j);
            s += v * v;
        }
        norms[i] = std::sqrt(s);
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double dot = 0.0;
            for (int k = 0; k < dim; ++k)
                dot += static_cast<double>(params.pos_embed(i + 1, k)) *
                       static_cast<double>(params.pos_embed(j + 1, k));
            const double denom = norms[i] * norms[j];
            result.grid(i, j) = denom > 0 ? dot / denom : 0.0;
        }

    const int gh = cfg.grid_h(), gw = cfg.grid_w();
    result.tiled = Image(gw * gw, gh * gh, 1);
    for (int i = 0; i < n; ++i) {
        const int tr = i / gw, tcid = i % gw;
        for (int j = 0; j < n; ++j) {
            const int rr = j / gw, cc = j % gw;
            result.tiled.at(tcid * gw + cc, tr * gh + rr) =
                detail::to_u8(255.0 * (result.grid(i, j) + 1.0) / 2.0);
        }
    }
    return result;
}

// Attention-weighted mean pixel distance between patch centers for one
// attention matrix (class token at index 0 is dropped; rows renormalized
// over the patch columns).
inline double attn_distance_from_matrix(const tensor64& attn, int grid_h, int grid_w,
                                        int patch) {
    const int n = grid_h * grid_w;
    if (attn.rank() != 2 || attn.rows() != n + 1 || attn.cols() != n + 1)
        throw shape_error("attn_distance: matrix does not match grid");
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double ci_x = (i % grid_w + 0.5) * patch, ci_y = (i / grid_w + 0.5) * patch;
        double row_sum = 0.0;
        for (int j = 0; j < n; ++j) row_sum += attn(i + 1, j + 1);
        if (row_sum <= 0.0) continue;
        double dist = 0.0;
        for (int j = 0; j < n; ++j) {
            const double cj_x = (j % grid_w + 0.5) * patch, cj_y = (j / grid_w + 0.5) * patch;
            dist += attn(i + 1, j + 1) *
                    std::hypot(ci_x - cj_x, ci_y - cj_y);
        }
        total += dist / row_sum;
    }
    return total / n;
}

struct AttnDistanceReport {
    tensor64 distances; // {layers, heads}, in pixels
};

// Mean attention distance per layer and head, averaged over probe images.
inline AttnDistanceReport mean_attention_distance(const VitParams<float>& params,
                                                  const ModelConfig& cfg,
                                                  const std::vector<Image>& probes) {
    cfg.validate();
    if (probes.empty()) throw shape_error("mean_attention_distance: need >= 1 probe image");
    AttnDistanceReport report;
    report.distances = tensor64({cfg.layers, cfg.heads});
    const int n = cfg.tokens();
    for (const Image& probe : probes) {
        const auto [logits, trace] = forward<float>(probe, params, cfg);
        (void)logits;
        for (int l = 0; l < cfg.layers; ++l)
            for (int h = 0; h < cfg.heads; ++h) {
                tensor64 a({n, n});
                const float* src =
                    trace.attention[l].ptr() + static_cast<std::size_t>(h) * n * n;
                for (std::size_t s = 0; s < a.numel(); ++s) a.data[s] = src[s];
                report.distances(l, h) +=
                    attn_distance_from_matrix(a, cfg.grid_h(), cfg.grid_w(), cfg.patch);
            }
    }
    for (double& v : report.distances.data) v /= static_cast<double>(probes.size());
    return report;
}

namespace detail {

// Pixel-center bilinear upsample of a small grid to H x W.
inline std::vector<double> bilinear_upsample(const tensor64& grid, int out_h, int out_w) {
    const int gh = grid.rows(), gw = grid.cols();
    std::vector<double> out(static_cast<std::size_t>(out_h) * out_w);
    for (int y = 0; y < out_h; ++y) {
        double sy = (y + 0.5) * gh / out_h - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(gh - 1));
        const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, gh - 1);
        const double fy = sy - y0;
        for (int x = 0; x < out_w; ++x) {
            double sx = (x + 0.5) * gw / out_w - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(gw - 1));
            const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, gw - 1);
            const double fx = sx - x0;
            const double top = grid(y0, x0) + fx * (grid(y0, x1) - grid(y0, x0));
            const double bot = grid(y1, x0) + fx * (grid(y1, x1) - grid(y1, x0));
            out[static_cast<std::size_t>(y) * out_w + x] = top + fy * (bot - top);
        }
    }
    return out;
}

} // namespace detail

// Upsample per-patch attention weights to a min-max normalized heatmap.
// Constant grids map to an all-zero image.
inline Image heatmap_from_patch_weights(const tensor64& grid, int out_h, int out_w) {
    if (grid.rank() != 2) throw shape_error("heatmap: expected a patch grid");
    const std::vector<double> up = detail::bilinear_upsample(grid, out_h, out_w);
    std::vector<std::uint8_t> heat;
    detail::minmax_to_u8(up, heat);
    Image out(out_w, out_h, 1);
    out.pixels.assign(heat.begin(), heat.end());
    return out;
}

// Final-layer class-token attention averaged over heads, upsampled to image
// size and min-max normalized. With overlay, the heatmap is blended 50/50
// with the (gray) input.
inline Image attention_map(const VitParams<float>& params, const ModelConfig& cfg,
                           const Image& img, bool overlay = false) {
    cfg.validate();
    const auto [logits, trace] = forward<float>(img, params, cfg);
    (void)logits;
    const int n = cfg.tokens(), N = cfg.n_patches();
    const basic_tensor<float>& attn = trace.attention.back();
    tensor64 grid({cfg.grid_h(), cfg.grid_w()});
    for (int j = 0; j < N; ++j) {
        double v = 0.0;
        for (int h = 0; h < cfg.heads; ++h)
            v += attn.data[(static_cast<std::size_t>(h) * n + 0) * n + (j + 1)];
        grid.data[j] = v / cfg.heads;
    }
    Image out = heatmap_from_patch_weights(grid, cfg.image_h, cfg.image_w);
    if (!overlay) return out;
    for (int y = 0; y < cfg.image_h; ++y)
        for (int x = 0; x < cfg.image_w; ++x) {
            double gray = 0.0;
            for (int c = 0; c < img.channels; ++c) gray += img.at(x, y, c);
            gray /= img.channels;
            out.at(x, y) = detail::to_u8(0.5 * gray + 0.5 * out.at(x, y));
        }
    return out;
}

inline void write_attention_distance_csv(const std::filesystem::path& path,
                                         const AttnDistanceReport& report) {
    std::ostringstream os;
    os << "layer,head,distance_px\n";
    for (int l = 0; l < report.distances.rows(); ++l)
        for (int h = 0; h < report.distances.cols(); ++h)
            os << l << "," << h << "," << strfmt("%.6f", report.distances(l, h)) << "\n";
    write_file_atomic(path, os.str());
}

inline void write_variance_csv(const std::filesystem::path& path,
                               const std::vector<double>& ratios) {
    std::ostringstream os;
    os << "component,variance_ratio\n";
    for (std::size_t i = 0; i < ratios.size(); ++i)
        os << i << "," << strfmt("%.8f", ratios[i]) << "\n";
    write_file_atomic(path, os.str());
}

inline void write_possim_csv(const std::filesystem::path& path, const PosSimResult& result) {
    std::ostringstream os;
    os << "i,j,cosine\n";
    for (int i = 0; i < result.grid.rows(); ++i)
        for (int j = 0; j < result.grid.cols(); ++j)
            os << i << "," << j << "," << strfmt("%.8f", result.grid(i, j)) << "\n";
    write_file_atomic(path, os.str());
}

} // namespace fdsl
