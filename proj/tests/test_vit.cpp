#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fdsl/rng.hpp"
#include "fdsl/vit.hpp"

using namespace fdsl;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_h = cfg.image_w = 8;
    cfg.channels = 1;
    cfg.patch = 4;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.head_dim = 4;
    cfg.layers = 2;
    cfg.classes = 3;
    cfg.mlp_hidden = 16;
    return cfg;
}

Image random_image(const ModelConfig& cfg, std::uint64_t seed) {
    Image img(cfg.image_w, cfg.image_h, cfg.channels);
    Rng rng(seed);
    for (std::uint8_t& p : img.pixels) p = static_cast<std::uint8_t>(rng.index(256));
    return img;
}

// ---- independent re-implementation used as the forward oracle ----
// Plain vector-of-vector double code; the multi-head projection goes through
// an explicit concat matrix rather than per-head blocks.
namespace oracle {

using vec = std::vector<double>;
using mat = std::vector<vec>;

vec layer_norm(const vec& x, const vec& g, const vec& b) {
    const int n = static_cast<int>(x.size());
    double mu = 0;
    for (double v : x) mu += v;
    mu /= n;
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= n;
    vec y(n);
    for (int i = 0; i < n; ++i) y[i] = g[i] * (x[i] - mu) / std::sqrt(var + 1e-5) + b[i];
    return y;
}

vec softmax(vec s) {
    double mx = s[0];
    for (double v : s) mx = std::max(mx, v);
    double sum = 0;
    for (double& v : s) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : s) v /= sum;
    return s;
}

vec forward_logits(const Image& img, const VitParams<double>& p, const ModelConfig& cfg) {
    const int P = cfg.patch, C = cfg.channels, N = cfg.n_patches(), D = cfg.dim;
    const int gw = cfg.image_w / P;
    // patchify
    mat xp(N, vec(P * P * C));
    for (int pr = 0; pr < cfg.image_h / P; ++pr)
        for (int pc = 0; pc < gw; ++pc) {
            vec& row = xp[pr * gw + pc];
            int idx = 0;
            for (int r = 0; r < P; ++r)
                for (int c = 0; c < P; ++c)
                    for (int ch = 0; ch < C; ++ch)
                        row[idx++] = img.at(pc * P + c, pr * P + r, ch) / 255.0;
        }
    // tokens
    mat z(N + 1, vec(D, 0.0));
    for (int j = 0; j < D; ++j) z[0][j] = p.cls_token.data[j];
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < D; ++j) {
            double acc = 0;
            for (std::size_t f = 0; f < xp[i].size(); ++f)
                acc += xp[i][f] * p.embed(static_cast<int>(f), j);
            z[i + 1][j] = acc;
        }
    for (int t = 0; t <= N; ++t)
        for (int j = 0; j < D; ++j) z[t][j] += p.pos_embed(t, j);

    const int h = cfg.heads, d = cfg.head_dim, M = cfg.mlp_hidden;
    for (int l = 0; l < cfg.layers; ++l) {
        const VitLayerParams<double>& lp = p.layers[l];
        mat ln1(N + 1);
        for (int t = 0; t <= N; ++t)
            ln1[t] = layer_norm(z[t], lp.ln1_g.data, lp.ln1_b.data);
        // explicit concat of heads
        mat concat(N + 1, vec(h * d, 0.0));
        for (int head = 0; head < h; ++head) {
            mat q(N + 1, vec(d)), k(N + 1, vec(d)), v(N + 1, vec(d));
            for (int t = 0; t <= N; ++t)
                for (int j = 0; j < d; ++j) {
                    double aq = 0, ak = 0, av = 0;
                    for (int f = 0; f < D; ++f) {
                        const std::size_t off =
                            (static_cast<std::size_t>(head) * D + f) * d + j;
                        aq += ln1[t][f] * lp.wq.data[off];
                        ak += ln1[t][f] * lp.wk.data[off];
                        av += ln1[t][f] * lp.wv.data[off];
                    }
                    q[t][j] = aq;
                    k[t][j] = ak;
                    v[t][j] = av;
                }
            for (int t = 0; t <= N; ++t) {
                vec scores(N + 1);
                for (int u = 0; u <= N; ++u) {
                    double acc = 0;
                    for (int j = 0; j < d; ++j) acc += q[t][j] * k[u][j];
                    scores[u] = acc / std::sqrt(static_cast<double>(d));
                }
                const vec a = softmax(scores);
                for (int j = 0; j < d; ++j) {
                    double acc = 0;
                    for (int u = 0; u <= N; ++u) acc += a[u] * v[u][j];
                    concat[t][head * d + j] = acc;
                }
            }
        }
        for (int t = 0; t <= N; ++t) {
            vec msa_out(D, 0.0);
            for (int j = 0; j < D; ++j) {
                double acc = 0;
                for (int f = 0; f < h * d; ++f) acc += concat[t][f] * lp.wo(f, j);
                msa_out[j] = acc;
            }
            for (int j = 0; j < D; ++j) z[t][j] += msa_out[j];
        }
        mat ln2(N + 1);
        for (int t = 0; t <= N; ++t)
            ln2[t] = layer_norm(z[t], lp.ln2_g.data, lp.ln2_b.data);
        for (int t = 0; t <= N; ++t) {
            vec hidden(M);
            for (int j = 0; j < M; ++j) {
                double acc = lp.mlp_b1.data[j];
                for (int f = 0; f < D; ++f) acc += ln2[t][f] * lp.mlp_w1(f, j);
                hidden[j] = 0.5 * acc * (1.0 + std::erf(acc / std::sqrt(2.0)));
            }
            for (int j = 0; j < D; ++j) {
                double acc = lp.mlp_b2.data[j];
                for (int f = 0; f < M; ++f) acc += hidden[f] * lp.mlp_w2(f, j);
                z[t][j] += acc;
            }
        }
    }
    const vec y = layer_norm(z[0], p.final_g.data, p.final_b.data);
    vec logits(cfg.classes);
    for (int k = 0; k < cfg.classes; ++k) {
        double acc = p.head_b.data[k];
        for (int j = 0; j < cfg.dim; ++j) acc += y[j] * p.head_w(j, k);
        logits[k] = acc;
    }
    return logits;
}

} // namespace oracle
} // namespace

TEST(Patchify, ShapesAndScaling) {
    Image img(32, 32, 1);
    for (std::uint8_t& p : img.pixels) p = 255;
    const tensor32 t = patchify<float>(img, 8);
    ASSERT_EQ(t.shape, (std::vector<int>{16, 64}));
    for (float v : t.data) EXPECT_FLOAT_EQ(v, 1.0f);
}

TEST(Patchify, SinglePatchEqualsFlattenedImage) {
    const Image img = random_image(tiny_config(), 3);
    const tensor32 t = patchify<float>(img, 8);
    ASSERT_EQ(t.shape, (std::vector<int>{1, 64}));
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c)
            EXPECT_FLOAT_EQ(t.data[r * 8 + c], img.at(c, r) / 255.0f);
}

TEST(Patchify, PatchOrderIsRowMajor) {
    Image img(4, 4, 1);
    img.at(2, 0) = 80; // second patch of first patch-row when P=2
    const tensor32 t = patchify<float>(img, 2);
    ASSERT_EQ(t.shape, (std::vector<int>{4, 4}));
    EXPECT_FLOAT_EQ(t(1, 0), 80 / 255.0f);
    EXPECT_THROW(patchify<float>(img, 3), shape_error);
}

TEST(Attention, ZeroQueriesGiveColumnMeans) {
    basic_tensor<double> q({2, 2}), k({2, 2}), v({2, 2}, {1, 3, 5, 7});
    k.data = {0.3, -0.2, 0.9, 0.4};
    const basic_tensor<double> out = attention(q, k, v);
    EXPECT_NEAR(out(0, 0), 3.0, 1e-12);
    EXPECT_NEAR(out(0, 1), 5.0, 1e-12);
    EXPECT_NEAR(out(1, 0), 3.0, 1e-12);
    EXPECT_NEAR(out(1, 1), 5.0, 1e-12);
}

TEST(Attention, SingleKeyReturnsValueRow) {
    basic_tensor<double> q({3, 2}, {1, 2, -1, 0.5, 0, 0});
    basic_tensor<double> k({1, 2}, {0.7, -0.3});
    basic_tensor<double> v({1, 4}, {9, 8, 7, 6});
    const basic_tensor<double> out = attention(q, k, v);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_NEAR(out(i, j), v(0, j), 1e-12);
}

TEST(Attention, MatchesBruteForceThreeTokens) {
    Rng rng(21);
    basic_tensor<double> q({3, 2}), k({3, 2}), v({3, 2});
    for (auto* t : {&q, &k, &v})
        for (double& x : t->data) x = rng.range(-2.0, 2.0);
    const auto [out, weights] = attention_with_weights(q, k, v);

    for (int i = 0; i < 3; ++i) {
        double scores[3], mx = -1e300;
        for (int j = 0; j < 3; ++j) {
            scores[j] = (q(i, 0) * k(j, 0) + q(i, 1) * k(j, 1)) / std::sqrt(2.0);
            mx = std::max(mx, scores[j]);
        }
        double sum = 0;
        for (double& s : scores) {
            s = std::exp(s - mx);
            sum += s;
        }
        for (int j = 0; j < 3; ++j) EXPECT_NEAR(weights(i, j), scores[j] / sum, 1e-12);
        for (int col = 0; col < 2; ++col) {
            double acc = 0;
            for (int j = 0; j < 3; ++j) acc += scores[j] / sum * v(j, col);
            EXPECT_NEAR(out(i, col), acc, 1e-6);
        }
    }
}

TEST(Msa, SingleIdentityHeadReducesToAttention) {
    const int D = 4;
    VitLayerParams<double> lp;
    lp.wq = basic_tensor<double>({1, D, D});
    lp.wk = basic_tensor<double>({1, D, D});
    lp.wv = basic_tensor<double>({1, D, D});
    lp.wo = basic_tensor<double>({D, D});
    for (int i = 0; i < D; ++i) {
        lp.wq.data[i * D + i] = 1.0;
        lp.wk.data[i * D + i] = 1.0;
        lp.wv.data[i * D + i] = 1.0;
        lp.wo(i, i) = 1.0;
    }
    Rng rng(5);
    basic_tensor<double> x({3, D});
    for (double& v : x.data) v = rng.range(-1.0, 1.0);
    const auto [out, attn] = msa(x, lp);
    const basic_tensor<double> direct = attention(x, x, x);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.data[i], direct.data[i], 1e-12);
    // attention rows are a probability distribution
    for (int r = 0; r < 3; ++r) {
        double sum = 0;
        for (int c = 0; c < 3; ++c) {
            EXPECT_GE(attn.data[r * 3 + c], 0.0);
            sum += attn.data[r * 3 + c];
        }
        EXPECT_NEAR(sum, 1.0, 1e-5);
    }
}

TEST(Msa, TwoHeadsMatchHandComputedConcatProject) {
    // n=2 tokens, D=2, h=2, d=1
    VitLayerParams<double> lp;
    lp.wq = basic_tensor<double>({2, 2, 1}, {0.5, -0.25, 1.0, 0.75});
    lp.wk = basic_tensor<double>({2, 2, 1}, {0.1, 0.9, -0.6, 0.2});
    lp.wv = basic_tensor<double>({2, 2, 1}, {1.5, -0.5, 0.3, 0.8});
    lp.wo = basic_tensor<double>({2, 2}, {0.2, -1.0, 0.7, 0.4});
    basic_tensor<double> x({2, 2}, {1.0, -2.0, 0.5, 3.0});

    const auto [out, attn] = msa(x, lp);

    double concat[2][2];
    for (int head = 0; head < 2; ++head) {
        double q[2], k[2], v[2];
        for (int t = 0; t < 2; ++t) {
            q[t] = x(t, 0) * lp.wq.data[head * 2 + 0] + x(t, 1) * lp.wq.data[head * 2 + 1];
            k[t] = x(t, 0) * lp.wk.data[head * 2 + 0] + x(t, 1) * lp.wk.data[head * 2 + 1];
            v[t] = x(t, 0) * lp.wv.data[head * 2 + 0] + x(t, 1) * lp.wv.data[head * 2 + 1];
        }
        for (int t = 0; t < 2; ++t) {
            const double s0 = q[t] * k[0], s1 = q[t] * k[1]; // sqrt(d)=1
            const double m = std::max(s0, s1);
            const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
            const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
            concat[t][head] = a0 * v[0] + a1 * v[1];
            EXPECT_NEAR(attn.data[(head * 2 + t) * 2 + 0], a0, 1e-12);
            EXPECT_NEAR(attn.data[(head * 2 + t) * 2 + 1], a1, 1e-12);
        }
    }
    for (int t = 0; t < 2; ++t)
        for (int j = 0; j < 2; ++j) {
            const double want = concat[t][0] * lp.wo(0, j) + concat[t][1] * lp.wo(1, j);
            EXPECT_NEAR(out(t, j), want, 1e-6);
        }
}

TEST(Forward, AllZeroParamsYieldHeadBias) {
    const ModelConfig cfg = tiny_config();
    VitParams<float> params = VitParams<float>::make_shaped(cfg);
    params.head_b.data = {0.25f, -1.5f, 3.0f};
    for (std::uint64_t seed : {1ull, 2ull}) {
        const auto [logits, trace] = forward<float>(random_image(cfg, seed), params, cfg);
        EXPECT_FLOAT_EQ(logits.data[0], 0.25f);
        EXPECT_FLOAT_EQ(logits.data[1], -1.5f);
        EXPECT_FLOAT_EQ(logits.data[2], 3.0f);
    }
}

TEST(Forward, MatchesIndependentOracle) {
    ModelConfig cfg = tiny_config();
    cfg.layers = 1;
    const VitParams<double> params = init_vit_params<double>(cfg, 404);
    const Image img = random_image(cfg, 7);
    const auto [logits, trace] = forward<double>(img, params, cfg);
    const std::vector<double> want = oracle::forward_logits(img, params, cfg);
    ASSERT_EQ(logits.numel(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(logits.data[i], want[i], 1e-10);

    // float implementation agrees with the double oracle to 1e-5
    const VitParams<float> params32 = params.cast<float>();
    const auto [logits32, trace32] = forward<float>(img, params32, cfg);
    for (std::size_t i = 0; i < want.size(); ++i)
        EXPECT_NEAR(static_cast<double>(logits32.data[i]), want[i], 1e-5);
}

TEST(Forward, TwoLayerOracleAgreesToo) {
    const ModelConfig cfg = tiny_config();
    const VitParams<double> params = init_vit_params<double>(cfg, 808);
    const Image img = random_image(cfg, 13);
    const auto [logits, trace] = forward<double>(img, params, cfg);
    const std::vector<double> want = oracle::forward_logits(img, params, cfg);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(logits.data[i], want[i], 1e-10);
}

TEST(Forward, AttentionRowsAreDistributionsEverywhere) {
    const ModelConfig cfg = tiny_config();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const VitParams<float> params = init_vit_params<float>(cfg, seed);
        const auto [logits, trace] = forward<float>(random_image(cfg, seed + 50), params, cfg);
        const int n = cfg.tokens();
        ASSERT_EQ(trace.attention.size(), static_cast<std::size_t>(cfg.layers));
        for (const tensor32& attn : trace.attention)
            for (int h = 0; h < cfg.heads; ++h)
                for (int r = 0; r < n; ++r) {
                    double sum = 0;
                    for (int c = 0; c < n; ++c) {
                        const float a = attn.data[(static_cast<std::size_t>(h) * n + r) * n + c];
                        EXPECT_GE(a, 0.0f);
                        sum += a;
                    }
                    EXPECT_NEAR(sum, 1.0, 1e-5);
                }
    }
}

TEST(Forward, DeterministicLogits) {
    const ModelConfig cfg = tiny_config();
    const VitParams<float> params = init_vit_params<float>(cfg, 9);
    const Image img = random_image(cfg, 10);
    const auto [a, t1] = forward<float>(img, params, cfg);
    const auto [b, t2] = forward<float>(img, params, cfg);
    EXPECT_EQ(a.data, b.data);
}

TEST(Forward, NonFiniteParamsAbort) {
    const ModelConfig cfg = tiny_config();
    VitParams<float> params = init_vit_params<float>(cfg, 9);
    params.embed.data[0] = std::numeric_limits<float>::infinity();
    EXPECT_THROW(forward<float>(random_image(cfg, 1), params, cfg), nonfinite_error);
}

TEST(Forward, PermutedPatchesWithPermutedPositionsMatch) {
    const ModelConfig cfg = tiny_config(); // N = 4
    const VitParams<float> params = init_vit_params<float>(cfg, 31);
    const Image img = random_image(cfg, 32);
    const tensor32 x_p = patchify<float>(img, cfg.patch);

    const int perm[4] = {2, 0, 3, 1};
    tensor32 x_perm = x_p;
    VitParams<float> params_perm = params;
    const int pd = cfg.patch_dim(), D = cfg.dim;
    for (int i = 0; i < 4; ++i) {
        for (int f = 0; f < pd; ++f) x_perm(i, f) = x_p(perm[i], f);
        for (int j = 0; j < D; ++j)
            params_perm.pos_embed(i + 1, j) = params.pos_embed(perm[i] + 1, j);
    }
    detail::ForwardCache<float> c1, c2;
    detail::forward_cached(x_p, params, cfg, c1);
    detail::forward_cached(x_perm, params_perm, cfg, c2);
    for (std::size_t i = 0; i < c1.logits.numel(); ++i)
        EXPECT_NEAR(c1.logits.data[i], c2.logits.data[i], 1e-5);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    basic_tensor<double> logits({10});
    logits.fill(0.7);
    EXPECT_NEAR(cross_entropy(logits, 4), std::log(10.0), 1e-9);
}

TEST(CrossEntropy, HugeMarginDrivesLossToZero) {
    basic_tensor<double> logits({5});
    logits.fill(-50.0);
    logits.data[2] = 50.0;
    EXPECT_LT(cross_entropy(logits, 2), 1e-12);
}

TEST(CrossEntropy, MatchesNaiveSoftmaxOracle) {
    Rng rng(88);
    for (int rep = 0; rep < 20; ++rep) {
        basic_tensor<double> logits({7});
        for (double& v : logits.data) v = rng.range(-4.0, 4.0);
        const int label = static_cast<int>(rng.index(7));
        double denom = 0;
        for (double v : logits.data) denom += std::exp(v);
        const double want = -std::log(std::exp(logits.data[label]) / denom);
        EXPECT_NEAR(cross_entropy(logits, label), want, 1e-6);
    }
}

TEST(CrossEntropy, ShiftInvariance) {
    Rng rng(89);
    basic_tensor<double> logits({9});
    for (double& v : logits.data) v = rng.range(-3.0, 3.0);
    const double base = cross_entropy(logits, 5);
    for (double shift : {0.1, -2.0, 7.3}) {
        basic_tensor<double> shifted = logits;
        for (double& v : shifted.data) v += shift;
        EXPECT_NEAR(cross_entropy(shifted, 5), base, 1e-6);
    }
    // float path stays within a looser budget
    basic_tensor<float> f({4}, {0.1f, 1.2f, -0.3f, 0.8f});
    basic_tensor<float> fs = f;
    for (float& v : fs.data) v += 3.0f;
    EXPECT_NEAR(cross_entropy(f, 1), cross_entropy(fs, 1), 1e-5);
}

TEST(CrossEntropy, RejectsBadLabel) {
    basic_tensor<float> logits({3});
    EXPECT_THROW(cross_entropy(logits, 3), label_error);
    EXPECT_THROW(cross_entropy(logits, -1), label_error);
}

TEST(Backward, ZeroImageGradFiniteAndReproducible) {
    const ModelConfig cfg = tiny_config();
    const VitParams<float> params = init_vit_params<float>(cfg, 55);
    Image zero(cfg.image_w, cfg.image_h, 1);
    const BackwardResult<float> a = backward<float>(zero, 1, params, cfg);
    const BackwardResult<float> b = backward<float>(zero, 1, params, cfg);
    a.grads.for_each([](const std::string& name, const tensor32& t) {
        SCOPED_TRACE(name);
        EXPECT_NO_THROW(t.check_finite(name));
    });
    EXPECT_EQ(a.grads.cls_token.data, b.grads.cls_token.data);
    EXPECT_EQ(a.loss, b.loss);
}

TEST(Backward, DuplicateSampleDoublesGradientsExactly) {
    const ModelConfig cfg = tiny_config();
    const VitParams<float> params = init_vit_params<float>(cfg, 56);
    const Image img = random_image(cfg, 57);
    const BackwardResult<float> single = backward<float>(img, 2, params, cfg);
    // accumulate the same sample twice
    VitParams<float> sum = backward<float>(img, 2, params, cfg).grads;
    const BackwardResult<float> second = backward<float>(img, 2, params, cfg);
    std::vector<const tensor32*> addend = second.grads.collect();
    std::size_t ti = 0;
    sum.for_each([&](const std::string&, tensor32& t) {
        for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] += addend[ti]->data[i];
        ++ti;
    });
    std::vector<const tensor32*> ones = single.grads.collect();
    std::vector<const tensor32*> twos = sum.collect();
    for (std::size_t t = 0; t < ones.size(); ++t)
        for (std::size_t i = 0; i < ones[t]->numel(); ++i)
            EXPECT_EQ(2.0f * ones[t]->data[i], twos[t]->data[i]);
}

TEST(GradCheck, TinyModelBelowTolerance) {
    const GradCheckReport report = grad_check(tiny_config(), 2025, 1e-3);
    EXPECT_LT(report.worst_rel_err, 1e-3);
    // every tensor is covered
    EXPECT_EQ(report.entries.size(), 3u + 12u * 2u + 4u);
    for (const GradCheckEntry& e : report.entries) {
        SCOPED_TRACE(e.name);
        EXPECT_LT(e.max_rel_err, 1e-3);
    }
}

TEST(GradCheck, SameSeedSameReport) {
    const GradCheckReport a = grad_check(tiny_config(), 7, 1e-3, 2);
    const GradCheckReport b = grad_check(tiny_config(), 7, 1e-3, 1);
    ASSERT_EQ(a.entries.size(), b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        EXPECT_EQ(a.entries[i].name, b.entries[i].name);
        EXPECT_EQ(a.entries[i].max_rel_err, b.entries[i].max_rel_err);
    }
}

TEST(GradCheck, DetectsCorruptedGradients) {
    const std::vector<std::string> names = {"w"};
    const std::vector<std::vector<double>> analytic = {{1.0, -0.5, 0.25}};
    std::vector<std::vector<double>> numeric = analytic;
    EXPECT_LT(compare_gradients(names, analytic, numeric).worst_rel_err, 1e-12);
    numeric[0][1] = -0.5 * 1.10; // 10% corruption
    EXPECT_GT(compare_gradients(names, analytic, numeric).worst_rel_err, 1e-2);
}

TEST(PosEmbedInterp, SameGridIsIdentity) {
    basic_tensor<float> pos({5, 3});
    Rng rng(2);
    for (float& v : pos.data) v = static_cast<float>(rng.range(-1.0, 1.0));
    const basic_tensor<float> out = interpolate_pos_embed(pos, 2, 2, 2, 2);
    EXPECT_EQ(out.data, pos.data);
}

TEST(PosEmbedInterp, UpsampleCenterIsCornerAverage) {
    basic_tensor<float> pos({5, 1});
    pos.data = {9.0f, 1.0f, 2.0f, 3.0f, 4.0f}; // cls, then 2x2 grid
    const basic_tensor<float> out = interpolate_pos_embed(pos, 2, 2, 3, 3);
    ASSERT_EQ(out.rows(), 10);
    EXPECT_FLOAT_EQ(out.data[0], 9.0f);          // class row untouched
    EXPECT_FLOAT_EQ(out.data[1 + 4 * 1], 2.5f);  // center = mean of 1,2,3,4
    EXPECT_FLOAT_EQ(out.data[1 + 0], 1.0f);      // corners preserved
    EXPECT_FLOAT_EQ(out.data[1 + 8], 4.0f);
}
