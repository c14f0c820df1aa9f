#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fdsl/checkpoint.hpp"
#include "fdsl/common.hpp"
#include "fdsl/dataset.hpp"
#include "fdsl/image.hpp"
#include "fdsl/optim.hpp"
#include "fdsl/parallel.hpp"
#include "fdsl/rng.hpp"
#include "fdsl/vit.hpp"

namespace fdsl {

struct Sample {
    Image image;
    int label = 0;
};

struct LabeledSet {
    std::vector<Sample> samples;
    int classes = 0;
};

// Replicate grayscale to the model's channel count when needed.
inline Image adapt_channels(const Image& img, int channels) {
    if (img.channels == channels) return img;
    if (img.channels == 1 && channels == 3) {
        Image out(img.width, img.height, 3);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const std::uint8_t v = img.at(x, y);
                out.at(x, y, 0) = out.at(x, y, 1) = out.at(x, y, 2) = v;
            }
        return out;
    }
    throw config_error("adapt_channels: cannot map image channels to model channels");
}

// Reads a generated dataset; the label of every instance is its category id.
inline LabeledSet load_fdsl_dataset(const std::filesystem::path& dir) {
    const DatasetManifest manifest = read_manifest(dir);
    LabeledSet set;
    std::set<int> ids;
    for (const CategoryRecord& c : manifest.categories) ids.insert(c.category_id);
    set.classes = static_cast<int>(ids.size());
    int expect = 0;
    for (int id : ids)
        if (id != expect++)
            throw config_error("load_fdsl_dataset: category ids are not contiguous from 0");
    set.samples.reserve(manifest.instances.size());
    for (const InstanceRecord& r : manifest.instances) {
        if (r.category_id < 0 || r.category_id >= set.classes)
            throw config_error("load_fdsl_dataset: label out of range");
        set.samples.push_back({read_pnm(dir / r.rel_path), r.category_id});
    }
    return set;
}

// CIFAR-10 binary batches: per record one label byte then 3072 pixel bytes
// (32x32, full R plane, then G, then B).
inline void load_cifar_file(const std::filesystem::path& path, LabeledSet& set) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    constexpr int kSide = 32, kPlane = kSide * kSide;
    std::vector<char> record(1 + 3 * kPlane);
    while (in.read(record.data(), record.size())) {
        Sample s;
        s.label = static_cast<std::uint8_t>(record[0]);
        if (s.label > 9) throw io_error("cifar: label byte out of range in " + path.string());
        s.image = Image(kSide, kSide, 3);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < kSide; ++y)
                for (int x = 0; x < kSide; ++x)
                    s.image.at(x, y, c) =
                        static_cast<std::uint8_t>(record[1 + c * kPlane + y * kSide + x]);
        set.samples.push_back(std::move(s));
    }
    if (in.gcount() != 0 && in.gcount() != static_cast<std::streamsize>(record.size()))
        throw io_error("cifar: truncated record in " + path.string());
    set.classes = 10;
}

inline LabeledSet load_cifar_train(const std::filesystem::path& dir, int per_class_limit = 0) {
    LabeledSet set;
    for (int i = 1; i <= 5; ++i) load_cifar_file(dir / strfmt("data_batch_%d.bin", i), set);
    if (per_class_limit > 0) {
        std::vector<int> counts(10, 0);
        std::vector<Sample> kept;
        for (Sample& s : set.samples)
            if (counts[s.label]++ < per_class_limit) kept.push_back(std::move(s));
        set.samples = std::move(kept);
    }
    return set;
}

inline LabeledSet load_cifar_test(const std::filesystem::path& dir) {
    LabeledSet set;
    load_cifar_file(dir / "test_batch.bin", set);
    return set;
}

struct TrainConfig {
    int epochs = 300;
    int batch = 32;
    double lr = 5e-4;
    double weight_decay = 0.05;
    int warmup_epochs = 5;
    std::uint64_t seed = 42;
    bool deterministic = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    bool hflip = true;          // random horizontal flip augmentation
    int save_every = 0;         // checkpoint every N epochs (0 = final only)
    double holdout = 0.0;       // fraction held out for per-epoch eval
    int threads = 0;
    double stop_at_train_acc = 0.0; // stop once reached (0 = run all epochs)

    void validate() const {
        if (epochs < 0) throw config_error("TrainConfig: epochs must be >= 0");
        if (batch < 1) throw config_error("TrainConfig: batch must be >= 1");
        if (lr < 0) throw config_error("TrainConfig: lr must be >= 0");
        if (holdout < 0 || holdout >= 1) throw config_error("TrainConfig: holdout in [0,1)");
    }
};

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double eval_acc = 0.0;
    bool has_eval = false;
    double seconds = 0.0;
};

using MetricsLog = std::vector<EpochMetrics>;

inline void write_metrics_csv(const std::filesystem::path& path, const MetricsLog& log) {
    std::ostringstream os;
    os << "epoch,train_loss,train_acc,eval_acc,seconds\n";
    for (const EpochMetrics& m : log) {
        os << m.epoch << "," << strfmt("%.6f", m.train_loss) << ","
           << strfmt("%.6f", m.train_acc) << ",";
        if (m.has_eval) os << strfmt("%.6f", m.eval_acc);
        os << "," << strfmt("%.3f", m.seconds) << "\n";
    }
    write_file_atomic(path, os.str());
}

struct TrainResult {
    VitParams<float> params;
    ModelConfig model;
    MetricsLog log;
    bool diverged = false;
};

namespace detail {

inline void check_sample_dims(const Sample& s, const ModelConfig& cfg) {
    if (s.image.width != cfg.image_w || s.image.height != cfg.image_h)
        throw shape_error("dataset image size does not match model config");
    if (s.label < 0 || s.label >= cfg.classes)
        throw label_error("dataset label out of range for model config");
}

// Deterministic Fisher-Yates with the project RNG.
inline void shuffle_indices(std::vector<int>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.index(i)]);
}

} // namespace detail

// Top-1 accuracy over the set, forward only.
inline double evaluate(const VitParams<float>& params, const ModelConfig& cfg,
                       const LabeledSet& set, int threads = 0) {
    cfg.validate();
    if (set.samples.empty()) throw config_error("evaluate: empty dataset");
    std::vector<std::uint8_t> correct(set.samples.size(), 0);
    parallel_for(set.samples.size(), resolve_threads(threads),
                 [&](std::size_t lo, std::size_t hi) {
                     detail::ForwardCache<float> cache;
                     for (std::size_t i = lo; i < hi; ++i) {
                         const Sample& s = set.samples[i];
                         const Image img = adapt_channels(s.image, cfg.channels);
                         detail::check_sample_dims({img, s.label}, cfg);
                         const tensor32 x_p = patchify<float>(img, cfg.patch);
                         detail::forward_cached(x_p, params, cfg, cache);
                         int best = 0;
                         for (int k = 1; k < cfg.classes; ++k)
                             if (cache.logits.data[k] > cache.logits.data[best]) best = k;
                         correct[i] = best == s.label;
                     }
                 });
    std::size_t hits = 0;
    for (std::uint8_t c : correct) hits += c;
    return static_cast<double>(hits) / static_cast<double>(set.samples.size());
}

namespace detail {

// Shared epoch loop for pre-training and fine-tuning. Per-sample gradients
// within a batch are computed in parallel into per-slot buffers and reduced
// in sample order, so deterministic runs do not depend on the worker count.
inline TrainResult train_loop(VitParams<float> params, const ModelConfig& cfg,
                              const LabeledSet& train_set, const LabeledSet* eval_set,
                              const TrainConfig& tc,
                              const std::filesystem::path& save_dir = {}) {
    cfg.validate();
    tc.validate();
    if (train_set.samples.empty()) throw config_error("train: empty dataset");
    const int threads = resolve_threads(tc.threads);
    const std::size_t n = train_set.samples.size();
    const int batch = std::min<int>(tc.batch, static_cast<int>(n));
    const long long steps_per_epoch = (n + batch - 1) / batch;
    const long long total_steps = steps_per_epoch * tc.epochs;
    const long long warmup_steps = steps_per_epoch * tc.warmup_epochs;

    AdamW optimizer(params, {tc.lr, tc.weight_decay, tc.beta1, tc.beta2, tc.adam_eps});
    VitParams<float> grad_sum = VitParams<float>::make_shaped(cfg);
    std::vector<VitParams<float>> slot_grads(batch, VitParams<float>::make_shaped(cfg));
    std::vector<float> slot_loss(batch, 0.0f);
    std::vector<std::uint8_t> slot_correct(batch, 0);

    TrainResult result;
    result.model = cfg;
    VitParams<float> last_good = params;

    std::vector<int> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);

    long long step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng(mix_seed(tc.seed, 0x0e9dcau, static_cast<std::uint64_t>(epoch)));
        shuffle_indices(order, shuffle_rng);
        std::vector<std::uint8_t> flips(n, 0);
        if (tc.hflip) {
            Rng flip_rng(mix_seed(tc.seed, 0xf11b5u, static_cast<std::uint64_t>(epoch)));
            for (std::size_t i = 0; i < n; ++i) flips[i] = flip_rng.unit() < 0.5;
        }

        double loss_sum = 0.0;
        std::size_t correct = 0;
        bool nonfinite = false;
        for (std::size_t start = 0; start < n && !nonfinite; start += batch) {
            const int bsz = static_cast<int>(std::min<std::size_t>(batch, n - start));
            std::exception_ptr error;
            std::mutex error_mutex;
            parallel_for(static_cast<std::size_t>(bsz), threads,
                         [&](std::size_t lo, std::size_t hi) {
                             ForwardCache<float> cache;
                             for (std::size_t b = lo; b < hi; ++b) {
                                 try {
                                     const int si = order[start + b];
                                     const Sample& s = train_set.samples[si];
                                     Image img = adapt_channels(s.image, cfg.channels);
                                     if (flips[start + b]) img = apply_flip(img, 1);
                                     check_sample_dims({img, s.label}, cfg);
                                     const tensor32 x_p = patchify<float>(img, cfg.patch);
                                     slot_loss[b] = backward_cached(x_p, s.label, params, cfg,
                                                                    cache, slot_grads[b]);
                                     int best = 0;
                                     for (int k = 1; k < cfg.classes; ++k)
                                         if (cache.logits.data[k] > cache.logits.data[best])
                                             best = k;
                                     slot_correct[b] = best == s.label;
                                 } catch (...) {
                                     std::lock_guard<std::mutex> lock(error_mutex);
                                     if (!error) error = std::current_exception();
                                     return;
                                 }
                             }
                         });
            if (error) {
                try {
                    std::rethrow_exception(error);
                } catch (const nonfinite_error&) {
                    nonfinite = true;
                    break;
                }
            }

            // fixed-order reduction: slot 0, 1, 2, ...
            grad_sum.for_each([](const std::string&, tensor32& t) { t.fill(0.0f); });
            std::vector<tensor32*> acc;
            grad_sum.for_each([&acc](const std::string&, tensor32& t) { acc.push_back(&t); });
            for (int b = 0; b < bsz; ++b) {
                std::size_t ti = 0;
                slot_grads[b].for_each([&](const std::string&, const tensor32& g) {
                    float* dst = acc[ti++]->ptr();
                    const float* src = g.ptr();
                    for (std::size_t j = 0; j < g.numel(); ++j) dst[j] += src[j];
                });
                loss_sum += slot_loss[b];
                correct += slot_correct[b];
            }
            const float inv = 1.0f / static_cast<float>(bsz);
            grad_sum.for_each([inv](const std::string&, tensor32& t) {
                for (float& v : t.data) v *= inv;
            });
            optimizer.step(params, grad_sum, cosine_warmup_lr(step, total_steps, warmup_steps,
                                                              tc.lr));
            ++step;
        }

        if (nonfinite) {
            // training diverged: report with the last completed epoch's weights
            result.params = std::move(last_good);
            result.diverged = true;
            return result;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = loss_sum / static_cast<double>(n);
        em.train_acc = static_cast<double>(correct) / static_cast<double>(n);
        if (eval_set && !eval_set->samples.empty()) {
            em.eval_acc = evaluate(params, cfg, *eval_set, threads);
            em.has_eval = true;
        }
        em.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(em);
        last_good = params;

        if (!save_dir.empty() && tc.save_every > 0 && (epoch + 1) % tc.save_every == 0)
            save_checkpoint(save_dir / strfmt("ckpt_epoch%04d.fdsl", epoch + 1), params, cfg);
        if (tc.stop_at_train_acc > 0.0 && em.train_acc >= tc.stop_at_train_acc) break;
    }

    result.params = std::move(params);
    return result;
}

} // namespace detail

// FDSL pre-training: predict the generating category from the rendered
// image. Optionally holds out a deterministic fraction for per-epoch eval.
inline TrainResult pretrain(const LabeledSet& data, const TrainConfig& tc,
                            const ModelConfig& cfg, const std::filesystem::path& save_dir = {}) {
    cfg.validate();
    tc.validate();
    if (data.classes != cfg.classes)
        throw config_error("pretrain: model classes must equal dataset categories");
    VitParams<float> params = init_vit_params<float>(cfg, mix_seed(tc.seed, 0x141Au));
    if (tc.holdout > 0.0) {
        LabeledSet train_split, eval_split;
        train_split.classes = eval_split.classes = data.classes;
        Rng rng(mix_seed(tc.seed, 0x407d0u));
        std::vector<int> idx(data.samples.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        detail::shuffle_indices(idx, rng);
        const std::size_t n_eval =
            static_cast<std::size_t>(tc.holdout * static_cast<double>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const Sample& s = data.samples[idx[i]];
            (i < n_eval ? eval_split : train_split).samples.push_back(s);
        }
        return detail::train_loop(std::move(params), cfg, train_split, &eval_split, tc,
                                  save_dir);
    }
    return detail::train_loop(std::move(params), cfg, data, nullptr, tc, save_dir);
}

// Adapt pre-trained weights to a new input resolution / class count: every
// backbone tensor is kept, position embeddings are regridded bilinearly, and
// the classifier head is freshly initialized.
inline VitParams<float> adapt_for_finetune(const VitParams<float>& pretrained,
                                           const ModelConfig& old_cfg,
                                           const ModelConfig& new_cfg, std::uint64_t head_seed) {
    old_cfg.validate();
    new_cfg.validate();
    if (old_cfg.patch != new_cfg.patch || old_cfg.dim != new_cfg.dim ||
        old_cfg.heads != new_cfg.heads || old_cfg.head_dim != new_cfg.head_dim ||
        old_cfg.layers != new_cfg.layers || old_cfg.mlp_hidden != new_cfg.mlp_hidden ||
        old_cfg.channels != new_cfg.channels)
        throw shape_error("finetune: backbone config mismatch (only resolution and class "
                          "count may change)");
    VitParams<float> out = pretrained;
    if (old_cfg.image_h != new_cfg.image_h || old_cfg.image_w != new_cfg.image_w)
        out.pos_embed = interpolate_pos_embed(pretrained.pos_embed, old_cfg.grid_h(),
                                              old_cfg.grid_w(), new_cfg.grid_h(),
                                              new_cfg.grid_w());
    out.head_w = tensor32({new_cfg.dim, new_cfg.classes});
    out.head_b = tensor32({new_cfg.classes});
    Rng rng(mix_seed(head_seed, 0x4eadu));
    for (float& v : out.head_w.data) v = static_cast<float>(rng.trunc_gauss(0.02));
    return out;
}

// Full fine-tuning (all layers updated) with a fresh head.
inline TrainResult finetune(const VitParams<float>& pretrained, const ModelConfig& old_cfg,
                            const LabeledSet& data, const LabeledSet* eval_set,
                            const TrainConfig& tc, ModelConfig new_cfg,
                            const std::filesystem::path& save_dir = {}) {
    if (data.samples.empty()) throw config_error("finetune: empty dataset");
    new_cfg.classes = data.classes;
    VitParams<float> params =
        adapt_for_finetune(pretrained, old_cfg, new_cfg, mix_seed(tc.seed, 0x6eadu));
    return detail::train_loop(std::move(params), new_cfg, data, eval_set, tc, save_dir);
}

} // namespace fdsl
