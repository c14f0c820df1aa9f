#pragma once

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fdsl/analysis.hpp"
#include "fdsl/checkpoint.hpp"
#include "fdsl/dataset.hpp"
#include "fdsl/train.hpp"
#include "fdsl/vit.hpp"

namespace fdsl::cli {

namespace detail {

inline std::string result_kv(const std::string& key, const std::string& value) {
    return key + "=" + value;
}

struct ModelFlags {
    int img_size = 64;
    int channels = 1;
    int patch = 8;
    int dim = 64;
    int heads = 4;
    int head_dim = 16;
    int layers = 4;
    int mlp_hidden = 128;

    void attach(CLI::App* cmd) {
        cmd->add_option("--img-size", img_size, "Model input resolution")->check(CLI::Range(8, 1024));
        cmd->add_option("--channels", channels, "Model input channels (1 or 3)")
            ->check(CLI::IsMember({1, 3}));
        cmd->add_option("--patch-size", patch, "ViT patch size")->check(CLI::Range(1, 64));
        cmd->add_option("--dim", dim, "Token embedding width")->check(CLI::Range(8, 2048));
        cmd->add_option("--heads", heads, "Attention heads")->check(CLI::Range(1, 64));
        cmd->add_option("--head-dim", head_dim, "Per-head width")->check(CLI::Range(1, 256));
        cmd->add_option("--layers", layers, "Encoder depth")->check(CLI::Range(1, 48));
        cmd->add_option("--mlp-hidden", mlp_hidden, "MLP hidden width")
            ->check(CLI::Range(1, 8192));
    }

    ModelConfig to_config(int classes) const {
        ModelConfig cfg;
        cfg.image_h = cfg.image_w = img_size;
        cfg.channels = channels;
        cfg.patch = patch;
        cfg.dim = dim;
        cfg.heads = heads;
        cfg.head_dim = head_dim;
        cfg.layers = layers;
        cfg.classes = classes;
        cfg.mlp_hidden = mlp_hidden;
        return cfg;
    }
};

struct TrainFlags {
    TrainConfig tc;
    bool no_augment = false;

    void attach(CLI::App* cmd, int default_epochs) {
        tc.epochs = default_epochs;
        cmd->add_option("--epochs", tc.epochs, "Training epochs")->check(CLI::Range(0, 100000));
        cmd->add_option("--batch", tc.batch, "Batch size")->check(CLI::Range(1, 8192));
        cmd->add_option("--lr", tc.lr, "Peak learning rate")
            ->check(CLI::Range(0.0, 10.0));
        cmd->add_option("--wd", tc.weight_decay, "Decoupled weight decay")
            ->check(CLI::Range(0.0, 10.0));
        cmd->add_option("--warmup", tc.warmup_epochs, "Linear warmup epochs")
            ->check(CLI::Range(0, 10000));
        cmd->add_option("--seed", tc.seed, "Training seed");
        cmd->add_flag("--deterministic,!--no-deterministic", tc.deterministic,
                      "Fixed-order reductions (on by default)");
        cmd->add_flag("--no-augment", no_augment, "Disable random horizontal flips");
        cmd->add_option("--save-every", tc.save_every, "Checkpoint every N epochs")
            ->check(CLI::Range(0, 100000));
        cmd->add_option("--holdout", tc.holdout, "Eval holdout fraction")
            ->check(CLI::Range(0.0, 0.99));
        cmd->add_option("--threads", tc.threads, "Worker threads (0 = auto)")
            ->check(CLI::Range(0, 1024));
        cmd->add_option("--stop-at-acc", tc.stop_at_train_acc,
                        "Stop once train accuracy reaches this value")
            ->check(CLI::Range(0.0, 1.0));
    }

    TrainConfig config() const {
        TrainConfig out = tc;
        out.hflip = !no_augment;
        return out;
    }
};

inline std::vector<Image> pick_probes(const std::filesystem::path& data_dir, int count,
                                      const ModelConfig& cfg) {
    const LabeledSet set = load_fdsl_dataset(data_dir);
    if (set.samples.empty()) throw config_error("probe dataset is empty");
    Rng rng(0x9b0beull);
    std::vector<int> idx(set.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
    std::vector<Image> probes;
    const int n = std::min<int>(count, static_cast<int>(idx.size()));
    for (int i = 0; i < n; ++i)
        probes.push_back(adapt_channels(set.samples[idx[i]].image, cfg.channels));
    return probes;
}

} // namespace detail

// Dispatches gen | pretrain | finetune | evaluate | gradcheck | analyze.
// Returns 0 on success, 1 on usage errors, 2 on runtime failures. On success
// a single machine-readable `RESULT key=value ...` line goes to `out`.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
    CLI::App app{"Fractal-pretrained vision transformer toolkit"};
    app.set_config("--config", "", "Flat key=value config file; flags take precedence");

    // --- gen ---
    CLI::App* gen = app.add_subcommand("gen", "Generate a fractal category dataset");
    int gen_categories = 10, gen_instances = 1000;
    RenderConfig render;
    double gen_threshold = 0.05;
    std::uint64_t gen_seed = 1;
    std::string gen_out;
    int gen_threads = 0;
    bool gen_dry = false;
    std::string render_mode = "patch", color_mode = "gray";
    gen->add_option("--categories", gen_categories, "Number of categories")
        ->check(CLI::Range(1, 1000000));
    gen->add_option("--instances", gen_instances, "Instances per category")
        ->check(CLI::Range(1, kInstancesPerCategory));
    gen->add_option("--size", render.image_size, "Rendered image size")
        ->check(CLI::Range(32, 4096));
    gen->add_option("--threshold", gen_threshold, "Filling-rate acceptance threshold")
        ->check(CLI::Range(0.0, 0.999));
    gen->add_option("--render", render_mode, "point | patch")
        ->check(CLI::IsMember({"point", "patch"}));
    gen->add_option("--colormode", color_mode, "gray | color")
        ->check(CLI::IsMember({"gray", "color"}));
    gen->add_option("--points", render.n_points, "Chaos-game iterations per render")
        ->check(CLI::Range(static_cast<long long>(1000), static_cast<long long>(100000000)));
    gen->add_option("--seed", gen_seed, "Global dataset seed");
    gen->add_option("--color-seed", render.color_seed, "Color stream seed");
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--threads", gen_threads, "Worker threads (0 = auto)")
        ->check(CLI::Range(0, 1024));
    gen->add_flag("--dry-run", gen_dry, "Validate flags, write nothing");

    // --- pretrain ---
    CLI::App* pre = app.add_subcommand("pretrain", "Pre-train on a generated dataset");
    std::string pre_data, pre_out;
    detail::ModelFlags pre_model;
    detail::TrainFlags pre_train;
    bool pre_dry = false;
    pre->add_option("--data", pre_data, "Dataset directory (manifest.csv)")
        ->required()
        ->check(CLI::ExistingDirectory);
    pre->add_option("--out", pre_out, "Output directory")->required();
    pre_model.attach(pre);
    pre_train.attach(pre, 300);
    pre->add_flag("--dry-run", pre_dry, "Validate flags, write nothing");

    // --- finetune ---
    CLI::App* fin = app.add_subcommand("finetune", "Fine-tune a checkpoint on a labeled set");
    std::string fin_ckpt, fin_data, fin_cifar, fin_eval_data, fin_cifar_test, fin_out;
    int fin_per_class = 0;
    detail::TrainFlags fin_train;
    bool fin_dry = false;
    fin->add_option("--ckpt", fin_ckpt, "Pre-trained checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    fin->add_option("--data", fin_data, "Fractal dataset directory")
        ->check(CLI::ExistingDirectory);
    fin->add_option("--cifar-train", fin_cifar, "CIFAR-10 directory with data_batch_*.bin")
        ->check(CLI::ExistingDirectory);
    fin->add_option("--eval-data", fin_eval_data, "Fractal eval dataset directory")
        ->check(CLI::ExistingDirectory);
    fin->add_option("--cifar-test", fin_cifar_test, "CIFAR-10 directory with test_batch.bin")
        ->check(CLI::ExistingDirectory);
    fin->add_option("--per-class-limit", fin_per_class,
                    "Keep at most N training samples per class")
        ->check(CLI::Range(0, 100000));
    fin->add_option("--out", fin_out, "Output directory")->required();
    fin_train.attach(fin, 50);
    fin->add_flag("--dry-run", fin_dry, "Validate flags, write nothing");

    // --- evaluate ---
    CLI::App* eva = app.add_subcommand("evaluate", "Top-1 accuracy of a checkpoint");
    std::string eva_ckpt, eva_data, eva_cifar;
    int eva_threads = 0;
    eva->add_option("--ckpt", eva_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    eva->add_option("--data", eva_data, "Fractal dataset directory")
        ->check(CLI::ExistingDirectory);
    eva->add_option("--cifar-test", eva_cifar, "CIFAR-10 directory with test_batch.bin")
        ->check(CLI::ExistingDirectory);
    eva->add_option("--threads", eva_threads, "Worker threads (0 = auto)")
        ->check(CLI::Range(0, 1024));

    // --- gradcheck ---
    CLI::App* grd = app.add_subcommand("gradcheck",
                                       "Analytic vs finite-difference gradients");
    detail::ModelFlags grd_model;
    int grd_classes = 10, grd_threads = 0;
    std::uint64_t grd_seed = 7;
    double grd_eps = 1e-3;
    std::string grd_preset = "nano";
    grd->add_option("--preset", grd_preset, "Model preset")->check(CLI::IsMember({"nano"}));
    grd_model.attach(grd);
    grd->add_option("--classes", grd_classes, "Class count")->check(CLI::Range(2, 10000));
    grd->add_option("--seed", grd_seed, "Probe seed");
    grd->add_option("--eps", grd_eps, "Finite-difference step")
        ->check(CLI::Range(1e-8, 1e-1));
    grd->add_option("--threads", grd_threads, "Worker threads (0 = auto)")
        ->check(CLI::Range(0, 1024));

    // --- analyze ---
    CLI::App* ana = app.add_subcommand("analyze", "Checkpoint diagnostics");
    std::string ana_ckpt, ana_what, ana_image, ana_probe_data, ana_out;
    int ana_probes = 32, ana_topk = 16;
    bool ana_raw = false, ana_overlay = false;
    ana->add_option("--ckpt", ana_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    ana->add_option("--what", ana_what, "filters | possim | attdist | attmap")
        ->required()
        ->check(CLI::IsMember({"filters", "possim", "attdist", "attmap"}));
    ana->add_option("--image", ana_image, "Input image (attmap, or single attdist probe)")
        ->check(CLI::ExistingFile);
    ana->add_option("--probe-data", ana_probe_data, "Dataset to draw attdist probes from")
        ->check(CLI::ExistingDirectory);
    ana->add_option("--probes", ana_probes, "Probe image count")->check(CLI::Range(1, 4096));
    ana->add_option("--topk", ana_topk, "Filter components to show")
        ->check(CLI::Range(1, 1024));
    ana->add_flag("--raw-filters", ana_raw, "Show raw embedding columns instead of PCA");
    ana->add_flag("--overlay", ana_overlay, "Also write the 50% overlay attention map");
    ana->add_option("--out", ana_out, "Output directory")->required();

    app.require_subcommand(1);

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        err << app.help();
        return 1;
    }

    try {
        if (app.got_subcommand(gen)) {
            render.mode = render_mode == "patch" ? RenderMode::patch : RenderMode::point;
            render.color = color_mode == "color" ? ColorMode::color : ColorMode::grayscale;
            render.validate();
            if (gen_dry) {
                out << "RESULT dry_run=1 categories=" << gen_categories
                    << " instances=" << gen_instances << "\n";
                return 0;
            }
            const DatasetManifest manifest =
                generate_dataset(gen_categories, gen_instances, render, gen_threshold,
                                 gen_seed, gen_out, gen_threads);
            out << "RESULT categories=" << gen_categories << " instances=" << gen_instances
                << " images=" << manifest.instances.size() << " out=" << gen_out << "\n";
            return 0;
        }

        if (app.got_subcommand(pre)) {
            if (pre_dry) {
                if (!std::filesystem::exists(std::filesystem::path(pre_data) / "manifest.csv"))
                    throw io_error("no manifest.csv under " + pre_data);
                out << "RESULT dry_run=1 data=" << pre_data << "\n";
                return 0;
            }
            const LabeledSet data = load_fdsl_dataset(pre_data);
            if (data.samples.empty()) throw config_error("pretrain: dataset is empty");
            ModelConfig cfg = pre_model.to_config(data.classes);
            cfg.image_h = cfg.image_w = data.samples[0].image.width;
            if (data.samples[0].image.height != data.samples[0].image.width)
                throw config_error("pretrain: non-square dataset images");
            std::filesystem::create_directories(pre_out);
            const TrainResult result = pretrain(data, pre_train.config(), cfg, pre_out);
            save_checkpoint(std::filesystem::path(pre_out) / "ckpt.fdsl", result.params,
                            result.model);
            write_metrics_csv(std::filesystem::path(pre_out) / "metrics.csv", result.log);
            const EpochMetrics last = result.log.empty() ? EpochMetrics{} : result.log.back();
            out << "RESULT epochs=" << result.log.size() << " final_train_loss="
                << strfmt("%.6f", last.train_loss) << " final_train_acc="
                << strfmt("%.6f", last.train_acc)
                << " params=" << result.params.param_count()
                << (result.diverged ? " diverged=1" : "") << " ckpt=" << pre_out
                << "/ckpt.fdsl\n";
            return 0;
        }

        if (app.got_subcommand(fin)) {
            if (fin_data.empty() == fin_cifar.empty())
                throw config_error("finetune: pass exactly one of --data / --cifar-train");
            if (fin_dry) {
                out << "RESULT dry_run=1 ckpt=" << fin_ckpt << "\n";
                return 0;
            }
            auto [params, old_cfg] = load_checkpoint(fin_ckpt);
            LabeledSet data = fin_data.empty() ? load_cifar_train(fin_cifar, fin_per_class)
                                               : load_fdsl_dataset(fin_data);
            if (data.samples.empty()) throw config_error("finetune: dataset is empty");
            LabeledSet eval_set;
            const bool has_eval = !fin_eval_data.empty() || !fin_cifar_test.empty();
            if (!fin_eval_data.empty()) eval_set = load_fdsl_dataset(fin_eval_data);
            else if (!fin_cifar_test.empty()) eval_set = load_cifar_test(fin_cifar_test);
            ModelConfig new_cfg = old_cfg;
            new_cfg.image_h = data.samples[0].image.height;
            new_cfg.image_w = data.samples[0].image.width;
            new_cfg.channels = std::max(old_cfg.channels, data.samples[0].image.channels);
            if (new_cfg.channels != old_cfg.channels)
                throw config_error("finetune: dataset channels exceed checkpoint channels");
            std::filesystem::create_directories(fin_out);
            const TrainResult result =
                finetune(params, old_cfg, data, has_eval ? &eval_set : nullptr,
                         fin_train.config(), new_cfg, fin_out);
            save_checkpoint(std::filesystem::path(fin_out) / "ckpt.fdsl", result.params,
                            result.model);
            write_metrics_csv(std::filesystem::path(fin_out) / "metrics.csv", result.log);
            const EpochMetrics last = result.log.empty() ? EpochMetrics{} : result.log.back();
            out << "RESULT epochs=" << result.log.size() << " final_train_acc="
                << strfmt("%.6f", last.train_acc);
            if (last.has_eval) out << " final_eval_acc=" << strfmt("%.6f", last.eval_acc);
            out << (result.diverged ? " diverged=1" : "") << " ckpt=" << fin_out
                << "/ckpt.fdsl\n";
            return 0;
        }

        if (app.got_subcommand(eva)) {
            if (eva_data.empty() == eva_cifar.empty())
                throw config_error("evaluate: pass exactly one of --data / --cifar-test");
            auto [params, cfg] = load_checkpoint(eva_ckpt);
            const LabeledSet data =
                eva_data.empty() ? load_cifar_test(eva_cifar) : load_fdsl_dataset(eva_data);
            const double acc = evaluate(params, cfg, data, eva_threads);
            out << "RESULT accuracy=" << strfmt("%.6f", acc) << " samples="
                << data.samples.size() << "\n";
            return 0;
        }

        if (app.got_subcommand(grd)) {
            const ModelConfig cfg = grd_model.to_config(grd_classes);
            const GradCheckReport report = grad_check(cfg, grd_seed, grd_eps, grd_threads);
            std::string worst = "none";
            for (const GradCheckEntry& e : report.entries)
                if (e.max_rel_err == report.worst_rel_err) {
                    worst = e.name;
                    break;
                }
            out << "RESULT max_rel_err=" << strfmt("%.3e", report.worst_rel_err)
                << " worst_tensor=" << worst << " tensors=" << report.entries.size() << "\n";
            return 0;
        }

        if (app.got_subcommand(ana)) {
            auto [params, cfg] = load_checkpoint(ana_ckpt);
            std::filesystem::create_directories(ana_out);
            const std::filesystem::path out_dir(ana_out);
            if (ana_what == "filters") {
                const FiltersResult fr = embedding_filters(params, cfg, ana_topk, ana_raw);
                const std::string name = cfg.channels == 3 ? "filters.ppm" : "filters.pgm";
                write_pnm(out_dir / name, fr.grid);
                if (!ana_raw) write_variance_csv(out_dir / "variance.csv", fr.variance_ratio);
                out << "RESULT what=filters out=" << (out_dir / name).string() << "\n";
            } else if (ana_what == "possim") {
                const PosSimResult pr = pos_embed_similarity(params, cfg);
                write_pnm(out_dir / "possim.pgm", pr.tiled);
                write_possim_csv(out_dir / "possim.csv", pr);
                out << "RESULT what=possim out=" << (out_dir / "possim.pgm").string() << "\n";
            } else if (ana_what == "attdist") {
                std::vector<Image> probes;
                if (!ana_image.empty())
                    probes.push_back(adapt_channels(read_pnm(ana_image), cfg.channels));
                else if (!ana_probe_data.empty())
                    probes = detail::pick_probes(ana_probe_data, ana_probes, cfg);
                else
                    throw config_error("attdist: pass --image or --probe-data");
                const AttnDistanceReport report = mean_attention_distance(params, cfg, probes);
                write_attention_distance_csv(out_dir / "attdist.csv", report);
                out << "RESULT what=attdist probes=" << probes.size() << " out="
                    << (out_dir / "attdist.csv").string() << "\n";
            } else {
                if (ana_image.empty()) throw config_error("attmap: --image is required");
                const Image img = adapt_channels(read_pnm(ana_image), cfg.channels);
                write_pnm(out_dir / "attmap.pgm", attention_map(params, cfg, img, false));
                if (ana_overlay)
                    write_pnm(out_dir / "attmap_overlay.pgm",
                              attention_map(params, cfg, img, true));
                out << "RESULT what=attmap out=" << (out_dir / "attmap.pgm").string() << "\n";
            }
            return 0;
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    err << "error: no subcommand\n";
    return 1;
}

inline int run_main(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(std::move(args));
}

} // namespace fdsl::cli
