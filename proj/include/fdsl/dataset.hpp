#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fdsl/common.hpp"
#include "fdsl/ifs.hpp"
#include "fdsl/image.hpp"
#include "fdsl/parallel.hpp"
#include "fdsl/patches.hpp"
#include "fdsl/rng.hpp"

namespace fdsl {

// Identifies one of the 1000 = 25 * 4 * 10 instances within a category.
struct InstanceSpec {
    int variant = 0;  // 0..24
    int flip = 0;     // 0..3
    int patch_id = 0; // 0..9

    bool valid() const {
        return variant >= 0 && variant < 25 && flip >= 0 && flip < 4 && patch_id >= 0 &&
               patch_id < 10;
    }
};

constexpr int kVariantsPerCategory = 25;
constexpr int kFlipsPerVariant = 4;
constexpr int kPatchesPerFlip = 10;
constexpr int kInstancesPerCategory =
    kVariantsPerCategory * kFlipsPerVariant * kPatchesPerFlip;

// Canonical enumeration order: variant-major, then flip, then patch.
inline int instance_index(const InstanceSpec& spec) {
    return spec.variant * kFlipsPerVariant * kPatchesPerFlip + spec.flip * kPatchesPerFlip +
           spec.patch_id;
}

inline InstanceSpec spec_from_index(int index) {
    InstanceSpec s;
    s.patch_id = index % kPatchesPerFlip;
    s.flip = (index / kPatchesPerFlip) % kFlipsPerVariant;
    s.variant = index / (kPatchesPerFlip * kFlipsPerVariant);
    return s;
}

// The first n specs of the canonical order; a subset is always a prefix.
inline std::vector<InstanceSpec> enumerate_instance_specs(int n) {
    if (n < 1 || n > kInstancesPerCategory)
        throw shape_error("enumerate_instance_specs: n must be 1..1000");
    std::vector<InstanceSpec> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) out.push_back(spec_from_index(i));
    return out;
}

enum class RenderMode { point, patch };
enum class ColorMode { grayscale, color };

struct RenderConfig {
    int image_size = 256;
    RenderMode mode = RenderMode::patch;
    ColorMode color = ColorMode::grayscale;
    long long n_points = 100000;
    std::uint64_t color_seed = 0;

    void validate() const {
        if (image_size < 32) throw shape_error("RenderConfig: image_size must be >= 32");
        if (n_points < 1000) throw shape_error("RenderConfig: n_points must be >= 1000");
    }
};

// Default perturbation weights; symmetric +-10% / +-20% keeps the general
// shape of the category while changing the fine detail.
inline const std::array<double, 4>& default_weights() {
    static const std::array<double, 4> w = {0.8, 0.9, 1.1, 1.2};
    return w;
}

// Copy of the system with exactly one coefficient of one map multiplied by
// weight; probabilities recomputed by the determinant rule.
inline IFSSystem vary_params(const IFSSystem& system, int map_index, int param_index,
                             double weight) {
    if (map_index < 0 || map_index >= static_cast<int>(system.maps.size()))
        throw shape_error("vary_params: map_index out of range");
    if (param_index < 0 || param_index > 5)
        throw shape_error("vary_params: param_index must be 0..5");
    IFSSystem out = system;
    AffineMap& m = out.maps[map_index];
    double* fields[6] = {&m.a, &m.b, &m.c, &m.d, &m.e, &m.f};
    *fields[param_index] *= weight;
    out.probs = det_probs(out.maps);
    return out;
}

// The 25 intra-category systems: the original plus one per
// (parameter, weight) pair applied to map 0.
inline std::vector<IFSSystem> enumerate_variants(const IFSSystem& system,
                                                 const std::array<double, 4>& weights) {
    std::vector<IFSSystem> out;
    out.reserve(kVariantsPerCategory);
    out.push_back(system);
    for (int param = 0; param < 6; ++param)
        for (double w : weights) out.push_back(vary_params(system, 0, param, w));
    return out;
}

namespace detail {

// Uniform color on the 6-bit-per-channel cube, bits replicated to 8, redrawn
// while all channels are below 32 so stamps stay visible on black.
inline std::array<std::uint8_t, 3> next_color(Rng& rng) {
    for (;;) {
        std::array<std::uint8_t, 3> c{};
        for (std::uint8_t& ch : c) {
            const std::uint8_t level = static_cast<std::uint8_t>(rng.index(64));
            ch = static_cast<std::uint8_t>((level << 2) | (level >> 4));
        }
        if (c[0] >= 32 || c[1] >= 32 || c[2] >= 32) return c;
    }
}

inline void stamp(Image& img, int px, int py, const std::array<std::uint8_t, 3>& rgb) {
    if (px < 0 || px >= img.width || py < 0 || py >= img.height) return;
    if (img.channels == 1) {
        img.at(px, py) = 255;
    } else {
        for (int c = 0; c < 3; ++c) img.at(px, py, c) = rgb[c];
    }
}

// Rasterize a normalized cloud by the spec's patch/flip recipe. The color
// stream is consumed once per point whether or not the stamp lands in-bounds,
// so color assignment does not depend on image size.
inline Image rasterize_cloud(const PointCloud& cloud, const InstanceSpec& spec,
                             const RenderConfig& cfg, const PatchSet& patches,
                             std::uint64_t color_stream_seed) {
    const int size = cfg.image_size;
    Image img(size, size, cfg.color == ColorMode::color ? 3 : 1);
    Rng color_rng(color_stream_seed);
    const std::array<std::uint8_t, 9>& mask = patches.masks[spec.patch_id];
    std::array<std::uint8_t, 3> rgb = {255, 255, 255};
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const int px = std::clamp(static_cast<int>(cloud.xs[i] * size), 0, size - 1);
        const int py = std::clamp(static_cast<int>(cloud.ys[i] * size), 0, size - 1);
        if (cfg.color == ColorMode::color) rgb = next_color(color_rng);
        if (cfg.mode == RenderMode::point) {
            stamp(img, px, py, rgb);
        } else {
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (mask[(dy + 1) * 3 + (dx + 1)]) stamp(img, px + dx, py + dy, rgb);
        }
    }
    return apply_flip(img, spec.flip);
}

inline std::uint64_t color_stream_seed(const RenderConfig& cfg, std::uint64_t geometry_seed,
                                       const InstanceSpec& spec) {
    return mix_seed(cfg.color_seed, geometry_seed, 0xC0104u,
                    static_cast<std::uint64_t>(spec.flip),
                    static_cast<std::uint64_t>(spec.patch_id));
}

} // namespace detail

// Render a single instance from a (varied) system. Divergence propagates to
// the caller; generate_dataset handles retries with bumped seeds.
inline Image render_instance(const IFSSystem& system, const InstanceSpec& spec,
                             const RenderConfig& cfg, const PatchSet& patches,
                             std::uint64_t seed) {
    if (!spec.valid()) throw shape_error("render_instance: invalid InstanceSpec");
    cfg.validate();
    const PointCloud cloud = iterate(system, cfg.n_points, seed);
    return detail::rasterize_cloud(cloud, spec, cfg, patches,
                                   detail::color_stream_seed(cfg, seed, spec));
}

struct CategoryRecord {
    int category_id = 0;
    IFSSystem system;
};

struct InstanceRecord {
    int category_id = 0;
    InstanceSpec spec;
    std::string rel_path;
    // Seed bump applied when the varied system diverged; -1 means the render
    // fell back to the unvaried category system.
    int seed_bump = 0;
};

struct DatasetManifest {
    RenderConfig cfg;
    double threshold = 0.05;
    std::uint64_t global_seed = 0;
    int format_version = 1;
    std::vector<CategoryRecord> categories;
    std::vector<InstanceRecord> instances;
};

namespace detail {

constexpr int kMaxSeedBumps = 32;

inline std::uint64_t category_seed(std::uint64_t global_seed, int category) {
    return mix_seed(global_seed, 0xCA7u, static_cast<std::uint64_t>(category));
}

inline std::uint64_t variant_geometry_seed(std::uint64_t cat_seed, int variant, int bump) {
    return mix_seed(cat_seed, 0x9E0u, static_cast<std::uint64_t>(variant),
                    static_cast<std::uint64_t>(bump));
}

struct VariantCloud {
    PointCloud cloud;
    std::uint64_t geometry_seed = 0;
    int seed_bump = 0;
};

// Iterate one variant, bumping the seed on divergence. If every bump
// diverges the unvaried category system is used instead (it is known to
// converge under kVerifySeed from the accept gate).
inline VariantCloud variant_cloud(const std::vector<IFSSystem>& variants, int variant,
                                  std::uint64_t cat_seed, long long n_points) {
    for (int bump = 0; bump < kMaxSeedBumps; ++bump) {
        const std::uint64_t seed = variant_geometry_seed(cat_seed, variant, bump);
        try {
            return {iterate(variants[variant], n_points, seed), seed, bump};
        } catch (const divergent_error&) {
        }
    }
    return {iterate(variants[0], n_points, kVerifySeed), kVerifySeed, -1};
}

inline std::string category_dir_name(int category) { return strfmt("cat%05d", category); }

inline std::string instance_file_name(const InstanceSpec& spec, ColorMode color) {
    return strfmt("ins%04d.%s", instance_index(spec),
                  color == ColorMode::color ? "ppm" : "pgm");
}

inline std::string format_double(double v) { return strfmt("%.17g", v); }

struct CategoryOutput {
    CategoryRecord category;
    std::vector<InstanceRecord> instances;
};

inline CategoryOutput generate_category(int category, int n_instances, const RenderConfig& cfg,
                                        double threshold, std::uint64_t global_seed,
                                        const std::filesystem::path& out_dir) {
    const std::uint64_t cat_seed = category_seed(global_seed, category);
    IFSSystem system;
    try {
        system = search_category(cat_seed, threshold, cfg.n_points, cfg.image_size,
                                 cfg.image_size);
    } catch (const search_exhausted_error& e) {
        throw search_exhausted_error(strfmt("category %d: %s", category, e.what()));
    }
    const std::vector<IFSSystem> variants = enumerate_variants(system, default_weights());
    const PatchSet& patches = default_patch_set();

    const std::filesystem::path cat_dir = out_dir / category_dir_name(category);
    std::filesystem::create_directories(cat_dir);

    CategoryOutput out;
    out.category = {category, system};

    const std::vector<InstanceSpec> specs = enumerate_instance_specs(n_instances);
    std::optional<VariantCloud> current;
    int current_variant = -1;
    for (const InstanceSpec& spec : specs) {
        if (spec.variant != current_variant) {
            current = variant_cloud(variants, spec.variant, cat_seed, cfg.n_points);
            current_variant = spec.variant;
        }
        const Image img =
            rasterize_cloud(current->cloud, spec, cfg, patches,
                            color_stream_seed(cfg, current->geometry_seed, spec));
        const std::string file = instance_file_name(spec, cfg.color);
        write_pnm(cat_dir / file, img);
        out.instances.push_back(
            {category, spec, category_dir_name(category) + "/" + file, current->seed_bump});
    }
    return out;
}

} // namespace detail

inline void write_manifest(const std::filesystem::path& out_dir, const DatasetManifest& m) {
    {
        std::ostringstream os;
        os << "category_id,variant,flip,patch_id,relative_path,seed_bump\n";
        for (const InstanceRecord& r : m.instances)
            os << r.category_id << "," << r.spec.variant << "," << r.spec.flip << ","
               << r.spec.patch_id << "," << r.rel_path << "," << r.seed_bump << "\n";
        write_file_atomic(out_dir / "manifest.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "category_id,map_index,a,b,c,d,e,f,p\n";
        for (const CategoryRecord& c : m.categories)
            for (std::size_t i = 0; i < c.system.maps.size(); ++i) {
                const AffineMap& map = c.system.maps[i];
                os << c.category_id << "," << i << "," << detail::format_double(map.a) << ","
                   << detail::format_double(map.b) << "," << detail::format_double(map.c) << ","
                   << detail::format_double(map.d) << "," << detail::format_double(map.e) << ","
                   << detail::format_double(map.f) << ","
                   << detail::format_double(c.system.probs[i]) << "\n";
            }
        write_file_atomic(out_dir / "categories.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "format_version=" << m.format_version << "\n";
        os << "global_seed=" << m.global_seed << "\n";
        os << "threshold=" << detail::format_double(m.threshold) << "\n";
        os << "image_size=" << m.cfg.image_size << "\n";
        os << "mode=" << (m.cfg.mode == RenderMode::patch ? "patch" : "point") << "\n";
        os << "colormode=" << (m.cfg.color == ColorMode::color ? "color" : "grayscale") << "\n";
        os << "n_points=" << m.cfg.n_points << "\n";
        os << "color_seed=" << m.cfg.color_seed << "\n";
        write_file_atomic(out_dir / "meta.txt", os.str());
    }
}

// Generates n_categories x n_instances images under out_dir plus the
// manifest files. Categories are independent given (global_seed, k), so the
// worker count never changes the output bytes.
inline DatasetManifest generate_dataset(int n_categories, int n_instances,
                                        const RenderConfig& cfg, double threshold,
                                        std::uint64_t global_seed,
                                        const std::filesystem::path& out_dir, int threads = 0) {
    if (n_categories < 1) throw shape_error("generate_dataset: n_categories must be >= 1");
    if (n_instances < 1 || n_instances > kInstancesPerCategory)
        throw shape_error("generate_dataset: n_instances must be 1..1000");
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create " + out_dir.string() + ": " + ec.message());

    std::vector<detail::CategoryOutput> outputs(n_categories);
    std::mutex error_mutex;
    std::exception_ptr first_error;
    parallel_for(static_cast<std::size_t>(n_categories), resolve_threads(threads),
                 [&](std::size_t lo, std::size_t hi) {
                     for (std::size_t k = lo; k < hi; ++k) {
                         try {
                             outputs[k] = detail::generate_category(
                                 static_cast<int>(k), n_instances, cfg, threshold, global_seed,
                                 out_dir);
                         } catch (...) {
                             std::lock_guard<std::mutex> lock(error_mutex);
                             if (!first_error) first_error = std::current_exception();
                             return;
                         }
                     }
                 });
    if (first_error) std::rethrow_exception(first_error);

    DatasetManifest manifest;
    manifest.cfg = cfg;
    manifest.threshold = threshold;
    manifest.global_seed = global_seed;
    for (detail::CategoryOutput& out : outputs) {
        manifest.categories.push_back(std::move(out.category));
        for (InstanceRecord& r : out.instances) manifest.instances.push_back(std::move(r));
    }
    write_manifest(out_dir, manifest);
    return manifest;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

} // namespace detail

// Reads manifest.csv / categories.csv / meta.txt back into a DatasetManifest.
inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
    DatasetManifest m;
    {
        std::ifstream in(dir / "meta.txt");
        if (!in) throw io_error("cannot open " + (dir / "meta.txt").string());
        std::string line;
        while (std::getline(in, line)) {
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(0, eq);
            const std::string value = line.substr(eq + 1);
            if (key == "format_version") m.format_version = std::stoi(value);
            else if (key == "global_seed") m.global_seed = std::stoull(value);
            else if (key == "threshold") m.threshold = std::stod(value);
            else if (key == "image_size") m.cfg.image_size = std::stoi(value);
            else if (key == "mode")
                m.cfg.mode = value == "patch" ? RenderMode::patch : RenderMode::point;
            else if (key == "colormode")
                m.cfg.color = value == "color" ? ColorMode::color : ColorMode::grayscale;
            else if (key == "n_points") m.cfg.n_points = std::stoll(value);
            else if (key == "color_seed") m.cfg.color_seed = std::stoull(value);
        }
    }
    {
        std::ifstream in(dir / "categories.csv");
        if (!in) throw io_error("cannot open " + (dir / "categories.csv").string());
        std::string line;
        std::getline(in, line); // header
        std::map<int, IFSSystem> systems;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto f = detail::split_csv_line(line);
            if (f.size() != 9) throw io_error("categories.csv: bad row");
            const int id = std::stoi(f[0]);
            IFSSystem& sys = systems[id];
            sys.maps.push_back({std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                                std::stod(f[5]), std::stod(f[6]), std::stod(f[7])});
            sys.probs.push_back(std::stod(f[8]));
        }
        for (auto& [id, sys] : systems) m.categories.push_back({id, std::move(sys)});
    }
    {
        std::ifstream in(dir / "manifest.csv");
        if (!in) throw io_error("cannot open " + (dir / "manifest.csv").string());
        std::string line;
        std::getline(in, line); // header
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto f = detail::split_csv_line(line);
            if (f.size() != 6) throw io_error("manifest.csv: bad row");
            InstanceRecord r;
            r.category_id = std::stoi(f[0]);
            r.spec = {std::stoi(f[1]), std::stoi(f[2]), std::stoi(f[3])};
            r.rel_path = f[4];
            r.seed_bump = std::stoi(f[5]);
            m.instances.push_back(std::move(r));
        }
    }
    return m;
}

} // namespace fdsl
