#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fdsl/common.hpp"
#include "fdsl/rng.hpp"

namespace fdsl {

// One 2-D affine map: (x, y) -> (a x + b y + e, c x + d y + f).
struct AffineMap {
    double a = 0, b = 0, c = 0, d = 0, e = 0, f = 0;

    double det() const { return a * d - b * c; }
    bool finite() const {
        return std::isfinite(a) && std::isfinite(b) && std::isfinite(c) && std::isfinite(d) &&
               std::isfinite(e) && std::isfinite(f);
    }
};

constexpr int kMinMaps = 2;
constexpr int kMaxMaps = 8;
constexpr double kProbFloor = 0.01;
constexpr int kBurnIn = 100;
constexpr double kDivergenceBound = 1e6;
constexpr double kRenderMargin = 0.05;
constexpr int kMaxSearchAttempts = 10000;

// Fixed seed for accept-gate renders in search_category. Re-verifying an
// accepted system with this seed reproduces the gate decision exactly.
constexpr std::uint64_t kVerifySeed = 0x5eedf111;

// Map-selection probabilities from |det|, floored at kProbFloor so every map
// stays reachable. Floored entries are pinned at exactly kProbFloor and the
// rest renormalized until no entry falls below the floor.
inline std::vector<double> det_probs(const std::vector<AffineMap>& maps) {
    const std::size_t m = maps.size();
    std::vector<double> p(m, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        p[i] = std::fabs(maps[i].det());
        sum += p[i];
    }
    if (sum < 1e-12) {
        std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(m));
        return p;
    }
    for (double& v : p) v /= sum;
    std::vector<bool> floored(m, false);
    for (std::size_t pass = 0; pass < m; ++pass) {
        bool changed = false;
        int n_floored = 0;
        for (std::size_t i = 0; i < m; ++i) {
            if (!floored[i] && p[i] < kProbFloor) {
                floored[i] = true;
                changed = true;
            }
            if (floored[i]) ++n_floored;
        }
        if (!changed && pass > 0) break;
        double free_sum = 0.0;
        for (std::size_t i = 0; i < m; ++i)
            if (!floored[i]) free_sum += p[i];
        const double target = 1.0 - kProbFloor * n_floored;
        for (std::size_t i = 0; i < m; ++i) {
            if (floored[i])
                p[i] = kProbFloor;
            else
                p[i] = p[i] * target / free_sum;
        }
        if (!changed) break;
    }
    return p;
}

// An iterated function system: the maps plus their sampling probabilities.
// One accepted system defines one dataset category.
struct IFSSystem {
    std::vector<AffineMap> maps;
    std::vector<double> probs;

    void validate() const {
        if (maps.size() < kMinMaps || maps.size() > kMaxMaps)
            throw shape_error("IFSSystem: need 2..8 maps");
        if (probs.size() != maps.size()) throw shape_error("IFSSystem: probs length mismatch");
        double sum = 0.0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            if (!maps[i].finite()) throw shape_error("IFSSystem: non-finite coefficient");
            if (probs[i] < kProbFloor - 1e-12) throw shape_error("IFSSystem: prob below floor");
            sum += probs[i];
        }
        if (std::fabs(sum - 1.0) > 1e-9) throw shape_error("IFSSystem: probs do not sum to 1");
    }
};

struct PointCloud {
    std::vector<double> xs;
    std::vector<double> ys;

    std::size_t size() const { return xs.size(); }
};

// Draw a random system: six coefficients per map uniform in [-1, 1],
// probabilities from the determinant rule.
inline IFSSystem sample_ifs(std::uint64_t rng_seed, int n_maps) {
    if (n_maps < kMinMaps || n_maps > kMaxMaps)
        throw shape_error("sample_ifs: n_maps must be 2..8");
    Rng rng(rng_seed);
    IFSSystem sys;
    sys.maps.resize(n_maps);
    for (AffineMap& m : sys.maps) {
        m.a = rng.range(-1.0, 1.0);
        m.b = rng.range(-1.0, 1.0);
        m.c = rng.range(-1.0, 1.0);
        m.d = rng.range(-1.0, 1.0);
        m.e = rng.range(-1.0, 1.0);
        m.f = rng.range(-1.0, 1.0);
    }
    sys.probs = det_probs(sys.maps);
    return sys;
}

// Chaos game. Starts at the origin, discards kBurnIn points, rescales the
// remainder so the bounding box fills the unit square with a 5% margin on
// each axis. Throws divergent_error if the orbit escapes kDivergenceBound or
// the attractor collapses to (near) a point or a line.
inline PointCloud iterate(const IFSSystem& system, long long n_points, std::uint64_t seed) {
    system.validate();
    if (n_points < 1) throw shape_error("iterate: n_points must be >= 1");

    std::vector<double> cum(system.probs.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < system.probs.size(); ++i) {
        acc += system.probs[i];
        cum[i] = acc;
    }
    cum.back() = 1.0;

    const long long kept = n_points > kBurnIn ? n_points - kBurnIn : 0;
    PointCloud cloud;
    cloud.xs.reserve(kept);
    cloud.ys.reserve(kept);

    Rng rng(seed);
    double x = 0.0, y = 0.0;
    for (long long i = 0; i < n_points; ++i) {
        const double u = rng.unit();
        const std::size_t k =
            std::upper_bound(cum.begin(), cum.end(), u) - cum.begin();
        const AffineMap& m = system.maps[std::min(k, cum.size() - 1)];
        const double nx = m.a * x + m.b * y + m.e;
        const double ny = m.c * x + m.d * y + m.f;
        x = nx;
        y = ny;
        if (std::fabs(x) > kDivergenceBound || std::fabs(y) > kDivergenceBound ||
            !std::isfinite(x) || !std::isfinite(y))
            throw divergent_error("iterate: orbit escaped");
        if (i >= kBurnIn) {
            cloud.xs.push_back(x);
            cloud.ys.push_back(y);
        }
    }

    if (cloud.size() == 0) throw divergent_error("iterate: no points after burn-in");
    double min_x = cloud.xs[0], max_x = cloud.xs[0];
    double min_y = cloud.ys[0], max_y = cloud.ys[0];
    for (std::size_t i = 1; i < cloud.size(); ++i) {
        min_x = std::min(min_x, cloud.xs[i]);
        max_x = std::max(max_x, cloud.xs[i]);
        min_y = std::min(min_y, cloud.ys[i]);
        max_y = std::max(max_y, cloud.ys[i]);
    }
    const double span_x = max_x - min_x, span_y = max_y - min_y;
    if (span_x < 1e-9 || span_y < 1e-9)
        throw divergent_error("iterate: degenerate attractor");
    const double inner = 1.0 - 2.0 * kRenderMargin;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        cloud.xs[i] = kRenderMargin + inner * (cloud.xs[i] - min_x) / span_x;
        cloud.ys[i] = kRenderMargin + inner * (cloud.ys[i] - min_y) / span_y;
    }
    return cloud;
}

// Fraction of grid pixels hit by at least one point (1x1 point rendering).
inline double filling_rate(const PointCloud& cloud, int width, int height) {
    if (width < 1 || height < 1) throw shape_error("filling_rate: bad grid");
    std::vector<std::uint8_t> occupied(static_cast<std::size_t>(width) * height, 0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const int px = std::clamp(static_cast<int>(cloud.xs[i] * width), 0, width - 1);
        const int py = std::clamp(static_cast<int>(cloud.ys[i] * height), 0, height - 1);
        std::uint8_t& cell = occupied[static_cast<std::size_t>(py) * width + px];
        count += cell == 0;
        cell = 1;
    }
    return static_cast<double>(count) / (static_cast<double>(width) * height);
}

// Rejection-sampled category search: draw systems until one renders with a
// filling rate at or above the threshold. The gate render uses kVerifySeed,
// so re-rendering an accepted system with that seed reproduces the decision.
inline IFSSystem search_category(std::uint64_t rng_seed, double threshold, long long n_points,
                                 int gate_width = 256, int gate_height = 256) {
    if (threshold < 0.0 || threshold >= 1.0)
        throw shape_error("search_category: threshold must be in [0, 1)");
    for (int attempt = 0; attempt < kMaxSearchAttempts; ++attempt) {
        const std::uint64_t attempt_seed = mix_seed(rng_seed, 0xA77Eu, attempt);
        Rng pick(mix_seed(attempt_seed, 0x01u));
        const int n_maps = kMinMaps + static_cast<int>(pick.index(kMaxMaps - kMinMaps + 1));
        const IFSSystem sys = sample_ifs(mix_seed(attempt_seed, 0x02u), n_maps);
        try {
            const PointCloud cloud = iterate(sys, n_points, kVerifySeed);
            if (filling_rate(cloud, gate_width, gate_height) >= threshold) return sys;
        } catch (const divergent_error&) {
            // rejected; keep searching
        }
    }
    throw search_exhausted_error(
        strfmt("search_category: %d consecutive rejections (threshold %.4f)",
               kMaxSearchAttempts, threshold));
}

} // namespace fdsl
