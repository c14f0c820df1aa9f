#pragma once

#include <array>
#include <cstdint>

#include "fdsl/common.hpp"
#include "fdsl/rng.hpp"

namespace fdsl {

// The ten 3x3 stamp masks used for patch rendering. They are derived once
// from kPatchSetSeed with the rule in default_patch_set() and never change,
// so datasets are reproducible across machines; a unit test freezes the
// resulting bit patterns.
struct PatchSet {
    // masks[i][r * 3 + c] is 0 or 1
    std::array<std::array<std::uint8_t, 9>, 10> masks{};

    void validate() const {
        for (std::size_t i = 0; i < masks.size(); ++i) {
            int set = 0;
            for (std::uint8_t v : masks[i]) {
                if (v > 1) throw shape_error("PatchSet: mask cells must be 0/1");
                set += v;
            }
            if (set == 0) throw shape_error("PatchSet: empty mask");
            for (std::size_t j = 0; j < i; ++j)
                if (masks[i] == masks[j]) throw shape_error("PatchSet: duplicate masks");
        }
    }
};

constexpr std::uint64_t kPatchSetSeed = 0x50415443; // "PATC"

// Each mask: nine fair coin flips, redrawn until the mask is non-empty and
// distinct from all earlier masks.
inline const PatchSet& default_patch_set() {
    static const PatchSet set = [] {
        PatchSet s;
        Rng rng(kPatchSetSeed);
        for (std::size_t i = 0; i < s.masks.size(); ++i) {
            for (;;) {
                std::array<std::uint8_t, 9> mask{};
                int bits = 0;
                for (std::uint8_t& cell : mask) {
                    cell = rng.unit() < 0.5 ? 1 : 0;
                    bits += cell;
                }
                bool duplicate = false;
                for (std::size_t j = 0; j < i; ++j) duplicate |= (s.masks[j] == mask);
                if (bits > 0 && !duplicate) {
                    s.masks[i] = mask;
                    break;
                }
            }
        }
        s.validate();
        return s;
    }();
    return set;
}

} // namespace fdsl
