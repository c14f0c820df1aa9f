#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fdsl/common.hpp"
#include "fdsl/image.hpp"
#include "fdsl/vit.hpp"

namespace fdsl {

// Checkpoint file layout (all integers little-endian):
//   magic "FDSL" | u32 format version | tensors
//   per tensor: u32 name length | name bytes | u32 rank | u32 dims... |
//               raw float32 data
// The first tensor is named "config" and carries the ModelConfig as ten
// float-encoded integers so a checkpoint is self-describing.
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format requires a little-endian host");

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), 4);
}

inline void put_tensor(std::string& out, const std::string& name, const tensor32& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
}

struct Reader {
    std::string bytes;
    std::size_t pos = 0;

    std::uint32_t u32() {
        if (pos + 4 > bytes.size()) throw io_error("checkpoint: truncated");
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::string str(std::size_t n) {
        if (pos + n > bytes.size()) throw io_error("checkpoint: truncated");
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
    tensor32 tensor(const std::vector<int>& dims) {
        tensor32 t(dims);
        const std::size_t n = t.numel() * sizeof(float);
        if (pos + n > bytes.size()) throw io_error("checkpoint: truncated tensor data");
        std::memcpy(t.data.data(), bytes.data() + pos, n);
        pos += n;
        return t;
    }
    bool done() const { return pos >= bytes.size(); }
};

inline tensor32 config_tensor(const ModelConfig& cfg) {
    tensor32 t({10});
    const int v[10] = {cfg.image_h, cfg.image_w,  cfg.channels, cfg.patch,   cfg.dim,
                       cfg.heads,   cfg.head_dim, cfg.layers,   cfg.classes, cfg.mlp_hidden};
    for (int i = 0; i < 10; ++i) t.data[i] = static_cast<float>(v[i]);
    return t;
}

inline ModelConfig config_from_tensor(const tensor32& t) {
    if (!t.same_shape({10})) throw io_error("checkpoint: bad config tensor");
    ModelConfig cfg;
    int* v[10] = {&cfg.image_h, &cfg.image_w,  &cfg.channels, &cfg.patch,   &cfg.dim,
                  &cfg.heads,   &cfg.head_dim, &cfg.layers,   &cfg.classes, &cfg.mlp_hidden};
    for (int i = 0; i < 10; ++i) *v[i] = static_cast<int>(t.data[i]);
    cfg.validate();
    return cfg;
}

} // namespace detail

inline std::string encode_checkpoint(const VitParams<float>& params, const ModelConfig& cfg) {
    std::string out = "FDSL";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_tensor(out, "config", detail::config_tensor(cfg));
    params.for_each([&out](const std::string& name, const tensor32& t) {
        detail::put_tensor(out, name, t);
    });
    return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const VitParams<float>& params,
                            const ModelConfig& cfg) {
    write_file_atomic(path, encode_checkpoint(params, cfg));
}

inline std::pair<VitParams<float>, ModelConfig> load_checkpoint(
    const std::filesystem::path& path) {
    detail::Reader r;
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw io_error("cannot open " + path.string());
        std::ostringstream buf;
        buf << in.rdbuf();
        r.bytes = buf.str();
    }
    if (r.str(4) != "FDSL") throw io_error("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw io_error(strfmt("checkpoint: unsupported version %u", version));

    ModelConfig cfg;
    VitParams<float> params;
    bool have_config = false;
    std::size_t assigned = 0;
    while (!r.done()) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        const std::uint32_t rank = r.u32();
        std::vector<int> dims(rank);
        for (std::uint32_t i = 0; i < rank; ++i) dims[i] = static_cast<int>(r.u32());
        tensor32 t = r.tensor(dims);
        if (name == "config") {
            cfg = detail::config_from_tensor(t);
            params = VitParams<float>::make_shaped(cfg);
            have_config = true;
            continue;
        }
        if (!have_config) throw io_error("checkpoint: config tensor must come first");
        bool found = false;
        params.for_each([&](const std::string& pname, tensor32& dst) {
            if (pname != name) return;
            if (dst.shape != t.shape)
                throw shape_error("checkpoint: shape mismatch for " + name);
            dst = std::move(t);
            found = true;
        });
        if (!found) throw io_error("checkpoint: unknown tensor " + name);
        ++assigned;
    }
    if (!have_config) throw io_error("checkpoint: missing config tensor");
    std::size_t expected = 0;
    params.for_each([&expected](const std::string&, const tensor32&) { ++expected; });
    if (assigned != expected) throw io_error("checkpoint: missing tensors");
    return {std::move(params), cfg};
}

// Load and validate against a caller-supplied config.
inline VitParams<float> load_checkpoint(const std::filesystem::path& path,
                                        const ModelConfig& expected) {
    auto [params, cfg] = load_checkpoint(path);
    expected.validate();
    const tensor32 want = detail::config_tensor(expected);
    const tensor32 have = detail::config_tensor(cfg);
    if (want.data != have.data)
        throw shape_error("checkpoint: stored config does not match expected config");
    return std::move(params);
}

} // namespace fdsl
