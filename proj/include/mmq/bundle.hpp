#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mmq/errors.hpp"
#include "mmq/model.hpp"
#include "mmq/quantizer.hpp"

namespace mmq {

// ---------------------------------------------------------------------------
// Model bundle: mixed fp32/int4 layer container.
//
// Layout (all integers little-endian):
//   magic "MMQB" | version u16 | flags u32 | layer count u32
//   per layer, lexicographic by name:
//     name_len u16, name bytes, dtype u8 (0 fp32, 1 int4+scales),
//     rank u8, dims u32 each, payload offset u64, payload length u64
//   payloads (same order, contiguous):
//     fp32: raw row-major floats
//     int4: ceil(n/2) code bytes (two's-complement nibbles, low nibble =
//           even index) then d_in fp32 scales
//   crc32 u32 over all preceding bytes
// ---------------------------------------------------------------------------

constexpr char kBundleMagic[4] = {'M', 'M', 'Q', 'B'};
constexpr std::uint16_t kBundleVersion = 1;

enum class LayerDtype : std::uint8_t { f32 = 0, int4 = 1 };

struct BundleLayer {
    LayerDtype dtype = LayerDtype::f32;
    std::vector<std::size_t> shape;
    std::vector<float> f32;  // dtype f32
    QuantizedLayer q;        // dtype int4

    std::size_t numel() const {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }
    std::size_t payload_bytes() const {
        return dtype == LayerDtype::f32 ? 4 * numel()
                                        : (numel() + 1) / 2 + 4 * shape.at(0);
    }
};

struct BundleFlags {
    FusionStrategy strategy = FusionStrategy::complete;
    bool quantized = false;
    std::size_t bits = 0;
    double alpha = 0.0; // stored as round(alpha*1e4)

    std::uint32_t encode() const {
        std::uint32_t f = static_cast<std::uint32_t>(strategy) & 0x7u;
        if (quantized) f |= 1u << 3;
        f |= (static_cast<std::uint32_t>(bits) & 0xFu) << 4;
        f |= (static_cast<std::uint32_t>(alpha * 1e4 + 0.5) & 0x3FFFu) << 8;
        return f;
    }
    static BundleFlags decode(std::uint32_t f) {
        BundleFlags out;
        out.strategy = static_cast<FusionStrategy>(f & 0x7u);
        out.quantized = (f >> 3) & 1u;
        out.bits = (f >> 4) & 0xFu;
        out.alpha = static_cast<double>((f >> 8) & 0x3FFFu) / 1e4;
        return out;
    }
};

struct Bundle {
    std::uint16_t version = kBundleVersion;
    std::uint32_t flags = 0;
    std::map<std::string, BundleLayer> layers; // map keeps lexicographic order

    std::size_t payload_bytes() const {
        std::size_t total = 0;
        for (const auto& [name, layer] : layers) total += layer.payload_bytes();
        return total;
    }
};

// CRC-32 (IEEE 802.3, reflected), table-driven.
inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i)
        crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
    b.push_back(v & 0xFF);
    b.push_back((v >> 8) & 0xFF);
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xFF);
}
inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back((v >> (8 * i)) & 0xFF);
}
inline void put_f32(std::vector<std::uint8_t>& b, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(b, u);
}

struct Reader {
    const std::uint8_t* p;
    std::size_t len, pos = 0;
    void need(std::size_t n) const {
        if (pos + n > len) throw CorruptionError("bundle: truncated at byte " +
                                                 std::to_string(pos));
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = p[pos] | (std::uint16_t(p[pos + 1]) << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return p[pos++];
    }
    float f32() {
        std::uint32_t u = u32();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
};

} // namespace detail

inline std::vector<std::uint8_t> serialize_bundle(const Bundle& bundle) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kBundleMagic, kBundleMagic + 4);
    detail::put_u16(out, bundle.version);
    detail::put_u32(out, bundle.flags);
    detail::put_u32(out, static_cast<std::uint32_t>(bundle.layers.size()));

    std::size_t table_bytes = 0;
    for (const auto& [name, layer] : bundle.layers)
        table_bytes += 2 + name.size() + 1 + 1 + 4 * layer.shape.size() + 8 + 8;
    std::size_t offset = out.size() + table_bytes;

    for (const auto& [name, layer] : bundle.layers) {
        detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<std::uint8_t>(layer.dtype));
        out.push_back(static_cast<std::uint8_t>(layer.shape.size()));
        for (std::size_t d : layer.shape)
            detail::put_u32(out, static_cast<std::uint32_t>(d));
        detail::put_u64(out, offset);
        detail::put_u64(out, layer.payload_bytes());
        offset += layer.payload_bytes();
    }

    for (const auto& [name, layer] : bundle.layers) {
        if (layer.dtype == LayerDtype::f32) {
            for (float v : layer.f32) detail::put_f32(out, v);
        } else {
            std::vector<std::uint8_t> packed = pack_codes(layer.q.codes);
            out.insert(out.end(), packed.begin(), packed.end());
            for (double s : layer.q.scales)
                detail::put_f32(out, static_cast<float>(s));
        }
    }

    detail::put_u32(out, crc32(out.data(), out.size()));
    return out;
}

inline Bundle parse_bundle(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 18) throw CorruptionError("bundle: too short");
    const std::uint32_t stored_crc =
        bytes[bytes.size() - 4] | (std::uint32_t(bytes[bytes.size() - 3]) << 8) |
        (std::uint32_t(bytes[bytes.size() - 2]) << 16) |
        (std::uint32_t(bytes[bytes.size() - 1]) << 24);
    if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
        throw CorruptionError("bundle: CRC mismatch");

    detail::Reader r{bytes.data(), bytes.size() - 4};
    if (std::memcmp(bytes.data(), kBundleMagic, 4) != 0)
        throw CorruptionError("bundle: bad magic");
    r.pos = 4;
    Bundle b;
    b.version = r.u16();
    if (b.version != kBundleVersion)
        throw CorruptionError("bundle: unsupported version " +
                              std::to_string(b.version));
    b.flags = r.u32();
    const std::uint32_t count = r.u32();

    struct Entry {
        std::string name;
        LayerDtype dtype;
        std::vector<std::size_t> shape;
        std::uint64_t offset, length;
    };
    std::vector<Entry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        const std::uint16_t name_len = r.u16();
        r.need(name_len);
        e.name.assign(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
        r.pos += name_len;
        e.dtype = static_cast<LayerDtype>(r.u8());
        const std::uint8_t rank = r.u8();
        for (std::uint8_t k = 0; k < rank; ++k) e.shape.push_back(r.u32());
        e.offset = r.u64();
        e.length = r.u64();
        entries.push_back(std::move(e));
    }

    const BundleFlags flags = BundleFlags::decode(b.flags);
    for (const Entry& e : entries) {
        if (b.layers.count(e.name))
            throw CorruptionError("bundle: duplicate layer " + e.name);
        BundleLayer layer;
        layer.dtype = e.dtype;
        layer.shape = e.shape;
        if (e.offset + e.length > bytes.size() - 4 ||
            e.length != layer.payload_bytes())
            throw CorruptionError("bundle: bad payload bounds for " + e.name);
        detail::Reader pr{bytes.data(), bytes.size() - 4, e.offset};
        const std::size_t n = layer.numel();
        if (e.dtype == LayerDtype::f32) {
            layer.f32.resize(n);
            for (std::size_t k = 0; k < n; ++k) layer.f32[k] = pr.f32();
        } else {
            if (layer.shape.empty())
                throw CorruptionError("bundle: int4 layer without shape: " + e.name);
            pr.need((n + 1) / 2);
            std::vector<std::uint8_t> packed(bytes.data() + pr.pos,
                                             bytes.data() + pr.pos + (n + 1) / 2);
            pr.pos += (n + 1) / 2;
            layer.q.codes = unpack_codes(packed, n);
            layer.q.shape = layer.shape;
            layer.q.bits = flags.bits ? flags.bits : 4;
            layer.q.scales.resize(layer.shape[0]);
            for (std::size_t k = 0; k < layer.shape[0]; ++k)
                layer.q.scales[k] = pr.f32();
        }
        b.layers.emplace(e.name, std::move(layer));
    }
    return b;
}

inline void write_bundle(const Bundle& b, const std::string& path) {
    std::vector<std::uint8_t> bytes = serialize_bundle(b);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_bundle: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write_bundle: short write to " + path);
}

inline Bundle read_bundle(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_bundle: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return parse_bundle(bytes);
}

// ---------------------------------------------------------------------------
// Model <-> bundle
// ---------------------------------------------------------------------------

constexpr const char* kRelevanceLayer = "fusion.priority_relevance";

inline Bundle model_to_bundle(const Model& m) {
    Bundle b;
    BundleFlags flags;
    flags.strategy = m.cfg.strategy;
    b.flags = flags.encode();
    for_each_param(const_cast<Model&>(m), [&](const std::string& name, Tensor& t) {
        BundleLayer layer;
        layer.dtype = LayerDtype::f32;
        layer.shape = t.shape;
        layer.f32.reserve(t.numel());
        for (double v : t.data) layer.f32.push_back(static_cast<float>(v));
        b.layers.emplace(name, std::move(layer));
    });
    BundleLayer rel;
    rel.dtype = LayerDtype::f32;
    rel.shape = {3};
    for (double v : m.state.relevance) rel.f32.push_back(static_cast<float>(v));
    b.layers.emplace(kRelevanceLayer, std::move(rel));
    return b;
}

inline Tensor bundle_layer_values(const BundleLayer& layer) {
    if (layer.dtype == LayerDtype::f32) {
        Tensor t(layer.shape);
        for (std::size_t i = 0; i < layer.f32.size(); ++i) t.data[i] = layer.f32[i];
        return t;
    }
    return dequantize(layer.q);
}

// Rebuilds the model; architecture dimensions come from layer shapes, the
// fusion strategy from the flags.
inline Model bundle_to_model(const Bundle& b) {
    const BundleFlags flags = BundleFlags::decode(b.flags);
    auto layer = [&](const char* name) -> const BundleLayer& {
        auto it = b.layers.find(name);
        if (it == b.layers.end())
            throw CorruptionError(std::string("bundle: missing layer ") + name);
        return it->second;
    };

    ModelConfig cfg;
    cfg.strategy = flags.strategy;
    cfg.d = layer("fusion.proj_img.w").shape.at(1);
    cfg.image.dim = layer("fusion.proj_img.w").shape.at(0);
    cfg.text.dim = layer("fusion.proj_txt.w").shape.at(0);
    const std::size_t patch_rows = layer("img.patch_embed.w").shape.at(0);
    cfg.image.patch = static_cast<std::size_t>(
        std::llround(std::sqrt(static_cast<double>(patch_rows / 3))));
    cfg.text.vocab = layer("txt.embedding").shape.at(0);
    cfg.vec_in = layer("vec.fc1.w").shape.at(0);
    cfg.vec_hidden = layer("vec.fc1.w").shape.at(1);
    cfg.head_hidden = layer("head.fc1.w").shape.at(1);
    cfg.classes = layer("head.fc2.w").shape.at(1);

    Model m = make_model(cfg);
    for_each_param(m, [&](const std::string& name, Tensor& t) {
        const BundleLayer& l = layer(name.c_str());
        Tensor values = bundle_layer_values(l);
        if (values.shape != t.shape)
            throw CorruptionError("bundle: shape mismatch for " + name + ": " +
                                  values.shape_str() + " vs " + t.shape_str());
        t = std::move(values);
    });
    const BundleLayer& rel = layer(kRelevanceLayer);
    for (std::size_t i = 0; i < 3; ++i) m.state.relevance[i] = rel.f32.at(i);
    return m;
}

} // namespace mmq
