#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "errors.hpp"
#include "generator.hpp"
#include "optimizer.hpp"

namespace oneclip {

namespace detail {

// Little-endian binary buffer with trailing CRC32. Corruption anywhere in the
// payload surfaces as a VersionError instead of silently wrong tensors.
class BinaryWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { raw(&v, 2); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void i64(std::int64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) u32(static_cast<std::uint32_t>(t.dim(i)));
        raw(t.data(), t.size() * sizeof(double));
    }

    void write_file(const std::filesystem::path& path) const {
        std::uint32_t crc = static_cast<std::uint32_t>(
            ::crc32(0L, reinterpret_cast<const Bytef*>(buf_.data()), static_cast<uInt>(buf_.size())));
        std::filesystem::path tmp = path;
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
            out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
            out.write(reinterpret_cast<const char*>(&crc), 4);
            if (!out) throw IoError("short write to " + tmp.string());
        }
        std::error_code ec;
        std::filesystem::rename(tmp, path, ec);
        if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
    }

private:
    void raw(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    std::vector<char> buf_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + path.string());
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        if (buf_.size() < 4) throw VersionError("checkpoint too short: " + path.string());
        std::uint32_t stored;
        std::memcpy(&stored, buf_.data() + buf_.size() - 4, 4);
        std::uint32_t crc = static_cast<std::uint32_t>(
            ::crc32(0L, reinterpret_cast<const Bytef*>(buf_.data()), static_cast<uInt>(buf_.size() - 4)));
        if (stored != crc) throw VersionError("checkpoint checksum mismatch: " + path.string());
        end_ = buf_.size() - 4;
    }

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
    std::uint16_t u16() { return scalar<std::uint16_t>(); }
    std::uint32_t u32() { return scalar<std::uint32_t>(); }
    std::uint64_t u64() { return scalar<std::uint64_t>(); }
    std::int64_t i64() { return scalar<std::int64_t>(); }
    double f64() { return scalar<double>(); }
    std::string str() {
        std::uint32_t n = u32();
        const char* p = take(n);
        return std::string(p, p + n);
    }
    Tensor tensor() {
        std::uint32_t rank = u32();
        if (rank > 8) throw VersionError("checkpoint tensor rank implausible");
        std::vector<int> shape;
        std::size_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape.push_back(static_cast<int>(u32()));
            n *= static_cast<std::size_t>(shape.back());
        }
        std::vector<double> data(n);
        std::memcpy(data.data(), take(n * sizeof(double)), n * sizeof(double));
        return Tensor::from_data(std::move(shape), std::move(data));
    }

private:
    template <typename T>
    T scalar() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }
    const char* take(std::size_t n) {
        if (pos_ + n > end_) throw VersionError("checkpoint truncated");
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::vector<char> buf_;
    std::size_t pos_ = 0;
    std::size_t end_ = 0;
};

inline void write_param_store(BinaryWriter& w, const ParamStore& store) {
    w.u32(static_cast<std::uint32_t>(store.items().size()));
    for (const auto& p : store.items()) {
        w.str(p.name);
        w.u8(p.trainable ? 1 : 0);
        w.tensor(p.value);
    }
}

inline void read_param_store_into(BinaryReader& r, ParamStore& store) {
    std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = r.str();
        bool trainable = r.u8() != 0;
        Tensor value = r.tensor();
        if (!store.contains(name)) throw VersionError("checkpoint parameter '" + name + "' unknown to this architecture");
        ParamTensor& p = store.get(name);
        if (!p.value.shape_equals(value)) throw VersionError("checkpoint parameter '" + name + "' has wrong shape");
        p.value = std::move(value);
        p.trainable = trainable;
    }
}

inline void write_generator(BinaryWriter& w, const Generator& gen) {
    const GeneratorConfig& c = gen.config();
    w.u32(static_cast<std::uint32_t>(c.resolution));
    w.u32(static_cast<std::uint32_t>(c.latent_dim));
    w.u32(static_cast<std::uint32_t>(c.mapping_layers));
    w.u8(c.mapping_lrelu ? 1 : 0);
    w.u8(c.normalize_z ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(c.stage_channels.size()));
    for (int ch : c.stage_channels) w.u32(static_cast<std::uint32_t>(ch));
    w.u8(static_cast<std::uint8_t>((gen.frozen_parts().count(FreezePart::ToRGB) ? 1 : 0) |
                                   (gen.frozen_parts().count(FreezePart::Mapping) ? 2 : 0)));
    write_param_store(w, gen.params());
    w.u32(static_cast<std::uint32_t>(gen.noise().size()));
    for (const Tensor& t : gen.noise()) w.tensor(t);
}

inline Generator read_generator(BinaryReader& r) {
    GeneratorConfig c;
    c.resolution = static_cast<int>(r.u32());
    c.latent_dim = static_cast<int>(r.u32());
    c.mapping_layers = static_cast<int>(r.u32());
    c.mapping_lrelu = r.u8() != 0;
    c.normalize_z = r.u8() != 0;
    std::uint32_t ns = r.u32();
    for (std::uint32_t i = 0; i < ns; ++i) c.stage_channels.push_back(static_cast<int>(r.u32()));
    std::uint8_t frozen = r.u8();
    Generator gen(c, /*seed=*/0);
    std::set<FreezePart> parts;
    if (frozen & 1) parts.insert(FreezePart::ToRGB);
    if (frozen & 2) parts.insert(FreezePart::Mapping);
    gen.set_frozen_parts(std::move(parts));
    read_param_store_into(r, gen.params());
    std::uint32_t nn = r.u32();
    if (nn != gen.noise().size()) throw VersionError("checkpoint noise buffer count mismatch");
    for (std::uint32_t i = 0; i < nn; ++i) gen.noise()[i] = r.tensor();
    return gen;
}

inline void write_discriminator(BinaryWriter& w, const Discriminator& disc) {
    const DiscriminatorConfig& c = disc.config();
    w.u32(static_cast<std::uint32_t>(c.resolution));
    w.u32(static_cast<std::uint32_t>(c.base_channels));
    w.f64(c.lrelu_slope);
    w.u32(static_cast<std::uint32_t>(c.stage_channels.size()));
    for (int ch : c.stage_channels) w.u32(static_cast<std::uint32_t>(ch));
    w.u32(static_cast<std::uint32_t>(c.patch_layers.size()));
    for (int l : c.patch_layers) w.u32(static_cast<std::uint32_t>(l));
    write_param_store(w, disc.params());
}

inline Discriminator read_discriminator(BinaryReader& r) {
    DiscriminatorConfig c;
    c.resolution = static_cast<int>(r.u32());
    c.base_channels = static_cast<int>(r.u32());
    c.lrelu_slope = r.f64();
    std::uint32_t ns = r.u32();
    for (std::uint32_t i = 0; i < ns; ++i) c.stage_channels.push_back(static_cast<int>(r.u32()));
    std::uint32_t np = r.u32();
    for (std::uint32_t i = 0; i < np; ++i) c.patch_layers.push_back(static_cast<int>(r.u32()));
    Discriminator disc(c, /*seed=*/0);
    read_param_store_into(r, disc.params());
    return disc;
}

inline void write_adam(BinaryWriter& w, const AdamOptimizer& opt) {
    w.f64(opt.config().learning_rate);
    w.f64(opt.config().beta1);
    w.f64(opt.config().beta2);
    w.f64(opt.config().eps);
    w.i64(opt.step_count());
    w.u32(static_cast<std::uint32_t>(opt.moments().size()));
    for (const auto& [name, mv] : opt.moments()) {
        w.str(name);
        w.tensor(mv.first);
        w.tensor(mv.second);
    }
}

inline AdamOptimizer read_adam(BinaryReader& r) {
    AdamConfig cfg;
    cfg.learning_rate = r.f64();
    cfg.beta1 = r.f64();
    cfg.beta2 = r.f64();
    cfg.eps = r.f64();
    AdamOptimizer opt(cfg);
    opt.set_step_count(r.i64());
    std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = r.str();
        Tensor m = r.tensor();
        Tensor v = r.tensor();
        opt.moments()[name] = {std::move(m), std::move(v)};
    }
    return opt;
}

inline void write_latent(BinaryWriter& w, const LatentCode& code) {
    w.u8(code.kind == LatentCode::Kind::W ? 0 : 1);
    w.tensor(code.data);
}

inline LatentCode read_latent(BinaryReader& r) {
    std::uint8_t kind = r.u8();
    Tensor data = r.tensor();
    return kind == 0 ? LatentCode::w(std::move(data)) : LatentCode::wplus(std::move(data));
}

}  // namespace detail

// Standalone generator checkpoint (source models, adapted models).
inline void save_generator(const Generator& gen, const std::filesystem::path& path) {
    detail::BinaryWriter w;
    w.u8('O'); w.u8('C'); w.u8('G'); w.u8('N');
    w.u16(1);
    detail::write_generator(w, gen);
    w.write_file(path);
}

inline Generator load_generator(const std::filesystem::path& path) {
    detail::BinaryReader r(path);
    if (r.u8() != 'O' || r.u8() != 'C' || r.u8() != 'G' || r.u8() != 'N')
        throw VersionError("not a generator checkpoint: " + path.string());
    if (r.u16() != 1) throw VersionError("unsupported generator checkpoint version");
    return detail::read_generator(r);
}

}  // namespace oneclip
