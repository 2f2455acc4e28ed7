#pragma once

#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "core.hpp"

namespace oneclip {

enum class FreezePart { ToRGB, Mapping };

// Architecture of a style-based generator. Stage s operates at resolution
// 4 * 2^s and carries two style layers, so layer_count = 2 * stages — the same
// W+ row counts as the reference 1024/512/256 models (18/16/14).
struct GeneratorConfig {
    int resolution = 32;
    int latent_dim = 64;
    std::vector<int> stage_channels;  // per stage, from 4x4 upward
    int mapping_layers = 2;
    bool mapping_lrelu = true;
    bool normalize_z = true;

    int stages() const { return static_cast<int>(stage_channels.size()); }
    int layer_count() const { return 2 * stages(); }

    void validate() const {
        if (!is_power_of_two(resolution) || resolution < 4) throw ShapeError("generator resolution must be a power of two >= 4");
        int expect = 0;
        for (int r = 4; r <= resolution; r *= 2) ++expect;
        if (stages() != expect) throw ShapeError("stage_channels size must match resolution");
        if (latent_dim <= 0) throw ShapeError("latent_dim must be positive");
    }
};

namespace detail {
inline double he_std(int fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }
}

// Style-based generator: mapping network z->w plus a synthesis network driven
// by a per-layer style stack. Per-layer noise is sampled once at construction
// and held fixed, so synthesis is a pure function of the latent.
class Generator {
public:
    Generator() = default;

    Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        RandomSource rng(seed, kInitStream);
        int d = cfg_.latent_dim;
        for (int l = 0; l < cfg_.mapping_layers; ++l) {
            params_.add(mapping_w(l), Tensor::randn({d, d}, rng, std::sqrt(1.0 / d)));
            params_.add(mapping_b(l), Tensor({d}));
        }
        params_.add("const", Tensor::randn({cfg_.stage_channels[0], 4, 4}, rng));
        for (int i = 0; i < cfg_.layer_count(); ++i) {
            int cin = layer_in_channels(i);
            int cout = layer_out_channels(i);
            params_.add(layer_name(i) + ".affine.weight", Tensor::randn({cin, d}, rng, 0.2 / std::sqrt(d)));
            params_.add(layer_name(i) + ".affine.bias", Tensor({cin}, 1.0));
            params_.add(layer_name(i) + ".conv.weight", Tensor::randn({cout, cin, 3, 3}, rng, detail::he_std(9 * cin)));
            params_.add(layer_name(i) + ".conv.bias", Tensor({cout}));
            params_.add(layer_name(i) + ".noise_strength", Tensor({1}));
        }
        for (int s = 0; s < cfg_.stages(); ++s) {
            int c = cfg_.stage_channels[static_cast<std::size_t>(s)];
            params_.add(torgb_name(s) + ".weight", Tensor::randn({3, c, 1, 1}, rng, detail::he_std(c)));
            params_.add(torgb_name(s) + ".bias", Tensor({3}));
        }
        RandomSource noise_rng(seed, kNoiseStream);
        for (int i = 0; i < cfg_.layer_count(); ++i) {
            int r = layer_resolution(i);
            noise_.push_back(Tensor::randn({r, r}, noise_rng));
        }
    }

    const GeneratorConfig& config() const { return cfg_; }
    int layer_count() const { return cfg_.layer_count(); }
    int latent_dim() const { return cfg_.latent_dim; }
    int output_resolution() const { return cfg_.resolution; }

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const std::vector<Tensor>& noise() const { return noise_; }
    std::vector<Tensor>& noise() { return noise_; }

    const std::set<FreezePart>& frozen_parts() const { return frozen_; }
    void set_frozen_parts(std::set<FreezePart> parts) { frozen_ = std::move(parts); }

    bool param_frozen(const std::string& name) const {
        if (frozen_.count(FreezePart::Mapping) && name.rfind("mapping.", 0) == 0) return true;
        if (frozen_.count(FreezePart::ToRGB) && name.rfind("torgb", 0) == 0) return true;
        return false;
    }

    // z [B,d] -> w [B,d]
    Ref mapping_forward(Tape& tape, Ref z, bool train = false) const {
        Ref h = z;
        if (cfg_.normalize_z) h = tape.row_pixel_norm(h);
        for (int l = 0; l < cfg_.mapping_layers; ++l) {
            h = tape.linear(h, leaf(tape, mapping_w(l), train), leaf(tape, mapping_b(l), train));
            if (cfg_.mapping_lrelu) h = tape.leaky_relu(h, 0.2);
        }
        return h;
    }

    // wplus [B,L,d] -> images [B,3,R,R]
    Ref synthesis_forward(Tape& tape, Ref wplus, bool train = false) const {
        const Tensor& tw = tape.val(wplus);
        if (tw.rank() != 3 || tw.dim(1) != cfg_.layer_count() || tw.dim(2) != cfg_.latent_dim)
            throw ShapeError("synthesis: latent stack must be [B," + std::to_string(cfg_.layer_count()) + "," +
                             std::to_string(cfg_.latent_dim) + "], got " + tw.shape_str());
        int B = tw.dim(0);

        // learned constant broadcast over the batch
        Ref cr = tape.reshape(leaf(tape, "const", train), {1, cfg_.stage_channels[0], 4, 4});
        Ref x = B == 1 ? cr : tape.concat0(std::vector<Ref>(static_cast<std::size_t>(B), cr));

        Ref rgb{};
        for (int i = 0; i < cfg_.layer_count(); ++i) {
            int s = i / 2;
            if (i > 0 && i % 2 == 0) x = tape.upsample2(x);
            Ref wi = tape.select_layer(wplus, i);
            Ref style = tape.linear(wi, leaf(tape, layer_name(i) + ".affine.weight", train),
                                    leaf(tape, layer_name(i) + ".affine.bias", train));
            x = tape.mul_channels(x, style);
            x = tape.conv2d(x, leaf(tape, layer_name(i) + ".conv.weight", train),
                            leaf(tape, layer_name(i) + ".conv.bias", train), 1);
            x = tape.add_noise(x, noise_[static_cast<std::size_t>(i)], leaf(tape, layer_name(i) + ".noise_strength", train));
            x = tape.leaky_relu(x, 0.2);
            if (i % 2 == 1) {
                Ref t = tape.conv2d(x, leaf(tape, torgb_name(s) + ".weight", train),
                                    leaf(tape, torgb_name(s) + ".bias", train), 0);
                rgb = (s == 0) ? t : tape.add(tape.upsample2(rgb), t);
            }
        }
        return tape.tanh_(rgb);
    }

    Ref leaf(Tape& tape, const std::string& name, bool train) const {
        auto& self = const_cast<Generator&>(*this);
        ParamTensor& p = self.params_.get(name);
        return tape.leaf(p, train && !param_frozen(name));
    }

    std::string layer_name(int i) const { return "layer" + std::to_string(i); }
    std::string torgb_name(int s) const { return "torgb" + std::to_string(s); }
    std::string mapping_w(int l) const { return "mapping." + std::to_string(l) + ".weight"; }
    std::string mapping_b(int l) const { return "mapping." + std::to_string(l) + ".bias"; }

    int layer_resolution(int i) const { return 4 << (i / 2); }
    int layer_in_channels(int i) const {
        if (i == 0) return cfg_.stage_channels[0];
        int s = i / 2;
        return i % 2 == 0 ? cfg_.stage_channels[static_cast<std::size_t>(s - 1)]
                          : cfg_.stage_channels[static_cast<std::size_t>(s)];
    }
    int layer_out_channels(int i) const { return cfg_.stage_channels[static_cast<std::size_t>(i / 2)]; }

private:
    static constexpr std::uint64_t kInitStream = 801;
    static constexpr std::uint64_t kNoiseStream = 802;

    GeneratorConfig cfg_;
    ParamStore params_;
    std::vector<Tensor> noise_;
    std::set<FreezePart> frozen_;
};

using GeneratorHandle = Generator;

// ---------------------------------------------------------------- operations

inline std::vector<LatentCode> sample_w(const Generator& gen, RandomSource& rng, int n) {
    if (n < 1) throw ArgumentError("sample_w: n must be >= 1");
    int d = gen.latent_dim();
    Tensor z({n, d});
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
    Tape tape(false);
    Ref w = gen.mapping_forward(tape, tape.constant(z));
    const Tensor& tw = tape.val(w);
    std::vector<LatentCode> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Tensor row({d});
        for (int j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] = tw[static_cast<std::size_t>(i) * d + j];
        out.push_back(LatentCode::w(std::move(row)));
    }
    return out;
}

inline LatentCode mean_latent(const Generator& gen, int n_samples, RandomSource& rng) {
    if (n_samples < 1) throw ArgumentError("mean_latent: n_samples must be >= 1");
    int d = gen.latent_dim();
    Tensor acc({d});
    int done = 0;
    while (done < n_samples) {
        int chunk = std::min(256, n_samples - done);
        Tensor z({chunk, d});
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
        Tape tape(false);
        const Tensor& w = tape.val(gen.mapping_forward(tape, tape.constant(z)));
        for (int n = 0; n < chunk; ++n)
            for (int j = 0; j < d; ++j) acc[static_cast<std::size_t>(j)] += w[static_cast<std::size_t>(n) * d + j];
        done += chunk;
    }
    for (int j = 0; j < d; ++j) acc[static_cast<std::size_t>(j)] /= n_samples;
    return LatentCode::w(std::move(acc));
}

// Stack a batch of codes into a [B,L,d] tensor, broadcasting W codes.
inline Tensor stack_codes(const Generator& gen, const std::vector<LatentCode>& codes) {
    if (codes.empty()) throw ArgumentError("stack_codes: empty batch");
    int L = gen.layer_count(), d = gen.latent_dim();
    Tensor out({static_cast<int>(codes.size()), L, d});
    for (std::size_t b = 0; b < codes.size(); ++b) {
        LatentCode bc = codes[b].broadcast(L);
        if (bc.dim() != d) throw ShapeError("latent dimension mismatch");
        for (std::size_t i = 0; i < bc.data.size(); ++i) out[b * bc.data.size() + i] = bc.data[i];
    }
    return out;
}

inline ImageBatch synthesize_batch(const Generator& gen, const std::vector<LatentCode>& codes) {
    Tape tape(false);
    Ref img = gen.synthesis_forward(tape, tape.constant(stack_codes(gen, codes)));
    return ImageBatch{tape.val(img)};
}

inline ImageBatch synthesize(const Generator& gen, const LatentCode& code) {
    return synthesize_batch(gen, {code});
}

// Replace the last k style rows with a single replacement vector.
inline LatentCode style_mix(const LatentCode& code, const LatentCode& replacement, int k) {
    if (code.kind != LatentCode::Kind::WPlus) throw ArgumentError("style_mix: code must be W+");
    if (replacement.kind != LatentCode::Kind::W) throw ArgumentError("style_mix: replacement must be W");
    int L = code.layers(), d = code.dim();
    if (k < 0 || k > L) throw ArgumentError("style_mix: k out of range");
    if (replacement.dim() != d) throw ShapeError("style_mix: dimension mismatch");
    LatentCode out = code;
    for (int l = L - k; l < L; ++l)
        for (int i = 0; i < d; ++i) out.data[static_cast<std::size_t>(l) * d + i] = replacement.data[static_cast<std::size_t>(i)];
    return out;
}

inline Generator clone_generator(const Generator& gen) { return gen; }

// -------------------------------------------------------------- discriminator

struct DiscriminatorConfig {
    int resolution = 32;
    int base_channels = 8;            // fromRGB output width
    std::vector<int> stage_channels;  // per residual stage, input res down to 4
    std::vector<int> patch_layers;    // registered patch heads (1-based stage index)
    double lrelu_slope = 0.2;

    int stages() const { return static_cast<int>(stage_channels.size()); }

    void validate() const {
        if (!is_power_of_two(resolution) || resolution < 8) throw ShapeError("discriminator resolution must be a power of two >= 8");
        int expect = 0;
        for (int r = resolution; r > 4; r /= 2) ++expect;
        if (stages() != expect) throw ShapeError("stage_channels size must match resolution");
        for (int l : patch_layers)
            if (l < 1 || l > stages()) throw ShapeError("patch layer index out of range");
    }
};

// Staged residual discriminator. Patch heads are a subset of the global
// network: head l reads the backbone feature after the first l residual
// stages and maps it to one logit per spatial site.
class Discriminator {
public:
    Discriminator() = default;

    Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        RandomSource rng(seed, kInitStream);
        params_.add("fromrgb.weight", Tensor::randn({cfg_.base_channels, 3, 1, 1}, rng, detail::he_std(3)));
        params_.add("fromrgb.bias", Tensor({cfg_.base_channels}));
        int cin = cfg_.base_channels;
        for (int s = 0; s < cfg_.stages(); ++s) {
            int cout = cfg_.stage_channels[static_cast<std::size_t>(s)];
            params_.add(stage(s) + ".conv0.weight", Tensor::randn({cin, cin, 3, 3}, rng, detail::he_std(9 * cin)));
            params_.add(stage(s) + ".conv0.bias", Tensor({cin}));
            params_.add(stage(s) + ".conv1.weight", Tensor::randn({cout, cin, 3, 3}, rng, detail::he_std(9 * cin)));
            params_.add(stage(s) + ".conv1.bias", Tensor({cout}));
            params_.add(stage(s) + ".skip.weight", Tensor::randn({cout, cin, 1, 1}, rng, detail::he_std(cin)));
            cin = cout;
        }
        params_.add("final.conv.weight", Tensor::randn({cin, cin, 3, 3}, rng, detail::he_std(9 * cin)));
        params_.add("final.conv.bias", Tensor({cin}));
        params_.add("final.fc0.weight", Tensor::randn({cin, cin * 16}, rng, std::sqrt(1.0 / (cin * 16))));
        params_.add("final.fc0.bias", Tensor({cin}));
        params_.add("final.fc1.weight", Tensor::randn({1, cin}, rng, std::sqrt(1.0 / cin)));
        params_.add("final.fc1.bias", Tensor({1}));
        for (int l : cfg_.patch_layers) {
            int c = cfg_.stage_channels[static_cast<std::size_t>(l - 1)];
            params_.add(head(l) + ".conv.weight", Tensor::randn({c, c, 3, 3}, rng, detail::he_std(9 * c)));
            params_.add(head(l) + ".conv.bias", Tensor({c}));
            params_.add(head(l) + ".proj.weight", Tensor::randn({1, c, 1, 1}, rng, detail::he_std(c)));
            params_.add(head(l) + ".proj.bias", Tensor({1}));
        }
    }

    const DiscriminatorConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    bool has_patch_head(int l) const {
        for (int x : cfg_.patch_layers)
            if (x == l) return true;
        return false;
    }

    // Backbone features after each of the first `upto` stages; out[0] is the
    // fromRGB feature, out[l] the feature after stage l.
    std::vector<Ref> backbone(Tape& tape, Ref images, int upto, bool train = false) const {
        const Tensor& t = tape.val(images);
        if (t.rank() != 4 || t.dim(1) != 3 || t.dim(2) != cfg_.resolution || t.dim(3) != cfg_.resolution)
            throw ShapeError("discriminator: expected [B,3," + std::to_string(cfg_.resolution) + "," +
                             std::to_string(cfg_.resolution) + "], got " + t.shape_str());
        std::vector<Ref> feats;
        Ref x = tape.leaky_relu(tape.conv2d(images, leaf(tape, "fromrgb.weight", train), leaf(tape, "fromrgb.bias", train), 0),
                                cfg_.lrelu_slope);
        feats.push_back(x);
        for (int s = 0; s < upto; ++s) {
            Ref t0 = tape.leaky_relu(tape.conv2d(x, leaf(tape, stage(s) + ".conv0.weight", train),
                                                 leaf(tape, stage(s) + ".conv0.bias", train), 1),
                                     cfg_.lrelu_slope);
            Ref t1 = tape.leaky_relu(tape.conv2d(tape.avgpool2(t0), leaf(tape, stage(s) + ".conv1.weight", train),
                                                 leaf(tape, stage(s) + ".conv1.bias", train), 1),
                                     cfg_.lrelu_slope);
            Ref sk = tape.conv2d(tape.avgpool2(x), leaf(tape, stage(s) + ".skip.weight", train), zero_bias(tape, s), 0);
            x = tape.scale(tape.add(t1, sk), 1.0 / std::sqrt(2.0));
            feats.push_back(x);
        }
        return feats;
    }

    // [B,3,R,R] -> [B] global logits.
    Ref global_logits(Tape& tape, Ref images, bool train = false) const {
        auto feats = backbone(tape, images, cfg_.stages(), train);
        Ref x = feats.back();
        x = tape.leaky_relu(tape.conv2d(x, leaf(tape, "final.conv.weight", train), leaf(tape, "final.conv.bias", train), 1),
                            cfg_.lrelu_slope);
        const Tensor& tv = tape.val(x);
        x = tape.reshape(x, {tv.dim(0), tv.dim(1) * tv.dim(2) * tv.dim(3)});
        x = tape.leaky_relu(tape.linear(x, leaf(tape, "final.fc0.weight", train), leaf(tape, "final.fc0.bias", train)),
                            cfg_.lrelu_slope);
        x = tape.linear(x, leaf(tape, "final.fc1.weight", train), leaf(tape, "final.fc1.bias", train));
        return tape.reshape(x, {tv.dim(0)});
    }

    // [B,3,R,R] -> [B] patch logits: per image, the spatial mean of all site
    // logits across the requested heads.
    Ref patch_logits(Tape& tape, Ref images, const std::vector<int>& layers, bool train = false) const {
        if (layers.empty()) throw ArgumentError("patch_logits: no layers requested");
        int maxl = 0;
        for (int l : layers) {
            if (!has_patch_head(l)) throw KeyError("no patch head registered for layer " + std::to_string(l));
            maxl = std::max(maxl, l);
        }
        auto feats = backbone(tape, images, maxl, train);
        Ref acc{};
        for (int l : layers) {
            Ref h = tape.leaky_relu(tape.conv2d(feats[static_cast<std::size_t>(l)], leaf(tape, head(l) + ".conv.weight", train),
                                                leaf(tape, head(l) + ".conv.bias", train), 1),
                                    cfg_.lrelu_slope);
            h = tape.conv2d(h, leaf(tape, head(l) + ".proj.weight", train), leaf(tape, head(l) + ".proj.bias", train), 0);
            Ref m = tape.image_mean(h);
            acc = acc.valid() ? tape.add(acc, m) : m;
        }
        return tape.scale(acc, 1.0 / static_cast<double>(layers.size()));
    }

    Ref leaf(Tape& tape, const std::string& name, bool train) const {
        auto& self = const_cast<Discriminator&>(*this);
        return tape.leaf(self.params_.get(name), train);
    }

private:
    static constexpr std::uint64_t kInitStream = 803;

    Ref zero_bias(Tape& tape, int s) const {
        return tape.constant(Tensor({cfg_.stage_channels[static_cast<std::size_t>(s)]}));
    }

    static std::string stage(int s) { return "stage" + std::to_string(s); }
    static std::string head(int l) { return "patch_head" + std::to_string(l); }

    DiscriminatorConfig cfg_;
    ParamStore params_;
};

using DiscriminatorHandle = Discriminator;

inline std::vector<double> global_score(const Discriminator& disc, const ImageBatch& images) {
    Tape tape(false);
    const Tensor& s = tape.val(disc.global_logits(tape, tape.constant(images.data)));
    return std::vector<double>(s.data(), s.data() + s.size());
}

inline std::vector<double> patch_score(const Discriminator& disc, const ImageBatch& images,
                                       const std::vector<int>& layers) {
    Tape tape(false);
    const Tensor& s = tape.val(disc.patch_logits(tape, tape.constant(images.data), layers));
    return std::vector<double>(s.data(), s.data() + s.size());
}

// ------------------------------------------------------------------- presets

struct DatasetPreset {
    std::string name;
    int resolution = 0;
    int patch_size = 0;
    std::vector<int> patch_layers;
    int mix_replace_count = 0;  // style rows replaced at inference
    int layer_count = 0;
    int batch_size = 0;
    int default_iterations = 0;
    int latent_dim = 512;
};

inline const std::vector<DatasetPreset>& dataset_presets() {
    static const std::vector<DatasetPreset> presets = {
        {"ffhq", 1024, 128, {5, 6}, 7, 18, 2, 2000, 512},
        {"church", 256, 64, {3, 4}, 6, 14, 4, 1500, 512},
        {"cars", 512, 32, {4, 5}, 7, 16, 2, 2000, 512},
        {"afhq_dog", 512, 32, {4, 5}, 9, 16, 2, 1000, 512},
        {"toy", 32, 16, {1, 2}, 3, 8, 4, 300, 64},
    };
    return presets;
}

inline const DatasetPreset& dataset_preset(const std::string& name) {
    for (const auto& p : dataset_presets())
        if (p.name == name) return p;
    throw KeyError("unknown preset '" + name + "'");
}

inline GeneratorConfig toy_generator_config() {
    GeneratorConfig cfg;
    cfg.resolution = 32;
    cfg.latent_dim = 64;
    cfg.stage_channels = {16, 16, 8, 8};
    cfg.mapping_layers = 2;
    return cfg;
}

inline DiscriminatorConfig toy_discriminator_config() {
    DiscriminatorConfig cfg;
    cfg.resolution = 32;
    cfg.base_channels = 8;
    cfg.stage_channels = {12, 16, 16};
    cfg.patch_layers = {1, 2};
    return cfg;
}

}  // namespace oneclip
