#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "core.hpp"

namespace oneclip {

// Patch sampling description: locations[0] is the positive site s_0, the
// remaining `count` entries are the negative sites s_1..s_N.
struct PatchSpec {
    int size = 0;
    std::vector<std::pair<int, int>> locations;  // (top, left)
    int count = 0;                               // N negatives

    int positive_top() const { return locations.at(0).first; }
    int positive_left() const { return locations.at(0).second; }
};

// Semantic embedder. Implementations must be deterministic and emit unit-norm
// rows; embed() is differentiable through the tape so losses can backpropagate
// into the images.
class EmbedderBackend {
public:
    virtual ~EmbedderBackend() = default;

    const std::string& name() const { return name_; }
    int output_dim() const { return output_dim_; }
    int input_resolution() const { return input_resolution_; }
    bool supports_text() const { return supports_text_; }

    // images [B,3,H,W] -> [B,e], rows unit-norm.
    virtual Ref embed(Tape& tape, Ref images) const = 0;

    virtual Ref embed_text(Tape& tape, const std::string& text) const {
        (void)tape;
        (void)text;
        throw UnsupportedError("backend '" + name_ + "' has no text tower");
    }

protected:
    EmbedderBackend(std::string name, int output_dim, int input_resolution, bool supports_text)
        : name_(std::move(name)), output_dim_(output_dim), input_resolution_(input_resolution),
          supports_text_(supports_text) {}

    std::string name_;
    int output_dim_ = 0;
    int input_resolution_ = 0;
    bool supports_text_ = false;
};

// Deterministic stand-in for a pre-trained joint embedder: bilinear resize to
// the input resolution, flatten, a fixed seeded linear projection, then L2
// normalization. Linear by construction so analytic oracles exist.
class FakeEmbedder : public EmbedderBackend {
public:
    explicit FakeEmbedder(std::uint64_t seed, int output_dim = 64, int input_resolution = 32)
        : EmbedderBackend("fake", output_dim, input_resolution, true), seed_(seed) {
        RandomSource rng(seed, kProjectionStream);
        int in = 3 * input_resolution * input_resolution;
        projection_ = Tensor::randn({output_dim, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        zero_bias_ = Tensor({output_dim});
    }

    Ref embed(Tape& tape, Ref images) const override {
        const Tensor& t = tape.val(images);
        if (t.rank() != 4 || t.dim(1) != 3) throw ShapeError("embed: expected [B,3,H,W]");
        Ref resized = tape.resize_bilinear(images, input_resolution_, input_resolution_);
        int B = t.dim(0);
        Ref flat = tape.reshape(resized, {B, 3 * input_resolution_ * input_resolution_});
        Ref proj = tape.linear(flat, tape.constant(projection_), tape.constant(zero_bias_));
        return tape.rows_normalize(proj);
    }

    Ref embed_text(Tape& tape, const std::string& text) const override {
        if (text.empty()) throw ArgumentError("embed_text: empty text");
        std::uint64_t h = detail::fnv1a64(text.data(), text.size(), seed_ ^ 0x517cc1b727220a95ULL);
        RandomSource rng(h, kTextStream);
        Tensor v = Tensor::randn({output_dim_}, rng);
        double n = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) n += v[i] * v[i];
        n = std::sqrt(n);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] /= n;
        return tape.constant(std::move(v));
    }

    const Tensor& projection() const { return projection_; }

private:
    static constexpr std::uint64_t kProjectionStream = 901;
    static constexpr std::uint64_t kTextStream = 902;

    std::uint64_t seed_;
    Tensor projection_;
    Tensor zero_bias_;
};

// Resolve a backend by name. "fake" is built in; anything else would need a
// weight file adapter, which is a plugin concern.
inline std::shared_ptr<EmbedderBackend> make_embedder(const std::string& name, std::uint64_t seed,
                                                      int output_dim = 64, int input_resolution = 32) {
    if (name == "fake") return std::make_shared<FakeEmbedder>(seed, output_dim, input_resolution);
    throw BackendError("unknown embedder backend '" + name + "' (no import adapter available)");
}

// ------------------------------------------------------------ value-level ops

inline std::vector<EmbeddingVector> embed_image(const EmbedderBackend& backend, const ImageBatch& images) {
    validate_image_batch(images);
    Tape tape(false);
    Ref out = backend.embed(tape, tape.constant(images.data));
    const Tensor& t = tape.val(out);
    std::vector<EmbeddingVector> result;
    int B = t.dim(0), E = t.dim(1);
    result.reserve(static_cast<std::size_t>(B));
    for (int n = 0; n < B; ++n) {
        Tensor v({E});
        for (int i = 0; i < E; ++i) v[static_cast<std::size_t>(i)] = t[static_cast<std::size_t>(n) * E + i];
        result.push_back(EmbeddingVector{std::move(v)});
    }
    return result;
}

inline EmbeddingVector embed_text(const EmbedderBackend& backend, const std::string& text) {
    if (!backend.supports_text()) throw UnsupportedError("backend '" + backend.name() + "' has no text tower");
    if (text.empty()) throw ArgumentError("embed_text: empty text");
    Tape tape(false);
    Ref out = backend.embed_text(tape, text);
    return EmbeddingVector{tape.val(out)};
}

inline double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dim() != b.dim()) throw ShapeError("cosine_similarity: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
    return std::min(1.0, std::max(-1.0, acc));
}

inline double clip_distance(const EmbeddingVector& a, const EmbeddingVector& b) {
    return 1.0 - cosine_similarity(a, b);
}

inline ImageBatch crop_patches(const ImageBatch& images, const PatchSpec& spec) {
    Tape tape(false);
    Ref out = tape.crop_stack(tape.constant(images.data), spec.locations, spec.size);
    return ImageBatch{tape.val(out)};
}

// count + 1 in-bounds locations; index 0 is the shared positive site s_0.
inline std::vector<std::pair<int, int>> sample_patch_locations(RandomSource& rng, int image_size,
                                                               int patch_size, int count) {
    if (patch_size > image_size) throw ArgumentError("sample_patch_locations: patch larger than image");
    if (patch_size <= 0 || count < 1) throw ArgumentError("sample_patch_locations: bad arguments");
    std::uint64_t range = static_cast<std::uint64_t>(image_size - patch_size) + 1;
    std::vector<std::pair<int, int>> locs;
    locs.reserve(static_cast<std::size_t>(count) + 1);
    for (int i = 0; i < count + 1; ++i) {
        int top = static_cast<int>(rng.uniform_int(range));
        int left = static_cast<int>(rng.uniform_int(range));
        locs.emplace_back(top, left);
    }
    return locs;
}

inline PatchSpec make_patch_spec(RandomSource& rng, int image_size, int patch_size, int negatives) {
    PatchSpec spec;
    spec.size = patch_size;
    spec.count = negatives;
    spec.locations = sample_patch_locations(rng, image_size, patch_size, negatives);
    return spec;
}

}  // namespace oneclip
