#pragma once

#include <filesystem>
#include <vector>

#include "core.hpp"
#include "generator.hpp"
#include "latent_io.hpp"

namespace oneclip {

enum class MixingMode { None, MeanReplace, RefReplace };

// Style-mixing trick applied at inference: replace the last k style rows with
// the adapted generator's own mean latent, or with the reference latent.
struct MixingPolicy {
    MixingMode mode = MixingMode::None;
    int k = 0;
};

namespace detail {
constexpr std::uint64_t kMixingStream = 904;
}

// Generate images for a batch of codes under a mixing policy. mean_replace
// recomputes the mean latent of the generator it is handed (the adapted one),
// not of any source model.
inline ImageBatch generate(const Generator& g_t, const std::vector<LatentCode>& codes, const MixingPolicy& policy,
                           const LatentCode* w_ref = nullptr, std::uint64_t mean_seed = 0,
                           int mean_samples = 10000) {
    if (codes.empty()) throw ArgumentError("generate: no codes");
    if (policy.mode == MixingMode::None) return synthesize_batch(g_t, codes);

    if (policy.k < 0 || policy.k > g_t.layer_count()) throw ArgumentError("generate: mixing k out of range");
    LatentCode replacement;
    if (policy.mode == MixingMode::MeanReplace) {
        RandomSource rng(mean_seed, detail::kMixingStream);
        replacement = mean_latent(g_t, mean_samples, rng);
    } else {
        if (w_ref == nullptr) throw ArgumentError("generate: ref_replace needs a reference latent");
        replacement = *w_ref;
    }

    std::vector<LatentCode> mixed;
    mixed.reserve(codes.size());
    for (const auto& code : codes)
        mixed.push_back(style_mix(code.broadcast(g_t.layer_count()), replacement, policy.k));
    return synthesize_batch(g_t, mixed);
}

// Generate from codes stored in a latent file (e.g. produced by an external
// encoder).
inline ImageBatch generate_from_external(const Generator& g_t, const std::filesystem::path& latent_file,
                                         const MixingPolicy& policy, const LatentCode* w_ref = nullptr,
                                         std::uint64_t mean_seed = 0, int mean_samples = 10000) {
    return generate(g_t, load_latents(latent_file), policy, w_ref, mean_seed, mean_samples);
}

// Apply an externally produced latent offset (editing direction) before
// generation. W offsets broadcast onto W+ codes and vice versa.
inline ImageBatch edit_and_generate(const Generator& g_t, const LatentCode& code, const LatentCode& offset,
                                    const MixingPolicy& policy, const LatentCode* w_ref = nullptr,
                                    std::uint64_t mean_seed = 0, int mean_samples = 10000) {
    if (code.dim() != offset.dim()) throw ShapeError("edit_and_generate: latent dimension mismatch");
    LatentCode edited;
    if (code.kind == LatentCode::Kind::W && offset.kind == LatentCode::Kind::W) {
        edited = code;
        for (std::size_t i = 0; i < edited.data.size(); ++i) edited.data[i] += offset.data[i];
    } else {
        LatentCode base = code.broadcast(g_t.layer_count());
        LatentCode off = offset.broadcast(g_t.layer_count());
        edited = base;
        for (std::size_t i = 0; i < edited.data.size(); ++i) edited.data[i] += off.data[i];
    }
    return generate(g_t, {edited}, policy, w_ref, mean_seed, mean_samples);
}

// Row-major tiling of equally sized images into one canvas; unused cells stay
// black (-1).
inline ImageBatch assemble_grid(const std::vector<ImageBatch>& images, int rows, int cols) {
    if (rows < 1 || cols < 1) throw ArgumentError("assemble_grid: grid must be at least 1x1");
    std::size_t total = 0;
    for (const auto& b : images) total += static_cast<std::size_t>(b.count());
    if (total == 0) throw ArgumentError("assemble_grid: no images");
    if (total > static_cast<std::size_t>(rows) * cols) throw ArgumentError("assemble_grid: grid too small");

    int H = images[0].height(), W = images[0].width();
    for (const auto& b : images)
        if (b.height() != H || b.width() != W) throw ShapeError("assemble_grid: images must share dimensions");

    ImageBatch out(1, rows * H, cols * W);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = -1.0;

    std::size_t cell = 0;
    for (const auto& b : images)
        for (int n = 0; n < b.count(); ++n, ++cell) {
            int r = static_cast<int>(cell) / cols;
            int c = static_cast<int>(cell) % cols;
            for (int ch = 0; ch < 3; ++ch)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        out.data.at(0, ch, r * H + y, c * W + x) = b.data.at(n, ch, y, x);
        }
    return out;
}

}  // namespace oneclip
