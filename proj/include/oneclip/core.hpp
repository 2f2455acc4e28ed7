#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace oneclip {

// Batch of float images, channels-first, values in [-1, 1].
struct ImageBatch {
    Tensor data;  // [N, 3, H, W]

    ImageBatch() = default;
    explicit ImageBatch(Tensor t) : data(std::move(t)) {}
    ImageBatch(int n, int h, int w) : data(Tensor({n, 3, h, w})) {}

    int count() const { return data.rank() == 4 ? data.dim(0) : 0; }
    int channels() const { return data.rank() == 4 ? data.dim(1) : 0; }
    int height() const { return data.rank() == 4 ? data.dim(2) : 0; }
    int width() const { return data.rank() == 4 ? data.dim(3) : 0; }
};

// A point in the generator's style space: a single vector (W) or a per-layer
// stack (W+).
struct LatentCode {
    enum class Kind { W, WPlus };

    Kind kind = Kind::W;
    Tensor data;  // [d] for W, [L, d] for WPlus

    static LatentCode w(Tensor t) {
        if (t.rank() != 1) throw ShapeError("LatentCode::w expects a 1-d tensor");
        return LatentCode{Kind::W, std::move(t)};
    }
    static LatentCode wplus(Tensor t) {
        if (t.rank() != 2) throw ShapeError("LatentCode::wplus expects a 2-d tensor");
        return LatentCode{Kind::WPlus, std::move(t)};
    }

    int layers() const { return kind == Kind::WPlus ? data.dim(0) : 1; }
    int dim() const { return kind == Kind::WPlus ? data.dim(1) : data.dim(0); }

    // Expand a W code to an explicit L-row stack; W+ codes must already have
    // the requested row count.
    LatentCode broadcast(int layer_count) const {
        if (kind == Kind::WPlus) {
            if (data.dim(0) != layer_count)
                throw ShapeError("LatentCode: W+ row count does not match generator layers");
            return *this;
        }
        Tensor out({layer_count, dim()});
        for (int l = 0; l < layer_count; ++l)
            for (int i = 0; i < dim(); ++i) out[static_cast<std::size_t>(l) * dim() + i] = data[i];
        return wplus(std::move(out));
    }
};

// Unit-norm semantic embedding.
struct EmbeddingVector {
    Tensor data;  // [e]

    int dim() const { return data.rank() == 1 ? data.dim(0) : 0; }

    double norm() const {
        double s = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) s += data[i] * data[i];
        return std::sqrt(s);
    }
};

inline void validate_image_batch(const ImageBatch& batch) {
    const Tensor& t = batch.data;
    if (t.rank() != 4) throw ShapeError("image batch must be rank 4 (N,C,H,W), got " + t.shape_str());
    if (t.dim(1) != 3) throw ShapeError("image batch must have 3 channels, got " + t.shape_str());
    if (!is_power_of_two(t.dim(2)) || !is_power_of_two(t.dim(3)))
        throw ShapeError("image height/width must be positive powers of two, got " + t.shape_str());
    for (std::size_t i = 0; i < t.size(); ++i) {
        double v = t[i];
        if (!(v >= -1.0 && v <= 1.0)) throw RangeError("image value outside [-1,1]");
    }
}

// All unordered index pairs (i, j) with i < j, lexicographic. Cosine
// similarity is symmetric, so unordered pairs suffice.
inline std::vector<std::pair<int, int>> pairwise_index(int n_latents) {
    if (n_latents < 2) throw ArgumentError("pairwise_index: need at least 2 latents");
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<std::size_t>(n_latents) * (n_latents - 1) / 2);
    for (int i = 0; i < n_latents; ++i)
        for (int j = i + 1; j < n_latents; ++j) pairs.emplace_back(i, j);
    return pairs;
}

}  // namespace oneclip
