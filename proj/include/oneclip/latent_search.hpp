#pragma once

#include <array>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "core.hpp"
#include "embedding.hpp"
#include "generator.hpp"
#include "perceptual.hpp"

namespace oneclip {

// Step-1 search configuration. The search always runs in the single W space.
struct SearchConfig {
    double lambda_reg = 0.01;
    int steps = 500;
    double step_size = 0.02;
    int augmentations_per_step = 4;
    int mean_latent_samples = 10000;
    double aug_scale_min = 0.7;  // crop side fraction
    double aug_scale_max = 1.0;
    double aug_jitter = 0.05;    // perspective corner displacement fraction

    void validate() const {
        if (lambda_reg < 0.0) throw ArgumentError("search: lambda_reg must be >= 0");
        if (steps < 1) throw ArgumentError("search: steps must be >= 1");
        if (step_size <= 0.0) throw ArgumentError("search: step size must be positive");
        if (augmentations_per_step < 1) throw ArgumentError("search: need at least one augmentation");
        if (!(aug_scale_min > 0.0 && aug_scale_min <= aug_scale_max && aug_scale_max <= 1.0))
            throw ArgumentError("search: crop scale range must satisfy 0 < min <= max <= 1");
        if (aug_jitter < 0.0) throw ArgumentError("search: jitter must be >= 0");
    }
};

struct SearchResult {
    LatentCode w_ref;
    ImageBatch i_ref;
    std::vector<double> trace;  // objective per step; entry 0 is the start point
};

namespace detail {

// Solve the 8-parameter homography mapping the unit square corners to the
// given source corners ((y,x) order), by Gaussian elimination.
inline std::array<double, 9> square_to_quad(const std::array<std::array<double, 2>, 4>& corners) {
    // unit-square corners in (u, v): (0,0), (1,0), (0,1), (1,1)
    const double us[4] = {0, 1, 0, 1};
    const double vs[4] = {0, 0, 1, 1};
    double A[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        double X = corners[static_cast<std::size_t>(i)][1];  // x
        double Y = corners[static_cast<std::size_t>(i)][0];  // y
        double u = us[i], v = vs[i];
        double* r0 = A[2 * i];
        r0[0] = u; r0[1] = v; r0[2] = 1; r0[6] = -u * X; r0[7] = -v * X; r0[8] = X;
        double* r1 = A[2 * i + 1];
        r1[3] = u; r1[4] = v; r1[5] = 1; r1[6] = -u * Y; r1[7] = -v * Y; r1[8] = Y;
    }
    for (int col = 0; col < 8; ++col) {
        int piv = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::fabs(A[r][col]) > std::fabs(A[piv][col])) piv = r;
        if (std::fabs(A[piv][col]) < 1e-14) throw ArgumentError("degenerate augmentation quad");
        if (piv != col)
            for (int c = 0; c < 9; ++c) std::swap(A[piv][c], A[col][c]);
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            double f = A[r][col] / A[col][col];
            for (int c = col; c < 9; ++c) A[r][c] -= f * A[col][c];
        }
    }
    std::array<double, 9> h{};
    for (int i = 0; i < 8; ++i) h[static_cast<std::size_t>(i)] = A[i][8] / A[i][i];
    h[8] = 1.0;
    return h;
}

}  // namespace detail

// Sampling grids for `n` random resized crops with perspective jitter over a
// size x size image. Each grid holds (y, x) source coordinates per output
// pixel. Eleven uniform draws are consumed per grid regardless of settings.
inline std::vector<Tensor> draw_augmentation_grids(RandomSource& rng, int size, int n, double scale_min,
                                                   double scale_max, double jitter) {
    if (n < 1) throw ArgumentError("augment: n must be >= 1");
    std::vector<Tensor> grids;
    grids.reserve(static_cast<std::size_t>(n));
    double extent = static_cast<double>(size - 1);
    for (int a = 0; a < n; ++a) {
        double s = rng.uniform(scale_min, scale_max);
        double side = s * extent;
        double top = rng.uniform() * (extent - side);
        double left = rng.uniform() * (extent - side);
        std::array<std::array<double, 2>, 4> corners = {{{top, left},
                                                         {top, left + side},
                                                         {top + side, left},
                                                         {top + side, left + side}}};
        bool identity = (s == 1.0);
        for (auto& c : corners)
            for (double& coord : c) {
                double d = jitter * extent * rng.uniform(-1.0, 1.0);
                coord += d;
                if (d != 0.0) identity = false;
            }

        Tensor grid({size, size, 2});
        if (identity) {
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    grid[(static_cast<std::size_t>(y) * size + x) * 2 + 0] = y;
                    grid[(static_cast<std::size_t>(y) * size + x) * 2 + 1] = x;
                }
        } else {
            auto h = detail::square_to_quad(corners);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    double u = extent > 0 ? x / extent : 0.0;
                    double v = extent > 0 ? y / extent : 0.0;
                    double wq = h[6] * u + h[7] * v + h[8];
                    grid[(static_cast<std::size_t>(y) * size + x) * 2 + 0] = (h[3] * u + h[4] * v + h[5]) / wq;
                    grid[(static_cast<std::size_t>(y) * size + x) * 2 + 1] = (h[0] * u + h[1] * v + h[2]) / wq;
                }
        }
        grids.push_back(std::move(grid));
    }
    return grids;
}

// Random resized crop + small perspective jitter, n copies per image,
// copy-major output (index = copy * batch + image). Bilinear sampling with
// edge clamp keeps outputs inside [-1, 1].
inline ImageBatch augment(const ImageBatch& images, RandomSource& rng, int n, double scale_min = 0.7,
                          double scale_max = 1.0, double jitter = 0.05) {
    if (images.height() != images.width()) throw ShapeError("augment: expects square images");
    auto grids = draw_augmentation_grids(rng, images.height(), n, scale_min, scale_max, jitter);
    Tape tape(false);
    Ref src = tape.constant(images.data);
    std::vector<Ref> copies;
    copies.reserve(grids.size());
    for (const Tensor& g : grids) copies.push_back(tape.warp(src, g));
    Ref out = copies.size() == 1 ? copies[0] : tape.concat0(copies);
    return ImageBatch{tape.val(out)};
}

namespace detail {

struct AdamScalars {
    Tensor m, v;
    int t = 0;
};

// One proposed Adam step; the caller accepts or discards the returned state.
inline Tensor adam_propose(const Tensor& w, const Tensor& g, AdamScalars& state, double lr, double b1,
                           double b2, double eps) {
    if (state.m.empty()) {
        state.m = Tensor(w.shape());
        state.v = Tensor(w.shape());
    }
    state.t += 1;
    Tensor out = w;
    double c1 = 1.0 - std::pow(b1, state.t);
    double c2 = 1.0 - std::pow(b2, state.t);
    for (std::size_t i = 0; i < w.size(); ++i) {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        double mh = state.m[i] / c1;
        double vh = state.v[i] / c2;
        out[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    return out;
}

template <typename Objective>
SearchResult run_search(const Generator& g_s, const LatentCode& w_bar, const SearchConfig& cfg,
                        const Objective& objective) {
    Tensor w = w_bar.data;
    auto eval = [&](const Tensor& wt, Tensor* grad_out) {
        Tape tape(grad_out != nullptr);
        Ref wleaf = grad_out != nullptr ? tape.input(Tensor::from_data({1, wt.dim(0)},
                                                                       std::vector<double>(wt.data(), wt.data() + wt.size())))
                                        : tape.constant(Tensor::from_data({1, wt.dim(0)},
                                                                          std::vector<double>(wt.data(), wt.data() + wt.size())));
        Ref obj = objective(tape, wleaf);
        double value = tape.item(obj);
        if (!std::isfinite(value)) throw NonFiniteError("latent search objective is non-finite");
        if (grad_out != nullptr) {
            tape.backward(obj);
            const Tensor& g = tape.grad(wleaf);
            *grad_out = Tensor::from_data(wt.shape(), std::vector<double>(g.data(), g.data() + g.size()));
        }
        return value;
    };

    std::vector<double> trace;
    trace.reserve(static_cast<std::size_t>(cfg.steps));
    Tensor grad;
    double cur = eval(w, &grad);
    trace.push_back(cur);

    AdamScalars adam;
    double lr = cfg.step_size;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const int max_backoff = 24;

    for (int step = 1; step < cfg.steps; ++step) {
        bool accepted = false;
        for (int attempt = 0; attempt < max_backoff && !accepted; ++attempt) {
            AdamScalars trial = adam;
            Tensor proposal = adam_propose(w, grad, trial, lr, b1, b2, eps);
            Tensor new_grad;
            double value = eval(proposal, &new_grad);
            if (value <= cur) {
                w = std::move(proposal);
                cur = value;
                grad = std::move(new_grad);
                adam = std::move(trial);
                accepted = true;
            } else {
                lr *= 0.5;
            }
        }
        trace.push_back(cur);
    }

    SearchResult result;
    result.w_ref = LatentCode::w(w);
    result.i_ref = synthesize(g_s, result.w_ref);
    result.trace = std::move(trace);
    return result;
}

}  // namespace detail

// CLIP-guided inversion of a target image: minimize the embedding distance
// between augmented copies of G_s(w) and the target, plus pixel, perceptual
// and latent regularization terms, starting from the mean latent. The
// augmentation transforms are drawn once per search so the objective stays a
// fixed deterministic function and accepted steps never increase it.
inline SearchResult invert_image(const Generator& g_s, const EmbedderBackend& embedder,
                                 const PerceptualBackend& perceptual, const ImageBatch& target,
                                 const SearchConfig& cfg, RandomSource& rng) {
    cfg.validate();
    validate_image_batch(target);
    if (target.count() != 1) throw ArgumentError("invert_image: expects a single target image");
    if (target.height() != g_s.output_resolution() || target.width() != g_s.output_resolution())
        throw ShapeError("invert_image: target must match the generator resolution (resize upstream)");

    LatentCode w_bar = mean_latent(g_s, cfg.mean_latent_samples, rng);
    auto grids = draw_augmentation_grids(rng, g_s.output_resolution(), cfg.augmentations_per_step,
                                         cfg.aug_scale_min, cfg.aug_scale_max, cfg.aug_jitter);

    Tensor target_embedding;
    {
        Tape tape(false);
        target_embedding = tape.val(embedder.embed(tape, tape.constant(target.data)));
    }

    int L = g_s.layer_count();
    const Tensor w_bar_row = Tensor::from_data({1, w_bar.dim()},
                                               std::vector<double>(w_bar.data.data(), w_bar.data.data() + w_bar.data.size()));

    auto objective = [&](Tape& tape, Ref wrow) {
        Ref wstack = tape.broadcast_layers(wrow, L);
        Ref img = g_s.synthesis_forward(tape, wstack, false);
        Ref target_c = tape.constant(target.data);
        Ref e_trg = tape.constant(Tensor::from_data({1, target_embedding.dim(1)},
                                                    std::vector<double>(target_embedding.data(),
                                                                        target_embedding.data() + target_embedding.size())));
        std::vector<Ref> dists;
        for (const Tensor& grid : grids) {
            Ref e_aug = embedder.embed(tape, tape.warp(img, grid));
            dists.push_back(tape.add_scalar(tape.neg(tape.row_dot(e_aug, e_trg, 0, 0)), 1.0));
        }
        Ref clip_term = tape.mean(tape.stack_scalars(dists));
        Ref pix = tape.mse(img, target_c);
        Ref per = perceptual.distance(tape, img, target_c);
        Ref reg = tape.scale(tape.norm2(tape.sub(wrow, tape.constant(w_bar_row))), cfg.lambda_reg);
        return tape.add(tape.add(clip_term, pix), tape.add(per, reg));
    };

    return detail::run_search(g_s, w_bar, cfg, objective);
}

// Text-guided variant: embedding distance to the target text plus latent
// regularization only.
inline SearchResult invert_text(const Generator& g_s, const EmbedderBackend& embedder, const std::string& t_trg,
                                const SearchConfig& cfg, RandomSource& rng) {
    cfg.validate();
    if (!embedder.supports_text()) throw UnsupportedError("invert_text: backend has no text tower");
    if (t_trg.empty()) throw ArgumentError("invert_text: empty target text");

    LatentCode w_bar = mean_latent(g_s, cfg.mean_latent_samples, rng);
    Tensor text_embedding;
    {
        Tape tape(false);
        const Tensor& e = tape.val(embedder.embed_text(tape, t_trg));
        text_embedding = Tensor::from_data({1, e.dim(0)}, std::vector<double>(e.data(), e.data() + e.size()));
    }

    int L = g_s.layer_count();
    const Tensor w_bar_row = Tensor::from_data({1, w_bar.dim()},
                                               std::vector<double>(w_bar.data.data(), w_bar.data.data() + w_bar.data.size()));

    auto objective = [&](Tape& tape, Ref wrow) {
        Ref wstack = tape.broadcast_layers(wrow, L);
        Ref img = g_s.synthesis_forward(tape, wstack, false);
        Ref e_img = embedder.embed(tape, img);
        Ref clip_term = tape.add_scalar(tape.neg(tape.row_dot(e_img, tape.constant(text_embedding), 0, 0)), 1.0);
        Ref reg = tape.scale(tape.norm2(tape.sub(wrow, tape.constant(w_bar_row))), cfg.lambda_reg);
        return tape.add(clip_term, reg);
    };

    return detail::run_search(g_s, w_bar, cfg, objective);
}

}  // namespace oneclip
