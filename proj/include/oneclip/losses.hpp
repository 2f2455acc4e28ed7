#pragma once

#include <string>
#include <vector>

#include "autodiff.hpp"
#include "core.hpp"
#include "embedding.hpp"
#include "generator.hpp"
#include "perceptual.hpp"

namespace oneclip {

struct LossWeights {
    double lambda_con = 10.0;
    double lambda_patch = 1.0;

    void validate() const {
        if (lambda_con < 0.0 || lambda_patch < 0.0) throw ArgumentError("loss weights must be non-negative");
    }
};

// How scalar similarity differences enter the consistency loss. Squared is the
// default (smooth at 0); absolute matches the norm as literally written.
enum class ConMetric { Squared, Absolute };

// Generator-side adversarial term: the plain score difference, or the
// non-saturating logistic form for wiring real pre-trained discriminators.
enum class AdvGenMode { ScoreDiff, Logistic };

struct SimilarityProfile {
    std::vector<double> values;  // one per unordered latent pair, in pair order
};

// ---------------------------------------------------------------- tape level

// Embeddings of G(w) for a latent stack -> pairwise cosine values [P].
inline Ref similarity_profile_node(Tape& tape, const Generator& gen, const EmbedderBackend& embedder,
                                   Ref wstack, bool train) {
    const Tensor& tw = tape.val(wstack);
    int B = tw.dim(0);
    Ref images = gen.synthesis_forward(tape, wstack, train);
    Ref emb = embedder.embed(tape, images);
    return tape.pair_dots(emb, pairwise_index(B));
}

inline Ref consistency_node(Tape& tape, Ref profile_s, Ref profile_t, ConMetric metric) {
    const Tensor& a = tape.val(profile_s);
    const Tensor& b = tape.val(profile_t);
    if (!a.shape_equals(b)) throw LengthMismatchError("consistency: profile lengths differ");
    Ref diff = tape.sub(profile_s, profile_t);
    Ref per_pair = metric == ConMetric::Squared ? tape.square(diff) : tape.abs_(diff);
    return tape.mean(per_pair);
}

// Contrastive patch term from scalar dot nodes: -log(exp(d+)/(exp(d+)+sum exp(d-))).
inline Ref patchnce_node(Tape& tape, Ref d_positive, const std::vector<Ref>& d_negatives) {
    if (d_negatives.empty()) throw ArgumentError("patchnce: need at least one negative");
    std::vector<Ref> shifted;
    shifted.reserve(d_negatives.size());
    for (Ref d : d_negatives) shifted.push_back(tape.sub(d, d_positive));
    Ref ex = tape.exp_(tape.stack_scalars(shifted));
    return tape.log_(tape.add_scalar(tape.sum(ex), 1.0));
}

// Patch-wise contrastive loss for one latent (one row of `wstack`): the
// positive patch pair is cropped at spec.locations[0] from G_t(w) and G_s(w),
// negatives at the remaining locations from G_s(w).
inline Ref patch_consistency_node(Tape& tape, Ref image_s, Ref image_t, const EmbedderBackend& embedder,
                                  const PatchSpec& spec) {
    if (spec.locations.size() < 2) throw ArgumentError("patch spec needs 1 positive + >=1 negative locations");
    Ref pos_t = tape.crop_stack(image_t, {spec.locations[0]}, spec.size);
    Ref crops_s = tape.crop_stack(image_s, spec.locations, spec.size);
    Ref v = embedder.embed(tape, pos_t);        // [1,e]
    Ref vs = embedder.embed(tape, crops_s);     // [N+1,e]
    Ref d_pos = tape.row_dot(v, vs, 0, 0);
    std::vector<Ref> d_neg;
    for (std::size_t i = 1; i < spec.locations.size(); ++i)
        d_neg.push_back(tape.row_dot(v, vs, 0, static_cast<int>(i)));
    return patchnce_node(tape, d_pos, d_neg);
}

inline Ref adv_generator_node(Tape& tape, Ref score_fake_mean, Ref score_real_mean, AdvGenMode mode) {
    if (mode == AdvGenMode::ScoreDiff) return tape.sub(score_fake_mean, score_real_mean);
    return tape.softplus(tape.neg(score_fake_mean));
}

struct LossParts {
    Ref loss;
    Ref images_t;  // synthesized adapted-generator images used by the loss
};

// Full L_ref: pixel MSE + perceptual distance + generator adversarial term on
// the global discriminator.
inline LossParts reference_parts(Tape& tape, const Generator& g_t, Ref w_ref_stack, Ref target,
                                 const PerceptualBackend& perceptual, const Discriminator& disc,
                                 AdvGenMode mode, bool train) {
    Ref img = g_t.synthesis_forward(tape, w_ref_stack, train);
    Ref pix = tape.mse(img, target);
    Ref per = perceptual.distance(tape, img, target);
    Ref fake = tape.mean(disc.global_logits(tape, img, false));
    Ref real = tape.mean(disc.global_logits(tape, target, false));
    return {tape.add(tape.add(pix, per), adv_generator_node(tape, fake, real, mode)), img};
}

inline Ref reference_node(Tape& tape, const Generator& g_t, Ref w_ref_stack, Ref target,
                          const PerceptualBackend& perceptual, const Discriminator& disc,
                          AdvGenMode mode, bool train) {
    return reference_parts(tape, g_t, w_ref_stack, target, perceptual, disc, mode, train).loss;
}

// Full L_rand: lambda_con * L_con + lambda_patch * mean L_patch + patch
// adversarial term. `specs` holds one PatchSpec per latent (or a single shared
// one).
// `wstack_s` and `wstack_t` usually alias the same latents; they diverge only
// when the adapted mapping network is being trained through the tape.
inline LossParts rand_parts(Tape& tape, const Generator& g_s, const Generator& g_t, const EmbedderBackend& embedder,
                            Ref wstack_s, Ref wstack_t, const std::vector<PatchSpec>& specs,
                            const LossWeights& weights, const Discriminator& disc, Ref target, ConMetric metric,
                            AdvGenMode mode, bool train) {
    weights.validate();
    const Tensor& tw = tape.val(wstack_s);
    int B = tw.dim(0);
    if (B < 2) throw ArgumentError("rand loss needs at least 2 latents");
    if (specs.size() != 1 && specs.size() != static_cast<std::size_t>(B))
        throw ArgumentError("rand loss: specs must be shared or one per latent");

    Ref imgs_s = g_s.synthesis_forward(tape, wstack_s, false);
    Ref imgs_t = g_t.synthesis_forward(tape, wstack_t, train);

    auto pairs = pairwise_index(B);
    Ref cs = tape.pair_dots(embedder.embed(tape, imgs_s), pairs);
    Ref ct = tape.pair_dots(embedder.embed(tape, imgs_t), pairs);
    Ref lcon = consistency_node(tape, cs, ct, metric);

    std::vector<Ref> lpatches;
    for (int b = 0; b < B; ++b) {
        const PatchSpec& spec = specs[specs.size() == 1 ? 0 : static_cast<std::size_t>(b)];
        lpatches.push_back(patch_consistency_node(tape, tape.slice_batch(imgs_s, b), tape.slice_batch(imgs_t, b),
                                                  embedder, spec));
    }
    Ref lpatch = tape.mean(tape.stack_scalars(lpatches));

    Ref fake = tape.mean(disc.patch_logits(tape, imgs_t, disc.config().patch_layers, false));
    Ref real = tape.mean(disc.patch_logits(tape, target, disc.config().patch_layers, false));
    Ref ladv = adv_generator_node(tape, fake, real, mode);

    Ref loss = tape.add(tape.add(tape.scale(lcon, weights.lambda_con), tape.scale(lpatch, weights.lambda_patch)), ladv);
    return {loss, imgs_t};
}

inline Ref rand_node(Tape& tape, const Generator& g_s, const Generator& g_t, const EmbedderBackend& embedder,
                     Ref wstack, const std::vector<PatchSpec>& specs, const LossWeights& weights,
                     const Discriminator& disc, Ref target, ConMetric metric, AdvGenMode mode, bool train) {
    return rand_parts(tape, g_s, g_t, embedder, wstack, wstack, specs, weights, disc, target, metric, mode, train).loss;
}

// Directional term for one embedding-difference row against a fixed unit text
// direction; returns the constant 1 when the image direction degenerates.
inline Ref directional_row_node(Tape& tape, Ref diff_rows, int row, const Tensor& text_dir_unit) {
    Ref sq = tape.row_dot(diff_rows, diff_rows, row, row);
    if (tape.item(sq) < 1e-16) {
        return tape.constant(Tensor::from_data({1}, {1.0}));
    }
    Tensor t2 = Tensor::from_data({1, text_dir_unit.dim(0)},
                                  std::vector<double>(text_dir_unit.data(), text_dir_unit.data() + text_dir_unit.size()));
    Ref dot = tape.row_dot(diff_rows, tape.constant(t2), row, 0);
    Ref cosv = tape.div(dot, tape.sqrt_(sq));
    return tape.add_scalar(tape.neg(cosv), 1.0);
}

// Mean directional loss over the latent stack. The text delta is constant, so
// it is computed in the value domain; a degenerate text delta also triggers
// the constant-1 rule.
inline Ref directional_node2(Tape& tape, const EmbedderBackend& embedder, const Generator& g_s,
                             const Generator& g_t, Ref wstack_s, Ref wstack_t, const std::string& t_src,
                             const std::string& t_trg, bool train) {
    if (!embedder.supports_text()) throw UnsupportedError("directional loss needs a text tower");
    if (t_src.empty() || t_trg.empty()) throw ArgumentError("directional loss: empty text");
    const Tensor& et = tape.val(embedder.embed_text(tape, t_trg));
    const Tensor& es = tape.val(embedder.embed_text(tape, t_src));
    Tensor delta_t({et.dim(0)});
    double norm = 0.0;
    for (std::size_t i = 0; i < delta_t.size(); ++i) {
        delta_t[i] = et[i] - es[i];
        norm += delta_t[i] * delta_t[i];
    }
    norm = std::sqrt(norm);
    const Tensor& tw = tape.val(wstack_s);
    int B = tw.dim(0);
    if (norm < 1e-8) return tape.constant(Tensor::from_data({1}, {1.0}));
    for (std::size_t i = 0; i < delta_t.size(); ++i) delta_t[i] /= norm;

    Ref emb_s = embedder.embed(tape, g_s.synthesis_forward(tape, wstack_s, false));
    Ref emb_t = embedder.embed(tape, g_t.synthesis_forward(tape, wstack_t, train));
    Ref diff = tape.sub(emb_t, emb_s);
    std::vector<Ref> terms;
    for (int b = 0; b < B; ++b) terms.push_back(directional_row_node(tape, diff, b, delta_t));
    return tape.mean(tape.stack_scalars(terms));
}

inline Ref directional_node(Tape& tape, const EmbedderBackend& embedder, const Generator& g_s,
                            const Generator& g_t, Ref wstack, const std::string& t_src,
                            const std::string& t_trg, bool train) {
    return directional_node2(tape, embedder, g_s, g_t, wstack, wstack, t_src, t_trg, train);
}

// Full L_text: L_con + mean L_patch + mean L_dir + L_dir at the reference
// latent. No adversarial terms.
inline Ref text_node2(Tape& tape, const Generator& g_s, const Generator& g_t, const EmbedderBackend& embedder,
                      Ref wstack_s, Ref wstack_t, Ref w_ref_stack, const std::vector<PatchSpec>& specs,
                      const std::string& t_src, const std::string& t_trg, ConMetric metric, bool train) {
    const Tensor& tw = tape.val(wstack_s);
    int B = tw.dim(0);
    if (B < 2) throw ArgumentError("text loss needs at least 2 latents");
    if (specs.size() != 1 && specs.size() != static_cast<std::size_t>(B))
        throw ArgumentError("text loss: specs must be shared or one per latent");

    Ref imgs_s = g_s.synthesis_forward(tape, wstack_s, false);
    Ref imgs_t = g_t.synthesis_forward(tape, wstack_t, train);

    auto pairs = pairwise_index(B);
    Ref cs = tape.pair_dots(embedder.embed(tape, imgs_s), pairs);
    Ref ct = tape.pair_dots(embedder.embed(tape, imgs_t), pairs);
    Ref lcon = consistency_node(tape, cs, ct, metric);

    std::vector<Ref> lpatches;
    for (int b = 0; b < B; ++b) {
        const PatchSpec& spec = specs[specs.size() == 1 ? 0 : static_cast<std::size_t>(b)];
        lpatches.push_back(patch_consistency_node(tape, tape.slice_batch(imgs_s, b), tape.slice_batch(imgs_t, b),
                                                  embedder, spec));
    }
    Ref lpatch = tape.mean(tape.stack_scalars(lpatches));

    Ref ldir = directional_node2(tape, embedder, g_s, g_t, wstack_s, wstack_t, t_src, t_trg, train);
    Ref ldir_ref = directional_node(tape, embedder, g_s, g_t, w_ref_stack, t_src, t_trg, train);

    return tape.add(tape.add(lcon, lpatch), tape.add(ldir, ldir_ref));
}

inline Ref text_node(Tape& tape, const Generator& g_s, const Generator& g_t, const EmbedderBackend& embedder,
                     Ref wstack, Ref w_ref_stack, const std::vector<PatchSpec>& specs,
                     const std::string& t_src, const std::string& t_trg, ConMetric metric, bool train) {
    return text_node2(tape, g_s, g_t, embedder, wstack, wstack, w_ref_stack, specs, t_src, t_trg, metric, train);
}

// --------------------------------------------------------------- value level

inline SimilarityProfile similarity_profile(const Generator& gen, const EmbedderBackend& embedder,
                                            const std::vector<LatentCode>& latents) {
    if (latents.size() < 2) throw ArgumentError("similarity_profile: need at least 2 latents");
    Tape tape(false);
    Ref vals = similarity_profile_node(tape, gen, embedder, tape.constant(stack_codes(gen, latents)), false);
    const Tensor& t = tape.val(vals);
    return SimilarityProfile{std::vector<double>(t.data(), t.data() + t.size())};
}

inline double consistency_loss(const SimilarityProfile& profile_s, const SimilarityProfile& profile_t,
                               ConMetric metric = ConMetric::Squared) {
    if (profile_s.values.size() != profile_t.values.size())
        throw LengthMismatchError("consistency_loss: profile lengths differ");
    if (profile_s.values.empty()) throw ArgumentError("consistency_loss: empty profiles");
    double acc = 0.0;
    for (std::size_t i = 0; i < profile_s.values.size(); ++i) {
        double d = profile_s.values[i] - profile_t.values[i];
        acc += metric == ConMetric::Squared ? d * d : std::fabs(d);
    }
    return acc / static_cast<double>(profile_s.values.size());
}

inline double patch_consistency_loss(const Generator& g_s, const Generator& g_t, const EmbedderBackend& embedder,
                                     const LatentCode& w, const PatchSpec& spec) {
    Tape tape(false);
    Ref stack_s = tape.constant(stack_codes(g_s, {w}));
    Ref img_s = g_s.synthesis_forward(tape, stack_s, false);
    Ref img_t = g_t.synthesis_forward(tape, tape.constant(stack_codes(g_t, {w})), false);
    return tape.item(patch_consistency_node(tape, img_s, img_t, embedder, spec));
}

inline double adv_generator(double score_fake, double score_real) { return score_fake - score_real; }

inline double softplus_value(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double adv_discriminator(double score_fake, double score_real, double r1_penalty, double gamma = 10.0) {
    if (r1_penalty < 0.0) throw ArgumentError("adv_discriminator: r1 penalty must be non-negative");
    return softplus_value(score_fake) + softplus_value(-score_real) + gamma * r1_penalty;
}

inline double reference_loss(const Generator& g_t, const LatentCode& w_ref, const ImageBatch& target,
                             const PerceptualBackend& perceptual, const Discriminator& disc,
                             AdvGenMode mode = AdvGenMode::ScoreDiff) {
    Tape tape(false);
    Ref stack = tape.constant(stack_codes(g_t, {w_ref}));
    return tape.item(reference_node(tape, g_t, stack, tape.constant(target.data), perceptual, disc, mode, false));
}

inline double rand_loss(const Generator& g_s, const Generator& g_t, const EmbedderBackend& embedder,
                        const std::vector<LatentCode>& latents, const std::vector<PatchSpec>& specs,
                        const LossWeights& weights, const Discriminator& disc, const ImageBatch& target,
                        ConMetric metric = ConMetric::Squared, AdvGenMode mode = AdvGenMode::ScoreDiff) {
    if (latents.size() < 2) throw ArgumentError("rand_loss: need at least 2 latents");
    Tape tape(false);
    return tape.item(rand_node(tape, g_s, g_t, embedder, tape.constant(stack_codes(g_t, latents)), specs, weights,
                               disc, tape.constant(target.data), metric, mode, false));
}

inline double directional_loss(const EmbedderBackend& embedder, const Generator& g_s, const Generator& g_t,
                               const LatentCode& w, const std::string& t_src, const std::string& t_trg) {
    Tape tape(false);
    return tape.item(directional_node(tape, embedder, g_s, g_t, tape.constant(stack_codes(g_t, {w})), t_src, t_trg, false));
}

inline double text_loss(const Generator& g_s, const Generator& g_t, const EmbedderBackend& embedder,
                        const std::vector<LatentCode>& latents, const LatentCode& w_ref,
                        const std::vector<PatchSpec>& specs, const std::string& t_src, const std::string& t_trg,
                        ConMetric metric = ConMetric::Squared) {
    if (latents.size() < 2) throw ArgumentError("text_loss: need at least 2 latents");
    Tape tape(false);
    return tape.item(text_node(tape, g_s, g_t, embedder, tape.constant(stack_codes(g_t, latents)),
                               tape.constant(stack_codes(g_t, {w_ref})), specs, t_src, t_trg, metric, false));
}

}  // namespace oneclip
