#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "checkpoint.hpp"
#include "core.hpp"
#include "embedding.hpp"
#include "generator.hpp"
#include "latent_search.hpp"
#include "losses.hpp"
#include "optimizer.hpp"
#include "perceptual.hpp"

namespace oneclip {

// Alternation schedule: each cycle runs n_rand iterations on L_rand followed
// by n_ref iterations on L_ref. The published text and figures disagree on the
// orientation, so both directions are one flag away.
struct Schedule {
    int n_rand = 3;
    int n_ref = 1;

    void validate() const {
        if (n_rand < 0 || n_ref < 0 || n_rand + n_ref < 1) throw ArgumentError("schedule: n_rand + n_ref must be >= 1");
    }
};

struct AdaptationConfig {
    std::string preset_name = "toy";
    LossWeights weights;
    SearchConfig search;
    double learning_rate = 0.02;
    int total_iterations = 0;  // 0 -> preset default (text mode: 1000)
    int batch_size = 0;        // 0 -> preset default
    Schedule schedule;
    std::uint64_t seed = 0;
    std::string embedder_name = "fake";
    std::uint64_t embedder_seed = 1000;
    int embedder_dim = 64;
    int embedder_resolution = 32;
    std::string perceptual_name = "toy";
    std::uint64_t perceptual_seed = 1001;
    bool freeze_torgb = true;
    bool freeze_mapping = true;
    ConMetric con_metric = ConMetric::Squared;
    AdvGenMode adv_gen_mode = AdvGenMode::ScoreDiff;
    int patch_negatives = 4;
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.99;
    int checkpoint_every = 0;  // 0 -> only on completion
    std::string source_text = "Photo";
    int mean_latent_samples = 10000;

    const DatasetPreset& preset() const { return dataset_preset(preset_name); }
    int iterations() const { return total_iterations > 0 ? total_iterations : preset().default_iterations; }
    int iterations_text() const { return total_iterations > 0 ? total_iterations : 1000; }
    int batch() const { return batch_size > 0 ? batch_size : preset().batch_size; }

    std::set<FreezePart> freeze_parts() const {
        std::set<FreezePart> parts;
        if (freeze_torgb) parts.insert(FreezePart::ToRGB);
        if (freeze_mapping) parts.insert(FreezePart::Mapping);
        return parts;
    }

    void validate() const {
        if (learning_rate <= 0.0) throw ArgumentError("config: learning rate must be positive");
        if (total_iterations < 0) throw ArgumentError("config: iterations must be >= 1");
        schedule.validate();
        weights.validate();
        if (patch_negatives < 1) throw ArgumentError("config: need at least one patch negative");
        if (batch() < 2) throw ArgumentError("config: batch size must be >= 2 for pairwise losses");
    }
};

struct LossRecord {
    std::int64_t iteration;
    std::string name;
    double value;
};

// Everything needed to continue a run bit-exactly: weights, optimizer moments,
// the reference latent, and the counters of every random stream the loop
// consumes.
struct TrainState {
    std::int64_t iteration = 0;
    bool text_mode = false;
    Generator g_t;
    bool has_discriminator = false;
    Discriminator disc;
    AdamOptimizer opt_g;
    AdamOptimizer opt_d;
    LatentCode w_ref;
    std::uint64_t latent_cursor = 0;
    std::uint64_t patch_cursor = 0;
    std::vector<LossRecord> history;
};

namespace streams {
constexpr std::uint64_t kSearch = 11;
constexpr std::uint64_t kLatents = 12;
constexpr std::uint64_t kPatches = 13;
constexpr std::uint64_t kDiscInit = 14;
constexpr std::uint64_t kHeldOut = 15;  // reserved for evaluation code
}  // namespace streams

using CheckpointHook = std::function<void(const TrainState&)>;

namespace detail {

inline DiscriminatorConfig discriminator_config_for(const DatasetPreset& preset) {
    if (preset.name == "toy") {
        DiscriminatorConfig cfg = toy_discriminator_config();
        cfg.patch_layers = preset.patch_layers;
        return cfg;
    }
    DiscriminatorConfig cfg;
    cfg.resolution = preset.resolution;
    cfg.base_channels = 16;
    int c = 16;
    for (int r = preset.resolution; r > 4; r /= 2) {
        c = std::min(2 * c, 64);
        cfg.stage_channels.push_back(c);
    }
    cfg.patch_layers = preset.patch_layers;
    return cfg;
}

inline bool generator_step_eligible(const Generator& g, const ParamTensor& p) {
    return p.trainable && !g.param_frozen(p.name);
}

inline void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + " became non-finite");
}

// Discriminator logistic loss on detached fake image values.
inline double discriminator_step(Discriminator& disc, AdamOptimizer& opt, const Tensor& fake_images,
                                 const Tensor& real_image, bool patch_phase) {
    Tape tape;
    Ref fake = tape.constant(fake_images);
    Ref real = tape.constant(real_image);
    Ref lf = patch_phase ? disc.patch_logits(tape, fake, disc.config().patch_layers, true)
                         : disc.global_logits(tape, fake, true);
    Ref lr = patch_phase ? disc.patch_logits(tape, real, disc.config().patch_layers, true)
                         : disc.global_logits(tape, real, true);
    Ref loss = tape.add(tape.mean(tape.softplus(lf)), tape.mean(tape.softplus(tape.neg(lr))));
    double value = tape.item(loss);
    check_finite(value, "discriminator loss");
    tape.backward(loss);
    opt.step(disc.params(), [](const ParamTensor& p) { return p.trainable; });
    return value;
}

}  // namespace detail

// Run (or continue) the image-target training loop up to cfg.iterations().
inline void continue_adapt(TrainState& state, const Generator& g_s, const ImageBatch& target,
                           const AdaptationConfig& cfg, const CheckpointHook& hook = {}) {
    cfg.validate();
    if (state.text_mode) throw ArgumentError("continue_adapt: state belongs to a text run");
    if (!state.has_discriminator) throw ArgumentError("continue_adapt: state has no discriminator");
    auto embedder = make_embedder(cfg.embedder_name, cfg.embedder_seed, cfg.embedder_dim, cfg.embedder_resolution);
    auto perceptual = make_perceptual(cfg.perceptual_name, cfg.perceptual_seed);

    RandomSource latent_rng(cfg.seed, streams::kLatents);
    latent_rng.set_counter(state.latent_cursor);
    RandomSource patch_rng(cfg.seed, streams::kPatches);
    patch_rng.set_counter(state.patch_cursor);

    const DatasetPreset& preset = cfg.preset();
    const int cycle = cfg.schedule.n_rand + cfg.schedule.n_ref;
    const Tensor w_ref_stack = stack_codes(state.g_t, {state.w_ref});

    for (std::int64_t i = state.iteration; i < cfg.iterations(); ++i) {
        bool rand_phase = cfg.schedule.n_rand > 0 && static_cast<int>(i % cycle) < cfg.schedule.n_rand;
        double g_value = 0.0;
        Tensor fake_images;
        if (rand_phase) {
            Tensor z({cfg.batch(), g_s.latent_dim()});
            for (std::size_t k = 0; k < z.size(); ++k) z[k] = latent_rng.normal();
            std::vector<PatchSpec> specs;
            specs.reserve(static_cast<std::size_t>(cfg.batch()));
            for (int b = 0; b < cfg.batch(); ++b)
                specs.push_back(make_patch_spec(patch_rng, g_s.output_resolution(), preset.patch_size, cfg.patch_negatives));

            Tape tape;
            // push z through each mapping on the tape so an unfrozen adapted
            // mapping receives gradients; frozen mappings keep the stacks
            // bitwise identical
            Ref zc = tape.constant(z);
            Ref stack_s = tape.broadcast_layers(g_s.mapping_forward(tape, zc, false), g_s.layer_count());
            Ref stack_t = tape.broadcast_layers(state.g_t.mapping_forward(tape, zc, true), state.g_t.layer_count());
            LossParts parts = rand_parts(tape, g_s, state.g_t, *embedder, stack_s, stack_t,
                                         specs, cfg.weights, state.disc, tape.constant(target.data), cfg.con_metric,
                                         cfg.adv_gen_mode, true);
            g_value = tape.item(parts.loss);
            detail::check_finite(g_value, "rand loss");
            fake_images = tape.val(parts.images_t);
            tape.backward(parts.loss);
            state.opt_g.step(state.g_t.params(),
                             [&](const ParamTensor& p) { return detail::generator_step_eligible(state.g_t, p); });
        } else {
            Tape tape;
            LossParts parts = reference_parts(tape, state.g_t, tape.constant(w_ref_stack), tape.constant(target.data),
                                              *perceptual, state.disc, cfg.adv_gen_mode, true);
            g_value = tape.item(parts.loss);
            detail::check_finite(g_value, "ref loss");
            fake_images = tape.val(parts.images_t);
            tape.backward(parts.loss);
            state.opt_g.step(state.g_t.params(),
                             [&](const ParamTensor& p) { return detail::generator_step_eligible(state.g_t, p); });
        }

        detail::discriminator_step(state.disc, state.opt_d, fake_images, target.data, rand_phase);

        state.history.push_back({i, rand_phase ? "rand" : "ref", g_value});
        state.iteration = i + 1;
        state.latent_cursor = latent_rng.counter();
        state.patch_cursor = patch_rng.counter();

        if (hook && cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 && i + 1 < cfg.iterations())
            hook(state);
    }
    if (hook) hook(state);
}

// Full two-step pipeline: CLIP-guided search for the reference latent, then
// alternating fine-tuning of a clone of the source generator.
inline TrainState adapt(const Generator& g_s, const ImageBatch& target, const AdaptationConfig& cfg,
                        const CheckpointHook& hook = {}, SearchResult* search_out = nullptr) {
    cfg.validate();
    validate_image_batch(target);
    auto embedder = make_embedder(cfg.embedder_name, cfg.embedder_seed, cfg.embedder_dim, cfg.embedder_resolution);
    auto perceptual = make_perceptual(cfg.perceptual_name, cfg.perceptual_seed);

    RandomSource search_rng(cfg.seed, streams::kSearch);
    SearchConfig search_cfg = cfg.search;
    search_cfg.lambda_reg = cfg.search.lambda_reg;
    search_cfg.mean_latent_samples = cfg.mean_latent_samples;
    SearchResult search = invert_image(g_s, *embedder, *perceptual, target, search_cfg, search_rng);
    if (search_out != nullptr) *search_out = search;

    TrainState state;
    state.g_t = clone_generator(g_s);
    state.g_t.set_frozen_parts(cfg.freeze_parts());
    state.has_discriminator = true;
    state.disc = Discriminator(detail::discriminator_config_for(cfg.preset()), cfg.seed + streams::kDiscInit);
    state.opt_g = AdamOptimizer({cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, 1e-8});
    state.opt_d = AdamOptimizer({cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, 1e-8});
    state.w_ref = search.w_ref;

    continue_adapt(state, g_s, target, cfg, hook);
    return state;
}

// Text-variant loop: a single L_text objective every iteration, no
// discriminator anywhere.
inline void continue_adapt_text(TrainState& state, const Generator& g_s, const std::string& t_trg,
                                const AdaptationConfig& cfg, const CheckpointHook& hook = {}) {
    cfg.validate();
    if (!state.text_mode) throw ArgumentError("continue_adapt_text: state belongs to an image run");
    auto embedder = make_embedder(cfg.embedder_name, cfg.embedder_seed, cfg.embedder_dim, cfg.embedder_resolution);

    RandomSource latent_rng(cfg.seed, streams::kLatents);
    latent_rng.set_counter(state.latent_cursor);
    RandomSource patch_rng(cfg.seed, streams::kPatches);
    patch_rng.set_counter(state.patch_cursor);

    const DatasetPreset& preset = cfg.preset();
    const Tensor w_ref_stack = stack_codes(state.g_t, {state.w_ref});

    for (std::int64_t i = state.iteration; i < cfg.iterations_text(); ++i) {
        Tensor z({cfg.batch(), g_s.latent_dim()});
        for (std::size_t k = 0; k < z.size(); ++k) z[k] = latent_rng.normal();
        std::vector<PatchSpec> specs;
        specs.reserve(static_cast<std::size_t>(cfg.batch()));
        for (int b = 0; b < cfg.batch(); ++b)
            specs.push_back(make_patch_spec(patch_rng, g_s.output_resolution(), preset.patch_size, cfg.patch_negatives));

        Tape tape;
        Ref zc = tape.constant(z);
        Ref stack_s = tape.broadcast_layers(g_s.mapping_forward(tape, zc, false), g_s.layer_count());
        Ref stack_t = tape.broadcast_layers(state.g_t.mapping_forward(tape, zc, true), state.g_t.layer_count());
        Ref loss = text_node2(tape, g_s, state.g_t, *embedder, stack_s, stack_t,
                              tape.constant(w_ref_stack), specs, cfg.source_text, t_trg, cfg.con_metric, true);
        double value = tape.item(loss);
        detail::check_finite(value, "text loss");
        tape.backward(loss);
        state.opt_g.step(state.g_t.params(),
                         [&](const ParamTensor& p) { return detail::generator_step_eligible(state.g_t, p); });

        state.history.push_back({i, "text", value});
        state.iteration = i + 1;
        state.latent_cursor = latent_rng.counter();
        state.patch_cursor = patch_rng.counter();

        if (hook && cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 && i + 1 < cfg.iterations_text())
            hook(state);
    }
    if (hook) hook(state);
}

inline TrainState adapt_text(const Generator& g_s, const std::string& t_trg, const AdaptationConfig& cfg,
                             const CheckpointHook& hook = {}, SearchResult* search_out = nullptr) {
    cfg.validate();
    auto embedder = make_embedder(cfg.embedder_name, cfg.embedder_seed, cfg.embedder_dim, cfg.embedder_resolution);
    if (!embedder->supports_text()) throw UnsupportedError("adapt_text: embedder has no text tower");

    RandomSource search_rng(cfg.seed, streams::kSearch);
    SearchConfig search_cfg = cfg.search;
    search_cfg.mean_latent_samples = cfg.mean_latent_samples;
    SearchResult search = invert_text(g_s, *embedder, t_trg, search_cfg, search_rng);
    if (search_out != nullptr) *search_out = search;

    TrainState state;
    state.text_mode = true;
    state.g_t = clone_generator(g_s);
    state.g_t.set_frozen_parts(cfg.freeze_parts());
    state.has_discriminator = false;
    state.opt_g = AdamOptimizer({cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, 1e-8});
    state.w_ref = search.w_ref;

    continue_adapt_text(state, g_s, t_trg, cfg, hook);
    return state;
}

// ------------------------------------------------------------- serialization

inline void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
    detail::BinaryWriter w;
    w.u8('O'); w.u8('C'); w.u8('K'); w.u8('P');
    w.u16(1);
    w.u8(state.text_mode ? 1 : 0);
    w.u8(state.has_discriminator ? 1 : 0);
    w.i64(state.iteration);
    w.u64(state.latent_cursor);
    w.u64(state.patch_cursor);
    detail::write_generator(w, state.g_t);
    if (state.has_discriminator) detail::write_discriminator(w, state.disc);
    detail::write_adam(w, state.opt_g);
    detail::write_adam(w, state.opt_d);
    detail::write_latent(w, state.w_ref);
    w.u64(state.history.size());
    for (const auto& rec : state.history) {
        w.i64(rec.iteration);
        w.str(rec.name);
        w.f64(rec.value);
    }
    w.write_file(path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
    detail::BinaryReader r(path);
    if (r.u8() != 'O' || r.u8() != 'C' || r.u8() != 'K' || r.u8() != 'P')
        throw VersionError("not a train-state checkpoint: " + path.string());
    if (r.u16() != 1) throw VersionError("unsupported checkpoint version");
    TrainState state;
    state.text_mode = r.u8() != 0;
    state.has_discriminator = r.u8() != 0;
    state.iteration = r.i64();
    state.latent_cursor = r.u64();
    state.patch_cursor = r.u64();
    state.g_t = detail::read_generator(r);
    if (state.has_discriminator) state.disc = detail::read_discriminator(r);
    state.opt_g = detail::read_adam(r);
    state.opt_d = detail::read_adam(r);
    state.w_ref = detail::read_latent(r);
    std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        LossRecord rec;
        rec.iteration = r.i64();
        rec.name = r.str();
        rec.value = r.f64();
        state.history.push_back(std::move(rec));
    }
    return state;
}

}  // namespace oneclip
