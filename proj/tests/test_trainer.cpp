#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>

#include "oneclip/trainer.hpp"
#include "support/oracle_harness.hpp"

using namespace oneclip;

namespace {

Generator toy_source(std::uint64_t seed = 200) { return Generator(toy_generator_config(), seed); }

ImageBatch styled_target(std::uint64_t seed = 201) {
    // target drawn from an unrelated generator: out-of-domain for the source
    Generator other(toy_generator_config(), seed);
    RandomSource rng(seed, 1);
    return synthesize(other, sample_w(other, rng, 1)[0]);
}

AdaptationConfig fast_config(int iterations) {
    AdaptationConfig cfg;
    cfg.preset_name = "toy";
    cfg.total_iterations = iterations;
    cfg.seed = 7;
    cfg.search.steps = 12;
    cfg.mean_latent_samples = 256;
    return cfg;
}

bool params_equal(const ParamStore& a, const ParamStore& b) {
    if (a.items().size() != b.items().size()) return false;
    for (std::size_t i = 0; i < a.items().size(); ++i) {
        const auto& pa = a.items()[i];
        const auto& pb = b.items()[i];
        if (pa.name != pb.name || !pa.value.shape_equals(pb.value)) return false;
        for (std::size_t k = 0; k < pa.value.size(); ++k)
            if (pa.value[k] != pb.value[k]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("schedule produces exactly n_rand rand and n_ref ref iterations per cycle") {
    Generator g_s = toy_source();
    ImageBatch target = styled_target();
    AdaptationConfig cfg = fast_config(24);

    TrainState state = adapt(g_s, target, cfg);
    REQUIRE(state.history.size() == 24);

    int rand_count = 0, ref_count = 0;
    for (std::size_t c = 0; c < state.history.size(); c += 4) {
        std::multiset<std::string> cycle;
        for (std::size_t j = c; j < std::min(c + 4, state.history.size()); ++j)
            cycle.insert(state.history[j].name);
        REQUIRE(cycle.count("rand") == 3);
        REQUIRE(cycle.count("ref") == 1);
    }
    for (const auto& rec : state.history) (rec.name == "rand" ? rand_count : ref_count)++;
    REQUIRE(rand_count == 18);
    REQUIRE(ref_count == 6);

    // flipped orientation
    AdaptationConfig flipped = fast_config(8);
    flipped.schedule = {1, 3};
    TrainState fstate = adapt(g_s, target, flipped);
    REQUIRE(fstate.history[0].name == "rand");
    REQUIRE(fstate.history[1].name == "ref");
    REQUIRE(fstate.history[2].name == "ref");
    REQUIRE(fstate.history[3].name == "ref");
    REQUIRE(fstate.history[4].name == "rand");
}

TEST_CASE("frozen parts stay bit-identical through training") {
    Generator g_s = toy_source(202);
    ImageBatch target = styled_target(203);
    AdaptationConfig cfg = fast_config(10);

    std::map<std::string, Tensor> before;
    for (const auto& p : g_s.params().items()) before[p.name] = p.value;

    TrainState state = adapt(g_s, target, cfg);

    bool some_changed = false;
    for (const auto& p : state.g_t.params().items()) {
        const Tensor& orig = before.at(p.name);
        bool frozen = state.g_t.param_frozen(p.name);
        bool identical = true;
        for (std::size_t i = 0; i < p.value.size(); ++i)
            if (p.value[i] != orig[i]) identical = false;
        if (frozen) {
            INFO(p.name);
            REQUIRE(identical);
        } else if (!identical) {
            some_changed = true;
        }
    }
    REQUIRE(some_changed);
}

TEST_CASE("training is deterministic given config and seed") {
    Generator g_s = toy_source(204);
    ImageBatch target = styled_target(205);
    AdaptationConfig cfg = fast_config(8);

    TrainState a = adapt(g_s, target, cfg);
    TrainState b = adapt(g_s, target, cfg);
    REQUIRE(params_equal(a.g_t.params(), b.g_t.params()));
    REQUIRE(params_equal(a.disc.params(), b.disc.params()));
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) REQUIRE(a.history[i].value == b.history[i].value);
}

TEST_CASE("checkpoint round trip and bit-exact resume") {
    Generator g_s = toy_source(206);
    ImageBatch target = styled_target(207);

    AdaptationConfig full = fast_config(14);
    TrainState straight = adapt(g_s, target, full);

    AdaptationConfig half = fast_config(7);
    TrainState partial = adapt(g_s, target, half);

    auto dir = std::filesystem::temp_directory_path() / "oneclip_trainer_test";
    std::filesystem::create_directories(dir);
    auto path = dir / "state.ckpt";
    save_checkpoint(partial, path);

    TrainState loaded = load_checkpoint(path);
    REQUIRE(loaded.iteration == 7);
    REQUIRE(params_equal(loaded.g_t.params(), partial.g_t.params()));
    REQUIRE(params_equal(loaded.disc.params(), partial.disc.params()));
    REQUIRE(loaded.latent_cursor == partial.latent_cursor);
    REQUIRE(loaded.history.size() == partial.history.size());

    continue_adapt(loaded, g_s, target, full);
    REQUIRE(loaded.iteration == 14);
    REQUIRE(params_equal(loaded.g_t.params(), straight.g_t.params()));
    REQUIRE(params_equal(loaded.disc.params(), straight.disc.params()));
    REQUIRE(loaded.history.size() == straight.history.size());
    for (std::size_t i = 0; i < loaded.history.size(); ++i) {
        REQUIRE(loaded.history[i].name == straight.history[i].name);
        REQUIRE(loaded.history[i].value == straight.history[i].value);
    }

    // corrupting any payload byte must raise VersionError, not garbage
    std::vector<char> bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x5a);
    auto bad = dir / "corrupt.ckpt";
    {
        std::ofstream out(bad, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    REQUIRE_THROWS_AS(load_checkpoint(bad), VersionError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("adapt_text runs without any discriminator") {
    Generator g_s = toy_source(208);
    AdaptationConfig cfg = fast_config(6);

    REQUIRE(cfg.iterations_text() == 6);
    AdaptationConfig defaults = fast_config(0);
    REQUIRE(defaults.iterations_text() == 1000);
    REQUIRE(defaults.source_text == "Photo");

    TrainState state = adapt_text(g_s, "an oil painting", cfg);
    REQUIRE_FALSE(state.has_discriminator);
    REQUIRE(state.disc.params().items().empty());
    REQUIRE(state.opt_d.moments().empty());
    REQUIRE(state.history.size() == 6);
    for (const auto& rec : state.history) REQUIRE(rec.name == "text");
}

TEST_CASE("text loss at iteration 0 hits the degenerate directional rule") {
    Generator g_s = toy_source(209);
    AdaptationConfig cfg = fast_config(1);
    cfg.seed = 11;

    TrainState state = adapt_text(g_s, "a charcoal sketch", cfg);
    REQUIRE(state.history.size() == 1);

    // replay the latent and patch streams the trainer consumed at iteration 0
    RandomSource latent_rng(cfg.seed, streams::kLatents);
    auto latents = sample_w(g_s, latent_rng, cfg.batch());
    RandomSource patch_rng(cfg.seed, streams::kPatches);
    std::vector<PatchSpec> specs;
    for (int b = 0; b < cfg.batch(); ++b)
        specs.push_back(make_patch_spec(patch_rng, 32, dataset_preset("toy").patch_size, cfg.patch_negatives));

    FakeEmbedder emb(cfg.embedder_seed, cfg.embedder_dim, cfg.embedder_resolution);
    Generator pristine = toy_source(209);  // G_t == G_s at iteration 0
    double lpatch = 0.0;
    for (int b = 0; b < cfg.batch(); ++b)
        lpatch += patch_consistency_loss(g_s, pristine, emb, latents[static_cast<std::size_t>(b)],
                                         specs[static_cast<std::size_t>(b)]) / cfg.batch();

    // L_con = 0 and both directional terms are exactly 1
    REQUIRE(state.history[0].value == Catch::Approx(lpatch + 2.0).margin(1e-9));
}

TEST_CASE("non-finite losses abort the run") {
    Generator g_s = toy_source(210);
    ImageBatch target = styled_target(211);
    AdaptationConfig cfg = fast_config(4);
    cfg.learning_rate = 1e18;  // drives the synthesis into NaN within a step or two

    REQUIRE_THROWS_AS(adapt(g_s, target, cfg), NonFiniteError);
}

TEST_CASE("checkpoint hook fires at the requested cadence") {
    Generator g_s = toy_source(212);
    ImageBatch target = styled_target(213);
    AdaptationConfig cfg = fast_config(9);
    cfg.checkpoint_every = 4;

    std::vector<std::int64_t> seen;
    adapt(g_s, target, cfg, [&](const TrainState& s) { seen.push_back(s.iteration); });
    REQUIRE(seen == std::vector<std::int64_t>{4, 8, 9});
}
