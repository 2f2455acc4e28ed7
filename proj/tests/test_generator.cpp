#include <catch2/catch_amalgamated.hpp>

#include "oneclip/generator.hpp"
#include "support/oracle_harness.hpp"

using namespace oneclip;

namespace {

Generator tiny_generator(std::uint64_t seed = 5) {
    GeneratorConfig cfg;
    cfg.resolution = 8;
    cfg.latent_dim = 8;
    cfg.stage_channels = {6, 4};
    return Generator(cfg, seed);
}

}  // namespace

TEST_CASE("sample_w determinism and errors") {
    Generator gen = tiny_generator();
    RandomSource r1(3, 1), r2(3, 1);
    auto a = sample_w(gen, r1, 4);
    auto b = sample_w(gen, r2, 4);
    REQUIRE(a.size() == 4);
    for (int i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < a[0].data.size(); ++j)
            REQUIRE(a[static_cast<std::size_t>(i)].data[j] == b[static_cast<std::size_t>(i)].data[j]);
    REQUIRE_THROWS_AS(sample_w(gen, r1, 0), ArgumentError);
}

TEST_CASE("sample_w applies the mapping: linear fixture equals M*z") {
    GeneratorConfig cfg;
    cfg.resolution = 8;
    cfg.latent_dim = 4;
    cfg.stage_channels = {4, 4};
    cfg.mapping_layers = 1;
    cfg.mapping_lrelu = false;
    cfg.normalize_z = false;
    Generator gen(cfg, 9);

    const Tensor& M = gen.params().get("mapping.0.weight").value;

    // log the z draws by replaying the stream
    RandomSource rng(77, 0), replay(77, 0);
    auto ws = sample_w(gen, rng, 3);
    Tensor z({3, 4});
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = replay.normal();

    for (int n = 0; n < 3; ++n)
        for (int o = 0; o < 4; ++o) {
            double acc = 0.0;
            for (int i = 0; i < 4; ++i)
                acc += M[static_cast<std::size_t>(o) * 4 + i] * z[static_cast<std::size_t>(n) * 4 + i];
            REQUIRE(ws[static_cast<std::size_t>(n)].data[static_cast<std::size_t>(o)] == Catch::Approx(acc).margin(1e-12));
        }
}

TEST_CASE("mean_latent of identity mapping concentrates near zero") {
    GeneratorConfig cfg;
    cfg.resolution = 8;
    cfg.latent_dim = 16;
    cfg.stage_channels = {4, 4};
    cfg.mapping_layers = 0;  // identity mapping
    cfg.normalize_z = false;
    Generator gen(cfg, 2);

    RandomSource rng(5, 2);
    const int n = 4096;
    auto mean = mean_latent(gen, n, rng);
    double bound = 4.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t i = 0; i < mean.data.size(); ++i) REQUIRE(std::fabs(mean.data[i]) < bound);

    RandomSource r1(5, 3), r2(5, 3);
    auto m1 = mean_latent(gen, 100, r1);
    auto m2 = mean_latent(gen, 100, r2);
    for (std::size_t i = 0; i < m1.data.size(); ++i) REQUIRE(m1.data[i] == m2.data[i]);

    RandomSource r3(5, 4), r4(5, 4);
    auto single = mean_latent(gen, 1, r3);
    auto sampled = sample_w(gen, r4, 1);
    for (std::size_t i = 0; i < single.data.size(); ++i) REQUIRE(single.data[i] == sampled[0].data[i]);

    REQUIRE_THROWS_AS(mean_latent(gen, 0, r3), ArgumentError);
}

TEST_CASE("synthesize is deterministic and honors W broadcast") {
    Generator gen = tiny_generator();
    RandomSource rng(1, 5);
    auto w = sample_w(gen, rng, 1)[0];

    ImageBatch a = synthesize(gen, w);
    ImageBatch b = synthesize(gen, w);
    REQUIRE(a.data.shape() == std::vector<int>{1, 3, 8, 8});
    for (std::size_t i = 0; i < a.data.size(); ++i) REQUIRE(a.data[i] == b.data[i]);
    REQUIRE_NOTHROW(validate_image_batch(a));

    ImageBatch c = synthesize(gen, w.broadcast(gen.layer_count()));
    for (std::size_t i = 0; i < a.data.size(); ++i) REQUIRE(a.data[i] == c.data[i]);

    Tensor badlayers({3, 8});
    REQUIRE_THROWS_AS(synthesize(gen, LatentCode::wplus(badlayers)), ShapeError);
}

TEST_CASE("synthesis matches an independent naive evaluation") {
    // 4x4 single-stage generator evaluated by hand-rolled loops.
    GeneratorConfig cfg;
    cfg.resolution = 4;
    cfg.latent_dim = 3;
    cfg.stage_channels = {2};
    cfg.mapping_layers = 1;
    Generator gen(cfg, 31);

    RandomSource rng(8, 6);
    auto w = sample_w(gen, rng, 1)[0];
    ImageBatch img = synthesize(gen, w);

    auto& P = gen.params();
    auto conv3 = [&](const std::vector<double>& in, int cin, int cout, const Tensor& wt, const Tensor& bt) {
        std::vector<double> out(static_cast<std::size_t>(cout) * 16, 0.0);
        for (int o = 0; o < cout; ++o)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) {
                    double acc = bt[static_cast<std::size_t>(o)];
                    for (int c = 0; c < cin; ++c)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                int sy = y + ky - 1, sx = x + kx - 1;
                                if (sy < 0 || sy >= 4 || sx < 0 || sx >= 4) continue;
                                acc += in[static_cast<std::size_t>(c) * 16 + sy * 4 + sx] * wt.at(o, c, ky, kx);
                            }
                    out[static_cast<std::size_t>(o) * 16 + y * 4 + x] = acc;
                }
        return out;
    };
    auto lrelu = [](std::vector<double>& v) {
        for (auto& x : v) x = x >= 0 ? x : 0.2 * x;
    };

    const Tensor& cv = P.get("const").value;
    std::vector<double> feat(cv.data(), cv.data() + cv.size());
    for (int layer = 0; layer < 2; ++layer) {
        std::string ln = gen.layer_name(layer);
        const Tensor& aw = P.get(ln + ".affine.weight").value;
        const Tensor& ab = P.get(ln + ".affine.bias").value;
        std::vector<double> style(2, 0.0);
        for (int c = 0; c < 2; ++c) {
            double acc = ab[static_cast<std::size_t>(c)];
            for (int i = 0; i < 3; ++i) acc += aw[static_cast<std::size_t>(c) * 3 + i] * w.data[static_cast<std::size_t>(i)];
            style[static_cast<std::size_t>(c)] = acc;
        }
        for (int c = 0; c < 2; ++c)
            for (int i = 0; i < 16; ++i) feat[static_cast<std::size_t>(c) * 16 + i] *= style[static_cast<std::size_t>(c)];
        feat = conv3(feat, 2, 2, P.get(ln + ".conv.weight").value, P.get(ln + ".conv.bias").value);
        double strength = P.get(ln + ".noise_strength").value[0];
        const Tensor& nz = gen.noise()[static_cast<std::size_t>(layer)];
        for (int c = 0; c < 2; ++c)
            for (int i = 0; i < 16; ++i) feat[static_cast<std::size_t>(c) * 16 + i] += strength * nz[static_cast<std::size_t>(i)];
        lrelu(feat);
    }
    const Tensor& tw = P.get("torgb0.weight").value;
    const Tensor& tb = P.get("torgb0.bias").value;
    for (int o = 0; o < 3; ++o)
        for (int i = 0; i < 16; ++i) {
            double acc = tb[static_cast<std::size_t>(o)];
            for (int c = 0; c < 2; ++c) acc += feat[static_cast<std::size_t>(c) * 16 + i] * tw.at(o, c, 0, 0);
            REQUIRE(img.data[static_cast<std::size_t>(o) * 16 + i] == Catch::Approx(std::tanh(acc)).margin(1e-12));
        }
}

TEST_CASE("style_mix") {
    Tensor stack({6, 4});
    for (std::size_t i = 0; i < stack.size(); ++i) stack[i] = static_cast<double>(i);
    auto code = LatentCode::wplus(stack);
    Tensor rep({4});
    for (int i = 0; i < 4; ++i) rep[static_cast<std::size_t>(i)] = -1.0;
    auto repl = LatentCode::w(rep);

    auto same = style_mix(code, repl, 0);
    for (std::size_t i = 0; i < stack.size(); ++i) REQUIRE(same.data[i] == stack[i]);

    auto all = style_mix(code, repl, 6);
    for (std::size_t i = 0; i < all.data.size(); ++i) REQUIRE(all.data[i] == -1.0);

    auto mixed = style_mix(code, repl, 2);
    for (int l = 0; l < 4; ++l)
        for (int i = 0; i < 4; ++i) REQUIRE(mixed.data[static_cast<std::size_t>(l * 4 + i)] == stack[static_cast<std::size_t>(l * 4 + i)]);
    for (int l = 4; l < 6; ++l)
        for (int i = 0; i < 4; ++i) REQUIRE(mixed.data[static_cast<std::size_t>(l * 4 + i)] == -1.0);

    // idempotence
    auto twice = style_mix(mixed, repl, 2);
    for (std::size_t i = 0; i < mixed.data.size(); ++i) REQUIRE(twice.data[i] == mixed.data[i]);

    REQUIRE_THROWS_AS(style_mix(code, repl, 7), ArgumentError);
}

TEST_CASE("clone isolation") {
    Generator gen = tiny_generator();
    RandomSource rng(4, 8);
    auto w = sample_w(gen, rng, 1)[0];
    ImageBatch before = synthesize(gen, w);

    Generator clone = clone_generator(gen);
    ImageBatch cs = synthesize(clone, w);
    for (std::size_t i = 0; i < before.data.size(); ++i) REQUIRE(cs.data[i] == before.data[i]);

    for (auto& p : clone.params().items())
        for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += 0.25;

    ImageBatch after = synthesize(gen, w);
    for (std::size_t i = 0; i < before.data.size(); ++i) REQUIRE(after.data[i] == before.data[i]);
}

TEST_CASE("frozen parts receive no gradients") {
    Generator gen = tiny_generator();
    gen.set_frozen_parts({FreezePart::ToRGB, FreezePart::Mapping});

    RandomSource rng(6, 9);
    Tensor z({2, gen.latent_dim()});
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();

    Tape tape;
    Ref w = gen.mapping_forward(tape, tape.constant(z), /*train=*/true);
    Ref wp = tape.broadcast_layers(w, gen.layer_count());
    Ref img = gen.synthesis_forward(tape, wp, /*train=*/true);
    Ref loss = tape.mean(tape.square(img));
    tape.backward(loss);

    for (const auto& p : gen.params().items()) {
        bool frozen = gen.param_frozen(p.name);
        if (frozen) {
            REQUIRE(p.grad.empty());
        } else {
            REQUIRE_FALSE(p.grad.empty());
        }
    }
}

TEST_CASE("global_score is deterministic, batched, and linear fixture matches inner product") {
    DiscriminatorConfig cfg = toy_discriminator_config();
    Discriminator disc(cfg, 12);

    RandomSource rng(10, 1);
    ImageBatch imgs(3, 32, 32);
    for (std::size_t i = 0; i < imgs.data.size(); ++i) imgs.data[i] = rng.uniform(-1.0, 1.0);

    auto s1 = global_score(disc, imgs);
    auto s2 = global_score(disc, imgs);
    REQUIRE(s1.size() == 3);
    REQUIRE(s1 == s2);

    // slope-1 activations make the whole network linear; verify score(x) -
    // score(0) equals the sum of per-pixel responses on a small fixture.
    DiscriminatorConfig lin;
    lin.resolution = 8;
    lin.base_channels = 3;
    lin.stage_channels = {3};
    lin.lrelu_slope = 1.0;
    Discriminator ld(lin, 13);

    ImageBatch x(1, 8, 8);
    RandomSource r2(11, 2);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = r2.uniform(-1.0, 1.0);
    ImageBatch zero(1, 8, 8);
    double base = global_score(ld, zero)[0];

    double predicted = base;
    ImageBatch probe(1, 8, 8);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        probe.data[i] = 1.0;
        predicted += (global_score(ld, probe)[0] - base) * x.data[i];
        probe.data[i] = 0.0;
    }
    REQUIRE(global_score(ld, x)[0] == Catch::Approx(predicted).epsilon(1e-9));
}

TEST_CASE("patch_score aggregates spatial logits and validates layers") {
    DiscriminatorConfig cfg = toy_discriminator_config();
    Discriminator disc(cfg, 14);

    RandomSource rng(12, 3);
    ImageBatch imgs(2, 32, 32);
    for (std::size_t i = 0; i < imgs.data.size(); ++i) imgs.data[i] = rng.uniform(-1.0, 1.0);

    auto s = patch_score(disc, imgs, {1, 2});
    REQUIRE(s.size() == 2);
    REQUIRE_THROWS_AS(patch_score(disc, imgs, {3}), KeyError);

    // constant heads: zero conv weights, biases a and b -> score (a+b)/2
    Discriminator rig = disc;
    for (int l : {1, 2}) {
        std::string h = "patch_head" + std::to_string(l);
        auto& pw = rig.params().get(h + ".proj.weight").value;
        for (std::size_t i = 0; i < pw.size(); ++i) pw[i] = 0.0;
    }
    rig.params().get("patch_head1.proj.bias").value[0] = 2.0;
    rig.params().get("patch_head2.proj.bias").value[0] = 5.0;
    auto rs = patch_score(rig, imgs, {1, 2});
    REQUIRE(rs[0] == Catch::Approx(3.5).margin(1e-12));
    auto one = patch_score(rig, imgs, {1});
    REQUIRE(one[0] == Catch::Approx(2.0).margin(1e-12));

    // head features shrink spatially as l grows
    Tape tape(false);
    auto feats = disc.backbone(tape, tape.constant(imgs.data), 3);
    for (int l = 1; l <= 3; ++l)
        REQUIRE(tape.val(feats[static_cast<std::size_t>(l)]).dim(2) <
                tape.val(feats[static_cast<std::size_t>(l - 1)]).dim(2));
}

TEST_CASE("preset table pins the published constants") {
    const auto& ffhq = dataset_preset("ffhq");
    REQUIRE(ffhq.resolution == 1024);
    REQUIRE(ffhq.patch_size == 128);
    REQUIRE(ffhq.patch_layers == std::vector<int>{5, 6});
    REQUIRE(ffhq.mix_replace_count == 7);
    REQUIRE(ffhq.layer_count == 18);
    REQUIRE(ffhq.batch_size == 2);
    REQUIRE(ffhq.default_iterations == 2000);

    const auto& church = dataset_preset("church");
    REQUIRE(church.resolution == 256);
    REQUIRE(church.patch_size == 64);
    REQUIRE(church.patch_layers == std::vector<int>{3, 4});
    REQUIRE(church.mix_replace_count == 6);
    REQUIRE(church.layer_count == 14);
    REQUIRE(church.batch_size == 4);
    REQUIRE(church.default_iterations == 1500);

    const auto& cars = dataset_preset("cars");
    REQUIRE(cars.resolution == 512);
    REQUIRE(cars.patch_size == 32);
    REQUIRE(cars.patch_layers == std::vector<int>{4, 5});
    REQUIRE(cars.mix_replace_count == 7);
    REQUIRE(cars.layer_count == 16);
    REQUIRE(cars.batch_size == 2);

    const auto& dog = dataset_preset("afhq_dog");
    REQUIRE(dog.patch_layers == std::vector<int>{4, 5});
    REQUIRE(dog.mix_replace_count == 9);
    REQUIRE(dog.layer_count == 16);

    REQUIRE_THROWS_AS(dataset_preset("imagenet"), KeyError);

    // toy preset layer count matches its generator architecture
    REQUIRE(dataset_preset("toy").layer_count == toy_generator_config().layer_count());
}
