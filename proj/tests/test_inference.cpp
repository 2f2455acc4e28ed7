#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "oneclip/inference.hpp"
#include "oneclip/png_io.hpp"
#include "oneclip/trainer.hpp"

using namespace oneclip;

namespace {

Generator toy_source(std::uint64_t seed = 300) { return Generator(toy_generator_config(), seed); }

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("oneclip_" + name);
    std::filesystem::create_directories(dir);
    return dir;
}

bool images_equal(const ImageBatch& a, const ImageBatch& b) {
    if (!a.data.shape_equals(b.data)) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("generate with policy none is synthesize") {
    Generator gen = toy_source();
    RandomSource rng(1, 1);
    auto codes = sample_w(gen, rng, 2);
    ImageBatch direct = synthesize_batch(gen, codes);
    ImageBatch via = generate(gen, codes, MixingPolicy{MixingMode::None, 0});
    REQUIRE(images_equal(direct, via));
}

TEST_CASE("mean_replace mixing matches manual composition and is idempotent") {
    Generator gen = toy_source(301);
    RandomSource rng(2, 1);
    auto code = sample_w(gen, rng, 1)[0];

    MixingPolicy policy{MixingMode::MeanReplace, 3};
    ImageBatch mixed = generate(gen, {code}, policy, nullptr, 5, 512);

    RandomSource mr(5, 904);
    auto mean = mean_latent(gen, 512, mr);
    auto manual = style_mix(code.broadcast(gen.layer_count()), mean, 3);
    REQUIRE(images_equal(mixed, synthesize(gen, manual)));

    // applying the policy to an already mixed code changes nothing
    ImageBatch twice = generate(gen, {manual}, policy, nullptr, 5, 512);
    REQUIRE(images_equal(mixed, twice));

    REQUIRE_THROWS_AS(generate(gen, {code}, MixingPolicy{MixingMode::MeanReplace, 99}), ArgumentError);
}

TEST_CASE("ref_replace mixing uses the reference latent") {
    Generator gen = toy_source(302);
    RandomSource rng(3, 1);
    auto codes = sample_w(gen, rng, 2);
    auto w_ref = sample_w(gen, rng, 1)[0];

    MixingPolicy policy{MixingMode::RefReplace, 4};
    ImageBatch mixed = generate(gen, codes, policy, &w_ref);
    auto manual0 = style_mix(codes[0].broadcast(gen.layer_count()), w_ref, 4);
    ImageBatch expect0 = synthesize(gen, manual0);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) REQUIRE(mixed.data.at(0, c, y, x) == expect0.data.at(0, c, y, x));

    REQUIRE_THROWS_AS(generate(gen, codes, policy, nullptr), ArgumentError);
}

TEST_CASE("adapted generator's own mean latent differs once the mapping trains") {
    Generator g_s = toy_source(303);
    Generator other(toy_generator_config(), 304);
    RandomSource tr(4, 1);
    ImageBatch target = synthesize(other, sample_w(other, tr, 1)[0]);

    AdaptationConfig cfg;
    cfg.preset_name = "toy";
    cfg.total_iterations = 10;
    cfg.seed = 9;
    cfg.search.steps = 8;
    cfg.mean_latent_samples = 256;
    cfg.freeze_mapping = false;  // nontrivial adaptation of the mapping
    cfg.freeze_torgb = false;

    TrainState state = adapt(g_s, target, cfg);

    RandomSource r1(0, 904), r2(0, 904);
    auto mean_s = mean_latent(g_s, 512, r1);
    auto mean_t = mean_latent(state.g_t, 512, r2);
    bool differ = false;
    for (std::size_t i = 0; i < mean_s.data.size(); ++i)
        if (mean_s.data[i] != mean_t.data[i]) differ = true;
    REQUIRE(differ);
}

TEST_CASE("latent file round trip and external generation") {
    Generator gen = toy_source(305);
    RandomSource rng(5, 1);
    auto codes = sample_w(gen, rng, 3);

    auto dir = temp_dir("latents");
    auto path = dir / "w.latent";
    save_latents(path, codes);
    auto loaded = load_latents(path);
    REQUIRE(loaded.size() == 3);
    REQUIRE(loaded[0].kind == LatentCode::Kind::W);

    // float32 on disk: values match to float precision
    for (int i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < codes[0].data.size(); ++j)
            REQUIRE(loaded[static_cast<std::size_t>(i)].data[j] ==
                    static_cast<double>(static_cast<float>(codes[static_cast<std::size_t>(i)].data[j])));

    // generation from the file equals direct generation on the loaded codes
    ImageBatch from_file = generate_from_external(gen, path, MixingPolicy{MixingMode::None, 0});
    ImageBatch direct = generate(gen, loaded, MixingPolicy{MixingMode::None, 0});
    REQUIRE(images_equal(from_file, direct));

    // W+ round trip
    auto wp = codes[0].broadcast(gen.layer_count());
    save_latents(dir / "wp.latent", {wp});
    auto wp_loaded = load_latents(dir / "wp.latent");
    REQUIRE(wp_loaded[0].kind == LatentCode::Kind::WPlus);
    REQUIRE(wp_loaded[0].layers() == gen.layer_count());

    // malformed files
    std::ofstream bad(dir / "bad.latent", std::ios::binary);
    bad << "NOTA";
    bad.close();
    REQUIRE_THROWS_AS(load_latents(dir / "bad.latent"), ParseError);

    std::filesystem::copy_file(path, dir / "trunc.latent", std::filesystem::copy_options::overwrite_existing);
    std::filesystem::resize_file(dir / "trunc.latent", 20);
    REQUIRE_THROWS_AS(load_latents(dir / "trunc.latent"), ParseError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("edit offsets compose additively") {
    Generator gen = toy_source(306);
    RandomSource rng(6, 1);
    auto code = sample_w(gen, rng, 1)[0];

    Tensor zero({gen.latent_dim()});
    auto zero_off = LatentCode::w(zero);
    MixingPolicy none{MixingMode::None, 0};
    REQUIRE(images_equal(edit_and_generate(gen, code, zero_off, none), generate(gen, {code}, none)));

    auto offset = sample_w(gen, rng, 1)[0];
    for (std::size_t i = 0; i < offset.data.size(); ++i) offset.data[i] *= 0.1;
    auto neg = offset;
    for (std::size_t i = 0; i < neg.data.size(); ++i) neg.data[i] = -neg.data[i];

    auto shifted = code;
    for (std::size_t i = 0; i < shifted.data.size(); ++i) shifted.data[i] += offset.data[i];
    REQUIRE(images_equal(edit_and_generate(gen, code, offset, none), generate(gen, {shifted}, none)));

    // offset then inverse offset returns the original image (up to fp rounding)
    auto forth = code;
    for (std::size_t i = 0; i < forth.data.size(); ++i) forth.data[i] += offset.data[i];
    ImageBatch undone = edit_and_generate(gen, forth, neg, none);
    ImageBatch orig = generate(gen, {code}, none);
    for (std::size_t i = 0; i < orig.data.size(); ++i)
        REQUIRE(undone.data[i] == Catch::Approx(orig.data[i]).margin(1e-12));

    // mixing applies after the edit: manual composition row-by-row
    MixingPolicy mix{MixingMode::RefReplace, 3};
    auto w_ref = sample_w(gen, rng, 1)[0];
    ImageBatch edited = edit_and_generate(gen, code, offset, mix, &w_ref);
    auto manual = style_mix(shifted.broadcast(gen.layer_count()), w_ref, 3);
    REQUIRE(images_equal(edited, synthesize(gen, manual)));

    Tensor badoff({gen.latent_dim() + 1});
    REQUIRE_THROWS_AS(edit_and_generate(gen, code, LatentCode::w(badoff), none), ShapeError);
}

TEST_CASE("assemble_grid tiles row-major with black padding") {
    ImageBatch a(1, 4, 4), b(1, 4, 4), c(1, 4, 4);
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] = 0.25;
    for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] = -0.5;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] = 0.75;

    ImageBatch single = assemble_grid({a}, 1, 1);
    REQUIRE(images_equal(single, a));

    ImageBatch grid = assemble_grid({a, b, c}, 2, 2);
    REQUIRE(grid.height() == 8);
    REQUIRE(grid.width() == 8);
    REQUIRE(grid.data.at(0, 0, 0, 0) == 0.25);
    REQUIRE(grid.data.at(0, 0, 0, 4) == -0.5);
    REQUIRE(grid.data.at(0, 0, 4, 0) == 0.75);
    REQUIRE(grid.data.at(0, 0, 4, 4) == -1.0);  // empty cell stays black

    REQUIRE_THROWS_AS(assemble_grid({a, b, c}, 1, 2), ArgumentError);
    ImageBatch small(1, 2, 2);
    REQUIRE_THROWS_AS(assemble_grid({a, small}, 2, 2), ShapeError);
}

TEST_CASE("png round trip with round-half-even quantization") {
    auto dir = temp_dir("png");
    ImageBatch img(1, 8, 8);
    RandomSource rng(7, 1);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = rng.uniform(-1.0, 1.0);

    auto path = dir / "img.png";
    write_png(path, img);
    ImageBatch back = read_png(path);
    REQUIRE(back.data.shape() == img.data.shape());
    // quantization error bounded by one byte step
    for (std::size_t i = 0; i < img.data.size(); ++i)
        REQUIRE(std::fabs(back.data[i] - img.data[i]) <= 1.01 / 255.0 * 2.0);

    // round-half-even at the exact midpoint: 0.5/255*2-1 scales to 0.5 -> 0
    ImageBatch mid(1, 8, 8);
    for (std::size_t i = 0; i < mid.data.size(); ++i) mid.data[i] = 0.5 / 255.0 * 2.0 - 1.0;
    write_png(dir / "mid.png", mid);
    ImageBatch midback = read_png(dir / "mid.png");
    REQUIRE(midback.data[0] == -1.0);

    // byte-identical rewrite
    write_png(dir / "img2.png", img);
    std::ifstream f1(path, std::ios::binary), f2(dir / "img2.png", std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(b1 == b2);
    std::filesystem::remove_all(dir);
}
