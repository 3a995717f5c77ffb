#include <doctest.h>

#include <torch/torch.h>

#include "malm/common.hpp"
#include "malm/distillation.hpp"
#include "malm/encoders.hpp"

using namespace malm;

namespace {

ImageEncoderConfig tiny_image_cfg() {
    ImageEncoderConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;   // P = 16
    cfg.channels = 1;
    cfg.hidden_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    return cfg;
}

RecipeEncoderConfig tiny_recipe_cfg(DataCaps caps = {4, 4, 4}) {
    RecipeEncoderConfig cfg;
    cfg.vocab_size = 12;
    cfg.hidden_dim = 8;
    cfg.component_depth = 1;
    cfg.component_heads = 2;
    cfg.fusion_depth = 1;
    cfg.fusion_heads = 2;
    cfg.caps = caps;
    return cfg;
}

}  // namespace

TEST_SUITE("encoders") {

TEST_CASE("teacher output has shape B x (1+P) x hidden") {
    reseed(0);
    ImageEncoder enc(tiny_image_cfg());
    torch::Tensor out = enc->encode_full(torch::rand({3, 1, 16, 16}));
    CHECK(out.sizes() == torch::IntArrayRef({3, 17, 8}));
    CHECK(out.isfinite().all().item<bool>());
}

TEST_CASE("student sees 1 + P - |M| tokens") {
    reseed(0);
    ImageEncoder enc(tiny_image_cfg());
    MaskSpec mask = MaskSpec::sample(16, 0.75, 3, 5);
    torch::Tensor out = enc->encode_visible(torch::rand({3, 1, 16, 16}), mask);
    CHECK(out.sizes() == torch::IntArrayRef({3, 5, 8}));  // 1 + 16 - 12
}

TEST_CASE("empty mask makes the student equal a weight-tied teacher") {
    reseed(0);
    ImageEncoder student(tiny_image_cfg());
    ImageEncoder teacher(tiny_image_cfg());
    copy_parameters(*student, *teacher);
    torch::Tensor images = torch::rand({2, 1, 16, 16});
    MaskSpec empty = MaskSpec::sample(16, 0.0, 2, 0);
    CHECK(torch::equal(student->encode_visible(images, empty),
                       teacher->encode_full(images)));
}

TEST_CASE("encoders are deterministic given weights and inputs") {
    reseed(0);
    ImageEncoder enc(tiny_image_cfg());
    torch::Tensor images = torch::rand({2, 1, 16, 16});
    MaskSpec mask = MaskSpec::sample(16, 0.5, 2, 3);
    CHECK(torch::equal(enc->encode_visible(images, mask),
                       enc->encode_visible(images, mask)));
}

TEST_CASE("one EMA step with momentum 1 freezes the teacher") {
    reseed(0);
    ImageEncoder student(tiny_image_cfg());
    ImageEncoder teacher(tiny_image_cfg());
    torch::Tensor images = torch::rand({2, 1, 16, 16});
    torch::Tensor before = teacher->encode_full(images);
    ema_update(*student, *teacher, 1.0);
    CHECK(torch::equal(teacher->encode_full(images), before));
}

TEST_CASE("patchify indexes patches row-major, matching the painter") {
    reseed(0);
    ImageEncoder enc(tiny_image_cfg());
    for (int64_t patch = 0; patch < 16; ++patch) {
        torch::Tensor image = torch::zeros({1, 1, 16, 16});
        int64_t r0 = (patch / 4) * 4, c0 = (patch % 4) * 4;
        image.index_put_({0, 0, torch::indexing::Slice(r0, r0 + 4),
                          torch::indexing::Slice(c0, c0 + 4)}, 1.0);
        torch::Tensor patches = enc->patchify(image);
        for (int64_t p = 0; p < 16; ++p) {
            double total = patches.index({0, p}).sum().item<double>();
            CHECK(total == (p == patch ? 16.0 : 0.0));
        }
    }
}

TEST_CASE("mask sampled for a different patch count is rejected") {
    reseed(0);
    ImageEncoder enc(tiny_image_cfg());
    MaskSpec mask = MaskSpec::sample(9, 0.5, 2, 0);
    CHECK_THROWS_AS(enc->encode_visible(torch::rand({2, 1, 16, 16}), mask), Error);
}

TEST_CASE("fused recipe length is the sum of the caps") {
    reseed(0);
    {
        RecipeEncoder enc(tiny_recipe_cfg({4, 6, 8}));
        torch::Tensor out = enc->forward(torch::zeros({2, 4}, torch::kInt64),
                                         torch::zeros({2, 6}, torch::kInt64),
                                         torch::zeros({2, 8}, torch::kInt64));
        CHECK(out.sizes() == torch::IntArrayRef({2, 18, 8}));
        CHECK(out.isfinite().all().item<bool>());
    }
    {
        // caps (16, 64, 128) -> S = 208
        RecipeEncoderConfig cfg = tiny_recipe_cfg({16, 64, 128});
        RecipeEncoder enc(cfg);
        torch::Tensor out = enc->forward(torch::zeros({2, 16}, torch::kInt64),
                                         torch::zeros({2, 64}, torch::kInt64),
                                         torch::zeros({2, 128}, torch::kInt64));
        CHECK(out.size(1) == 208);
    }
    {
        // single-token components -> S = 3
        RecipeEncoder enc(tiny_recipe_cfg({1, 1, 1}));
        torch::Tensor out = enc->forward(torch::zeros({2, 1}, torch::kInt64),
                                         torch::zeros({2, 1}, torch::kInt64),
                                         torch::zeros({2, 1}, torch::kInt64));
        CHECK(out.size(1) == 3);
    }
}

TEST_CASE("component exceeding its cap is rejected, never truncated here") {
    reseed(0);
    RecipeEncoder enc(tiny_recipe_cfg({4, 4, 4}));
    CHECK_THROWS_AS(enc->forward(torch::zeros({2, 5}, torch::kInt64),
                                 torch::zeros({2, 4}, torch::kInt64),
                                 torch::zeros({2, 4}, torch::kInt64)),
                    Error);
}

TEST_CASE("permuting ingredient lines permutes the output block (diagnostic mode)") {
    reseed(0);
    RecipeEncoderConfig cfg = tiny_recipe_cfg({2, 4, 2});
    cfg.use_positional = {true, false, true};  // ingredients without positions
    RecipeEncoder enc(cfg);

    // two 2-token lines: [a b | c d] vs [c d | a b]
    torch::Tensor title = torch::tensor({{2, 3}}, torch::kInt64);
    torch::Tensor instr = torch::tensor({{4, 5}}, torch::kInt64);
    torch::Tensor ingr_ab = torch::tensor({{6, 7, 8, 9}}, torch::kInt64);
    torch::Tensor ingr_ba = torch::tensor({{8, 9, 6, 7}}, torch::kInt64);

    torch::Tensor out_ab = enc->forward(title, ingr_ab, instr);
    torch::Tensor out_ba = enc->forward(title, ingr_ba, instr);

    // title block identical, instruction block identical
    auto slice = [](const torch::Tensor& t, int64_t a, int64_t b) {
        return t.index({torch::indexing::Slice(), torch::indexing::Slice(a, b)});
    };
    CHECK(torch::allclose(slice(out_ab, 0, 2), slice(out_ba, 0, 2), 1e-9, 1e-9));
    CHECK(torch::allclose(slice(out_ab, 6, 8), slice(out_ba, 6, 8), 1e-9, 1e-9));
    // ingredient block permuted line-wise: rows 2,3 <-> rows 4,5
    CHECK(torch::allclose(slice(out_ab, 2, 4), slice(out_ba, 4, 6), 1e-9, 1e-9));
    CHECK(torch::allclose(slice(out_ab, 4, 6), slice(out_ba, 2, 4), 1e-9, 1e-9));
    // with positions enabled the equivariance must break
    RecipeEncoderConfig cfg_pos = tiny_recipe_cfg({2, 4, 2});
    reseed(0);
    RecipeEncoder enc_pos(cfg_pos);
    torch::Tensor pos_ab = enc_pos->forward(title, ingr_ab, instr);
    torch::Tensor pos_ba = enc_pos->forward(title, ingr_ba, instr);
    CHECK_FALSE(torch::allclose(slice(pos_ab, 2, 4), slice(pos_ba, 4, 6), 1e-6, 1e-6));
}

TEST_CASE("projection: identity and zero initializations") {
    reseed(0);
    Projection proj(4, 4);
    {
        torch::NoGradGuard no_grad;
        proj->linear->weight.copy_(torch::eye(4));
        proj->linear->bias.zero_();
    }
    torch::Tensor x = torch::randn({2, 3, 4});
    CHECK(torch::allclose(proj(x), x, 0, 0));
    {
        torch::NoGradGuard no_grad;
        proj->linear->weight.zero_();
    }
    CHECK(proj(x).abs().max().item<double>() == 0.0);
}

TEST_CASE("projection matches a dense matmul oracle") {
    reseed(0);
    Projection proj(8, 4);
    torch::Tensor x = torch::randn({5, 8});
    torch::Tensor got = proj(x);
    torch::Tensor w = proj->linear->weight;  // 4 x 8
    torch::Tensor b = proj->linear->bias;
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 4; ++j) {
            double expected = b[j].item<double>();
            for (int64_t k = 0; k < 8; ++k)
                expected += w[j][k].item<double>() * x[i][k].item<double>();
            CHECK(got[i][j].item<double>() == doctest::Approx(expected).epsilon(1e-6));
        }
}

TEST_CASE("projection rejects a wrong input dimension") {
    reseed(0);
    Projection proj(8, 4);
    CHECK_THROWS_AS(proj(torch::randn({2, 7})), Error);
}

TEST_CASE("student and teacher parameter trees correspond elementwise") {
    reseed(0);
    ImageEncoder student(tiny_image_cfg());
    ImageEncoder teacher(tiny_image_cfg());
    auto sp = student->named_parameters(true);
    auto tp = teacher->named_parameters(true);
    REQUIRE(sp.size() == tp.size());
    for (const auto& item : sp) {
        torch::Tensor* match = tp.find(item.key());
        REQUIRE(match != nullptr);
        CHECK(match->sizes() == item.value().sizes());
    }
}

TEST_CASE("encoder outputs are finite for extreme finite inputs") {
    reseed(0);
    ImageEncoder enc(tiny_image_cfg());
    CHECK(enc->encode_full(torch::zeros({2, 1, 16, 16})).isfinite().all().item<bool>());
    CHECK(enc->encode_full(torch::ones({2, 1, 16, 16})).isfinite().all().item<bool>());
    RecipeEncoder rec(tiny_recipe_cfg());
    torch::Tensor ids = torch::full({2, 4}, 11, torch::kInt64);
    CHECK(rec->forward(ids, ids, ids).isfinite().all().item<bool>());
}

}  // TEST_SUITE
