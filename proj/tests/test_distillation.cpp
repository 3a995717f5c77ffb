#include <doctest.h>

#include <cmath>

#include <torch/torch.h>

#include "malm/common.hpp"
#include "malm/distillation.hpp"

#include "test_world.hpp"

using namespace malm;

namespace {

// Zeroes the residual branches so every encoder block becomes the identity,
// and makes the output head an identity map.
void identity_initialize(ReconstructionHead& head) {
    torch::NoGradGuard no_grad;
    for (const auto& block : *head->stack->blocks) {
        auto* b = block->as<EncoderBlock>();
        b->attn->proj->weight.zero_();
        b->attn->proj->bias.zero_();
        b->fc2->weight.zero_();
        b->fc2->bias.zero_();
    }
    head->output->weight.copy_(torch::eye(head->output->weight.size(0)));
    head->output->bias.zero_();
}

double gelu_exact(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

TEST_SUITE("distillation") {

TEST_CASE("identity-initialized reconstruction is the identity") {
    reseed(0);
    ReconstructionHead head(6, 2, 2);
    identity_initialize(head);
    torch::Tensor x = torch::randn({3, 5, 6});
    CHECK(torch::allclose(head(x), x, 0, 0));
}

TEST_CASE("reconstruction preserves the sequence length") {
    reseed(0);
    ReconstructionHead head(8, 2, 2);
    torch::Tensor out = head(torch::randn({2, 17, 8}));
    CHECK(out.sizes() == torch::IntArrayRef({2, 17, 8}));
    CHECK(out.isfinite().all().item<bool>());
}

TEST_CASE("one-layer one-head reconstruction matches a hand-computed oracle") {
    reseed(42);
    const int64_t D = 2, N = 3;
    ReconstructionHead head(D, 1, 1);
    torch::Tensor x = torch::randn({1, N, D});

    // pull out every weight and recompute with plain loops
    auto* block = head->stack->blocks[0]->as<EncoderBlock>();
    auto W = [](const torch::Tensor& t) {
        std::vector<std::vector<double>> m(static_cast<size_t>(t.size(0)),
                                           std::vector<double>(static_cast<size_t>(t.size(1))));
        for (int64_t i = 0; i < t.size(0); ++i)
            for (int64_t j = 0; j < t.size(1); ++j)
                m[static_cast<size_t>(i)][static_cast<size_t>(j)] = t[i][j].item<double>();
        return m;
    };
    auto V = [](const torch::Tensor& t) {
        std::vector<double> v(static_cast<size_t>(t.size(0)));
        for (int64_t i = 0; i < t.size(0); ++i) v[static_cast<size_t>(i)] = t[i].item<double>();
        return v;
    };
    auto linear = [](const std::vector<std::vector<double>>& w,
                     const std::vector<double>& b, const std::vector<double>& in) {
        std::vector<double> out(w.size());
        for (size_t i = 0; i < w.size(); ++i) {
            out[i] = b[i];
            for (size_t j = 0; j < in.size(); ++j) out[i] += w[i][j] * in[j];
        }
        return out;
    };
    auto layernorm = [](const std::vector<double>& in, const std::vector<double>& g,
                        const std::vector<double>& b) {
        double mean = 0;
        for (double v : in) mean += v;
        mean /= static_cast<double>(in.size());
        double var = 0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(in.size());
        std::vector<double> out(in.size());
        for (size_t i = 0; i < in.size(); ++i)
            out[i] = (in[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
        return out;
    };

    auto qkv_w = W(block->attn->qkv->weight);
    auto qkv_b = V(block->attn->qkv->bias);
    auto proj_w = W(block->attn->proj->weight);
    auto proj_b = V(block->attn->proj->bias);
    auto n1_g = V(block->norm1->weight), n1_b = V(block->norm1->bias);
    auto n2_g = V(block->norm2->weight), n2_b = V(block->norm2->bias);
    auto fc1_w = W(block->fc1->weight);
    auto fc1_b = V(block->fc1->bias);
    auto fc2_w = W(block->fc2->weight);
    auto fc2_b = V(block->fc2->bias);
    auto out_w = W(head->output->weight);
    auto out_b = V(head->output->bias);

    // token rows
    std::vector<std::vector<double>> rows(N);
    for (int64_t t = 0; t < N; ++t) rows[static_cast<size_t>(t)] = V(x[0][t]);

    // attention over norm1 rows
    std::vector<std::vector<double>> q(N), k(N), v(N);
    for (size_t t = 0; t < N; ++t) {
        auto qkv = linear(qkv_w, qkv_b, layernorm(rows[t], n1_g, n1_b));
        q[t] = {qkv[0], qkv[1]};
        k[t] = {qkv[2], qkv[3]};
        v[t] = {qkv[4], qkv[5]};
    }
    std::vector<std::vector<double>> after_attn(N);
    for (size_t i = 0; i < static_cast<size_t>(N); ++i) {
        std::vector<double> logits(N);
        double mx = -1e300;
        for (size_t j = 0; j < static_cast<size_t>(N); ++j) {
            logits[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / std::sqrt(2.0);
            mx = std::max(mx, logits[j]);
        }
        double denom = 0;
        for (size_t j = 0; j < static_cast<size_t>(N); ++j) denom += std::exp(logits[j] - mx);
        std::vector<double> ctx(2, 0.0);
        for (size_t j = 0; j < static_cast<size_t>(N); ++j) {
            double a = std::exp(logits[j] - mx) / denom;
            ctx[0] += a * v[j][0];
            ctx[1] += a * v[j][1];
        }
        auto projected = linear(proj_w, proj_b, ctx);
        after_attn[i] = {rows[i][0] + projected[0], rows[i][1] + projected[1]};
    }
    // MLP with exact GELU
    std::vector<std::vector<double>> after_block(N);
    for (size_t t = 0; t < static_cast<size_t>(N); ++t) {
        auto hidden = linear(fc1_w, fc1_b, layernorm(after_attn[t], n2_g, n2_b));
        for (auto& h : hidden) h = gelu_exact(h);
        auto mlp_out = linear(fc2_w, fc2_b, hidden);
        after_block[t] = {after_attn[t][0] + mlp_out[0], after_attn[t][1] + mlp_out[1]};
    }
    torch::Tensor got = head(x);
    for (size_t t = 0; t < static_cast<size_t>(N); ++t) {
        auto expected = linear(out_w, out_b, after_block[t]);
        for (size_t d = 0; d < 2; ++d)
            CHECK(got[0][static_cast<int64_t>(t)][static_cast<int64_t>(d)].item<double>() ==
                  doctest::Approx(expected[d]).epsilon(1e-9));
    }
}

TEST_CASE("smooth_l1 analytic values") {
    torch::Tensor z = torch::zeros({4});
    CHECK(smooth_l1(z, z, 1.0).item<double>() == 0.0);
    CHECK(smooth_l1(torch::tensor({2.0}), torch::tensor({0.0}), 1.0).item<double>() ==
          doctest::Approx(1.5).epsilon(1e-15));
    CHECK(smooth_l1(torch::tensor({0.5}), torch::tensor({0.0}), 1.0).item<double>() ==
          doctest::Approx(0.125).epsilon(1e-15));
    CHECK_THROWS_AS(smooth_l1(z, z, 0.0), Error);
    CHECK_THROWS_AS(smooth_l1(z, z, -1.0), Error);
    CHECK_THROWS_AS(smooth_l1(z, torch::zeros({3}), 1.0), Error);
}

TEST_CASE("smooth_l1 is continuous and C1 at |d| = beta") {
    const double beta = 0.7, eps = 1e-8;
    auto value = [&](double d) {
        return smooth_l1(torch::tensor({d}), torch::tensor({0.0}), beta).item<double>();
    };
    auto derivative = [&](double d) {
        torch::Tensor a = torch::tensor({d}).requires_grad_(true);
        smooth_l1(a, torch::tensor({0.0}), beta).backward();
        return a.grad()[0].item<double>();
    };
    CHECK(std::abs(value(beta + eps) - value(beta - eps)) < 1e-9 + 2 * eps);
    CHECK(std::abs(derivative(beta + eps) - derivative(beta - eps)) < 1e-8);
    CHECK(derivative(beta - eps) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(derivative(beta + eps) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("distillation loss averages smooth-L1 over the masked positions") {
    // positions 1 and 3 masked with per-position values 1.5 and 0.125
    MaskSpec mask = MaskSpec::from_indices(4, torch::tensor({{1, 3}}, torch::kInt64));
    torch::Tensor pred = torch::zeros({1, 5, 1});
    torch::Tensor target = torch::zeros({1, 5, 1});
    pred.index_put_({0, 1, 0}, 2.0);   // d = 2   -> 1.5
    pred.index_put_({0, 3, 0}, 0.5);   // d = 0.5 -> 0.125
    double loss = distillation_loss(pred, target, mask, 1.0).item<double>();
    CHECK(loss == doctest::Approx(0.8125).epsilon(1e-15));

    SUBCASE("perturbing unmasked positions changes nothing") {
        pred.index_put_({0, 0, 0}, 123.0);
        pred.index_put_({0, 2, 0}, -55.0);
        pred.index_put_({0, 4, 0}, 9.0);
        CHECK(distillation_loss(pred, target, mask, 1.0).item<double>() ==
              doctest::Approx(0.8125).epsilon(1e-15));
    }
}

TEST_CASE("matching prediction and target on the mask gives zero loss") {
    reseed(1);
    MaskSpec mask = MaskSpec::sample(8, 0.5, 2, 3);
    torch::Tensor target = torch::randn({2, 9, 4});
    torch::Tensor pred = torch::randn({2, 9, 4});
    // copy targets into the masked rows of pred
    torch::Tensor idx = mask.seq_positions.unsqueeze(-1).expand({2, mask.count(), 4});
    pred.scatter_(1, idx, torch::gather(target, 1, idx));
    CHECK(distillation_loss(pred, target, mask, 1.0).item<double>() == 0.0);
}

TEST_CASE("empty mask yields a zero loss") {
    MaskSpec empty = MaskSpec::sample(4, 0.0, 1, 0);
    torch::Tensor pred = torch::randn({1, 5, 3});
    CHECK(distillation_loss(pred, torch::randn({1, 5, 3}), empty, 1.0).item<double>() == 0.0);
}

TEST_CASE("ema momentum edge cases are exact") {
    std::vector<torch::Tensor> student{torch::tensor({0.0, 2.0})};
    {
        std::vector<torch::Tensor> teacher{torch::tensor({1.0, -3.0})};
        ema_update(student, teacher, 0.0);
        CHECK(torch::equal(teacher[0], student[0]));
    }
    {
        torch::Tensor original = torch::tensor({1.0, -3.0});
        std::vector<torch::Tensor> teacher{original.clone()};
        ema_update(student, teacher, 1.0);
        CHECK(torch::equal(teacher[0], original));
    }
    {
        std::vector<torch::Tensor> s{torch::tensor({0.0})};
        std::vector<torch::Tensor> t{torch::tensor({1.0})};
        ema_update(s, t, 0.999);
        CHECK(t[0][0].item<double>() == doctest::Approx(0.999).epsilon(1e-15));
    }
}

TEST_CASE("ema converges geometrically to a frozen student") {
    reseed(2);
    std::vector<torch::Tensor> student{torch::randn({3, 3})};
    std::vector<torch::Tensor> teacher{torch::randn({3, 3})};
    const double momentum = 0.9;
    double prev = (teacher[0] - student[0]).norm().item<double>();
    for (int step = 0; step < 12; ++step) {
        ema_update(student, teacher, momentum);
        double now = (teacher[0] - student[0]).norm().item<double>();
        CHECK(now == doctest::Approx(prev * momentum).epsilon(1e-10));
        prev = now;
    }
}

TEST_CASE("ema rejects structural mismatches") {
    std::vector<torch::Tensor> a{torch::zeros({2, 2})};
    std::vector<torch::Tensor> b{torch::zeros({2, 3})};
    CHECK_THROWS_AS(ema_update(a, b, 0.5), Error);
    std::vector<torch::Tensor> c{torch::zeros({2, 2}), torch::zeros({1})};
    CHECK_THROWS_AS(ema_update(a, c, 0.5), Error);
    CHECK_THROWS_AS(ema_update(a, a, 1.5), Error);
}

TEST_CASE("teacher copy then momentum-1 EMA leaves outputs identical") {
    using namespace malm::testing;
    TinyWorld w = tiny_world(5);
    torch::Tensor before = w.model->teacher->encode_full(w.batch.images);
    w.model->ema_step(1.0);
    CHECK(torch::equal(w.model->teacher->encode_full(w.batch.images), before));
    w.model->ema_step(0.0);  // teacher snaps to student
    CHECK(torch::equal(w.model->teacher->encode_full(w.batch.images),
                       w.model->student->encode_full(w.batch.images)));
}

TEST_CASE("gradient flows into mask token, student and projection but not teacher") {
    using namespace malm::testing;
    TinyWorld w = tiny_world(6);
    StepOutputs out = w.model->forward_train(w.batch, w.mask, nullptr, 0.3);
    out.losses.dist.backward();
    CHECK(w.model->assembler->mask_token.grad().defined());
    CHECK(w.model->assembler->mask_token.grad().abs().max().item<double>() > 0.0);
    CHECK(w.model->proj_image->linear->weight.grad().defined());
    bool student_has_grad = false;
    for (const auto& p : w.model->student->parameters(true))
        if (p.grad().defined() && p.grad().abs().max().item<double>() > 0.0)
            student_has_grad = true;
    CHECK(student_has_grad);
    for (const auto& p : w.model->teacher->parameters(true))
        CHECK_FALSE(p.grad().defined());
}

}  // TEST_SUITE
