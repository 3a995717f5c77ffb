#include <doctest.h>

#include <torch/torch.h>

#include "malm/checks.hpp"
#include "malm/common.hpp"
#include "malm/matching.hpp"
#include "malm/training.hpp"

#include "test_world.hpp"

using namespace malm;

namespace {

MatchingConfig default_cfg() { return MatchingConfig{}; }

torch::Tensor tau1() { return torch::tensor(1.0); }

void zero_qk(CrossAttentionStack& stack) {
    torch::NoGradGuard no_grad;
    for (const auto& layer : *stack->layers) {
        auto* l = layer->as<CrossAttentionLayer>();
        l->to_q->weight.zero_();
        l->to_k->weight.zero_();
    }
}

}  // namespace

TEST_SUITE("matching") {

TEST_CASE("zero query/key weights give uniform attention") {
    reseed(1);
    for (int64_t depth : {1, 4}) {
        CrossAttentionStack stack(8, depth, 2);
        zero_qk(stack);
        auto [out, attn] = stack(torch::randn({2, 5, 8}), torch::randn({2, 7, 8}));
        CHECK(torch::allclose(attn, torch::full({2, 5, 7}, 1.0 / 7.0), 1e-12, 1e-12));
    }
}

TEST_CASE("single context token: attention all ones, output equals its value") {
    reseed(2);
    CrossAttentionLayer layer(6, 1);
    torch::Tensor x = torch::randn({2, 4, 6});
    torch::Tensor ctx = torch::randn({2, 1, 6});
    auto [out, attn] = layer(x, ctx);
    CHECK(torch::allclose(attn, torch::ones({2, 4, 1}), 0, 0));
    torch::Tensor v = layer->to_v(ctx);
    for (int64_t p = 0; p < 4; ++p)
        CHECK(torch::allclose(out.index({torch::indexing::Slice(), p}),
                              v.index({torch::indexing::Slice(), 0}), 1e-12, 1e-12));
}

TEST_CASE("cross attention matches the dense-math oracle (B=1, hand-set 2-dim)") {
    reseed(3);
    CrossAttentionLayer layer(2, 1);
    oracle::Mat wq = {{0.3, -0.7}, {1.1, 0.4}};
    oracle::Mat wk = {{-0.2, 0.5}, {0.8, -0.6}};
    oracle::Mat wv = {{0.9, 0.1}, {-0.4, 1.2}};
    {
        torch::NoGradGuard no_grad;
        layer->to_q->weight.copy_(oracle::to_tensor(wq));
        layer->to_k->weight.copy_(oracle::to_tensor(wk));
        layer->to_v->weight.copy_(oracle::to_tensor(wv));
    }
    oracle::Mat x = {{0.5, -1.0}};                 // one query row
    oracle::Mat ctx = {{1.0, 0.2}, {-0.3, 0.7}};   // S = 2
    auto [expected_out, expected_attn] = oracle::cross_attention(x, ctx, wq, wk, wv);
    auto [out, attn] = layer(oracle::to_tensor(x).unsqueeze(0),
                             oracle::to_tensor(ctx).unsqueeze(0));
    for (size_t j = 0; j < 2; ++j) {
        CHECK(attn[0][0][static_cast<int64_t>(j)].item<double>() ==
              doctest::Approx(expected_attn[0][j]).epsilon(1e-10));
        CHECK(out[0][0][static_cast<int64_t>(j)].item<double>() ==
              doctest::Approx(expected_out[0][j]).epsilon(1e-10));
    }
}

TEST_CASE("recipe stack mirrors the image stack contracts") {
    reseed(4);
    // single image token -> recipe attention rows are all ones
    CrossAttentionStack stack(6, 1, 1);
    auto [out, attn] = stack(torch::randn({2, 5, 6}), torch::randn({2, 1, 6}));
    CHECK(torch::allclose(attn, torch::ones({2, 5, 1}), 0, 0));
    // zero primed weights -> uniform over 1+P
    CrossAttentionStack stack2(6, 2, 2);
    zero_qk(stack2);
    auto [out2, attn2] = stack2(torch::randn({1, 3, 6}), torch::randn({1, 4, 6}));
    CHECK(torch::allclose(attn2, torch::full({1, 3, 4}, 0.25), 1e-12, 1e-12));
}

TEST_CASE("attention rows sum to one and the in-loop assertion counts it") {
    reseed(5);
    int64_t before = invariant_counters().attention_rows_checked;
    CrossAttentionStack stack(8, 2, 4);
    auto [out, attn] = stack(torch::randn({3, 5, 8}), torch::randn({3, 7, 8}));
    CHECK((attn.sum(-1) - 1.0).abs().max().item<double>() < 1e-5);
    CHECK(invariant_counters().attention_rows_checked == before + 3 * 5);
}

TEST_CASE("global features: CLS row and mean over S") {
    MatchOutputs out;
    out.image_features = torch::randn({2, 5, 4});
    SUBCASE("constant recipe rows collapse to that row") {
        torch::Tensor row = torch::randn({2, 1, 4});
        out.recipe_features = row.expand({2, 3, 4});
        auto [ig, rg] = global_features(out);
        CHECK(torch::allclose(rg, row.squeeze(1), 1e-12, 1e-12));
        CHECK(torch::equal(ig, out.image_features.index({torch::indexing::Slice(), 0})));
    }
    SUBCASE("S = 1 returns the single row") {
        out.recipe_features = torch::randn({2, 1, 4});
        auto [ig, rg] = global_features(out);
        CHECK(torch::allclose(rg, out.recipe_features.squeeze(1), 0, 0));
    }
    SUBCASE("random case matches a mean oracle") {
        out.recipe_features = torch::randn({2, 3, 4});
        auto [ig, rg] = global_features(out);
        torch::Tensor manual = (out.recipe_features.index({torch::indexing::Slice(), 0}) +
                                out.recipe_features.index({torch::indexing::Slice(), 1}) +
                                out.recipe_features.index({torch::indexing::Slice(), 2})) /
                               3.0;
        CHECK(torch::allclose(rg, manual, 1e-6, 1e-12));
    }
}

TEST_CASE("contrastive ratio: equal logits give log Z = 0") {
    // x1.y1 == x1.y2 with k != i denominator -> Z = 1
    torch::Tensor x = torch::tensor({{1.0, 0.0}, {0.0, 1.0}});
    torch::Tensor y = torch::tensor({{std::sqrt(0.5), std::sqrt(0.5)},
                                     {std::sqrt(0.5), std::sqrt(0.5)}});
    torch::Tensor z = contrastive_log_ratio(x, y, tau1(), true, true);
    CHECK(z[0].item<double>() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("contrastive ratio: analytic Z = e") {
    // x1.y1 = 1, x1.y2 = 0 -> Z_1 = e^1 / e^0 = e
    torch::Tensor x = torch::tensor({{1.0, 0.0}, {0.0, 1.0}});
    torch::Tensor y = torch::tensor({{1.0, 0.0}, {0.0, 1.0}});
    torch::Tensor z = contrastive_log_ratio(x, y, tau1(), true, true);
    CHECK(std::exp(z[0].item<double>()) == doctest::Approx(M_E).epsilon(1e-12));
}

TEST_CASE("contrastive ratio matches the brute-force denominator oracle") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        SplitMix64 rng(mix_seed(0xC0u, seed));
        oracle::Mat x(4, oracle::Vec(3)), y(4, oracle::Vec(3));
        for (auto& row : x) for (auto& v : row) v = rng.normal();
        for (auto& row : y) for (auto& v : row) v = rng.normal();
        for (bool literal : {true, false}) {
            oracle::Vec expected = oracle::contrastive_log_ratio(x, y, 0.3, true, literal);
            torch::Tensor got = contrastive_log_ratio(oracle::to_tensor(x),
                                                      oracle::to_tensor(y),
                                                      torch::tensor(0.3), true, literal);
            for (size_t i = 0; i < 4; ++i)
                CHECK(got[static_cast<int64_t>(i)].item<double>() ==
                      doctest::Approx(expected[i]).epsilon(1e-9));
        }
    }
}

TEST_CASE("batch below 2 is rejected") {
    torch::Tensor one = torch::randn({1, 4});
    CHECK_THROWS_AS(contrastive_log_ratio(one, one, tau1(), true, true), Error);
    CHECK_THROWS_AS(bidirectional_contrastive_loss(one, one, tau1(), default_cfg()), Error);
}

TEST_CASE("global loss on orthonormal matched pairs is -1") {
    // I_g = R_g = [[1,0],[0,1]], tau = 1: log Z = 1 both directions -> L = -1
    torch::Tensor g = torch::eye(2);
    MatchingConfig cfg;
    torch::Tensor loss = bidirectional_contrastive_loss(g, g, tau1(), cfg);
    CHECK(loss.item<double>() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("global loss is invariant to batch permutation") {
    reseed(6);
    torch::Tensor x = torch::randn({5, 4}), y = torch::randn({5, 4});
    MatchingConfig cfg;
    double base = bidirectional_contrastive_loss(x, y, tau1(), cfg).item<double>();
    torch::Tensor perm = torch::tensor({3, 1, 4, 0, 2}, torch::kInt64);
    double permuted = bidirectional_contrastive_loss(x.index_select(0, perm),
                                                     y.index_select(0, perm), tau1(), cfg)
                          .item<double>();
    CHECK(base == doctest::Approx(permuted).epsilon(1e-12));
}

TEST_CASE("normalization makes the losses scale invariant") {
    reseed(7);
    torch::Tensor x = torch::randn({4, 6}), y = torch::randn({4, 6});
    MatchingConfig cfg;
    double base = bidirectional_contrastive_loss(x, y, tau1(), cfg).item<double>();
    double doubled = bidirectional_contrastive_loss(x * 2.0, y * 2.0, tau1(), cfg)
                         .item<double>();
    CHECK(base == doctest::Approx(doubled).epsilon(1e-10));
}

TEST_CASE("per-sample positive rescaling leaves both losses unchanged") {
    reseed(8);
    MatchingConfig cfg;
    torch::Tensor scale = torch::tensor({0.2, 3.0, 1.7, 0.9}).view({4, 1});
    {
        torch::Tensor x = torch::randn({4, 6}), y = torch::randn({4, 6});
        double base = bidirectional_contrastive_loss(x, y, tau1(), cfg).item<double>();
        double scaled = bidirectional_contrastive_loss(x * scale, y, tau1(), cfg)
                            .item<double>();
        CHECK(std::abs(base - scaled) < 1e-6);
    }
    {
        torch::Tensor xi = torch::randn({4, 3, 6}), yl = torch::randn({4, 3, 6});
        double base = local_contrastive_loss(xi, yl, tau1(), cfg).item<double>();
        double scaled = local_contrastive_loss(xi, yl * scale.view({4, 1, 1}), tau1(), cfg)
                            .item<double>();
        CHECK(std::abs(base - scaled) < 1e-6);
        // hence the 1/S factor inside the local features cannot matter
        double rescaled_features =
            local_contrastive_loss(xi, yl * 7.0, tau1(), cfg).item<double>();
        CHECK(std::abs(base - rescaled_features) < 1e-6);
    }
}

TEST_CASE("local recipe features: one-hot, uniform and loop oracle") {
    SUBCASE("one-hot attention picks R_att[s*]/S") {
        torch::Tensor attn = torch::zeros({1, 2, 3});
        attn.index_put_({0, 0, 2}, 1.0);
        attn.index_put_({0, 1, 0}, 1.0);
        torch::Tensor rec = torch::randn({1, 3, 4});
        torch::Tensor local = local_recipe_features(attn, rec);
        CHECK(torch::allclose(local.index({0, 0}), rec.index({0, 2}) / 3.0, 1e-12, 1e-12));
        CHECK(torch::allclose(local.index({0, 1}), rec.index({0, 0}) / 3.0, 1e-12, 1e-12));
    }
    SUBCASE("uniform attention gives mean_s / S for every position") {
        torch::Tensor attn = torch::full({2, 3, 5}, 1.0 / 5.0);
        torch::Tensor rec = torch::randn({2, 5, 4});
        torch::Tensor local = local_recipe_features(attn, rec);
        torch::Tensor expected = (rec.mean(1) / 5.0).unsqueeze(1).expand({2, 3, 4});
        CHECK(torch::allclose(local, expected, 1e-10, 1e-12));
    }
    SUBCASE("random case matches the explicit double loop") {
        reseed(9);
        torch::Tensor attn = torch::softmax(torch::randn({2, 4, 6}), -1);
        torch::Tensor rec = torch::randn({2, 6, 3});
        std::vector<oracle::Mat> expected =
            oracle::local_recipe_features(oracle::from_tensor3(attn),
                                          oracle::from_tensor3(rec));
        torch::Tensor got = local_recipe_features(attn, rec);
        auto acc = got.accessor<double, 3>();
        for (size_t b = 0; b < 2; ++b)
            for (size_t p = 0; p < 4; ++p)
                for (size_t d = 0; d < 3; ++d)
                    CHECK(acc[static_cast<int64_t>(b)][static_cast<int64_t>(p)]
                             [static_cast<int64_t>(d)] ==
                          doctest::Approx(expected[b][p][d]).epsilon(1e-10));
    }
}

TEST_CASE("a single position reduces the local loss to the global form") {
    torch::Tensor g = torch::eye(2);
    MatchingConfig cfg;
    torch::Tensor global = bidirectional_contrastive_loss(g, g, tau1(), cfg);
    torch::Tensor local = local_contrastive_loss(g.unsqueeze(1), g.unsqueeze(1), tau1(), cfg);
    CHECK(local.item<double>() == doctest::Approx(global.item<double>()).epsilon(1e-12));
}

TEST_CASE("local loss is invariant to a consistent patch permutation") {
    reseed(10);
    torch::Tensor x = torch::randn({3, 4, 5}), y = torch::randn({3, 4, 5});
    MatchingConfig cfg;
    double base = local_contrastive_loss(x, y, tau1(), cfg).item<double>();
    torch::Tensor perm = torch::tensor({2, 0, 3, 1}, torch::kInt64);
    double permuted = local_contrastive_loss(x.index_select(1, perm),
                                             y.index_select(1, perm), tau1(), cfg)
                          .item<double>();
    CHECK(base == doctest::Approx(permuted).epsilon(1e-12));
}

TEST_CASE("local loss matches the triple-loop oracle (B=3, P=2, D=2)") {
    for (uint64_t seed = 0; seed < 25; ++seed) {
        SplitMix64 rng(mix_seed(0x1Cu, seed));
        std::vector<oracle::Mat> x(3, oracle::Mat(2, oracle::Vec(2)));
        std::vector<oracle::Mat> y(3, oracle::Mat(2, oracle::Vec(2)));
        for (auto& m : x) for (auto& row : m) for (auto& v : row) v = rng.normal();
        for (auto& m : y) for (auto& row : m) for (auto& v : row) v = rng.normal();
        double expected = oracle::local_loss(x, y, 0.5, true, true);
        std::vector<torch::Tensor> xs, ys;
        for (auto& m : x) xs.push_back(oracle::to_tensor(m));
        for (auto& m : y) ys.push_back(oracle::to_tensor(m));
        MatchingConfig cfg;
        double got = local_contrastive_loss(torch::stack(xs), torch::stack(ys),
                                            torch::tensor(0.5), cfg).item<double>();
        CHECK(got == doctest::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("literal sum mode returns raw ratios") {
    torch::Tensor g = torch::eye(2);
    MatchingConfig cfg;
    cfg.literal_sum_loss = true;
    // log Z = 1 both directions -> (e + e)/2 = e
    torch::Tensor loss = bidirectional_contrastive_loss(g, g, tau1(), cfg);
    CHECK(loss.item<double>() == doctest::Approx(M_E).epsilon(1e-12));
}

TEST_CASE("temperature: init, learnability and clamping") {
    reseed(11);
    MatchingConfig cfg;
    cfg.temperature_init = 0.07;
    MatchingHead head(8, cfg);
    CHECK(head->temperature().item<double>() == doctest::Approx(0.07).epsilon(1e-12));
    CHECK(head->log_inv_temperature.requires_grad());
    {
        torch::NoGradGuard no_grad;
        head->log_inv_temperature.fill_(std::log(1.0 / 0.001));  // tau below the floor
    }
    head->clamp_temperature();
    CHECK(head->temperature().item<double>() == doctest::Approx(0.01).epsilon(1e-9));
    {
        torch::NoGradGuard no_grad;
        head->log_inv_temperature.fill_(std::log(1.0 / 50.0));  // tau above the cap
    }
    head->clamp_temperature();
    CHECK(head->temperature().item<double>() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK_THROWS_AS(MatchingHead(8, [] {
        MatchingConfig bad;
        bad.temperature_init = 5.0;
        return bad;
    }()), Error);
}

TEST_CASE("matching head: CLS excluded from the local loss when configured") {
    reseed(12);
    MatchingConfig with_cls;
    MatchingConfig without_cls;
    without_cls.include_cls_in_local = false;
    MatchingHead a(4, with_cls), b(4, without_cls);
    torch::Tensor x = torch::randn({3, 5, 4}), y = torch::randn({3, 5, 4});
    double full = a->local_loss(x, y).item<double>();
    double sliced = b->local_loss(x, y).item<double>();
    MatchingConfig plain;
    double manual = local_contrastive_loss(
        x.index({torch::indexing::Slice(), torch::indexing::Slice(1)}),
        y.index({torch::indexing::Slice(), torch::indexing::Slice(1)}),
        b->temperature(), plain).item<double>();
    CHECK(sliced == doctest::Approx(manual).epsilon(1e-12));
    CHECK(full != doctest::Approx(sliced).epsilon(1e-9));
}

TEST_CASE("loss gradients match central finite differences on leaf inputs") {
    reseed(13);
    MatchingConfig cfg;
    const double h = 1e-5;
    auto fd_check = [&](auto&& loss_fn, std::vector<torch::Tensor> leaves) {
        torch::Tensor loss = loss_fn();
        loss.backward();
        for (auto& leaf : leaves) {
            torch::Tensor grad = leaf.grad().clone();
            torch::Tensor flat = leaf.view(-1);
            for (int64_t j = 0; j < flat.numel(); ++j) {
                double orig;
                {
                    torch::NoGradGuard no_grad;
                    orig = flat[j].item<double>();
                    flat[j] = orig + h;
                }
                torch::Tensor up_t = loss_fn();
                double up = up_t.item<double>();
                {
                    torch::NoGradGuard no_grad;
                    flat[j] = orig - h;
                }
                torch::Tensor down_t = loss_fn();
                double down = down_t.item<double>();
                {
                    torch::NoGradGuard no_grad;
                    flat[j] = orig;
                }
                double fd = (up - down) / (2 * h);
                double ad = grad.view(-1)[j].item<double>();
                CHECK(std::abs(ad - fd) <=
                      1e-4 * std::max({std::abs(ad), std::abs(fd), 1.0}));
            }
        }
    };
    {
        torch::Tensor x = torch::randn({3, 4}).requires_grad_(true);
        torch::Tensor y = torch::randn({3, 4}).requires_grad_(true);
        torch::Tensor tau = torch::tensor(0.4).requires_grad_(true);
        fd_check([&] { return bidirectional_contrastive_loss(x, y, tau, cfg); },
                 {x, y, tau});
    }
    {
        torch::Tensor x = torch::randn({3, 2, 4}).requires_grad_(true);
        torch::Tensor y = torch::randn({3, 2, 4}).requires_grad_(true);
        torch::Tensor tau = torch::tensor(0.4).requires_grad_(true);
        fd_check([&] { return local_contrastive_loss(x, y, tau, cfg); }, {x, y, tau});
    }
    {
        // through the cross-attention weights as well
        reseed(14);
        CrossAttentionStack stack(4, 1, 1);
        torch::Tensor xin = torch::randn({2, 3, 4});
        torch::Tensor ctx = torch::randn({2, 5, 4});
        std::vector<torch::Tensor> weights;
        for (const auto& layer : *stack->layers) {
            auto* l = layer->as<CrossAttentionLayer>();
            weights.insert(weights.end(),
                           {l->to_q->weight, l->to_k->weight, l->to_v->weight});
        }
        fd_check(
            [&] {
                auto [out, attn] = stack(xin, ctx);
                torch::Tensor local = local_recipe_features(attn, ctx);
                return local_contrastive_loss(out, local, torch::tensor(0.5), cfg);
            },
            weights);
    }
}

TEST_CASE("global loss descends monotonically over 50 steps on a fixed 4-pair batch") {
    for (uint64_t seed : {31ull, 7ull, 123ull}) {
        reseed(static_cast<int64_t>(seed));
        torch::Tensor x = torch::randn({4, 8}).requires_grad_(true);
        torch::Tensor y = torch::randn({4, 8}).requires_grad_(true);
        torch::Tensor tau = torch::tensor(0.07);
        MatchingConfig cfg;
        torch::optim::SGD opt({x, y}, torch::optim::SGDOptions(0.1));
        double prev = std::numeric_limits<double>::infinity();
        for (int step = 0; step < 50; ++step) {
            opt.zero_grad();
            torch::Tensor loss = bidirectional_contrastive_loss(x, y, tau, cfg);
            double value = loss.item<double>();
            CHECK(value < prev + 1e-12);
            prev = value;
            loss.backward();
            opt.step();
        }
    }
}

TEST_CASE("derangement: swapped pairings cost more after 200 training steps") {
    using namespace malm::testing;
    int successes = 0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        TinyWorld w = tiny_world(seed * 13, 24, 8);
        TrainSchedule schedule;
        schedule.epochs = 100;
        schedule.max_steps = 200;
        schedule.batch_size = 8;
        schedule.seed = seed;
        schedule.val_fraction = 0.0;
        ObjectiveConfig objective;
        RunConfig cfg = RunConfig::defaults();
        train(w.model, w.data.pairs, schedule, objective, cfg, w.data.tokenizer, "");

        torch::NoGradGuard no_grad;
        StepOutputs paired = w.model->forward_train(w.batch, w.mask, nullptr, 0.3);
        // derange the recipes: shift by one
        PairedBatch deranged = w.batch;
        torch::Tensor roll =
            torch::roll(torch::arange(w.batch.size(), torch::kInt64), 1, 0);
        deranged.title_ids = w.batch.title_ids.index_select(0, roll);
        deranged.ingredient_ids = w.batch.ingredient_ids.index_select(0, roll);
        deranged.instruction_ids = w.batch.instruction_ids.index_select(0, roll);
        StepOutputs swapped = w.model->forward_train(deranged, w.mask, nullptr, 0.3);
        if (swapped.losses.gc.item<double>() > paired.losses.gc.item<double>())
            ++successes;
    }
    CHECK(successes >= 4);
}

}  // TEST_SUITE
