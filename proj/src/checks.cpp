#include "malm/checks.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "malm/common.hpp"
#include "malm/evaluation.hpp"
#include "malm/matching.hpp"
#include "malm/model.hpp"
#include "malm/training.hpp"

namespace malm {

// ================================================================= oracle ==

namespace oracle {

Vec normalize_row(const Vec& v) {
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-12) norm = 1e-12;
    Vec out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
    return out;
}

double dot(const Vec& a, const Vec& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

Vec contrastive_log_ratio(const Mat& x, const Mat& y, double tau, bool normalize,
                          bool literal_denominator) {
    size_t B = x.size();
    Mat xn = x, yn = y;
    if (normalize) {
        for (auto& row : xn) row = normalize_row(row);
        for (auto& row : yn) row = normalize_row(row);
    }
    Vec out(B);
    for (size_t i = 0; i < B; ++i) {
        double numerator = dot(xn[i], yn[i]) / tau;
        double max_logit = -std::numeric_limits<double>::infinity();
        for (size_t k = 0; k < B; ++k) {
            if (literal_denominator && k == i) continue;
            max_logit = std::max(max_logit, dot(xn[i], yn[k]) / tau);
        }
        double sum = 0;
        for (size_t k = 0; k < B; ++k) {
            if (literal_denominator && k == i) continue;
            sum += std::exp(dot(xn[i], yn[k]) / tau - max_logit);
        }
        out[i] = numerator - (max_logit + std::log(sum));
    }
    return out;
}

double global_loss(const Mat& x, const Mat& y, double tau, bool normalize,
                   bool literal_denominator) {
    Vec fwd = contrastive_log_ratio(x, y, tau, normalize, literal_denominator);
    Vec bwd = contrastive_log_ratio(y, x, tau, normalize, literal_denominator);
    double sum = 0;
    for (size_t i = 0; i < fwd.size(); ++i) sum += -(fwd[i] + bwd[i]) / 2.0;
    return sum / static_cast<double>(fwd.size());
}

std::vector<Mat> local_recipe_features(const std::vector<Mat>& attention,
                                       const std::vector<Mat>& recipe) {
    size_t B = attention.size();
    std::vector<Mat> out(B);
    for (size_t b = 0; b < B; ++b) {
        size_t L = attention[b].size();
        size_t S = recipe[b].size();
        size_t D = recipe[b][0].size();
        out[b].assign(L, Vec(D, 0.0));
        for (size_t p = 0; p < L; ++p)
            for (size_t s = 0; s < S; ++s)
                for (size_t d = 0; d < D; ++d)
                    out[b][p][d] += attention[b][p][s] * recipe[b][s][d] /
                                    static_cast<double>(S);
    }
    return out;
}

double local_loss(const std::vector<Mat>& image, const std::vector<Mat>& recipe,
                  double tau, bool normalize, bool literal_denominator) {
    size_t B = image.size();
    size_t L = image[0].size();
    double batch_sum = 0;
    for (size_t i = 0; i < B; ++i) {
        double pos_sum = 0;
        for (size_t p = 0; p < L; ++p) {
            // collect same-position features of all samples
            Mat xs(B), ys(B);
            for (size_t k = 0; k < B; ++k) {
                xs[k] = image[k][p];
                ys[k] = recipe[k][p];
            }
            Vec fwd = contrastive_log_ratio(xs, ys, tau, normalize, literal_denominator);
            Vec bwd = contrastive_log_ratio(ys, xs, tau, normalize, literal_denominator);
            pos_sum += -(fwd[i] + bwd[i]) / 2.0;
        }
        batch_sum += pos_sum / static_cast<double>(L);
    }
    return batch_sum / static_cast<double>(B);
}

double smooth_l1(const Vec& a, const Vec& b, double beta) {
    double sum = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = std::abs(a[i] - b[i]);
        sum += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
    }
    return sum / static_cast<double>(a.size());
}

double triplet(const Mat& image, const Mat& recipe, double margin) {
    size_t B = image.size();
    Mat x(B), y(B);
    for (size_t i = 0; i < B; ++i) {
        x[i] = normalize_row(image[i]);
        y[i] = normalize_row(recipe[i]);
    }
    double sum = 0;
    for (size_t i = 0; i < B; ++i) {
        double pos = dot(x[i], y[i]);
        double hardest_fwd = -std::numeric_limits<double>::infinity();
        double hardest_bwd = -std::numeric_limits<double>::infinity();
        for (size_t k = 0; k < B; ++k) {
            if (k == i) continue;
            hardest_fwd = std::max(hardest_fwd, dot(x[i], y[k]));
            hardest_bwd = std::max(hardest_bwd, dot(x[k], y[i]));
        }
        double fwd = std::max(0.0, margin - pos + hardest_fwd);
        double bwd = std::max(0.0, margin - pos + hardest_bwd);
        sum += (fwd + bwd) / 2.0;
    }
    return sum / static_cast<double>(B);
}

RankMetrics rank_metrics(const Mat& similarity) {
    size_t N = similarity.size();
    std::vector<double> ranks(N);
    for (size_t i = 0; i < N; ++i) {
        double true_score = similarity[i][i];
        size_t not_better = 0;
        for (size_t j = 0; j < N; ++j)
            if (j != i && similarity[i][j] >= true_score) ++not_better;
        ranks[i] = static_cast<double>(1 + not_better);
    }
    std::vector<double> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    double med = N % 2 == 1 ? sorted[N / 2] : (sorted[N / 2 - 1] + sorted[N / 2]) / 2.0;
    RankMetrics m{med, 0, 0, 0};
    for (double r : ranks) {
        if (r <= 1) m.r1 += 1;
        if (r <= 5) m.r5 += 1;
        if (r <= 10) m.r10 += 1;
    }
    m.r1 *= 100.0 / static_cast<double>(N);
    m.r5 *= 100.0 / static_cast<double>(N);
    m.r10 *= 100.0 / static_cast<double>(N);
    return m;
}

namespace {
Mat matmul_transposed(const Mat& a, const Mat& w) {
    // rows of a times rows of w (torch Linear convention: y = x W^T)
    Mat out(a.size(), Vec(w.size(), 0.0));
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < w.size(); ++j)
            out[i][j] = dot(a[i], w[j]);
    return out;
}
}  // namespace

std::pair<Mat, Mat> cross_attention(const Mat& x, const Mat& ctx, const Mat& wq,
                                    const Mat& wk, const Mat& wv) {
    size_t N = x.size(), M = ctx.size(), D = x[0].size();
    Mat q = matmul_transposed(x, wq);
    Mat k = matmul_transposed(ctx, wk);
    Mat v = matmul_transposed(ctx, wv);
    Mat attn(N, Vec(M, 0.0));
    for (size_t i = 0; i < N; ++i) {
        double max_logit = -std::numeric_limits<double>::infinity();
        Vec logits(M);
        for (size_t j = 0; j < M; ++j) {
            logits[j] = dot(q[i], k[j]) / std::sqrt(static_cast<double>(D));
            max_logit = std::max(max_logit, logits[j]);
        }
        double sum = 0;
        for (size_t j = 0; j < M; ++j) {
            attn[i][j] = std::exp(logits[j] - max_logit);
            sum += attn[i][j];
        }
        for (size_t j = 0; j < M; ++j) attn[i][j] /= sum;
    }
    Mat out(N, Vec(D, 0.0));
    for (size_t i = 0; i < N; ++i)
        for (size_t j = 0; j < M; ++j)
            for (size_t d = 0; d < D; ++d) out[i][d] += attn[i][j] * v[j][d];
    return {out, attn};
}

Mat from_tensor(const torch::Tensor& t) {
    torch::Tensor c = t.detach().to(torch::kFloat64).contiguous();
    check(c.dim() == 2, "from_tensor expects 2-D");
    Mat out(static_cast<size_t>(c.size(0)), Vec(static_cast<size_t>(c.size(1))));
    auto acc = c.accessor<double, 2>();
    for (int64_t i = 0; i < c.size(0); ++i)
        for (int64_t j = 0; j < c.size(1); ++j)
            out[static_cast<size_t>(i)][static_cast<size_t>(j)] = acc[i][j];
    return out;
}

std::vector<Mat> from_tensor3(const torch::Tensor& t) {
    torch::Tensor c = t.detach().to(torch::kFloat64).contiguous();
    check(c.dim() == 3, "from_tensor3 expects 3-D");
    std::vector<Mat> out;
    for (int64_t b = 0; b < c.size(0); ++b) out.push_back(from_tensor(c[b]));
    return out;
}

torch::Tensor to_tensor(const Mat& m) {
    torch::Tensor t = torch::empty({static_cast<int64_t>(m.size()),
                                    static_cast<int64_t>(m[0].size())});
    auto acc = t.accessor<double, 2>();
    for (size_t i = 0; i < m.size(); ++i)
        for (size_t j = 0; j < m[0].size(); ++j)
            acc[static_cast<int64_t>(i)][static_cast<int64_t>(j)] = m[i][j];
    return t;
}

}  // namespace oracle

// ========================================================== shared pieces ==

namespace {

/// Tiny synthetic setup shared by the check suites.
struct TinyWorld {
    ModelConfig model_cfg;
    MalmModel model{nullptr};
    PairedBatch batch;
    MaskSpec mask;
    Tokenizer tokenizer;
    std::vector<SamplePair> pairs;
};

TinyWorld make_tiny_world(uint64_t seed, int64_t batch_size = 3) {
    // D=8, P=4 (8x8 image, patch 4), S=6 (caps 2/2/2), B=3
    SyntheticSpec spec;
    spec.grid_rows = spec.grid_cols = 2;
    spec.patch_size = 4;
    spec.channels = 1;
    spec.n_ingredient_classes = 4;  // fits P=4...
    spec.vocab_size = 16;
    spec.noise_std = 0.0;
    spec.seed = seed;
    // the generator requires >= 5 classes; relax by using a 3x3 grid world
    spec.grid_rows = spec.grid_cols = 2;
    spec.n_ingredient_classes = 4;

    // generate by hand instead: 4 patches, k=2 classes per sample
    TinyWorld w;
    DataCaps caps{2, 2, 2};
    Tokenizer tok;
    for (const char* word : {"dish", "a0", "a1", "a2", "a3"}) tok.fit(word);
    tok.freeze();
    w.tokenizer = tok;

    SplitMix64 rng(mix_seed(seed, 0x71u));
    for (int64_t i = 0; i < batch_size * 2; ++i) {
        int64_t c0 = static_cast<int64_t>(rng.bounded(4));
        int64_t c1 = (c0 + 1 + static_cast<int64_t>(rng.bounded(3))) % 4;
        torch::Tensor image = torch::zeros({1, 8, 8});
        for (int64_t cls : {c0, c1}) {
            int64_t r0 = (cls / 2) * 4, col0 = (cls % 2) * 4;
            image.index_put_({torch::indexing::Slice(),
                              torch::indexing::Slice(r0, r0 + 4),
                              torch::indexing::Slice(col0, col0 + 4)},
                             synthetic_class_pattern(cls, 4, 1));
        }
        RecipeDoc doc;
        doc.id = "tiny-" + std::to_string(i);
        doc.title_text = "dish a" + std::to_string(c0);
        doc.ingredient_lines = {"a" + std::to_string(c0), "a" + std::to_string(c1)};
        doc.instruction_lines = {"a" + std::to_string(c1)};
        doc.title_ids = tok.encode_padded(doc.title_text, caps.title);
        doc.ingredient_ids = tok.encode_padded("a" + std::to_string(c0) + " a" +
                                                   std::to_string(c1),
                                               caps.ingredients);
        doc.instruction_ids = tok.encode_padded("a" + std::to_string(c1), caps.instructions);
        w.pairs.push_back(SamplePair{image, doc});
    }

    ModelConfig mc;
    mc.image.image_size = 8;
    mc.image.patch_size = 4;
    mc.image.channels = 1;
    mc.image.hidden_dim = 8;
    mc.image.depth = 1;
    mc.image.heads = 2;
    mc.recipe.vocab_size = tok.vocab_size();
    mc.recipe.hidden_dim = 8;
    mc.recipe.component_depth = 1;
    mc.recipe.component_heads = 2;
    mc.recipe.fusion_depth = 1;
    mc.recipe.fusion_heads = 2;
    mc.recipe.caps = caps;
    mc.shared_dim = 8;
    mc.matching.depth = 1;
    mc.matching.heads = 2;
    mc.distill.depth = 1;
    mc.distill.heads = 2;
    mc.mask_ratio = 0.5;
    w.model_cfg = mc;

    reseed(static_cast<int64_t>(seed));
    w.model = MalmModel(mc);

    std::vector<int64_t> idx(static_cast<size_t>(batch_size));
    std::iota(idx.begin(), idx.end(), 0);
    w.batch = collate(w.pairs, idx);
    w.mask = MaskSpec::sample(mc.image.num_patches(), mc.mask_ratio, batch_size,
                              mix_seed(seed, 0xFACEu));
    return w;
}

double rel_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

CheckResult make_result(const std::string& name, bool passed, const std::string& detail) {
    return CheckResult{name, passed, detail};
}

}  // namespace

// ======================================================== gradient checks ==

std::vector<CheckResult> run_gradient_checks() {
    auto start = std::chrono::steady_clock::now();
    TinyWorld w = make_tiny_world(20240901);

    ObjectiveConfig objective;
    // The teacher targets are a stop-gradient input: they pass through the
    // trainable image projection but contribute no gradient. A finite
    // difference must therefore hold them fixed at the unperturbed point,
    // otherwise it would differentiate through the detached path.
    torch::Tensor frozen_targets =
        w.model->forward_train(w.batch, w.mask, nullptr, objective.triplet_margin)
            .teacher_targets;
    auto forward_losses = [&]() {
        StepOutputs out = w.model->forward_train(w.batch, w.mask, nullptr,
                                                 objective.triplet_margin);
        out.losses.dist = distillation_loss(out.reconstructed, frozen_targets, w.mask,
                                            w.model->cfg.distill.beta);
        total_loss(out.losses, objective);
        return out.losses;
    };

    const char* names[5] = {"L_GC", "L_LC", "L_dist", "L_itc", "L_total"};
    auto pick = [](const LossBundle& b, int which) -> torch::Tensor {
        switch (which) {
            case 0: return b.gc;
            case 1: return b.lc;
            case 2: return b.dist;
            case 3: return b.itc;
            default: return b.total;
        }
    };

    // autograd gradients for each loss component
    std::vector<std::vector<torch::Tensor>> grads(5);
    std::vector<torch::Tensor> params;
    for (auto& p : w.model->parameters(true))
        if (p.requires_grad()) params.push_back(p);

    for (int which = 0; which < 5; ++which) {
        for (auto& p : params)
            if (p.mutable_grad().defined()) p.mutable_grad().reset();
        LossBundle bundle = forward_losses();
        pick(bundle, which).backward();
        for (auto& p : params) {
            torch::Tensor g = p.grad().defined() ? p.grad().clone()
                                                 : torch::zeros_like(p);
            grads[static_cast<size_t>(which)].push_back(g);
        }
    }

    // central finite differences, all five losses per probe
    const double h = 1e-5;
    double worst[5] = {0, 0, 0, 0, 0};
    int64_t n_params = 0;
    {
        torch::NoGradGuard no_grad_outer;
        for (size_t pi = 0; pi < params.size(); ++pi) {
            torch::Tensor flat = params[pi].view(-1);
            n_params += flat.numel();
            for (int64_t j = 0; j < flat.numel(); ++j) {
                double orig = flat[j].item<double>();
                double plus[5], minus[5];
                flat[j] = orig + h;
                {
                    torch::NoGradGuard no_grad;
                    LossBundle b = forward_losses();
                    for (int which = 0; which < 5; ++which)
                        plus[which] = pick(b, which).item<double>();
                }
                flat[j] = orig - h;
                {
                    torch::NoGradGuard no_grad;
                    LossBundle b = forward_losses();
                    for (int which = 0; which < 5; ++which)
                        minus[which] = pick(b, which).item<double>();
                }
                flat[j] = orig;
                for (int which = 0; which < 5; ++which) {
                    double fd = (plus[which] - minus[which]) / (2.0 * h);
                    double ad = grads[static_cast<size_t>(which)][pi].view(-1)[j]
                                    .item<double>();
                    worst[which] = std::max(worst[which], rel_error(ad, fd));
                }
            }
        }
    }

    auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start);
    std::vector<CheckResult> results;
    for (int which = 0; which < 5; ++which) {
        char detail[160];
        std::snprintf(detail, sizeof(detail),
                      "max rel err %.3e over %lld params (tol 1e-4)", worst[which],
                      static_cast<long long>(n_params));
        results.push_back(make_result(std::string("gradients: ") + names[which],
                                      worst[which] < 1e-4, detail));
    }
    char timing[96];
    std::snprintf(timing, sizeof(timing), "%.1f s (budget 60 s)", elapsed.count());
    results.push_back(make_result("gradients: runtime", elapsed.count() < 60.0, timing));
    return results;
}

// ========================================================== oracle checks ==

std::vector<CheckResult> run_oracle_checks() {
    auto start = std::chrono::steady_clock::now();
    std::vector<CheckResult> results;
    const int instances = 120;
    const double tol = 1e-6;

    auto random_mat = [](SplitMix64& rng, size_t rows, size_t cols) {
        oracle::Mat m(rows, oracle::Vec(cols));
        for (auto& row : m)
            for (auto& v : row) v = rng.normal();
        return m;
    };

    // contrastive_Z
    {
        double worst = 0;
        for (int t = 0; t < instances; ++t) {
            SplitMix64 rng(mix_seed(0x01u, static_cast<uint64_t>(t)));
            size_t B = 2 + rng.bounded(5), D = 2 + rng.bounded(7);
            bool normalize = rng.bounded(2) == 0;
            bool literal = rng.bounded(2) == 0;
            double tau = 0.05 + rng.uniform() * 0.95;
            oracle::Mat x = random_mat(rng, B, D), y = random_mat(rng, B, D);
            oracle::Vec expected =
                oracle::contrastive_log_ratio(x, y, tau, normalize, literal);
            torch::Tensor got = contrastive_log_ratio(
                oracle::to_tensor(x), oracle::to_tensor(y), torch::tensor(tau),
                normalize, literal);
            for (size_t i = 0; i < B; ++i)
                worst = std::max(worst,
                                 std::abs(expected[i] - got[static_cast<int64_t>(i)]
                                                            .item<double>()));
        }
        results.push_back(make_result("oracle: contrastive_Z", worst < tol,
                                      "max abs err " + std::to_string(worst)));
    }

    // local_recipe_features
    {
        double worst = 0;
        for (int t = 0; t < instances; ++t) {
            SplitMix64 rng(mix_seed(0x02u, static_cast<uint64_t>(t)));
            size_t B = 1 + rng.bounded(4), L = 1 + rng.bounded(5),
                   S = 1 + rng.bounded(6), D = 2 + rng.bounded(6);
            std::vector<oracle::Mat> attn, recipe;
            for (size_t b = 0; b < B; ++b) {
                oracle::Mat a = random_mat(rng, L, S);
                for (auto& row : a) {  // make it a softmax-like row
                    double mx = *std::max_element(row.begin(), row.end());
                    double sum = 0;
                    for (auto& v : row) { v = std::exp(v - mx); sum += v; }
                    for (auto& v : row) v /= sum;
                }
                attn.push_back(a);
                recipe.push_back(random_mat(rng, S, D));
            }
            std::vector<oracle::Mat> expected = oracle::local_recipe_features(attn, recipe);
            torch::Tensor attn_t = torch::stack(
                [&] { std::vector<torch::Tensor> v; for (auto& m : attn) v.push_back(oracle::to_tensor(m)); return v; }(), 0);
            torch::Tensor rec_t = torch::stack(
                [&] { std::vector<torch::Tensor> v; for (auto& m : recipe) v.push_back(oracle::to_tensor(m)); return v; }(), 0);
            torch::Tensor got = local_recipe_features(attn_t, rec_t);
            auto acc = got.accessor<double, 3>();
            for (size_t b = 0; b < B; ++b)
                for (size_t p = 0; p < L; ++p)
                    for (size_t d = 0; d < D; ++d)
                        worst = std::max(worst, std::abs(expected[b][p][d] -
                                                         acc[static_cast<int64_t>(b)]
                                                            [static_cast<int64_t>(p)]
                                                            [static_cast<int64_t>(d)]));
        }
        results.push_back(make_result("oracle: local_recipe_features", worst < tol,
                                      "max abs err " + std::to_string(worst)));
    }

    // loss_LC
    {
        double worst = 0;
        for (int t = 0; t < instances; ++t) {
            SplitMix64 rng(mix_seed(0x03u, static_cast<uint64_t>(t)));
            size_t B = 2 + rng.bounded(4), L = 1 + rng.bounded(4), D = 2 + rng.bounded(6);
            bool normalize = rng.bounded(2) == 0;
            bool literal = rng.bounded(2) == 0;
            double tau = 0.05 + rng.uniform() * 0.95;
            std::vector<oracle::Mat> x, y;
            for (size_t b = 0; b < B; ++b) {
                x.push_back(random_mat(rng, L, D));
                y.push_back(random_mat(rng, L, D));
            }
            double expected = oracle::local_loss(x, y, tau, normalize, literal);
            MatchingConfig cfg;
            cfg.normalize = normalize;
            cfg.literal_eq7_denominator = literal;
            torch::Tensor xt = torch::stack(
                [&] { std::vector<torch::Tensor> v; for (auto& m : x) v.push_back(oracle::to_tensor(m)); return v; }(), 0);
            torch::Tensor yt = torch::stack(
                [&] { std::vector<torch::Tensor> v; for (auto& m : y) v.push_back(oracle::to_tensor(m)); return v; }(), 0);
            double got = local_contrastive_loss(xt, yt, torch::tensor(tau), cfg)
                             .item<double>();
            worst = std::max(worst, std::abs(expected - got));
        }
        results.push_back(make_result("oracle: loss_LC", worst < tol,
                                      "max abs err " + std::to_string(worst)));
    }

    // smooth_l1
    {
        double worst = 0;
        for (int t = 0; t < instances; ++t) {
            SplitMix64 rng(mix_seed(0x04u, static_cast<uint64_t>(t)));
            size_t n = 1 + rng.bounded(24);
            double beta = 0.1 + rng.uniform() * 2.0;
            oracle::Vec a(n), b(n);
            for (size_t i = 0; i < n; ++i) {
                a[i] = rng.normal() * 2.0;
                b[i] = rng.normal() * 2.0;
            }
            double expected = oracle::smooth_l1(a, b, beta);
            double got = smooth_l1(torch::tensor(a), torch::tensor(b), beta).item<double>();
            worst = std::max(worst, std::abs(expected - got));
        }
        results.push_back(make_result("oracle: smooth_l1", worst < tol,
                                      "max abs err " + std::to_string(worst)));
    }

    // rank_and_score vs full-sort oracle
    {
        double worst = 0;
        for (int t = 0; t < instances; ++t) {
            SplitMix64 rng(mix_seed(0x05u, static_cast<uint64_t>(t)));
            int64_t N = 2 + static_cast<int64_t>(rng.bounded(63));
            oracle::Mat sim(static_cast<size_t>(N), oracle::Vec(static_cast<size_t>(N)));
            bool quantize = rng.bounded(2) == 0;  // force ties now and then
            for (auto& row : sim)
                for (auto& v : row) {
                    v = rng.normal();
                    if (quantize) v = std::round(v * 4.0) / 4.0;
                }
            oracle::RankMetrics expected = oracle::rank_metrics(sim);

            // drive the public path with embeddings whose similarity matrix
            // is exactly `sim`: bag = whole corpus, identity-like setup via a
            // direct similarity injection is not possible, so compare against
            // the one-bag protocol run on orthonormal query embeddings paired
            // with candidate embeddings equal to sim rows stacked.
            // queries = I (N x N), candidates = sim^T so q_i . c_j = sim[i][j]
            torch::Tensor queries = torch::eye(N);
            torch::Tensor candidates = oracle::to_tensor(sim).transpose(0, 1).contiguous();
            RetrievalReport report = rank_and_score(queries, candidates,
                                                    "image-to-recipe", N, 1,
                                                    mix_seed(0xAAu, t));
            worst = std::max(worst, std::abs(report.med_rank - expected.med_rank));
            worst = std::max(worst, std::abs(report.r1 - expected.r1));
            worst = std::max(worst, std::abs(report.r5 - expected.r5));
            worst = std::max(worst, std::abs(report.r10 - expected.r10));
        }
        results.push_back(make_result("oracle: rank_and_score", worst < tol,
                                      "max abs err " + std::to_string(worst)));
    }

    // triplet loss (training module oracle)
    {
        double worst = 0;
        for (int t = 0; t < instances; ++t) {
            SplitMix64 rng(mix_seed(0x06u, static_cast<uint64_t>(t)));
            size_t B = 2 + rng.bounded(5), D = 2 + rng.bounded(7);
            double margin = rng.uniform();
            oracle::Mat x = random_mat(rng, B, D), y = random_mat(rng, B, D);
            double expected = oracle::triplet(x, y, margin);
            double got = triplet_loss(oracle::to_tensor(x), oracle::to_tensor(y), margin)
                             .item<double>();
            worst = std::max(worst, std::abs(expected - got));
        }
        results.push_back(make_result("oracle: loss_itc", worst < tol,
                                      "max abs err " + std::to_string(worst)));
    }

    auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start);
    char timing[96];
    std::snprintf(timing, sizeof(timing), "%.1f s (budget 120 s)", elapsed.count());
    results.push_back(make_result("oracle: runtime", elapsed.count() < 120.0, timing));
    return results;
}

// ================================================= distillation contracts ==

std::vector<CheckResult> run_distillation_contract_checks() {
    std::vector<CheckResult> results;
    TinyWorld w = make_tiny_world(7120130);
    ObjectiveConfig objective;

    // teacher gradients stay absent after a full backward
    {
        StepOutputs out = w.model->forward_train(w.batch, w.mask, nullptr,
                                                 objective.triplet_margin);
        total_loss(out.losses, objective).backward();
        bool clean = true;
        for (const auto& p : w.model->teacher->parameters(true)) {
            if (p.grad().defined() && p.grad().abs().max().item<double>() != 0.0)
                clean = false;
            if (p.requires_grad()) clean = false;
        }
        results.push_back(make_result("distill: teacher stop-gradient", clean,
                                      clean ? "teacher grads absent"
                                            : "teacher received gradients"));
        for (auto& p : w.model->parameters(true))
            if (p.mutable_grad().defined()) p.mutable_grad().reset();
    }

    // dL_dist / dI'' is exactly zero outside the mask
    {
        const int64_t P = w.model_cfg.image.num_patches();
        torch::Tensor pred = torch::randn({w.batch.size(), 1 + P, w.model_cfg.shared_dim})
                                 .requires_grad_(true);
        torch::Tensor targets = torch::randn_like(pred).detach();
        distillation_loss(pred, targets, w.mask, 1.0).backward();
        torch::Tensor grad = pred.grad();
        auto vis = w.mask.visible_seq_positions();
        double leak = torch::gather(grad, 1,
                                    vis.unsqueeze(-1).expand({grad.size(0), vis.size(1),
                                                              grad.size(2)}))
                          .abs()
                          .max()
                          .item<double>();
        double inside = torch::gather(grad, 1,
                                      w.mask.seq_positions.unsqueeze(-1).expand(
                                          {grad.size(0), w.mask.count(), grad.size(2)}))
                            .abs()
                            .max()
                            .item<double>();
        bool ok = leak == 0.0 && inside > 0.0;
        results.push_back(make_result(
            "distill: masked-only support", ok,
            "max grad off-mask " + std::to_string(leak) + ", on-mask " +
                std::to_string(inside)));
    }

    // EMA exactness on synthetic parameter trees
    {
        SplitMix64 rng(0xE3A1u);
        bool ok = true;
        std::string detail = "exact to 1e-12";
        for (int t = 0; t < 32 && ok; ++t) {
            std::vector<torch::Tensor> student, teacher, expected;
            size_t n_tensors = 1 + rng.bounded(5);
            for (size_t i = 0; i < n_tensors; ++i) {
                int64_t rows = 1 + static_cast<int64_t>(rng.bounded(4));
                int64_t cols = 1 + static_cast<int64_t>(rng.bounded(4));
                student.push_back(torch::randn({rows, cols}));
                teacher.push_back(torch::randn({rows, cols}));
            }
            double momentum = rng.uniform();
            if (t == 0) momentum = 0.0;
            if (t == 1) momentum = 1.0;
            if (t == 2) momentum = 0.999;
            for (size_t i = 0; i < n_tensors; ++i)
                expected.push_back(momentum * teacher[i] + (1.0 - momentum) * student[i]);
            ema_update(student, teacher, momentum);
            for (size_t i = 0; i < n_tensors; ++i) {
                double err = (teacher[i] - expected[i]).abs().max().item<double>();
                double bound = (momentum == 0.0 || momentum == 1.0) ? 0.0 : 1e-12;
                if (err > bound) {
                    ok = false;
                    detail = "err " + std::to_string(err) + " at momentum " +
                             std::to_string(momentum);
                }
            }
        }
        // structural mismatch must be rejected
        std::vector<torch::Tensor> a{torch::zeros({2})}, b{torch::zeros({3})};
        bool threw = false;
        try {
            ema_update(a, b, 0.5);
        } catch (const Error&) {
            threw = true;
        }
        ok = ok && threw;
        results.push_back(make_result("distill: EMA exactness", ok, detail));
    }
    return results;
}

// ========================================================= invariant probe ==

std::vector<CheckResult> run_invariant_probe() {
    std::vector<CheckResult> results;
    InvariantCounters before = invariant_counters();

    TinyWorld w = make_tiny_world(5150601, 4);
    TrainSchedule schedule;
    schedule.epochs = 4;
    schedule.batch_size = 4;
    schedule.seed = 99;
    schedule.val_fraction = 0.0;
    schedule.max_steps = 4;
    ObjectiveConfig objective;
    RunConfig cfg = RunConfig::defaults();
    bool failed = false;
    std::string detail;
    try {
        train(w.model, w.pairs, schedule, objective, cfg, w.tokenizer, "");
        auto [img, rec] = embed_corpus(w.model, w.pairs);
        rank_and_score(img, rec, "image-to-recipe",
                       static_cast<int64_t>(w.pairs.size()), 2, 7);
        rank_and_score(img, rec, "recipe-to-image",
                       static_cast<int64_t>(w.pairs.size()), 2, 7);
    } catch (const std::exception& e) {
        failed = true;
        detail = e.what();
    }
    InvariantCounters after = invariant_counters();
    int64_t attn_checks = after.attention_rows_checked - before.attention_rows_checked;
    int64_t report_checks = after.reports_checked - before.reports_checked;
    bool ok = !failed && attn_checks > 0 && report_checks > 0;
    if (!failed)
        detail = "attention rows asserted: " + std::to_string(attn_checks) +
                 ", reports asserted: " + std::to_string(report_checks);
    results.push_back(make_result("invariants: asserted in-loop", ok, detail));
    return results;
}

// ======================================================= determinism check ==

std::vector<CheckResult> run_determinism_check() {
    std::vector<CheckResult> results;
    auto run_once = [](uint64_t seed) {
        TinyWorld w = make_tiny_world(seed, 4);
        TrainSchedule schedule;
        schedule.epochs = 20;
        schedule.max_steps = 25;
        schedule.batch_size = 4;
        schedule.seed = seed;
        schedule.val_fraction = 0.0;
        ObjectiveConfig objective;
        RunConfig cfg = RunConfig::defaults();
        TrainResult r = train(w.model, w.pairs, schedule, objective, cfg, w.tokenizer, "");
        auto [img, rec] = embed_corpus(w.model, w.pairs);
        RetrievalReport report = rank_and_score(img, rec, "image-to-recipe",
                                                static_cast<int64_t>(w.pairs.size()), 3, 11);
        return std::make_pair(r, report_to_json(report).dump());
    };
    auto [r1, report1] = run_once(4242);
    auto [r2, report2] = run_once(4242);
    bool ok = r1.trace.size() == r2.trace.size() && report1 == report2;
    double max_diff = 0;
    for (size_t i = 0; ok && i < r1.trace.size(); ++i) {
        if (r1.trace[i].total != r2.trace[i].total ||
            r1.trace[i].itc != r2.trace[i].itc || r1.trace[i].gc != r2.trace[i].gc ||
            r1.trace[i].lc != r2.trace[i].lc || r1.trace[i].dist != r2.trace[i].dist)
            ok = false;
        max_diff = std::max(max_diff, std::abs(r1.trace[i].total - r2.trace[i].total));
    }
    results.push_back(make_result(
        "determinism: identical traces and reports", ok,
        ok ? std::to_string(r1.trace.size()) + " steps bitwise identical"
           : "traces diverge (max diff " + std::to_string(max_diff) + ")"));
    return results;
}

// ================================================================ summary ==

std::vector<CheckResult> run_all_checks() {
    std::vector<CheckResult> all;
    for (auto suite : {run_gradient_checks, run_oracle_checks,
                       run_distillation_contract_checks, run_invariant_probe,
                       run_determinism_check}) {
        auto results = suite();
        all.insert(all.end(), results.begin(), results.end());
    }
    return all;
}

bool all_passed(const std::vector<CheckResult>& results) {
    for (const auto& r : results)
        if (!r.passed) return false;
    return true;
}

void print_results(const std::vector<CheckResult>& results) {
    for (const auto& r : results)
        std::printf("[%s] %s: %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                    r.detail.c_str());
}

}  // namespace malm
