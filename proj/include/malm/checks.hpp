#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

namespace malm {

/// Brute-force scalar-loop reference implementations. These never touch the
/// tensor code paths they validate; every formula is spelled out with plain
/// loops over std::vector<double>.
namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

Vec normalize_row(const Vec& v);
double dot(const Vec& a, const Vec& b);

/// log Z_i per sample; k != i in the denominator when literal_denominator.
Vec contrastive_log_ratio(const Mat& x, const Mat& y, double tau, bool normalize,
                          bool literal_denominator);

/// Bidirectional global loss: mean_i of -(log Z(x->y)_i + log Z(y->x)_i)/2.
double global_loss(const Mat& x, const Mat& y, double tau, bool normalize,
                   bool literal_denominator);

/// R_l[b][p][d] = (1/S) * sum_s A[b][p][s] * R[b][s][d].
std::vector<Mat> local_recipe_features(const std::vector<Mat>& attention,
                                       const std::vector<Mat>& recipe);

/// Local loss over B x L x D stacks, same-position negatives, mean over
/// positions and batch of the direction-averaged negative logs.
double local_loss(const std::vector<Mat>& image, const std::vector<Mat>& recipe,
                  double tau, bool normalize, bool literal_denominator);

double smooth_l1(const Vec& a, const Vec& b, double beta);

/// Bidirectional batch-hard triplet on cosine similarity.
double triplet(const Mat& image, const Mat& recipe, double margin);

struct RankMetrics {
    double med_rank;
    double r1, r5, r10;  // percent
};
/// Full-sort ranking oracle over a similarity matrix (pessimistic ties).
RankMetrics rank_metrics(const Mat& similarity);

/// Single-head cross attention: softmax(Q K^T / sqrt(D)) V with Q = x Wq^T,
/// K = ctx Wk^T, V = ctx Wv^T. Returns {output, attention}.
std::pair<Mat, Mat> cross_attention(const Mat& x, const Mat& ctx, const Mat& wq,
                                    const Mat& wk, const Mat& wv);

Mat from_tensor(const torch::Tensor& t);              // 2-D
std::vector<Mat> from_tensor3(const torch::Tensor& t);  // 3-D
torch::Tensor to_tensor(const Mat& m);

}  // namespace oracle

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Acceptance criterion 1: autograd vs central finite differences for every
/// trainable parameter of a tiny model, on each loss component and the
/// combined objective.
std::vector<CheckResult> run_gradient_checks();

/// Acceptance criterion 2: tensor implementations vs the loop oracles on
/// >= 100 randomized small instances per operation.
std::vector<CheckResult> run_oracle_checks();

/// Acceptance criterion 3: stop-gradient, masked-support and EMA contracts.
std::vector<CheckResult> run_distillation_contract_checks();

/// Acceptance criterion 4: the in-loop attention/report assertions fire on a
/// real train + eval run.
std::vector<CheckResult> run_invariant_probe();

/// Acceptance criterion 9 (desk size): two identical runs produce identical
/// traces and reports.
std::vector<CheckResult> run_determinism_check();

/// Everything above in order; used by `malm check`.
std::vector<CheckResult> run_all_checks();

bool all_passed(const std::vector<CheckResult>& results);
void print_results(const std::vector<CheckResult>& results);

}  // namespace malm
