#pragma once

#include <vector>

#include "ctefm/autograd.hpp"

namespace ctefm {

struct SSIMConstants {
  double c1 = 0.01;
  double c2 = 0.03;
};

struct LossWeights {
  double lambda_tim = 0.05;
};

// Structural similarity of two flat vectors with population (divide-by-n)
// moments:
//   ((2 mu_a mu_b + c1) (2 cov_ab + c2)) /
//   ((mu_a^2 + mu_b^2 + c1) (var_a + var_b + c2))
double ssim(const Vector& a, const Vector& b, const SSIMConstants& k = {});

// -sum_i ssim(ref[i], conv[i]) over the SV ensemble.
double timbre_loss(const std::vector<Vector>& ref_embs, const std::vector<Vector>& conv_embs,
                   const SSIMConstants& k = {});

double total_loss(double l_cfm, double l_tim, const LossWeights& w = {});

// Speaker embedding cosine similarity.
double secs(const Vector& a, const Vector& b);

namespace nn {
// Differentiable ssim on [1 x d] rows; same formula as the plain version.
Var ssim_graph(Var a, Var b, const SSIMConstants& k = {});
}  // namespace nn

}  // namespace ctefm
