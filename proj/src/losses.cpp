#include "ctefm/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace ctefm {

double ssim(const Vector& a, const Vector& b, const SSIMConstants& k) {
  if (a.size() != b.size()) {
    throw std::runtime_error("ssim: length mismatch " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()));
  }
  if (a.size() < 2) throw std::runtime_error("ssim: need length >= 2");
  if (!a.allFinite() || !b.allFinite()) throw std::runtime_error("ssim: non-finite input");

  const double n = static_cast<double>(a.size());
  const double mu_a = a.mean();
  const double mu_b = b.mean();
  const double var_a = (a.array() - mu_a).square().sum() / n;
  const double var_b = (b.array() - mu_b).square().sum() / n;
  const double cov = ((a.array() - mu_a) * (b.array() - mu_b)).sum() / n;
  return ((2.0 * mu_a * mu_b + k.c1) * (2.0 * cov + k.c2)) /
         ((mu_a * mu_a + mu_b * mu_b + k.c1) * (var_a + var_b + k.c2));
}

double timbre_loss(const std::vector<Vector>& ref_embs, const std::vector<Vector>& conv_embs,
                   const SSIMConstants& k) {
  if (ref_embs.size() != conv_embs.size()) {
    throw std::runtime_error("timbre_loss: list length mismatch");
  }
  if (ref_embs.empty()) throw std::runtime_error("timbre_loss: empty embedding lists");
  double total = 0.0;
  for (std::size_t i = 0; i < ref_embs.size(); ++i) {
    total -= ssim(ref_embs[i], conv_embs[i], k);
  }
  return total;
}

double total_loss(double l_cfm, double l_tim, const LossWeights& w) {
  if (!std::isfinite(l_cfm) || !std::isfinite(l_tim)) {
    throw std::runtime_error("total_loss: non-finite inputs");
  }
  return l_cfm + w.lambda_tim * l_tim;
}

double secs(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw std::runtime_error("secs: length mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw std::runtime_error("secs: zero-norm input");
  return a.dot(b) / (na * nb);
}

namespace nn {

Var ssim_graph(Var a, Var b, const SSIMConstants& k) {
  if (a.rows() != 1 || b.rows() != 1 || a.cols() != b.cols()) {
    throw std::runtime_error("ssim_graph: inputs must be equal-length rows");
  }
  if (a.cols() < 2) throw std::runtime_error("ssim_graph: need length >= 2");
  Var mu_a = mean_all(a);
  Var mu_b = mean_all(b);
  Var da = sub_rowvec(a, scale_by(a.tape()->constant(Matrix::Ones(1, a.cols())), mu_a));
  Var db = sub_rowvec(b, scale_by(b.tape()->constant(Matrix::Ones(1, b.cols())), mu_b));
  Var var_a = mean_all(mul(da, da));
  Var var_b = mean_all(mul(db, db));
  Var cov = mean_all(mul(da, db));
  Var num = mul(add_scalar(scale(mul(mu_a, mu_b), 2.0), k.c1),
                add_scalar(scale(cov, 2.0), k.c2));
  Var den = mul(add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), k.c1),
                add_scalar(add(var_a, var_b), k.c2));
  return div(num, den);
}

}  // namespace nn
}  // namespace ctefm
