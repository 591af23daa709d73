#pragma once

#include <functional>
#include <vector>

#include "ctefm/autograd.hpp"
#include "ctefm/mel.hpp"
#include "ctefm/rng.hpp"

namespace ctefm {

struct FlowSchedule {
  double sigma_min = 0.0001;
  void validate() const;
};

// psi_t(x) = t*z + (1 - (1 - sigma_min)*t)*x, the straight OT path.
Matrix ot_flow(double t, const Matrix& z, const Matrix& x, const FlowSchedule& sched);

// Regression target x1 - (1 - sigma_min)*x0; constant in t along the path.
Matrix target_vector(const Matrix& x0, const Matrix& x1, const FlowSchedule& sched);

struct VfConfig {
  int n_mels = 80;
  int cond_dim = 256;      // width of the conditioning features h
  int timbre_dim = 576;    // length of f_T
  int base_channels = 128;
  int mid_channels = 256;
  int kernel = 5;
  int temb_dim = 128;
  double ln_eps = 1e-6;
  void validate() const;
};

struct ResBlockParams {
  Parameter *ln_g, *ln_b;
  Parameter *conv1_w, *conv1_b;
  Parameter *cond_w, *cond_b;  // projects the fused timestep/timbre embedding
  Parameter *conv2_w, *conv2_b;
};

// 1-D UNet over mel frames: two residual conv blocks down, two up, one
// stride-2 downsample with a skip connection, conditioning h concatenated
// channel-wise at the input, timestep + timbre embeddings added per block.
struct VfParams {
  VfConfig cfg;
  Parameter *temb_w1, *temb_b1, *temb_w2, *temb_b2;
  Parameter *ft_w, *ft_b;
  Parameter *in_w, *in_b;
  ResBlockParams rb_down1, rb_down2, rb_up1, rb_up2;
  Parameter *down_w, *down_b;
  Parameter *up_w, *up_b;
  Parameter *merge_w, *merge_b;
  Parameter *out_w, *out_b;  // zero-initialized

  static VfParams build(ParamStore& store, const VfConfig& cfg);
};

Matrix sinusoidal_embedding(double t, int dim);

// v_t(x_t | h, f_T): graph builder shared by training and sampling.
// x_t is [T x n_mels], h is [T x cond_dim], f_t is [1 x timbre_dim].
nn::Var vector_field_graph(nn::Tape& tape, const VfParams& p, nn::Var x_t, double t,
                           nn::Var h, nn::Var f_t);

// Plain forward without gradient tracking.
Matrix vector_field_forward(const Matrix& x_t, double t, const Matrix& h,
                            const Vector& f_t, const VfParams& p);

// Any conditional field (x_t, t) -> prediction; the trained net is one such
// field, oracles in tests are another.
using CondField = std::function<Matrix(const Matrix&, double)>;

// One CFM regression term with explicit (t, x0); the seeded overloads draw
// t ~ U[0,1] then x0 ~ N(0,I) element-wise in row-major order.
double cfm_loss_field_at(const CondField& field, const Matrix& x1, double t, const Matrix& x0,
                         const FlowSchedule& sched);
double cfm_loss_field(const CondField& field, const Matrix& x1, Rng& rng,
                      const FlowSchedule& sched);
double cfm_loss_at(const VfParams& p, const Matrix& x1, const Matrix& h, const Vector& f_t,
                   double t, const Matrix& x0, const FlowSchedule& sched);
double cfm_loss(const VfParams& p, const Matrix& x1, const Matrix& h, const Vector& f_t,
                Rng& rng, const FlowSchedule& sched);

// Fixed-step explicit Euler over the learned field:
// x_{k+1} = x_k + (1/steps) * field(x_k, k/steps).
using Field = std::function<Matrix(const Matrix&, double)>;
Matrix euler_integrate(const Field& field, Matrix x0, int steps);

// Draws x0 ~ N(0,I) shaped [h.rows() x n_mels] and integrates the vector
// field under the given conditioning.
MelSpectrogram euler_sample(const VfParams& p, const Matrix& h, const Vector& f_t,
                            int steps, Rng& rng, const MelConfig& mel_cfg);

Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols);

}  // namespace ctefm
