#include "ctefm/cfm.hpp"

#include <cmath>
#include <stdexcept>

namespace ctefm {

void FlowSchedule::validate() const {
  if (!(sigma_min >= 0.0 && sigma_min < 1.0)) {
    throw std::runtime_error("flow schedule needs 0 <= sigma_min < 1");
  }
}

Matrix ot_flow(double t, const Matrix& z, const Matrix& x, const FlowSchedule& sched) {
  sched.validate();
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::runtime_error("ot_flow: t must be in [0,1], got " + std::to_string(t));
  }
  if (z.rows() != x.rows() || z.cols() != x.cols()) {
    throw std::runtime_error("ot_flow: shape mismatch");
  }
  return t * z + (1.0 - (1.0 - sched.sigma_min) * t) * x;
}

Matrix target_vector(const Matrix& x0, const Matrix& x1, const FlowSchedule& sched) {
  sched.validate();
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) {
    throw std::runtime_error("target_vector: shape mismatch");
  }
  return x1 - (1.0 - sched.sigma_min) * x0;
}

void VfConfig::validate() const {
  if (n_mels < 1 || cond_dim < 1 || timbre_dim < 1) throw std::runtime_error("bad vf dims");
  if (base_channels < 1 || mid_channels < 1) throw std::runtime_error("bad vf channels");
  if (kernel < 1 || kernel % 2 == 0) throw std::runtime_error("vf kernel must be odd");
  if (temb_dim < 2 || temb_dim % 2 != 0) throw std::runtime_error("vf temb_dim must be even");
}

namespace {

ResBlockParams build_res_block(ParamStore& store, const std::string& prefix, int channels,
                               int kernel, int temb_dim) {
  ResBlockParams p;
  p.ln_g = &store.create(prefix + ".ln.g", 1, channels);
  p.ln_b = &store.create(prefix + ".ln.b", 1, channels);
  p.conv1_w = &store.create(prefix + ".conv1.w", kernel * channels, channels);
  p.conv1_b = &store.create(prefix + ".conv1.b", 1, channels);
  p.cond_w = &store.create(prefix + ".cond.w", temb_dim, channels);
  p.cond_b = &store.create(prefix + ".cond.b", 1, channels);
  p.conv2_w = &store.create(prefix + ".conv2.w", kernel * channels, channels);
  p.conv2_b = &store.create(prefix + ".conv2.b", 1, channels);
  return p;
}

// LN -> conv -> +cond -> GELU -> conv, residual.
nn::Var res_block(nn::Tape& tape, const ResBlockParams& p, nn::Var x, nn::Var cond,
                  int kernel, double ln_eps) {
  using namespace nn;
  const int pad = kernel / 2;
  Var h = layer_norm(x, tape.param(*p.ln_g), tape.param(*p.ln_b), ln_eps);
  h = conv1d(h, tape.param(*p.conv1_w), tape.param(*p.conv1_b), kernel, 1, pad);
  Var c = add_rowvec(matmul(cond, tape.param(*p.cond_w)), tape.param(*p.cond_b));
  h = add_rowvec(h, c);
  h = gelu(h);
  h = conv1d(h, tape.param(*p.conv2_w), tape.param(*p.conv2_b), kernel, 1, pad);
  return add(x, h);
}

}  // namespace

VfParams VfParams::build(ParamStore& store, const VfConfig& cfg) {
  cfg.validate();
  VfParams p;
  p.cfg = cfg;
  p.temb_w1 = &store.create("vf.temb.w1", cfg.temb_dim, cfg.temb_dim);
  p.temb_b1 = &store.create("vf.temb.b1", 1, cfg.temb_dim);
  p.temb_w2 = &store.create("vf.temb.w2", cfg.temb_dim, cfg.temb_dim);
  p.temb_b2 = &store.create("vf.temb.b2", 1, cfg.temb_dim);
  p.ft_w = &store.create("vf.ft.w", cfg.timbre_dim, cfg.temb_dim);
  p.ft_b = &store.create("vf.ft.b", 1, cfg.temb_dim);
  p.in_w = &store.create("vf.in_conv.w", cfg.kernel * (cfg.n_mels + cfg.cond_dim),
                         cfg.base_channels);
  p.in_b = &store.create("vf.in_conv.b", 1, cfg.base_channels);
  p.rb_down1 = build_res_block(store, "vf.down1", cfg.base_channels, cfg.kernel, cfg.temb_dim);
  p.down_w = &store.create("vf.down.w", cfg.kernel * cfg.base_channels, cfg.mid_channels);
  p.down_b = &store.create("vf.down.b", 1, cfg.mid_channels);
  p.rb_down2 = build_res_block(store, "vf.down2", cfg.mid_channels, cfg.kernel, cfg.temb_dim);
  p.rb_up1 = build_res_block(store, "vf.up1", cfg.mid_channels, cfg.kernel, cfg.temb_dim);
  p.up_w = &store.create("vf.up.w", cfg.kernel * cfg.mid_channels, cfg.base_channels);
  p.up_b = &store.create("vf.up.b", 1, cfg.base_channels);
  p.merge_w = &store.create("vf.merge.w", 2 * cfg.base_channels, cfg.base_channels);
  p.merge_b = &store.create("vf.merge.b", 1, cfg.base_channels);
  p.rb_up2 = build_res_block(store, "vf.up2", cfg.base_channels, cfg.kernel, cfg.temb_dim);
  p.out_w = &store.create("vf.out_conv.w", cfg.kernel * cfg.base_channels, cfg.n_mels);
  p.out_b = &store.create("vf.out_conv.b", 1, cfg.n_mels);
  return p;
}

Matrix sinusoidal_embedding(double t, int dim) {
  Matrix e(1, dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
    e(0, i) = std::sin(t * freq * 1000.0);
    e(0, half + i) = std::cos(t * freq * 1000.0);
  }
  return e;
}

nn::Var vector_field_graph(nn::Tape& tape, const VfParams& p, nn::Var x_t, double t,
                           nn::Var h, nn::Var f_t) {
  using namespace nn;
  const auto& cfg = p.cfg;
  if (x_t.cols() != cfg.n_mels) throw std::runtime_error("vector field: bad mel width");
  if (h.cols() != cfg.cond_dim) throw std::runtime_error("vector field: bad cond width");
  if (x_t.rows() != h.rows()) {
    throw std::runtime_error("frame-count mismatch: x_t has " + std::to_string(x_t.rows()) +
                             " frames, h has " + std::to_string(h.rows()));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw std::runtime_error("vector field: t outside [0,1]");

  // fused conditioning embedding: MLP(sinusoidal(t)) + linear(f_T)
  Var temb = tape.constant(sinusoidal_embedding(t, cfg.temb_dim));
  temb = add_rowvec(matmul(temb, tape.param(*p.temb_w1)), tape.param(*p.temb_b1));
  temb = gelu(temb);
  temb = add_rowvec(matmul(temb, tape.param(*p.temb_w2)), tape.param(*p.temb_b2));
  Var ft_emb = add_rowvec(matmul(f_t, tape.param(*p.ft_w)), tape.param(*p.ft_b));
  Var cond = add(temb, ft_emb);  // [1 x temb_dim]

  const int k = cfg.kernel;
  const int pad = k / 2;
  const Eigen::Index frames = x_t.rows();

  Var x = concat_cols(x_t, h);
  Var e0 = conv1d(x, tape.param(*p.in_w), tape.param(*p.in_b), k, 1, pad);
  Var d1 = res_block(tape, p.rb_down1, e0, cond, k, cfg.ln_eps);          // [T x c1]
  Var dn = conv1d(d1, tape.param(*p.down_w), tape.param(*p.down_b), k, 2, pad);
  Var d2 = res_block(tape, p.rb_down2, dn, cond, k, cfg.ln_eps);          // [T2 x c2]
  Var u1 = res_block(tape, p.rb_up1, d2, cond, k, cfg.ln_eps);            // [T2 x c2]
  Var up = slice_rows(upsample_rows2(u1), 0, frames);                     // [T x c2]
  up = conv1d(up, tape.param(*p.up_w), tape.param(*p.up_b), k, 1, pad);   // [T x c1]
  Var merged = concat_cols(up, d1);
  merged = conv1d(merged, tape.param(*p.merge_w), tape.param(*p.merge_b), 1, 1, 0);
  Var u2 = res_block(tape, p.rb_up2, merged, cond, k, cfg.ln_eps);        // [T x c1]
  return conv1d(u2, tape.param(*p.out_w), tape.param(*p.out_b), k, 1, pad);
}

Matrix vector_field_forward(const Matrix& x_t, double t, const Matrix& h,
                            const Vector& f_t, const VfParams& p) {
  nn::Tape tape;
  nn::Var out = vector_field_graph(tape, p, tape.constant(x_t), t, tape.constant(h),
                                   tape.constant(f_t.transpose()));
  return out.val();
}

Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  }
  return m;
}

double cfm_loss_field_at(const CondField& field, const Matrix& x1, double t, const Matrix& x0,
                         const FlowSchedule& sched) {
  const Matrix x_t = ot_flow(t, x1, x0, sched);
  const Matrix target = target_vector(x0, x1, sched);
  const Matrix pred = field(x_t, t);
  if (!pred.allFinite()) throw std::runtime_error("diverged: non-finite vector field output");
  return (pred - target).squaredNorm() / static_cast<double>(pred.size());
}

double cfm_loss_field(const CondField& field, const Matrix& x1, Rng& rng,
                      const FlowSchedule& sched) {
  const double t = rng.uniform();
  const Matrix x0 = gaussian_matrix(rng, x1.rows(), x1.cols());
  return cfm_loss_field_at(field, x1, t, x0, sched);
}

double cfm_loss_at(const VfParams& p, const Matrix& x1, const Matrix& h, const Vector& f_t,
                   double t, const Matrix& x0, const FlowSchedule& sched) {
  return cfm_loss_field_at(
      [&](const Matrix& x, double tt) { return vector_field_forward(x, tt, h, f_t, p); }, x1, t,
      x0, sched);
}

double cfm_loss(const VfParams& p, const Matrix& x1, const Matrix& h, const Vector& f_t,
                Rng& rng, const FlowSchedule& sched) {
  const double t = rng.uniform();
  const Matrix x0 = gaussian_matrix(rng, x1.rows(), x1.cols());
  return cfm_loss_at(p, x1, h, f_t, t, x0, sched);
}

Matrix euler_integrate(const Field& field, Matrix x0, int steps) {
  if (steps < 1) throw std::runtime_error("euler_integrate needs steps >= 1");
  const double dt = 1.0 / steps;
  Matrix x = std::move(x0);
  for (int k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / steps;
    x += dt * field(x, t);
    if (!x.allFinite()) {
      throw std::runtime_error("diverged at step " + std::to_string(k));
    }
  }
  return x;
}

MelSpectrogram euler_sample(const VfParams& p, const Matrix& h, const Vector& f_t,
                            int steps, Rng& rng, const MelConfig& mel_cfg) {
  Matrix x0 = gaussian_matrix(rng, h.rows(), p.cfg.n_mels);
  Matrix out = euler_integrate(
      [&](const Matrix& x, double t) { return vector_field_forward(x, t, h, f_t, p); },
      std::move(x0), steps);
  MelSpectrogram mel;
  mel.frames = std::move(out);
  mel.n_mels = p.cfg.n_mels;
  mel.hop_length = mel_cfg.hop_length;
  mel.win_length = mel_cfg.win_length;
  return mel;
}

}  // namespace ctefm
