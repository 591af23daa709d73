#include "ctefm/model.hpp"

#include <stdexcept>

namespace ctefm {

void ModelConfig::link(int n_mels) {
  vf.cond_dim = cte.model_dim;
  vf.timbre_dim = cte.timbre_dim();
  vf.n_mels = n_mels;
}

void ModelConfig::validate() const {
  cte.validate();
  vf.validate();
  flow.validate();
  if (vf.cond_dim != cte.model_dim || vf.timbre_dim != cte.timbre_dim()) {
    throw std::runtime_error("model config: vf conditioning dims out of sync with cte");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{
      {"cte",
       {{"content_dim", cte.content_dim},
        {"model_dim", cte.model_dim},
        {"n_heads", cte.n_heads},
        {"ffn_dim", cte.ffn_dim},
        {"n_blocks", cte.n_blocks},
        {"sv_dims", cte.sv_dims},
        {"ln_eps", cte.ln_eps}}},
      {"vf",
       {{"n_mels", vf.n_mels},
        {"cond_dim", vf.cond_dim},
        {"timbre_dim", vf.timbre_dim},
        {"base_channels", vf.base_channels},
        {"mid_channels", vf.mid_channels},
        {"kernel", vf.kernel},
        {"temb_dim", vf.temb_dim},
        {"ln_eps", vf.ln_eps}}},
      {"flow", {{"sigma_min", flow.sigma_min}}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  const auto& c = j.at("cte");
  cfg.cte.content_dim = c.at("content_dim").get<int>();
  cfg.cte.model_dim = c.at("model_dim").get<int>();
  cfg.cte.n_heads = c.at("n_heads").get<int>();
  cfg.cte.ffn_dim = c.at("ffn_dim").get<int>();
  cfg.cte.n_blocks = c.at("n_blocks").get<int>();
  cfg.cte.sv_dims = c.at("sv_dims").get<std::vector<int>>();
  cfg.cte.ln_eps = c.at("ln_eps").get<double>();
  const auto& v = j.at("vf");
  cfg.vf.n_mels = v.at("n_mels").get<int>();
  cfg.vf.cond_dim = v.at("cond_dim").get<int>();
  cfg.vf.timbre_dim = v.at("timbre_dim").get<int>();
  cfg.vf.base_channels = v.at("base_channels").get<int>();
  cfg.vf.mid_channels = v.at("mid_channels").get<int>();
  cfg.vf.kernel = v.at("kernel").get<int>();
  cfg.vf.temb_dim = v.at("temb_dim").get<int>();
  cfg.vf.ln_eps = v.at("ln_eps").get<double>();
  cfg.flow.sigma_min = j.at("flow").at("sigma_min").get<double>();
  cfg.validate();
  return cfg;
}

CtefmModel::CtefmModel(const ModelConfig& config) : cfg(config) {
  cfg.validate();
  cte = CteParams::build(params, cfg.cte);
  vf = VfParams::build(params, cfg.vf);
}

void CtefmModel::init(std::uint64_t seed) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params.at(i);
    // each tensor gets its own stream keyed by name, so init is stable
    // under parameter reordering
    Rng rng(Rng::derive(seed, Rng::hash_str(p.name)));
    const bool is_norm_gain = p.name.ends_with(".ln.g") || p.name.ends_with("ln1.g") ||
                              p.name.ends_with("ln2.g");
    const bool is_bias_like = p.value.rows() == 1;
    if (p.name == "cte.ada.weights") {
      p.value.setOnes();
    } else if (p.name == "vf.out_conv.w" || p.name == "vf.out_conv.b") {
      p.value.setZero();
    } else if (is_norm_gain) {
      p.value.setOnes();
    } else if (is_bias_like) {
      p.value.setZero();
    } else {
      const double std = 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
      for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
        for (Eigen::Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = rng.normal() * std;
      }
    }
    p.grad.setZero(p.value.rows(), p.value.cols());
    p.m.setZero(p.value.rows(), p.value.cols());
    p.v.setZero(p.value.rows(), p.value.cols());
  }
}

}  // namespace ctefm
