#include "ctefm/cte.hpp"

#include <numeric>
#include <stdexcept>

namespace ctefm {

int CteConfig::timbre_dim() const {
  return std::accumulate(sv_dims.begin(), sv_dims.end(), 0);
}

void CteConfig::validate() const {
  if (n_blocks < 1) throw std::runtime_error("cte needs n_blocks >= 1");
  if (model_dim < 1 || model_dim % n_heads != 0) {
    throw std::runtime_error("cte needs model_dim divisible by n_heads");
  }
  if (sv_dims.empty()) throw std::runtime_error("cte needs at least one SV dim");
  if (content_dim < 1 || ffn_dim < 1) throw std::runtime_error("bad cte dims");
}

CteParams CteParams::build(ParamStore& store, const CteConfig& cfg) {
  cfg.validate();
  CteParams p;
  p.cfg = cfg;
  const auto n = static_cast<int>(cfg.sv_dims.size());
  p.ada.weights = &store.create("cte.ada.weights", 1, n);
  p.in_w = &store.create("cte.in_proj.w", cfg.content_dim, cfg.model_dim);
  p.in_b = &store.create("cte.in_proj.b", 1, cfg.model_dim);
  for (int i = 0; i < n; ++i) {
    p.token_proj.push_back(
        &store.create("cte.token" + std::to_string(i) + ".w", cfg.sv_dims[size_t(i)], cfg.model_dim));
  }
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const std::string pre = "cte.block" + std::to_string(b) + ".";
    AttentionBlockParams bp;
    bp.ln1_g = &store.create(pre + "ln1.g", 1, cfg.model_dim);
    bp.ln1_b = &store.create(pre + "ln1.b", 1, cfg.model_dim);
    bp.wq = &store.create(pre + "attn.wq", cfg.model_dim, cfg.model_dim);
    bp.wk = &store.create(pre + "attn.wk", cfg.model_dim, cfg.model_dim);
    bp.wv = &store.create(pre + "attn.wv", cfg.model_dim, cfg.model_dim);
    bp.wo = &store.create(pre + "attn.wo", cfg.model_dim, cfg.model_dim);
    bp.ln2_g = &store.create(pre + "ln2.g", 1, cfg.model_dim);
    bp.ln2_b = &store.create(pre + "ln2.b", 1, cfg.model_dim);
    bp.ffn_w1 = &store.create(pre + "ffn.w1", cfg.model_dim, cfg.ffn_dim);
    bp.ffn_b1 = &store.create(pre + "ffn.b1", 1, cfg.ffn_dim);
    bp.ffn_w2 = &store.create(pre + "ffn.w2", cfg.ffn_dim, cfg.model_dim);
    bp.ffn_b2 = &store.create(pre + "ffn.b2", 1, cfg.model_dim);
    p.blocks.push_back(bp);
  }
  p.ft_proj = &store.create("cte.ft_proj.w", cfg.timbre_dim(), cfg.model_dim);
  return p;
}

GlobalTimbre ada_fusion(const std::vector<TimbreEmbedding>& embeddings,
                        const std::vector<double>& weights) {
  if (embeddings.size() != weights.size()) {
    throw std::runtime_error("ada_fusion: " + std::to_string(embeddings.size()) +
                             " embeddings vs " + std::to_string(weights.size()) + " weights");
  }
  if (embeddings.empty()) throw std::runtime_error("ada_fusion: no embeddings");
  Eigen::Index total = 0;
  for (const auto& e : embeddings) total += e.vector.size();
  GlobalTimbre out;
  out.vector.resize(total);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    out.vector.segment(at, embeddings[i].vector.size()) = weights[i] * embeddings[i].vector;
    at += embeddings[i].vector.size();
  }
  return out;
}

nn::Var ada_fusion_graph(nn::Tape& tape, const std::vector<nn::Var>& embeddings,
                         nn::Var weights) {
  if (static_cast<Eigen::Index>(embeddings.size()) != weights.cols() || embeddings.empty()) {
    throw std::runtime_error("ada_fusion: embedding/weight count mismatch");
  }
  nn::Var out;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].rows() != 1) throw std::runtime_error("ada_fusion: embeddings must be rows");
    nn::Var wi = nn::slice_cols(weights, static_cast<Eigen::Index>(i), 1);
    nn::Var seg = nn::scale_by(embeddings[i], wi);
    out = (i == 0) ? seg : nn::concat_cols(out, seg);
  }
  return out;
}

nn::Var timbre_tokens_graph(nn::Tape& tape, nn::Var f_t, const std::vector<int>& dims,
                            const std::vector<nn::Var>& projections) {
  if (dims.size() != projections.size() || dims.empty()) {
    throw std::runtime_error("timbre_tokens: dims/projections mismatch");
  }
  const Eigen::Index total = std::accumulate(dims.begin(), dims.end(), Eigen::Index{0});
  if (f_t.rows() != 1 || f_t.cols() != total) {
    throw std::runtime_error("timbre_tokens: f_T length " + std::to_string(f_t.cols()) +
                             " != sum of dims " + std::to_string(total));
  }
  nn::Var out;
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    nn::Var seg = nn::slice_cols(f_t, at, dims[i]);
    nn::Var tok = nn::matmul(seg, projections[i]);  // [1 x model_dim]
    out = (i == 0) ? tok : nn::concat_rows(out, tok);
    at += dims[i];
  }
  (void)tape;
  return out;
}

namespace {

nn::Var multi_head_attention(nn::Var q_in, nn::Var kv, const AttentionBlockParams& p,
                             int n_heads) {
  using namespace nn;
  Tape& tape = *q_in.tape();
  Var q = matmul(q_in, tape.param(*p.wq));  // [T x m]
  Var k = matmul(kv, tape.param(*p.wk));    // [N x m]
  Var v = matmul(kv, tape.param(*p.wv));    // [N x m]
  const Eigen::Index dh = q.cols() / n_heads;
  Var merged;
  for (int h = 0; h < n_heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var scores = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));  // [T x N]
    Var attn = softmax_rows(scores);
    Var oh = matmul(attn, vh);  // [T x dh]
    merged = (h == 0) ? oh : concat_cols(merged, oh);
  }
  return matmul(merged, tape.param(*p.wo));
}

}  // namespace

nn::Var cross_attention_block_graph(nn::Tape& tape, nn::Var query_seq, nn::Var kv_seq,
                                    const AttentionBlockParams& p, int n_heads,
                                    double ln_eps) {
  using namespace nn;
  if (query_seq.cols() != kv_seq.cols()) {
    throw std::runtime_error("attention block: query/kv dim mismatch");
  }
  Var qn = layer_norm(query_seq, tape.param(*p.ln1_g), tape.param(*p.ln1_b), ln_eps);
  Var x = add(query_seq, multi_head_attention(qn, kv_seq, p, n_heads));
  Var z = layer_norm(x, tape.param(*p.ln2_g), tape.param(*p.ln2_b), ln_eps);
  z = add_rowvec(matmul(z, tape.param(*p.ffn_w1)), tape.param(*p.ffn_b1));
  z = gelu(z);
  z = add_rowvec(matmul(z, tape.param(*p.ffn_w2)), tape.param(*p.ffn_b2));
  return add(x, z);
}

nn::Var cte_forward_graph(nn::Tape& tape, const CteParams& p, nn::Var f_c, nn::Var f_t) {
  using namespace nn;
  if (f_c.cols() != p.cfg.content_dim) {
    throw std::runtime_error("cte_forward: content dim " + std::to_string(f_c.cols()) +
                             " != configured " + std::to_string(p.cfg.content_dim));
  }
  std::vector<Var> projections;
  projections.reserve(p.token_proj.size());
  for (Parameter* proj : p.token_proj) projections.push_back(tape.param(*proj));
  Var tokens = timbre_tokens_graph(tape, f_t, p.cfg.sv_dims, projections);

  Var q = add_rowvec(matmul(f_c, tape.param(*p.in_w)), tape.param(*p.in_b));
  for (const auto& block : p.blocks) {
    q = cross_attention_block_graph(tape, q, tokens, block, p.cfg.n_heads, p.cfg.ln_eps);
  }
  Var residual = matmul(f_t, tape.param(*p.ft_proj));  // [1 x model_dim]
  return add_rowvec(q, residual);
}

ConditioningFeatures cte_forward(const CteParams& p, const ContentFeatures& f_c,
                                 const GlobalTimbre& f_t) {
  nn::Tape tape;
  nn::Var c = tape.constant(f_c.frames);
  nn::Var t = tape.constant(f_t.vector.transpose());
  nn::Var out = cte_forward_graph(tape, p, c, t);
  return ConditioningFeatures{out.val()};
}

}  // namespace ctefm
