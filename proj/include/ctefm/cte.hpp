#pragma once

#include <vector>

#include "ctefm/autograd.hpp"
#include "ctefm/providers.hpp"

namespace ctefm {

struct CteConfig {
  int content_dim = 256;
  int model_dim = 256;
  int n_heads = 4;
  int ffn_dim = 1024;
  int n_blocks = 6;
  std::vector<int> sv_dims = {192, 192, 192};
  double ln_eps = 1e-6;

  int timbre_dim() const;
  void validate() const;
};

// Learnable scalar weights applied to the SV embeddings before
// concatenation. Free (unnormalized) scalars initialized to 1.
struct AdaFusionParams {
  Parameter* weights = nullptr;  // [1 x N]
};

struct AttentionBlockParams {
  Parameter *ln1_g, *ln1_b;
  Parameter *wq, *wk, *wv, *wo;  // bias-free projections
  Parameter *ln2_g, *ln2_b;
  Parameter *ffn_w1, *ffn_b1, *ffn_w2, *ffn_b2;
};

struct CteParams {
  CteConfig cfg;
  AdaFusionParams ada;
  Parameter *in_w, *in_b;                  // content input projection
  std::vector<Parameter*> token_proj;      // per-provider segment -> model_dim
  std::vector<AttentionBlockParams> blocks;
  Parameter* ft_proj;                      // residual timbre projection

  static CteParams build(ParamStore& store, const CteConfig& cfg);
};

// Unified global timbre representation: weighted concatenation of the SV
// embeddings in registration order.
struct GlobalTimbre {
  Vector vector;  // length sum(sv_dims)
};

struct ConditioningFeatures {
  Matrix frames;  // [T1 x model_dim]
};

// ---- plain (inference/test) entry points ----
GlobalTimbre ada_fusion(const std::vector<TimbreEmbedding>& embeddings,
                        const std::vector<double>& weights);

// ---- graph builders (shared by training and inference) ----

// Weighted concatenation: embeddings enter as constants, weights may be the
// learnable AdaFusion parameter row. Returns [1 x sum(dims)].
nn::Var ada_fusion_graph(nn::Tape& tape, const std::vector<nn::Var>& embeddings,
                         nn::Var weights);

// Splits f_T back into per-provider segments and projects each to
// model_dim. Row i depends only on segment i. Returns [N x model_dim].
nn::Var timbre_tokens_graph(nn::Tape& tape, nn::Var f_t, const std::vector<int>& dims,
                            const std::vector<nn::Var>& projections);

// One pre-norm cross-attention block: multi-head attention of the query
// sequence over the N timbre tokens, then a GELU FFN, both residual.
nn::Var cross_attention_block_graph(nn::Tape& tape, nn::Var query_seq, nn::Var kv_seq,
                                    const AttentionBlockParams& p, int n_heads,
                                    double ln_eps);

// Full CTE: input projection, n_blocks cross-attention blocks with the
// timbre tokens as key/value, plus the broadcast residual projection of f_T.
nn::Var cte_forward_graph(nn::Tape& tape, const CteParams& p, nn::Var f_c, nn::Var f_t);

// Convenience wrapper evaluating the graph with constant inputs.
ConditioningFeatures cte_forward(const CteParams& p, const ContentFeatures& f_c,
                                 const GlobalTimbre& f_t);

}  // namespace ctefm
