#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "confu/draft_tree.hpp"
#include "confu/future_oracle.hpp"
#include "confu/graph.hpp"
#include "confu/mask.hpp"
#include "confu/nn.hpp"
#include "confu/param_store.hpp"

namespace confu {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct TargetConfig {
  std::size_t n_layers = 3;
  std::size_t d_model = 48;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 258;
  std::size_t max_seq_len = 512;
  // (initial, middle, final) layer taps feeding the draft head. With fewer
  // than three layers the entries repeat so the concat width stays 3*d.
  std::array<std::size_t, 3> tap_layers{0, 0, 0};

  static std::array<std::size_t, 3> default_taps(std::size_t n_layers) {
    return {0, n_layers / 2, n_layers - 1};
  }

  void validate() const {
    if (n_layers < 2) throw ConfigError("target: need at least 2 layers");
    if (d_model % n_heads != 0) throw ConfigError("target: d_model % n_heads != 0");
    if (vocab_size == 0 || max_seq_len == 0) throw ConfigError("target: zero size");
    if (tap_layers[2] != n_layers - 1) throw ConfigError("target: final tap must be last layer");
    if (tap_layers[0] > tap_layers[1] || tap_layers[1] > tap_layers[2])
      throw ConfigError("target: tap layers must be non-decreasing");
    if (n_layers >= 3 &&
        (tap_layers[0] >= tap_layers[1] || tap_layers[1] >= tap_layers[2]))
      throw ConfigError("target: tap layers must be strictly increasing");
  }
};

// ---------------------------------------------------------------------------
// KV cache. Content rows only; the s soft-prompt rows live in the ParamStore
// and are prepended at forward time, so they can never be evicted and always
// reflect current parameters. Transient verification rows are returned to the
// caller and only enter the cache if their token is accepted.
// ---------------------------------------------------------------------------

class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t d_model, std::size_t soft_len)
      : d_(d_model), soft_len_(soft_len), layers_(n_layers) {
    for (auto& l : layers_) {
      l.k = TensorF64::zeros({0, d_model});
      l.v = TensorF64::zeros({0, d_model});
    }
  }

  std::size_t n_layers() const { return layers_.size(); }
  std::size_t soft_len() const { return soft_len_; }
  std::size_t content_len() const { return tokens_.size(); }
  std::size_t total_rows() const { return soft_len_ + content_len(); }
  std::size_t d_model() const { return d_; }

  const TensorF64& keys(std::size_t layer) const { return layers_[layer].k; }
  const TensorF64& values(std::size_t layer) const { return layers_[layer].v; }
  const std::vector<int>& tokens() const { return tokens_; }
  std::size_t position_of(std::size_t row) const { return positions_[row]; }
  std::size_t next_position() const { return tokens_.empty() ? 0 : positions_.back() + 1; }

  // Append one content row per layer, taking row `row` of each [r, d] batch.
  void append_row(const std::vector<std::pair<TensorF64, TensorF64>>& batch_kv, std::size_t row,
                  std::size_t position, int token) {
    if (batch_kv.size() != layers_.size()) throw DimensionError("KVCache: layer count mismatch");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      append_to(layers_[l].k, batch_kv[l].first, row);
      append_to(layers_[l].v, batch_kv[l].second, row);
    }
    positions_.push_back(position);
    tokens_.push_back(token);
  }

 private:
  struct LayerRows {
    TensorF64 k, v;  // [content_len, d]
  };

  void append_to(TensorF64& dst, const TensorF64& batch, std::size_t row) {
    if (batch.cols() != d_) throw DimensionError("KVCache: row width mismatch");
    dst.data.insert(dst.data.end(), batch.data.begin() + row * d_,
                    batch.data.begin() + (row + 1) * d_);
    dst.shape[0] += 1;
  }

  std::size_t d_ = 0;
  std::size_t soft_len_ = 0;
  std::vector<LayerRows> layers_;
  std::vector<std::size_t> positions_;
  std::vector<int> tokens_;
};

// ---------------------------------------------------------------------------
// Target model
// ---------------------------------------------------------------------------

// Produces the [con] embedding for a contemplate row given the concatenated
// tap of the token it follows. Static embeddings ignore the tap.
using ConEmbedFn = std::function<Var(Graph&, const TensorF64& tap_cat)>;

class TargetModel {
 public:
  TargetModel(TargetConfig cfg, ParamStore& store) : cfg_(cfg), store_(&store) {
    cfg_.validate();
  }

  static void init_params(ParamStore& store, const TargetConfig& cfg, std::uint64_t seed,
                          double stddev = 0.08) {
    cfg.validate();
    SplitMix rng(mix64(seed, 0x7a96e7));
    store.add("target.tok_emb", gaussian_tensor({cfg.vocab_size, cfg.d_model}, stddev, rng));
    store.add("target.pos_emb", gaussian_tensor({cfg.max_seq_len, cfg.d_model}, stddev, rng));
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      init_block_params(store, "target.layer" + std::to_string(l), cfg.d_model, rng, stddev);
    store.add("target.final_rms", TensorF64::full({cfg.d_model}, 1.0));
    store.add("target.lm_head", gaussian_tensor({cfg.d_model, cfg.vocab_size}, stddev, rng));
  }

  const TargetConfig& config() const { return cfg_; }
  ParamStore& store() const { return *store_; }

  KVCache make_cache(std::size_t soft_len) const {
    return KVCache(cfg_.n_layers, cfg_.d_model, soft_len);
  }

  // ---- generic row batch ---------------------------------------------------

  struct RowInput {
    int token = -1;            // >= 0: embed via the token table
    Var embed;                 // used when token < 0 (contemplate rows)
    std::size_t position = 0;
  };

  struct ForwardOut {
    Var hidden;  // [r, d] final post-block hidden states
    Var logits;  // [r, vocab] when requested
    Var taps;    // [r, 3d] when requested
    std::vector<std::pair<Var, Var>> kv;  // per layer (k_new, v_new), each [r, d]
  };

  // Mask layout: [soft_len | cache content | batch rows].
  ForwardOut forward_rows(Graph& g, const KVCache& cache, const SoftPromptSet* soft,
                          const std::vector<RowInput>& rows, const AttentionMask& mask,
                          bool want_logits, bool want_taps) const {
    if (rows.empty()) throw DimensionError("forward_rows: no rows");
    // The soft region participates only when a prompt set is supplied; the
    // cache's soft_len is bookkeeping for row accounting, not an obligation.
    std::size_t s = soft ? soft->count : 0;
    std::size_t t = cache.content_len();
    std::size_t r = rows.size();
    if (mask.q_len() != r || mask.k_len() != s + t + r)
      throw DimensionError("forward_rows: mask must be [rows x (soft+content+rows)]");

    Var tok_table = g.param(*store_, "target.tok_emb");
    Var pos_table = g.param(*store_, "target.pos_emb");
    std::vector<Var> row_vars;
    row_vars.reserve(r);
    for (const RowInput& in : rows) {
      if (in.position >= cfg_.max_seq_len)
        throw CapacityError("forward_rows: position beyond max_seq_len");
      Var e;
      if (in.token >= 0) {
        if (static_cast<std::size_t>(in.token) >= cfg_.vocab_size)
          throw DimensionError("forward_rows: token id out of vocab");
        e = g.gather_rows(tok_table, {static_cast<std::size_t>(in.token)});
      } else {
        if (!in.embed.valid()) throw ContractError("forward_rows: row without token or embedding");
        if (g.val(in.embed).numel() != cfg_.d_model)
          throw DimensionError("forward_rows: embedding width != d_model");
        e = in.embed;
      }
      row_vars.push_back(g.add(e, g.gather_rows(pos_table, {in.position})));
    }
    Var x = row_vars.size() == 1 ? row_vars[0] : g.concat_rows(row_vars);

    ForwardOut out;
    out.kv.reserve(cfg_.n_layers);
    std::array<Var, 3> tap_vars;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      Var past_k, past_v;
      std::vector<Var> pk, pv;
      if (s > 0) {
        pk.push_back(g.param(*store_, soft->key_name(l)));
        pv.push_back(g.param(*store_, soft->value_name(l)));
      }
      if (t > 0) {
        pk.push_back(g.constant(cache.keys(l)));
        pv.push_back(g.constant(cache.values(l)));
      }
      if (!pk.empty()) {
        past_k = pk.size() == 1 ? pk[0] : g.concat_rows(pk);
        past_v = pv.size() == 1 ? pv[0] : g.concat_rows(pv);
      }
      BlockIO io = transformer_block(g, *store_, "target.layer" + std::to_string(l), x, past_k,
                                     past_v, mask, cfg_.n_heads);
      out.kv.emplace_back(io.k_new, io.v_new);
      x = io.y;
      for (std::size_t ti = 0; ti < 3; ++ti)
        if (cfg_.tap_layers[ti] == l) tap_vars[ti] = x;
    }
    out.hidden = x;
    if (want_taps)
      out.taps = g.concat_cols(g.concat_cols(tap_vars[0], tap_vars[1]), tap_vars[2]);
    if (want_logits) {
      Var xn = g.rms_norm_rows(x, g.param(*store_, "target.final_rms"));
      out.logits = g.matmul(xn, g.param(*store_, "target.lm_head"));
    }
    return out;
  }

  // ---- prefill ---------------------------------------------------------------

  struct PrefillOut {
    TensorF64 last_logits;           // [1, vocab] at the last ordinary token
    std::vector<TensorF64> taps;     // per ordinary position, [1, 3d]
    TensorF64 future;                // contemplate row's final hidden; empty without one
    KVCache cache;                   // ordinary rows only
    std::size_t rows_processed = 0;  // soft + tokens + contemplate
  };

  // Ordinary rows attend causally to content only (never to soft prompts or
  // the contemplate row); the optional contemplate row attends to soft rows,
  // every prompt token, and itself.
  PrefillOut prefill(const std::vector<int>& tokens, const SoftPromptSet* soft,
                     const ConEmbedFn& con_embed) const {
    if (tokens.empty()) throw ConfigError("prefill: empty prompt");
    if (tokens.size() > cfg_.max_seq_len - 1) throw CapacityError("prefill: prompt too long");
    std::size_t s = soft ? soft->count : 0;
    std::size_t t = tokens.size();

    PrefillOut out;
    out.cache = make_cache(s);
    {
      Graph g;
      std::vector<RowInput> rows(t);
      for (std::size_t i = 0; i < t; ++i) rows[i] = RowInput{tokens[i], Var{}, i};
      // [soft | content(0) | rows]: soft columns stay false for ordinary rows.
      AttentionMask mask(t, s + t, false);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j <= i; ++j) mask.set(i, s + j, true);
      ForwardOut fo = forward_rows(g, out.cache, soft, rows, mask, true, true);
      const TensorF64& logits = g.val(fo.logits);
      out.last_logits = TensorF64({1, cfg_.vocab_size},
                                  std::vector<double>(logits.data.end() - cfg_.vocab_size,
                                                      logits.data.end()));
      const TensorF64& taps = g.val(fo.taps);
      for (std::size_t i = 0; i < t; ++i)
        out.taps.push_back(TensorF64({1, 3 * cfg_.d_model},
                                     {taps.data.begin() + i * 3 * cfg_.d_model,
                                      taps.data.begin() + (i + 1) * 3 * cfg_.d_model}));
      std::vector<std::pair<TensorF64, TensorF64>> kv;
      for (auto& [k, v] : fo.kv) kv.emplace_back(g.val(k), g.val(v));
      for (std::size_t i = 0; i < t; ++i) out.cache.append_row(kv, i, i, tokens[i]);
    }
    out.rows_processed = s + t;

    if (con_embed) {
      Graph g;
      Var con = con_embed(g, out.taps.back());
      std::vector<RowInput> rows{RowInput{-1, con, t}};  // slot of the token it predicts
      AttentionMask mask(1, s + t + 1, true);            // soft + all content + self
      ForwardOut fo = forward_rows(g, out.cache, soft, rows, mask, false, false);
      out.future = g.val(fo.hidden);
      out.rows_processed += 1;
    }
    return out;
  }

  // ---- single-step decode ------------------------------------------------------

  struct DecodeOut {
    TensorF64 logits;  // [1, vocab]
    TensorF64 tap;     // [1, 3d]
  };

  DecodeOut decode_step(KVCache& cache, int token, const SoftPromptSet* soft) const {
    std::size_t pos = cache.next_position();
    if (pos >= cfg_.max_seq_len) throw CapacityError("decode_step: sequence full");
    Graph g;
    std::size_t s = soft ? soft->count : 0;
    std::size_t t = cache.content_len();
    AttentionMask mask(1, s + t + 1, false);
    for (std::size_t j = 0; j < t + 1; ++j) mask.set(0, s + j, true);  // content + self
    ForwardOut fo =
        forward_rows(g, cache, soft, {RowInput{token, Var{}, pos}}, mask, true, true);
    std::vector<std::pair<TensorF64, TensorF64>> kv;
    for (auto& [k, v] : fo.kv) kv.emplace_back(g.val(k), g.val(v));
    cache.append_row(kv, 0, pos, token);
    return DecodeOut{g.val(fo.logits), g.val(fo.taps)};
  }

  // ---- tree verification ---------------------------------------------------------

  struct VerifyNodeOut {
    TensorF64 logits;  // target distribution logits after this draft token
    TensorF64 tap;     // [1, 3d]
    TensorF64 future;  // contemplate hidden for this node; empty in baseline
  };

  struct VerifyOut {
    std::optional<VerifyNodeOut> commit;      // the pending committed token's row
    std::vector<VerifyNodeOut> nodes;         // aligned with tree.nodes
    std::vector<std::pair<TensorF64, TensorF64>> batch_kv;  // per layer, [rows, d]
    std::size_t commit_row = 0;               // row index of the commit row (if any)
    std::size_t first_node_row = 0;           // row index of tree node 0
    std::size_t rows_draft = 0;
    std::size_t rows_contemplate = 0;
  };

  // Mask layout for the verification batch (key side):
  //   [soft | cache content | commit? | T draft rows | T contemplate rows]
  // Draft rows: tree-causal over ancestors plus committed content; contemplate
  // rows add soft-prompt visibility on top of their draft row's view; nothing
  // attends to a contemplate row.
  AttentionMask build_verify_mask(const KVCache& cache, const DraftTree& tree, bool with_commit,
                                  bool with_contemplate) const {
    std::size_t s = cache.soft_len();
    std::size_t t = cache.content_len();
    std::size_t T = tree.nodes.size();
    std::size_t commit = with_commit ? 1 : 0;
    std::size_t r = commit + T + (with_contemplate ? T : 0);
    std::size_t content_cols = s + t + commit;  // soft + content + commit column block
    AttentionMask mask(r, s + t + r, false);

    auto draft_row = [&](std::size_t node) { return commit + node; };
    auto con_row = [&](std::size_t node) { return commit + T + node; };

    if (with_commit) {
      for (std::size_t j = 0; j < t; ++j) mask.set(0, s + j, true);
      mask.set(0, s + t, true);  // self
    }
    for (std::size_t n = 0; n < T; ++n) {
      std::size_t q = draft_row(n);
      for (std::size_t j = 0; j < content_cols - s; ++j) mask.set(q, s + j, true);
      for (int a = static_cast<int>(n); a >= 0; a = tree.nodes[a].parent)
        mask.set(q, s + t + commit + a, true);  // ancestors + self
    }
    if (with_contemplate) {
      for (std::size_t n = 0; n < T; ++n) {
        std::size_t q = con_row(n);
        for (std::size_t j = 0; j < s; ++j) mask.set(q, j, true);  // soft prompts
        for (std::size_t j = 0; j < content_cols - s; ++j) mask.set(q, s + j, true);
        for (int a = static_cast<int>(n); a >= 0; a = tree.nodes[a].parent)
          mask.set(q, s + t + commit + a, true);      // its draft row's view
        mask.set(q, s + t + commit + T + n, true);    // self
      }
    }
    return mask;
  }

  // Verifies T draft rows (+ T contemplate rows when con embeddings are given)
  // in one pass. `pending_token`, when set, rides along as the first row and
  // is the committed-but-unverified token the tree is rooted at.
  VerifyOut verify_tree(const KVCache& cache, const DraftTree& tree, const AttentionMask& mask,
                        const SoftPromptSet* soft,
                        const std::vector<TensorF64>* con_embeds,
                        std::optional<int> pending_token = std::nullopt) const {
    std::size_t T = tree.nodes.size();
    if (T == 0) throw ContractError("verify_tree: empty tree");
    bool with_con = con_embeds != nullptr;
    if (with_con && con_embeds->size() != T)
      throw DimensionError("verify_tree: per-node contemplate embeddings must match tree size");
    std::size_t commit = pending_token ? 1 : 0;
    std::size_t r = commit + T + (with_con ? T : 0);
    std::size_t s = soft ? soft->count : 0;
    if (mask.q_len() != r || mask.k_len() != s + cache.content_len() + r)
      throw DimensionError("verify_tree: mask shape does not match tree and cache");

    if (!pending_token && cache.content_len() == 0)
      throw ContractError("verify_tree: tree must be rooted at a cached or pending token");
    std::size_t root_pos = pending_token ? cache.next_position() : cache.next_position() - 1;
    Graph g;
    std::vector<RowInput> rows;
    rows.reserve(r);
    if (pending_token) rows.push_back(RowInput{*pending_token, Var{}, root_pos});
    for (std::size_t n = 0; n < T; ++n)
      rows.push_back(RowInput{tree.nodes[n].token, Var{},
                              root_pos + static_cast<std::size_t>(tree.nodes[n].depth)});
    if (with_con)
      for (std::size_t n = 0; n < T; ++n)
        rows.push_back(RowInput{-1, g.constant((*con_embeds)[n]),
                                root_pos + static_cast<std::size_t>(tree.nodes[n].depth) + 1});

    ForwardOut fo = forward_rows(g, cache, soft, rows, mask, true, true);

    VerifyOut out;
    out.commit_row = 0;
    out.first_node_row = commit;
    out.rows_draft = T;
    out.rows_contemplate = with_con ? T : 0;
    const TensorF64& logits = g.val(fo.logits);
    const TensorF64& taps = g.val(fo.taps);
    const TensorF64& hidden = g.val(fo.hidden);
    auto logits_row = [&](std::size_t row) {
      return TensorF64({1, cfg_.vocab_size}, {logits.data.begin() + row * cfg_.vocab_size,
                                              logits.data.begin() + (row + 1) * cfg_.vocab_size});
    };
    auto tap_row = [&](std::size_t row) {
      std::size_t w = 3 * cfg_.d_model;
      return TensorF64({1, w}, {taps.data.begin() + row * w, taps.data.begin() + (row + 1) * w});
    };
    auto hidden_row = [&](std::size_t row) {
      std::size_t w = cfg_.d_model;
      return TensorF64({1, w},
                       {hidden.data.begin() + row * w, hidden.data.begin() + (row + 1) * w});
    };
    if (pending_token)
      out.commit = VerifyNodeOut{logits_row(0), tap_row(0), TensorF64{}};
    for (std::size_t n = 0; n < T; ++n) {
      VerifyNodeOut node{logits_row(commit + n), tap_row(commit + n), TensorF64{}};
      if (with_con) node.future = hidden_row(commit + T + n);
      out.nodes.push_back(std::move(node));
    }
    for (auto& [k, v] : fo.kv) out.batch_kv.emplace_back(g.val(k), g.val(v));
    return out;
  }

  // One ordinary row plus one contemplate row in a single pass; used after an
  // all-rejected round to recompute the future at the correction token. The
  // ordinary row is appended to the cache.
  struct CommitWithFutureOut {
    TensorF64 logits;
    TensorF64 tap;
    TensorF64 future;
  };

  CommitWithFutureOut commit_with_future(KVCache& cache, int token, const SoftPromptSet* soft,
                                         const ConEmbedFn& con_embed,
                                         const TensorF64& routing_tap) const {
    std::size_t pos = cache.next_position();
    if (pos + 1 >= cfg_.max_seq_len) throw CapacityError("commit_with_future: sequence full");
    std::size_t s = soft ? soft->count : 0;
    std::size_t t = cache.content_len();
    Graph g;
    Var con = con_embed(g, routing_tap);
    std::vector<RowInput> rows{RowInput{token, Var{}, pos}, RowInput{-1, con, pos + 1}};
    AttentionMask mask(2, s + t + 2, false);
    for (std::size_t j = 0; j < t; ++j) mask.set(0, s + j, true);
    mask.set(0, s + t, true);
    for (std::size_t j = 0; j < s + t + 2; ++j) mask.set(1, j, true);
    ForwardOut fo = forward_rows(g, cache, soft, rows, mask, true, true);
    std::vector<std::pair<TensorF64, TensorF64>> kv;
    for (auto& [k, v] : fo.kv) kv.emplace_back(g.val(k), g.val(v));
    cache.append_row(kv, 0, pos, token);
    const TensorF64& logits = g.val(fo.logits);
    const TensorF64& taps = g.val(fo.taps);
    const TensorF64& hidden = g.val(fo.hidden);
    CommitWithFutureOut out;
    out.logits = TensorF64({1, cfg_.vocab_size},
                           {logits.data.begin(), logits.data.begin() + cfg_.vocab_size});
    out.tap = TensorF64({1, 3 * cfg_.d_model},
                        {taps.data.begin(), taps.data.begin() + 3 * cfg_.d_model});
    out.future = TensorF64({1, cfg_.d_model},
                           {hidden.data.begin() + cfg_.d_model, hidden.data.begin() + 2 * cfg_.d_model});
    return out;
  }

 private:
  TargetConfig cfg_;
  ParamStore* store_;
};

}  // namespace confu
