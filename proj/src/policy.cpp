#include "vppo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vppo/kernels.hpp"

namespace vppo::policy {

namespace {

constexpr double kNegInf = -1e30;
constexpr int kMaxQueryLen = 8;

void check_tokens(std::span<const int> toks, int vocab, const char* what) {
  for (int t : toks)
    if (t < 0 || t >= vocab)
      throw PolicyError(std::string("unknown token id ") + std::to_string(t) + " in " + what);
}

}  // namespace

void PolicyConfig::validate() const {
  if (vocab < tokens::kVocabSize)
    throw PolicyError("vocab must cover the token table (>= " + std::to_string(tokens::kVocabSize) + ")");
  if (d_model <= 0 || n_heads <= 0 || mlp_hidden <= 0 || n_blocks <= 0)
    throw PolicyError("model dims must be positive");
  if (d_model % n_heads != 0) throw PolicyError("d_model must be divisible by n_heads");
  if (grid_n < 2 || grid_n > 10) throw PolicyError("grid_n must be in [2, 10]");
  if (context_max < grid_n * grid_n + 2 + kMaxQueryLen)
    throw PolicyError("context_max too small for the prompt");
}

double dist_entropy(const StepDistribution& dist) {
  double h = 0.0;
  for (double p : dist.probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

void PolicyParams::for_each(const std::function<void(const std::string&, const ad::Tensor&)>& fn) const {
  const_cast<PolicyParams*>(this)->for_each_mut(
      [&](const std::string& name, ad::Tensor& t) { fn(name, t); });
}

void PolicyParams::for_each_mut(const std::function<void(const std::string&, ad::Tensor&)>& fn) {
  fn("tok_embed", tok_embed);
  fn("cell_embed", cell_embed);
  fn("row_pos", row_pos);
  fn("col_pos", col_pos);
  fn("txt_pos", txt_pos);
  for (size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "blk" + std::to_string(b) + ".";
    AttentionBlock& blk = blocks[b];
    for (size_t h = 0; h < blk.wq.size(); ++h) {
      fn(p + "wq" + std::to_string(h), blk.wq[h]);
      fn(p + "wk" + std::to_string(h), blk.wk[h]);
      fn(p + "wv" + std::to_string(h), blk.wv[h]);
    }
    fn(p + "wo", blk.wo);
    fn(p + "bo", blk.bo);
    fn(p + "w1", blk.w1);
    fn(p + "b1", blk.b1);
    fn(p + "w2", blk.w2);
    fn(p + "b2", blk.b2);
  }
  fn("out_w", out_w);
  fn("out_b", out_b);
}

int64_t PolicyParams::total_size() const {
  int64_t n = 0;
  for_each([&](const std::string&, const ad::Tensor& t) { n += t.size(); });
  return n;
}

PolicyParams init_policy(const PolicyConfig& config, uint64_t seed) {
  config.validate();
  const int d = config.d_model, dh = config.head_dim();

  PolicyParams params;
  params.cfg = config;

  std::mt19937_64 rng(seed);
  auto scaled_uniform = [&](std::vector<int> shape, double scale) {
    ad::Tensor t = ad::Tensor::zeros(std::move(shape));
    std::uniform_real_distribution<double> unif(-scale, scale);
    double* p = t.mutable_data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = unif(rng);
    return t;
  };
  auto weights = [&](std::vector<int> shape) {
    return scaled_uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(d)));
  };

  params.tok_embed = weights({config.vocab, d});
  params.cell_embed = weights({tokens::kNumCellSymbols, d});
  params.row_pos = weights({config.grid_n, d});
  params.col_pos = weights({config.grid_n, d});
  params.txt_pos = weights({config.context_max, d});
  params.blocks.resize(config.n_blocks);
  for (AttentionBlock& blk : params.blocks) {
    for (int h = 0; h < config.n_heads; ++h) {
      blk.wq.push_back(weights({d, dh}));
      blk.wk.push_back(weights({d, dh}));
      blk.wv.push_back(weights({d, dh}));
    }
    blk.wo = weights({d, d});
    blk.bo = ad::Tensor::zeros({d});
    blk.w1 = weights({d, config.mlp_hidden});
    blk.b1 = ad::Tensor::zeros({config.mlp_hidden});
    blk.w2 = weights({config.mlp_hidden, d});
    blk.b2 = ad::Tensor::zeros({d});
  }
  // The readout sits behind the final norm (unit-RMS activations), so it
  // gets a tighter scale to keep the fresh policy near uniform.
  params.out_w = scaled_uniform({d, config.vocab}, 1.0 / static_cast<double>(d));
  params.out_b = ad::Tensor::zeros({config.vocab});
  return params;
}

// ---------------------------------------------------------------------------
// incremental (raw) evaluation
// ---------------------------------------------------------------------------

IncrementalEval::IncrementalEval(const PolicyParams& params, const env::Image& image,
                                 std::span<const int> query)
    : params_(params) {
  const PolicyConfig& cfg = params.cfg;
  if (image.n != cfg.grid_n) throw PolicyError("image side does not match the policy grid");
  if (static_cast<int>(query.size()) > kMaxQueryLen) throw PolicyError("query too long");
  for (int s : image.cells)
    if (s < 0 || s >= tokens::kNumCellSymbols) throw PolicyError("invalid cell symbol");
  check_tokens(query, cfg.vocab, "query");

  cache_.resize(cfg.n_blocks);
  for (auto& bc : cache_) {
    bc.k.resize(cfg.n_heads);
    bc.v.resize(cfg.n_heads);
  }

  const int d = cfg.d_model, n = cfg.grid_n;
  auto embed_data = params.tok_embed.data();
  auto cell_data = params.cell_embed.data();
  auto rpos = params.row_pos.data();
  auto cpos = params.col_pos.data();
  auto tpos = params.txt_pos.data();

  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      std::vector<double> x(cell_data.begin() + static_cast<int64_t>(image.sym(r, c)) * d,
                            cell_data.begin() + static_cast<int64_t>(image.sym(r, c) + 1) * d);
      kernels::add_inplace(x.data(), rpos.data() + static_cast<int64_t>(r) * d, d);
      kernels::add_inplace(x.data(), cpos.data() + static_cast<int64_t>(c) * d, d);
      push_row(std::move(x));
    }
  }
  // Query coordinate tokens carry the shared grid positional codes, and the
  // same codes ride along on every response-segment row so the decoding
  // positions address the referenced cells directly.
  for (size_t qi = 0; qi < query.size(); ++qi) {
    const int tok = query[qi];
    if (!tokens::is_digit(tok) || tok >= n) continue;
    if (qi == 1) coord_list_.emplace_back(0, tok);
    if (qi == 2) coord_list_.emplace_back(1, tok);
  }

  auto add_codes = [&](std::vector<double>& x) {
    for (const auto& [axis, tok] : coord_list_) {
      const auto table = (axis == 0) ? rpos : cpos;
      kernels::add_inplace(x.data(), table.data() + static_cast<int64_t>(tok) * d, d);
    }
  };
  auto push_text = [&](int tok, int coord_axis) {
    std::vector<double> x(embed_data.begin() + static_cast<int64_t>(tok) * d,
                          embed_data.begin() + static_cast<int64_t>(tok + 1) * d);
    kernels::add_inplace(x.data(), tpos.data() + static_cast<int64_t>(text_pos_) * d, d);
    if (coord_axis == 0 && tok < n) kernels::add_inplace(x.data(), rpos.data() + static_cast<int64_t>(tok) * d, d);
    if (coord_axis == 1 && tok < n) kernels::add_inplace(x.data(), cpos.data() + static_cast<int64_t>(tok) * d, d);
    ++text_pos_;
    push_row(std::move(x));
  };
  push_text(tokens::kSep, -1);
  for (size_t qi = 0; qi < query.size(); ++qi) {
    const int axis = (qi == 1 && tokens::is_digit(query[qi])) ? 0
                     : (qi == 2 && tokens::is_digit(query[qi])) ? 1
                                                                : -1;
    push_text(query[qi], axis);
  }
  // BOS opens the response segment.
  {
    std::vector<double> x(embed_data.begin() + static_cast<int64_t>(tokens::kBos) * d,
                          embed_data.begin() + static_cast<int64_t>(tokens::kBos + 1) * d);
    kernels::add_inplace(x.data(), tpos.data() + static_cast<int64_t>(text_pos_) * d, d);
    add_codes(x);
    ++text_pos_;
    push_row(std::move(x));
  }
}

void IncrementalEval::push_row(std::vector<double> x) {
  const PolicyConfig& cfg = params_.cfg;
  if (rows_ >= cfg.context_max) throw PolicyError("context overflow at row " + std::to_string(rows_));
  const int d = cfg.d_model, dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> xn(d), attn(d), proj(d), hidden(cfg.mlp_hidden), row(dh), scores;
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const AttentionBlock& blk = params_.blocks[b];
    BlockCache& bc = cache_[b];
    // Pre-norm: attention reads the normalized row, the residual keeps x.
    std::copy(x.begin(), x.end(), xn.begin());
    kernels::rmsnorm_row(xn.data(), d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      kernels::matvec(xn.data(), blk.wk[h].data().data(), row.data(), d, dh);
      bc.k[h].insert(bc.k[h].end(), row.begin(), row.end());
      kernels::matvec(xn.data(), blk.wv[h].data().data(), row.data(), d, dh);
      bc.v[h].insert(bc.v[h].end(), row.begin(), row.end());
      kernels::matvec(xn.data(), blk.wq[h].data().data(), row.data(), d, dh);

      const int ctx = rows_ + 1;
      scores.resize(ctx);
      for (int j = 0; j < ctx; ++j)
        scores[j] = kernels::dot(row.data(), bc.k[h].data() + static_cast<int64_t>(j) * dh, dh) * inv_sqrt_dh;
      kernels::softmax_row(scores.data(), ctx);
      kernels::matvec(scores.data(), bc.v[h].data(), attn.data() + static_cast<int64_t>(h) * dh, ctx, dh);
    }
    kernels::matvec(attn.data(), blk.wo.data().data(), proj.data(), d, d);
    kernels::add_inplace(proj.data(), blk.bo.data().data(), d);
    kernels::add_inplace(x.data(), proj.data(), d);  // residual

    std::copy(x.begin(), x.end(), xn.begin());
    kernels::rmsnorm_row(xn.data(), d);
    kernels::matvec(xn.data(), blk.w1.data().data(), hidden.data(), d, cfg.mlp_hidden);
    kernels::add_inplace(hidden.data(), blk.b1.data().data(), cfg.mlp_hidden);
    for (double& v : hidden) v = std::tanh(v);
    kernels::matvec(hidden.data(), blk.w2.data().data(), proj.data(), cfg.mlp_hidden, d);
    kernels::add_inplace(proj.data(), blk.b2.data().data(), d);
    kernels::add_inplace(x.data(), proj.data(), d);  // residual
  }
  last_row_ = std::move(x);
  ++rows_;
}

StepDistribution IncrementalEval::dist() const {
  const PolicyConfig& cfg = params_.cfg;
  std::vector<double> xn = last_row_;
  kernels::rmsnorm_row(xn.data(), cfg.d_model);
  StepDistribution out;
  out.probs.resize(cfg.vocab);
  kernels::matvec(xn.data(), params_.out_w.data().data(), out.probs.data(), cfg.d_model, cfg.vocab);
  kernels::add_inplace(out.probs.data(), params_.out_b.data().data(), cfg.vocab);
  out.log_probs = out.probs;  // both start from the same logits row
  kernels::softmax_row(out.probs.data(), cfg.vocab);
  kernels::log_softmax_row(out.log_probs.data(), cfg.vocab);
  return out;
}

void IncrementalEval::push_token(int token) {
  const PolicyConfig& cfg = params_.cfg;
  if (token < 0 || token >= cfg.vocab)
    throw PolicyError("unknown token id " + std::to_string(token));
  if (text_pos_ >= cfg.context_max) throw PolicyError("context overflow");
  const int d = cfg.d_model;
  auto embed_data = params_.tok_embed.data();
  auto tpos = params_.txt_pos.data();
  std::vector<double> x(embed_data.begin() + static_cast<int64_t>(token) * d,
                        embed_data.begin() + static_cast<int64_t>(token + 1) * d);
  kernels::add_inplace(x.data(), tpos.data() + static_cast<int64_t>(text_pos_) * d, d);
  for (const auto& [axis, tok] : coord_list_) {
    const auto table = (axis == 0) ? params_.row_pos.data() : params_.col_pos.data();
    kernels::add_inplace(x.data(), table.data() + static_cast<int64_t>(tok) * d, d);
  }
  ++text_pos_;
  ++response_len_;
  push_row(std::move(x));
}

StepDistribution next_token_dist(const PolicyParams& params, const env::Image& image,
                                 std::span<const int> query, std::span<const int> prefix) {
  IncrementalEval eval(params, image, query);
  for (int t : prefix) eval.push_token(t);
  return eval.dist();
}

std::vector<double> sequence_log_prob(const PolicyParams& params, const env::Image& image,
                                      std::span<const int> query, std::span<const int> tokens) {
  check_tokens(tokens, params.cfg.vocab, "tokens");
  IncrementalEval eval(params, image, query);
  std::vector<double> out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    out.push_back(eval.dist().log_probs[t]);
    eval.push_token(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// tape (differentiable) path
// ---------------------------------------------------------------------------

ParamNodes add_params_as_inputs(ad::Tape& tape, const PolicyParams& params) {
  ParamNodes nodes;
  params.for_each([&](const std::string&, const ad::Tensor& t) { nodes.ids.push_back(tape.input(t)); });
  return nodes;
}

namespace {

// Mirrors the for_each order so the builder can address parameters by role.
struct NodeView {
  ad::Tape::NodeId tok_embed, cell_embed, row_pos, col_pos, txt_pos;
  struct Block {
    std::vector<ad::Tape::NodeId> wq, wk, wv;
    ad::Tape::NodeId wo, bo, w1, b1, w2, b2;
  };
  std::vector<Block> blocks;
  ad::Tape::NodeId out_w, out_b;
};

NodeView make_view(const ParamNodes& nodes, const PolicyConfig& cfg) {
  NodeView v;
  size_t i = 0;
  auto next = [&]() { return nodes.ids.at(i++); };
  v.tok_embed = next();
  v.cell_embed = next();
  v.row_pos = next();
  v.col_pos = next();
  v.txt_pos = next();
  v.blocks.resize(cfg.n_blocks);
  for (auto& b : v.blocks) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      b.wq.push_back(next());
      b.wk.push_back(next());
      b.wv.push_back(next());
    }
    b.wo = next();
    b.bo = next();
    b.w1 = next();
    b.b1 = next();
    b.w2 = next();
    b.b2 = next();
  }
  v.out_w = next();
  v.out_b = next();
  if (i != nodes.ids.size()) throw PolicyError("parameter node count mismatch");
  return v;
}

ad::Tensor causal_mask(const std::vector<int>& query_rows, int total_rows) {
  // query_rows[r] = absolute position of attention row r; allowed cols <= it.
  ad::Tensor mask = ad::Tensor::zeros({static_cast<int>(query_rows.size()), total_rows});
  double* m = mask.mutable_data();
  for (size_t r = 0; r < query_rows.size(); ++r)
    for (int c = query_rows[r] + 1; c < total_rows; ++c)
      m[r * total_rows + c] = kNegInf;
  return mask;
}

}  // namespace

ResponseForward build_response_forward(ad::Tape& tape, const ParamNodes& nodes,
                                       const PolicyParams& params, const env::Image& image,
                                       std::span<const int> query, std::span<const int> response) {
  const PolicyConfig& cfg = params.cfg;
  if (response.empty()) throw PolicyError("empty response");
  if (image.n != cfg.grid_n) throw PolicyError("image side does not match the policy grid");
  if (static_cast<int>(query.size()) > kMaxQueryLen) throw PolicyError("query too long");
  check_tokens(query, cfg.vocab, "query");
  check_tokens(response, cfg.vocab, "response");

  const int n = cfg.grid_n;
  const int T = static_cast<int>(response.size());
  const int bos_abs = n * n + 1 + static_cast<int>(query.size());
  const int L = bos_abs + T;  // prompt rows + BOS + response[0..T-2]
  if (L > cfg.context_max) throw PolicyError("context overflow: " + std::to_string(L) + " rows");

  const NodeView v = make_view(nodes, cfg);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  // Context embedding rows.
  std::vector<int> syms, rows_idx, cols_idx;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      syms.push_back(image.sym(r, c));
      rows_idx.push_back(r);
      cols_idx.push_back(c);
    }
  ad::Tape::NodeId img_part =
      tape.add(tape.add(tape.gather_rows(v.cell_embed, syms), tape.gather_rows(v.row_pos, rows_idx)),
               tape.gather_rows(v.col_pos, cols_idx));

  // Text rows; query coordinate tokens additionally carry the shared grid
  // positional codes (same assembly order as the incremental path).
  std::vector<ad::Tape::NodeId> parts = {img_part};
  std::vector<int> run_toks, run_pos;
  int pos = 0;
  auto flush_run = [&]() {
    if (run_toks.empty()) return;
    parts.push_back(
        tape.add(tape.gather_rows(v.tok_embed, run_toks), tape.gather_rows(v.txt_pos, run_pos)));
    run_toks.clear();
    run_pos.clear();
  };
  auto add_plain = [&](int tok) {
    run_toks.push_back(tok);
    run_pos.push_back(pos++);
  };
  add_plain(tokens::kSep);
  for (size_t qi = 0; qi < query.size(); ++qi) {
    const int tok = query[qi];
    const int axis = (qi == 1 && tokens::is_digit(tok) && tok < n)   ? 0
                     : (qi == 2 && tokens::is_digit(tok) && tok < n) ? 1
                                                                     : -1;
    if (axis < 0) {
      add_plain(tok);
      continue;
    }
    flush_run();
    ad::Tape::NodeId base = tape.add(tape.gather_rows(v.tok_embed, {tok}),
                                     tape.gather_rows(v.txt_pos, {pos}));
    parts.push_back(tape.add(base, tape.gather_rows(axis == 0 ? v.row_pos : v.col_pos, {tok})));
    ++pos;
  }
  flush_run();

  // Response segment rows (BOS plus the teacher-forced prefix) repeat the
  // query coordinate codes, in the same addition order as the incremental path.
  std::vector<std::pair<int, int>> coords;
  for (size_t qi = 0; qi < query.size(); ++qi) {
    const int tok = query[qi];
    if (!tokens::is_digit(tok) || tok >= n) continue;
    if (qi == 1) coords.emplace_back(0, tok);
    if (qi == 2) coords.emplace_back(1, tok);
  }
  std::vector<int> resp_toks = {tokens::kBos};
  for (size_t i = 0; i + 1 < response.size(); ++i) resp_toks.push_back(response[i]);
  std::vector<int> resp_pos(resp_toks.size());
  for (size_t i = 0; i < resp_toks.size(); ++i) resp_pos[i] = pos++;
  ad::Tape::NodeId resp =
      tape.add(tape.gather_rows(v.tok_embed, resp_toks), tape.gather_rows(v.txt_pos, resp_pos));
  for (const auto& [axis, tok] : coords) {
    const std::vector<int> repeated(resp_toks.size(), tok);
    resp = tape.add(resp, tape.gather_rows(axis == 0 ? v.row_pos : v.col_pos, repeated));
  }
  parts.push_back(resp);

  ad::Tape::NodeId h = tape.concat_rows(parts);

  std::vector<int> read_rows(T);
  for (int t = 0; t < T; ++t) read_rows[t] = bos_abs + t;
  std::vector<int> all_rows(L);
  for (int r = 0; r < L; ++r) all_rows[r] = r;

  for (int b = 0; b < cfg.n_blocks; ++b) {
    const NodeView::Block& blk = v.blocks[b];
    const bool last = (b == cfg.n_blocks - 1);
    const std::vector<int>& q_rows = last ? read_rows : all_rows;
    ad::Tape::NodeId hn = tape.rmsnorm_rows(h);
    ad::Tape::NodeId hq_res = last ? tape.gather_rows(h, q_rows) : h;  // residual stream
    ad::Tape::NodeId hq = last ? tape.gather_rows(hn, q_rows) : hn;
    ad::Tape::NodeId mask = tape.constant(causal_mask(q_rows, L));

    std::vector<ad::Tape::NodeId> heads;
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      ad::Tape::NodeId q = tape.matmul(hq, blk.wq[hd]);
      ad::Tape::NodeId k = tape.matmul(hn, blk.wk[hd]);
      ad::Tape::NodeId val = tape.matmul(hn, blk.wv[hd]);
      ad::Tape::NodeId s = tape.add(tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_dh), mask);
      heads.push_back(tape.matmul(tape.softmax_rows(s), val));
    }
    ad::Tape::NodeId attn = tape.bias_add(tape.matmul(tape.concat_cols(heads), blk.wo), blk.bo);
    ad::Tape::NodeId h1 = tape.add(hq_res, attn);
    ad::Tape::NodeId h1n = tape.rmsnorm_rows(h1);
    ad::Tape::NodeId mlp =
        tape.bias_add(tape.matmul(tape.tanh(tape.bias_add(tape.matmul(h1n, blk.w1), blk.b1)), blk.w2), blk.b2);
    h = tape.add(h1, mlp);
  }

  ad::Tape::NodeId logits = tape.bias_add(tape.matmul(tape.rmsnorm_rows(h), v.out_w), v.out_b);
  ResponseForward fwd;
  fwd.logp_rows = tape.log_softmax_rows(logits);
  fwd.probs_rows = tape.softmax_rows(logits);
  fwd.token_log_probs = tape.gather_cols(fwd.logp_rows, std::vector<int>(response.begin(), response.end()));
  return fwd;
}

std::vector<double> flatten_grads(const std::vector<ad::Tensor>& grads) {
  int64_t total = 0;
  for (const ad::Tensor& g : grads) total += g.size();
  std::vector<double> flat;
  flat.reserve(total);
  for (const ad::Tensor& g : grads) flat.insert(flat.end(), g.data().begin(), g.data().end());
  return flat;
}

}  // namespace vppo::policy
