#include "mgec/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace mgec {

namespace {
constexpr double kMaskNeg = -1e9;
}

void ModelConfig::validate() const {
  if (vocab_size < 5)
    throw std::invalid_argument("ModelConfig: vocab_size " + std::to_string(vocab_size) +
                                " cannot cover the four reserved ids");
  if (width <= 0 || heads <= 0 || enc_layers <= 0 || dec_layers <= 0 || ff_width <= 0)
    throw std::invalid_argument("ModelConfig: all dimensions must be positive");
  if (max_len < 2) throw std::invalid_argument("ModelConfig: max_len must be at least 2");
  if (width % heads != 0)
    throw std::invalid_argument("ModelConfig: width " + std::to_string(width) +
                                " not divisible by heads " + std::to_string(heads));
}

ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p;
  // draw order is fixed by this construction order, not by map order
  auto mat = [&](const std::string& name, int r, int c) {
    Tensor t = Tensor::zeros({r, c});
    for (double& x : t.data) x = rng.uniform(-0.08, 0.08);
    p.emplace(name, std::move(t));
  };
  auto gain = [&](const std::string& name, int n) { p.emplace(name, Tensor::full({n}, 1.0)); };
  auto bias = [&](const std::string& name, int n) { p.emplace(name, Tensor::zeros({n})); };

  mat("embed", cfg.vocab_size, cfg.width);
  mat("pos", cfg.max_len, cfg.width);
  for (int l = 0; l < cfg.enc_layers; ++l) {
    std::string pre = "enc" + std::to_string(l) + ".";
    for (const char* w : {"self_wq", "self_wk", "self_wv", "self_wo"})
      mat(pre + w, cfg.width, cfg.width);
    gain(pre + "ln1_g", cfg.width);
    bias(pre + "ln1_b", cfg.width);
    gain(pre + "ln2_g", cfg.width);
    bias(pre + "ln2_b", cfg.width);
    mat(pre + "ff_w1", cfg.width, cfg.ff_width);
    bias(pre + "ff_b1", cfg.ff_width);
    mat(pre + "ff_w2", cfg.ff_width, cfg.width);
    bias(pre + "ff_b2", cfg.width);
  }
  gain("enc_ln_g", cfg.width);
  bias("enc_ln_b", cfg.width);
  for (int l = 0; l < cfg.dec_layers; ++l) {
    std::string pre = "dec" + std::to_string(l) + ".";
    for (const char* w : {"self_wq", "self_wk", "self_wv", "self_wo", "cross_wq", "cross_wk",
                          "cross_wv", "cross_wo"})
      mat(pre + w, cfg.width, cfg.width);
    gain(pre + "ln1_g", cfg.width);
    bias(pre + "ln1_b", cfg.width);
    gain(pre + "ln2_g", cfg.width);
    bias(pre + "ln2_b", cfg.width);
    gain(pre + "ln3_g", cfg.width);
    bias(pre + "ln3_b", cfg.width);
    mat(pre + "ff_w1", cfg.width, cfg.ff_width);
    bias(pre + "ff_b1", cfg.ff_width);
    mat(pre + "ff_w2", cfg.ff_width, cfg.width);
    bias(pre + "ff_b2", cfg.width);
  }
  gain("dec_ln_g", cfg.width);
  bias("dec_ln_b", cfg.width);
  return p;
}

EncodedPair encode_pair(const Codec& codec, const SentencePair& pair) {
  return {codec.encode(pair.source_tokens), codec.encode(pair.target_tokens)};
}

namespace {

Tensor causal_mask(int n) {
  Tensor m = Tensor::zeros({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m.at(i, j) = kMaskNeg;
  return m;
}

void check_tokens(const ModelConfig& cfg, const std::vector<int>& ids, const char* side,
                  size_t index) {
  for (int tok : ids)
    if (tok < 0 || tok >= cfg.vocab_size)
      throw std::invalid_argument(std::string("forward: pair ") + std::to_string(index) + " " +
                                  side + " token id " + std::to_string(tok) +
                                  " outside vocab of " + std::to_string(cfg.vocab_size));
  if ((int)ids.size() + 1 > cfg.max_len)
    throw std::invalid_argument(std::string("forward: pair ") + std::to_string(index) + " " + side +
                                " length " + std::to_string(ids.size()) +
                                " plus structural token exceeds max_len " +
                                std::to_string(cfg.max_len));
}

void check_pair(const ModelConfig& cfg, const EncodedPair& p, size_t index) {
  if (p.source.empty() || p.target.empty())
    throw std::invalid_argument("forward: pair " + std::to_string(index) + " has an empty side");
  check_tokens(cfg, p.source, "source", index);
  check_tokens(cfg, p.target, "target", index);
}

// tape-side network; all ops record onto the caller's tape
struct TapeNet {
  Tape& t;
  const ParamVars& v;
  const ModelConfig& cfg;

  int id(const std::string& n) const { return v.id(n); }
  int ln(int x, const std::string& pre_g, const std::string& pre_b) {
    return t.layer_norm(x, id(pre_g), id(pre_b));
  }

  int attention(int q_in, int kv_in, const std::string& pre, const Tensor* mask) {
    int dh = cfg.width / cfg.heads;
    int Q = t.matmul(q_in, id(pre + "wq"));
    int K = t.matmul(kv_in, id(pre + "wk"));
    int V = t.matmul(kv_in, id(pre + "wv"));
    std::vector<int> parts;
    parts.reserve((size_t)cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      int qh = t.slice_cols(Q, h * dh, (h + 1) * dh);
      int kh = t.slice_cols(K, h * dh, (h + 1) * dh);
      int vh = t.slice_cols(V, h * dh, (h + 1) * dh);
      int scores = t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt((double)dh));
      if (mask) scores = t.add_const(scores, *mask);
      parts.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    return t.matmul(t.concat_cols(parts), id(pre + "wo"));
  }

  int ff(int x, const std::string& pre) {
    int h = t.gelu(t.add_rowvec(t.matmul(x, id(pre + "ff_w1")), id(pre + "ff_b1")));
    return t.add_rowvec(t.matmul(h, id(pre + "ff_w2")), id(pre + "ff_b2"));
  }

  int embed_rows(const std::vector<int>& ids) {
    std::vector<int> posidx(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) posidx[i] = (int)i;
    return t.add(t.gather_rows(id("embed"), ids), t.gather_rows(id("pos"), posidx));
  }

  int encode(const std::vector<int>& src) {
    int x = embed_rows(src);
    for (int l = 0; l < cfg.enc_layers; ++l) {
      std::string pre = "enc" + std::to_string(l) + ".";
      int h1 = ln(x, pre + "ln1_g", pre + "ln1_b");
      x = t.add(x, attention(h1, h1, pre + "self_", nullptr));
      int h2 = ln(x, pre + "ln2_g", pre + "ln2_b");
      x = t.add(x, ff(h2, pre));
    }
    return ln(x, "enc_ln_g", "enc_ln_b");
  }

  int decode(int enc_out, const std::vector<int>& dec_in, const Tensor& mask) {
    int x = embed_rows(dec_in);
    for (int l = 0; l < cfg.dec_layers; ++l) {
      std::string pre = "dec" + std::to_string(l) + ".";
      int h1 = ln(x, pre + "ln1_g", pre + "ln1_b");
      x = t.add(x, attention(h1, h1, pre + "self_", &mask));
      int h2 = ln(x, pre + "ln2_g", pre + "ln2_b");
      x = t.add(x, attention(h2, enc_out, pre + "cross_", nullptr));
      int h3 = ln(x, pre + "ln3_g", pre + "ln3_b");
      x = t.add(x, ff(h3, pre));
    }
    x = ln(x, "dec_ln_g", "dec_ln_b");
    return t.matmul(x, t.transpose(id("embed")));
  }
};

std::vector<int> with_eos(const std::vector<int>& ids) {
  std::vector<int> out = ids;
  out.push_back(MergeTable::kEosId);
  return out;
}

int pair_logits(TapeNet& net, const EncodedPair& p) {
  std::vector<int> dec_in;
  dec_in.reserve(p.target.size() + 1);
  dec_in.push_back(MergeTable::kBosId);
  dec_in.insert(dec_in.end(), p.target.begin(), p.target.end());
  int enc = net.encode(with_eos(p.source));
  Tensor mask = causal_mask((int)dec_in.size());
  return net.decode(enc, dec_in, mask);
}

}  // namespace

int forward_loss(Tape& tape, const ParamVars& vars, const ModelConfig& cfg,
                 const std::vector<EncodedPair>& batch) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("forward_loss: empty batch");
  TapeNet net{tape, vars, cfg};
  long total = 0;
  int acc = -1;
  for (size_t i = 0; i < batch.size(); ++i) {
    check_pair(cfg, batch[i], i);
    int logits = pair_logits(net, batch[i]);
    std::vector<int> labels = with_eos(batch[i].target);
    int ce = tape.cross_entropy(logits, labels, std::vector<char>(labels.size(), 1));
    int weighted = tape.scale(ce, (double)labels.size());
    acc = acc < 0 ? weighted : tape.add(acc, weighted);
    total += (long)labels.size();
  }
  return tape.scale(acc, 1.0 / (double)total);
}

LossResult loss_and_grads(const ModelParams& params, const ModelConfig& cfg,
                          const std::vector<EncodedPair>& batch) {
  Tape tape;
  ParamVars vars = register_params(tape, params);
  int loss = forward_loss(tape, vars, cfg, batch);
  tape.backward(loss);
  return {tape.value(loss).data[0], collect_grads(tape, vars)};
}

double batch_loss(const ModelParams& params, const ModelConfig& cfg,
                  const std::vector<EncodedPair>& batch) {
  Tape tape;
  ParamVars vars = register_params(tape, params);
  int loss = forward_loss(tape, vars, cfg, batch);
  return tape.value(loss).data[0];
}

Tensor teacher_logits(const ModelParams& params, const ModelConfig& cfg, const EncodedPair& pair) {
  cfg.validate();
  check_pair(cfg, pair, 0);
  Tape tape;
  ParamVars vars = register_params(tape, params);
  TapeNet net{tape, vars, cfg};
  return tape.value(pair_logits(net, pair));
}

namespace {

using tensor_ops::add;
using tensor_ops::add_rowvec;
using tensor_ops::concat_cols;
using tensor_ops::gather_rows;
using tensor_ops::gelu;
using tensor_ops::layer_norm;
using tensor_ops::matmul;
using tensor_ops::scale;
using tensor_ops::slice_cols;
using tensor_ops::softmax_rows;
using tensor_ops::transpose;

// inference-side network on the plain kernels
struct PlainNet {
  const ModelParams& params;
  const ModelConfig& cfg;

  const Tensor& P(const std::string& n) const {
    auto it = params.find(n);
    if (it == params.end()) throw std::invalid_argument("model: missing parameter " + n);
    return it->second;
  }

  Tensor embed_rows(const std::vector<int>& ids, int first_pos) const {
    std::vector<int> posidx(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) posidx[i] = first_pos + (int)i;
    return add(gather_rows(P("embed"), ids), gather_rows(P("pos"), posidx));
  }

  Tensor attend(const Tensor& q, const Tensor& K, const Tensor& V, const Tensor& wo) const {
    int dh = cfg.width / cfg.heads;
    std::vector<Tensor> parts;
    parts.reserve((size_t)cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
      Tensor kh = slice_cols(K, h * dh, (h + 1) * dh);
      Tensor vh = slice_cols(V, h * dh, (h + 1) * dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt((double)dh));
      parts.push_back(matmul(softmax_rows(scores), vh));
    }
    return matmul(concat_cols(parts), wo);
  }

  Tensor encode(const std::vector<int>& src) const {
    Tensor x = embed_rows(src, 0);
    for (int l = 0; l < cfg.enc_layers; ++l) {
      std::string pre = "enc" + std::to_string(l) + ".";
      Tensor h = layer_norm(x, P(pre + "ln1_g"), P(pre + "ln1_b"));
      Tensor q = matmul(h, P(pre + "self_wq"));
      Tensor k = matmul(h, P(pre + "self_wk"));
      Tensor v = matmul(h, P(pre + "self_wv"));
      x = add(x, attend(q, k, v, P(pre + "self_wo")));
      h = layer_norm(x, P(pre + "ln2_g"), P(pre + "ln2_b"));
      Tensor u = gelu(add_rowvec(matmul(h, P(pre + "ff_w1")), P(pre + "ff_b1")));
      x = add(x, add_rowvec(matmul(u, P(pre + "ff_w2")), P(pre + "ff_b2")));
    }
    return layer_norm(x, P("enc_ln_g"), P("enc_ln_b"));
  }
};

// per-source decode context, shared by all hypotheses
struct DecCtx {
  std::vector<Tensor> cross_k, cross_v;  // per decoder layer [Ls, W]
  Tensor embed_t;                        // [W, V]
};

DecCtx make_ctx(const PlainNet& net, const std::vector<int>& src_with_eos) {
  DecCtx c;
  Tensor enc_out = net.encode(src_with_eos);
  for (int l = 0; l < net.cfg.dec_layers; ++l) {
    std::string pre = "dec" + std::to_string(l) + ".";
    c.cross_k.push_back(matmul(enc_out, net.P(pre + "cross_wk")));
    c.cross_v.push_back(matmul(enc_out, net.P(pre + "cross_wv")));
  }
  c.embed_t = transpose(net.P("embed"));
  return c;
}

// per-hypothesis incremental state: cached self-attention keys and values
struct DecState {
  std::vector<Tensor> sk, sv;
  int len = 0;

  DecState() = default;
  explicit DecState(const ModelConfig& cfg) {
    sk.resize((size_t)cfg.dec_layers, Tensor::zeros({0, cfg.width}));
    sv.resize((size_t)cfg.dec_layers, Tensor::zeros({0, cfg.width}));
  }
};

void append_row(Tensor& acc, const Tensor& row) {
  acc.data.insert(acc.data.end(), row.data.begin(), row.data.end());
  acc.shape[0] += 1;
}

Tensor dec_step(const PlainNet& net, const DecCtx& ctx, DecState& st, int token) {
  const ModelConfig& cfg = net.cfg;
  Tensor x = net.embed_rows({token}, st.len);
  for (int l = 0; l < cfg.dec_layers; ++l) {
    std::string pre = "dec" + std::to_string(l) + ".";
    Tensor h = layer_norm(x, net.P(pre + "ln1_g"), net.P(pre + "ln1_b"));
    Tensor q = matmul(h, net.P(pre + "self_wq"));
    append_row(st.sk[(size_t)l], matmul(h, net.P(pre + "self_wk")));
    append_row(st.sv[(size_t)l], matmul(h, net.P(pre + "self_wv")));
    x = add(x, net.attend(q, st.sk[(size_t)l], st.sv[(size_t)l], net.P(pre + "self_wo")));
    h = layer_norm(x, net.P(pre + "ln2_g"), net.P(pre + "ln2_b"));
    Tensor qc = matmul(h, net.P(pre + "cross_wq"));
    x = add(x, net.attend(qc, ctx.cross_k[(size_t)l], ctx.cross_v[(size_t)l],
                          net.P(pre + "cross_wo")));
    h = layer_norm(x, net.P(pre + "ln3_g"), net.P(pre + "ln3_b"));
    Tensor u = gelu(add_rowvec(matmul(h, net.P(pre + "ff_w1")), net.P(pre + "ff_b1")));
    x = add(x, add_rowvec(matmul(u, net.P(pre + "ff_w2")), net.P(pre + "ff_b2")));
  }
  x = layer_norm(x, net.P("dec_ln_g"), net.P("dec_ln_b"));
  st.len += 1;
  return matmul(x, ctx.embed_t);
}

std::vector<double> log_softmax_row(const Tensor& logits) {
  double mx = logits.data[0];
  for (double v : logits.data) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : logits.data) s += std::exp(v - mx);
  double lse = mx + std::log(s);
  std::vector<double> out(logits.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = logits.data[i] - lse;
  return out;
}

void check_decode_input(const ModelConfig& cfg, const std::vector<int>& source_ids, int max_len) {
  cfg.validate();
  if (max_len < 1) throw std::invalid_argument("decode: max_len must be positive");
  if (source_ids.empty()) throw std::invalid_argument("decode: empty source");
  check_tokens(cfg, source_ids, "source", 0);
}

}  // namespace

std::vector<int> greedy_decode(const ModelParams& params, const ModelConfig& cfg,
                               const std::vector<int>& source_ids, int max_len) {
  check_decode_input(cfg, source_ids, max_len);
  PlainNet net{params, cfg};
  DecCtx ctx = make_ctx(net, with_eos(source_ids));
  DecState st(cfg);
  int cap = std::min(max_len, cfg.max_len - 1);
  std::vector<int> out;
  Tensor logits = dec_step(net, ctx, st, MergeTable::kBosId);
  while (true) {
    int best = 0;
    double bv = logits.data[0];
    for (int j = 1; j < cfg.vocab_size; ++j)
      if (logits.data[(size_t)j] > bv) {
        bv = logits.data[(size_t)j];
        best = j;
      }
    if (best == MergeTable::kEosId) break;
    out.push_back(best);
    if ((int)out.size() >= cap) break;
    logits = dec_step(net, ctx, st, best);
  }
  return out;
}

Tensor incremental_logits(const ModelParams& params, const ModelConfig& cfg,
                          const std::vector<int>& source_ids, const std::vector<int>& prefix) {
  check_decode_input(cfg, source_ids, 1);
  check_tokens(cfg, prefix, "prefix", 0);
  PlainNet net{params, cfg};
  DecCtx ctx = make_ctx(net, with_eos(source_ids));
  DecState st(cfg);
  Tensor out = Tensor::zeros({0, cfg.vocab_size});
  append_row(out, dec_step(net, ctx, st, MergeTable::kBosId));
  for (int tok : prefix) append_row(out, dec_step(net, ctx, st, tok));
  return out;
}

std::vector<int> beam_decode(const ModelParams& params, const ModelConfig& cfg,
                             const std::vector<int>& source_ids, int beam_size, int max_len) {
  if (beam_size < 1) throw std::invalid_argument("beam_decode: beam_size must be at least 1");
  check_decode_input(cfg, source_ids, max_len);
  PlainNet net{params, cfg};
  DecCtx ctx = make_ctx(net, with_eos(source_ids));
  int cap = std::min(max_len, cfg.max_len - 1);

  struct Hyp {
    std::vector<int> toks;
    double sum = 0.0;
    DecState st;
    std::vector<double> logp;
  };
  struct Done {
    std::vector<int> toks;
    double norm;
  };

  std::vector<Hyp> live;
  {
    Hyp h0{{}, 0.0, DecState(cfg), {}};
    h0.logp = log_softmax_row(dec_step(net, ctx, h0.st, MergeTable::kBosId));
    live.push_back(std::move(h0));
  }
  std::vector<Done> pool;

  for (int step = 0; step < cap && !live.empty() && (int)pool.size() < beam_size; ++step) {
    struct Cand {
      double sum;
      int parent, tok;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * (size_t)cfg.vocab_size);
    for (size_t i = 0; i < live.size(); ++i)
      for (int v = 0; v < cfg.vocab_size; ++v)
        cands.push_back({live[i].sum + live[i].logp[(size_t)v], (int)i, v});
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.sum != b.sum) return a.sum > b.sum;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.tok < b.tok;
    });
    size_t take = std::min((size_t)beam_size, cands.size());
    std::vector<Hyp> next;
    for (size_t c = 0; c < take; ++c) {
      const Cand& cd = cands[c];
      const Hyp& parent = live[(size_t)cd.parent];
      if (cd.tok == MergeTable::kEosId) {
        pool.push_back({parent.toks, cd.sum / (double)(parent.toks.size() + 1)});
      } else {
        Hyp h;
        h.toks = parent.toks;
        h.toks.push_back(cd.tok);
        h.sum = cd.sum;
        h.st = parent.st;
        next.push_back(std::move(h));
      }
    }
    for (auto& h : next) h.logp = log_softmax_row(dec_step(net, ctx, h.st, h.toks.back()));
    live = std::move(next);
  }
  if ((int)pool.size() < beam_size)
    for (const auto& h : live) pool.push_back({h.toks, h.sum / (double)h.toks.size()});

  const Done* best = &pool[0];
  for (const auto& d : pool) {
    if (d.norm != best->norm) {
      if (d.norm > best->norm) best = &d;
      continue;
    }
    if (d.toks.size() != best->toks.size()) {
      if (d.toks.size() < best->toks.size()) best = &d;
      continue;
    }
    if (d.toks < best->toks) best = &d;
  }
  return best->toks;
}

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
  out.write((const char*)b, 8);
}
void put_i64(std::ostream& out, std::int64_t v) { put_u64(out, (std::uint64_t)v); }
void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }
void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), (std::streamsize)s.size());
}
void put_tensor(std::ostream& out, const Tensor& t) {
  put_u64(out, (std::uint64_t)t.rank());
  for (int e : t.shape) put_i64(out, e);
  for (double d : t.data) put_f64(out, d);
}
void put_named(std::ostream& out, const std::map<std::string, Tensor>& m) {
  put_u64(out, m.size());
  for (const auto& [name, t] : m) {
    put_string(out, name);
    put_tensor(out, t);
  }
}

std::uint64_t get_u64(std::istream& in, const std::string& path) {
  unsigned char b[8];
  if (!in.read((char*)b, 8)) throw std::runtime_error("checkpoint truncated: " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= (std::uint64_t)b[i] << (8 * i);
  return v;
}
std::int64_t get_i64(std::istream& in, const std::string& path) {
  return (std::int64_t)get_u64(in, path);
}
double get_f64(std::istream& in, const std::string& path) {
  return std::bit_cast<double>(get_u64(in, path));
}
std::string get_string(std::istream& in, const std::string& path) {
  std::uint64_t n = get_u64(in, path);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint corrupt (name length): " + path);
  std::string s((size_t)n, '\0');
  if (n && !in.read(s.data(), (std::streamsize)n))
    throw std::runtime_error("checkpoint truncated: " + path);
  return s;
}
Tensor get_tensor(std::istream& in, const std::string& path) {
  std::uint64_t rank = get_u64(in, path);
  if (rank > 8) throw std::runtime_error("checkpoint corrupt (tensor rank): " + path);
  Tensor t;
  std::int64_t numel = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    std::int64_t e = get_i64(in, path);
    if (e < 0 || (e > 0 && numel > (std::int64_t)1e9 / e))
      throw std::runtime_error("checkpoint corrupt (tensor extent): " + path);
    t.shape.push_back((int)e);
    numel *= e;
  }
  t.data.resize((size_t)numel);
  for (auto& d : t.data) d = get_f64(in, path);
  return t;
}
std::map<std::string, Tensor> get_named(std::istream& in, const std::string& path) {
  std::uint64_t n = get_u64(in, path);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint corrupt (entry count): " + path);
  std::map<std::string, Tensor> m;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = get_string(in, path);
    m.emplace(std::move(name), get_tensor(in, path));
  }
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("MGEC", 4);
  put_u64(out, 1);  // format version
  put_i64(out, ckpt.config.vocab_size);
  put_i64(out, ckpt.config.width);
  put_i64(out, ckpt.config.heads);
  put_i64(out, ckpt.config.enc_layers);
  put_i64(out, ckpt.config.dec_layers);
  put_i64(out, ckpt.config.ff_width);
  put_i64(out, ckpt.config.max_len);
  put_named(out, ckpt.params);
  put_i64(out, ckpt.adam.step);
  put_f64(out, ckpt.adam.beta1);
  put_f64(out, ckpt.adam.beta2);
  put_f64(out, ckpt.adam.eps);
  put_named(out, ckpt.adam.m);
  put_named(out, ckpt.adam.v);
  put_u64(out, ckpt.rng_state);
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "MGEC")
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  std::uint64_t version = get_u64(in, path);
  if (version != 1)
    throw std::runtime_error("load_checkpoint: unsupported format version " +
                             std::to_string(version) + " in " + path);
  Checkpoint c;
  c.config.vocab_size = (int)get_i64(in, path);
  c.config.width = (int)get_i64(in, path);
  c.config.heads = (int)get_i64(in, path);
  c.config.enc_layers = (int)get_i64(in, path);
  c.config.dec_layers = (int)get_i64(in, path);
  c.config.ff_width = (int)get_i64(in, path);
  c.config.max_len = (int)get_i64(in, path);
  c.params = get_named(in, path);
  c.adam.step = get_i64(in, path);
  c.adam.beta1 = get_f64(in, path);
  c.adam.beta2 = get_f64(in, path);
  c.adam.eps = get_f64(in, path);
  c.adam.m = get_named(in, path);
  c.adam.v = get_named(in, path);
  c.rng_state = get_u64(in, path);
  return c;
}

}  // namespace mgec
