#include "tcrlm/model.hpp"

#include <algorithm>

#include "tcrlm/rng.hpp"

namespace tcrlm::model {

using num::Tensor;

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || d_ff <= 0 ||
      max_len <= 2 || vocab != seq::kVocabSize) {
    fail("InvalidConfig",
         "d_model/n_heads/n_layers/d_ff must be positive, max_len > 2, vocab " +
             std::to_string(seq::kVocabSize));
  }
  if (d_model % n_heads != 0) {
    fail("InvalidConfig", "d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " +
                              std::to_string(n_heads));
  }
}

std::vector<Tensor> TransformerParams::all() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> TransformerParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", tok_emb);
  out.emplace_back("pos_emb", pos_emb);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    std::string pre = "layer" + std::to_string(i) + ".";
    out.emplace_back(pre + "ln1.g", l.ln1_g);
    out.emplace_back(pre + "ln1.b", l.ln1_b);
    out.emplace_back(pre + "attn.wq", l.wq);
    out.emplace_back(pre + "attn.wk", l.wk);
    out.emplace_back(pre + "attn.wv", l.wv);
    out.emplace_back(pre + "attn.wo", l.wo);
    out.emplace_back(pre + "ln2.g", l.ln2_g);
    out.emplace_back(pre + "ln2.b", l.ln2_b);
    out.emplace_back(pre + "ffn.w1", l.w1);
    out.emplace_back(pre + "ffn.b1", l.b1);
    out.emplace_back(pre + "ffn.w2", l.w2);
    out.emplace_back(pre + "ffn.b2", l.b2);
  }
  out.emplace_back("ln_f.g", lnf_g);
  out.emplace_back("ln_f.b", lnf_b);
  out.emplace_back("out_proj", out_proj);
  return out;
}

namespace {

Tensor normal_tensor(num::Rng& rng, num::Shape shape, double std) {
  std::vector<double> v(std::size_t(num::numel(shape)));
  for (double& x : v) x = rng.normal(0.0, std);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

TransformerParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  num::Rng rng(seed);
  TransformerParams p;
  p.config = cfg;
  const double std = 0.02;
  p.tok_emb = normal_tensor(rng, {cfg.vocab, cfg.d_model}, std);
  p.pos_emb = normal_tensor(rng, {cfg.max_len, cfg.d_model}, std);
  for (int i = 0; i < cfg.n_layers; ++i) {
    LayerParams l;
    l.ln1_g = Tensor::full({cfg.d_model}, 1.0, true);
    l.ln1_b = Tensor::zeros({cfg.d_model}, true);
    l.wq = normal_tensor(rng, {cfg.d_model, cfg.d_model}, std);
    l.wk = normal_tensor(rng, {cfg.d_model, cfg.d_model}, std);
    l.wv = normal_tensor(rng, {cfg.d_model, cfg.d_model}, std);
    l.wo = normal_tensor(rng, {cfg.d_model, cfg.d_model}, std);
    l.ln2_g = Tensor::full({cfg.d_model}, 1.0, true);
    l.ln2_b = Tensor::zeros({cfg.d_model}, true);
    l.w1 = normal_tensor(rng, {cfg.d_model, cfg.d_ff}, std);
    l.b1 = Tensor::zeros({cfg.d_ff}, true);
    l.w2 = normal_tensor(rng, {cfg.d_ff, cfg.d_model}, std);
    l.b2 = Tensor::zeros({cfg.d_model}, true);
    p.layers.push_back(std::move(l));
  }
  p.lnf_g = Tensor::full({cfg.d_model}, 1.0, true);
  p.lnf_b = Tensor::zeros({cfg.d_model}, true);
  p.out_proj = normal_tensor(rng, {cfg.d_model, cfg.vocab}, std);
  return p;
}

TransformerParams clone_params(const TransformerParams& src) {
  auto copy = [](const Tensor& t) {
    return Tensor::from(t.shape(), {t.values().begin(), t.values().end()}, true);
  };
  TransformerParams p;
  p.config = src.config;
  p.tok_emb = copy(src.tok_emb);
  p.pos_emb = copy(src.pos_emb);
  for (const auto& l : src.layers) {
    LayerParams c;
    c.ln1_g = copy(l.ln1_g);
    c.ln1_b = copy(l.ln1_b);
    c.wq = copy(l.wq);
    c.wk = copy(l.wk);
    c.wv = copy(l.wv);
    c.wo = copy(l.wo);
    c.ln2_g = copy(l.ln2_g);
    c.ln2_b = copy(l.ln2_b);
    c.w1 = copy(l.w1);
    c.b1 = copy(l.b1);
    c.w2 = copy(l.w2);
    c.b2 = copy(l.b2);
    p.layers.push_back(std::move(c));
  }
  p.lnf_g = copy(src.lnf_g);
  p.lnf_b = copy(src.lnf_b);
  p.out_proj = copy(src.out_proj);
  return p;
}

TokenBatch make_batch(std::span<const seq::TcrSequence> seqs, bool append_eos,
                      int pad_to) {
  if (seqs.empty()) fail("EmptyCorpus", "make_batch: no sequences");
  int extra = append_eos ? 2 : 1;  // SOS (+ EOS)
  int len = 0;
  for (const auto& s : seqs) len = std::max(len, int(s.size()) + extra);
  if (pad_to >= 0) {
    if (pad_to < len) {
      fail("TooLong", "make_batch: rows need " + std::to_string(len) +
                          " positions, pad_to=" + std::to_string(pad_to));
    }
    len = pad_to;
  }
  TokenBatch b;
  b.batch = int(seqs.size());
  b.len = len;
  b.ids.assign(std::size_t(b.batch) * len, seq::kPad);
  for (int r = 0; r < b.batch; ++r) {
    const auto& s = seqs[std::size_t(r)];
    int* row = b.ids.data() + std::size_t(r) * len;
    row[0] = seq::kSos;
    for (std::size_t i = 0; i < s.size(); ++i) {
      int id = seq::residue_to_id(s[i]);
      if (id < 0) {
        fail("InvalidResidue", std::string("'") + s[i] + "' at position " +
                                   std::to_string(i));
      }
      row[1 + i] = id;
    }
    if (append_eos) row[1 + s.size()] = seq::kEos;
  }
  return b;
}

namespace {

void validate_batch(const TokenBatch& b, const ModelConfig& cfg) {
  if (b.batch <= 0 || b.len <= 0 ||
      b.ids.size() != std::size_t(b.batch) * std::size_t(b.len)) {
    fail("ShapeMismatch", "token batch: " + std::to_string(b.ids.size()) +
                              " ids for " + std::to_string(b.batch) + "x" +
                              std::to_string(b.len));
  }
  if (b.len > cfg.max_len) {
    fail("TooLong", "batch rows have " + std::to_string(b.len) +
                        " positions, max_len=" + std::to_string(cfg.max_len));
  }
  for (int r = 0; r < b.batch; ++r) {
    const int* row = b.ids.data() + std::size_t(r) * b.len;
    if (row[0] != seq::kSos) {
      fail("MalformedRow", "row " + std::to_string(r) + " does not start with SOS");
    }
    bool in_pad = false;
    bool seen_eos = false;
    for (int i = 1; i < b.len; ++i) {
      int id = row[i];
      if (id < 0 || id >= cfg.vocab) {
        fail("MalformedRow", "row " + std::to_string(r) + ": id " +
                                 std::to_string(id) + " out of range");
      }
      if (id == seq::kPad) {
        in_pad = true;
        continue;
      }
      if (in_pad) {
        fail("MalformedRow", "row " + std::to_string(r) + ": interior PAD");
      }
      if (seen_eos) {
        fail("MalformedRow",
             "row " + std::to_string(r) + ": token after EOS");
      }
      if (id == seq::kSos) {
        fail("MalformedRow", "row " + std::to_string(r) + ": repeated SOS");
      }
      if (id == seq::kEos) seen_eos = true;
    }
  }
}

}  // namespace

Tensor hidden_features(const TransformerParams& p, const TokenBatch& b) {
  p.config.validate();
  validate_batch(b, p.config);
  const auto& cfg = p.config;

  std::vector<int> pos(std::size_t(b.batch) * b.len);
  for (int r = 0; r < b.batch; ++r) {
    for (int i = 0; i < b.len; ++i) pos[std::size_t(r) * b.len + i] = i;
  }

  Tensor x = num::add(num::embedding_lookup(p.tok_emb, b.ids),
                      num::embedding_lookup(p.pos_emb, pos));

  for (const auto& l : p.layers) {
    Tensor xn = num::layer_norm(x, l.ln1_g, l.ln1_b);
    Tensor att = num::causal_attention(
        num::matmul(xn, l.wq), num::matmul(xn, l.wk), num::matmul(xn, l.wv),
        b.batch, b.len, cfg.n_heads);
    x = num::add(x, num::matmul(att, l.wo));

    Tensor hn = num::layer_norm(x, l.ln2_g, l.ln2_b);
    Tensor ff = num::relu(num::add_row_bias(num::matmul(hn, l.w1), l.b1));
    ff = num::add_row_bias(num::matmul(ff, l.w2), l.b2);
    x = num::add(x, ff);
  }
  return num::layer_norm(x, p.lnf_g, p.lnf_b);
}

Tensor project_logits(const TransformerParams& p, const Tensor& hidden) {
  std::vector<double> mask(std::size_t(p.config.vocab), 0.0);
  mask[seq::kPad] = kMaskedLogit;
  mask[seq::kSos] = kMaskedLogit;
  Tensor mask_bias = Tensor::from({p.config.vocab}, std::move(mask));
  return num::add_row_bias(num::matmul(hidden, p.out_proj), mask_bias);
}

Tensor forward(const TransformerParams& p, const TokenBatch& b) {
  return project_logits(p, hidden_features(p, b));
}

}  // namespace tcrlm::model
