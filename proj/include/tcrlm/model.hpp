#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tcrlm/seqcore.hpp"
#include "tcrlm/tensor.hpp"

namespace tcrlm::model {

// PAD/SOS output logits are pinned here before any softmax: large enough
// that exp underflows to exactly 0 (giving the 21-symbol support an exact
// total of 1) while keeping every stored value finite.
inline constexpr double kMaskedLogit = -1e9;

struct ModelConfig {
  int d_model = 32;
  int n_heads = 8;
  int n_layers = 6;
  int d_ff = 128;
  int max_len = 32;  // token positions including SOS/EOS
  int vocab = seq::kVocabSize;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // InvalidConfig
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  num::Tensor ln1_g, ln1_b;
  num::Tensor wq, wk, wv, wo;        // [d,d], no biases
  num::Tensor ln2_g, ln2_b;
  num::Tensor w1, b1, w2, b2;        // d→d_ff→d, with biases
};

struct TransformerParams {
  ModelConfig config;
  num::Tensor tok_emb;   // [vocab, d]
  num::Tensor pos_emb;   // [max_len, d]
  std::vector<LayerParams> layers;
  num::Tensor lnf_g, lnf_b;
  num::Tensor out_proj;  // [d, vocab], no bias

  std::vector<num::Tensor> all() const;
  std::vector<std::pair<std::string, num::Tensor>> named() const;
};

// Scaled-normal init (std 0.02) for embeddings/projections; layer-norm
// gains 1, offsets 0; FFN biases 0. Deterministic per seed.
TransformerParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// Deep copy with fresh leaf tensors (detached from any tape).
TransformerParams clone_params(const TransformerParams& p);

// Row-major [batch, len] token matrix. Rows are [SOS, residues...,
// optional EOS, PAD...]; trailing PAD only.
struct TokenBatch {
  std::vector<int> ids;
  int batch = 0;
  int len = 0;
};

// Pads all rows to the longest (or pad_to if given); append_eos adds the
// EOS token after the residues (needed for feature extraction / critic).
TokenBatch make_batch(std::span<const seq::TcrSequence> seqs, bool append_eos,
                      int pad_to = -1);

// Final-block output after the closing layer norm: [batch·len, d_model].
num::Tensor hidden_features(const TransformerParams& p, const TokenBatch& b);

// Output projection of a hidden-feature matrix, with PAD/SOS output columns
// masked to kMaskedLogit.
num::Tensor project_logits(const TransformerParams& p, const num::Tensor& hidden);

// Full forward: logits [batch·len, vocab]. Position i conditions only on
// tokens 0..i; PAD-position rows are produced but carry no meaning.
num::Tensor forward(const TransformerParams& p, const TokenBatch& b);

// ---------- checkpoints ----------
// Binary: magic "TCRG", u32 version (=1), six u32 config fields, symbol
// table, named f32 tensor records, trailing CRC-32 — all little-endian.

void save_checkpoint(const TransformerParams& p, const std::string& path);
TransformerParams load_checkpoint(const std::string& path);

// CRC-32 of an entire file; used as a short content id in artifact headers.
std::uint32_t file_crc32(const std::string& path);

}  // namespace tcrlm::model
