#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "tcrlm/model.hpp"

namespace tcrlm::model {

using num::Tensor;

namespace {

constexpr char kMagic[4] = {'T', 'C', 'R', 'G'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  buf.push_back(std::uint8_t(v & 0xFF));
  buf.push_back(std::uint8_t((v >> 8) & 0xFF));
  buf.push_back(std::uint8_t((v >> 16) & 0xFF));
  buf.push_back(std::uint8_t((v >> 24) & 0xFF));
}

void put_f32(std::vector<std::uint8_t>& buf, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(buf, bits);
}

struct Reader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > size) {
      fail("ParseError", "checkpoint structure overruns file");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = std::uint32_t(data[pos]) |
                      std::uint32_t(data[pos + 1]) << 8 |
                      std::uint32_t(data[pos + 2]) << 16 |
                      std::uint32_t(data[pos + 3]) << 24;
    pos += 4;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data + pos), n);
    pos += n;
    return s;
  }
};

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("Io", "cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (in.bad()) fail("Io", "read failure on " + path);
  return buf;
}

void write_file_atomic(const std::string& path,
                       const std::vector<std::uint8_t>& buf) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail("Io", "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(buf.data()),
              std::streamsize(buf.size()));
    if (!out.flush()) fail("Io", "write failure on " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    fail("Io", "cannot rename " + tmp + " to " + path);
  }
}

}  // namespace

void save_checkpoint(const TransformerParams& p, const std::string& path) {
  p.config.validate();
  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  put_u32(buf, kVersion);
  const auto& c = p.config;
  for (int v : {c.d_model, c.n_heads, c.n_layers, c.d_ff, c.max_len, c.vocab}) {
    put_u32(buf, std::uint32_t(v));
  }
  const auto& symbols = seq::vocabulary_symbols();
  put_u32(buf, std::uint32_t(symbols.size()));
  for (const auto& s : symbols) {
    buf.push_back(std::uint8_t(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
  }
  auto named = p.named();
  put_u32(buf, std::uint32_t(named.size()));
  for (const auto& [name, t] : named) {
    put_u32(buf, std::uint32_t(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put_u32(buf, std::uint32_t(t.ndim()));
    for (int d : t.shape()) put_u32(buf, std::uint32_t(d));
    for (double v : t.values()) put_f32(buf, float(v));
  }
  std::uint32_t crc =
      std::uint32_t(::crc32(0, buf.data(), uInt(buf.size())));
  put_u32(buf, crc);
  write_file_atomic(path, buf);
}

TransformerParams load_checkpoint(const std::string& path) {
  auto buf = read_file(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    fail("BadMagic", path + " is not a checkpoint file");
  }
  Reader r{buf.data(), buf.size()};
  r.pos = 4;
  std::uint32_t version = r.u32();
  if (version != kVersion) {
    fail("UnsupportedVersion", "checkpoint version " + std::to_string(version) +
                                   ", expected " + std::to_string(kVersion));
  }
  if (buf.size() < 12) fail("CrcMismatch", "file truncated before checksum");
  std::uint32_t stored_crc =
      std::uint32_t(buf[buf.size() - 4]) |
      std::uint32_t(buf[buf.size() - 3]) << 8 |
      std::uint32_t(buf[buf.size() - 2]) << 16 |
      std::uint32_t(buf[buf.size() - 1]) << 24;
  std::uint32_t actual_crc =
      std::uint32_t(::crc32(0, buf.data(), uInt(buf.size() - 4)));
  if (stored_crc != actual_crc) {
    fail("CrcMismatch", "stored checksum does not match file contents");
  }
  r.size = buf.size() - 4;

  ModelConfig cfg;
  cfg.d_model = int(r.u32());
  cfg.n_heads = int(r.u32());
  cfg.n_layers = int(r.u32());
  cfg.d_ff = int(r.u32());
  cfg.max_len = int(r.u32());
  cfg.vocab = int(r.u32());
  cfg.validate();

  std::uint32_t n_symbols = r.u32();
  const auto& expected_symbols = seq::vocabulary_symbols();
  if (n_symbols != expected_symbols.size()) {
    fail("InvalidConfig", "checkpoint vocabulary has " +
                              std::to_string(n_symbols) + " symbols");
  }
  for (std::uint32_t i = 0; i < n_symbols; ++i) {
    r.need(1);
    std::size_t len = r.data[r.pos++];
    std::string sym = r.bytes(len);
    if (sym != expected_symbols[i]) {
      fail("InvalidConfig", "checkpoint vocabulary symbol " +
                                std::to_string(i) + " is '" + sym + "'");
    }
  }

  std::uint32_t n_tensors = r.u32();
  std::unordered_map<std::string, Tensor> records;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.bytes(r.u32());
    std::uint32_t ndim = r.u32();
    num::Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(int(r.u32()));
    std::int64_t n = num::numel(shape);
    std::vector<double> values(static_cast<std::size_t>(n));
    for (auto& v : values) v = double(r.f32());
    if (!records.emplace(name, Tensor::from(std::move(shape),
                                            std::move(values), true))
             .second) {
      fail("MissingTensor", "duplicate tensor record '" + name + "'");
    }
  }
  if (r.pos != r.size) fail("ParseError", "trailing bytes after tensor records");

  // Assemble in canonical order, verifying shapes against the config.
  TransformerParams skeleton;
  skeleton.config = cfg;
  auto take = [&records](const std::string& name, num::Shape want) {
    auto it = records.find(name);
    if (it == records.end()) {
      fail("MissingTensor", "checkpoint lacks tensor '" + name + "'");
    }
    if (it->second.shape() != want) {
      fail("ShapeMismatch", "tensor '" + name + "' has shape " +
                                num::shape_str(it->second.shape()) +
                                ", expected " + num::shape_str(want));
    }
    Tensor t = it->second;
    records.erase(it);
    return t;
  };

  int d = cfg.d_model, ff = cfg.d_ff;
  skeleton.tok_emb = take("tok_emb", {cfg.vocab, d});
  skeleton.pos_emb = take("pos_emb", {cfg.max_len, d});
  for (int i = 0; i < cfg.n_layers; ++i) {
    std::string pre = "layer" + std::to_string(i) + ".";
    LayerParams l;
    l.ln1_g = take(pre + "ln1.g", {d});
    l.ln1_b = take(pre + "ln1.b", {d});
    l.wq = take(pre + "attn.wq", {d, d});
    l.wk = take(pre + "attn.wk", {d, d});
    l.wv = take(pre + "attn.wv", {d, d});
    l.wo = take(pre + "attn.wo", {d, d});
    l.ln2_g = take(pre + "ln2.g", {d});
    l.ln2_b = take(pre + "ln2.b", {d});
    l.w1 = take(pre + "ffn.w1", {d, ff});
    l.b1 = take(pre + "ffn.b1", {ff});
    l.w2 = take(pre + "ffn.w2", {ff, d});
    l.b2 = take(pre + "ffn.b2", {d});
    skeleton.layers.push_back(std::move(l));
  }
  skeleton.lnf_g = take("ln_f.g", {d});
  skeleton.lnf_b = take("ln_f.b", {d});
  skeleton.out_proj = take("out_proj", {d, cfg.vocab});
  if (!records.empty()) {
    fail("MissingTensor",
         "unexpected tensor record '" + records.begin()->first + "'");
  }
  return skeleton;
}

std::uint32_t file_crc32(const std::string& path) {
  auto buf = read_file(path);
  return std::uint32_t(::crc32(0, buf.data(), uInt(buf.size())));
}

}  // namespace tcrlm::model
