#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <zlib.h>

#include <cmath>
#include <fstream>

#include "support/test_util.hpp"
#include "tcrlm/model.hpp"
#include "tcrlm/tensor.hpp"

using namespace tcrlm;
using testutil::category_of;

namespace {

model::ModelConfig toy_config() {
  model::ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.d_ff = 16;
  cfg.max_len = 8;
  return cfg;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(model::ModelConfig{}.validate());
  model::ModelConfig bad = toy_config();
  bad.n_heads = 3;  // must divide d_model
  CHECK(category_of([&] { bad.validate(); }) == "InvalidConfig");
  bad = toy_config();
  bad.max_len = 2;  // no room for SOS + residue + EOS
  CHECK(category_of([&] { bad.validate(); }) == "InvalidConfig");
  bad = toy_config();
  bad.d_model = 0;
  CHECK(category_of([&] { bad.validate(); }) == "InvalidConfig");
}

TEST_CASE("init is deterministic per seed and matches the stated scheme") {
  const auto cfg = toy_config();
  const auto a = model::init_params(cfg, 9);
  const auto b = model::init_params(cfg, 9);
  const auto c = model::init_params(cfg, 10);

  const auto av = a.all();
  const auto bv = b.all();
  const auto cv = c.all();
  REQUIRE(av.size() == bv.size());
  bool identical = true, differs = false;
  for (std::size_t i = 0; i < av.size(); ++i) {
    for (std::size_t j = 0; j < std::size_t(av[i].size()); ++j) {
      identical = identical && av[i].values()[j] == bv[i].values()[j];
      differs = differs || av[i].values()[j] != cv[i].values()[j];
    }
  }
  CHECK(identical);
  CHECK(differs);

  // layer norms start at identity; weights are small and not all zero
  for (const auto& layer : a.layers) {
    for (std::size_t j = 0; j < std::size_t(layer.ln1_g.size()); ++j) {
      CHECK(layer.ln1_g.values()[j] == 1.0);
      CHECK(layer.ln1_b.values()[j] == 0.0);
    }
    for (std::size_t j = 0; j < std::size_t(layer.b1.size()); ++j)
      CHECK(layer.b1.values()[j] == 0.0);
  }
  double max_abs = 0.0;
  for (std::size_t j = 0; j < std::size_t(a.tok_emb.size()); ++j)
    max_abs = std::max(max_abs, std::abs(a.tok_emb.values()[j]));
  CHECK(max_abs > 0.0);
  CHECK(max_abs < 0.2);  // N(0, 0.02^2) draws stay well inside this

  // every parameter participates in the gradient tape
  for (const auto& t : av) CHECK(t.requires_grad());
}

TEST_CASE("make_batch pads to the longest row and frames correctly") {
  const std::vector<seq::TcrSequence> seqs{"ACY", "A"};
  const auto b = model::make_batch(seqs, /*append_eos=*/true);
  CHECK(b.batch == 2);
  CHECK(b.len == 5);  // SOS + 3 residues + EOS
  const std::vector<int> want{1, 3, 4, 22, 2,  //
                              1, 3, 2, 0, 0};
  REQUIRE(b.ids.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(b.ids[i] == want[i]);

  const auto nb = model::make_batch(seqs, /*append_eos=*/false);
  CHECK(nb.len == 4);  // SOS + residues, no EOS
  CHECK(nb.ids[3] == 22);

  const auto padded = model::make_batch(seqs, true, 7);
  CHECK(padded.len == 7);
  CHECK(padded.ids[6] == 0);
  CHECK(category_of([&] { model::make_batch(seqs, true, 3); }) == "TooLong");
  CHECK(category_of([&] {
          model::make_batch(std::vector<seq::TcrSequence>{}, true);
        }) == "EmptyCorpus");
}

TEST_CASE("forward output: shape, masked columns, exact 21-symbol support") {
  const auto p = model::init_params(toy_config(), 3);
  const auto b = model::make_batch(std::vector<seq::TcrSequence>{"ACY", "GG"},
                                   true);
  num::NoGradGuard guard;
  const auto logits = model::forward(p, b);
  REQUIRE(logits.dim(0) == b.batch * b.len);
  REQUIRE(logits.dim(1) == seq::kVocabSize);

  // the mask is an additive bias, so the column is kMaskedLogit plus an
  // O(1) raw logit — astronomically negative is the contract, not equality
  for (int r = 0; r < logits.dim(0); ++r) {
    const auto row = logits.values().subspan(std::size_t(r) * 23, 23);
    CHECK(row[seq::kPad] < model::kMaskedLogit * 0.5);
    CHECK(row[seq::kSos] < model::kMaskedLogit * 0.5);
  }

  // after softmax the PAD/SOS mass is exactly zero, the rest sums to ~1
  const auto probs = num::row_softmax(logits);
  for (int r = 0; r < probs.dim(0); ++r) {
    const auto row = probs.values().subspan(std::size_t(r) * 23, 23);
    CHECK(row[seq::kPad] == 0.0);
    CHECK(row[seq::kSos] == 0.0);
    double total = 0.0;
    for (double v : row) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("causality: position t ignores every later token") {
  const auto p = model::init_params(toy_config(), 5);
  num::NoGradGuard guard;
  const std::vector<seq::TcrSequence> base{"ACYGG"};
  const std::vector<seq::TcrSequence> edited{"ACYWW"};  // suffix changed
  const auto lb = model::forward(p, model::make_batch(base, true));
  const auto le = model::forward(p, model::make_batch(edited, true));
  // positions 0..3 (SOS,A,C,Y) see identical prefixes -> identical logits
  for (int t = 0; t < 4; ++t) {
    for (int c = 0; c < 23; ++c) {
      CHECK(lb.values()[std::size_t(t) * 23 + std::size_t(c)] ==
            le.values()[std::size_t(t) * 23 + std::size_t(c)]);
    }
  }
  // position 4 conditions on the fourth residue, which differs
  bool any_diff = false;
  for (int c = 0; c < 23; ++c)
    any_diff = any_diff ||
               lb.values()[4 * 23 + std::size_t(c)] !=
                   le.values()[4 * 23 + std::size_t(c)];
  CHECK(any_diff);
}

TEST_CASE("batch composition does not change per-sequence logits") {
  const auto p = model::init_params(toy_config(), 6);
  num::NoGradGuard guard;
  const std::vector<seq::TcrSequence> both{"ACY", "GGF"};
  const std::vector<seq::TcrSequence> solo{"ACY"};
  const auto lb = model::forward(p, model::make_batch(both, true));
  const auto ls = model::forward(p, model::make_batch(solo, true));
  for (std::size_t i = 0; i < std::size_t(ls.size()); ++i)
    CHECK(ls.values()[i] == lb.values()[i]);
}

TEST_CASE("end-to-end gradient check at a reduced width") {
  // the full toy-config check lives in the acceptance suite; this quick
  // version guards the wiring on every unit run
  model::ModelConfig cfg;
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.d_ff = 8;
  cfg.max_len = 6;
  auto p = model::init_params(cfg, 1);
  const auto b = model::make_batch(std::vector<seq::TcrSequence>{"ACY"}, true);
  const std::vector<int> targets{3, 4, 22, 2, 0};
  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 0};
  const auto params = p.all();
  // h = 1e-5: at the tight init scale, a coarser step would straddle relu
  // kinks and corrupt the difference quotient, not the gradients
  const auto report = num::grad_check_params(
      [&] { return num::cross_entropy(model::forward(p, b), targets, mask); },
      params, 1e-5, 1e-4);
  CAPTURE(report.max_rel_error);
  CHECK(report.pass);
  CHECK(report.n_checked > 100);
}

TEST_CASE("checkpoint round trip is bit-exact on logits") {
  testutil::TempDir tmp;
  const auto path = tmp.file("model.tcrg").string();
  const auto p = model::init_params(toy_config(), 21);
  model::save_checkpoint(p, path);
  const auto q = model::load_checkpoint(path);
  CHECK(q.config == p.config);

  // stored weights are f32, so compare the reloaded model against a
  // round-tripped copy of itself: save/load twice must agree bitwise
  const auto path2 = tmp.file("model2.tcrg").string();
  model::save_checkpoint(q, path2);
  const auto r = model::load_checkpoint(path2);
  num::NoGradGuard guard;
  const auto b = model::make_batch(std::vector<seq::TcrSequence>{"ACYGG"},
                                   true);
  const auto lq = model::forward(q, b);
  const auto lr = model::forward(r, b);
  REQUIRE(lq.size() == lr.size());
  for (std::size_t i = 0; i < std::size_t(lq.size()); ++i)
    CHECK(lq.values()[i] == lr.values()[i]);

  // f32 quantization distance from the original stays tiny
  const auto lp = model::forward(p, b);
  for (std::size_t i = 0; i < std::size_t(lp.size()); ++i) {
    if (lp.values()[i] == model::kMaskedLogit) {
      CHECK(lq.values()[i] == model::kMaskedLogit);
    } else {
      CHECK(lq.values()[i] == doctest::Approx(lp.values()[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("checkpoint file corruption is detected") {
  testutil::TempDir tmp;
  const auto path = tmp.file("model.tcrg").string();
  model::save_checkpoint(model::init_params(toy_config(), 4), path);
  auto bytes = testutil::slurp(path);
  REQUIRE(bytes.size() > 64);

  SUBCASE("wrong magic") {
    bytes[0] = 'X';
    testutil::write_file(tmp.file("bad.tcrg"), bytes);
    CHECK(category_of([&] {
            model::load_checkpoint(tmp.file("bad.tcrg").string());
          }) == "BadMagic");
  }
  SUBCASE("unsupported version") {
    bytes[4] = char(99);
    testutil::write_file(tmp.file("bad.tcrg"), bytes);
    CHECK(category_of([&] {
            model::load_checkpoint(tmp.file("bad.tcrg").string());
          }) == "UnsupportedVersion");
  }
  SUBCASE("flipped payload byte fails the checksum") {
    bytes[bytes.size() / 2] = char(bytes[bytes.size() / 2] ^ 0x40);
    testutil::write_file(tmp.file("bad.tcrg"), bytes);
    CHECK(category_of([&] {
            model::load_checkpoint(tmp.file("bad.tcrg").string());
          }) == "CrcMismatch");
  }
  SUBCASE("renamed record leaves an expected tensor missing") {
    // find the first tensor-name occurrence and alter it, then repair the
    // trailing CRC so only the name check can fail
    const std::string needle = "tok_emb";
    const auto pos = bytes.find(needle);
    REQUIRE(pos != std::string::npos);
    bytes[pos] = 'x';
    const std::uint32_t crc = ::crc32(
        0, reinterpret_cast<const Bytef*>(bytes.data()),
        uInt(bytes.size() - 4));
    for (int i = 0; i < 4; ++i)
      bytes[bytes.size() - 4 + std::size_t(i)] = char((crc >> (8 * i)) & 0xFF);
    testutil::write_file(tmp.file("bad.tcrg"), bytes);
    try {
      model::load_checkpoint(tmp.file("bad.tcrg").string());
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.category() == "MissingTensor");
      CHECK(std::string(e.what()).find("tok_emb") != std::string::npos);
    }
  }
  SUBCASE("truncated file") {
    testutil::write_file(tmp.file("bad.tcrg"),
                         bytes.substr(0, bytes.size() - 9));
    const auto cat = category_of(
        [&] { model::load_checkpoint(tmp.file("bad.tcrg").string()); });
    CHECK((cat == "CrcMismatch" || cat == "Io"));
  }
  SUBCASE("missing file") {
    CHECK(category_of([&] {
            model::load_checkpoint(tmp.file("absent.tcrg").string());
          }) == "Io");
  }
}

TEST_CASE("file_crc32 changes with content") {
  testutil::TempDir tmp;
  testutil::write_file(tmp.file("a"), "hello");
  testutil::write_file(tmp.file("b"), "hello");
  testutil::write_file(tmp.file("c"), "hellp");
  CHECK(model::file_crc32(tmp.file("a").string()) ==
        model::file_crc32(tmp.file("b").string()));
  CHECK(model::file_crc32(tmp.file("a").string()) !=
        model::file_crc32(tmp.file("c").string()));
  // frozen reference: CRC-32 of "123456789" is the classic check value
  testutil::write_file(tmp.file("d"), "123456789");
  CHECK(model::file_crc32(tmp.file("d").string()) == 0xCBF43926u);
}
